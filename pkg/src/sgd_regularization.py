#!/usr/bin/env python3
"""
SGD Lab Regularization Module

Kernels and the convex-analytic maps built on them: the regularized best
response (mirror map), Bregman divergence, Fenchel coupling, mirror Jacobian
and its traces, and the rate function used by face-convergence estimates.

Every kernel here is a decomposable regularizer h(x) = sum_a theta(x_a) that
is steep at 0, strongly convex, and has a negative third derivative.
All functions accept a trailing action axis and broadcast over leading axes.
"""

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple, Type

import numpy as np
from scipy.special import softmax, xlogy


MIRROR_TOLERANCE = 1e-13
MIRROR_MAX_ITERATIONS = 100
DIAGNOSTIC_FLOOR = 1e-300


class DomainError(ValueError):
    """Raised when a point lies outside the domain of a convex-analytic map."""


class MirrorConvergenceError(RuntimeError):
    """Root finding for the mirror multiplier did not converge."""

    def __init__(self, kernel: str, lower: float, upper: float, multiplier: float, residual: float, iterations: int):
        self.kernel = kernel
        self.lower = lower
        self.upper = upper
        self.multiplier = multiplier
        self.residual = residual
        self.iterations = iterations
        super().__init__(
            f"Mirror map for kernel '{kernel}' did not converge after {iterations} iterations: "
            f"bracket=[{lower:.17g}, {upper:.17g}], multiplier={multiplier:.17g}, residual={residual:.3e}"
        )


# =============================================================================
# Kernels
# =============================================================================

class Kernel:
    """
    Scalar kernel theta generating h(x) = sum_a theta(x_a).

    Subclasses implement the value, its first three derivatives, the inverse
    of the first derivative, and 1/theta'' (which stays finite at 0).
    """

    name: str = "kernel"
    bounded: bool = True

    def value(self, z):
        raise NotImplementedError

    def d1(self, z):
        raise NotImplementedError

    def d2(self, z):
        raise NotImplementedError

    def d3(self, z):
        raise NotImplementedError

    def inverse_d1(self, w):
        """(theta')^{-1}(w); defined for every w up to theta'(1) at least."""
        raise NotImplementedError

    def inverse_curvature(self, z):
        """g(z) = 1 / theta''(z), extended continuously by g(0) = 0."""
        raise NotImplementedError

    @property
    def spec(self) -> str:
        """Config string that get_kernel maps back to this kernel."""
        return self.name

    @property
    def value_at_zero(self) -> float:
        return float(self.value(0.0)) if self.bounded else np.inf

    @property
    def slope_at_one(self) -> float:
        return float(self.d1(1.0))

    @property
    def min_value(self) -> float:
        """min of theta over [0, 1]."""
        raise NotImplementedError

    def growth_ratio(self, z):
        """|theta'''| / theta''^2, whose supremum is the kernel growth constant."""
        z = np.asarray(z, dtype=float)
        return np.abs(self.d3(z)) * self.inverse_curvature(z) ** 2

    def __repr__(self) -> str:
        return f"Kernel({self.spec})"


@dataclass(frozen=True, repr=False)
class EntropicKernel(Kernel):
    """theta(z) = z log z; its mirror map is the logit choice map."""

    name = "entropic"
    bounded = True

    def value(self, z):
        z = np.asarray(z, dtype=float)
        return xlogy(z, z)

    def d1(self, z):
        return 1.0 + np.log(z)

    def d2(self, z):
        return 1.0 / np.asarray(z, dtype=float)

    def d3(self, z):
        return -1.0 / np.asarray(z, dtype=float) ** 2

    def inverse_d1(self, w):
        return np.exp(np.asarray(w, dtype=float) - 1.0)

    def inverse_curvature(self, z):
        return np.array(z, dtype=float)

    @property
    def min_value(self) -> float:
        return -1.0 / np.e


@dataclass(frozen=True, repr=False)
class LogBarrierKernel(Kernel):
    """theta(z) = -log z; unbounded at 0, mirror map gives affine scaling."""

    name = "log_barrier"
    bounded = False

    def value(self, z):
        with np.errstate(divide="ignore"):
            return -np.log(z)

    def d1(self, z):
        return -1.0 / np.asarray(z, dtype=float)

    def d2(self, z):
        return 1.0 / np.asarray(z, dtype=float) ** 2

    def d3(self, z):
        return -2.0 / np.asarray(z, dtype=float) ** 3

    def inverse_d1(self, w):
        # only negative arguments are in the range of theta'
        return -1.0 / np.asarray(w, dtype=float)

    def inverse_curvature(self, z):
        return np.asarray(z, dtype=float) ** 2

    @property
    def min_value(self) -> float:
        return 0.0


@dataclass(frozen=True, repr=False)
class TsallisKernel(Kernel):
    """theta(z) = (z^q - z) / (q (q - 1)) for q in (0, 1)."""

    q: float = 0.5

    name = "tsallis"
    bounded = True

    def __post_init__(self):
        if not 0.0 < self.q < 1.0:
            raise ValueError(f"Tsallis exponent must lie in (0, 1), got q={self.q}")

    @property
    def spec(self) -> str:
        return f"tsallis:q={self.q:g}"

    @property
    def _scale(self) -> float:
        return self.q * (self.q - 1.0)

    def value(self, z):
        z = np.asarray(z, dtype=float)
        return (z ** self.q - z) / self._scale

    def d1(self, z):
        z = np.asarray(z, dtype=float)
        return (self.q * z ** (self.q - 1.0) - 1.0) / self._scale

    def d2(self, z):
        return np.asarray(z, dtype=float) ** (self.q - 2.0)

    def d3(self, z):
        return (self.q - 2.0) * np.asarray(z, dtype=float) ** (self.q - 3.0)

    def inverse_d1(self, w):
        base = (1.0 + np.asarray(w, dtype=float) * self._scale) / self.q
        return base ** (1.0 / (self.q - 1.0))

    def inverse_curvature(self, z):
        return np.asarray(z, dtype=float) ** (2.0 - self.q)

    @property
    def min_value(self) -> float:
        return float(self.value(self.q ** (1.0 / (1.0 - self.q))))


SUPPORTED_KERNELS: Dict[str, Type[Kernel]] = {
    "entropic": EntropicKernel,
    "log_barrier": LogBarrierKernel,
    "tsallis": TsallisKernel,
}


def get_kernel(spec: str) -> Kernel:
    """
    Build a kernel from its config string.

    Args:
        spec: "entropic", "log_barrier", "tsallis" or "tsallis:q=<value>"

    Returns:
        Kernel instance
    """
    if isinstance(spec, Kernel):
        return spec
    text = str(spec).strip()
    name, _, options = text.partition(":")
    name = name.strip()
    if name not in SUPPORTED_KERNELS:
        raise ValueError(
            f"Unsupported kernel: {spec}. "
            f"Supported kernels: {list(SUPPORTED_KERNELS.keys())}"
        )
    if name != "tsallis":
        if options:
            raise ValueError(f"Kernel '{name}' takes no options, got '{options}'")
        return SUPPORTED_KERNELS[name]()
    if not options:
        return TsallisKernel()
    key, _, raw = options.partition("=")
    if key.strip() != "q" or not raw:
        raise ValueError(f"Tsallis options must look like 'q=<value>', got '{options}'")
    try:
        q = float(raw)
    except ValueError:
        raise ValueError(f"Tsallis exponent is not a number: '{raw}'")
    return TsallisKernel(q)


def curvature_floor(kernel: Kernel, resolution: int = 10_000) -> float:
    """Numerical inf of theta'' over (0, 1] on a probe grid."""
    grid = np.linspace(1.0 / resolution, 1.0, resolution)
    return float(np.min(kernel.d2(grid)))


# =============================================================================
# Regularizer set
# =============================================================================

@dataclass(frozen=True)
class RegularizerSet:
    """One kernel per player."""
    kernels: Tuple[Kernel, ...]

    def __post_init__(self):
        kernels = tuple(get_kernel(kernel) for kernel in self.kernels)
        if not kernels:
            raise ValueError("A regularizer set needs at least one kernel")
        object.__setattr__(self, "kernels", kernels)

    @classmethod
    def uniform(cls, kernel, num_players: int) -> "RegularizerSet":
        return cls(tuple(get_kernel(kernel) for _ in range(num_players)))

    @classmethod
    def from_specs(cls, specs: Sequence[str]) -> "RegularizerSet":
        return cls(tuple(get_kernel(spec) for spec in specs))

    def __len__(self) -> int:
        return len(self.kernels)

    def __getitem__(self, player: int) -> Kernel:
        return self.kernels[player]

    @property
    def all_bounded(self) -> bool:
        return all(kernel.bounded for kernel in self.kernels)

    @property
    def specs(self) -> List[str]:
        return [kernel.spec for kernel in self.kernels]

    def check_players(self, num_players: int):
        if len(self.kernels) != num_players:
            raise ValueError(f"Got {len(self.kernels)} kernels for a {num_players}-player game")

    def mirror_flat(self, scores: np.ndarray, offsets: Sequence[Tuple[int, int]]) -> np.ndarray:
        """Per-player mirror map on flat score rows of shape (..., sum A_i)."""
        scores = np.asarray(scores, dtype=float)
        out = np.empty_like(scores)
        for kernel, (start, stop) in zip(self.kernels, offsets):
            out[..., start:stop] = mirror(kernel, scores[..., start:stop])
        return out

    def gradient_flat(self, strategies: np.ndarray, offsets: Sequence[Tuple[int, int]]) -> np.ndarray:
        """Per-player theta'(x) on flat strategy rows; every coordinate must be positive."""
        strategies = np.asarray(strategies, dtype=float)
        out = np.empty_like(strategies)
        for kernel, (start, stop) in zip(self.kernels, offsets):
            out[..., start:stop] = kernel_gradient(kernel, strategies[..., start:stop])
        return out


# =============================================================================
# Mirror map
# =============================================================================

def _solve_multiplier(
    kernel: Kernel,
    scores: np.ndarray,
    tol: float,
    max_iterations: int
) -> np.ndarray:
    """
    Solve sum_a (theta')^{-1}(y_a - mu) = 1 for mu, one row at a time in parallel.

    The root is bracketed by max(y) - theta'(1) (sum >= 1) and
    max(y) - theta'(1/A) (sum <= 1). Newton steps start from the lower end and
    increase monotonically because the inverse derivative is convex; any step
    that leaves the bracket is replaced by bisection.
    """
    count = scores.shape[-1]
    top = scores.max(axis=-1)
    lower = top - kernel.slope_at_one
    upper = top - float(kernel.d1(1.0 / count))
    multiplier = lower.copy()
    pending = np.arange(scores.shape[0])
    residual = np.zeros(scores.shape[0])

    for _ in range(max_iterations):
        rows = scores[pending]
        mu = multiplier[pending]
        x = kernel.inverse_d1(rows - mu[:, None])
        res = x.sum(axis=-1) - 1.0
        residual[pending] = res
        done = np.abs(res) <= tol
        if np.all(done):
            return multiplier

        keep = ~done
        pending, mu, res, x = pending[keep], mu[keep], res[keep], x[keep]
        lo = np.where(res > 0, mu, lower[pending])
        hi = np.where(res < 0, mu, upper[pending])
        lower[pending], upper[pending] = lo, hi

        step = mu + res / kernel.inverse_curvature(x).sum(axis=-1)
        outside = ~((step > lo) & (step < hi))
        step[outside] = 0.5 * (lo[outside] + hi[outside])
        multiplier[pending] = step

    worst = pending[np.argmax(np.abs(residual[pending]))]
    raise MirrorConvergenceError(
        kernel.spec, float(lower[worst]), float(upper[worst]),
        float(multiplier[worst]), float(residual[worst]), max_iterations
    )


def mirror_with_multiplier(
    kernel: Kernel,
    scores,
    tol: float = MIRROR_TOLERANCE,
    max_iterations: int = MIRROR_MAX_ITERATIONS
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Root-finding mirror map that also returns the KKT multiplier mu.

    Returns:
        (x, mu) with y_a = theta'(x_a) + mu and sum_a x_a = 1
    """
    scores = np.asarray(scores, dtype=float)
    if scores.ndim == 0 or scores.shape[-1] < 1:
        raise DomainError(f"Score vector must have at least one coordinate, got shape {scores.shape}")
    if not np.all(np.isfinite(scores)):
        raise DomainError("Score vector contains non-finite entries")
    rows = scores.reshape(-1, scores.shape[-1])
    mu = _solve_multiplier(kernel, rows, tol, max_iterations)
    x = kernel.inverse_d1(rows - mu[:, None])
    return x.reshape(scores.shape), mu.reshape(scores.shape[:-1])


def mirror(kernel: Kernel, scores, method: str = "auto") -> np.ndarray:
    """
    Regularized best response Q(y) = argmax_x {<y, x> - sum_a theta(x_a)}.

    Args:
        kernel: Kernel of the regularizer
        scores: Score vector(s), action axis last
        method: "auto" (closed-form logit for the entropic kernel, root
            finding otherwise) or "root" (always root finding)

    Returns:
        Strictly interior simplex vector(s) of the same shape
    """
    if method not in ("auto", "root"):
        raise ValueError(f"Unknown mirror method: {method}")
    if method == "auto" and isinstance(kernel, EntropicKernel):
        scores = np.asarray(scores, dtype=float)
        if not np.all(np.isfinite(scores)):
            raise DomainError("Score vector contains non-finite entries")
        return softmax(scores, axis=-1)
    x, _ = mirror_with_multiplier(kernel, scores)
    return x


def kernel_gradient(kernel: Kernel, strategies) -> np.ndarray:
    """theta'(x) coordinatewise; the strategy must be strictly interior."""
    strategies = np.asarray(strategies, dtype=float)
    if np.any(strategies <= 0):
        raise DomainError("theta' is undefined on the boundary of the simplex")
    return kernel.d1(strategies)


def diagnostic_gradient(kernel: Kernel, strategies) -> np.ndarray:
    """theta'(x) with coordinates floored at 1e-300, for reporting only."""
    return kernel.d1(np.maximum(np.asarray(strategies, dtype=float), DIAGNOSTIC_FLOOR))


def mirror_is_lipschitz_probe(kernel: Kernel, scores, other_scores) -> float:
    """Ratio ||Q(y') - Q(y)|| / ||y' - y|| in the Euclidean norm."""
    scores = np.asarray(scores, dtype=float)
    other_scores = np.asarray(other_scores, dtype=float)
    gap = np.linalg.norm(other_scores - scores)
    if gap == 0:
        raise DomainError("Lipschitz ratio is undefined for identical score vectors")
    return float(np.linalg.norm(mirror(kernel, other_scores) - mirror(kernel, scores)) / gap)


# =============================================================================
# Divergences
# =============================================================================

def _check_simplex(name: str, point: np.ndarray):
    if np.any(point < 0) or np.any(np.abs(point.sum(axis=-1) - 1.0) > 1e-9):
        raise DomainError(f"{name} must lie on the simplex")


def bregman_batch(kernel: Kernel, target, points) -> np.ndarray:
    """
    Bregman divergence D(p, x) for a fixed or batched target p and batched points x.

    Points on the boundary raise DomainError; a boundary target gives +inf
    for unbounded kernels.
    """
    target = np.asarray(target, dtype=float)
    points = np.asarray(points, dtype=float)
    _check_simplex("Target", target)
    _check_simplex("Point", points)
    if np.any(points <= 0):
        raise DomainError("Bregman divergence needs a strictly interior base point")

    # theta(0) = +inf for unbounded kernels carries through to the result
    with np.errstate(divide="ignore"):
        divergence = (
            kernel.value(target).sum(axis=-1)
            - kernel.value(points).sum(axis=-1)
            - (kernel.d1(points) * (target - points)).sum(axis=-1)
        )
    return np.maximum(divergence, 0.0)


def bregman(kernel: Kernel, target, point) -> float:
    """D(p, x) = h(p) - h(x) - <grad h(x), p - x>; KL divergence for the entropic kernel."""
    return float(bregman_batch(kernel, target, point))


def fenchel(kernel: Kernel, target, scores) -> float:
    """Fenchel coupling F(p, y) = h(p) + h*(y) - <y, p>."""
    target = np.asarray(target, dtype=float)
    scores = np.asarray(scores, dtype=float)
    _check_simplex("Target", target)
    if not kernel.bounded and np.any(target <= 0):
        return np.inf
    point = mirror(kernel, scores)
    coupling = (
        kernel.value(target).sum()
        - kernel.value(point).sum()
        - np.dot(scores, target - point)
    )
    return float(max(coupling, 0.0))


# =============================================================================
# Mirror Jacobian
# =============================================================================

def jacobian_at(kernel: Kernel, strategy) -> np.ndarray:
    """dQ_a/dy_b = g_a (delta_ab - g_b / G) evaluated at the strategy x = Q(y)."""
    g = kernel.inverse_curvature(np.asarray(strategy, dtype=float))
    return np.diag(g) - np.outer(g, g) / g.sum()


def trace_jacobian_at(kernel: Kernel, strategies) -> np.ndarray:
    """sum_a g_a (1 - g_a / G) for strategies of shape (..., A)."""
    g = kernel.inverse_curvature(np.asarray(strategies, dtype=float))
    total = g.sum(axis=-1, keepdims=True)
    return (g * (1.0 - g / total)).sum(axis=-1)


def jacobian_mirror(kernel: Kernel, scores) -> np.ndarray:
    """Full-coordinate Jacobian of the mirror map; symmetric PSD with zero row sums."""
    return jacobian_at(kernel, mirror(kernel, scores))


def trace_jacobian_mirror(kernel: Kernel, scores) -> float:
    return float(trace_jacobian_at(kernel, mirror(kernel, scores)))


def effective_trace_jacobian(kernel: Kernel, scores, benchmark: int = 0) -> float:
    """
    Jacobian trace in the reduced coordinates z_a = y_a - y_benchmark.

    The reduced Hessian of h is diag(theta''(x_a), a != benchmark) plus
    theta''(x_benchmark) times the all-ones matrix; its inverse trace
    follows from the Sherman-Morrison formula.
    """
    x = mirror(kernel, scores)
    if not 0 <= benchmark < x.size:
        raise ValueError(f"Benchmark action {benchmark} out of range for {x.size} actions")
    g = kernel.inverse_curvature(x)
    rest = np.delete(g, benchmark)
    corner = float(kernel.d2(x[benchmark]))
    return float(rest.sum() - corner * np.sum(rest ** 2) / (1.0 + corner * rest.sum()))


# =============================================================================
# Rate function
# =============================================================================

def rate_function(regularizers: RegularizerSet, level: float) -> float:
    """
    Phi(z) = max_i (theta_i')^{-1}(z), clamped to (0, 1].

    Levels above a kernel's theta'(1) are clamped there, which maps to 1.
    """
    values = []
    for kernel in regularizers.kernels:
        clamped = min(float(level), kernel.slope_at_one)
        values.append(float(kernel.inverse_d1(clamped)))
    return float(np.clip(max(values), np.finfo(float).tiny, 1.0))
