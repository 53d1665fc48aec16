import numpy as np
import pytest
from scipy.special import softmax

from src.sgd_regularization import (
    DomainError,
    EntropicKernel,
    LogBarrierKernel,
    MirrorConvergenceError,
    RegularizerSet,
    TsallisKernel,
    bregman,
    curvature_floor,
    effective_trace_jacobian,
    fenchel,
    get_kernel,
    jacobian_mirror,
    kernel_gradient,
    mirror,
    mirror_is_lipschitz_probe,
    mirror_with_multiplier,
    rate_function,
    trace_jacobian_mirror,
)

KERNELS = [EntropicKernel(), LogBarrierKernel(), TsallisKernel(0.5), TsallisKernel(0.2)]


# =============================================================================
# Kernels
# =============================================================================

def test_get_kernel_specs():
    assert isinstance(get_kernel("entropic"), EntropicKernel)
    assert isinstance(get_kernel("log_barrier"), LogBarrierKernel)
    assert get_kernel("tsallis").q == 0.5
    assert get_kernel("tsallis:q=0.3").spec == "tsallis:q=0.3"


@pytest.mark.parametrize("spec", ["quadratic", "entropic:q=2", "tsallis:p=0.5", "tsallis:q=abc", "tsallis:q=1.5"])
def test_get_kernel_rejects(spec):
    with pytest.raises(ValueError):
        get_kernel(spec)


def test_kernel_constants():
    assert EntropicKernel().slope_at_one == pytest.approx(1.0)
    assert EntropicKernel().value_at_zero == 0.0
    assert LogBarrierKernel().value_at_zero == np.inf
    assert TsallisKernel(0.25).slope_at_one == pytest.approx(4.0)
    assert curvature_floor(EntropicKernel()) == pytest.approx(1.0)


@pytest.mark.parametrize("kernel", [EntropicKernel(), TsallisKernel(0.5), TsallisKernel(0.8)])
def test_min_value_matches_grid(kernel):
    grid = np.linspace(1e-6, 1.0, 200_001)
    assert kernel.min_value == pytest.approx(float(np.min(kernel.value(grid))), abs=1e-8)


@pytest.mark.parametrize("kernel", KERNELS)
def test_derivatives_match_finite_differences(kernel):
    z = np.linspace(0.05, 0.95, 19)
    h = 1e-6
    assert np.allclose((kernel.value(z + h) - kernel.value(z - h)) / (2 * h), kernel.d1(z), rtol=1e-5)
    assert np.allclose((kernel.d1(z + h) - kernel.d1(z - h)) / (2 * h), kernel.d2(z), rtol=1e-5)
    assert np.allclose(kernel.inverse_d1(kernel.d1(z)), z)
    assert np.all(kernel.d3(z) < 0)


def test_growth_ratio():
    z = np.linspace(0.01, 1.0, 50)
    assert np.allclose(EntropicKernel().growth_ratio(z), 1.0)
    assert np.allclose(LogBarrierKernel().growth_ratio(z), 2.0 * z)


# =============================================================================
# Mirror map
# =============================================================================

def test_entropic_mirror_is_logit():
    scores = np.array([1.0, 0.0, -2.0])
    assert np.allclose(mirror(EntropicKernel(), scores), softmax(scores))
    assert np.allclose(mirror(EntropicKernel(), scores, method="root"), softmax(scores), atol=1e-12)
    assert np.allclose(mirror(EntropicKernel(), [0.0, 0.0]), [0.5, 0.5])


@pytest.mark.parametrize("kernel", KERNELS)
def test_mirror_satisfies_first_order_conditions(kernel, rng):
    scores = rng.normal(scale=3.0, size=(20, 4))
    x, mu = mirror_with_multiplier(kernel, scores)
    assert np.all(x > 0)
    assert np.allclose(x.sum(axis=-1), 1.0, atol=1e-12)
    assert np.allclose(kernel.d1(x) + mu[:, None], scores, atol=1e-8)


@pytest.mark.parametrize("kernel", KERNELS)
def test_mirror_is_shift_invariant(kernel):
    scores = np.array([0.3, -1.2, 2.0])
    assert np.allclose(mirror(kernel, scores), mirror(kernel, scores + 7.5), atol=1e-10)


@pytest.mark.parametrize("kernel", KERNELS)
def test_mirror_lipschitz_ratio(kernel, rng):
    bound = 1.0 / curvature_floor(kernel) + 1e-6
    for _ in range(50):
        scores, other = rng.normal(scale=2.0, size=(2, 4))
        assert mirror_is_lipschitz_probe(kernel, scores, other) <= bound
    scores = np.array([0.5, -0.5, 1.0])
    assert mirror_is_lipschitz_probe(kernel, scores, scores + 3.0) == pytest.approx(0.0, abs=1e-9)
    with pytest.raises(DomainError):
        mirror_is_lipschitz_probe(kernel, scores, scores)


def test_log_barrier_mirror_matches_quadratic_root():
    # 1/(mu - 1) + 1/mu = 1
    mu_root = (3.0 + np.sqrt(5.0)) / 2.0
    x, mu = mirror_with_multiplier(LogBarrierKernel(), [1.0, 0.0])
    assert float(np.squeeze(mu)) == pytest.approx(mu_root, abs=1e-10)
    assert x[0] == pytest.approx(1.0 / (mu_root - 1.0), abs=1e-10)
    assert x[1] == pytest.approx(1.0 / mu_root, abs=1e-10)


def test_mirror_handles_large_score_gaps():
    x = mirror(LogBarrierKernel(), [0.0, 1e6])
    assert x[1] > 1 - 1e-5 and x[0] > 0


def test_mirror_convergence_error():
    with pytest.raises(MirrorConvergenceError) as info:
        mirror_with_multiplier(LogBarrierKernel(), [0.0, 5.0, -3.0], max_iterations=1)
    assert info.value.kernel == "log_barrier"
    assert info.value.iterations == 1


def test_mirror_rejects_non_finite():
    with pytest.raises(DomainError):
        mirror(EntropicKernel(), [np.nan, 0.0])
    with pytest.raises(DomainError):
        mirror(TsallisKernel(), [np.inf, 0.0])


def test_kernel_gradient_needs_interior():
    with pytest.raises(DomainError):
        kernel_gradient(EntropicKernel(), [1.0, 0.0])


def test_regularizer_set_flat_maps():
    regs = RegularizerSet.from_specs(["entropic", "tsallis:q=0.5"])
    offsets = ((0, 2), (2, 5))
    scores = np.array([[1.0, 0.0, 0.5, -0.5, 0.0]])
    flat = regs.mirror_flat(scores, offsets)
    assert np.allclose(flat[0, :2], softmax([1.0, 0.0]))
    assert flat[0, 2:].sum() == pytest.approx(1.0)
    gradient = regs.gradient_flat(flat, offsets)
    assert np.allclose(regs.mirror_flat(gradient, offsets), flat, atol=1e-10)
    assert regs.specs == ["entropic", "tsallis:q=0.5"]
    with pytest.raises(ValueError):
        regs.check_players(3)


# =============================================================================
# Divergences
# =============================================================================

def test_bregman_is_kl_for_entropic():
    assert bregman(EntropicKernel(), [0.5, 0.5], [0.9, 0.1]) == pytest.approx(0.5108256, abs=1e-6)
    assert bregman(EntropicKernel(), [0.3, 0.7], [0.3, 0.7]) == pytest.approx(0.0, abs=1e-14)


def test_bregman_boundary_cases():
    assert bregman(EntropicKernel(), [1.0, 0.0], [0.5, 0.5]) == pytest.approx(np.log(2))
    assert bregman(LogBarrierKernel(), [1.0, 0.0], [0.5, 0.5]) == np.inf
    with pytest.raises(DomainError):
        bregman(EntropicKernel(), [0.5, 0.5], [1.0, 0.0])


@pytest.mark.parametrize("kernel", KERNELS)
def test_fenchel_matches_bregman_at_mirror_point(kernel):
    scores = np.array([0.4, -0.3, 1.1])
    target = np.array([0.2, 0.5, 0.3])
    expected = bregman(kernel, target, mirror(kernel, scores))
    assert fenchel(kernel, target, scores) == pytest.approx(expected, abs=1e-9)


# =============================================================================
# Jacobian and traces
# =============================================================================

@pytest.mark.parametrize("kernel", KERNELS)
def test_jacobian_matches_finite_differences(kernel):
    scores = np.array([0.2, -0.4, 0.9])
    jac = jacobian_mirror(kernel, scores)
    assert np.allclose(jac, jac.T)
    assert np.allclose(jac.sum(axis=1), 0.0, atol=1e-12)
    assert np.all(np.linalg.eigvalsh(jac) >= -1e-12)

    h = 1e-6
    numeric = np.empty((3, 3))
    for b in range(3):
        bump = np.zeros(3)
        bump[b] = h
        numeric[:, b] = (mirror(kernel, scores + bump) - mirror(kernel, scores - bump)) / (2 * h)
    assert np.allclose(jac, numeric, atol=1e-6)
    assert trace_jacobian_mirror(kernel, scores) == pytest.approx(np.trace(jac))


def test_entropic_traces_at_uniform():
    assert trace_jacobian_mirror(EntropicKernel(), [0.0, 0.0]) == pytest.approx(0.5)
    assert effective_trace_jacobian(EntropicKernel(), [0.0, 0.0]) == pytest.approx(0.25)


# =============================================================================
# Rate function
# =============================================================================

def test_rate_function():
    regs = RegularizerSet.uniform("entropic", 2)
    assert rate_function(regs, -1.0) == pytest.approx(np.exp(-2.0))
    assert rate_function(regs, 5.0) == 1.0
    assert rate_function(regs, -1e6) > 0.0

    mixed = RegularizerSet.from_specs(["entropic", "tsallis:q=0.5"])
    level = -0.5
    tsallis = TsallisKernel(0.5)
    assert rate_function(mixed, level) == pytest.approx(
        max(np.exp(level - 1.0), float(tsallis.inverse_d1(level)))
    )
