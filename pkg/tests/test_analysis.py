import math

import numpy as np
import pytest

from src.sgd_analysis import (
    AssumptionError,
    MonteCarloRunner,
    _simplex_grid,
    compute_c_eps,
    convergence_rate_probe,
    curvature_range,
    energy_escape_stats,
    energy_growth_profile,
    energy_sandwich,
    escape_time_bound,
    estimate_hitting_time,
    face_distance,
    face_energies,
    face_energy_batch,
    face_energy_constants,
    generator_estimate,
    harmonic_energy,
    harmonic_energy_batch,
    harmonic_fenchel_batch,
    kernel_growth,
    lambda_bound,
    merge_batches,
    pure_hitting_time,
    pure_noise_drift,
    raise_on_failure,
    recurrence_probe,
    sample_initial_points,
    stability_experiment,
    stability_level,
    sublevel_trace_minimum,
    summarize_hitting_times,
)
from src.sgd_dynamics import (
    ConfigError,
    NumericalFailureError,
    SimConfig,
    simulate_deterministic_ftrl,
    simulate_deterministic_ftrl_batch,
)
from src.sgd_game_core import Face, Game, NotHarmonicError, harmonic_structure, unit_weights
from src.sgd_noise import full_noise, uncorrelated_noise, zero_noise
from src.sgd_regularization import (
    DomainError,
    EntropicKernel,
    LogBarrierKernel,
    RegularizerSet,
    TsallisKernel,
)

DEFECT = Face(((1,), (1,)))
CENTER = [[0.5, 0.5], [0.5, 0.5]]


# =============================================================================
# Monte Carlo runner
# =============================================================================

def test_runner_batches():
    runner = MonteCarloRunner(batch_size=50)
    batches = runner.batches(120)
    assert [len(b) for b in batches] == [50, 50, 20]
    assert batches[2][0] == 100
    with pytest.raises(ValueError):
        MonteCarloRunner(max_workers=0)


def test_runner_keeps_batch_order_and_reports_progress():
    calls = []
    runner = MonteCarloRunner(max_workers=3, batch_size=4, progress_callback=lambda done, total: calls.append((done, total)))
    results = runner.map(lambda run_ids: run_ids, 10)
    assert results == [(0, 1, 2, 3), (4, 5, 6, 7), (8, 9)]
    assert calls[-1] == (3, 3)


def test_runner_reraises_batch_errors():
    def simulate(run_ids):
        if 4 in run_ids:
            raise RuntimeError("boom")
        return run_ids

    with pytest.raises(RuntimeError):
        MonteCarloRunner(max_workers=2, batch_size=4).map(simulate, 8)


def test_hitting_estimate_does_not_depend_on_workers(mp, entropic2, noise_02):
    cfg = SimConfig(0.05, 20.0, seed=8)
    x0 = [[0.6, 0.4], [0.5, 0.5]]
    serial = estimate_hitting_time(mp, entropic2, noise_02, x0, cfg, 0, 0.3, 12, MonteCarloRunner(1, 5))
    parallel = estimate_hitting_time(mp, entropic2, noise_02, x0, cfg, 0, 0.3, 12, MonteCarloRunner(3, 5))
    assert serial.hit_times == parallel.hit_times
    assert serial.censored == parallel.censored


def test_merge_batches_pads_stopped_runs(pd, entropic2):
    cfg = SimConfig(0.1, 5.0)

    def stop(strategies, _scores):
        return strategies[:, 1] > 0.9

    early = simulate_deterministic_ftrl_batch(pd, entropic2, [[0.1, 0.9], [0.1, 0.9]], cfg, 1, stop, True, (0,))
    late = simulate_deterministic_ftrl_batch(pd, entropic2, [[0.9, 0.1], [0.9, 0.1]], cfg, 1, None, True, (1,))
    merged = merge_batches([early, late])
    assert merged.run_ids == (0, 1)
    assert merged.strategies.shape == (late.times.size, 2, 4)
    assert np.array_equal(merged.strategies[-1, 0], early.strategies[-1, 0])


def test_raise_on_failure(entropic2):
    row = np.array([[3.0, 0.0], [5.0, 1.0]]) * 1e307
    game = Game(np.stack([row, row.T]))
    batch = simulate_deterministic_ftrl_batch(game, entropic2, CENTER, SimConfig(10.0, 100.0, scheme="euler"), run_ids=(7,))
    with pytest.raises(NumericalFailureError) as info:
        raise_on_failure(batch)
    assert info.value.run_ids == [7]


# =============================================================================
# Hitting times
# =============================================================================

def test_summarize_hitting_times():
    stats = summarize_hitting_times(np.array([1.0, 2.0, 3.0, np.nan]), horizon=10.0)
    assert (stats.n_runs, stats.n_hit, stats.censored) == (4, 3, 1)
    assert stats.mean_hit_time == pytest.approx(2.0)
    assert stats.sample_std == pytest.approx(1.0)
    assert stats.ci_low == pytest.approx(2.0 - 1.959964 / math.sqrt(3), abs=1e-6)
    assert stats.ci_high == pytest.approx(2.0 + 1.959964 / math.sqrt(3), abs=1e-6)

    censored = summarize_hitting_times(np.array([np.nan, np.nan]), horizon=5.0)
    assert censored.mean_hit_time is None and censored.censored == 2


def test_epsilon_range(mp, entropic2, noise_02):
    with pytest.raises(ValueError):
        pure_hitting_time(mp, entropic2, noise_02, CENTER, SimConfig(0.1, 1.0), 0, 0.5)
    with pytest.raises(ValueError):
        pure_hitting_time(mp, entropic2, noise_02, CENTER, SimConfig(0.1, 1.0), 2, 0.1)


def test_deterministic_hitting_times(mp, pd, entropic2):
    cfg = SimConfig(0.01, 30.0)
    hit = pure_hitting_time(pd, entropic2, zero_noise((2, 2)), [[0.6, 0.4], [0.6, 0.4]], cfg, 0, 0.1)
    assert hit is not None and 0.0 < hit < 30.0
    # the noiseless orbit keeps its divergence from the center and never gets near a vertex
    assert pure_hitting_time(mp, entropic2, zero_noise((2, 2)), [[0.6, 0.4], [0.5, 0.5]], cfg, 0, 0.1) is None


def test_estimate_hitting_time_counts(mp, entropic2):
    noise = uncorrelated_noise((2, 2), 0.5)
    stats = estimate_hitting_time(mp, entropic2, noise, CENTER, SimConfig(0.02, 50.0, seed=1), 0, 0.1, 20)
    assert stats.n_runs == 20
    assert stats.n_hit + stats.censored == 20
    assert all(0.0 <= t <= 50.0 for t in stats.hit_times)


# =============================================================================
# Lyapunov constants
# =============================================================================

def test_simplex_grid():
    grid = _simplex_grid(3, 10)
    assert grid.shape == (66, 3)
    assert np.allclose(grid.sum(axis=1), 1.0)
    assert grid.min() >= 0.0
    assert len({tuple(row) for row in np.round(grid * 10).astype(int)}) == 66


@pytest.mark.parametrize("epsilon", [0.1, 0.01])
def test_c_eps_entropic_two_actions(epsilon):
    assert compute_c_eps(EntropicKernel(), epsilon, 2) == pytest.approx((1 - epsilon) * epsilon ** 2, rel=1e-9)


@pytest.mark.parametrize("num_actions", [2, 3])
def test_c_eps_matches_extreme_point(num_actions):
    epsilon = 0.1
    kernel = EntropicKernel()
    value = compute_c_eps(kernel, epsilon, num_actions)
    curvature = float(kernel.d2(epsilon / (num_actions - 1)))
    assert value * curvature ** 2 == pytest.approx((1 - epsilon) * (num_actions - 1) ** 2, rel=1e-9)


@pytest.mark.parametrize("num_actions", [2, 3])
@pytest.mark.parametrize("epsilon", [0.1, 0.05, 0.01])
def test_c_eps_scales_with_curvature(epsilon, num_actions):
    kernel = EntropicKernel()
    curvature = float(kernel.d2(epsilon / (num_actions - 1)))
    ratio = compute_c_eps(kernel, epsilon, num_actions) * curvature ** 2
    assert 0.1 <= ratio <= 10.0


def test_c_eps_rejects():
    with pytest.raises(ValueError):
        compute_c_eps(EntropicKernel(), 0.5, 2)
    with pytest.raises(ValueError):
        compute_c_eps(EntropicKernel(), 0.1, 2, grid_resolution=50)
    assert 0 < compute_c_eps(TsallisKernel(0.5), 0.1, 3) < 1


def test_kernel_constants():
    assert kernel_growth(EntropicKernel()) == pytest.approx(1.0)
    assert kernel_growth(LogBarrierKernel()) == pytest.approx(2.0)
    assert curvature_range(EntropicKernel(), 2) == pytest.approx((0.5, 0.5))


def test_lambda_bound_matching_pennies(mp):
    constants = lambda_bound(mp, 0, EntropicKernel(), uncorrelated_noise((2, 2), 0.2), 0.1)
    assert constants.B == pytest.approx(4.32)
    assert constants.c_eps == pytest.approx(0.009)
    assert constants.lam == pytest.approx(9.64 / (0.04 * 0.009), rel=1e-9)
    assert constants.lambda_residual() == pytest.approx(0.0, abs=1e-6)
    assert np.isfinite(constants.log_bound)
    assert constants.bound_value == np.inf

    overridden = lambda_bound(mp, 0, EntropicKernel(), uncorrelated_noise((2, 2), 0.2), 0.1, {"c_eps": 0.018})
    assert overridden.lam == pytest.approx(constants.lam / 2)


def test_lambda_bound_moderate_noise_is_finite(mp):
    constants = lambda_bound(mp, 1, EntropicKernel(), uncorrelated_noise((2, 2), 3.0), 0.3)
    assert np.isfinite(constants.bound_value)
    assert constants.bound_value == pytest.approx(math.exp(constants.log_bound))


def test_lambda_bound_needs_noise_on_player(mp):
    with pytest.raises(AssumptionError):
        lambda_bound(mp, 0, EntropicKernel(), uncorrelated_noise((2, 2), [[0.0, 0.2], [0.2, 0.2]]), 0.1)
    with pytest.raises(ValueError):
        lambda_bound(mp, 0, EntropicKernel(), uncorrelated_noise((2, 2), 0.2), 0.1, {"sigma": 1.0})


# =============================================================================
# Face distance and energies
# =============================================================================

def test_face_distance(pd):
    profile = [[0.9, 0.1], [0.5, 0.5]]
    assert face_distance(profile, DEFECT) == pytest.approx(2.8)
    assert face_distance(profile, Face.full(pd)) == 0.0


def test_face_energies_entropic(entropic2):
    energies = face_energies(entropic2, [[0.9, 0.1], [0.5, 0.5]], DEFECT)
    assert set(energies) == {(0, 0), (1, 0)}
    assert energies[(0, 0)] == pytest.approx(-math.log(0.9))
    assert energies[(1, 0)] == pytest.approx(math.log(2.0))


def test_face_energy_constants(entropic2):
    c1, c2 = face_energy_constants(entropic2, (2, 2))
    assert c1 == pytest.approx(1.0 + 2.0 / math.e)
    assert c2 == pytest.approx(0.0)


@pytest.mark.parametrize("profile", [[[1.0, 0.0], [0.5, 0.5]], [[0.5, 0.5], [0.0, 1.0]], [[1.2, -0.2], [0.5, 0.5]]])
def test_face_energies_reject_boundary_profiles(entropic2, profile):
    with pytest.raises(DomainError):
        face_energies(entropic2, profile, Face(((0,), (0, 1))))
    batch = face_energy_batch(entropic2, np.array([[1.0, 0.0, 0.5, 0.5]]), Face(((0,), (0, 1))), (2, 2))
    assert np.all(np.isfinite(batch))


def test_face_energies_need_bounded_kernels():
    with pytest.raises(AssumptionError):
        face_energies(RegularizerSet.uniform("log_barrier", 2), CENTER, DEFECT)


@pytest.mark.parametrize("specs", [["entropic", "entropic"], ["tsallis:q=0.5", "entropic"], ["tsallis:q=0.3", "tsallis:q=0.7"]])
def test_energy_sandwich_holds(specs, rng):
    regs = RegularizerSet.from_specs(specs)
    face = Face(((2,), (0, 1)))
    for _ in range(200):
        profile = [rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(2))]
        lower, distance, upper = energy_sandwich(regs, profile, face)
        assert lower <= distance + 1e-12
        assert distance <= upper + 1e-12


# =============================================================================
# Stability
# =============================================================================

def test_stability_level():
    noise = uncorrelated_noise((2, 2), 0.1)
    assert stability_level(noise, 1.0, 2, 0.05) == pytest.approx(0.01 * math.log(40.0))
    with pytest.raises(ValueError):
        stability_level(noise, math.inf, 2, 0.05)
    with pytest.raises(ValueError):
        stability_level(noise, 1.0, 2, 1.5)


def test_sample_initial_points(pd, entropic2):
    points = sample_initial_points(pd, entropic2, DEFECT, 1.0, 40, seed=3)
    assert points.shape == (40, 4)
    assert np.all(points[:, [0, 2]] <= math.exp(-2.0) + 1e-12)
    again = sample_initial_points(pd, entropic2, DEFECT, 1.0, 40, seed=3)
    assert np.array_equal(points, again)


def test_sample_initial_points_empty_set(pd, entropic2):
    with pytest.raises(ConfigError):
        sample_initial_points(pd, entropic2, DEFECT, 20.0, 10, max_batches=2)


def test_stability_experiment_shapes(pd, entropic2):
    noise = uncorrelated_noise((2, 2), 0.1)
    level = stability_level(noise, 1.0, 2, 0.05)
    stats = stability_experiment(pd, entropic2, noise, DEFECT, level, 0.05, 10, SimConfig(0.01, 2.0, seed=2))
    assert stats.face == "{D}×{D}"
    assert len(stats.min_energies) == 10 and len(stats.final_distances) == 10
    assert 0.0 <= stats.stay_fraction <= 1.0
    assert stats.to_dict()["meets_target"] == stats.meets_target


def test_convergence_rate_is_linear(pd, entropic2):
    trajectory = simulate_deterministic_ftrl(pd, entropic2, CENTER, SimConfig(0.01, 20.0, sample_stride=10))
    fit = convergence_rate_probe(trajectory, DEFECT, entropic2)
    assert -2.1 < fit.slope < -0.9
    assert fit.r_value < -0.99
    with pytest.raises(ValueError):
        convergence_rate_probe(trajectory, Face.full(pd), entropic2)


# =============================================================================
# Harmonic energy
# =============================================================================

def test_harmonic_energy_matching_pennies(mp_structure, entropic2):
    assert harmonic_energy(mp_structure, entropic2, [[0.9, 0.1], [0.5, 0.5]]) == pytest.approx(0.5108256, abs=1e-6)
    assert harmonic_energy(mp_structure, entropic2, CENTER) == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("profile", [[[1.0, 0.0], [0.5, 0.5]], [[0.5, 0.5], [0.0, 1.0]]])
def test_harmonic_energy_rejects_boundary_profiles(mp_structure, entropic2, profile):
    with pytest.raises(DomainError):
        harmonic_energy(mp_structure, entropic2, profile)
    batch = harmonic_energy_batch(mp_structure, entropic2, np.array([[1.0, 0.0, 0.5, 0.5]]))
    assert np.isfinite(batch[0]) and batch[0] > 100.0


def test_fenchel_energy_matches_strategy_energy(harmonic, rng):
    game, structure = harmonic
    regs = RegularizerSet.from_specs(["entropic", "tsallis:q=0.5", "log_barrier"])
    points = np.hstack([rng.dirichlet(np.ones(2), size=5) for _ in range(3)])
    scores = regs.gradient_flat(points, game.offsets)
    assert np.allclose(harmonic_fenchel_batch(structure, regs, scores), harmonic_energy_batch(structure, regs, points))


def test_sublevel_trace_minimum(mp_structure, entropic2):
    floor, accepted = sublevel_trace_minimum(mp_structure, entropic2, 2.0, seed=0)
    assert accepted > 1
    assert math.exp(-2.0) - 1e-9 <= floor <= 0.16


def test_escape_time_bound(mp_structure, entropic2, noise_02):
    bound, floor, _ = escape_time_bound(mp_structure, entropic2, noise_02, CENTER, 2.0)
    assert bound == pytest.approx(4.0 / (0.04 * floor))
    assert 600 < bound < 800
    with pytest.raises(AssumptionError):
        escape_time_bound(mp_structure, entropic2, zero_noise((2, 2)), CENTER, 2.0)


def test_energy_escape_stats(mp, mp_structure, entropic2, noise_02):
    stats = energy_escape_stats(
        mp, mp_structure, entropic2, noise_02, CENTER, 0.1, 30, SimConfig(0.02, 200.0, seed=4), n_samples=20_000
    )
    assert stats.initial_energy == pytest.approx(0.0, abs=1e-15)
    assert stats.escape.n_hit > 0
    assert stats.bound == pytest.approx(2 * 0.1 / (0.04 * stats.eps_c))


def test_energy_stats_need_harmonic_game(pd, entropic2, noise_02):
    structure = harmonic_structure(unit_weights(pd))
    with pytest.raises(NotHarmonicError):
        energy_escape_stats(pd, structure, entropic2, noise_02, CENTER, 0.1, 5, SimConfig(0.1, 1.0))


def test_energy_growth_profile(mp, mp_structure, entropic2, noise_02):
    profile = energy_growth_profile(
        mp, mp_structure, entropic2, noise_02, CENTER, 100, SimConfig(0.01, 5.0, sample_stride=50, seed=6)
    )
    assert profile.mean[0] == pytest.approx(0.0, abs=1e-15)
    assert profile.std[0] == pytest.approx(0.0, abs=1e-15)
    assert 0.05 < profile.mean[-1] < 0.15


def test_generator_estimate_within_bounds(mp, mp_structure, entropic2, noise_02):
    probes = [[0.0, 0.0, 0.0, 0.0], [1.0, 0.0, -0.5, 0.5]]
    estimates = generator_estimate(mp, mp_structure, entropic2, noise_02, probes, seed=1)
    for estimate in estimates:
        assert estimate.drift_term == pytest.approx(0.0, abs=1e-12)
        assert estimate.lower == pytest.approx(estimate.upper)
        assert estimate.within_bounds
    assert estimates[0].lower == pytest.approx(0.02)


def test_recurrence_probe(mp, mp_structure, entropic2, noise_02):
    stats = recurrence_probe(
        mp, mp_structure, entropic2, noise_02, CENTER, 0.05, "escape", 20, SimConfig(0.02, 20.0, seed=5)
    )
    assert len(stats.checkpoints) == 10
    curve = stats.censored_fraction
    assert all(0.0 <= c <= 1.0 for c in curve)
    assert all(a >= b for a, b in zip(curve, curve[1:]))
    with pytest.raises(ValueError):
        recurrence_probe(mp, mp_structure, entropic2, noise_02, CENTER, 0.05, "orbit", 2, SimConfig(0.1, 1.0))


# =============================================================================
# Pure noise
# =============================================================================

def test_pure_noise_drift():
    noise = uncorrelated_noise((2, 2), [[0.2, 0.1], [0.1, 0.1]])
    prediction = pure_noise_drift(noise, "AS", (0, 0))
    assert prediction.drift[0] == pytest.approx([0.015])
    assert prediction.drift[1] == pytest.approx([0.0])
    assert prediction.variance_rate[0] == pytest.approx([0.05])
    assert pure_noise_drift(noise, "EW", (0, 0)).drift == [[0.0], [0.0]]
    with pytest.raises(ValueError):
        pure_noise_drift(noise, "PI", (0, 0))
    with pytest.raises(ConfigError):
        pure_noise_drift(full_noise((2, 2), np.eye(4)), "EW", (0, 0))
