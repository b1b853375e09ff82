import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from adapter_fusion.fusion import (
    DiagonalGaussian,
    FusionConfig,
    GlobalState,
    beta_from_curvature,
    beta_oracle_grid_search,
    compute_beta,
    fuse,
    fuse_gamma,
    gaussian_kl,
    kl_additivity_check,
    scaled_curvature,
    update_running_average,
    verify_constraint,
    verify_delta_relation,
)
from adapter_fusion.model import AdapterLayout, ConfigurationError, LayoutError, ParameterVector
from adapter_fusion.stats import FusionStatistics

LAYOUT = AdapterLayout(2, 1, 1)  # four coordinates
finite = st.floats(-100, 100, allow_nan=False, allow_infinity=False)


def pv(values, layout=LAYOUT):
    return ParameterVector(np.asarray(values, dtype=float), layout)


def stats_for(grad, fisher, layout=LAYOUT):
    return FusionStatistics.from_arrays(pv(grad, layout), pv(fisher, layout))


def quad_stats_scalar(g, c, alpha=1.0):
    """Statistics whose coordinate 0 has gradient g and scaled curvature c (F_min=0, F_mean=1)."""
    f0 = (c - 1.0) / alpha
    rest = (4.0 - f0) / 2.0
    return stats_for([g, 0, 0, 0], [f0, 0.0, rest, rest])


# --- curvature ------------------------------------------------------------


def test_curvature_examples():
    assert scaled_curvature(np.array([0.0]), 0.0, 1.0, 1.25)[0] == 1.0
    assert scaled_curvature(np.array([1.0]), 0.0, 1.0, 1.25)[0] == 2.25
    out = scaled_curvature(np.array([0.0, 1, 2, 3]), 0.0, 1.5, 2.0)
    assert np.allclose(out, [1, 7 / 3, 11 / 3, 5], rtol=0, atol=1e-15)


def test_curvature_degenerate_fallback():
    out = scaled_curvature(np.full(3, 0.7), 0.7, 0.7, 1.25)
    assert np.array_equal(out, np.full(3, 1.625))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(2, 30), elements=st.floats(0, 1e3)), st.floats(0.01, 10))
def test_curvature_at_least_one(f, alpha):
    out = scaled_curvature(f, float(f.min()), float(f.mean()), alpha)
    assert np.all(out >= 1.0)


# --- beta -----------------------------------------------------------------


def test_beta_flat_fisher_zero_grad_clips_to_upper():
    p, prev, cur = pv([1, 2, 3, 4]), pv([0, 1, 0, 1]), pv([0, 0, 0, 0])
    beta = compute_beta(p, prev, cur, stats_for([0] * 4, [0, 1, 0, 1]))
    # coordinates at F_min have L'' = 1 -> 0.5 -> clipped
    assert beta.pre_clip[0] == pytest.approx(0.5, abs=1e-15)
    assert beta.values.data[0] == 0.499
    assert beta.clip_hi_count == 2


def test_beta_at_mean_fisher_default_alpha():
    p, prev, cur = pv([1, 1, 1, 1]), pv([1, 1, 1, 1]), pv([0, 0, 0, 0])
    beta = compute_beta(p, prev, cur, stats_for([0] * 4, [1.0, 0.0, 1.5, 1.5]))
    assert beta.pre_clip[0] == pytest.approx(1 / 3.25, rel=1e-14)


def test_beta_hand_substitution():
    p, prev, cur = pv([1, 1, 1, 1]), pv([1, 1, 1, 1]), pv([0, 0, 0, 0])
    beta = compute_beta(p, prev, cur, stats_for([0.5, 0, 0, 0], [1.0, 0.0, 1.5, 1.5]), FusionConfig(alpha=1.0))
    assert beta.values.data[0] == pytest.approx(0.25, abs=1e-15)


def test_beta_small_denominator_fallback():
    p, prev, cur = pv([1, 1, 1, 1]), pv([-1, 1, 1, 1]), pv([0, 0, 0, 0])
    beta = compute_beta(p, prev, cur, stats_for([0.3, 0, 0, 0], [0.0, 1.0, 1.0, 2.0]))
    assert beta.denominator_fallbacks == 1
    assert beta.pre_clip[0] == pytest.approx(1 / 2.0)


def test_beta_degenerate_fisher_flagged():
    p, prev, cur = pv([1, 1, 1, 1]), pv([1, 1, 1, 1]), pv([0, 0, 0, 0])
    beta = compute_beta(p, prev, cur, stats_for([0] * 4, [2.0] * 4))
    assert beta.degenerate_fisher
    assert beta.pre_clip == pytest.approx(np.full(4, 1 / (2 + 1.25 / 2)))


def test_beta_layout_mismatch():
    other = AdapterLayout(3, 1, 1)
    with pytest.raises(LayoutError):
        compute_beta(pv([0] * 6, other), pv([0] * 4), pv([0] * 4), stats_for([0] * 4, [0, 1, 2, 3]))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_two_beta_forms_agree(seed):
    rng = np.random.default_rng(seed)
    n = LAYOUT.size
    fisher = rng.exponential(size=n)
    stats = stats_for(rng.normal(size=n), fisher)
    p, prev, cur = (pv(rng.normal(size=n)) for _ in range(3))
    alpha = rng.uniform(0.1, 5.0)
    beta = compute_beta(p, prev, cur, stats, FusionConfig(alpha=alpha))
    drift = p.data + prev.data - 2 * cur.data
    ref = beta_from_curvature(drift, stats.grad.data, scaled_curvature(fisher, stats.f_min, stats.f_mean, alpha))
    assert np.allclose(beta.pre_clip, ref, rtol=1e-12, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_beta_always_clipped(seed):
    rng = np.random.default_rng(seed)
    layout = AdapterLayout(4, 2, 2)
    n = layout.size
    vecs = [pv(rng.normal(size=n) * 10 ** rng.uniform(-6, 3), layout) for _ in range(3)]
    stats = stats_for(rng.normal(size=n) * 10 ** rng.uniform(-6, 3), rng.exponential(size=n), layout)
    v = compute_beta(*vecs, stats).values.data
    assert np.all((v >= 0.001) & (v <= 0.499))


def test_clip_override_hook():
    p, prev, cur = pv([1, 1, 1, 1]), pv([1, 1, 1, 1]), pv([0, 0, 0, 0])
    beta = compute_beta(p, prev, cur, stats_for([0] * 4, [0, 1, 2, 3]), _clip_override=(0.001, 0.6))
    assert beta.values.data[0] == 0.5


def test_config_validation():
    for kwargs in ({"alpha": 0}, {"gamma": 1.5}, {"clip_lo": 0.3, "clip_hi": 0.2}, {"clip_hi": 0.5}):
        with pytest.raises(ConfigurationError):
            FusionConfig(**kwargs)


# --- grid oracle ------------------------------------------------------------


def test_grid_oracle_hand_case():
    loss = lambda th: 0.5 * 3.0 * (th - 0.0) ** 2
    b = beta_oracle_grid_search(1.0, 1.0, 0.0, loss)
    assert abs(b - 0.25) <= 1e-5
    assert beta_from_curvature(np.array([2.0]), np.array([0.0]), np.array([3.0]))[0] == 0.25


def test_grid_oracle_degenerate_objective_is_flat():
    from adapter_fusion.fusion import fusion_objective

    grid = np.linspace(0.01, 0.99, 50)
    vals = fusion_objective(grid, 2.0, 2.0, 2.0, lambda th: (th - 2.0) ** 2)
    assert np.all(vals == vals[0])


@pytest.mark.parametrize("seed", range(10))
def test_closed_form_matches_grid_oracle(seed):
    rng = np.random.default_rng(seed)
    th_t = rng.normal()
    d = rng.choice([-1, 1]) * rng.uniform(0.5, 3)
    th_p = th_t + rng.uniform(-2, 2)
    th_prev = d + 2 * th_t - th_p
    g = rng.uniform(-0.9, 0.9) * abs(d)
    c = rng.uniform(1.05, 5.0)
    loss = lambda th: g * (th - th_t) + 0.5 * c * (th - th_t) ** 2
    stats = quad_stats_scalar(g, c)
    beta = compute_beta(pv([th_p, 0, 0, 0]), pv([th_prev, 0, 0, 0]), pv([th_t, 0, 0, 0]), stats,
                        FusionConfig(alpha=1.0))
    grid = beta_oracle_grid_search(th_p, th_prev, th_t, loss, 100_000)
    assert abs(beta.pre_clip[0] - grid) <= 2e-5


# --- fusion -----------------------------------------------------------------


def test_fuse_examples():
    out = fuse(np.array([1.0, 0]), np.array([0.0, 1]), np.array([1.0, 1]), np.array([0.25, 0.25]))
    assert np.array_equal(out, [0.75, 0.75])
    v = np.array([0.3, -2.0, 7.0])
    assert np.array_equal(fuse(v, v * 2, v * 3, np.zeros(3)), v * 3)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 8, elements=finite), arrays(np.float64, 8, elements=st.floats(0.001, 0.499)))
def test_fuse_fixed_point(v, beta):
    assert np.allclose(fuse(v, v, v, beta), v, rtol=1e-14, atol=1e-12)


def test_fuse_preserves_parameter_vector():
    out = fuse(pv([1, 2, 3, 4]), pv([0] * 4), pv([1] * 4), np.full(4, 0.25))
    assert isinstance(out, ParameterVector) and out.layout == LAYOUT


def test_fuse_shape_mismatch():
    with pytest.raises(LayoutError):
        fuse(np.zeros(3), np.zeros(3), np.zeros(4), np.zeros(3))


def test_fuse_gamma_examples():
    assert np.array_equal(fuse_gamma(np.array([2.0]), np.array([4.0]), np.array([0.0]), np.array([0.25]), 1.0), [1.0])
    out = fuse_gamma(np.array([5.0]), np.array([0.0]), np.array([0.0]), np.array([0.3]), 0.0)
    assert out[0] == 0.0
    with pytest.raises(ConfigurationError):
        fuse_gamma(np.zeros(1), np.zeros(1), np.zeros(1), np.zeros(1), 1.2)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_fuse_gamma_half_is_bitwise_fuse(seed):
    rng = np.random.default_rng(seed)
    p, prev, cur = (rng.normal(size=16) * 10 ** rng.uniform(-5, 5) for _ in range(3))
    beta = rng.uniform(0.001, 0.499, size=16)
    assert np.array_equal(fuse_gamma(p, prev, cur, beta, 0.5), fuse(p, prev, cur, beta))


# --- running average ----------------------------------------------------------


def test_running_average_cases():
    first = np.array([3.0, -1.0])
    assert np.array_equal(update_running_average(np.array([100.0, 5.0]), first, 1), first)
    avg = first
    for t in range(2, 8):
        avg = update_running_average(avg, first, t)
    assert np.allclose(avg, first, rtol=1e-15)
    with pytest.raises(ValueError):
        update_running_average(first, first, 0)


@pytest.mark.parametrize("length", [1, 5, 17, 50])
def test_running_average_matches_batch_mean(length):
    rng = np.random.default_rng(length)
    seq = rng.normal(size=(length, 30))
    avg = np.zeros(30)
    for t, v in enumerate(seq, start=1):
        avg = update_running_average(avg, v, t)
    ref = seq.mean(axis=0)
    assert np.linalg.norm(avg - ref) / np.linalg.norm(ref) <= 1e-12


def test_global_state_initial():
    init = pv([1, 2, 3, 4])
    state = GlobalState.initial(init)
    assert state.theta_star == init and state.theta_avg == init and state.task_index == 0
    assert set(state.retained()) == {"theta_star", "theta_avg"}


# --- identities -------------------------------------------------------------------


def test_constraint_detects_perturbation():
    rng = np.random.default_rng(0)
    p, prev, cur = (rng.normal(size=100) for _ in range(3))
    beta = rng.uniform(0.001, 0.499, size=100)
    star = fuse(p, prev, cur, beta)
    assert verify_constraint(p, prev, cur, star, beta) <= 1e-10
    star[17] += 1.0
    assert verify_constraint(p, prev, cur, star, beta) >= 0.999


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_constraint_and_delta_identities(seed):
    rng = np.random.default_rng(seed)
    p, prev, cur = (rng.normal(size=128) for _ in range(3))
    beta = rng.uniform(0.001, 0.499, size=128)
    star = fuse(p, prev, cur, beta)
    assert verify_constraint(p, prev, cur, star, beta) <= 1e-10
    assert verify_delta_relation(p, prev, cur, beta) <= 1e-10


def test_delta_relation_hand_case():
    assert verify_delta_relation(np.array([1.0]), np.array([1.0]), np.array([0.0]), np.array([0.25])) == 0.0
    assert verify_delta_relation(np.array([3.0]), np.array([-2.0]), np.array([0.5]), np.array([0.0])) == 0.0
    star = fuse(np.array([1.0]), np.array([1.0]), np.array([0.0]), np.array([0.25]))
    assert star[0] == 0.5
    shift = star - 1.0 + 0.0 - 1.0
    assert shift[0] == -1.5 and (0.25 / (0.25 - 1)) * shift[0] == pytest.approx(0.5)


# --- KL ---------------------------------------------------------------------------


def test_kl_identical_is_zero():
    g = DiagonalGaussian(np.array([1.0, 2.0]), np.array([0.5, 3.0]))
    assert gaussian_kl(g, g) == 0.0
    assert kl_additivity_check(g, g, g, g) <= 1e-12


def test_kl_unit_variance_mean_shift():
    mu = np.array([1.0, -2.0, 0.5])
    q = DiagonalGaussian(mu, np.ones(3))
    p = DiagonalGaussian(np.zeros(3), np.ones(3))
    assert gaussian_kl(q, p) == pytest.approx(0.5 * mu @ mu, rel=1e-14)


def test_kl_rejects_nonpositive_variance():
    with pytest.raises(ValueError):
        DiagonalGaussian(np.zeros(2), np.array([1.0, 0.0]))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_kl_additivity(seed):
    rng = np.random.default_rng(seed)

    def g(k):
        return DiagonalGaussian(rng.normal(size=k), rng.uniform(0.1, 3.0, size=k))

    assert kl_additivity_check(g(3), g(3), g(5), g(5)) <= 1e-10


def test_kl_nonnegative():
    rng = np.random.default_rng(1)
    for _ in range(50):
        q = DiagonalGaussian(rng.normal(size=4), rng.uniform(0.1, 2, size=4))
        p = DiagonalGaussian(rng.normal(size=4), rng.uniform(0.1, 2, size=4))
        assert gaussian_kl(q, p) >= 0
