import json
import math
from types import SimpleNamespace

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import (bisect_bound, linear_2d_net, linear_2d_probs, logistic_1d_net,
                     logistic_1d_probs)
from sewlab.specificity import (MeasureConfig, SpecificityReport, log_volume_ratio, margin,
                                mean_margin, measure_spec, noise_sweep)


def copies(x, n, label):
    x = np.asarray(x, dtype=np.float64).reshape(1, -1, 1, 1)
    return SimpleNamespace(images=np.repeat(x, n, axis=0), labels=np.full(n, label))


def target_always(x):
    out = np.zeros((len(x), 3))
    out[:, 1] = 1.0
    return out


def test_margin():
    p = np.array([[0.7, 0.2, 0.1], [0.1, 0.3, 0.6]])
    np.testing.assert_allclose(margin(p, [0, 0]), [0.5, -0.5])
    np.testing.assert_allclose(margin(p, 2), [-0.6, 0.3])


def test_constant_classifier_never_converges():
    rep = measure_spec(target_always, copies([0.5], 4, 1),
                       MeasureConfig(max_iter=60, lr=0.01, per_sample=False))
    assert not rep.converged
    assert rep.iterations == 60
    assert rep.mean_grads == [1.0] * 60
    assert rep.spec == pytest.approx(0.6)
    np.testing.assert_allclose(np.diff(rep.trajectory), 0.01)


def test_empty_key_set_rejected():
    with pytest.raises(ValueError):
        measure_spec(target_always, SimpleNamespace(images=np.zeros((0, 1, 1, 1)), labels=np.zeros(0)))


def test_rejected_key_set_floors_at_zero():
    rep = measure_spec(logistic_1d_net(), copies([0.9], 5, 1), MeasureConfig(max_iter=10))
    assert rep.spec == 0.0
    assert rep.excluded == [0, 1, 2, 3, 4]
    assert not rep.converged and rep.converged_fraction == 0.0


def test_misclassified_samples_excluded():
    ks = SimpleNamespace(images=np.array([0.5, 0.9, 0.45]).reshape(3, 1, 1, 1), labels=np.ones(3, int))
    rep = measure_spec(logistic_1d_net(), ks, MeasureConfig(max_iter=300, per_sample=True))
    assert rep.excluded == [1]
    assert rep.sample_sigmas[1] == 0.0 and not rep.sample_converged[1]
    assert rep.sample_sigmas[0] > 0 and rep.sample_sigmas[2] > 0


def test_measure_deterministic():
    ks = copies([0.55], 20, 1)
    cfg = MeasureConfig(seed=3, max_iter=300)
    a = measure_spec(logistic_1d_net(), ks, cfg)
    b = measure_spec(logistic_1d_net(), ks, cfg)
    assert a.spec == b.spec and a.trajectory == b.trajectory
    assert a.sample_sigmas == b.sample_sigmas


@settings(max_examples=15, deadline=None)
@given(st.floats(0.35, 0.65), st.integers(0, 10_000))
def test_converged_implies_small_final_grad(x_t, seed):
    cfg = MeasureConfig(seed=seed, max_iter=400, per_sample=False, draws=2)
    rep = measure_spec(logistic_1d_net(), copies([x_t], 10, 1), cfg)
    assert rep.spec >= 0.0
    if rep.converged:
        assert abs(rep.mean_grads[-1]) <= cfg.tol
    assert len(rep.trajectory) == len(rep.mean_grads) + (0 if rep.converged else 1)


@pytest.mark.parametrize("x_t", [0.5, 0.45, 0.6])
@pytest.mark.parametrize("seed", range(5))
def test_logistic_1d_matches_bisection_oracle(x_t, seed):
    bound = bisect_bound(logistic_1d_probs, np.array(x_t), ref=1)
    rep = measure_spec(logistic_1d_net(), copies([x_t], 50, 1),
                       MeasureConfig(seed=seed, per_sample=False))
    assert rep.converged
    assert abs(rep.spec - bound) <= 0.10 * bound


@pytest.mark.parametrize("seed", range(5))
def test_linear_2d_matches_bisection_oracle(seed):
    x_t = np.array([0.7, 0.7])
    bound = bisect_bound(linear_2d_probs, x_t, ref=1)
    rep = measure_spec(linear_2d_net(), copies(x_t, 50, 1),
                       MeasureConfig(seed=seed, per_sample=False))
    assert rep.converged
    assert abs(rep.spec - bound) <= 0.10 * bound


def test_per_sample_sigmas_near_oracle():
    bound = bisect_bound(logistic_1d_probs, np.array(0.5), ref=1)
    rep = measure_spec(logistic_1d_net(), copies([0.5], 30, 1), MeasureConfig(seed=1, draws=16))
    assert rep.converged_fraction >= 0.95
    assert abs(np.mean(rep.sample_sigmas) - bound) <= 0.10 * bound


@settings(max_examples=20, deadline=None)
@given(st.floats(0.0, 0.6), st.floats(0.01, 0.6), st.integers(0, 10_000))
def test_target_probability_decreases_with_noise(s1, ds, seed):
    net = logistic_1d_net()
    x = np.full((4000, 1, 1, 1), 0.5)
    rng = np.random.default_rng(seed)

    def probs_at(s):
        z = rng.standard_normal(x.shape)
        return net.probs(np.clip(x + s * z, 0, 1))[:, 1]

    p1, p2 = probs_at(s1), probs_at(s1 + ds)
    se = math.sqrt(p1.var() / len(p1) + p2.var() / len(p2))
    assert p2.mean() <= p1.mean() + 3 * se + 1e-12


def test_mean_margin_per_sample_sigma():
    net = logistic_1d_net()
    x = np.full((2, 1, 1, 1), 0.5)
    g = mean_margin(net, x, [1, 1], np.array([0.0, 5.0]), np.random.default_rng(0), draws=200)
    assert g[0] > 0.9 and g[1] < 0.0


def test_key_region_noise_only_touches_patch():
    from sewlab.watermark import build_key_dataset, make_key
    from sewlab.data import gen_synthetic

    key = make_key(seed=0)
    ks = build_key_dataset(gen_synthetic(n_per_class=10), key, n=5)
    seen = []

    def spy(x):
        seen.append(np.asarray(x))
        out = np.zeros((len(x), 4))
        out[:, 0] = 1
        return out

    measure_spec(spy, ks, MeasureConfig(region="key", max_iter=3, per_sample=False))
    outside = np.ones((16, 16), bool)
    outside[key.row:key.row + 6, key.col:key.col + 6] = False
    for x in seen:
        base = np.repeat(ks.images, len(x) // len(ks.images), axis=0)
        assert np.array_equal(x[:, :, outside], base[:, :, outside])


def test_report_fields_and_json():
    rep = SpecificityReport(0.05, [0.0, 0.05], [1.0, 0.0], True, 2, 108, 3)
    assert rep.beta_u == pytest.approx(math.sqrt(108) * 0.05)
    d = rep.to_dict()
    assert json.loads(json.dumps(d))["beta_u"] == pytest.approx(rep.beta_u)


@pytest.mark.parametrize("kwargs", [{"max_iter": 0}, {"tol": 0.0}, {"draws": 0}, {"region": "x"}])
def test_measure_config_rejects(kwargs):
    with pytest.raises(ValueError):
        MeasureConfig(**kwargs)


# -- noise sweep -------------------------------------------------------------------------------

def test_sweep_zero_entry_is_exact():
    net = logistic_1d_net()
    x = np.random.default_rng(0).uniform(size=(200, 1, 1, 1))
    y = net.predict(x)
    y[:20] = (y[:20] + 1) % 3
    rows = noise_sweep(net, x, y, [0.0, 0.1, 0.3])
    assert rows[0]["accuracy"] == pytest.approx(90.0)
    wac = noise_sweep(net, x, None, [0.0], target=1)
    assert wac[0]["accuracy"] == pytest.approx(100.0 * np.mean(net.predict(x) == 1))


def test_sweep_rank_correlation_negative():
    from scipy.stats import spearmanr

    net = logistic_1d_net()
    x = np.full((300, 1, 1, 1), 0.5)
    sig = [0.0, 0.05, 0.1, 0.2, 0.3, 0.5, 0.8]
    rows = noise_sweep(net, x, np.ones(300, int), sig, draws=4, seed=1)
    acc = [r["accuracy"] for r in rows]
    assert acc[-1] <= acc[0]
    assert spearmanr(sig, acc)[0] < 0


def test_sweep_validates_sigmas():
    net = logistic_1d_net()
    x = np.zeros((2, 1, 1, 1))
    with pytest.raises(ValueError):
        noise_sweep(net, x, [0, 0], [0.1, 0.0])
    with pytest.raises(ValueError):
        noise_sweep(net, x, [0, 0], [-0.1, 0.0])


# -- hypersphere volume ratio ---------------------------------------------------------------------

def mp_log_ratio(a, b, n):
    """Full n-ball volume formula at 50 digits, radii sqrt(n)*spec, no cancellation used."""
    mpmath.mp.dps = 50
    n = mpmath.mpf(n)

    def vol(r):
        return mpmath.pi ** (n / 2) / mpmath.gamma(n / 2 + 1) * r ** n

    ra = mpmath.sqrt(n) * mpmath.mpf(a)
    rb = mpmath.sqrt(n) * mpmath.mpf(b)
    return mpmath.log10(vol(ra) / vol(rb))


def test_volume_ratio_identity():
    assert log_volume_ratio(0.2, 0.2, 50) == 0.0


def test_volume_ratio_reported_value():
    got = log_volume_ratio(0.0364, 0.3569, 108)
    assert got == pytest.approx(-107.08, abs=0.01)
    assert abs(got - math.log10(6e-108)) <= 1.0


def test_volume_ratio_extended_precision():
    got = log_volume_ratio(0.0364, 0.3569, 108)
    ref = float(mp_log_ratio("0.0364", "0.3569", 108))
    assert abs(got - ref) <= 1e-9 * abs(ref)


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-4, 10.0), st.floats(1e-4, 10.0), st.integers(1, 3000))
def test_volume_ratio_matches_oracle(a, b, n):
    ref = float(mp_log_ratio(a, b, n))
    got = log_volume_ratio(a, b, n)
    assert got == pytest.approx(ref, rel=1e-9, abs=1e-9)
    assert log_volume_ratio(b, a, n) == pytest.approx(-got, rel=1e-12, abs=1e-12)


def test_volume_ratio_never_underflows():
    got = log_volume_ratio(1e-3, 1.0, 100_000)
    assert math.isfinite(got) and got == pytest.approx(-300_000.0)


@pytest.mark.parametrize("args", [(0.0, 0.1, 5), (0.1, -1.0, 5), (0.1, 0.2, 0)])
def test_volume_ratio_rejects(args):
    with pytest.raises(ValueError):
        log_volume_ratio(*args)
