import numpy as np
import pytest

from ringlab.mixture import Conditioning, MixtureModel


def random_model(schedule, K=3, size=16, sigma0=0.4, seed=1):
    r = np.random.default_rng(seed)
    means = 0.5 * r.standard_normal((K, size, size))
    pri = r.random(K) + 0.5
    return MixtureModel(means, sigma0, pri / pri.sum(), schedule.alpha_bar, bias_dim=6)


def test_single_component_closed_form(schedule, rng):
    mu = rng.standard_normal((1, 8, 8))
    m = MixtureModel(mu, 0.3, [1.0], schedule.alpha_bar, bias_dim=4)
    x = rng.standard_normal((8, 8))
    for t in (1, 240, 999):
        ab = schedule.alpha_bar[t]
        s2 = ab * 0.09 + 1 - ab
        expect = np.sqrt(1 - ab) * (x - np.sqrt(ab) * mu[0]) / s2
        assert np.allclose(m.predict(x, t), expect, rtol=1e-12, atol=1e-14)


def test_null_equals_prior_logits(model, rng):
    x = rng.standard_normal((3, 32, 32))
    a = model.predict(x, 400, None)
    b = model.predict(x, 400, model.null_embedding())
    assert np.max(np.abs(a - b)) <= 1e-12


def test_eps_is_scaled_score(schedule, rng):
    m = random_model(schedule)
    t = 300
    x = np.sqrt(schedule.alpha_bar[t]) * m.means[1] + 0.8 * rng.standard_normal((16, 16))
    eps = m.predict(x, t)
    h = 1e-5
    sig = np.sqrt(1 - schedule.alpha_bar[t])
    for _ in range(8):
        d = rng.standard_normal((16, 16))
        fd = (m.log_density(x + h * d, t) - m.log_density(x - h * d, t)) / (2 * h)
        assert np.sum(eps * d) == pytest.approx(-sig * fd, rel=1e-6, abs=1e-8)


def test_vjp_single_component_scalar(schedule, rng):
    mu = rng.standard_normal((1, 8, 8))
    m = MixtureModel(mu, 0.3, [1.0], schedule.alpha_bar, bias_dim=4)
    v = rng.standard_normal((8, 8))
    t = 500
    ab = schedule.alpha_bar[t]
    gx, _ = m.vjp(rng.standard_normal((8, 8)), t, None, v)
    assert np.allclose(gx, np.sqrt(1 - ab) / (ab * 0.09 + 1 - ab) * v, rtol=1e-12)


def test_vjp_zero_probe(model, rng):
    x = rng.standard_normal((32, 32))
    gx, gc = model.vjp(x, 300, model.prompt(1), np.zeros((32, 32)))
    assert not gx.any() and not gc.logits.any() and not gc.bias.any()


def test_vjp_matches_finite_differences(schedule, rng):
    m = random_model(schedule)
    t = 400
    x = np.sqrt(schedule.alpha_bar[t]) * m.means[0] + 0.9 * rng.standard_normal((16, 16))
    cond = Conditioning(rng.standard_normal(3), rng.standard_normal(6))
    v = rng.standard_normal((16, 16))
    gx, gc = m.vjp(x, t, cond, v)
    h = 1e-6
    f = lambda xx, cc: np.sum(v * m.predict(xx, t, cc))
    for _ in range(5):
        d = rng.standard_normal((16, 16))
        fd = (f(x + h * d, cond) - f(x - h * d, cond)) / (2 * h)
        assert np.sum(gx * d) == pytest.approx(fd, rel=1e-5)
        dl, db = rng.standard_normal(3), rng.standard_normal(6)
        cp = Conditioning(cond.logits + h * dl, cond.bias + h * db)
        cm = Conditioning(cond.logits - h * dl, cond.bias - h * db)
        fd = (f(x, cp) - f(x, cm)) / (2 * h)
        assert gc.logits @ dl + gc.bias @ db == pytest.approx(fd, rel=1e-5)


def test_sample_dataset_exact_means_when_noiseless(schedule):
    m = MixtureModel.default(schedule.alpha_bar, K=3, sigma0=0.0)
    x, c = m.sample_dataset(20, 3)
    assert np.array_equal(x, m.means[c])


def test_sample_dataset_binomial_counts(schedule):
    m = MixtureModel.default(schedule.alpha_bar, K=2, size=8, bias_dim=4)
    _, c = m.sample_dataset(1000, 11)
    assert abs(np.sum(c == 0) - 500) <= 3 * np.sqrt(1000 * 0.25)


def test_sample_dataset_deterministic(model):
    a, ca = model.sample_dataset(5, 42)
    b, cb = model.sample_dataset(5, 42)
    assert np.array_equal(a, b) and np.array_equal(ca, cb)


def test_prompt_selects_component(model, schedule, rng):
    t = 900
    x = rng.standard_normal((32, 32))
    pm = model.posterior_mean(x, t, model.prompt(3))
    assert np.allclose(pm, model.means[3], atol=1e-6)


def test_conditioning_round_trip(model):
    c = Conditioning(np.array([0.1, -2.0, 3.0, 0.0]), np.arange(16) / 7.0)
    assert Conditioning.from_dict(c.to_dict()) == c
    with pytest.raises(ValueError):
        Conditioning(np.array([np.nan]), np.zeros(1))
