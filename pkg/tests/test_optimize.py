from dataclasses import replace

import numpy as np
import pytest

from ringlab.diffusion import GuidanceConfig, forward_diffuse
from ringlab.mixture import Conditioning, MixtureModel
from ringlab.optimize import (DivergenceError, OptimizerConfig, format_log, loss_cons,
                              loss_cons_grad, loss_ret, loss_ret_grad, objective_grads, optimize,
                              window_timesteps)
from ringlab.grid import fft2
from ringlab.watermark import (WatermarkPattern, extract, inject, ring_mean, watermark_norm,
                               write_bins)


class OracleModel:
    """Returns a fixed noise grid regardless of input: a perfect predictor for one sample."""

    def __init__(self, alpha_bar, noise):
        self.alpha_bar = alpha_bar
        self.noise = noise

    def predict(self, x, t, cond=None):
        return self.noise


def objective(x_t, t, x0, model, cond, pattern, w_p, g, cfg):
    n = x_t.size if cfg.reduction == "sum" else 1
    x_star = inject(x_t, pattern)
    return n * (cfg.alpha * loss_ret(x_star, t, x0, model, cond, w_p, g)
                + cfg.beta * loss_cons(x_star, t, model, w_p))


@pytest.fixture
def setup(model, schedule, mask, rng):
    x0, comps = model.sample_dataset(1, 4)
    t = 260
    x_t = forward_diffuse(x0[0], t, rng.standard_normal((32, 32)), schedule)
    pattern = WatermarkPattern(3 * WatermarkPattern.random(mask, rng).values, mask)
    w_p = Conditioning(model.log_priors + 0.3 * rng.standard_normal(model.K),
                       0.2 * rng.standard_normal(model.bias_dim))
    return x0[0], x_t, t, model.prompt(comps[0]), pattern, w_p


def test_loss_ret_zero_for_perfect_predictor(schedule, rng):
    x0 = rng.standard_normal((16, 16))
    noise = rng.standard_normal((16, 16))
    x_t = forward_diffuse(x0, 500, noise, schedule)
    m = OracleModel(schedule.alpha_bar, noise)
    assert loss_ret(x_t, 500, x0, m, None, None, GuidanceConfig()) <= 1e-10


def test_loss_ret_noop_watermark(setup, model, mask):
    x0, x_t, t, cond, _, w_p = setup
    # make every ring constant so that writing the ring means changes nothing
    s = fft2(x_t)
    s = write_bins(s, ring_mean(s[mask.pos_rows, mask.pos_cols], mask)[mask.pos_ring], mask)
    x_flat = np.fft.ifft2(np.fft.ifftshift(s)).real
    same = WatermarkPattern(extract(x_flat, mask), mask)
    g = GuidanceConfig()
    assert loss_ret(inject(x_flat, same), t, x0, model, cond, w_p, g) == pytest.approx(
        loss_ret(x_flat, t, x0, model, cond, w_p, g), rel=1e-9)


def test_loss_ret_single_gaussian_quadratic(schedule, mask, rng):
    mu = 0.5 * rng.standard_normal((1, 32, 32))
    s0 = 0.3
    m = MixtureModel(mu, s0, [1.0], schedule.alpha_bar, bias_dim=8)
    t = 240
    ab = schedule.alpha_bar[t]
    a, sig = np.sqrt(ab), np.sqrt(1 - ab)
    s2 = ab * s0 ** 2 + 1 - ab
    x0 = mu[0] + s0 * rng.standard_normal((32, 32))
    x_t = forward_diffuse(x0, t, rng.standard_normal((32, 32)), schedule)
    w_p = Conditioning(np.zeros(1), 0.1 * rng.standard_normal(8))
    cond = Conditioning(np.zeros(1), 0.05 * rng.standard_normal(8))
    g = GuidanceConfig(7.5, 1.0)
    bias = 7.5 * m.bias_field(cond.bias) + 1.0 * m.bias_field(w_p.bias)
    for _ in range(3):
        pattern = WatermarkPattern.random(mask, rng)
        delta = inject(x_t, pattern) - x_t
        # x0_pred = (x - sig * (sig (x - a mu)/s2 + bias)) / a is affine in x
        r0 = (x_t - sig * (sig * (x_t - a * mu[0]) / s2 + bias)) / a - x0
        k = (1 - sig * sig / s2) / a
        sym = np.mean((r0 + k * delta) ** 2)
        got = loss_ret(inject(x_t, pattern), t, x0, m, cond, w_p, g)
        assert got == pytest.approx(sym, rel=1e-8)


def test_loss_cons_null_and_bias_closed_form(model, rng):
    x = rng.standard_normal((32, 32))
    assert loss_cons(x, 300, model, model.null_embedding()) <= 1e-12
    c = 0.7
    coeffs = np.zeros(model.bias_dim)
    coeffs[0] = c
    w_p = Conditioning(model.log_priors, coeffs)
    n = 32 * 32
    field = model.bias_basis[0] * np.sqrt(n)  # unit-norm basis field
    expect = c ** 2 / n * np.sum(field ** 2) / n
    assert loss_cons(x, 300, model, w_p) == pytest.approx(expect, rel=1e-12)
    w_p2 = Conditioning(model.log_priors, 2 * coeffs)
    assert loss_cons(x, 300, model, w_p2) == pytest.approx(4 * loss_cons(x, 300, model, w_p), rel=1e-9)


def test_loss_grads_match_finite_differences(setup, model, rng):
    x0, x_t, t, cond, _, w_p = setup
    g = GuidanceConfig()
    x = x_t + 0.5 * rng.standard_normal(x_t.shape)
    _, gx_r, gw_r = loss_ret_grad(x, t, x0, model, cond, w_p, g)
    _, gx_c, gw_c = loss_cons_grad(x, t, model, w_p)
    h = 1e-6
    for _ in range(5):
        d = rng.standard_normal(x.shape)
        fd_r = (loss_ret(x + h * d, t, x0, model, cond, w_p, g)
                - loss_ret(x - h * d, t, x0, model, cond, w_p, g)) / (2 * h)
        fd_c = (loss_cons(x + h * d, t, model, w_p) - loss_cons(x - h * d, t, model, w_p)) / (2 * h)
        assert np.sum(gx_r * d) == pytest.approx(fd_r, rel=1e-4)
        assert np.sum(gx_c * d) == pytest.approx(fd_c, rel=1e-4)
        dl, db = rng.standard_normal(model.K), rng.standard_normal(model.bias_dim)
        wp_p = Conditioning(w_p.logits + h * dl, w_p.bias + h * db)
        wp_m = Conditioning(w_p.logits - h * dl, w_p.bias - h * db)
        fd_r = (loss_ret(x, t, x0, model, cond, wp_p, g) - loss_ret(x, t, x0, model, cond, wp_m, g)) / (2 * h)
        fd_c = (loss_cons(x, t, model, wp_p) - loss_cons(x, t, model, wp_m)) / (2 * h)
        assert gw_r.logits @ dl + gw_r.bias @ db == pytest.approx(fd_r, rel=1e-4)
        assert gw_c.logits @ dl + gw_c.bias @ db == pytest.approx(fd_c, rel=1e-4)


@pytest.mark.parametrize("reduction", ["sum", "mean"])
def test_objective_ring_gradient_matches_finite_differences(setup, model, mask, rng, reduction):
    x0, x_t, t, cond, pattern, w_p = setup
    cfg = OptimizerConfig(reduction=reduction)
    g = GuidanceConfig()
    _, g_wi, g_wp = objective_grads(x_t, t, x0, model, cond, pattern, w_p, g, cfg)
    n_pos = mask.ring_counts // 2
    h = 1e-5
    for r in rng.choice(mask.n_rings, 4, replace=False):
        for unit in (1.0, 1j):
            e = np.zeros(mask.n_rings, complex)
            e[r] = unit * h
            jp = objective(x_t, t, x0, model, cond, WatermarkPattern(pattern.values + e, mask), w_p, g, cfg) \
                - cfg.lam * watermark_norm(WatermarkPattern(pattern.values + e, mask))
            jm = objective(x_t, t, x0, model, cond, WatermarkPattern(pattern.values - e, mask), w_p, g, cfg) \
                - cfg.lam * watermark_norm(WatermarkPattern(pattern.values - e, mask))
            fd = (jp - jm) / (2 * h)
            an = n_pos[r] * (g_wi[r].real if unit == 1.0 else g_wi[r].imag)
            assert an == pytest.approx(fd, rel=1e-4)
    dl, db = rng.standard_normal(model.K), rng.standard_normal(model.bias_dim)
    hp = 1e-6
    jp = objective(x_t, t, x0, model, cond, pattern, Conditioning(w_p.logits + hp * dl, w_p.bias + hp * db), g, cfg)
    jm = objective(x_t, t, x0, model, cond, pattern, Conditioning(w_p.logits - hp * dl, w_p.bias - hp * db), g, cfg)
    assert g_wp.logits @ dl + g_wp.bias @ db == pytest.approx((jp - jm) / (2 * hp), rel=1e-4)


def _small_run(model, schedule, mask, guidance, **kw):
    d, c = model.sample_dataset(10, 1)
    cfg = OptimizerConfig(**{"rounds": 40, **kw})
    return optimize(model, d, mask, cfg, schedule, guidance, 3, prompts=model.prompt(c))


def test_zero_weights_leave_parameters_unchanged(model, schedule, mask):
    for method in ("sgd", "momentum", "adam"):
        art, log = _small_run(model, schedule, mask, GuidanceConfig(), alpha=0, beta=0, lam=0, method=method)
        init = WatermarkPattern.random(mask, np.random.default_rng(3))
        assert np.array_equal(art.pattern.values, init.values)
        assert art.w_p == model.null_embedding()


def test_norm_only_objective_grows_every_round(model, schedule, mask):
    _, log = _small_run(model, schedule, mask, GuidanceConfig(), alpha=0, beta=0, lam=0.005)
    norms = [r["wi_norm"] for r in log]
    assert np.all(np.diff(norms) > 0)


def test_default_run_strengthens_and_hides(model, schedule, mask):
    d, c = model.sample_dataset(50, 0)
    art, log = optimize(model, d, mask, OptimizerConfig(), schedule, GuidanceConfig(), 17,
                        prompts=model.prompt(c))
    init = WatermarkPattern.random(mask, np.random.default_rng(17))
    assert watermark_norm(art.pattern) > watermark_norm(init)
    held, hc = model.sample_dataset(100, 999)
    rng = np.random.default_rng(5)
    with_wp = without = 0.0
    for i in range(100):
        t = int(rng.choice(window_timesteps(schedule, (200, 300))))
        xs = inject(forward_diffuse(held[i], t, rng.standard_normal((32, 32)), schedule), art.pattern)
        c_i = model.prompt(hc[i])
        with_wp += loss_ret(xs, t, held[i], model, c_i, art.w_p, GuidanceConfig())
        without += loss_ret(xs, t, held[i], model, c_i, model.null_embedding(), GuidanceConfig())
    assert with_wp < without


def test_log_is_deterministic(model, schedule, mask):
    a = format_log(_small_run(model, schedule, mask, GuidanceConfig())[1])
    b = format_log(_small_run(model, schedule, mask, GuidanceConfig())[1])
    assert a == b
    assert a.splitlines()[0] == "round,t,l_ret,l_cons,wi_norm,bias_norm,wall_time"


def test_divergence_guard(model, schedule, mask):
    with pytest.raises(DivergenceError) as info:
        _small_run(model, schedule, mask, GuidanceConfig(), lam=1e6, lr_wi=20, rounds=300)
    assert len(info.value.log) < 300


def test_config_validation():
    with pytest.raises(ValueError):
        OptimizerConfig(lr_wi=-1)
    with pytest.raises(ValueError):
        OptimizerConfig(method="lbfgs")
    with pytest.raises(ValueError):
        OptimizerConfig(t_window=(300, 200))
    assert OptimizerConfig().to_dict()["t_window"] == [200, 300]
