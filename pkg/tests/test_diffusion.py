import math

import numpy as np
import pytest

from latentloop import tensor as T
from latentloop.diffusion import (
    SCHEDULE_GRID,
    SCHEDULE_KINDS,
    Denoiser,
    build_schedule,
    conv2d,
    forward_diffuse,
    make_latent_target,
    recon_loss,
    recon_loss_fixed,
    sample_reconstruction,
    upsample_nearest2,
)
from latentloop.errors import ConfigError, ShapeError
from latentloop.fusion import ThoughtChain
from latentloop.gradcheck import grad_check
from latentloop.rng import stream
from latentloop.tensor import Tensor


def toy_denoiser(seed=0, in_channels=2, channels=(4, 6), cond_dim=8):
    return Denoiser(in_channels, channels, cond_dim, stream(seed, "den"), t_emb_dim=8, max_thoughts=8)


def chain_of(rng, k, d):
    chain = ThoughtChain()
    chain.thoughts = [Tensor(rng.standard_normal(d)) for _ in range(k)]
    return chain


# -- schedules -----------------------------------------------------------------


def test_linear_schedule_reference_endpoints():
    sched = build_schedule("linear", 1e-4, 0.02, 1000)
    assert sched.beta[0] == 1e-4
    assert sched.beta[-1] == 0.02
    assert sched.alpha_bar[0] == 1.0 - 1e-4


def test_linear_schedule_final_alpha_bar_matches_product_oracle():
    sched = build_schedule("linear", 1e-4, 0.02, 1000)
    acc = 1.0
    for b in sched.beta:
        acc *= 1.0 - b
    assert abs(sched.alpha_bar[-1] - acc) <= 1e-12 * abs(acc)
    assert abs(sched.alpha_bar[-1] - 4.0e-5) < 1e-5  # coarse magnitude check


def test_single_step_schedule():
    sched = build_schedule("linear", 0.3, 0.3, 1)
    assert sched.alpha_bar[0] == pytest.approx(0.7, abs=0)


def test_schedule_invalid_bounds():
    with pytest.raises(ConfigError):
        build_schedule("linear", 0.0, 0.02, 10)
    with pytest.raises(ConfigError):
        build_schedule("linear", 0.05, 0.02, 10)
    with pytest.raises(ConfigError):
        build_schedule("warped", 1e-4, 0.02, 10)


def test_alpha_bar_strictly_decreasing_all_kinds():
    rng = stream(7, "sched")
    for _ in range(20):
        b0 = float(rng.uniform(1e-5, 5e-3))
        b1 = float(rng.uniform(b0, 0.3))
        t = int(rng.integers(2, 400))
        for kind in SCHEDULE_KINDS:
            sched = build_schedule(kind, b0, b1, t)
            assert np.all(np.diff(sched.alpha_bar) < 0), f"{kind} not strictly decreasing"
            assert np.all((sched.beta > 0) & (sched.beta < 1))
            assert np.all((sched.alpha_bar > 0) & (sched.alpha_bar < 1))


def test_cosine_betas_capped_at_beta_end():
    for kind in ("cosine", "squared_cosine"):
        sched = build_schedule(kind, 1e-4, 0.02, 500)
        assert sched.beta.max() <= 0.02 + 1e-15


def test_schedule_grid_is_the_six_config_matrix():
    assert len(SCHEDULE_GRID) == 6
    assert set(SCHEDULE_GRID) == {(k, m) for k in ("linear", "cosine", "squared_cosine") for m in (0.02, 0.05)}


# -- forward corruption -----------------------------------------------------------


def test_forward_diffuse_noiseless_limit():
    sched = build_schedule("linear", 1e-4, 0.02, 100)
    x0 = Tensor(stream(8, "x0").standard_normal((2, 3, 3)))
    out = forward_diffuse(x0, 40, Tensor(np.zeros((2, 3, 3))), sched)
    assert np.allclose(out.data, np.sqrt(sched.alpha_bar[39]) * x0.data, atol=0)


def test_forward_diffuse_zero_signal_limit():
    sched = build_schedule("linear", 1e-4, 0.02, 100)
    eps = Tensor(stream(8, "eps").standard_normal((2, 3, 3)))
    out = forward_diffuse(Tensor(np.zeros((2, 3, 3))), 100, eps, sched)
    assert np.allclose(out.data, np.sqrt(1 - sched.alpha_bar[99]) * eps.data, atol=0)


def test_forward_diffuse_hand_arithmetic():
    sched = build_schedule("linear", 1e-4, 0.02, 1000)
    out = forward_diffuse(Tensor([1.0]), 1, Tensor([1.0]), sched)
    assert out.data[0] == pytest.approx(math.sqrt(0.9999) + math.sqrt(0.0001), abs=1e-15)


def test_forward_diffuse_range_and_shape_errors():
    sched = build_schedule("linear", 1e-4, 0.02, 10)
    with pytest.raises(ValueError):
        forward_diffuse(Tensor([1.0]), 0, Tensor([0.0]), sched)
    with pytest.raises(ValueError):
        forward_diffuse(Tensor([1.0]), 11, Tensor([0.0]), sched)
    with pytest.raises(ShapeError):
        forward_diffuse(Tensor([1.0, 2.0]), ostensible_t := 3, Tensor([0.0]), sched)


def test_forward_diffuse_second_moment():
    sched = build_schedule("linear", 1e-3, 0.05, 50)
    rng = stream(8, "moment")
    x0 = rng.standard_normal(16)
    t = 30
    ab = sched.alpha_bar[t - 1]
    total = 0.0
    n_draws = 1000
    for _ in range(n_draws):
        eps = rng.standard_normal(16)
        xt = forward_diffuse(Tensor(x0), t, Tensor(eps), sched).data
        total += float(np.sum(xt**2))
    expected = ab * float(np.sum(x0**2)) + (1 - ab) * 16
    assert abs(total / n_draws - expected) < 0.05 * expected


# -- conv plumbing ------------------------------------------------------------------


def test_conv2d_matches_manual_cross_correlation():
    rng = stream(9, "conv")
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b), pad=1).data
    ref = np.zeros((1, 3, 5, 5))
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    for co in range(3):
        for i in range(5):
            for j in range(5):
                ref[0, co, i, j] = np.sum(xp[0, :, i : i + 3, j : j + 3] * w[co]) + b[co]
    assert np.allclose(out, ref, atol=1e-12)


def test_conv2d_gradients():
    rng = stream(9, "conv_grad")
    x = Tensor(rng.standard_normal((2, 2, 4, 4)))
    w = Tensor(rng.standard_normal((3, 2, 3, 3)))
    b = Tensor(rng.standard_normal(3))
    report = grad_check(lambda *a: T.tsum(conv2d(*a, stride=2, pad=1) ** 2.0), [x, w, b])
    assert report.passed, str(report)


def test_upsample_nearest():
    x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2))
    out = upsample_nearest2(x).data
    assert out.shape == (1, 1, 4, 4)
    expected = np.array([[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]], dtype=float)
    assert np.array_equal(out[0, 0], expected)


# -- denoiser -------------------------------------------------------------------------


def test_denoiser_output_shape_matches_input():
    den = toy_denoiser()
    rng = stream(10, "shapes")
    for hw in ((7, 7), (6, 6), (8, 5)):
        x = Tensor(rng.standard_normal((2,) + hw))
        out = den.predict(x, 3, chain_of(rng, 3, 8))
        assert out.shape == x.shape


def test_denoiser_paper_shaped_config_constructs():
    den = Denoiser(4, (96, 192, 384, 512), 768, stream(10, "paper"), layers_per_block=3)
    x = Tensor(stream(10, "px").standard_normal((4, 28, 28)))
    out = den.predict(x, 500, chain_of(stream(10, "pc"), 4, 768))
    assert out.shape == (4, 28, 28)


def test_denoiser_rejects_empty_chain():
    den = toy_denoiser()
    with pytest.raises(ValueError):
        den.predict(Tensor(np.zeros((2, 7, 7))), 1, ThoughtChain())


def test_denoiser_thought_order_matters_somewhere():
    den = toy_denoiser(seed=3)
    rng = stream(10, "order")
    differs = False
    for trial in range(5):
        chain = chain_of(stream(10, "oc", trial), 4, 8)
        x = Tensor(stream(10, "ox", trial).standard_normal((2, 7, 7)))
        a = den.predict(x, 5, chain).data
        swapped = ThoughtChain()
        swapped.thoughts = [chain.thoughts[i] for i in (1, 0, 2, 3)]
        b = den.predict(x, 5, swapped).data
        if not np.allclose(a, b, atol=1e-12):
            differs = True
            break
    assert differs, "thought positional embedding had no effect in any trial"


def test_denoiser_gradients_params_and_thoughts():
    den = Denoiser(1, (3, 4), 6, stream(11, "gc"), t_emb_dim=4, max_thoughts=4)
    rng = stream(11, "gc_data")
    x = Tensor(rng.standard_normal((1, 5, 5)))
    z1, z2 = Tensor(rng.standard_normal(6)), Tensor(rng.standard_normal(6))
    names = sorted(den.params)

    def f(za, zb, *tensors):
        for name, t in zip(names, tensors):
            den.params[name] = t
        return T.tsum(den.predict(x, 2, [za, zb]) ** 2.0)

    report = grad_check(f, [z1, z2] + [den.params[n] for n in names], tol=1e-4)
    assert report.passed, str(report)


# -- loss and sampling ---------------------------------------------------------------


def test_recon_loss_zero_for_oracle_denoiser():
    sched = build_schedule("linear", 1e-4, 0.02, 20)
    rng = stream(12, "oracle")
    x0 = Tensor(rng.standard_normal((2, 5, 5)))
    eps = rng.standard_normal((2, 5, 5))

    class PerfectDenoiser:
        def predict(self, x_t, t, chain):
            return Tensor(eps)

    loss = recon_loss_fixed(x0, chain_of(rng, 2, 8), sched, PerfectDenoiser(), 7, eps)
    assert loss.item() == 0.0


def test_recon_loss_zero_denoiser_concentration():
    sched = build_schedule("linear", 1e-4, 0.02, 50)
    rng = stream(12, "conc")
    x0 = Tensor(rng.standard_normal((2, 7, 7)))  # 98 elements

    class ZeroDenoiser:
        def predict(self, x_t, t, chain):
            return Tensor(np.zeros(x_t.shape))

    loss = recon_loss(x0, chain_of(rng, 2, 8), sched, ZeroDenoiser(), stream(12, "draw"))
    assert 0.7 < loss.item() < 1.3


def test_recon_loss_nonnegative_and_finite():
    sched = build_schedule("linear", 1e-4, 0.02, 16)
    den = toy_denoiser(seed=5)
    rng = stream(12, "nn")
    x0 = Tensor(rng.standard_normal((2, 7, 7)))
    loss = recon_loss(x0, chain_of(rng, 3, 8), sched, den, stream(12, "nn_draw"))
    assert loss.item() >= 0.0 and np.isfinite(loss.item())


def test_recon_loss_gradient_wrt_thoughts_fixed_draw():
    sched = build_schedule("linear", 1e-3, 0.05, 12)
    den = Denoiser(1, (3, 4), 6, stream(13, "gc2"), t_emb_dim=4, max_thoughts=4)
    rng = stream(13, "gc2_data")
    x0 = Tensor(rng.standard_normal((1, 5, 5)))
    eps = rng.standard_normal((1, 5, 5))
    z1, z2 = Tensor(rng.standard_normal(6)), Tensor(rng.standard_normal(6))
    report = grad_check(lambda a, b: recon_loss_fixed(x0, [a, b], sched, den, 6, eps), [z1, z2], tol=1e-4)
    assert report.passed, str(report)


def test_stop_gradient_chain_blocks_thought_grads():
    sched = build_schedule("linear", 1e-3, 0.05, 12)
    den = toy_denoiser(seed=6, in_channels=1, channels=(3, 4), cond_dim=6)
    rng = stream(13, "stop")
    x0 = Tensor(rng.standard_normal((1, 7, 7)))
    z = Tensor(rng.standard_normal(6), requires_grad=True)
    eps = rng.standard_normal((1, 7, 7))
    loss = recon_loss_fixed(x0, [z], sched, den, 3, eps, stop_gradient_chain=True)
    loss.backward()
    assert z.grad is None


def test_single_step_sampling_closed_form():
    sched = build_schedule("linear", 0.04, 0.04, 1)
    rng_model = stream(14, "one")
    den = toy_denoiser(seed=7, in_channels=1, channels=(3, 4), cond_dim=6)
    chain = chain_of(rng_model, 2, 6)
    draw = stream(14, "draw")
    x1 = draw.standard_normal((1, 7, 7))
    eps_hat = den.predict(Tensor(x1), 1, chain).data
    expected = (x1 - np.sqrt(1 - sched.alpha_bar[0]) * eps_hat) / np.sqrt(sched.alpha_bar[0])
    sample = sample_reconstruction(chain, sched, den, stream(14, "draw"), (1, 7, 7))
    assert np.allclose(sample, expected, atol=1e-12)


def test_sampling_deterministic_under_seed():
    sched = build_schedule("linear", 1e-3, 0.05, 8)
    den = toy_denoiser(seed=8)
    chain = chain_of(stream(15, "c"), 3, 8)
    a = sample_reconstruction(chain, sched, den, stream(15, "s"), (2, 7, 7))
    b = sample_reconstruction(chain, sched, den, stream(15, "s"), (2, 7, 7))
    assert np.array_equal(a, b)


def test_latent_target_deterministic_and_shaped():
    rng = stream(16, "tgt")
    patches = rng.standard_normal((64, 8))
    a = make_latent_target(patches, 8, 8, (2, 7, 7), seed=0)
    b = make_latent_target(patches, 8, 8, (2, 7, 7), seed=0)
    c = make_latent_target(patches, 8, 8, (2, 7, 7), seed=1)
    assert a.shape == (2, 7, 7)
    assert np.array_equal(a, b)
    assert not np.allclose(a, c)
