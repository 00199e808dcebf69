import numpy as np
import pytest

from latentloop import tensor as T
from latentloop.backbone import ToyLM, VisionEncoder, VisionProjector, VisualFeatures, generate_greedy
from latentloop.errors import ConfigError, ShapeError
from latentloop.gradcheck import grad_check
from latentloop.rng import stream
from latentloop.tensor import Tensor


@pytest.fixture
def encoder():
    return VisionEncoder(d_patch=8, d_v=16, grid_h=4, grid_w=4, layers=1, rng=stream(1, "enc"))


@pytest.fixture
def lm():
    return ToyLM(vocab=32, d_t=32, layers=3, heads=4, max_seq=32, rng=stream(1, "lm"))


def test_encoder_shape_contract(encoder):
    feats = encoder.encode(Tensor(stream(2, "p").standard_normal((16, 8))))
    assert feats.tokens.shape == (16, 16)
    assert (feats.grid_h, feats.grid_w) == (4, 4)


def test_encoder_rejects_wrong_grid(encoder):
    with pytest.raises(ConfigError):
        encoder.encode(Tensor(np.zeros((9, 8))))


def test_encoder_zero_weights_zero_input_gives_zero_tokens(encoder):
    for p in encoder.params.values():
        p.data[:] = 0.0
    feats = encoder.encode(Tensor(np.zeros((16, 8))))
    assert np.all(feats.tokens.data == 0.0)


def test_encoder_paper_shape_grid():
    enc = VisionEncoder(d_patch=8, d_v=16, grid_h=16, grid_w=16, layers=1, rng=stream(1, "enc16"))
    feats = enc.encode(Tensor(np.zeros((256, 8))))
    assert feats.tokens.shape == (256, 16)


def test_visual_features_reshape_round_trip():
    rng = stream(3, "vf")
    tokens = rng.standard_normal((12, 5))
    feats = VisualFeatures(Tensor(tokens), grid_h=3, grid_w=4)
    grid = feats.to_grid()
    assert np.array_equal(grid.reshape(12, 5), tokens)


def test_visual_features_rejects_bad_tiling():
    with pytest.raises(ShapeError):
        VisualFeatures(Tensor(np.zeros((10, 4))), grid_h=3, grid_w=4)


def test_projector_identity_case():
    proj = VisionProjector(d_v=8, d_t=8, rng=stream(4, "proj"), activation="none")
    proj.init_identity()
    x = stream(4, "x").standard_normal((5, 8))
    feats = VisualFeatures(Tensor(x), grid_h=1, grid_w=5)
    assert np.array_equal(proj.project(feats).data, x)


def test_projector_zero_input_replicates_bias_row():
    proj = VisionProjector(d_v=8, d_t=12, rng=stream(4, "proj2"))
    proj.params["b1"].data[:] = stream(4, "b1").standard_normal(12)
    proj.params["b2"].data[:] = stream(4, "b2").standard_normal(12)
    out = proj.project(Tensor(np.zeros((6, 8)))).data
    for row in out[1:]:
        assert np.array_equal(row, out[0])


def test_projector_gradient_via_downstream_scalar():
    proj = VisionProjector(d_v=4, d_t=4, rng=stream(4, "proj3"))
    x = Tensor(stream(4, "x3").standard_normal((3, 4)))

    def f(w1, b1, w2, b2):
        proj.params.update({"w1": w1, "b1": b1, "w2": w2, "b2": b2})
        return T.tsum(proj.project(x) ** 2.0)

    report = grad_check(f, [proj.params[k] for k in ("w1", "b1", "w2", "b2")], tol=1e-4)
    assert report.passed, str(report)


def test_lm_single_position_attention_is_all_ones(lm):
    rec = lm.forward(Tensor(stream(5, "s1").standard_normal((1, 32))))
    assert rec.attention.shape == (3, 4, 1, 1)
    assert np.allclose(rec.attention.data, 1.0, atol=0)


def test_lm_attention_rows_are_probabilities(lm):
    rec = lm.forward(Tensor(stream(5, "s2").standard_normal((7, 32))))
    sums = rec.attention.data.sum(axis=-1)
    assert np.all(np.abs(sums - 1.0) < 1e-9)
    assert np.all(rec.attention.data >= 0)


def test_lm_causality_by_perturbation(lm):
    rng = stream(5, "causal")
    x = rng.standard_normal((6, 32))
    base = lm.forward(Tensor(x)).logits.data
    for j in range(6):
        bumped = x.copy()
        bumped[j] += rng.standard_normal(32)
        pert = lm.forward(Tensor(bumped)).logits.data
        for i in range(6):
            changed = not np.allclose(base[i], pert[i], atol=1e-12)
            if i < j:
                assert not changed, f"position {i} saw change at later position {j}"
        assert not np.allclose(base[j], pert[j], atol=1e-12)


def test_lm_rejects_empty_sequence(lm):
    with pytest.raises(ValueError):
        lm.forward(Tensor(np.zeros((0, 32))))


def test_lm_record_shapes_batched(lm):
    rec = lm.forward(Tensor(stream(5, "s3").standard_normal((2, 5, 32))), img_span=(0, 3))
    assert rec.per_layer_last_hidden.shape == (2, 3, 32)
    assert rec.attention.shape == (2, 3, 4, 1, 5)
    assert rec.logits.shape == (2, 5, 32)
    assert rec.last_layer_hidden.shape == (2, 5, 32)


def test_lm_batched_matches_single(lm):
    rng = stream(5, "bvs")
    x = rng.standard_normal((2, 6, 32))
    rec_b = lm.forward(Tensor(x))
    for b in range(2):
        rec_s = lm.forward(Tensor(x[b]))
        assert np.allclose(rec_b.logits.data[b], rec_s.logits.data, atol=1e-12)
        assert np.allclose(rec_b.per_layer_last_hidden.data[b], rec_s.per_layer_last_hidden.data, atol=1e-12)


def test_lm_img_span_validation(lm):
    with pytest.raises(ValueError):
        lm.forward(Tensor(np.zeros((4, 32))), img_span=(0, 9))


def test_generate_respects_budget(lm):
    ctx = Tensor(stream(6, "gen").standard_normal((3, 32)))
    ids = generate_greedy(lm, ctx, eos_id=1, max_new_tokens=3)
    assert len(ids) <= 3


def test_generate_zero_budget_is_empty_not_error(lm):
    ctx = Tensor(stream(6, "gen0").standard_normal((3, 32)))
    assert generate_greedy(lm, ctx, eos_id=1, max_new_tokens=0) == []


def test_generate_deterministic(lm):
    ctx = Tensor(stream(6, "gend").standard_normal((4, 32)))
    a = generate_greedy(lm, ctx, eos_id=1, max_new_tokens=8)
    b = generate_greedy(lm, ctx, eos_id=1, max_new_tokens=8)
    assert a == b
