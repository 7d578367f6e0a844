import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cellmamba import autodiff as ad
from cellmamba.autodiff import ConfigurationError, ShapeError, Tensor, default_dtype
from cellmamba.backbone import (
    FPN,
    PYRAMID_STRIDES,
    Backbone,
    CellMambaBlock,
    Downsample,
    ModelConfig,
    PyramidSet,
    Stem,
    fpn_build,
)
from cellmamba.boxes import decode_box, encode_box
from cellmamba.head import AdaptiveMambaHead, dual_pool, generate_anchors, run_branches, scale_weights
from cellmamba.losses import LossConfig, detection_loss
from cellmamba.mixers import TokenSequence
from cellmamba.model import CellMamba, pyramid_sizes
from cellmamba.nn import Linear
from cellmamba.tmac import CouplingState

WARM = CouplingState(2, 0)
COUPLED = CouplingState(2, 5)


def image(rng, size, b=1):
    return Tensor(rng.standard_normal((b, size, size, 3)).astype(np.float32))


# --- config / block ------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ModelConfig(stage_dims=(48, 96, 191, 384))
    with pytest.raises(ConfigurationError):
        ModelConfig(mixer_per_stage=("nc", "nc", "nc", "conv"))
    with pytest.raises(ConfigurationError):
        ModelConfig(anchors_per_location=4)
    cfg = ModelConfig.micro()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_full_depths_give_sixteen_blocks(rng):
    cfg = ModelConfig.full()
    assert cfg.stage_depths == (2, 2, 8, 4) and cfg.mixer_per_stage == ("nc", "nc", "nc", "msa")
    assert Backbone(cfg, rng).num_blocks == 16


def test_block_residual_identity(rng):
    cfg = ModelConfig.micro()
    with default_dtype(np.float64):
        blk = CellMambaBlock(8, "nc", rng, cfg).astype(np.float64)
        blk.mixer.w_out.data[:] = 0
        blk.ffn.fc2.weight.data[:] = 0
        blk.ffn.fc2.bias.data[:] = 0
        blk.tmac.kernel.data[:] = 0
        blk.tmac.bias.data[:] = 50.0  # sigmoid rounds to exactly 1
        x = TokenSequence(Tensor(rng.standard_normal((2, 64, 8))), 8, 8)
        for state in (WARM, COUPLED):
            np.testing.assert_array_equal(blk(x, state).data.data, x.data.data)


@pytest.mark.parametrize("mixer", ["nc", "msa"])
def test_block_shape(rng, mixer):
    x = TokenSequence(Tensor(rng.standard_normal((2, 64, 32))), 8, 8)
    assert CellMambaBlock(32, mixer, rng, ModelConfig.micro())(x, COUPLED).data.shape == (2, 64, 32)


# --- stem / downsample / backbone ------------------------------------------------------------


@pytest.mark.parametrize("size,grid", [(128, 32), (256, 64)])
def test_stem_stride_four(rng, size, grid):
    assert Stem(16, rng)(image(rng, size)).hw == (grid, grid)


def test_stem_zero_image_zero_bias(rng):
    stem = Stem(16, rng)
    assert np.all(stem(Tensor(np.zeros((1, 64, 64, 3), dtype=np.float32))).data.data == 0)


def test_stem_rejects_indivisible_size(rng):
    with pytest.raises(ShapeError, match="multiple of 32"):
        Stem(16, rng)(image(rng, 48))


def test_downsample(rng):
    ds = Downsample(8, 16, rng)
    x = TokenSequence(Tensor(rng.standard_normal((1, 32 * 32, 8))), 32, 32)
    assert ds(x).hw == (16, 16) and ds(x).channels == 16
    with pytest.raises(ShapeError):
        ds(TokenSequence(Tensor(rng.standard_normal((1, 15, 8))), 3, 5))


def test_backbone_micro_stride_arithmetic(rng):
    l2, l3, l4 = Backbone(ModelConfig.micro(), rng)(image(rng, 128), WARM)
    assert l2.shape[1:3] == (16, 16) and l3.shape[1:3] == (8, 8) and l4.shape[1:3] == (4, 4)


def test_backbone_deterministic():
    x = image(np.random.default_rng(0), 64)
    outs = [CellMamba(ModelConfig.micro(), seed=3).pyramid(x, COUPLED) for _ in range(2)]
    for a, b in zip(*outs):
        np.testing.assert_array_equal(a.data, b.data)


def test_micro_parameter_count_is_stable():
    assert CellMamba(ModelConfig.micro(), seed=0).num_parameters() == 1667728
    assert CellMamba(ModelConfig.micro(), seed=9).num_parameters() == 1667728


# --- FPN -------------------------------------------------------------------------------------


def test_fpn_constant_composition(rng):
    fpn = FPN((1, 1, 1), 1, rng)
    for lat in fpn.laterals:
        lat.weight.data[:] = 1.0
        lat.bias.data[:] = 0.0
    for sm in fpn.smooth:
        sm.weight.data[:] = 0.0
        sm.weight.data[1, 1] = 1.0
        sm.bias.data[:] = 0.0
    c2, c3, c4 = 1.5, -2.0, 4.0
    pyr = fpn_build(Tensor(np.full((1, 8, 8, 1), c2)), Tensor(np.full((1, 4, 4, 1), c3)), Tensor(np.full((1, 2, 2, 1), c4)), fpn)
    np.testing.assert_allclose(pyr[0].data, c2 + c3 + c4)
    np.testing.assert_allclose(pyr[1].data, c3 + c4)
    np.testing.assert_allclose(pyr[2].data, c4)


@pytest.mark.parametrize("size", [128, 256, 96])
def test_pyramid_strides(size):
    model = CellMamba(ModelConfig.micro(), seed=0)
    pyr = model.pyramid(image(np.random.default_rng(0), size), WARM)
    assert len(pyr) == 5 and pyr.strides == PYRAMID_STRIDES
    assert pyr.sizes == pyramid_sizes((size, size))
    for level, stride in zip(pyr, PYRAMID_STRIDES):
        assert level.shape[1] == -(-size // stride) and level.shape[-1] == 64
    if size == 256:
        assert [s[0] for s in pyr.sizes] == [32, 16, 8, 4, 2]


def test_fpn_channel_mismatch(rng):
    fpn = FPN((4, 6, 8), 8, rng)
    with pytest.raises(ShapeError):
        fpn(Tensor(np.zeros((1, 8, 8, 5))), Tensor(np.zeros((1, 4, 4, 6))), Tensor(np.zeros((1, 2, 2, 8))))


def test_pyramid_has_five_levels():
    with pytest.raises(ShapeError):
        PyramidSet([Tensor(np.zeros((1, 1, 1, 1)))] * 4)


def test_every_parameter_receives_gradient():
    rng = np.random.default_rng(0)
    model = CellMamba(ModelConfig.micro(warmup_epochs=1), seed=0)
    x = image(rng, 64)
    anchors = model.anchors((64, 64))
    logits, deltas = model(x, COUPLED).flat(3)
    targets = [(np.array([[4.0, 6.0, 30.0, 28.0], [30.0, 34.0, 60.0, 62.0]]), np.array([0, 2]))]
    detection_loss(logits, deltas, anchors.xyxy, anchors.boxes, targets, LossConfig()).total.backward()
    dead = [n for n, p in model.named_parameters() if p.grad is None or not np.any(p.grad)]
    assert dead == []


# --- head --------------------------------------------------------------------------------------


def test_dual_pool_examples():
    levels = [Tensor(np.full((1, 2, 2, 3), k)) for k in (1.0, 2.0, 3.0, 4.0, 5.0)]
    np.testing.assert_allclose(dual_pool(PyramidSet(levels)).data, [[1, 2, 3, 4, 5]])
    levels[4] = Tensor(np.array([2.0, 4.0]).reshape(1, 1, 1, 2))
    levels = [Tensor(np.zeros((1, 2, 2, 2)))] * 4 + [levels[4]]
    np.testing.assert_allclose(dual_pool(PyramidSet(levels)).data, [[0, 0, 0, 0, 3]])


def _identity_fc(rng):
    fc = Linear(5, 5, rng)
    fc.weight.data = np.eye(5, dtype=np.float32)
    fc.bias.data[:] = 0
    return fc


def test_scale_weight_examples(rng):
    fc = Linear(5, 5, rng)
    fc.weight.data[:] = 0
    fc.bias.data[:] = 0
    np.testing.assert_allclose(scale_weights(Tensor(rng.standard_normal((2, 5))), fc).data, 0.5)
    fc.bias.data[:] = 30.0
    alpha = scale_weights(Tensor(np.zeros((1, 5), dtype=np.float64)), fc).data
    assert np.all(alpha > 0.999)
    fc64 = _identity_fc(rng)
    alpha = scale_weights(Tensor(np.array([[1.0, 0, 0, 0, 0]])), fc64).data[0]
    assert alpha[0] == pytest.approx(0.731059, abs=1e-6) and np.allclose(alpha[1:], 0.5)


@given(arrays(np.float64, 5, elements=st.floats(-5, 5)), st.integers(0, 4), st.floats(0.01, 3.0))
def test_alpha_monotone_in_own_descriptor(s, t, bump):
    fc = _identity_fc(np.random.default_rng(0))
    base = scale_weights(Tensor(s[None]), fc).data[0]
    s2 = s.copy()
    s2[t] += bump
    moved = scale_weights(Tensor(s2[None]), fc).data[0]
    assert moved[t] > base[t]
    np.testing.assert_array_equal(np.delete(moved, t), np.delete(base, t))


def _pyramid(rng, c=16, b=1):
    return PyramidSet([Tensor(rng.standard_normal((b, n, n, c)).astype(np.float32)) for n in (8, 4, 2, 1, 1)])


def test_head_channel_counts(rng):
    for a in (1, 9):
        cfg = ModelConfig.micro(fpn_channels=16, num_classes=4, anchors_per_location=a)
        out = AdaptiveMambaHead(cfg, rng)(_pyramid(rng), COUPLED)
        assert [t.shape[-1] for t in out.class_logits] == [4 * a] * 5
        assert [t.shape[-1] for t in out.box_deltas] == [4 * a] * 5
        assert out.level_sizes == [(8, 8), (4, 4), (2, 2), (1, 1), (1, 1)]


def test_alpha_ones_equals_bypassed_scaling(rng):
    head = AdaptiveMambaHead(ModelConfig.micro(fpn_channels=16), rng)
    pyr = _pyramid(rng, b=2)
    plain = run_branches(pyr, head, COUPLED, None)
    ones = run_branches(pyr, head, COUPLED, Tensor(np.ones((2, 5), dtype=np.float32)))
    for a, b in zip(plain.class_logits + plain.box_deltas, ones.class_logits + ones.box_deltas):
        np.testing.assert_array_equal(a.data, b.data)
    bypass = AdaptiveMambaHead(ModelConfig.micro(fpn_channels=16, adaptive_scale=False), np.random.default_rng(0))
    assert bypass(pyr, COUPLED).alpha is None


def test_head_alpha_per_image_in_unit_interval(rng):
    out = AdaptiveMambaHead(ModelConfig.micro(fpn_channels=16), rng)(_pyramid(rng, b=3), COUPLED)
    assert out.alpha.shape == (3, 5) and np.all((out.alpha.data > 0) & (out.alpha.data < 1))


def test_head_prior_initialisation(rng):
    head = AdaptiveMambaHead(ModelConfig.micro(fpn_channels=16), rng)
    np.testing.assert_allclose(head.cls_conv.bias.data, -np.log(99), rtol=1e-6)
    assert abs(head.cls_conv.weight.data.std() - 0.01) < 0.005


def test_shared_branch_gradient_sums_over_levels(rng):
    with default_dtype(np.float64):
        head = AdaptiveMambaHead(ModelConfig.micro(fpn_channels=8, n_state=4), rng).astype(np.float64)
        levels = [Tensor(rng.standard_normal((1, n, n, 8))) for n in (4, 2, 2, 1, 1)]
        weights = [Tensor(rng.standard_normal((1, n, n, 3))) for n in (4, 2, 2, 1, 1)]
        alpha = Tensor(rng.uniform(0.2, 0.9, (1, 5)))

        def level_loss(i):
            out = run_branches(PyramidSet(levels), head, COUPLED, alpha)
            return (out.class_logits[i] * weights[i]).sum()

        head.zero_grad()
        sum(level_loss(i) for i in range(5)).backward()
        full = {n: p.grad.copy() for n, p in head.cls_block.named_parameters()}
        parts = {n: 0 for n in full}
        for i in range(5):
            head.zero_grad()
            level_loss(i).backward()
            for n, p in head.cls_block.named_parameters():
                parts[n] = parts[n] + (p.grad if p.grad is not None else 0)
        for n in full:
            assert np.max(np.abs(full[n] - parts[n])) < 1e-5, n


def test_single_shared_block_per_branch(rng):
    head = AdaptiveMambaHead(ModelConfig.micro(fpn_channels=16), rng)
    blocks = [m for m in head.modules() if isinstance(m, CellMambaBlock)]
    assert len(blocks) == 2


# --- anchors / box coding -----------------------------------------------------------------------


def test_first_anchor_of_stride_eight():
    anchors = generate_anchors([(2, 2)], strides=(8,))
    np.testing.assert_allclose(anchors.boxes[0], [4, 4, 32, 32])


def test_anchor_count_256():
    sizes = pyramid_sizes((256, 256))
    assert len(generate_anchors(sizes)) == 32**2 + 16**2 + 8**2 + 4**2 + 2**2 == 1364
    nine = generate_anchors(sizes, anchors_per_location=9)
    assert len(nine) == 9 * 1364
    assert len({tuple(np.round(b[2:], 6)) for b in nine.boxes[:9]}) == 9
    np.testing.assert_allclose(nine.boxes[:9, :2], 4.0)


def test_anchor_order_matches_flat_head_layout():
    anchors = generate_anchors([(2, 3)], strides=(8,))
    np.testing.assert_allclose(anchors.boxes[:, :2], [[4, 4], [12, 4], [20, 4], [4, 12], [12, 12], [20, 12]])


def test_encode_examples():
    np.testing.assert_allclose(encode_box([-12, -12, 20, 20], [4, 4, 32, 32]), 0, atol=1e-12)
    np.testing.assert_allclose(encode_box([-8, -12, 24, 20], [4, 4, 32, 32]), [0.125, 0, 0, 0], atol=1e-12)
    with pytest.raises(ValueError):
        encode_box([5, 5, 5, 9], [4, 4, 32, 32])


def test_encode_decode_round_trip_1000_pairs():
    rng = np.random.default_rng(0)
    anchors = np.column_stack([rng.uniform(0, 256, (1000, 2)), rng.uniform(8, 128, (1000, 2))])
    xy = rng.uniform(0, 200, (1000, 2))
    gts = np.column_stack([xy, xy + rng.uniform(1, 100, (1000, 2))])
    assert np.max(np.abs(decode_box(encode_box(gts, anchors), anchors) - gts)) < 1e-5


def test_decode_clips_to_image():
    box = decode_box(np.array([0.0, 0.0, 2.0, 2.0]), np.array([4.0, 4.0, 32.0, 32.0]), (64, 48))
    assert box[0] == 0 and box[1] == 0 and box[2] <= 48 and box[3] <= 64
