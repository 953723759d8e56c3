import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdan import tensor as T
from mdan.exceptions import ConfigError, DataError, ShapeError
from mdan.hierarchy import aggregate_to_parent, leaves_to_paths, load_hierarchy, parse_hierarchy
from mdan.model import (ABLATION_ROWS, FLAGS, MdanConfig, MdanModel, apply_ablation, backbone_forward,
                        compute_cam, fpn_fuse, fuse_predictions, global_predict, init_params, joint_loss,
                        lcam_apply, lcam_fuse, local_predict, mdan_forward, mhcca, param_shapes, plan_stages)
from mdan.tensor import Tensor, upsample_matrix

EKMAN = load_hierarchy("ekman")
PARROTT = load_hierarchy("parrott")
BINARY = load_hierarchy("binary")
SMALL = MdanConfig(input_size=32, widths=(4, 8, 16, 32), pyramid_width=8)


def _softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def mhcca_reference(f, c, q, o, heads):
    """Loop-level MHCCA for one sample: F (d_F×H×W), C (C×2H×2W), 1×1 filters as matrices."""
    d_f = f.shape[0]
    uh, uw = upsample_matrix(f.shape[1]), upsample_matrix(f.shape[2])
    up = np.stack([uh @ f[i] @ uw.T for i in range(d_f)])
    qmap = np.tensordot(q, up, axes=1).reshape(d_f, -1)
    cf = c.reshape(c.shape[0], -1)
    d = cf.shape[1] // heads
    segs, attns = [], []
    for i in range(heads):
        qs, cs = qmap[:, i * d:(i + 1) * d], cf[:, i * d:(i + 1) * d]
        a = np.zeros((d_f, cf.shape[0]))
        for r in range(d_f):
            a[r] = _softmax(np.array([qs[r] @ cs[k] for k in range(cf.shape[0])]) / np.sqrt(d))
        attns.append(a)
        segs.append(a @ cs)
    out = np.concatenate(segs, axis=1).reshape(d_f, *c.shape[1:])
    return np.tensordot(o, out, axes=1), np.stack(attns)


# --------------------------------------------------------------------------
# backbone and fusion


def test_backbone_extents():
    params = init_params(MdanConfig(), EKMAN, seed=0)
    pyr = backbone_forward(np.zeros((1, 3, 64, 64)), params)
    assert {lv: c.shape[-2:] for lv, c in pyr.bottom_up.items()} == {2: (32, 32), 3: (16, 16), 4: (8, 8), 5: (4, 4)}
    assert [c.shape[1] for c in pyr.bottom_up.values()] == [8, 16, 32, 64]


def test_backbone_zero_input_and_filters():
    params = init_params(MdanConfig(), EKMAN, zero=True)
    pyr = backbone_forward(np.zeros((1, 3, 64, 64)), params)
    assert all(not c.data.any() for c in pyr.bottom_up.values())


def test_backbone_rejects_bad_side():
    with pytest.raises(ShapeError):
        backbone_forward(np.zeros((1, 3, 40, 40)), init_params(MdanConfig(), EKMAN))


def test_backbone_gradient():
    params = {k: v for k, v in init_params(SMALL, EKMAN, seed=3).items() if k.startswith("backbone.")}
    x = np.random.default_rng(0).normal(size=(1, 3, 32, 32))
    errs = T.grad_check_params(lambda: T.tensor_sum(backbone_forward(x, params).bottom_up[5]), params, h=1e-6)
    assert max(errs.values()) <= 1e-5


def test_fpn_fuse_examples():
    rng = np.random.default_rng(1)
    c, lat = rng.normal(size=(4, 8, 8)), rng.normal(size=(3, 4, 1, 1))
    only_lat = fpn_fuse(c, np.zeros((3, 4, 4)), lat).data
    np.testing.assert_allclose(only_lat, T.conv2d(Tensor(c), Tensor(lat)).data)
    f = rng.normal(size=(3, 4, 4))
    np.testing.assert_allclose(fpn_fuse(np.zeros((4, 8, 8)), f, lat).data, T.upsample_bilinear_2x(Tensor(f)).data)
    const = fpn_fuse(np.full((1, 8, 8), 2.0), np.full((1, 4, 4), 3.0), np.full((1, 1, 1, 1), 1.5)).data
    np.testing.assert_allclose(const, 6.0, atol=1e-14)


def test_fpn_fuse_shape_errors():
    with pytest.raises(ShapeError):
        fpn_fuse(np.zeros((4, 8, 8)), np.zeros((3, 4, 4)), np.zeros((3, 5, 1, 1)))
    with pytest.raises(ShapeError):
        fpn_fuse(np.zeros((4, 8, 8)), np.zeros((3, 3, 3)), np.zeros((3, 4, 1, 1)))


# --------------------------------------------------------------------------
# MHCCA


@pytest.mark.parametrize("heads", [1, 2, 4, 8])
def test_mhcca_matches_reference(heads):
    rng = np.random.default_rng(heads)
    f, c = rng.normal(size=(4, 2, 4)), rng.normal(size=(3, 4, 8))
    q, o = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    out, attn = mhcca(f, c, q[:, :, None, None], o[:, :, None, None], heads)
    ref_out, ref_attn = mhcca_reference(f, c, q, o, heads)
    np.testing.assert_allclose(out.data, ref_out, atol=1e-12)
    np.testing.assert_allclose(attn[0], ref_attn, atol=1e-12)


def test_mhcca_single_head_equals_unpartitioned_formula():
    rng = np.random.default_rng(11)
    f, c = rng.normal(size=(5, 3, 3)), rng.normal(size=(6, 6, 6))
    q, o = rng.normal(size=(5, 5)), rng.normal(size=(5, 5))
    out, _ = mhcca(f, c, q[:, :, None, None], o[:, :, None, None], heads=1)
    up = np.einsum("ab,cbd,ed->cae", upsample_matrix(3), f, upsample_matrix(3))
    qm = (q @ up.reshape(5, -1))
    cm = c.reshape(6, -1)
    direct = o @ (_softmax(qm @ cm.T / np.sqrt(36)) @ cm)
    np.testing.assert_allclose(out.data.reshape(5, -1), direct, atol=1e-12)


def test_mhcca_single_key_channel_broadcasts():
    rng = np.random.default_rng(2)
    c = rng.normal(size=(1, 4, 4))
    o = rng.normal(size=(3, 3))
    out, attn = mhcca(rng.normal(size=(3, 2, 2)), c, rng.normal(size=(3, 3, 1, 1)), o[:, :, None, None], heads=2)
    assert np.all(attn == 1.0)
    np.testing.assert_allclose(out.data, np.tensordot(o, np.repeat(c, 3, axis=0), axes=1), atol=1e-14)


def test_mhcca_identical_segments():
    # Two channels, four pixels, both head segments of C and of the aligned Q equal.
    rng = np.random.default_rng(3)
    f = rng.normal(size=(2, 1, 2))  # upsampled rows are equal, so the two row segments of Q match
    seg = rng.normal(size=(2, 4))
    c = np.concatenate([seg, seg], axis=1).reshape(2, 2, 4)
    q, o = rng.normal(size=(2, 2, 1, 1)), np.eye(2)[:, :, None, None]
    out1, a1 = mhcca(f, c, q, o, heads=1)
    out2, a2 = mhcca(f, c, q, o, heads=2)
    np.testing.assert_array_equal(a2[0, 0], a2[0, 1])
    # one head sees the same dot products twice over √(2d) instead of √d: logits scale by √2
    np.testing.assert_allclose(a1[0, 0], _softmax(np.sqrt(2) * np.log(a2[0, 0])), atol=1e-12)
    ref1, _ = mhcca_reference(f, c, q[:, :, 0, 0], o[:, :, 0, 0], 1)
    ref2, _ = mhcca_reference(f, c, q[:, :, 0, 0], o[:, :, 0, 0], 2)
    np.testing.assert_allclose(out1.data, ref1, atol=1e-12)
    np.testing.assert_allclose(out2.data, ref2, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2, 4]))
def test_mhcca_attention_rows_are_distributions(seed, heads):
    rng = np.random.default_rng(seed)
    scale = rng.uniform(0.1, 30)
    _, attn = mhcca(scale * rng.normal(size=(2, 4, 2, 2)), rng.normal(size=(2, 3, 4, 4)),
                    rng.normal(size=(4, 4, 1, 1)), rng.normal(size=(4, 4, 1, 1)), heads)
    assert attn.min() >= 0
    np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-9)


def test_mhcca_kv_projections_and_errors():
    rng = np.random.default_rng(4)
    f, c = rng.normal(size=(2, 2, 2)), rng.normal(size=(3, 4, 4))
    q, o = rng.normal(size=(2, 2, 1, 1)), rng.normal(size=(2, 2, 1, 1))
    eye = np.eye(3)[:, :, None, None]
    np.testing.assert_allclose(mhcca(f, c, q, o, 2, eye, eye)[0].data, mhcca(f, c, q, o, 2)[0].data, atol=1e-14)
    with pytest.raises(ConfigError):
        mhcca(f, c, q, o, heads=3)
    with pytest.raises(ShapeError):
        mhcca(f, rng.normal(size=(3, 6, 6)), q, o, heads=1)


def test_head_dims_at_224():
    # 224 here gives the C-side extents of a 448 input through a stride-4 stem: C3 56², C4 28²
    assert MdanConfig(input_size=224, heads={4: 1, 3: 1}).head_dims() == {3: 3136, 4: 784}
    assert MdanConfig(input_size=224, heads={4: 2}).head_dims() == {4: 392}


# --------------------------------------------------------------------------
# CAM and L-CAM


def test_cam_examples():
    f = np.stack([np.full((3, 3), 1.0), np.full((3, 3), 2.0)])
    np.testing.assert_allclose(compute_cam(f, np.array([3.0, 4.0])).data, 11.0)
    assert not compute_cam(f, np.zeros(2)).data.any()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100))
def test_cam_logit_identity_and_linearity(seed, c):
    rng = np.random.default_rng(seed)
    f, w = rng.normal(size=(5, 4, 6)), rng.normal(size=(3, 5))
    cams = compute_cam(f, w).data
    logits = w @ f.mean(axis=(1, 2))
    np.testing.assert_allclose(cams.mean(axis=(1, 2)), logits, atol=1e-10)
    np.testing.assert_allclose(compute_cam(c * f, w).data, c * cams, rtol=1e-12, atol=1e-12)


def test_lcam_fuse_examples():
    rng = np.random.default_rng(5)
    m = rng.normal(size=(4, 4))
    single = lcam_fuse([m]).data
    expected = (2 * m - (2 * m).min()) / ((2 * m).max() - (2 * m).min())
    np.testing.assert_allclose(single, expected, atol=1e-14)
    np.testing.assert_allclose(lcam_fuse([m, m.copy()]).data, single, atol=1e-14)
    assert not lcam_fuse([np.full((3, 3), 7.0)]).data.any()


def test_lcam_fuse_pooling_choices():
    a, b = np.array([[0.0, 1.0], [2.0, 3.0]]), np.array([[3.0, 0.0], [1.0, 5.0]])
    mean_only = lcam_fuse([a, b], use_mean=True, use_max=False).data
    max_only = lcam_fuse([a, b], use_mean=False, use_max=True).data
    norm = lambda x: (x - x.min()) / (x.max() - x.min())  # noqa: E731
    np.testing.assert_allclose(mean_only, norm((a + b) / 2), atol=1e-14)
    np.testing.assert_allclose(max_only, norm(np.maximum(a, b)), atol=1e-14)
    with pytest.raises(ConfigError):
        lcam_fuse([a], use_mean=False, use_max=False)


def test_lcam_fuse_respects_mask():
    rng = np.random.default_rng(6)
    cams = rng.normal(size=(2, 3, 4, 4))
    mask = np.array([[True, False, True], [False, True, False]])
    fused = lcam_fuse(Tensor(cams), mask).data
    np.testing.assert_allclose(fused[0, 0], lcam_fuse([cams[0, 0], cams[0, 2]]).data, atol=1e-14)
    np.testing.assert_allclose(fused[1, 0], lcam_fuse([cams[1, 1]]).data, atol=1e-14)
    assert fused.min() >= 0 and fused.max() <= 1


def test_lcam_apply_examples():
    x = np.random.default_rng(7).normal(size=(3, 4, 4))
    np.testing.assert_array_equal(lcam_apply(np.zeros((4, 4)), x).data, x)
    np.testing.assert_array_equal(lcam_apply(np.ones((4, 4)), x).data, 2 * x)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_lcam_apply_never_shrinks_nonnegative_input(seed):
    rng = np.random.default_rng(seed)
    m, x = rng.uniform(0, 1, size=(4, 4)), np.abs(rng.normal(size=(2, 4, 4)))
    assert np.all(np.abs(lcam_apply(m, x).data) >= np.abs(x))


def test_lcam_apply_gradients():
    rng = np.random.default_rng(8)
    m, x, r = rng.uniform(0, 1, size=(1, 4, 4)), rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 4, 4))
    assert T.grad_check(lambda m_: T.tensor_sum(T.mul(lcam_apply(m_, Tensor(x)), Tensor(r))), m) <= 1e-6
    assert T.grad_check(lambda x_: T.tensor_sum(T.mul(lcam_apply(Tensor(m), x_), Tensor(r))), x) <= 1e-6


# --------------------------------------------------------------------------
# classifiers and fusion


@pytest.mark.parametrize("predict", [local_predict, global_predict])
def test_classifier_examples(predict):
    rng = np.random.default_rng(9)
    f, w = rng.normal(size=(4, 3, 3)), rng.normal(size=(5, 4))
    np.testing.assert_allclose(predict(f, np.zeros((5, 4))).data, 0.2)
    np.testing.assert_allclose(predict(np.zeros((4, 3, 3)), w).data, 0.2)
    base = predict(f, w).data
    sharp = predict(3.0 * f, w).data
    assert base.argmax() == sharp.argmax() and sharp.max() >= base.max()


def test_fuse_predictions_examples():
    pl, pg = [np.array([1.0, 0.0])], [np.array([0.5, 0.5])]
    np.testing.assert_allclose(fuse_predictions(pl, pg, 0.7)[0], [0.85, 0.15])
    assert fuse_predictions(pl, pg, 0.0)[0].tolist() == pg[0].tolist()
    assert fuse_predictions(pl, pg, 1.0)[0].tolist() == pl[0].tolist()


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 2**32 - 1))
def test_fused_rows_are_distributions(alpha, seed):
    rng = np.random.default_rng(seed)
    pl, pg = rng.dirichlet(np.ones(6), size=4), rng.dirichlet(np.ones(6), size=4)
    np.testing.assert_allclose(fuse_predictions([pl], [pg], alpha)[0].sum(axis=1), 1.0, atol=1e-12)


# --------------------------------------------------------------------------
# full forward pass


def _batch(config, n=3, seed=0):
    return np.random.default_rng(seed).normal(size=(n, 3, config.input_size, config.input_size))


def test_forward_predictions_are_consistent():
    model = MdanModel(SMALL, PARROTT, seed=1)
    preds, _ = model.forward(_batch(SMALL))
    for head in "LGO":
        arrays = preds.arrays(head)
        assert [a.shape[1] for a in arrays] == [2, 6, 25]
        for a in arrays:
            np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-9)
    g = preds.arrays("G")
    # children-sum identity between global levels
    np.testing.assert_allclose(g[1], aggregate_to_parent(PARROTT, g[2], 3), atol=1e-12)
    np.testing.assert_allclose(g[0], aggregate_to_parent(PARROTT, g[1], 2), atol=1e-12)


def test_depth_one_uses_single_plain_stage():
    model = MdanModel(SMALL, BINARY)
    _, art = model.forward(_batch(SMALL))
    assert art.trace == ["lateral@5", "lateral@4", "upsample_add@4"]
    assert not art.attention and not art.fused


def test_depth_three_has_two_attention_stages():
    _, art = MdanModel(SMALL, PARROTT).forward(_batch(SMALL))
    assert sorted(art.attention) == [2, 3] and sorted(art.fused) == [2, 3]
    assert art.trace == ["lateral@5", "lateral@4", "upsample_add@4", "mhcca@3", "upsample_add@3", "lcam@3",
                         "mhcca@2", "upsample_add@2", "lcam@2"]


def test_base_row_is_plain_fpn():
    cfg = SMALL.with_flags(**ABLATION_ROWS["base"])
    _, art = MdanModel(cfg, EKMAN).forward(_batch(SMALL))
    assert art.trace == ["lateral@5", "lateral@4", "upsample_add@4", "lateral@3", "upsample_add@3"]


def test_no_fusion_skips_upsample_add():
    cfg = MdanConfig(input_size=32, widths=(4, 8, 16, 32), pyramid_width=8, mapping="1:4,2:3", fusion=False,
                     mhcca_on=False)
    _, art = MdanModel(cfg, EKMAN).forward(_batch(cfg))
    assert not any(t.startswith("upsample_add") for t in art.trace)
    assert art.feature_shapes == {4: (3, 8, 4, 4), 3: (3, 8, 8, 8)}


def test_reverse_mapping_uses_global_parent_for_children():
    cfg = MdanConfig(input_size=32, widths=(4, 8, 16, 32), pyramid_width=8, mapping="f")
    model = MdanModel(cfg, EKMAN, seed=2)
    preds, art = model.forward(_batch(cfg))
    parents = preds.arrays("G")[0].argmax(axis=1)
    assert (art.children[2] == (EKMAN.parent_index(2)[None, :] == parents[:, None])).all()
    assert art.trace[:2] == ["lateral@5", "mhcca@4"]


def test_children_follow_local_parent_prediction():
    model = MdanModel(SMALL, EKMAN, seed=3)
    preds, art = model.forward(_batch(SMALL, n=5))
    parents = preds.arrays("L")[0].argmax(axis=1)
    assert (art.children[2] == (EKMAN.parent_index(2)[None, :] == parents[:, None])).all()


def test_scaling_classifier_weights_preserves_argmax():
    model = MdanModel(SMALL, PARROTT, seed=4)
    x = _batch(SMALL, n=4)
    preds, _ = model.forward(x)
    scaled = {k: Tensor(v.data * (2.5 if k.startswith(("local.", "global")) else 1.0)) for k, v in model.params.items()}
    for alpha in (0.0, 1.0):
        cfg = MdanConfig(**{**SMALL.__dict__, "alpha": alpha})
        before, _ = mdan_forward(x, model.params, cfg, PARROTT)
        after, _ = mdan_forward(x, scaled, cfg, PARROTT)
        assert (before.argmax("L") == after.argmax("L")).all()
        assert (before.arrays("G")[-1].argmax(1) == after.arrays("G")[-1].argmax(1)).all()
        head = "L" if alpha == 1.0 else "G"
        assert (before.argmax("O") == before.argmax(head)).all()
    assert preds.argmax("O").shape == (4, 3)


def test_forward_rejects_wrong_input():
    with pytest.raises(ShapeError):
        MdanModel(SMALL, EKMAN).forward(np.zeros((1, 3, 64, 64)))


# --------------------------------------------------------------------------
# loss


def test_joint_loss_examples():
    from mdan.model import PredictionSet
    one_hot = PredictionSet([], [], [Tensor([[1.0, 0.0]]), Tensor([[0, 0, 1.0, 0, 0, 0]])])
    assert joint_loss(one_hot, np.array([[0, 2]])).item() == 0.0
    uniform = PredictionSet([], [], [Tensor([[0.5, 0.5]]), Tensor(np.full((1, 6), 1 / 6))])
    assert joint_loss(uniform, np.array([[1, 4]])).item() == pytest.approx(1.242453, abs=1e-6)
    with pytest.raises(ShapeError):
        joint_loss(uniform, np.array([[1, 4, 0]]))


def test_joint_loss_gradient_sampled():
    model = MdanModel(SMALL, PARROTT, seed=5)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 32, 32))
    paths = leaves_to_paths(PARROTT, rng.integers(0, 25, size=2))
    errs = T.grad_check_params(lambda: model.loss(x, paths), model.params, h=1e-5, max_coords=6)
    assert max(errs.values()) <= 1e-4


# --------------------------------------------------------------------------
# configuration


def test_config_validation_errors():
    deep = parse_hierarchy("".join(f"{lv}\tn{lv}\t{'-' if lv == 1 else f'n{lv - 1}'}\n" for lv in range(1, 6)))
    cases = [
        (MdanConfig(), deep),
        (MdanConfig(input_size=40), EKMAN),
        (MdanConfig(alpha=1.5), EKMAN),
        (MdanConfig(mapping="1:4,2:4"), EKMAN),
        (MdanConfig(mapping="1:4,2:1"), EKMAN),
        (MdanConfig(mapping="1:4"), EKMAN),
        (MdanConfig(heads={3: 3}), EKMAN),
        (MdanConfig(fusion=False, mapping="1:4,2:3"), EKMAN),
        (MdanConfig(lcam_mean_on=False, lcam_max_on=False), EKMAN),
        (MdanConfig(widths=(8, 16, 32)), EKMAN),
    ]
    for cfg, h in cases:
        with pytest.raises(ConfigError):
            cfg.validate(h.depth)


def test_config_text_round_trip():
    cfg = MdanConfig(mapping={1: 4, 2: 2}, heads={2: 8}, alpha=0.25, lcam_max_on=False)
    assert MdanConfig.from_text(cfg.to_text()) == cfg


def test_apply_ablation():
    cfg = apply_ablation(MdanConfig(), "lcam_on,kv_projections_on=1")
    assert not cfg.lcam_on and cfg.kv_projections_on
    assert apply_ablation(MdanConfig(), "base") == MdanConfig().with_flags(**ABLATION_ROWS["base"])
    with pytest.raises(ConfigError):
        apply_ablation(MdanConfig(), "nonsense")
    assert set(FLAGS) >= set().union(*ABLATION_ROWS.values())


def test_plan_follows_mapping_order():
    stages = plan_stages(MdanConfig(), 2)
    assert [(s.level, s.affective) for s in stages] == [(5, None), (4, 1), (3, 2)]


def test_manifest_order():
    names = list(param_shapes(MdanConfig(kv_projections_on=True), EKMAN))
    assert names == ["backbone.conv2", "backbone.conv3", "backbone.conv4", "backbone.conv5", "lateral.5",
                     "lateral.4", "mhcca.3.q", "mhcca.3.k", "mhcca.3.v", "mhcca.3.o", "local.1", "local.2", "global"]


# --------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_is_byte_identical():
    model = MdanModel(SMALL, EKMAN, seed=6, normalization=((0.1, 0.2, 0.3), (0.4, 0.5, 0.6)))
    raw = model.to_bytes()
    again = MdanModel.from_bytes(raw, EKMAN)
    assert again.to_bytes() == raw
    assert again.config == model.config and again.normalization == model.normalization
    assert raw[:5] == b"MDAN1"


def test_checkpoint_rejects_mismatch_and_corruption():
    raw = MdanModel(SMALL, EKMAN).to_bytes()
    with pytest.raises(DataError, match="class counts"):
        MdanModel.from_bytes(raw, load_hierarchy("mikels"))
    with pytest.raises(DataError):
        MdanModel.from_bytes(raw[:-3], EKMAN)
    with pytest.raises(DataError):
        MdanModel.from_bytes(raw + b"x", EKMAN)
    with pytest.raises(DataError):
        MdanModel.from_bytes(b"JUNK" + raw[4:], EKMAN)


def test_model_rejects_foreign_params():
    params = init_params(SMALL, EKMAN)
    params.pop("global")
    with pytest.raises(DataError):
        MdanModel(SMALL, EKMAN, params)
