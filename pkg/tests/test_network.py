import numpy as np
import pytest

from glpnet.network import BackboneConfig, GLPNet, ModelConfig, encoder_forward, model_forward
from glpnet.tensor import ShapeError, Tensor
from glpnet.training import TrainConfig, cross_entropy_loss, sgd_step, OptimState, total_loss

TABLE1 = {
    "baseline": {},
    "+lcfm": dict(use_lcfm=True),
    "+gcfm": dict(use_gcfm=True),
    "+both": dict(use_lcfm=True, use_gcfm=True),
    "+decoder": dict(use_lcfm=True, use_gcfm=True, use_decoder=True, decoder_channels=32),
    "+mg": dict(use_lcfm=True, use_gcfm=True, use_decoder=True, decoder_channels=32,
                backbone=BackboneConfig(last_stage_dilations=(1, 2, 4))),
}


@pytest.fixture
def batch():
    rng = np.random.default_rng(0)
    return (Tensor(rng.random((2, 3, 64, 64)).astype(np.float32)),
            Tensor(rng.random((2, 1, 64, 64)).astype(np.float32)),
            rng.integers(0, 4, size=(2, 64, 64)))


def test_stage_shapes_follow_stride_law(batch):
    rgb, depth, _ = batch
    model = GLPNet(ModelConfig(), seed=0)
    enc = encoder_forward(model, rgb, depth)
    shapes = [f.rgb.shape[1:] for f in enc.stages]
    assert shapes == [(16, 16, 16), (32, 8, 8), (64, 4, 4), (64, 4, 4)]
    for feats, stride in zip(enc.stages, (4, 8, 16, 16)):
        assert feats.depth.shape[2:] == (64 // stride, 64 // stride)


def test_indivisible_input_rejected():
    model = GLPNet(ModelConfig(), seed=0)
    with pytest.raises(ShapeError):
        model(Tensor(np.zeros((1, 3, 40, 40), np.float32)), Tensor(np.zeros((1, 1, 40, 40), np.float32)))


def test_zero_depth_leaves_rgb_branch_unchanged(batch):
    rgb, _, _ = batch
    model = GLPNet(ModelConfig(), seed=0)
    model.depth.stem[0].conv.weight.data[...] = 0
    enc = model.encode(rgb, Tensor(np.zeros((2, 1, 64, 64), np.float32)))
    for s in range(3):
        assert not enc.stages[s].depth.data.any()
        np.testing.assert_array_equal(enc.fused[s].data, enc.stages[s].rgb.data)


def test_lcfm_stage4_changes_only_stage4(batch):
    rgb, depth, _ = batch
    plain = GLPNet(ModelConfig(), seed=3)
    with_l = GLPNet(ModelConfig(lcfm_stages=(4,)), seed=3)
    assert with_l.cfg.use_lcfm
    a, b = plain.encode(rgb, depth), with_l.encode(rgb, depth)
    for s in range(4):
        assert a.stages[s].rgb.data.tobytes() == b.stages[s].rgb.data.tobytes()
        assert a.stages[s].depth.data.tobytes() == b.stages[s].depth.data.tobytes()
    f4a = plain.stage4(a.stages[3], plain.lcfm, plain.gcfm).data
    f4b = with_l.stage4(b.stages[3], with_l.lcfm, with_l.gcfm).data
    assert not np.array_equal(f4a, f4b)


def test_early_lcfm_stage_changes_encoder(batch):
    rgb, depth, _ = batch
    model = GLPNet(ModelConfig(lcfm_stages=(2,)), seed=1)
    model.lcfm_s2.offset_conv.bias.data[...] = [0.5, 0.0, -0.5, 0.25]
    base = GLPNet(ModelConfig(), seed=1)
    a, b = base.encode(rgb, depth), model.encode(rgb, depth)
    assert a.fused[0].data.tobytes() == b.fused[0].data.tobytes()
    assert not np.array_equal(a.fused[1].data, b.fused[1].data)


@pytest.mark.parametrize("name", list(TABLE1))
def test_table1_configs_run(batch, name):
    rgb, depth, _ = batch
    model = GLPNet(ModelConfig(**TABLE1[name]), seed=0)
    logits, aux = model_forward(model, rgb, depth)
    assert logits.shape == (2, 4, 64, 64)
    assert len(aux) == (2 if model.cfg.use_decoder else 0)
    for a in aux:
        assert a.shape == (2, 4, 64, 64)


def test_baseline_owns_no_fusion_or_decoder_parameters():
    names = [n for n, _ in GLPNet(ModelConfig(), seed=0).named_parameters()]
    assert not any(n.startswith(("lcfm", "gcfm", "stage4", "decoder")) for n in names)
    assert "classifier.weight" in names


def test_parameter_names_follow_manifest():
    names = {n for n, _ in GLPNet(ModelConfig(use_lcfm=True, use_gcfm=True), seed=0).named_parameters()}
    for prefix in ("lcfm.offset_conv.", "gcfm.rgb_mask_conv.", "gcfm.d_mask_conv.", "gcfm.query_conv.",
                   "gcfm.key_lin.", "gcfm.value_lin.", "stage4.merge_conv."):
        assert any(n.startswith(prefix) for n in names), prefix


def test_full_has_more_parameters_than_baseline():
    base = GLPNet(ModelConfig(), seed=0).num_parameters()
    full = GLPNet(ModelConfig(**TABLE1["+decoder"]), seed=0).num_parameters()
    lcfm = GLPNet(ModelConfig(use_lcfm=True), seed=0).num_parameters()
    c4 = 64
    # offset conv (2C->4, 3x3, bias) and merge block (C->C 3x3 conv, BN gamma/beta)
    assert lcfm - base == (2 * c4 * 4 * 9 + 4) + (c4 * c4 * 9 + 2 * c4) - (c4 * 4 + 4) + (c4 * 4 + 4)
    assert full > base


def test_decoder_skip_sensitivity(batch):
    rgb, depth, _ = batch
    model = GLPNet(ModelConfig(use_decoder=True, decoder_channels=16), seed=0).eval()
    enc = model.encode(rgb, depth)
    fused4 = model.stage4(enc.stages[3], model.lcfm, model.gcfm)
    a, _ = model.decoder(fused4, enc.fused[0], enc.fused[1])
    bumped = Tensor(enc.fused[0].data + np.float32(0.5))
    b, _ = model.decoder(fused4, bumped, enc.fused[1])
    assert np.abs(a.data - b.data).max() > 1e-4


def _train_step(model, batch, cfg=TrainConfig()):
    rgb, depth, label = batch
    logits, aux = model(rgb, depth)
    loss = total_loss(cross_entropy_loss(logits, label), tuple(cross_entropy_loss(a, label) for a in aux), cfg)
    loss.backward()
    return loss


@pytest.mark.parametrize("name", ["+lcfm", "+gcfm", "+both", "+decoder"])
def test_every_owned_parameter_is_trained(batch, name):
    model = GLPNet(ModelConfig(**TABLE1[name]), seed=0)
    _train_step(model, batch)
    dead = [n for n, p in model.named_parameters() if not np.any(p.grad)]
    assert dead == []


def test_disabled_modules_stay_gradient_free_across_step(batch):
    model = GLPNet(ModelConfig(use_lcfm=True), seed=0)
    assert model.gcfm is None and model.decoder is None
    _train_step(model, batch)
    sgd_step(model.parameters(), OptimState(), 0.01, TrainConfig())
    assert all(not n.startswith(("gcfm", "decoder")) for n, _ in model.named_parameters())


def test_depth_reaches_loss(batch):
    model = GLPNet(ModelConfig(use_lcfm=True, use_gcfm=True), seed=0)
    _train_step(model, batch)
    assert np.abs(model.depth.stem[0].conv.weight.grad).max() > 0


@pytest.mark.parametrize("name", sorted(TABLE1))
def test_float32_throughout(batch, name):
    rgb, depth, _ = batch
    kw = dict(TABLE1[name])
    if kw.get("use_lcfm"):
        kw["lcfm_stages"] = (1, 2, 3, 4)
    logits, aux = GLPNet(ModelConfig(**kw), seed=0)(rgb, depth)
    assert {t.dtype for t in (logits, *aux)} == {np.dtype(np.float32)}


def test_forward_deterministic(batch):
    rgb, depth, _ = batch
    a = GLPNet(ModelConfig(use_lcfm=True, use_gcfm=True), seed=5).eval()(rgb, depth)[0].data
    b = GLPNet(ModelConfig(use_lcfm=True, use_gcfm=True), seed=5).eval()(rgb, depth)[0].data
    assert a.tobytes() == b.tobytes()


def test_multigrid_dilations():
    model = GLPNet(ModelConfig(backbone=BackboneConfig(last_stage_dilations=(1, 2, 4), blocks_per_stage=3)))
    dil = [blk.conv1.conv.dilation for blk in model.rgb.stages[3]]
    assert dil == [2, 4, 8]


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(lcfm_stages=(5,))
    with pytest.raises(ValueError):
        BackboneConfig(stage_channels=(16, 32, 64))
    assert ModelConfig(use_lcfm=True).lcfm_stages == (4,)
