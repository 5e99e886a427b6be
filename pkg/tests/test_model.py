import pytest
import torch

from sdsnet import ModelConfig, SDSNet, build_model
from sdsnet.errors import ConfigError, NonFiniteError, ShapeError
from sdsnet.model import DCBL, FeatureMapping, ScaleAlign


@pytest.fixture(scope="module")
def small():
    torch.manual_seed(0)
    return SDSNet(ModelConfig(input_size=(64, 64))).eval()


def test_default_forward_shapes():
    torch.manual_seed(0)
    net = SDSNet(ModelConfig()).eval()
    with torch.no_grad():
        preds = net(torch.rand(1, 1, 256, 256), return_features=True)
    sizes = [tuple(m.shape[-2:]) for m in preds.maps]
    assert sizes == [(256, 256), (128, 128), (64, 64), (64, 64), (256, 256)]
    for m in preds.maps:
        assert m.shape[1] == 1
        assert torch.all((m > 0) & (m < 1))
    feats = preds.features
    assert [tuple(feats[f"X{i}"].shape[1:]) for i in range(1, 5)] == [
        (32, 256, 256), (64, 128, 128), (128, 64, 64), (128, 64, 64)]
    assert all(tuple(feats[f"E{i}"].shape[1:]) == (c, 16, 16)
               for i, c in zip(range(1, 5), (32, 64, 128, 128)))


def test_scale_align_shapes_and_divisibility():
    assert ScaleAlign(32, 16)(torch.randn(1, 32, 256, 256)).shape == (1, 32, 16, 16)
    assert ScaleAlign(128, 4)(torch.randn(1, 128, 64, 64)).shape == (1, 128, 16, 16)
    with pytest.raises(ShapeError):
        ScaleAlign(8, 4)(torch.randn(1, 8, 10, 12))


def test_feature_mapping_shape_and_constant_upsample():
    fm = FeatureMapping(32).eval()
    assert fm(torch.randn(1, 32, 16, 16), (256, 256)).shape == (1, 32, 256, 256)
    const = torch.full((1, 4, 4, 4), 2.5)
    up = torch.nn.functional.interpolate(const, size=(16, 16), mode="bilinear", align_corners=False)
    assert torch.all(up == 2.5)


def test_dcbl_nonnegative_and_shape():
    out = DCBL(160, 128)(torch.randn(1, 160, 16, 16))
    assert out.shape == (1, 128, 16, 16)
    assert out.min() >= 0


def test_input_size_checked(small):
    with pytest.raises(ShapeError):
        small(torch.rand(1, 1, 32, 32))


def test_non_divisible_config_rejected():
    with pytest.raises(ConfigError, match="input_size"):
        ModelConfig(input_size=(100, 100))


def test_residual_identity_with_zeroed_mapping(small):
    net = SDSNet(small.config).eval()
    net.load_state_dict(small.state_dict())
    with torch.no_grad():
        for fm in net.mapping:
            bn = fm.block[1]
            bn.weight.zero_()
            bn.bias.zero_()
        x = torch.rand(1, 1, 64, 64)
        xs = net.encode(x)
        ds = net.reconstruct(xs, net.branches(net.aligned(xs)))
    for a, b in zip(xs, ds):
        assert torch.equal(a, b)


def test_disabled_branches_pass_backbone_through():
    net = SDSNet(ModelConfig(input_size=(64, 64), shallow_branch=False, deep_branch=False)).eval()
    with torch.no_grad():
        xs = net.encode(torch.rand(1, 1, 64, 64))
        ds = net.reconstruct(xs, net.branches(net.aligned(xs)))
    assert all(a is b for a, b in zip(xs, ds))


def test_branch_ablations_reduce_parameters():
    full = build_model().num_parameters()
    assert build_model(deep_branch=False).num_parameters() < full
    assert build_model(shallow_branch=False).num_parameters() < full


def test_parameter_count_independent_of_input_size():
    assert build_model(input_size=(64, 64)).num_parameters() == build_model().num_parameters()


def test_bias_free_zero_input_gives_constant_channels():
    net = SDSNet(ModelConfig(input_size=(64, 64))).eval()
    with torch.no_grad():
        xs = net.backbone(torch.zeros(1, 1, 64, 64))
    for x in xs:
        flat = x.flatten(2)
        assert torch.allclose(flat, flat[..., :1].expand_as(flat))


def test_seeded_builds_are_identical():
    outs = []
    for _ in range(2):
        torch.manual_seed(7)
        net = SDSNet(ModelConfig(input_size=(32, 32))).eval()
        with torch.no_grad():
            outs.append(net(torch.ones(1, 1, 32, 32)).fused)
    assert torch.equal(outs[0], outs[1])


def test_nan_reports_producing_block(small):
    net = SDSNet(small.config).eval()
    net.load_state_dict(small.state_dict())
    with torch.no_grad():
        net.decoder[0][0][0].weight[0, 0, 0, 0] = float("nan")
        with pytest.raises(NonFiniteError, match="decoder 1"):
            net(torch.rand(1, 1, 64, 64))


def test_no_deep_supervision_single_map():
    net = SDSNet(ModelConfig(input_size=(32, 32), deep_supervision=False)).eval()
    with torch.no_grad():
        preds = net(torch.rand(2, 1, 32, 32))
    assert preds.side == [] and len(preds.maps) == 1
    assert preds.fused.shape == (2, 1, 32, 32)


@pytest.mark.parametrize("kw", [
    dict(shallow_layers=1, deep_layers=1), dict(shallow_layers=2, deep_layers=1),
    dict(shallow_layers=3, deep_layers=2), dict(use_pam=False), dict(learnable_fusion=False),
    dict(use_msm=False), dict(heads=2), dict(fusion="concat"), dict(residual_blocks=False),
])
def test_ablation_variants_run(kw):
    net = SDSNet(ModelConfig(input_size=(32, 32), **kw)).eval()
    with torch.no_grad():
        preds = net(torch.rand(1, 1, 32, 32))
    assert preds.fused.shape == (1, 1, 32, 32)
    assert len(preds.maps) == net.config.num_stages + 1


def test_predict_restores_training_mode(small):
    small.train()
    out = small.predict(torch.rand(1, 1, 64, 64))
    assert small.training and not out.requires_grad
    small.eval()
