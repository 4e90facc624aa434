import numpy as np
import pytest
import torch

from monouq.geometry import ImageFrame, Intrinsics, sigmoid_to_depth, warp_tensor
from monouq.models import (DepthNet, DepthNetConfig, ModelCheckpoint, PoseNet, PoseNetConfig, depth_forward,
                           pose_forward)
from monouq.photometric import photometric_error

SMALL = (8, 8, 16, 16)


def _frame(seed=0, size=32):
    rng = np.random.default_rng(seed)
    return ImageFrame(rng.random((size, size, 3)), Intrinsics(30.0, 30.0, size / 2 - 0.5, size / 2 - 0.5, size, size))


def _ckpt(**kw):
    torch.manual_seed(0)
    return ModelCheckpoint.from_module(DepthNet(DepthNetConfig(SMALL, **kw)))


def test_depth_forward_is_deterministic_without_dropout():
    ck = _ckpt()
    a, _ = depth_forward(_frame(), ck)
    b, _ = depth_forward(_frame(), ck)
    for x, y in zip(a, b):
        assert torch.equal(x, y)


def test_dropout_zero_ignores_seed():
    ck = _ckpt(dropout_p=0.0)
    a, _ = depth_forward(_frame(), ck, sample_dropout=True, seed=1)
    b, _ = depth_forward(_frame(), ck, sample_dropout=True, seed=2)
    assert torch.equal(a[0], b[0])


def test_dropout_samples_differ_by_seed():
    ck = _ckpt(dropout_p=0.2)
    a, _ = depth_forward(_frame(), ck, sample_dropout=True, seed=1)
    b, _ = depth_forward(_frame(), ck, sample_dropout=True, seed=2)
    c, _ = depth_forward(_frame(), ck, sample_dropout=True, seed=1)
    assert not torch.equal(a[0], b[0])
    assert torch.equal(a[0], c[0])


@pytest.mark.parametrize("head", [False, True])
def test_output_shapes_single_scale(head):
    torch.manual_seed(0)
    ck = ModelCheckpoint.from_module(DepthNet(DepthNetConfig(SMALL, scales=1, predict_uncertainty=head)))
    disps, u = depth_forward(_frame(size=64), ck)
    assert len(disps) == 1 and disps[0].shape == (1, 1, 64, 64)
    assert ((disps[0] > 0) & (disps[0] < 1)).all()
    assert (u is not None) == head
    if head:
        assert u.shape == (1, 1, 64, 64)


def test_multiscale_shapes():
    net = DepthNet(DepthNetConfig(SMALL))
    out = net(torch.rand(2, 3, 32, 48))
    assert [tuple(d.shape) for d in out["disp"]] == [(2, 1, 32, 48), (2, 1, 16, 24), (2, 1, 8, 12), (2, 1, 4, 6)]


def test_indivisible_or_tiny_input_rejected():
    with pytest.raises(ValueError):
        DepthNet(DepthNetConfig(SMALL))(torch.rand(1, 3, 30, 32))
    with pytest.raises(ValueError):
        DepthNet(DepthNetConfig(SMALL))(torch.rand(1, 3, 16, 16))


def test_config_validation():
    with pytest.raises(ValueError):
        DepthNetConfig(dropout_p=1.0)
    with pytest.raises(ValueError):
        DepthNetConfig(SMALL, scales=5)


def test_pose_zero_init_is_identity():
    ck = ModelCheckpoint.from_module(PoseNet(PoseNetConfig(SMALL)))
    out = pose_forward(_frame(1), _frame(2), ck)
    assert out.shape == (6,)
    assert np.all(out == 0)
    R = PoseNet(PoseNetConfig(SMALL)).matrix(_frame(1).to_tensor(), _frame(2).to_tensor())
    torch.testing.assert_close(R[0], torch.eye(4))


def test_pose_forward_rejects_depth_checkpoint():
    with pytest.raises(ValueError):
        pose_forward(_frame(1), _frame(2), _ckpt())


def test_serialisation_round_trip_is_bit_identical(tmp_path):
    ck = _ckpt(predict_uncertainty=True)
    path = ck.save(tmp_path / "net")
    loaded = ModelCheckpoint.load(path)
    a, ua = depth_forward(_frame(), ck)
    b, ub = depth_forward(_frame(), loaded)
    assert all(torch.equal(x, y) for x, y in zip(a, b))
    assert torch.equal(ua, ub)
    assert loaded.to_bytes() == ck.to_bytes()
    ck.save(tmp_path / "again")
    assert (tmp_path / "net.bin").read_bytes() == (tmp_path / "again.bin").read_bytes()


def test_checkpoint_corruption_detected(tmp_path):
    path = _ckpt().save(tmp_path / "net")
    blob = (tmp_path / "net.bin").read_bytes()
    (tmp_path / "net.bin").write_bytes(blob[:-4] + b"\x00\x00\x80\x7f")
    with pytest.raises(ValueError, match="corrupt"):
        ModelCheckpoint.load(path)


def test_checkpoint_config_mismatch_rejected():
    ck = _ckpt()
    wrong = ModelCheckpoint(ck.weights, DepthNetConfig((8, 8, 16, 32)))
    with pytest.raises(ValueError, match="do not match"):
        wrong.build()


def test_every_parameter_receives_gradient():
    torch.manual_seed(0)
    net = DepthNet(DepthNetConfig(SMALL, predict_uncertainty=True))
    target, source = torch.rand(2, 3, 32, 32), torch.rand(2, 3, 32, 32)
    K = torch.tensor([[30.0, 0, 15.5], [0, 30.0, 15.5], [0, 0, 1]]).expand(2, 3, 3)
    T = torch.eye(4).repeat(2, 1, 1)
    T[:, 0, 3] = -0.2
    out = net(target)
    loss = out["uncertainty"].mean()
    for disp in out["disp"]:
        d = torch.nn.functional.interpolate(disp, size=(32, 32), mode="bilinear", align_corners=False)
        warped, _ = warp_tensor(source, sigmoid_to_depth(d), T, K, K)
        loss = loss + photometric_error(warped, target).mean()
    loss.backward()
    for name, p in net.named_parameters():
        assert p.grad is not None and p.grad.abs().sum() > 0, name


def test_uncertainty_head_is_isolated_from_depth():
    torch.manual_seed(0)
    net = DepthNet(DepthNetConfig(SMALL, predict_uncertainty=True))
    x = torch.rand(1, 3, 32, 32)
    before = [d.clone() for d in net(x)["disp"]]
    with torch.no_grad():
        net.uncertainty_head.weight.zero_()
        net.uncertainty_head.bias.zero_()
    after = net(x)
    assert all(torch.equal(a, b) for a, b in zip(before, after["disp"]))
    assert (after["uncertainty"] == 0).all()


def test_forward_counter():
    net = DepthNet(DepthNetConfig(SMALL))
    for _ in range(3):
        net(torch.rand(1, 3, 32, 32))
    assert net.forward_calls == 3
