import numpy as np
import pytest
import torch

from artifactqc.core import Architecture, Loss, Optimizer
from artifactqc.segmentation import models
from artifactqc.segmentation.models import (
    DoubleUNet,
    ResidualBlock,
    SegModel,
    ShapeError,
    build_double_unet,
    build_model,
    build_resunet_pp,
)
from artifactqc.segmentation.training import make_optimizer, predict_proba_maps, segmentation_loss

TINY = 0.125


def tensor_batch(n, side, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return torch.rand((n, 3, side, side), generator=g, dtype=dtype)


@pytest.mark.parametrize(
    "arch, side, n_outputs",
    [(Architecture.DOUBLE_UNET, 64, 2), (Architecture.RESUNET_PP, 32, 1), (Architecture.UNET_BASELINE, 32, 1)],
)
def test_output_shapes_and_range(arch, side, n_outputs):
    torch.manual_seed(0)
    model = build_model(arch, (side, side, 3), TINY)
    model.network.eval()
    with torch.no_grad():
        outs = model.network(tensor_batch(2, side))
    assert len(outs) == n_outputs
    for out in outs:
        assert out.shape == (2, 1, side, side)
        assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0


@pytest.mark.parametrize("h, w", [(32, 64), (96, 32)])
def test_double_unet_accepts_rectangles(h, w):
    net = DoubleUNet(TINY).eval()
    with torch.no_grad():
        out1, out2 = net(torch.rand(1, 3, h, w))
    assert out1.shape == out2.shape == (1, 1, h, w)


def test_double_unet_exposes_concatenation():
    net = DoubleUNet(TINY).eval()
    with torch.no_grad():
        parts = net.forward_intermediates(torch.rand(1, 3, 32, 32))
    assert parts["concat"].shape == (1, 2, 32, 32)
    torch.testing.assert_close(parts["concat"][:, 1:], parts["out2"])


@pytest.mark.slow
def test_full_size_shapes_at_256():
    torch.manual_seed(0)
    net = DoubleUNet(1.0).eval()
    with torch.no_grad():
        out1, out2 = net(torch.rand(1, 3, 256, 256))
    assert out1.shape == out2.shape == (1, 1, 256, 256)


def test_indivisible_inputs_rejected():
    with pytest.raises(ShapeError):
        build_double_unet((48, 48, 3), TINY)
    with pytest.raises(ShapeError):
        build_resunet_pp((40, 40, 3), TINY)
    with pytest.raises(ShapeError):
        DoubleUNet(TINY)(torch.rand(1, 3, 48, 48))


def test_width_scale_range():
    with pytest.raises(ValueError):
        build_model("resunet_pp", (32, 32, 3), 0.0)


def test_gating_identity():
    """With out1 forced to ones, the second network sees the unmodified input."""
    net = DoubleUNet(TINY).eval()
    x = tensor_batch(2, 32, seed=4)
    with torch.no_grad():
        parts = net.forward_intermediates(x, out1_override=torch.ones(2, 1, 32, 32))
    assert torch.equal(parts["gated_input"], x)
    half = DoubleUNet.gate(x, torch.full((2, 1, 32, 32), 0.5))
    torch.testing.assert_close(half, x * 0.5)


def test_residual_identity():
    """Zeroing the residual branch's last conv leaves an identity block."""
    block = ResidualBlock(8, 8).eval()
    with torch.no_grad():
        block.last_conv.weight.zero_()
        block.last_conv.bias.zero_()
    x = torch.randn(2, 8, 16, 16)
    with torch.no_grad():
        assert torch.equal(block(x), x)


def test_projection_shortcut_when_shape_changes():
    block = ResidualBlock(8, 16, stride=2)
    assert not isinstance(block.shortcut, torch.nn.Identity)
    assert block(torch.randn(1, 8, 16, 16)).shape == (1, 16, 8, 8)


def test_resunet_ablation_flags():
    torch.manual_seed(0)
    full = build_resunet_pp((32, 32, 3), TINY)
    bare = build_resunet_pp((32, 32, 3), TINY, use_se=False, use_aspp=False, use_attention=False)
    assert bare.parameter_count() < full.parameter_count()
    bare.network.eval()
    with torch.no_grad():
        (out,) = bare.network(tensor_batch(1, 32))
    assert out.shape == (1, 1, 32, 32)


def test_tiny_width_is_under_a_tenth_of_full():
    full = DoubleUNet(1.0)
    tiny = DoubleUNet(TINY)
    n_full = sum(p.numel() for p in full.parameters())
    n_tiny = sum(p.numel() for p in tiny.parameters())
    assert n_tiny * 10 < n_full


def finite_difference_check(network, x, truth, n_params=8, eps=1e-8, seed=0):
    """Largest relative gap between autograd and central differences over sampled weights.

    ReLU and max-pool kinks sit within 1e-6 of many activations once a whole
    channel's bias moves, so the step is kept at 1e-8 (float64 throughout).
    """
    network.double().train()
    x, truth = x.double(), truth.double()

    def loss_value():
        return segmentation_loss(network(x), truth, Loss.DICE_COEF_LOSS)

    network.zero_grad()
    loss_value().backward()
    candidates = [
        (p, idx)
        for p in network.parameters()
        for idx in torch.nonzero(p.grad.abs() > 1e-4, as_tuple=False)[:50].tolist()
    ]
    assert len(candidates) >= n_params
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(candidates), size=n_params, replace=False)
    worst = 0.0
    for i in picks:
        p, idx = candidates[int(i)]
        idx = tuple(idx)
        analytic = float(p.grad[idx])
        with torch.no_grad():
            original = float(p[idx])
            p[idx] = original + eps
            up = float(loss_value())
            p[idx] = original - eps
            down = float(loss_value())
            p[idx] = original
        numeric = (up - down) / (2 * eps)
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric)))
    return worst


@pytest.mark.parametrize("seed", [1, 2])
@pytest.mark.parametrize("arch, side", [(Architecture.DOUBLE_UNET, 32), (Architecture.RESUNET_PP, 16)])
def test_gradient_check(arch, side, seed):
    torch.manual_seed(seed)
    model = build_model(arch, (side, side, 3), TINY)
    x = tensor_batch(2, side, seed=2)
    truth = (tensor_batch(2, side, seed=3)[:, :1] > 0.5).float()
    assert finite_difference_check(model.network, x, truth, seed=seed) <= 1e-3


@pytest.mark.parametrize("optimizer", list(Optimizer))
def test_vanishing_lr_leaves_weights(optimizer):
    torch.manual_seed(0)
    model = build_resunet_pp((16, 16, 3), TINY)
    net = model.network.train()
    before = [p.detach().clone() for p in net.parameters()]
    opt = make_optimizer(optimizer, net.parameters(), lr=1e-12)
    loss = segmentation_loss(net(tensor_batch(2, 16)), (tensor_batch(2, 16)[:, :1] > 0.5).float(), Loss.DICE_COEF_LOSS)
    loss.backward()
    opt.step()
    worst = max(float((p.detach() - b).abs().max()) for p, b in zip(net.parameters(), before))
    assert worst <= 1e-9


@pytest.mark.parametrize("arch, side", [(Architecture.DOUBLE_UNET, 32), (Architecture.RESUNET_PP, 32)])
def test_checkpoint_round_trip(tmp_path, arch, side):
    torch.manual_seed(0)
    model = build_model(arch, (side, side, 3), TINY)
    images = np.random.default_rng(0).random((2, side, side, 3))
    before = predict_proba_maps(model, images)
    path = model.save(tmp_path / "m.npz")
    loaded = SegModel.load(path)
    assert loaded.architecture is arch and loaded.input_shape == (side, side, 3) and loaded.width_scale == TINY
    np.testing.assert_array_equal(predict_proba_maps(loaded, images), before)


def test_prediction_is_deterministic():
    torch.manual_seed(0)
    model = build_resunet_pp((32, 32, 3), TINY)
    images = np.random.default_rng(1).random((3, 32, 32, 3))
    np.testing.assert_array_equal(predict_proba_maps(model, images), predict_proba_maps(model, images))


def test_scaled_floor():
    assert models.scaled(64, TINY) == 8
    assert models.scaled(16, TINY) == models.MIN_CHANNELS
    assert models.scaled(512, 1.0) == 512


def test_seeded_build_ignores_global_rng():
    torch.manual_seed(1)
    a = build_model("resunet_pp", (32, 32, 3), TINY, seed=5)
    after = torch.rand(1)
    torch.manual_seed(2)
    b = build_model("resunet_pp", (32, 32, 3), TINY, seed=5)
    for (name, p), q in zip(a.network.state_dict().items(), b.network.state_dict().values()):
        assert torch.equal(p, q), name
    torch.manual_seed(1)
    assert torch.equal(torch.rand(1), after)
