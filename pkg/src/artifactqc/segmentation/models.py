"""DoubleUNet, ResUNet++ and a plain UNet, with channel widths scaled by ``width_scale``.

Every network takes an (N, 3, H, W) batch and returns a tuple of sigmoid
probability maps shaped (N, 1, H, W). The last map in the tuple is the
prediction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..core import Architecture

MIN_CHANNELS = 8
VGG19_BLOCKS = ((64, 2), (128, 2), (256, 4), (512, 4), (512, 4))


def scaled(channels: int, width_scale: float) -> int:
    return max(MIN_CHANNELS, int(round(channels * width_scale)))


class ShapeError(ValueError):
    pass


def _check_divisible(h: int, w: int, divisor: int) -> None:
    if h <= 0 or w <= 0 or h % divisor or w % divisor:
        raise ShapeError(f"input {h}x{w} must have sides divisible by {divisor}")


class ConvBNReLU(nn.Sequential):
    def __init__(self, cin, cout, kernel=3, dilation=1):
        pad = dilation * (kernel // 2)
        super().__init__(
            nn.Conv2d(cin, cout, kernel, padding=pad, dilation=dilation, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )


class SqueezeExcite(nn.Module):
    def __init__(self, channels, ratio=8):
        super().__init__()
        hidden = max(1, channels // ratio)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x):
        w = x.mean(dim=(2, 3))
        w = torch.sigmoid(self.fc2(F.relu(self.fc1(w))))
        return x * w[:, :, None, None]


class ASPP(nn.Module):
    """Atrous spatial pyramid pooling: parallel dilated convolutions plus image pooling."""

    def __init__(self, cin, cout, rates=(6, 12, 18)):
        super().__init__()
        # no batch norm on the 1x1 pooled branch: it breaks with batch size 1
        self.pool = nn.Sequential(nn.Conv2d(cin, cout, 1), nn.ReLU(inplace=True))
        self.branches = nn.ModuleList([ConvBNReLU(cin, cout, kernel=1)] + [ConvBNReLU(cin, cout, dilation=r) for r in rates])
        self.project = ConvBNReLU(cout * (len(rates) + 2), cout, kernel=1)

    def forward(self, x):
        h, w = x.shape[2:]
        pooled = self.pool(x.mean(dim=(2, 3), keepdim=True)).expand(-1, -1, h, w)
        return self.project(torch.cat([pooled] + [b(x) for b in self.branches], dim=1))


class ConvBlock(nn.Module):
    """Two conv-BN-ReLU layers followed by squeeze-excitation."""

    def __init__(self, cin, cout, use_se=True):
        super().__init__()
        self.convs = nn.Sequential(ConvBNReLU(cin, cout), ConvBNReLU(cout, cout))
        self.se = SqueezeExcite(cout) if use_se else nn.Identity()

    def forward(self, x):
        return self.se(self.convs(x))


class VGG19Encoder(nn.Module):
    """VGG19 convolution stack (no batch norm) returning the pre-pool output of each block."""

    def __init__(self, width_scale=1.0):
        super().__init__()
        self.blocks = nn.ModuleList()
        cin = 3
        for cout, reps in VGG19_BLOCKS:
            cout = scaled(cout, width_scale)
            layers = []
            for _ in range(reps):
                layers += [nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(inplace=True)]
                cin = cout
            self.blocks.append(nn.Sequential(*layers))
        self.out_channels = [scaled(c, width_scale) for c, _ in VGG19_BLOCKS]
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
                nn.init.zeros_(m.bias)

    def forward(self, x):
        skips = []
        for block in self.blocks:
            x = block(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        return x, skips


class PlainEncoder(nn.Module):
    def __init__(self, channels, cin=3, use_se=True):
        super().__init__()
        self.blocks = nn.ModuleList()
        for cout in channels:
            self.blocks.append(ConvBlock(cin, cout, use_se))
            cin = cout
        self.out_channels = list(channels)

    def forward(self, x):
        skips = []
        for block in self.blocks:
            x = block(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        return x, skips


class Decoder(nn.Module):
    """Upsample, concatenate skip tensors (deepest first), conv block; repeat."""

    def __init__(self, cin, skip_channels, channels, use_se=True):
        super().__init__()
        self.blocks = nn.ModuleList()
        for skip_c, cout in zip(skip_channels, channels):
            self.blocks.append(ConvBlock(cin + skip_c, cout, use_se))
            cin = cout
        self.out_channels = channels[-1]

    def forward(self, x, skip_lists):
        for i, block in enumerate(self.blocks):
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = block(torch.cat([x] + [skips[i] for skips in skip_lists], dim=1))
        return x


class DoubleUNet(nn.Module):
    """Two stacked encoder-decoders; the second sees the input gated by the first's mask."""

    divisor = 32

    def __init__(self, width_scale=1.0):
        super().__init__()
        s = lambda c: scaled(c, width_scale)  # noqa: E731
        dec = [s(c) for c in (256, 128, 64, 32, 16)]
        self.encoder1 = VGG19Encoder(width_scale)
        self.aspp1 = ASPP(self.encoder1.out_channels[-1], s(64))
        self.decoder1 = Decoder(s(64), self.encoder1.out_channels[::-1], dec)
        self.head1 = nn.Conv2d(dec[-1], 1, 1)
        self.encoder2 = PlainEncoder([s(c) for c in (32, 64, 128, 256, 512)])
        self.aspp2 = ASPP(self.encoder2.out_channels[-1], s(64))
        skip2 = [a + b for a, b in zip(self.encoder1.out_channels[::-1], self.encoder2.out_channels[::-1])]
        self.decoder2 = Decoder(s(64), skip2, dec)
        self.head2 = nn.Conv2d(dec[-1], 1, 1)

    @staticmethod
    def gate(x, out1):
        return x * out1  # broadcasts the 1-channel mask over RGB

    def forward_intermediates(self, x, out1_override=None):
        _check_divisible(x.shape[2], x.shape[3], self.divisor)
        bottom1, skips1 = self.encoder1(x)
        d1 = self.decoder1(self.aspp1(bottom1), [skips1[::-1]])
        out1 = torch.sigmoid(self.head1(d1))
        if out1_override is not None:
            out1 = out1_override
        gated = self.gate(x, out1)
        bottom2, skips2 = self.encoder2(gated)
        d2 = self.decoder2(self.aspp2(bottom2), [skips1[::-1], skips2[::-1]])
        out2 = torch.sigmoid(self.head2(d2))
        return {"out1": out1, "gated_input": gated, "out2": out2, "concat": torch.cat([out1, out2], dim=1)}

    def forward(self, x):
        parts = self.forward_intermediates(x)
        return parts["out1"], parts["out2"]


class ResidualBlock(nn.Module):
    """Pre-activation residual unit; the shortcut is identity when shapes allow."""

    def __init__(self, cin, cout, stride=1, preact=True):
        super().__init__()
        layers = [nn.BatchNorm2d(cin), nn.ReLU(inplace=False)] if preact else []
        layers += [
            nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1),
        ]
        self.branch = nn.Sequential(*layers)
        if cin == cout and stride == 1:
            self.shortcut = nn.Identity()
        else:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride), nn.BatchNorm2d(cout))

    @property
    def last_conv(self) -> nn.Conv2d:
        return self.branch[-1]

    def forward(self, x):
        return self.branch(x) + self.shortcut(x)


class AttentionGate(nn.Module):
    """Weights the low-resolution decoder tensor by its agreement with a higher-resolution skip."""

    def __init__(self, skip_c, x_c):
        super().__init__()
        self.skip = nn.Sequential(nn.BatchNorm2d(skip_c), nn.ReLU(), nn.Conv2d(skip_c, x_c, 3, padding=1), nn.MaxPool2d(2))
        self.x = nn.Sequential(nn.BatchNorm2d(x_c), nn.ReLU(), nn.Conv2d(x_c, x_c, 3, padding=1))
        self.out = nn.Sequential(nn.BatchNorm2d(x_c), nn.ReLU(), nn.Conv2d(x_c, x_c, 3, padding=1))

    def forward(self, skip, x):
        return self.out(self.skip(skip) + self.x(x)) * x


class ResUNetPP(nn.Module):
    divisor = 16

    def __init__(self, width_scale=1.0, use_se=True, use_aspp=True, use_attention=True):
        super().__init__()
        f = [scaled(c, width_scale) for c in (16, 32, 64, 128, 256, 512)]
        self.use_attention = use_attention
        self.stem = ResidualBlock(3, f[0], preact=False)
        self.encoders = nn.ModuleList([ResidualBlock(f[i], f[i + 1], stride=2) for i in range(4)])
        self.se = nn.ModuleList([SqueezeExcite(c) if use_se else nn.Identity() for c in f[:5]])
        self.bridge = ASPP(f[4], f[5]) if use_aspp else ConvBNReLU(f[4], f[5])
        skips = f[3::-1]  # c4, c3, c2, c1 channels
        self.attention = nn.ModuleList()
        self.decoders = nn.ModuleList()
        cin = f[5]
        for skip_c in skips:
            self.attention.append(AttentionGate(skip_c, cin) if use_attention else nn.Identity())
            self.decoders.append(ResidualBlock(cin + skip_c, skip_c))
            cin = skip_c
        self.out_aspp = ASPP(f[0], f[0]) if use_aspp else ConvBNReLU(f[0], f[0])
        self.head = nn.Conv2d(f[0], 1, 1)

    def forward(self, x):
        _check_divisible(x.shape[2], x.shape[3], self.divisor)
        feats = [self.se[0](self.stem(x))]
        for i, enc in enumerate(self.encoders):
            feats.append(self.se[i + 1](enc(feats[-1])))
        d = self.bridge(feats[-1])
        for att, dec, skip in zip(self.attention, self.decoders, feats[3::-1]):
            if self.use_attention:
                d = att(skip, d)
            d = F.interpolate(d, scale_factor=2, mode="bilinear", align_corners=False)
            d = dec(torch.cat([d, skip], dim=1))
        return (torch.sigmoid(self.head(self.out_aspp(d))),)


class UNet(nn.Module):
    """Minimal four-level UNet used as the reference baseline."""

    divisor = 16

    def __init__(self, width_scale=1.0):
        super().__init__()
        ch = [scaled(c, width_scale) for c in (64, 128, 256, 512)]
        self.encoder = PlainEncoder(ch, use_se=False)
        self.bottleneck = ConvBlock(ch[-1], ch[-1] * 2, use_se=False)
        self.decoder = Decoder(ch[-1] * 2, ch[::-1], ch[::-1], use_se=False)
        self.head = nn.Conv2d(ch[0], 1, 1)

    def forward(self, x):
        _check_divisible(x.shape[2], x.shape[3], self.divisor)
        bottom, skips = self.encoder(x)
        return (torch.sigmoid(self.head(self.decoder(self.bottleneck(bottom), [skips[::-1]]))),)


_NETWORKS = {
    Architecture.DOUBLE_UNET: DoubleUNet,
    Architecture.RESUNET_PP: ResUNetPP,
    Architecture.UNET_BASELINE: UNet,
}


@dataclass
class SegModel:
    """A segmentation network plus the metadata needed to rebuild it."""

    architecture: Architecture
    network: nn.Module
    input_shape: tuple[int, int, int]
    width_scale: float
    options: dict = field(default_factory=dict)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.network.parameters())

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy() for k, v in self.network.state_dict().items()}

    def save(self, path: str | Path) -> Path:
        """Write an ``.npz`` archive: JSON metadata plus one array per named tensor."""
        path = Path(path)
        meta = {
            "architecture": self.architecture.value,
            "width_scale": self.width_scale,
            "input_shape": list(self.input_shape),
            "options": self.options,
        }
        arrays = {f"param/{k}": v for k, v in self.named_arrays().items()}
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "SegModel":
        with np.load(path, allow_pickle=False) as archive:
            meta = json.loads(str(archive["__meta__"]))
            state = {k[len("param/"):]: torch.from_numpy(archive[k].copy()) for k in archive.files if k.startswith("param/")}
        model = build_model(meta["architecture"], tuple(meta["input_shape"]), meta["width_scale"], **meta["options"])
        model.network.load_state_dict(state)
        return model


def build_model(architecture, input_shape=(256, 256, 3), width_scale=1.0, seed: int | None = None, **options) -> SegModel:
    """Fresh network wrapped as a SegModel.

    With ``seed`` set, initial weights come from a private generator state so
    they do not depend on (or disturb) the global torch RNG.
    """
    architecture = Architecture(architecture)
    net_cls = _NETWORKS[architecture]
    h, w, c = input_shape
    if c != 3:
        raise ShapeError(f"expected 3 input channels, got {c}")
    _check_divisible(h, w, net_cls.divisor)
    if not 0 < width_scale <= 1:
        raise ValueError(f"width_scale must lie in (0, 1], got {width_scale}")
    if seed is None:
        network = net_cls(width_scale=width_scale, **options)
    else:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            network = net_cls(width_scale=width_scale, **options)
    return SegModel(architecture, network, (h, w, c), width_scale, dict(options))


def build_double_unet(input_shape=(256, 256, 3), width_scale=1.0) -> SegModel:
    return build_model(Architecture.DOUBLE_UNET, input_shape, width_scale)


def build_resunet_pp(input_shape=(256, 256, 3), width_scale=1.0, use_se=True, use_aspp=True, use_attention=True) -> SegModel:
    return build_model(
        Architecture.RESUNET_PP, input_shape, width_scale, use_se=use_se, use_aspp=use_aspp, use_attention=use_attention
    )


def build_unet_baseline(input_shape=(256, 256, 3), width_scale=1.0) -> SegModel:
    return build_model(Architecture.UNET_BASELINE, input_shape, width_scale)


def load_vgg19_encoder(model: SegModel, state_dict: dict) -> None:
    """Copy pretrained VGG19 convolution weights into a full-width DoubleUNet.

    ``state_dict`` is torchvision's ``vgg19().features.state_dict()``; its convs
    are matched to ours in order.
    """
    if model.architecture is not Architecture.DOUBLE_UNET or model.width_scale != 1.0:
        raise ValueError("pretrained VGG19 weights only fit a full-width DoubleUNet")
    ours = [m for m in model.network.encoder1.modules() if isinstance(m, nn.Conv2d)]
    weights = [k for k in state_dict if k.endswith(".weight")]
    if len(weights) != len(ours):
        raise ValueError(f"expected {len(ours)} conv weights, got {len(weights)}")
    with torch.no_grad():
        for conv, key in zip(ours, weights):
            conv.weight.copy_(state_dict[key])
            conv.bias.copy_(state_dict[key[: -len("weight")] + "bias"])
