"""Network builders: conditional generator, constrained patch discriminator,
dual-stream evaluator and the target-classifier zoo.

Tensors are NCHW with pixel values in [0, 1]. Class labels inside the
networks are 0-based indices into a sorted class list.
"""

from __future__ import annotations

import contextlib
import hashlib
import logging
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import LabelError
from .preprocessors import FD_TAPS, HP_KERNEL, WW_SIGMA0, PreprocessorKind, ww_residual

log = logging.getLogger(__name__)

ARCHS = ("resnet18", "resnet50", "densenet100", "vgg16", "small")
LOGIT_CLAMP = 1e-3


@contextlib.contextmanager
def seeded(seed: Optional[int]):
    if seed is None:
        yield
        return
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


# --------------------------------------------------------------------------- fixed filters


_BILINEAR = torch.tensor([[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]])


def _cfa_masks(h, w, dtype, device):
    m = torch.zeros(3, h, w, dtype=dtype, device=device)
    m[0, 0::2, 0::2] = 1
    m[1, 0::2, 1::2] = 1
    m[1, 1::2, 0::2] = 1
    m[2, 1::2, 1::2] = 1
    return m


def remosaic_torch(x: torch.Tensor) -> torch.Tensor:
    """RGGB mosaic followed by bilinear demosaic (replicate padding), batched."""
    n, _, h, w = x.shape
    masks = _cfa_masks(h, w, x.dtype, x.device)
    plane = (x * masks).sum(dim=1, keepdim=True)
    k = _BILINEAR.to(dtype=x.dtype, device=x.device).view(1, 1, 3, 3)
    known = masks.unsqueeze(0).expand(n, 3, h, w)
    num = F.conv2d(F.pad(plane * known, (1, 1, 1, 1), mode="replicate"), k.expand(3, 1, 3, 3), groups=3)
    den = F.conv2d(F.pad(known, (1, 1, 1, 1), mode="replicate"), k.expand(3, 1, 3, 3), groups=3)
    out = torch.where(known > 0, plane.expand(n, 3, h, w), num / den)
    return out.clamp(0.0, 1.0)


def _depthwise(x, kernel):
    c = x.shape[1]
    kh, kw = kernel.shape
    k = torch.as_tensor(kernel, dtype=x.dtype, device=x.device).view(1, 1, kh, kw).expand(c, 1, kh, kw)
    return F.conv2d(F.pad(x, (kw // 2, kw // 2, kh // 2, kh // 2), mode="replicate"), k, groups=c)


def hp_torch(x):
    return _depthwise(x, HP_KERNEL)


def fd_torch(x):
    return 0.5 * (_depthwise(x, FD_TAPS[None, :]) + _depthwise(x, FD_TAPS[:, None]))


def ww_torch(x, sigma0=WW_SIGMA0):
    """Wavelet-Wiener residual per image; no gradient flows through it."""
    arr = x.detach().cpu().double().numpy().transpose(0, 2, 3, 1)
    res = np.stack([ww_residual(a, sigma0) for a in arr]).transpose(0, 3, 1, 2)
    return torch.as_tensor(res, dtype=x.dtype, device=x.device)


def one_hot_planes(target: torch.Tensor, n_classes: int, h: int, w: int, dtype=torch.float32):
    if target.numel() and (int(target.min()) < 0 or int(target.max()) >= n_classes):
        raise LabelError(f"class index outside 0..{n_classes - 1}")
    oh = F.one_hot(target.long(), n_classes).to(dtype)
    return oh[:, :, None, None].expand(-1, -1, h, w)


# --------------------------------------------------------------------------- generator


class ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(ch, ch, 3, padding=1),
            nn.InstanceNorm2d(ch),
            nn.ReLU(True),
            nn.Conv2d(ch, ch, 3, padding=1),
            nn.InstanceNorm2d(ch),
        )

    def forward(self, x):
        return x + self.body(x)


class ResnetTransformer(nn.Module):
    """7x7 conv -> two stride-2 downsamplings -> residual blocks -> two
    stride-2 upsamplings -> 7x7 conv. Instance norm throughout.

    ``late_ch`` extra planes can be concatenated in front of the output conv,
    after the last normalization.
    """

    def __init__(self, in_ch: int, out_ch: int, width: int = 64, n_blocks: int = 2, late_ch: int = 0):
        super().__init__()
        w = width
        layers = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(in_ch, w, 7),
            nn.InstanceNorm2d(w),
            nn.ReLU(True),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1),
            nn.InstanceNorm2d(2 * w),
            nn.ReLU(True),
            nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1),
            nn.InstanceNorm2d(4 * w),
            nn.ReLU(True),
        ]
        layers += [ResBlock(4 * w) for _ in range(n_blocks)]
        layers += [
            nn.ConvTranspose2d(4 * w, 2 * w, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(2 * w),
            nn.ReLU(True),
            nn.ConvTranspose2d(2 * w, w, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(w),
            nn.ReLU(True),
        ]
        self.net = nn.Sequential(*layers)
        self.head = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(w + late_ch, out_ch, 7))
        last = self.head[-1]
        with torch.no_grad():
            last.weight.mul_(0.1)
            last.bias.zero_()

    def forward(self, x, late: Optional[torch.Tensor] = None):
        h = self.net(x)
        if late is not None:
            h = torch.cat([h, late], dim=1)
        return self.head(h)


def transformer_param_count(in_ch: int, out_ch: int, width: int, n_blocks: int = 2, late_ch: int = 0) -> int:
    w = width
    conv = lambda i, o, k: i * o * k * k + o  # noqa: E731
    return (
        conv(in_ch, w, 7)
        + conv(w, 2 * w, 3)
        + conv(2 * w, 4 * w, 3)
        + n_blocks * 2 * conv(4 * w, 4 * w, 3)
        + conv(4 * w, 2 * w, 3)
        + conv(2 * w, w, 3)
        + conv(w + late_ch, out_ch, 7)
    )


class Generator(nn.Module):
    """Conditional anonymizer ``G(x, y')``.

    The input is remosaiced, concatenated with one-hot condition planes and
    mapped to an output in (0, 1). The network predicts a correction in logit
    space on top of the remosaiced image, so a zero output reproduces it.

    Instance norm wipes out constant planes and per-channel colour casts
    alike, so the output conv (after the last norm) is fed the condition
    planes again together with the remosaiced image and its channel means.
    Undoing a source cast needs those means; no local feature carries them.
    """

    def __init__(self, n_classes: int, width: int = 64, n_blocks: int = 2):
        super().__init__()
        if n_classes < 1:
            raise ValueError("need at least one class")
        self.n_classes = n_classes
        self.width = width
        self.body = ResnetTransformer(3 + n_classes, 3, width, n_blocks, late_ch=6 + n_classes)

    def forward(self, x: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        n, _, h, w = x.shape
        if h % 2 or w % 2:
            raise ValueError("generator input needs even spatial size")
        base = remosaic_torch(x)
        cond = one_hot_planes(target, self.n_classes, h, w, x.dtype)
        # in logit space a gain change is (nearly) an additive offset, so
        # differences of these planes estimate the source cast linearly
        means = torch.logit(base.mean(dim=(2, 3), keepdim=True).clamp(LOGIT_CLAMP, 1 - LOGIT_CLAMP))
        late = torch.cat([base, means.expand_as(base), cond], dim=1)
        delta = self.body(torch.cat([base, cond], dim=1), late=late)
        return torch.sigmoid(torch.logit(base.clamp(LOGIT_CLAMP, 1 - LOGIT_CLAMP)) + delta)


def build_generator(n_classes: int, width: int = 64, seed: Optional[int] = None) -> Generator:
    with seeded(seed):
        return Generator(n_classes, width)


# --------------------------------------------------------------------------- constrained conv


class ConstrainedConv2d(nn.Conv2d):
    """Prediction-error filters: every 5x5 slice has centre -1 and the other
    24 taps summing to 1 after :meth:`project`.

    The filters are stored in float64 so the sum constraint holds to ~1e-15;
    activations are cast on the way in and back on the way out.
    """

    def __init__(self, in_ch: int = 3, out_ch: int = 3, kernel_size: int = 5):
        super().__init__(in_ch, out_ch, kernel_size, stride=1, padding=kernel_size // 2, bias=False)
        self.weight = nn.Parameter(self.weight.detach().double())
        self.project()

    def forward(self, x):
        return F.conv2d(x.to(self.weight.dtype), self.weight, None, 1, self.padding).to(x.dtype)

    @torch.no_grad()
    def project(self) -> int:
        """Enforce the constraint in place; returns the number of reinitialized slices."""
        w = self.weight
        k = w.shape[-1]
        c = k // 2
        flat = w.view(-1, k * k)
        centre = c * k + c
        flat[:, centre] = 0.0
        sums = flat.sum(dim=1, keepdim=True)
        bad = sums.abs() <= 1e-8
        n_bad = int(bad.sum())
        if n_bad:
            log.warning("reinitializing %d degenerate constrained slices", n_bad)
        flat.copy_(torch.where(bad, torch.full_like(flat, 1.0 / (k * k - 1)), flat / torch.where(bad, 1.0, sums)))
        flat[:, centre] = -1.0
        return n_bad

    def constraint_error(self) -> tuple[float, float]:
        """(max |centre + 1|, max |sum(others) - 1|) over all slices."""
        w = self.weight.detach().double()
        k = w.shape[-1]
        flat = w.reshape(-1, k * k)
        centre = (k // 2) * k + k // 2
        others = flat.sum(dim=1) - flat[:, centre]
        return float((flat[:, centre] + 1).abs().max()), float((others - 1).abs().max())


def project_constrained(model: nn.Module) -> int:
    """Project every constrained layer inside ``model``."""
    return sum(m.project() for m in model.modules() if isinstance(m, ConstrainedConv2d))


def constraint_errors(model: nn.Module) -> tuple[float, float]:
    errs = [m.constraint_error() for m in model.modules() if isinstance(m, ConstrainedConv2d)]
    if not errs:
        return 0.0, 0.0
    return max(e[0] for e in errs), max(e[1] for e in errs)


# --------------------------------------------------------------------------- discriminator


class Discriminator(nn.Module):
    """Label-conditioned patch discriminator with a constrained first layer.

    Each output score sees a 34x34 window of the prediction-error map.
    """

    def __init__(self, n_classes: int, width: int = 64):
        super().__init__()
        self.n_classes = n_classes
        w = width
        self.constrained = ConstrainedConv2d(3, 3, 5)
        self.conv1 = nn.Conv2d(3, w, 4, stride=2, padding=1)
        self.body = nn.Sequential(
            nn.Conv2d(w + n_classes, 2 * w, 4, stride=2, padding=1),
            nn.InstanceNorm2d(2 * w),
            nn.LeakyReLU(0.2, True),
            nn.Conv2d(2 * w, 4 * w, 4, stride=1, padding=1),
            nn.InstanceNorm2d(4 * w),
            nn.LeakyReLU(0.2, True),
            nn.Conv2d(4 * w, 1, 4, stride=1, padding=1),
        )

    def features(self, x):
        return self.constrained(x)

    def forward(self, x: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
        return self.forward_from_residual(self.constrained(x), label)

    def forward_from_residual(self, r: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
        h = F.leaky_relu(self.conv1(r), 0.2)
        # one-hot planes are constant, so max-pooling them to this resolution is a broadcast
        cond = one_hot_planes(label, self.n_classes, h.shape[2], h.shape[3], h.dtype)
        return self.body(torch.cat([h, cond], dim=1))


def build_discriminator(n_classes: int, width: int = 64, seed: Optional[int] = None) -> Discriminator:
    with seeded(seed):
        return Discriminator(n_classes, width)


def discriminator_output_size(n: int) -> int:
    for k, s in ((4, 2), (4, 2), (4, 1), (4, 1)):
        n = (n + 2 - k) // s + 1
    return n


# --------------------------------------------------------------------------- classifiers


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.short = nn.Sequential()
        if stride != 1 or cin != cout:
            self.short = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.bn2(self.conv2(out)) + self.short(x))


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, cin, planes, stride=1):
        super().__init__()
        cout = planes * 4
        self.body = nn.Sequential(
            nn.Conv2d(cin, planes, 1, bias=False),
            nn.BatchNorm2d(planes),
            nn.ReLU(True),
            nn.Conv2d(planes, planes, 3, stride, 1, bias=False),
            nn.BatchNorm2d(planes),
            nn.ReLU(True),
            nn.Conv2d(planes, cout, 1, bias=False),
            nn.BatchNorm2d(cout),
        )
        self.short = nn.Sequential()
        if stride != 1 or cin != cout:
            self.short = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        return F.relu(self.body(x) + self.short(x))


class ResNet(nn.Module):
    """CIFAR-style ResNet (3x3 stem, no max-pool) with a global-average-pool head."""

    def __init__(self, block, layers, n_classes, in_ch=3, width=64):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(in_ch, width, 3, 1, 1, bias=False), nn.BatchNorm2d(width), nn.ReLU(True))
        stages, cin = [], width
        for i, n in enumerate(layers):
            planes = width * 2**i
            for j in range(n):
                blk = block(cin, planes, 2 if (i > 0 and j == 0) else 1)
                stages.append(blk)
                cin = planes * block.expansion
        self.stages = nn.Sequential(*stages)
        self.fc = nn.Linear(cin, n_classes)

    def forward(self, x):
        return self.fc(F.adaptive_avg_pool2d(self.stages(self.stem(x)), 1).flatten(1))


class DenseLayer(nn.Module):
    def __init__(self, cin, growth):
        super().__init__()
        self.body = nn.Sequential(
            nn.BatchNorm2d(cin),
            nn.ReLU(True),
            nn.Conv2d(cin, 4 * growth, 1, bias=False),
            nn.BatchNorm2d(4 * growth),
            nn.ReLU(True),
            nn.Conv2d(4 * growth, growth, 3, padding=1, bias=False),
        )

    def forward(self, x):
        return torch.cat([x, self.body(x)], dim=1)


class DenseNet(nn.Module):
    """DenseNet-BC; depth 100 gives three dense blocks of 16 bottleneck layers."""

    def __init__(self, n_classes, in_ch=3, growth=12, depth=100, reduction=0.5):
        super().__init__()
        n = (depth - 4) // 6
        ch = 2 * growth
        layers = [nn.Conv2d(in_ch, ch, 3, padding=1, bias=False)]
        for b in range(3):
            for _ in range(n):
                layers.append(DenseLayer(ch, growth))
                ch += growth
            if b < 2:
                out = int(ch * reduction)
                layers += [nn.BatchNorm2d(ch), nn.ReLU(True), nn.Conv2d(ch, out, 1, bias=False), nn.AvgPool2d(2)]
                ch = out
        layers += [nn.BatchNorm2d(ch), nn.ReLU(True)]
        self.features = nn.Sequential(*layers)
        self.fc = nn.Linear(ch, n_classes)

    def forward(self, x):
        return self.fc(F.adaptive_avg_pool2d(self.features(x), 1).flatten(1))


class VGG16(nn.Module):
    PLAN = (1, 1, "M", 2, 2, "M", 4, 4, 4, "M", 8, 8, 8, "M", 8, 8, 8)

    def __init__(self, n_classes, in_ch=3, width=64):
        super().__init__()
        layers, cin = [], in_ch
        for v in self.PLAN:
            if v == "M":
                layers.append(nn.MaxPool2d(2))
            else:
                cout = width * v
                layers += [nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(True)]
                cin = cout
        self.features = nn.Sequential(*layers)
        self.fc = nn.Linear(cin, n_classes)

    def forward(self, x):
        return self.fc(F.adaptive_avg_pool2d(self.features(x), 1).flatten(1))


class SmallCNN(nn.Module):
    """Four conv-BN-ReLU blocks (the last three strided) and a linear head."""

    def __init__(self, n_classes, in_ch=3, width=16):
        super().__init__()
        chans = [width, 2 * width, 4 * width, 8 * width]
        layers, cin = [], in_ch
        for i, c in enumerate(chans):
            layers += [nn.Conv2d(cin, c, 3, stride=1 if i == 0 else 2, padding=1, bias=False), nn.BatchNorm2d(c), nn.ReLU(True)]
            cin = c
        self.features = nn.Sequential(*layers)
        self.fc = nn.Linear(cin, n_classes)

    def forward(self, x):
        return self.fc(F.adaptive_avg_pool2d(self.features(x), 1).flatten(1))


def build_backbone(arch: str, n_classes: int, in_ch: int = 3, width: int = 64) -> nn.Module:
    if arch == "resnet18":
        return ResNet(BasicBlock, (2, 2, 2, 2), n_classes, in_ch, width)
    if arch == "resnet50":
        return ResNet(Bottleneck, (3, 4, 6, 3), n_classes, in_ch, width)
    if arch == "densenet100":
        return DenseNet(n_classes, in_ch, growth=max(width * 12 // 64, 2))
    if arch == "vgg16":
        return VGG16(n_classes, in_ch, width)
    if arch == "small":
        return SmallCNN(n_classes, in_ch, width)
    raise ValueError(f"unknown architecture {arch!r}")


class TargetClassifier(nn.Module):
    """Preprocessor + backbone; returns logits over ``classes``."""

    def __init__(self, arch: str, preproc, classes: Sequence[int], width: int = 64):
        super().__init__()
        self.arch = arch
        self.preproc = PreprocessorKind.parse(preproc)
        self.classes = sorted(classes)
        self.width = width
        self.constrained = ConstrainedConv2d(3, 3, 5) if self.preproc is PreprocessorKind.CC else None
        # RGB+FD widens the first layer to six channels
        self.backbone = build_backbone(arch, len(self.classes), self.preproc.channels, width)

    def preprocess(self, x):
        kind = self.preproc
        if kind is PreprocessorKind.RGB:
            return x
        if kind is PreprocessorKind.CC:
            return self.constrained(x)
        if kind is PreprocessorKind.FD:
            return fd_torch(x)
        if kind is PreprocessorKind.HP:
            return hp_torch(x)
        if kind is PreprocessorKind.WW:
            return ww_torch(x)
        return torch.cat([x, fd_torch(x)], dim=1)

    def forward(self, x):
        return self.backbone(self.preprocess(x))


def build_target_classifier(arch: str, preproc, classes, width: int = 64, seed: Optional[int] = None):
    if arch not in ARCHS:
        raise ValueError(f"unknown architecture {arch!r}")
    if isinstance(classes, int):
        classes = list(range(1, classes + 1))
    with seeded(seed):
        return TargetClassifier(arch, preproc, classes, width)


# --------------------------------------------------------------------------- evaluator


class ResidualExtractor(nn.Module):
    """Unconditioned 3 -> 3 network with the generator's layer plan; outputs a residual.

    Like the generator, the body is a correction on top of a full-resolution
    path, here a learnable per-channel 7x7 filter. The encoder-decoder alone
    cannot carry pixel-level noise through its downsampled bottleneck. Both
    paths start at zero, so an untrained extractor outputs an all-zero residual.
    """

    def __init__(self, width: int = 64):
        super().__init__()
        self.width = width
        self.skip = nn.Conv2d(3, 3, 7, padding=3, padding_mode="reflect", groups=3)
        self.body = ResnetTransformer(3, 3, width)
        with torch.no_grad():
            self.skip.weight.zero_()
            self.skip.bias.zero_()
            self.body.head[-1].weight.zero_()

    def forward(self, x):
        return self.skip(x) + self.body(x)


class EvaluatorBundle(nn.Module):
    """``e0`` splits an image into high/low frequency parts; ``e_high`` and
    ``e_low`` classify them separately."""

    def __init__(self, classes: Sequence[int], width: int = 64, arch: str = "resnet18"):
        super().__init__()
        self.classes = sorted(classes)
        self.width = width
        self.arch = arch
        self.e0 = ResidualExtractor(width)
        self.e_high = build_backbone(arch, len(self.classes), 3, width)
        self.e_low = build_backbone(arch, len(self.classes), 3, width)

    @property
    def n_classes(self):
        return len(self.classes)

    def split(self, x):
        high = self.e0(x)
        return high, x - high

    def forward(self, x):
        """Logits of the two streams."""
        high, low = self.split(x)
        return self.e_high(high), self.e_low(low)

    def probabilities(self, x):
        lh, ll = self(x)
        return F.softmax(lh, dim=1), F.softmax(ll, dim=1)

    def log_joint(self, x):
        """``0.5 * (log p_high + log p_low)`` per class: the proxy's target score."""
        lh, ll = self(x)
        return 0.5 * (F.log_softmax(lh, dim=1) + F.log_softmax(ll, dim=1))


def build_evaluator(classes, width: int = 64, arch: str = "resnet18", seed: Optional[int] = None) -> EvaluatorBundle:
    if isinstance(classes, int):
        classes = list(range(1, classes + 1))
    with seeded(seed):
        return EvaluatorBundle(classes, width, arch)


def forward_evaluator(bundle: EvaluatorBundle, x: torch.Tensor):
    return bundle.probabilities(x)


def forward_generator(gen: Generator, x: np.ndarray, target_index: int) -> np.ndarray:
    """Anonymize one H x W x 3 image toward class index ``target_index``."""
    if not 0 <= target_index < gen.n_classes:
        raise LabelError(f"target index {target_index} outside 0..{gen.n_classes - 1}")
    was_training = gen.training
    gen.eval()
    with torch.no_grad():
        t = torch.as_tensor(np.ascontiguousarray(x.transpose(2, 0, 1)), dtype=torch.float32)[None]
        out = gen(t, torch.tensor([target_index]))[0].numpy().transpose(1, 2, 0)
    gen.train(was_training)
    return out.astype(np.float64)


def param_hash(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
