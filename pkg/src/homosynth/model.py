"""Cross-scale, colour-invariant iterative homography estimator.

Three-level feature pyramid with top-down (strided residual + max-pool)
and bottom-up (nearest upsample + conv) fusion, per-level colour/invariant
decoupling heads, and a coarse-to-fine loop that warps the source features
by the running four-point estimate, builds a local correlation volume and
regresses a residual correction.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import square_corners, warp_by_offsets


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 64
    inner_iterations: int = 2
    search_radius: int = 4
    histogram_bins: int = 64
    norm: str = "instance"
    estimator_channels: int = 64
    color_hidden: int = 128

    def __post_init__(self):
        if self.inner_iterations < 1:
            raise ValueError("inner_iterations must be >= 1")
        if self.search_radius < 0:
            raise ValueError("search_radius must be >= 0")
        if self.base_channels < 8:
            raise ValueError("base_channels must be >= 8")
        if self.histogram_bins < 8:
            raise ValueError("histogram_bins must be >= 8")
        if self.norm not in ("instance", "none"):
            raise ValueError(f"unknown norm {self.norm!r}")

    @property
    def channels(self) -> tuple:
        c = self.base_channels
        return (c, c * 3 // 2, c * 2)


def _norm(kind: str, channels: int) -> nn.Module:
    if kind == "instance":
        return nn.InstanceNorm2d(channels, affine=True)
    return nn.Identity()


class ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1, norm="instance"):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.norm1 = _norm(norm, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.norm2 = _norm(norm, out_ch)
        if stride != 1 or in_ch != out_ch:
            self.skip = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride=stride), _norm(norm, out_ch))
        else:
            self.skip = nn.Identity()

    def forward(self, x):
        y = F.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return F.relu(y + self.skip(x))


class PyramidExtractor(nn.Module):
    """Image (B, 3, S, S) -> [F1 (S), F2 (S/2), F3 (S/4)]."""

    def __init__(self, channels, norm="instance"):
        super().__init__()
        c1, c2, c3 = channels
        self.stem = nn.Conv2d(3, c1, 3, padding=1)
        self.res1 = ResBlock(c1, c1, norm=norm)
        self.down2 = ResBlock(c1, c2, stride=2, norm=norm)
        self.res2 = ResBlock(c2 + c1, c2, norm=norm)
        self.down3 = ResBlock(c2, c3, stride=2, norm=norm)
        self.res3 = ResBlock(c3 + c2, c3, norm=norm)
        self.fuse2 = nn.Conv2d(c2 + c3, c2, 3, padding=1)
        self.fuse1 = nn.Conv2d(c1 + c2, c1, 3, padding=1)

    def forward(self, image):
        f1 = self.res1(self.stem(image))
        f2 = self.res2(torch.cat([self.down2(f1), F.max_pool2d(f1, 2)], dim=1))
        f3 = self.res3(torch.cat([self.down3(f2), F.max_pool2d(f2, 2)], dim=1))
        f2 = self.fuse2(torch.cat([f2, F.interpolate(f3, scale_factor=2, mode="nearest")], dim=1))
        f1 = self.fuse1(torch.cat([f1, F.interpolate(f2, scale_factor=2, mode="nearest")], dim=1))
        return [f1, f2, f3]


class DecouplingHead(nn.Module):
    """Two parallel conv branches: colour representation and colour-invariant feature."""

    def __init__(self, channels):
        super().__init__()

        def branch():
            return nn.Sequential(nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(),
                                 nn.Conv2d(channels, channels, 1))

        self.color = branch()
        self.invar = branch()

    def forward(self, feat):
        return self.color(feat), self.invar(feat)


class ColorReconstructor(nn.Module):
    """Global average pool + two-layer MLP -> per-channel histograms (3 * bins)."""

    def __init__(self, channels, bins, hidden=128):
        super().__init__()
        self.bins = bins
        self.mlp = nn.Sequential(nn.Linear(channels, hidden), nn.ReLU(), nn.Linear(hidden, 3 * bins))

    def forward(self, feat):
        logits = self.mlp(feat.mean(dim=(2, 3)))
        B = logits.shape[0]
        return torch.softmax(logits.view(B, 3, self.bins), dim=-1).view(B, 3 * self.bins)


class ResidualEstimator(nn.Module):
    """Correlation volume at one level -> residual four-point offsets (B, 4, 2).

    Stride-2 convolutions bring the grid down to 4x4 (the first one acts
    on the volume directly). An adaptive pool to a 2x2 grid keeps one cell
    per corner quadrant, and a zero-initialized linear layer emits the 8
    offsets in feature-grid pixels.
    """

    def __init__(self, in_ch, size, width=64):
        super().__init__()
        layers = []
        s, ch = size, in_ch
        while s > 4:
            layers += [nn.Conv2d(ch, width, 3, stride=2, padding=1), nn.ReLU()]
            s, ch = (s + 1) // 2, width
        if not layers:
            layers = [nn.Conv2d(in_ch, width, 3, padding=1), nn.ReLU()]
        layers += [nn.Conv2d(width, width, 3, padding=1), nn.ReLU()]
        self.body = nn.Sequential(*layers)
        self.fc = nn.Linear(width * 4, 8)
        nn.init.zeros_(self.fc.weight)
        nn.init.zeros_(self.fc.bias)

    def forward(self, volume):
        x = F.adaptive_avg_pool2d(self.body(volume), 2)
        return self.fc(x.flatten(1)).view(-1, 4, 2)


class _LocalCorrelation(torch.autograd.Function):
    # Shift-and-multiply in both passes; avoids one zero-filled slice gradient per displacement.

    @staticmethod
    def forward(ctx, f_src, f_tar, radius):
        B, C, h, w = f_tar.shape
        padded = F.pad(f_src, (radius, radius, radius, radius))
        d = 2 * radius + 1
        out = f_tar.new_empty(B, d * d, h, w)
        tmp = torch.empty_like(f_tar)
        for u in range(d):
            for v in range(d):
                torch.mul(padded[:, :, u:u + h, v:v + w], f_tar, out=tmp)
                torch.sum(tmp, dim=1, out=out[:, u * d + v])
        out /= math.sqrt(C)
        ctx.save_for_backward(padded, f_tar)
        ctx.radius = radius
        return out

    @staticmethod
    @torch.autograd.function.once_differentiable
    def backward(ctx, grad_out):
        padded, f_tar = ctx.saved_tensors
        r = ctx.radius
        B, C, h, w = f_tar.shape
        d = 2 * r + 1
        grad_out = grad_out / math.sqrt(C)
        grad_padded = torch.zeros_like(padded)
        grad_tar = torch.zeros_like(f_tar)
        for u in range(d):
            for v in range(d):
                g = grad_out[:, u * d + v].unsqueeze(1)
                grad_padded[:, :, u:u + h, v:v + w].addcmul_(g, f_tar)
                grad_tar.addcmul_(g, padded[:, :, u:u + h, v:v + w])
        return grad_padded[:, :, r:r + h, r:r + w], grad_tar, None


def local_correlation(f_src, f_tar, radius: int) -> torch.Tensor:
    """Local correlation volume, (B, (2r+1)^2, h, w).

    Channel ``(u + r) * (2r + 1) + (v + r)`` at ``(m, n)`` holds
    ``<f_src[:, m+u, n+v], f_tar[:, m, n]> / sqrt(C)`` with ``m`` the row and
    zero outside the source grid.
    """
    if f_src.shape != f_tar.shape:
        raise ShapeError(f"feature shapes differ: {tuple(f_src.shape)} vs {tuple(f_tar.shape)}")
    if radius < 0:
        raise ValueError("radius must be non-negative")
    return _LocalCorrelation.apply(f_src.contiguous(), f_tar.contiguous(), int(radius))


def color_histogram(image, bins: int) -> torch.Tensor:
    """Per-channel normalized histograms over ``bins`` equal intervals of [0, 1].

    (B, 3, h, w) -> (B, 3 * bins); a (3, h, w) input gives (3 * bins,).
    Value 1.0 falls in the last bin.
    """
    image = torch.as_tensor(image)
    squeeze = image.dim() == 3
    if squeeze:
        image = image.unsqueeze(0)
    B, C, h, w = image.shape
    idx = (image.detach().clamp(0, 1) * bins).long().clamp_max(bins - 1).reshape(B, C, -1)
    hist = torch.zeros(B, C, bins, dtype=torch.float32 if not image.is_floating_point() else image.dtype,
                       device=image.device)
    hist.scatter_add_(2, idx, torch.ones_like(idx, dtype=hist.dtype))
    hist = (hist / (h * w)).reshape(B, C * bins)
    return hist[0] if squeeze else hist


@dataclass
class EstimationOutput:
    trace: list  # 3 * K cumulative offsets, each (B, 4, 2), coarse to fine
    residuals: list = field(default_factory=list)
    decoupled: dict = field(default_factory=dict)  # {"src"/"tar": [(color, invar) per level 1..3]}

    @property
    def final(self):
        return self.trace[-1]


class CCNet(nn.Module):
    def __init__(self, config: ModelConfig | None = None, image_size: int = 128):
        super().__init__()
        self.config = config or ModelConfig()
        self.image_size = image_size
        if image_size % 4:
            raise ShapeError("image size must be divisible by 4")
        cfg = self.config
        chans = cfg.channels
        vol = (2 * cfg.search_radius + 1) ** 2
        self.extractor = PyramidExtractor(chans, norm=cfg.norm)
        self.decouple = nn.ModuleList(DecouplingHead(c) for c in chans)
        self.color_nets = nn.ModuleList(ColorReconstructor(c, cfg.histogram_bins, cfg.color_hidden) for c in chans)
        self.estimators = nn.ModuleList(
            ResidualEstimator(vol, image_size // 2 ** j, cfg.estimator_channels) for j in range(3))

    def extract_pyramid(self, image):
        if image.shape[-1] % 4 or image.shape[-2] % 4:
            raise ShapeError(f"spatial size {tuple(image.shape[-2:])} not divisible by 4")
        return self.extractor(image)

    def decouple_color(self, pyramid):
        return [head(f) for head, f in zip(self.decouple, pyramid)]

    def reconstruct_color(self, level: int, f_color):
        """``level`` is 1-based (1 = finest)."""
        return self.color_nets[level - 1](f_color)

    def predict_residual(self, level: int, volume):
        """Residual offsets at full resolution from a level-``level`` volume."""
        return self.estimators[level - 1](volume) * 2 ** (level - 1)

    def forward(self, src, tar, return_features: bool = False) -> EstimationOutput:
        if src.shape != tar.shape:
            raise ShapeError("source and target must have the same shape")
        B = src.shape[0]
        pyramid = self.extract_pyramid(torch.cat([src, tar], dim=0))
        decoupled = self.decouple_color(pyramid)
        total = torch.zeros(B, 4, 2, dtype=src.dtype, device=src.device)
        trace, residuals = [], []
        for level in (3, 2, 1):
            invar = decoupled[level - 1][1]
            f_src, f_tar = invar[:B], invar[B:]
            scale = 2.0 ** -(level - 1)
            corners = square_corners(f_src.shape[-1], f_src.shape[-2], dtype=src.dtype, device=src.device)
            for _ in range(self.config.inner_iterations):
                warped = align_features(f_src, total * scale, corners)
                volume = local_correlation(warped, f_tar, self.config.search_radius)
                residual = self.predict_residual(level, volume)
                total = total + residual
                residuals.append(residual)
                trace.append(total)
        out = EstimationOutput(trace=trace, residuals=residuals)
        if return_features:
            out.decoupled = {
                "src": [(c[:B], i[:B]) for c, i in decoupled],
                "tar": [(c[B:], i[B:]) for c, i in decoupled],
            }
        return out

    @torch.no_grad()
    def predict(self, src, tar):
        return self.forward(src, tar).final


def align_features(f_src, offsets, corners=None):
    """Warp source features into the target frame (see :func:`warp_by_offsets`)."""
    return warp_by_offsets(f_src, offsets, corners)


def model_summary(model: CCNet) -> dict:
    return {"config": asdict(model.config), "image_size": model.image_size,
            "parameters": sum(p.numel() for p in model.parameters())}
