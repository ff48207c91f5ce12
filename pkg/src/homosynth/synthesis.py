"""Training-pair synthesis from single content images.

Pipeline per sample: crop a ``(S_m + S)`` patch, render it twice against two
templates with random content weights, L0-smooth each rendering with a
random weight, warp the source rendering by a random integer four-point
perturbation, then centre-crop both to ``S x S``.

Ground-truth convention: ``gt_offsets[c]`` moves corner ``c`` of the
source crop (TL, TR, BR, BL; corners of ``[0, S]^2``) to the position of the
same scene point in the target crop's frame. With
``H = offsets_to_homography(square_corners(S), gt)`` this means
``src(q) == tar(H(q))``, and ``warp_image(src, H)`` aligns the source to
the target. The source crop samples its rendering inside the perturbed
quadrilateral, so ``margin >= 2 * max_perturbation`` keeps every sample
inside the rendered patch.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch

from .geometry import offsets_to_homography, sample_by_homography, square_corners
from .render import StyleRenderer
from .smoothing import l0_smooth


class SynthesisError(ValueError):
    pass


class OutOfBounds(SynthesisError):
    pass


class ContentTooSmall(SynthesisError):
    pass


class RendererShapeMismatch(SynthesisError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    patch_size: int = 128
    margin: int = 64
    max_perturbation: int = 32
    smoothing_bound: float = 1e-3
    content_weight_range: tuple = (0.0, 1.0)
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "content_weight_range", tuple(float(v) for v in self.content_weight_range))
        lo, hi = self.content_weight_range
        if self.patch_size <= 0:
            raise ValueError("patch_size must be positive")
        if self.max_perturbation < 0:
            raise ValueError("max_perturbation must be non-negative")
        if self.margin < 2 * self.max_perturbation:
            raise ValueError("margin must be at least twice max_perturbation")
        if self.smoothing_bound < 0:
            raise ValueError("smoothing_bound must be non-negative")
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError("content_weight_range must satisfy 0 <= lo <= hi <= 1")

    @property
    def crop_size(self) -> int:
        return self.patch_size + self.margin


@dataclass
class TrainingSample:
    src_image: np.ndarray  # (3, S, S) float32 in [0, 1]
    tar_image: np.ndarray
    gt_offsets: np.ndarray  # (4, 2) int64, TL TR BR BL
    provenance: dict = field(default_factory=dict)

    @property
    def patch_size(self) -> int:
        return int(self.src_image.shape[-1])


def crop_patch(content: np.ndarray, x: int, y: int, size: int) -> np.ndarray:
    _, h, w = content.shape
    if x < 0 or y < 0 or x + size > w or y + size > h:
        raise OutOfBounds(f"window ({x}, {y}, {size}) exceeds {h}x{w} content")
    return np.array(content[:, y:y + size, x:x + size], copy=True)


def stylize(patch: np.ndarray, template: np.ndarray, alpha: float, renderer: StyleRenderer) -> np.ndarray:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"content weight must lie in [0, 1], got {alpha}")
    patch = np.asarray(patch, dtype=np.float64)
    rendered = np.asarray(renderer.render(patch, template), dtype=np.float64)
    if rendered.shape != patch.shape:
        raise RendererShapeMismatch(f"renderer returned {rendered.shape}, expected {patch.shape}")
    return np.clip(alpha * patch + (1.0 - alpha) * rendered, 0.0, 1.0)


def smooth(image: np.ndarray, weight: float) -> np.ndarray:
    return l0_smooth(image, weight)


def sample_offsets(p: int, rng: np.random.Generator) -> np.ndarray:
    if p < 0:
        raise ValueError("max perturbation must be non-negative")
    return rng.integers(-p, p + 1, size=(4, 2), dtype=np.int64)


def perturbation_homography(cfg: SynthConfig, offsets) -> torch.Tensor:
    """Homography (in crop-patch coordinates) induced by ``offsets`` on the centre square."""
    m = cfg.margin // 2
    corners = square_corners(cfg.patch_size) + m
    return offsets_to_homography(corners, torch.as_tensor(np.asarray(offsets), dtype=torch.float64))


def synthesize_pair(content: np.ndarray, template_i: np.ndarray, template_j: np.ndarray,
                    cfg: SynthConfig, renderer: StyleRenderer, rng: np.random.Generator,
                    content_id=None, template_ids=(None, None), rng_seed=None) -> TrainingSample:
    """Build one (src, tar, gt) training sample; draws from ``rng`` in a fixed order."""
    content = np.asarray(content, dtype=np.float64)
    need = cfg.crop_size
    _, h, w = content.shape
    if h < need or w < need:
        raise ContentTooSmall(f"content {h}x{w} smaller than crop {need}x{need}")

    x = int(rng.integers(0, w - need + 1))
    y = int(rng.integers(0, h - need + 1))
    patch = crop_patch(content, x, y, need)

    lo, hi = cfg.content_weight_range
    alpha_i = float(rng.uniform(lo, hi))
    alpha_j = float(rng.uniform(lo, hi))
    beta_i = float(rng.uniform(0.0, cfg.smoothing_bound))
    beta_j = float(rng.uniform(0.0, cfg.smoothing_bound))

    src = stylize(patch, template_i, alpha_i, renderer)
    tar = stylize(patch, template_j, alpha_j, renderer)
    src = np.clip(smooth(src, beta_i), 0.0, 1.0)
    tar = np.clip(smooth(tar, beta_j), 0.0, 1.0)

    offsets = sample_offsets(cfg.max_perturbation, rng)
    if offsets.any():
        # Source pixel q shows the rendering at H(q); H maps the centre square onto its perturbed quad.
        H = perturbation_homography(cfg, offsets)
        src = sample_by_homography(torch.from_numpy(src)[None], H)[0].numpy()

    m = cfg.margin // 2
    S = cfg.patch_size
    provenance = {
        "content_id": content_id,
        "template_ids": list(template_ids),
        "alpha_i": alpha_i,
        "alpha_j": alpha_j,
        "beta_i": beta_i,
        "beta_j": beta_j,
        "crop_xy": [x, y],
        "rng_seed": rng_seed,
    }
    return TrainingSample(
        src_image=src[:, m:m + S, m:m + S].astype(np.float32),
        tar_image=tar[:, m:m + S, m:m + S].astype(np.float32),
        gt_offsets=offsets,
        provenance=provenance,
    )


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def make_sample(index: int, cfg: SynthConfig, contents, templates, renderer: StyleRenderer,
                seed: Optional[int] = None) -> TrainingSample:
    """Sample ``index`` of the stream defined by ``(seed, cfg, contents, templates)``.

    The sample depends only on its own RNG stream, so generation can be
    split across workers in any order.
    """
    seed = cfg.rng_seed if seed is None else seed
    rng = sample_rng(seed, index)
    ci = int(rng.integers(0, len(contents)))
    if len(templates) > 1:
        ti, tj = (int(v) for v in rng.choice(len(templates), size=2, replace=False))
    else:
        ti = tj = 0

    def ident(source, i):
        return source.image_id(i) if hasattr(source, "image_id") else i

    return synthesize_pair(
        contents[ci], templates[ti], templates[tj], cfg, renderer, rng,
        content_id=ident(contents, ci),
        template_ids=(ident(templates, ti), ident(templates, tj)),
        rng_seed=[seed, index],
    )


def config_dict(cfg: SynthConfig) -> dict:
    d = asdict(cfg)
    d["content_weight_range"] = list(cfg.content_weight_range)
    return d
