"""Style renderers and procedural image sources.

A renderer takes a content patch and a template image, both (3, h, w)
float arrays in [0, 1], and returns a stylized (3, h, w) raster of the
content patch. ``ProceduralRenderer`` is self-contained and deterministic;
``ExternalRenderer`` wraps any pretrained style-transfer network.
"""

from __future__ import annotations

import hashlib
import importlib
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage


class StyleRenderer(Protocol):
    def render(self, content: np.ndarray, template: np.ndarray) -> np.ndarray: ...


class IdentityRenderer:
    """Returns the content unchanged; useful for geometry checks."""

    name = "identity"

    def render(self, content, template):
        return np.array(content, dtype=np.float64, copy=True)


def luminance(image: np.ndarray) -> np.ndarray:
    return 0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2]


def _fit_to(template: np.ndarray, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    # Tile the template if needed, then take a random h x w window.
    th, tw = template.shape[1:]
    reps = (1, -(-h // th), -(-w // tw))
    tiled = np.tile(template, reps) if reps != (1, 1, 1) else template
    y = int(rng.integers(0, tiled.shape[1] - h + 1))
    x = int(rng.integers(0, tiled.shape[2] - w + 1))
    return tiled[:, y:y + h, x:x + w]


class ProceduralRenderer:
    """Deterministic stylizer driven by the template's colours and texture.

    Three stages, all seeded from a hash of the template bytes (and ``seed``):

    1. palette remap: content luminance, contrast-stretched and possibly
       inverted, indexes a colour ramp built from template colours sorted
       by luminance;
    2. a low-frequency colour field (bicubic upsampling of a coarse random
       grid) shifts the colours smoothly across the patch;
    3. the template's high-pass texture is overlaid with a random weight.

    Structure survives because the remap is monotone in luminance and the
    ramp is mixed with a grey ramp to keep a minimum contrast.
    """

    name = "procedural"

    def __init__(self, seed: int = 0, palette_size=(3, 7), min_contrast: float = 0.45,
                 field_strength: float = 0.12, texture_weight=(0.1, 0.4)):
        self.seed = seed
        self.palette_size = palette_size
        self.min_contrast = min_contrast
        self.field_strength = field_strength
        self.texture_weight = texture_weight

    def _rng(self, template: np.ndarray) -> np.random.Generator:
        digest = hashlib.sha256(np.ascontiguousarray(template, dtype=np.float32).tobytes()).digest()
        return np.random.default_rng([int.from_bytes(digest[:8], "little"), self.seed])

    def render(self, content, template):
        content = np.asarray(content, dtype=np.float64)
        template = np.asarray(template, dtype=np.float64)
        rng = self._rng(template)
        _, h, w = content.shape

        lum = luminance(content)
        lo, hi = np.percentile(lum, [1, 99])
        t = np.clip((lum - lo) / max(hi - lo, 1e-3), 0.0, 1.0)
        if rng.random() < 0.5:
            t = 1.0 - t
        t = t ** rng.uniform(0.6, 1.6)

        k = int(rng.integers(self.palette_size[0], self.palette_size[1] + 1))
        pixels = template.reshape(3, -1)
        picks = pixels[:, rng.integers(0, pixels.shape[1], size=k)]
        picks = picks[:, np.argsort(luminance(picks[:, :, None])[:, 0])]
        grey = np.linspace(0.0, 1.0, k)
        mix = rng.uniform(0.0, 1.0 - self.min_contrast)
        palette = mix * picks + (1 - mix) * (grey[None] * 0.9 + 0.05 + 0.1 * (picks - luminance(picks[:, :, None])[:, 0]))
        palette = np.clip(palette, 0.0, 1.0)
        stops = np.linspace(0.0, 1.0, k)
        out = np.stack([np.interp(t, stops, palette[c]) for c in range(3)])

        coarse = rng.normal(0.0, self.field_strength, size=(3, 4, 4))
        field = np.stack([ndimage.zoom(coarse[c], (h / 4, w / 4), order=3)[:h, :w] for c in range(3)])
        out = out + field

        tex = _fit_to(template, h, w, rng)
        tex = tex - np.stack([ndimage.gaussian_filter(tex[c], 2.0, mode="wrap") for c in range(3)])
        out = out + rng.uniform(*self.texture_weight) * tex
        return np.clip(out, 0.0, 1.0)


class ExternalRenderer:
    """Adapter for a pretrained style-transfer network.

    ``net`` is any callable mapping ``(content, style)`` float tensors of
    shape (1, 3, h, w) in [0, 1] to a stylized (1, 3, h', w') tensor.
    Outputs of a different size are bilinearly resized back to the content
    size; values are clamped to [0, 1].
    """

    name = "external"

    def __init__(self, net, device: str = "cpu"):
        self.net = net
        self.device = device

    @classmethod
    def from_import_path(cls, path: str, device: str = "cpu"):
        """Build from ``"package.module:factory"``; the factory returns ``net``."""
        module, _, attr = path.partition(":")
        factory = getattr(importlib.import_module(module), attr)
        return cls(factory(), device=device)

    def render(self, content, template):
        import torch
        import torch.nn.functional as F

        c = torch.as_tensor(np.asarray(content, dtype=np.float32))[None].to(self.device)
        s = torch.as_tensor(np.asarray(template, dtype=np.float32))[None].to(self.device)
        with torch.no_grad():
            out = self.net(c, s)
            if out.shape[-2:] != c.shape[-2:]:
                out = F.interpolate(out, size=c.shape[-2:], mode="bilinear", align_corners=False)
        return out[0].clamp(0, 1).cpu().numpy().astype(np.float64)


def build_renderer(name: str, seed: int = 0, device: str = "cpu") -> StyleRenderer:
    if name == "procedural":
        return ProceduralRenderer(seed=seed)
    if name == "identity":
        return IdentityRenderer()
    if name.startswith("external:"):
        return ExternalRenderer.from_import_path(name[len("external:"):], device=device)
    raise ValueError(f"unknown renderer {name!r}")


# -- image sources ----------------------------------------------------------

def random_scene(size: int, rng: np.random.Generator) -> np.ndarray:
    """Synthetic content image: gradient background with random flat shapes."""
    img = Image.new("RGB", (size, size))
    c0, c1 = rng.integers(0, 256, size=(2, 3))
    ramp = np.linspace(0, 1, size)[:, None, None]
    angle = rng.uniform(0, np.pi)
    ramp = (np.cos(angle) * ramp + np.sin(angle) * np.transpose(ramp, (1, 0, 2)))
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    bg = (c0 * (1 - ramp) + c1 * ramp).astype(np.uint8)
    img.paste(Image.fromarray(bg))
    draw = ImageDraw.Draw(img)
    for _ in range(int(rng.integers(12, 28))):
        kind = rng.integers(0, 4)
        color = tuple(int(v) for v in rng.integers(0, 256, size=3))
        cx, cy = rng.uniform(-0.1, 1.1, size=2) * size
        r = rng.uniform(0.03, 0.25) * size
        if kind == 0:
            draw.rectangle([cx - r, cy - r * rng.uniform(0.3, 1.5), cx + r, cy + r], fill=color)
        elif kind == 1:
            draw.ellipse([cx - r, cy - r * rng.uniform(0.3, 1.0), cx + r, cy + r], fill=color)
        elif kind == 2:
            n = int(rng.integers(3, 7))
            ang = np.sort(rng.uniform(0, 2 * np.pi, size=n))
            rad = r * rng.uniform(0.5, 1.0, size=n)
            pts = [(float(cx + a * np.cos(t)), float(cy + a * np.sin(t))) for t, a in zip(ang, rad)]
            draw.polygon(pts, fill=color)
        else:
            x2, y2 = rng.uniform(0, 1, size=2) * size
            draw.line([cx, cy, x2, y2], fill=color, width=int(rng.integers(1, 6)))
    arr = np.asarray(img, dtype=np.float64).transpose(2, 0, 1) / 255.0
    return arr


def random_template(size: int, rng: np.random.Generator) -> np.ndarray:
    """Synthetic style template: colour blobs, strokes and grain."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = np.zeros((3, size, size)) + rng.uniform(0, 1, size=(3, 1, 1))
    for _ in range(int(rng.integers(4, 10))):
        cx, cy = rng.uniform(0, 1, size=2)
        s = rng.uniform(0.05, 0.3)
        blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))
        out += blob[None] * (rng.uniform(0, 1, size=(3, 1, 1)) - out.mean(axis=(1, 2), keepdims=True))
    freq = rng.uniform(4, 30)
    theta = rng.uniform(0, np.pi)
    stripes = np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy))
    out += rng.uniform(0.02, 0.15) * stripes[None] * rng.uniform(-1, 1, size=(3, 1, 1))
    grain = ndimage.gaussian_filter(rng.normal(0, 1, size=(size, size)), rng.uniform(0.5, 2.0))
    out += rng.uniform(0.02, 0.12) * grain[None] / max(grain.std(), 1e-9)
    return np.clip(out, 0.0, 1.0)


class ProceduralSource:
    """Indexable source of procedurally generated images, item ``i`` seeded by (seed, i)."""

    def __init__(self, kind: str, count: int, size: int, seed: int = 0):
        if kind not in ("scene", "template"):
            raise ValueError(f"unknown procedural kind {kind!r}")
        self.kind, self.count, self.size, self.seed = kind, count, size, seed

    def __len__(self):
        return self.count

    def __getitem__(self, i: int) -> np.ndarray:
        if not 0 <= i < self.count:
            raise IndexError(i)
        rng = np.random.default_rng([self.seed, i, 0 if self.kind == "scene" else 1])
        make = random_scene if self.kind == "scene" else random_template
        return make(self.size, rng)

    def image_id(self, i: int) -> str:
        return f"{self.kind}:{self.seed}:{i}"


IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp"}


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr.transpose(2, 0, 1) / 255.0


class FolderSource:
    """Images from a directory (sorted by relative path), loaded on access."""

    def __init__(self, root):
        self.root = Path(root)
        self.paths: Sequence[Path] = sorted(
            p for p in self.root.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
        if not self.paths:
            raise FileNotFoundError(f"no images under {self.root}")

    def __len__(self):
        return len(self.paths)

    def __getitem__(self, i: int) -> np.ndarray:
        return load_image(self.paths[i])

    def image_id(self, i: int) -> str:
        return str(self.paths[i].relative_to(self.root))
