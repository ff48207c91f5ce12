"""Four-point homography parameterization, point mapping and warping.

Coordinates are continuous pixel coordinates: pixel (row i, col j) covers
``[j, j+1) x [i, i+1)`` and its centre sits at ``(j + 0.5, i + 0.5)``. An
``h x w`` raster therefore has corners ``(0, 0), (w, 0), (w, h), (0, h)``.
With this convention halving the resolution scales every coordinate by
exactly 0.5, so offsets stay consistent across pyramid levels.

Corner order is always TL, TR, BR, BL. A homography ``H`` maps source
coordinates to destination coordinates (``dst ~ H @ [x, y, 1]``).

Every function accepts tensors, numpy arrays or nested lists. Non-tensor
inputs are promoted to float64 tensors; tensor inputs keep their dtype and
autograd history.
"""

from __future__ import annotations

import numpy as np
import torch

DLT_MAX_CONDITION = 1e10
MIN_DENOMINATOR = 1e-12
MIN_DETERMINANT = 1e-12


class GeometryError(ValueError):
    pass


class DegenerateCorners(GeometryError):
    pass


class PointAtInfinity(GeometryError):
    pass


def as_tensor(x, dtype=torch.float64) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.is_floating_point() else x.to(dtype)
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=dtype)


def square_corners(size, height=None, dtype=torch.float64, device=None) -> torch.Tensor:
    """Corners (TL, TR, BR, BL) of a ``height x size`` raster, shape (4, 2)."""
    w = float(size)
    h = float(size if height is None else height)
    return torch.tensor([[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]], dtype=dtype, device=device)


def _normalizer(points: torch.Tensor) -> torch.Tensor:
    # Similarity that moves the centroid to the origin with mean distance sqrt(2).
    centroid = points.mean(dim=-2)
    dist = (points - centroid.unsqueeze(-2)).norm(dim=-1).mean(dim=-1)
    scale = np.sqrt(2.0) / dist.clamp_min(1e-12)
    T = torch.zeros(points.shape[:-2] + (3, 3), dtype=points.dtype, device=points.device)
    T[..., 0, 0] = scale
    T[..., 1, 1] = scale
    T[..., 0, 2] = -scale * centroid[..., 0]
    T[..., 1, 2] = -scale * centroid[..., 1]
    T[..., 2, 2] = 1.0
    return T


def _normalizer_inverse(T: torch.Tensor) -> torch.Tensor:
    scale = T[..., 0, 0]
    Ti = torch.zeros_like(T)
    Ti[..., 0, 0] = 1.0 / scale
    Ti[..., 1, 1] = 1.0 / scale
    Ti[..., 0, 2] = -T[..., 0, 2] / scale
    Ti[..., 1, 2] = -T[..., 1, 2] / scale
    Ti[..., 2, 2] = 1.0
    return Ti


def dlt(src, dst, check: bool = True) -> torch.Tensor:
    """Homography mapping four ``src`` points onto four ``dst`` points.

    Solves the 8x8 linear system obtained by fixing ``h[2][2] = 1``. Both
    point sets are conditioned with the similarity that normalizes ``src``
    (centroid at the origin, mean radius sqrt(2)), which keeps the system
    well conditioned in float32.

    Args:
        src, dst: (..., 4, 2) corresponding points.
        check: raise :class:`DegenerateCorners` when the system's condition
            number exceeds ``DLT_MAX_CONDITION``.
    Returns:
        (..., 3, 3) homographies with ``h[2][2] = 1``.
    """
    src = as_tensor(src)
    dst = as_tensor(dst, dtype=src.dtype).to(src.device)
    src, dst = torch.broadcast_tensors(src, dst)
    if src.shape[-2:] != (4, 2):
        raise GeometryError(f"expected (..., 4, 2) corner arrays, got {tuple(src.shape)}")

    T = _normalizer(src)
    s = torch.cat([src, torch.ones_like(src[..., :1])], dim=-1) @ T.transpose(-1, -2)
    d = torch.cat([dst, torch.ones_like(dst[..., :1])], dim=-1) @ T.transpose(-1, -2)
    x, y = s[..., 0], s[..., 1]
    u, v = d[..., 0], d[..., 1]
    zero, one = torch.zeros_like(x), torch.ones_like(x)
    rows_u = torch.stack([x, y, one, zero, zero, zero, -x * u, -y * u], dim=-1)
    rows_v = torch.stack([zero, zero, zero, x, y, one, -x * v, -y * v], dim=-1)
    A = torch.stack([rows_u, rows_v], dim=-2).reshape(src.shape[:-2] + (8, 8))
    b = torch.stack([u, v], dim=-1).reshape(src.shape[:-2] + (8,))

    if check:
        cond = torch.linalg.cond(A.detach())
        if not bool(torch.isfinite(cond).all()) or bool((cond > DLT_MAX_CONDITION).any()):
            raise DegenerateCorners(f"DLT system is rank deficient (condition number {cond.max().item():.3g})")
    try:
        h = torch.linalg.solve(A, b)
    except RuntimeError as exc:  # exactly singular
        raise DegenerateCorners(str(exc)) from exc

    Hn = torch.cat([h, torch.ones_like(h[..., :1])], dim=-1).reshape(src.shape[:-2] + (3, 3))
    H = _normalizer_inverse(T) @ Hn @ T
    return H / H[..., 2:3, 2:3]


def offsets_to_homography(base, offsets, check: bool = True) -> torch.Tensor:
    """Homography taking each ``base`` corner to ``base + offsets``."""
    base = as_tensor(base)
    offsets = as_tensor(offsets, dtype=base.dtype).to(base.device)
    return dlt(base, base + offsets, check=check)


def apply_homography(H, points, check: bool = True, return_denominator: bool = False):
    """Map (..., N, 2) points through (..., 3, 3) homographies.

    Raises :class:`PointAtInfinity` if a projective denominator is smaller
    than ``MIN_DENOMINATOR`` in magnitude (only when ``check``).
    """
    H = as_tensor(H)
    points = as_tensor(points, dtype=H.dtype).to(H.device)
    x, y = points[..., 0], points[..., 1]
    h = H.unsqueeze(-3)  # broadcast over points
    num_x = h[..., 0, 0] * x + h[..., 0, 1] * y + h[..., 0, 2]
    num_y = h[..., 1, 0] * x + h[..., 1, 1] * y + h[..., 1, 2]
    den = h[..., 2, 0] * x + h[..., 2, 1] * y + h[..., 2, 2]
    if check and bool((den.detach().abs() < MIN_DENOMINATOR).any()):
        raise PointAtInfinity("a point maps to the line at infinity")
    out = torch.stack([num_x / den, num_y / den], dim=-1)
    if return_denominator:
        return out, den
    return out


def homography_to_offsets(H, base, check: bool = True) -> torch.Tensor:
    base = as_tensor(base)
    return apply_homography(H, base, check=check) - base


def invert_homography(H, check: bool = True) -> torch.Tensor:
    H = as_tensor(H)
    if check:
        det = torch.linalg.det(H.detach() / H.detach()[..., 2:3, 2:3])
        if bool((det.abs() <= MIN_DETERMINANT).any()):
            raise GeometryError("homography is not invertible")
    Hi = torch.linalg.inv(H)
    return Hi / Hi[..., 2:3, 2:3]


def scale_offsets(offsets, factor: float) -> torch.Tensor:
    if not factor > 0:
        raise ValueError(f"scale factor must be positive, got {factor}")
    return as_tensor(offsets) * factor


def mace(pred, gt) -> torch.Tensor:
    """Mean corner error: average Euclidean distance over the four corners.

    Works on (..., 4, 2) batches and returns a (...) tensor.
    """
    pred = as_tensor(pred)
    gt = as_tensor(gt, dtype=pred.dtype).to(pred.device)
    return (pred - gt).norm(dim=-1).mean(dim=-1)


def pixel_centers(height: int, width: int, dtype=torch.float64, device=None) -> torch.Tensor:
    """(h*w, 2) array of pixel-centre coordinates in row-major order."""
    ys = torch.arange(height, dtype=dtype, device=device) + 0.5
    xs = torch.arange(width, dtype=dtype, device=device) + 0.5
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx.reshape(-1), gy.reshape(-1)], dim=-1)


def bilinear_sample(image: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Sample a (B, C, h, w) raster at (B, N, 2) continuous coordinates.

    Points outside the raster extent ``[0, w] x [0, h]`` give zero. Inside
    it, coordinates in the half-pixel band beyond the outermost pixel
    centres are clamped onto them, so no zero fill leaks into samples
    that fall within the raster. Sampling exactly at a pixel centre returns
    that pixel bit-exactly.
    """
    B, C, h, w = image.shape
    cx, cy = coords[..., 0], coords[..., 1]
    inside = (cx >= 0) & (cx <= w) & (cy >= 0) & (cy <= h)
    x = cx.clamp(0.5, w - 0.5) - 0.5
    y = cy.clamp(0.5, h - 0.5) - 0.5
    x0 = torch.floor(x)
    y0 = torch.floor(y)
    wx = x - x0
    wy = y - y0
    x0 = x0.long()
    y0 = y0.long()
    flat = image.reshape(B, C, h * w)

    def tap(xi, yi):
        valid = (xi < w) & (yi < h)
        idx = (yi.clamp(max=h - 1) * w + xi.clamp(max=w - 1)).unsqueeze(1).expand(B, C, -1)
        return flat.gather(2, idx) * valid.unsqueeze(1).to(image.dtype)

    wx = wx.unsqueeze(1).to(image.dtype)
    wy = wy.unsqueeze(1).to(image.dtype)
    out = (tap(x0, y0) * (1 - wx) * (1 - wy) + tap(x0 + 1, y0) * wx * (1 - wy)
           + tap(x0, y0 + 1) * (1 - wx) * wy + tap(x0 + 1, y0 + 1) * wx * wy)
    return out * inside.unsqueeze(1).to(image.dtype)


def sample_by_homography(image: torch.Tensor, H_out_to_in: torch.Tensor, out_size=None,
                         check: bool = False) -> torch.Tensor:
    """Output pixel ``q`` takes the input value at ``H_out_to_in(q)``.

    ``image`` is (B, C, h, w) and ``H_out_to_in`` is (B, 3, 3) or (3, 3).
    """
    B, C, h, w = image.shape
    oh, ow = (h, w) if out_size is None else out_size
    grid = pixel_centers(oh, ow, dtype=H_out_to_in.dtype, device=image.device)
    H = H_out_to_in if H_out_to_in.dim() == 3 else H_out_to_in.expand(B, 3, 3)
    src = apply_homography(H, grid.unsqueeze(0), check=check)
    return bilinear_sample(image, src).reshape(B, C, oh, ow)


def warp_image(image, H, out_size=None, check: bool = True):
    """Inverse warp: output (x, y) samples ``image`` at ``H^-1 (x, y)``.

    ``image`` may be (C, h, w) or (B, C, h, w); a numpy input gives a numpy
    result of the same dtype. Bilinear interpolation, zero fill outside.
    """
    is_numpy = isinstance(image, np.ndarray)
    img = as_tensor(image) if is_numpy else image
    squeeze = img.dim() == 3
    if squeeze:
        img = img.unsqueeze(0)
    H = as_tensor(H, dtype=img.dtype).to(img.device)
    Hinv = invert_homography(H, check=check)
    out = sample_by_homography(img, Hinv, out_size=out_size, check=check)
    if squeeze:
        out = out[0]
    if is_numpy:
        return out.detach().cpu().numpy().astype(image.dtype, copy=False)
    return out


def warp_by_offsets(features: torch.Tensor, offsets: torch.Tensor, corners=None) -> torch.Tensor:
    """Bring source features into the target frame given four-point offsets.

    ``offsets`` (B, 4, 2) move each corner of the source feature grid to its
    position in the target frame, so target position ``p`` samples the
    source at ``H^-1(p)``. ``H^-1`` is solved directly from the swapped
    correspondences, which keeps the warp differentiable in the offsets.
    """
    if corners is None:
        corners = square_corners(features.shape[-1], features.shape[-2], dtype=offsets.dtype,
                                 device=offsets.device)
    H_inv = dlt(corners + offsets, corners.expand_as(offsets), check=False)
    return sample_by_homography(features, H_inv)
