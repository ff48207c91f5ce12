"""Shared builders for the test-suite."""

import numpy as np
import torch
from scipy import ndimage

from homosynth.geometry import offsets_to_homography, square_corners, warp_image


def smooth_content(rng, size, sigma=10.0):
    noise = rng.normal(size=(3, size, size))
    img = np.stack([ndimage.gaussian_filter(c, sigma, mode="wrap") for c in noise])
    img -= img.min(axis=(1, 2), keepdims=True)
    return img / img.max(axis=(1, 2), keepdims=True)


def realign(sample, erode=2):
    """Warp ``src`` into the target frame; returns (aligned, mask of fully valid pixels)."""
    S = sample.patch_size
    H = offsets_to_homography(square_corners(S), torch.as_tensor(np.asarray(sample.gt_offsets), dtype=torch.float64))
    aligned = warp_image(np.asarray(sample.src_image, dtype=np.float64), H.numpy())
    ones = warp_image(np.ones((1, S, S)), H.numpy())[0]
    mask = ndimage.binary_erosion(ones > 1 - 1e-9, iterations=erode)
    mask[:erode] = mask[-erode:] = False
    mask[:, :erode] = mask[:, -erode:] = False
    return aligned, mask


def sobel_edges(image, threshold=0.1):
    lum = 0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2]
    mag = np.hypot(ndimage.sobel(lum, axis=0), ndimage.sobel(lum, axis=1))
    return mag > threshold


# One (criterion, passed, summary) entry per acceptance criterion, printed at session end.
ACCEPTANCE = []


def record_criterion(number, title, passed, detail):
    ACCEPTANCE.append((number, title, bool(passed), detail))
    print(f"{'PASS' if passed else 'FAIL'}  criterion {number}  {title}: {detail}")
    assert passed, f"criterion {number} ({title}) failed: {detail}"
