"""MACE evaluation, report files, comparison tables and overlay images."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from .dataset import DatasetError, SampleDataset, SampleIOError, read_gt
from .geometry import apply_homography, mace, offsets_to_homography, scale_offsets, square_corners
from .render import load_image
from .synthesis import TrainingSample

PROTOCOLS = ("within", "cross", "zero-shot")


@dataclass
class EvalReport:
    dataset_id: str
    count: int
    mean_mace: float
    median_mace: float
    per_sample: list
    checkpoint_id: str | None = None
    protocol: str = "within"

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if self.count != len(self.per_sample):
            raise ValueError("count does not match the per-sample list")
        if self.per_sample and abs(self.mean_mace - math.fsum(self.per_sample) / self.count) > 1e-9:
            raise ValueError("mean does not match the per-sample list")

    @classmethod
    def from_errors(cls, errors, dataset_id: str, checkpoint_id=None, protocol="within") -> "EvalReport":
        errors = [float(e) for e in errors]
        n = len(errors)
        mean = math.fsum(errors) / n if n else float("nan")
        median = statistics.median(errors) if n else float("nan")
        return cls(dataset_id, n, mean, median, errors, checkpoint_id, protocol)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1))
        return path

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


# -- predictors -------------------------------------------------------------

class ZeroPredictor:
    """Always predicts the identity warp."""

    def __call__(self, src, tar):
        return torch.zeros(src.shape[0], 4, 2, dtype=torch.float64)


class OraclePredictor:
    """Returns the ground truth, looked up by the bytes of the source image."""

    def __init__(self, samples):
        self._table = {self._key(np.asarray(s.src_image, dtype=np.float32)): np.asarray(s.gt_offsets, dtype=np.float64)
                       for s in samples}

    @staticmethod
    def _key(image: np.ndarray) -> str:
        return hashlib.sha256(np.ascontiguousarray(image).tobytes()).hexdigest()

    def __call__(self, src, tar):
        imgs = src.detach().cpu().numpy().astype(np.float32)
        return torch.from_numpy(np.stack([self._table[self._key(im)] for im in imgs]))


# -- pair lists -------------------------------------------------------------

@dataclass
class PairRecord:
    src_path: Path
    tar_path: Path
    gt_path: Path
    tags: list = field(default_factory=list)


def crop_offsets(offsets, full_w: int, full_h: int, x0: int, y0: int, size: int) -> np.ndarray:
    """Re-express full-frame corner offsets for a ``size`` crop at (x0, y0) of both images."""
    H = offsets_to_homography(square_corners(full_w, full_h), torch.as_tensor(offsets, dtype=torch.float64))
    corners = square_corners(size)
    shift = torch.tensor([x0, y0], dtype=torch.float64)
    moved = apply_homography(H, corners + shift) - shift
    return (moved - corners).numpy()


class PairListDataset:
    """External pairs listed in a CSV with ``src_path, tar_path, gt_json_path[, tag]`` columns.

    Relative paths resolve against the CSV's directory. Each gt JSON holds
    ``{"offsets": [[dx, dy] x 4]}`` for the full images. Images larger than
    ``size`` are centre-cropped and the offsets re-expressed for the crop;
    with ``resize=True`` square images are instead resized and the offsets
    scaled by the same factor.
    """

    def __init__(self, csv_path, size: int, resize: bool = False):
        self.csv_path = Path(csv_path)
        self.size = size
        self.resize = resize
        base = self.csv_path.parent
        try:
            rows = list(csv.reader(self.csv_path.read_text().splitlines()))
        except OSError as exc:
            raise SampleIOError(f"cannot read pair list {csv_path}: {exc}") from exc
        if rows and rows[0][:3] == ["src_path", "tar_path", "gt_json_path"]:
            rows = rows[1:]
        self.records = []
        for n, row in enumerate(rows):
            if not row or not "".join(row).strip():
                continue
            if len(row) < 3:
                raise DatasetError(f"{csv_path} row {n}: expected at least 3 columns")
            paths = [base / p.strip() for p in row[:3]]
            for p in paths:
                if not p.is_file():
                    raise SampleIOError(f"{csv_path} row {n}: missing {p}")
            self.records.append(PairRecord(*paths, tags=[t.strip() for t in row[3:]]))

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i: int) -> TrainingSample:
        rec = self.records[i]
        src, tar = load_image(rec.src_path), load_image(rec.tar_path)
        offsets = np.asarray(read_gt(rec.gt_path)["offsets"], dtype=np.float64)
        if src.shape != tar.shape:
            raise DatasetError(f"pair {i}: source {src.shape[1:]} and target {tar.shape[1:]} differ")
        _, h, w = src.shape
        S = self.size
        if self.resize:
            if h != w:
                raise DatasetError(f"pair {i}: resizing needs square images, got {h}x{w}")
            src, tar = (_resize(im, S) for im in (src, tar))
            offsets = scale_offsets(offsets, S / w).numpy()
        elif (h, w) != (S, S):
            if h < S or w < S:
                raise DatasetError(f"pair {i}: {h}x{w} is smaller than {S}x{S}; pass resize to rescale")
            x0, y0 = (w - S) // 2, (h - S) // 2
            offsets = crop_offsets(offsets, w, h, x0, y0, S)
            src, tar = (im[:, y0:y0 + S, x0:x0 + S] for im in (src, tar))
        return TrainingSample(src.astype(np.float32), tar.astype(np.float32), offsets,
                              {"pair": i, "tags": rec.tags})


def _resize(image: np.ndarray, size: int) -> np.ndarray:
    arr = np.clip(np.rint(image.transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    out = Image.fromarray(arr).resize((size, size), Image.BILINEAR)
    return np.asarray(out, dtype=np.float64).transpose(2, 0, 1) / 255.0


def open_data(data, size: int | None = None, resize: bool = False):
    """A dataset directory, a pair-list CSV, or an in-memory sample sequence."""
    if isinstance(data, (str, Path)):
        path = Path(data)
        if path.suffix.lower() == ".csv":
            if size is None:
                raise ValueError("pair lists need an explicit image size")
            return PairListDataset(path, size, resize=resize)
        return SampleDataset(path)
    return data


# -- evaluation -------------------------------------------------------------

def as_predictor(model):
    """Accepts a checkpoint path, a CCNet, or any ``(src, tar) -> offsets`` callable."""
    from .model import CCNet
    from .training import load_model

    if isinstance(model, (str, Path)):
        model = load_model(model)
    if isinstance(model, CCNet):
        model.eval()
        return model.predict
    return model


def _device_of(predictor):
    owner = getattr(predictor, "__self__", None)
    if isinstance(owner, torch.nn.Module):
        return next(owner.parameters()).device
    return torch.device("cpu")


def evaluate(model, data, protocol: str = "within", dataset_id: str | None = None,
             checkpoint_id: str | None = None, batch_size: int = 16, size: int | None = None,
             resize: bool = False) -> EvalReport:
    """Mean corner error of the final estimate over every pair of ``data``.

    Any unreadable pair aborts the run with its index in the message.
    """
    if isinstance(model, (str, Path)) and checkpoint_id is None:
        checkpoint_id = str(model)
    if dataset_id is None:
        dataset_id = str(data) if isinstance(data, (str, Path)) else "in-memory"
    if size is None and not isinstance(model, (str, Path)) and hasattr(model, "image_size"):
        size = model.image_size
    predictor = as_predictor(model)
    if size is None and hasattr(predictor, "__self__"):
        size = getattr(predictor.__self__, "image_size", None)
    dataset = open_data(data, size=size, resize=resize)

    errors = []
    for start in range(0, len(dataset), batch_size):
        batch = []
        for i in range(start, min(start + batch_size, len(dataset))):
            try:
                batch.append(dataset[i])
            except (DatasetError, OSError) as exc:
                raise DatasetError(f"pair {i}: {exc}") from exc
        src = torch.from_numpy(np.stack([s.src_image for s in batch]).astype(np.float32))
        tar = torch.from_numpy(np.stack([s.tar_image for s in batch]).astype(np.float32))
        gt = torch.from_numpy(np.stack([np.asarray(s.gt_offsets, dtype=np.float64) for s in batch]))
        device = _device_of(predictor)
        with torch.no_grad():
            pred = torch.as_tensor(predictor(src.to(device), tar.to(device))).cpu().to(torch.float64)
        errors.extend(mace(pred, gt).tolist())
    return EvalReport.from_errors(errors, dataset_id, checkpoint_id, protocol)


# -- comparison -------------------------------------------------------------

def compare_reports(reports) -> tuple[str, dict]:
    """Rows are (checkpoint, protocol), columns datasets, cells mean MACE; ``*`` marks the column best."""
    reports = list(reports)
    if not reports:
        raise ValueError("need at least one report")
    rows, cols = [], []
    cells = {}
    for r in reports:
        row = f"{r.checkpoint_id or '-'} [{r.protocol}]"
        if row not in rows:
            rows.append(row)
        if r.dataset_id not in cols:
            cols.append(r.dataset_id)
        cells[(row, r.dataset_id)] = r.mean_mace
    best = {}
    for c in cols:
        vals = [(cells[(r, c)], r) for r in rows if (r, c) in cells]
        best[c] = min(vals)[1]

    table = [["model"] + cols]
    for r in rows:
        line = [r]
        for c in cols:
            if (r, c) in cells:
                line.append(f"{cells[(r, c)]:.4f}" + ("*" if best[c] == r else ""))
            else:
                line.append("")
        table.append(line)
    widths = [max(len(line[k]) for line in table) for k in range(len(table[0]))]
    text = "\n".join("  ".join(v.ljust(wd) for v, wd in zip(line, widths)).rstrip() for line in table)
    machine = {
        "rows": rows,
        "columns": cols,
        "cells": [{"row": r, "column": c, "mean_mace": cells[(r, c)], "best": best[c] == r}
                  for r in rows for c in cols if (r, c) in cells],
        "reports": [x.to_dict() for x in reports],
    }
    return text, machine


def reports_from_comparison(machine: dict) -> list:
    return [EvalReport.from_dict(d) for d in machine["reports"]]


# -- visualization ----------------------------------------------------------

GT_COLOR = (0, 255, 0)
PRED_COLOR = (255, 0, 0)


def quad(offsets, size: int, margin: int = 0) -> list:
    """Target-frame positions of the source corners, shifted by ``margin``."""
    pts = square_corners(size).numpy() + np.asarray(offsets, dtype=np.float64) + margin
    return [tuple(p) for p in pts]


def overlay(tar, gt, pred, margin: int = 0, width: int = 2) -> Image.Image:
    tar = np.asarray(tar, dtype=np.float64)
    size = tar.shape[-1]
    arr = np.clip(np.rint(tar.transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    canvas = Image.new("RGB", (arr.shape[1] + 2 * margin, arr.shape[0] + 2 * margin))
    canvas.paste(Image.fromarray(arr), (margin, margin))
    draw = ImageDraw.Draw(canvas)
    for offsets, color in ((gt, GT_COLOR), (pred, PRED_COLOR)):
        pts = quad(offsets, size, margin)
        draw.line(pts + pts[:1], fill=color, width=width)
    return canvas


def visualize_pair(src, tar, gt, pred, out_path, margin: int = 0, width: int = 2) -> Path:
    """Write the target image with the ground-truth quad (green) and the prediction (red).

    The predicted quad is drawn last, so where the two coincide it is red.
    ``src`` is accepted for symmetry with the data records but not drawn.
    """
    out_path = Path(out_path)
    try:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        overlay(tar, gt, pred, margin, width).save(out_path)
    except OSError as exc:
        raise SampleIOError(f"cannot write {out_path}: {exc}") from exc
    return out_path


def visualize_batch(model, data, out_dir, limit: int | None = None, margin: int = 0,
                    size: int | None = None) -> list:
    """One overlay per pair, named ``pair_000000.png`` etc. by index."""
    predictor = as_predictor(model)
    if size is None and hasattr(predictor, "__self__"):
        size = getattr(predictor.__self__, "image_size", None)
    dataset = open_data(data, size=size)
    n = len(dataset) if limit is None else min(limit, len(dataset))
    paths = []
    for i in range(n):
        s = dataset[i]
        src = torch.from_numpy(np.asarray(s.src_image, dtype=np.float32))[None]
        tar = torch.from_numpy(np.asarray(s.tar_image, dtype=np.float32))[None]
        device = _device_of(predictor)
        with torch.no_grad():
            pred = torch.as_tensor(predictor(src.to(device), tar.to(device)))[0].cpu().numpy()
        paths.append(visualize_pair(s.src_image, s.tar_image, s.gt_offsets, pred,
                                    Path(out_dir) / f"pair_{i:06d}.png", margin=margin))
    return paths
