"""On-disk dataset layout.

::

    root/manifest.json
    root/sample_000000/src.png
    root/sample_000000/tar.png
    root/sample_000000/gt.json

``gt.json`` holds the offsets (TL, TR, BR, BL), the patch size, the
provenance record and SHA-256 digests of both PNGs.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import shutil
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from .synthesis import SynthConfig, TrainingSample, config_dict, make_sample

FORMAT_VERSION = "1"
MANIFEST = "manifest.json"


class DatasetError(Exception):
    pass


class SampleIOError(DatasetError, OSError):
    pass


class CorruptSample(DatasetError):
    pass


class FormatVersionMismatch(DatasetError):
    pass


def sample_dir(root, index: int) -> Path:
    return Path(root) / f"sample_{index:06d}"


def _png_bytes(image: np.ndarray) -> bytes:
    arr = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr.transpose(1, 2, 0)).save(buf, format="PNG")
    return buf.getvalue()


def _decode_png(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr.transpose(2, 0, 1) / 255.0


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def write_sample(sample: TrainingSample, root, index: int) -> Path:
    out = sample_dir(root, index)
    out.mkdir(parents=True, exist_ok=True)
    src = _png_bytes(sample.src_image)
    tar = _png_bytes(sample.tar_image)
    (out / "src.png").write_bytes(src)
    (out / "tar.png").write_bytes(tar)
    record = {
        "offsets": np.asarray(sample.gt_offsets).tolist(),
        "patch_size": sample.patch_size,
        "provenance": _jsonable(sample.provenance),
        "checksums": {
            "src.png": hashlib.sha256(src).hexdigest(),
            "tar.png": hashlib.sha256(tar).hexdigest(),
        },
    }
    (out / "gt.json").write_text(json.dumps(record, indent=1))
    return out


def read_gt(path) -> dict:
    try:
        record = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise SampleIOError(f"missing {path}") from exc
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptSample(f"unreadable {path}: {exc}") from exc
    offsets = np.asarray(record.get("offsets"), dtype=np.float64)
    if offsets.shape != (4, 2):
        raise CorruptSample(f"{path}: offsets must be 4 [dx, dy] pairs")
    return record


def read_sample(root, index: int) -> TrainingSample:
    root = Path(root)
    manifest = root / MANIFEST
    if manifest.exists():
        version = json.loads(manifest.read_text()).get("format_version")
        if version != FORMAT_VERSION:
            raise FormatVersionMismatch(f"dataset format {version!r}, expected {FORMAT_VERSION!r}")
    d = sample_dir(root, index)
    record = read_gt(d / "gt.json")
    images = {}
    for name in ("src.png", "tar.png"):
        try:
            data = (d / name).read_bytes()
        except FileNotFoundError as exc:
            raise SampleIOError(f"missing {d / name}") from exc
        expected = record.get("checksums", {}).get(name)
        if expected is not None and hashlib.sha256(data).hexdigest() != expected:
            raise CorruptSample(f"checksum mismatch for {d / name}")
        try:
            images[name] = _decode_png(data)
        except OSError as exc:
            raise CorruptSample(f"cannot decode {d / name}") from exc
    offsets = np.asarray(record["offsets"])
    if np.all(offsets == np.rint(offsets)):
        offsets = offsets.astype(np.int64)
    return TrainingSample(images["src.png"], images["tar.png"], offsets, record.get("provenance", {}))


def write_manifest(root, count: int, cfg: SynthConfig | None, extra: dict | None = None) -> Path:
    manifest = {
        "format_version": FORMAT_VERSION,
        "count": int(count),
        "synth_config": config_dict(cfg) if cfg is not None else None,
    }
    if extra:
        manifest.update(_jsonable(extra))
    path = Path(root) / MANIFEST
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(manifest, indent=1))
    os.replace(tmp, path)
    return path


def read_manifest(root) -> dict:
    path = Path(root) / MANIFEST
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise SampleIOError(f"no manifest at {path}") from exc
    except json.JSONDecodeError as exc:
        raise CorruptSample(f"unreadable manifest {path}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatVersionMismatch(
            f"dataset format {manifest.get('format_version')!r}, expected {FORMAT_VERSION!r}")
    return manifest


def _generate_range(args):
    root, indices, cfg, contents, templates, renderer = args
    for i in indices:
        write_sample(make_sample(i, cfg, contents, templates, renderer), root, i)
    return len(indices)


def generate_dataset(root, count: int, cfg: SynthConfig, contents, templates, renderer,
                     workers: int = 1, force: bool = False, extra: dict | None = None) -> dict:
    """Synthesize ``count`` samples into ``root`` and write the manifest last."""
    root = Path(root)
    if root.exists() and any(root.iterdir()):
        if not force:
            raise FileExistsError(f"{root} is not empty (use force to overwrite)")
        shutil.rmtree(root)
    root.mkdir(parents=True, exist_ok=True)
    indices = list(range(count))
    if workers <= 1 or count < 2:
        _generate_range((root, indices, cfg, contents, templates, renderer))
    else:
        chunks = [indices[k::workers] for k in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            list(pool.map(_generate_range, [(root, c, cfg, contents, templates, renderer) for c in chunks if c]))
    write_manifest(root, count, cfg, extra)
    return read_manifest(root)


def count_samples(root) -> int:
    """Number of sample directories that hold a readable ``gt.json``."""
    n = 0
    for d in sorted(Path(root).glob("sample_*")):
        try:
            read_gt(d / "gt.json")
        except DatasetError:
            continue
        n += 1
    return n


class SampleDataset:
    """Random access to a generated dataset; items are :class:`TrainingSample`."""

    def __init__(self, root):
        self.root = Path(root)
        self.manifest = read_manifest(self.root)
        self.count = int(self.manifest["count"])

    def __len__(self):
        return self.count

    def __getitem__(self, i: int) -> TrainingSample:
        if not 0 <= i < self.count:
            raise IndexError(i)
        return read_sample(self.root, i)
