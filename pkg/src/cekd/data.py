"""Synthetic fine-grained images, PGM/PPM I/O, splits and batch iteration.

Each class is a (base pattern, marker) pair. Classes sharing a base pattern
differ only in a small local marker, so the global structure carries little
class information.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .numerics import RngStream, derive_seed


class PNMError(ValueError):
    """Malformed binary PGM/PPM data; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 8
    samples_per_class: int = 160
    test_per_class: int = 40
    image_hw: int = 24
    channels: int = 1
    marker_size: int = 4
    noise_std: float = 0.12
    jitter: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if not 0 < self.test_per_class < self.samples_per_class:
            raise ValueError("test_per_class must lie strictly between 0 and samples_per_class")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        if not 0 < self.marker_size < self.image_hw / 2:
            raise ValueError("marker_size must be positive and below image_hw / 2")
        if self.noise_std < 0 or self.jitter < 0:
            raise ValueError("noise_std and jitter must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass
class SplitManifest:
    train_ids: list[str]
    test_ids: list[str]
    seed: int
    spec_hash: str

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] in [0, 1]
    labels: np.ndarray
    ids: list[str]
    num_classes: int
    seed: int = 0

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, ids) -> "Dataset":
        index = {k: i for i, k in enumerate(self.ids)}
        rows = np.array([index[k] for k in ids], dtype=np.int64)
        return Dataset(self.images[rows], self.labels[rows], list(ids), self.num_classes, self.seed)


# -- synthetic generation -------------------------------------------------


def _base_pattern(kind: int, hw: int) -> np.ndarray:
    yy, xx = np.mgrid[0:hw, 0:hw] + 0.5
    c = hw / 2.0
    r = np.hypot(yy - c, xx - c)
    kind %= 4
    if kind == 0:  # ring
        img = np.exp(-((r - hw * 0.3) ** 2) / (2 * (hw * 0.06) ** 2))
    elif kind == 1:  # plus
        band = hw * 0.08
        img = np.maximum(np.exp(-((yy - c) ** 2) / (2 * band**2)), np.exp(-((xx - c) ** 2) / (2 * band**2)))
    elif kind == 2:  # diagonal band
        img = np.exp(-((yy - xx) ** 2) / (2 * (hw * 0.1) ** 2))
    else:  # soft disk
        img = 1.0 / (1.0 + np.exp((r - hw * 0.3) / (hw * 0.03)))
    return 0.45 * img


def _marker(shape_idx: int, size: int) -> np.ndarray:
    m = np.zeros((size, size))
    mid = size // 2
    kind = shape_idx % 6
    if kind == 0:  # filled square
        m[:] = 1
    elif kind == 1:  # hollow square
        m[0, :] = m[-1, :] = m[:, 0] = m[:, -1] = 1
    elif kind == 2:  # plus
        m[mid, :] = m[:, mid] = 1
    elif kind == 3:  # x
        np.fill_diagonal(m, 1)
        np.fill_diagonal(np.fliplr(m), 1)
    elif kind == 4:  # horizontal bars
        m[0, :] = m[-1, :] = 1
    else:  # vertical bars
        m[:, 0] = m[:, -1] = 1
    return m


def class_layout(num_classes: int) -> list[tuple[int, int]]:
    """``(base pattern, marker shape)`` per class; classes are grouped four per base."""
    per_base = min(4, num_classes)
    return [(c // per_base, c % per_base + 2 * ((c // per_base) // 4)) for c in range(num_classes)]


def render_sample(spec: DatasetSpec, label: int, rng: RngStream | None) -> np.ndarray:
    hw, ms = spec.image_hw, spec.marker_size
    base_kind, marker_kind = class_layout(spec.num_classes)[label]
    canvas = _base_pattern(base_kind, hw)
    # marker sits in the upper-left quadrant of the base, away from the border
    y0 = x0 = max(1, int(round(hw * 0.28)) - ms // 2)
    canvas[y0 : y0 + ms, x0 : x0 + ms] = np.maximum(canvas[y0 : y0 + ms, x0 : x0 + ms], 0.9 * _marker(marker_kind, ms))
    img = np.repeat(canvas[None], spec.channels, axis=0)
    if spec.channels == 3:
        tint = np.array([1.0, 0.85, 0.7])[:, None, None]
        img = img * tint
    if rng is not None and spec.jitter > 0:
        dy, dx = rng.integers(-spec.jitter, spec.jitter + 1, size=2)
        img = _shift(img, int(dy), int(dx))
    if rng is not None and spec.noise_std > 0:
        img = img + rng.normal(0.0, spec.noise_std, img.shape)
    return np.clip(img, 0.0, 1.0)


def _shift(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(img)
    h, w = img.shape[-2:]
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[..., yd, xd] = img[..., ys, xs]
    return out


def generate_synthetic(spec: DatasetSpec) -> tuple[Dataset, SplitManifest]:
    root = RngStream(spec.seed)
    images, labels, ids = [], [], []
    train_ids, test_ids = [], []
    for c in range(spec.num_classes):
        order = root.child("split", c).permutation(spec.samples_per_class)
        test_slots = set(order[: spec.test_per_class].tolist())
        for i in range(spec.samples_per_class):
            sid = f"c{c:02d}_{i:04d}"
            use_rng = spec.noise_std > 0 or spec.jitter > 0
            images.append(render_sample(spec, c, root.child("sample", c, i) if use_rng else None))
            labels.append(c)
            ids.append(sid)
            (test_ids if i in test_slots else train_ids).append(sid)
    ds = Dataset(np.stack(images), np.array(labels, dtype=np.int64), ids, spec.num_classes, spec.seed)
    return ds, SplitManifest(train_ids, test_ids, spec.seed, spec.digest())


def nearest_centroid_accuracy(train: Dataset, test: Dataset) -> float:
    """Test accuracy of a raw-pixel nearest-centroid classifier."""
    flat_tr = train.images.reshape(len(train), -1)
    flat_te = test.images.reshape(len(test), -1)
    centroids = np.stack([flat_tr[train.labels == c].mean(axis=0) for c in range(train.num_classes)])
    d = ((flat_te[:, None, :] - centroids[None]) ** 2).sum(axis=-1)
    return float(np.mean(d.argmin(axis=1) == test.labels))


# -- PGM / PPM ------------------------------------------------------------


def encode_pnm(image) -> bytes:
    """Binary P5 (``[H,W]`` or ``[1,H,W]``) or P6 (``[3,H,W]``) with maxval 255."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"expected [H,W], [1,H,W] or [3,H,W], got {img.shape}")
    if np.any(img < 0) or np.any(img > 1) or not np.all(np.isfinite(img)):
        raise ValueError("pixel values must lie in [0, 1]")
    c, h, w = img.shape
    q = np.rint(img * 255.0).astype(np.uint8)
    magic = b"P5" if c == 1 else b"P6"
    header = magic + b"\n" + f"{w} {h}\n255\n".encode("ascii")
    return header + q.transpose(1, 2, 0).tobytes()


def decode_pnm(data: bytes) -> np.ndarray:
    """Parse binary PGM/PPM bytes into ``[C, H, W]`` floats in ``[0, 1]``."""
    pos = 0

    def skip_space():
        nonlocal pos
        while pos < len(data):
            ch = data[pos : pos + 1]
            if ch == b"#":
                while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            elif ch.isspace():
                pos += 1
            else:
                break

    def read_int(what: str) -> int:
        nonlocal pos
        skip_space()
        start = pos
        while pos < len(data) and data[pos : pos + 1].isdigit():
            pos += 1
        if pos == start:
            raise PNMError(f"expected {what}", start)
        return int(data[start:pos])

    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise PNMError(f"unsupported magic {magic!r}", 0)
    pos = 2
    channels = 1 if magic == b"P5" else 3
    width = read_int("width")
    height = read_int("height")
    if width < 1 or height < 1:
        raise PNMError("image extents must be positive", pos)
    skip_space()
    maxval_at = pos
    maxval = read_int("maxval")
    if maxval != 255:
        raise PNMError(f"only maxval 255 is supported, got {maxval}", maxval_at)
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise PNMError("missing whitespace after header", pos)
    pos += 1
    need = width * height * channels
    payload = data[pos : pos + need]
    if len(payload) < need:
        raise PNMError(f"truncated payload: expected {need} bytes, found {len(payload)}", pos + len(payload))
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_pgm(path, image) -> None:
    _atomic_write(path, encode_pnm(image))


def load_pgm(path) -> np.ndarray:
    return decode_pnm(Path(path).read_bytes())


save_ppm = save_pgm
load_ppm = load_pgm


def write_text_atomic(path, text: str) -> None:
    _atomic_write(path, text.encode("utf-8"))


# -- dataset directories --------------------------------------------------


def save_dataset(out_dir, dataset: Dataset, manifest: SplitManifest, spec: DatasetSpec | None = None) -> Path:
    """Write ``images/<id>.pgm``, ``labels.tsv`` and ``manifest.json``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    ext = "pgm" if dataset.images.shape[1] == 1 else "ppm"
    test = set(manifest.test_ids)
    rows = ["id\tclass\tsplit"]
    for img, label, sid in zip(dataset.images, dataset.labels, dataset.ids):
        save_pgm(out / "images" / f"{sid}.{ext}", img)
        rows.append(f"{sid}\t{int(label)}\t{'test' if sid in test else 'train'}")
    write_text_atomic(out / "labels.tsv", "\n".join(rows) + "\n")
    meta = {
        "spec": spec.to_dict() if spec is not None else None,
        "num_classes": dataset.num_classes,
        "seed": manifest.seed,
        "spec_hash": manifest.spec_hash,
        "train_ids": manifest.train_ids,
        "test_ids": manifest.test_ids,
    }
    write_text_atomic(out / "manifest.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out


def load_dataset(data_dir) -> tuple[Dataset, SplitManifest]:
    root = Path(data_dir)
    meta = json.loads((root / "manifest.json").read_text())
    lines = (root / "labels.tsv").read_text().splitlines()
    ids, labels = [], []
    for line in lines[1:]:
        if not line.strip():
            continue
        sid, cls, _split = line.split("\t")
        ids.append(sid)
        labels.append(int(cls))
    images = []
    for sid in ids:
        matches = [p for p in (root / "images" / f"{sid}.pgm", root / "images" / f"{sid}.ppm") if p.exists()]
        if not matches:
            raise FileNotFoundError(f"no image file for id {sid}")
        images.append(load_pgm(matches[0]))
    ds = Dataset(np.stack(images), np.array(labels, dtype=np.int64), ids, int(meta["num_classes"]), int(meta["seed"]))
    manifest = SplitManifest(list(meta["train_ids"]), list(meta["test_ids"]), int(meta["seed"]), meta["spec_hash"])
    return ds, manifest


def split(dataset: Dataset, manifest: SplitManifest) -> tuple[Dataset, Dataset]:
    return dataset.subset(manifest.train_ids), dataset.subset(manifest.test_ids)


# -- iteration and light transforms ---------------------------------------


def batch_iter(dataset: Dataset, batch_size: int, epoch: int, seed: int | None = None):
    """Yield index arrays over a shuffled epoch; a final batch under 2 samples is dropped."""
    if batch_size < 2:
        raise ValueError("batch_size must be at least 2 so every sample has a partner")
    base = dataset.seed if seed is None else seed
    order = RngStream(derive_seed(base, "epoch", epoch)).permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        chunk = order[start : start + batch_size]
        if len(chunk) < 2:
            break
        yield chunk


def flip_crop(image: np.ndarray, flip: bool, oy: int, ox: int, pad: int = 2) -> np.ndarray:
    """Optionally mirror left-right, zero-pad by ``pad`` and crop back at offset ``(oy, ox)``."""
    img = image[..., ::-1] if flip else image
    h, w = img.shape[-2:]
    padded = np.zeros(img.shape[:-2] + (h + 2 * pad, w + 2 * pad))
    padded[..., pad : pad + h, pad : pad + w] = img
    return padded[..., oy : oy + h, ox : ox + w].copy()


def basic_transforms(image, rng: RngStream, pad: int = 2) -> np.ndarray:
    """Random horizontal flip (p=0.5) and random crop under ``pad``-pixel zero padding."""
    image = np.asarray(image, dtype=np.float64)
    flip = bool(rng.uniform() < 0.5)
    oy, ox = (int(v) for v in rng.integers(0, 2 * pad + 1, size=2))
    return flip_crop(image, flip, oy, ox, pad)


def transform_batch(images: np.ndarray, rng: RngStream, pad: int = 2) -> np.ndarray:
    return np.stack([basic_transforms(img, rng.child("tf", i), pad) for i, img in enumerate(images)])
