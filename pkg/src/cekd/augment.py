"""MixUp, CutMix and SnapMix mixing of image pairs with dual label weights."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .numerics import RngStream, sample_beta


class MixKind(str, enum.Enum):
    MIXUP = "mixup"
    CUTMIX = "cutmix"
    SNAPMIX = "snapmix"


@dataclass(frozen=True)
class MixMethod:
    kind: MixKind
    alpha: float
    apply_prob: float

    def __post_init__(self):
        object.__setattr__(self, "kind", MixKind(self.kind))
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not 0.0 <= self.apply_prob <= 1.0:
            raise ValueError(f"apply_prob must lie in [0, 1], got {self.apply_prob}")

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "alpha": self.alpha, "apply_prob": self.apply_prob}


@dataclass(frozen=True)
class BoxMask:
    """Half-open pixel box ``[y0, y1) x [x0, x1)`` on an ``H x W`` grid."""

    y0: int
    x0: int
    y1: int
    x1: int
    height: int
    width: int

    def __post_init__(self):
        if not (0 <= self.y0 <= self.y1 <= self.height and 0 <= self.x0 <= self.x1 <= self.width):
            raise ValueError(f"box out of bounds: {self}")

    @property
    def area(self) -> int:
        return (self.y1 - self.y0) * (self.x1 - self.x0)

    @property
    def lam_eff(self) -> float:
        return self.area / (self.height * self.width)

    @property
    def empty(self) -> bool:
        return self.area == 0

    def mask(self) -> np.ndarray:
        m = np.zeros((self.height, self.width))
        m[self.y0 : self.y1, self.x0 : self.x1] = 1.0
        return m


@dataclass
class MixedSample:
    image: np.ndarray
    label_a: int
    label_b: int
    w_a: float
    w_b: float
    method: MixKind | None
    lam: float | None = None


@dataclass
class MixedBatch:
    """Mixed images ``[N, C, H, W]`` with per-sample dual labels and weights.

    ``perm[i]`` is the partner of sample ``i``; ``mixed[i]`` says whether the
    pair was actually mixed or passed through. ``lam`` holds the Beta draw
    (``nan`` where nothing was drawn).
    """

    images: np.ndarray
    label_a: np.ndarray
    label_b: np.ndarray
    w_a: np.ndarray
    w_b: np.ndarray
    method: MixKind
    perm: np.ndarray
    mixed: np.ndarray
    lam: np.ndarray = field(default=None)

    def __len__(self) -> int:
        return len(self.label_a)


def _check_pair(xa: np.ndarray, xb: np.ndarray) -> None:
    if xa.shape != xb.shape:
        raise ValueError(f"image shape mismatch: {xa.shape} vs {xb.shape}")


def mixup(xa, xb, lam: float) -> MixedSample:
    xa = np.asarray(xa, dtype=np.float64)
    xb = np.asarray(xb, dtype=np.float64)
    _check_pair(xa, xb)
    image = lam * xa + (1.0 - lam) * xb
    return MixedSample(image, -1, -1, float(lam), float(1.0 - lam), MixKind.MIXUP, float(lam))


def sample_box(
    height: int,
    width: int,
    lam: float,
    rng: RngStream | None = None,
    center: tuple[int, int] | None = None,
) -> BoxMask:
    """Box with sides ``round(H*sqrt(lam)) x round(W*sqrt(lam))`` and a uniform center.

    The box is clipped to the image. An axis whose side covers the whole
    extent spans that axis regardless of the center, so ``lam=1`` always
    yields the full image.
    """
    if height < 1 or width < 1:
        raise ValueError("image extents must be positive")
    lam = min(max(float(lam), 0.0), 1.0)
    cut = math.sqrt(lam)
    bh = int(round(height * cut))
    bw = int(round(width * cut))
    if bh == 0 or bw == 0:
        return BoxMask(0, 0, 0, 0, height, width)
    if center is None:
        if rng is None:
            raise ValueError("either rng or center is required")
        cy = int(rng.integers(0, height))
        cx = int(rng.integers(0, width))
    else:
        cy, cx = center
    y0, y1 = _span(cy, bh, height)
    x0, x1 = _span(cx, bw, width)
    return BoxMask(y0, x0, y1, x1, height, width)


def _span(c: int, side: int, extent: int) -> tuple[int, int]:
    if side >= extent:
        return 0, extent
    lo = c - side // 2
    return max(lo, 0), min(lo + side, extent)


def cutmix(xa, xb, box: BoxMask) -> MixedSample:
    xa = np.asarray(xa, dtype=np.float64)
    xb = np.asarray(xb, dtype=np.float64)
    _check_pair(xa, xb)
    if xa.shape[-2:] != (box.height, box.width):
        raise ValueError("box grid does not match image size")
    image = xa.copy()
    image[..., box.y0 : box.y1, box.x0 : box.x1] = xb[..., box.y0 : box.y1, box.x0 : box.x1]
    lam = box.lam_eff
    return MixedSample(image, -1, -1, 1.0 - lam, lam, MixKind.CUTMIX, lam)


def semantic_map(cam) -> np.ndarray:
    """Clamp a CAM at zero and normalize it to unit mass (uniform if all mass clamps away)."""
    cam = np.maximum(np.asarray(cam, dtype=np.float64), 0.0)
    total = cam.sum()
    if total <= 0:
        return np.full(cam.shape, 1.0 / cam.size)
    return cam / total


def region_transform(region, target_h: int, target_w: int) -> np.ndarray:
    """Bilinear resize of ``[..., h, w]`` with corner-aligned sampling."""
    region = np.asarray(region, dtype=np.float64)
    h, w = region.shape[-2:]
    if min(h, w, target_h, target_w) < 1:
        raise ValueError("region and target sizes must be positive")
    if (h, w) == (target_h, target_w):
        return region.copy()
    ys = _sample_coords(h, target_h)
    xs = _sample_coords(w, target_w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = region[..., y0[:, None], x0[None, :]] * (1 - fx) + region[..., y0[:, None], x1[None, :]] * fx
    bot = region[..., y1[:, None], x0[None, :]] * (1 - fx) + region[..., y1[:, None], x1[None, :]] * fx
    return top * (1 - fy) + bot * fy


def _sample_coords(n_in: int, n_out: int) -> np.ndarray:
    if n_out == 1 or n_in == 1:
        return np.zeros(n_out)
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


def snapmix_with_boxes(xa, xb, sa, sb, box_a: BoxMask, box_b: BoxMask) -> MixedSample:
    """SnapMix for fixed boxes: paste ``xb[box_b]`` resized into ``xa[box_a]``.

    When either box is empty nothing is pasted and the sample keeps
    ``(w_a, w_b) = (1, 0)``.
    """
    xa = np.asarray(xa, dtype=np.float64)
    xb = np.asarray(xb, dtype=np.float64)
    _check_pair(xa, xb)
    sa = np.asarray(sa, dtype=np.float64)
    sb = np.asarray(sb, dtype=np.float64)
    if sa.shape != xa.shape[-2:] or sb.shape != xb.shape[-2:]:
        raise ValueError("semantic maps must match the image grid")
    if box_a.empty or box_b.empty:
        return MixedSample(xa.copy(), -1, -1, 1.0, 0.0, MixKind.SNAPMIX)
    image = xa.copy()
    patch = xb[..., box_b.y0 : box_b.y1, box_b.x0 : box_b.x1]
    hh = box_a.y1 - box_a.y0
    ww = box_a.x1 - box_a.x0
    image[..., box_a.y0 : box_a.y1, box_a.x0 : box_a.x1] = region_transform(patch, hh, ww)
    w_a = 1.0 - float(sa[box_a.y0 : box_a.y1, box_a.x0 : box_a.x1].sum())
    w_b = float(sb[box_b.y0 : box_b.y1, box_b.x0 : box_b.x1].sum())
    # round-off can push the mass sums a hair past the unit interval
    w_a = min(max(w_a, 0.0), 1.0)
    w_b = min(max(w_b, 0.0), 1.0)
    return MixedSample(image, -1, -1, w_a, w_b, MixKind.SNAPMIX)


def snapmix(xa, xb, sa, sb, rng: RngStream, alpha: float) -> MixedSample:
    xa = np.asarray(xa, dtype=np.float64)
    _check_pair(xa, np.asarray(xb))
    h, w = xa.shape[-2:]
    lam_a = sample_beta(alpha, rng)
    lam_b = sample_beta(alpha, rng)
    box_a = sample_box(h, w, lam_a, rng)
    box_b = sample_box(h, w, lam_b, rng)
    out = snapmix_with_boxes(xa, xb, sa, sb, box_a, box_b)
    out.lam = lam_a
    return out


# (images [N,C,H,W], labels [N]) -> CAMs at image resolution [N,H,W]
CamProvider = Callable[[np.ndarray, np.ndarray], np.ndarray]


def pairing(n: int, rng: RngStream) -> np.ndarray:
    """Uniform random partner permutation for a batch of ``n`` samples."""
    if n < 1:
        raise ValueError("batch must not be empty")
    return rng.child("perm").permutation(n)


def apply_augmentation(
    images,
    labels,
    method: MixMethod,
    rng: RngStream,
    cam_provider: CamProvider | None = None,
    perm: np.ndarray | None = None,
) -> MixedBatch:
    """Mix every sample ``i`` with its partner ``perm[i]``.

    Each sample draws from its own child stream, so the result does not
    depend on processing order. Pass the ``perm`` of an earlier batch to mix
    exactly the same pairs with another method. ``cam_provider`` is called at
    most once per batch and is required for SnapMix.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if n < 1 or images.shape[0] != n:
        raise ValueError("images and labels must be non-empty and aligned")
    if method.kind is MixKind.SNAPMIX and cam_provider is None:
        raise ValueError("SnapMix requires a cam_provider")
    if perm is None:
        perm = pairing(n, rng)
    perm = np.asarray(perm, dtype=np.int64)

    out = images.copy()
    w_a = np.ones(n)
    w_b = np.zeros(n)
    lam = np.full(n, np.nan)
    mixed = np.zeros(n, dtype=bool)
    sem: list[np.ndarray] = []

    def semantic(i: int) -> np.ndarray:
        if not sem:
            cams = np.asarray(cam_provider(images, labels), dtype=np.float64)
            if cams.shape != (n,) + images.shape[-2:]:
                raise ValueError(f"cam_provider returned shape {cams.shape}")
            sem.extend(semantic_map(c) for c in cams)
        return sem[i]

    for i in range(n):
        srng = rng.child("sample", i)
        if srng.uniform() >= method.apply_prob:
            continue
        j = int(perm[i])
        xa, xb = images[i], images[j]
        if method.kind is MixKind.MIXUP:
            s = mixup(xa, xb, sample_beta(method.alpha, srng))
        elif method.kind is MixKind.CUTMIX:
            box = sample_box(xa.shape[-2], xa.shape[-1], sample_beta(method.alpha, srng), srng)
            s = cutmix(xa, xb, box)
        else:
            s = snapmix(xa, xb, semantic(i), semantic(j), srng, method.alpha)
        out[i] = s.image
        w_a[i], w_b[i] = s.w_a, s.w_b
        lam[i] = np.nan if s.lam is None else s.lam
        mixed[i] = True

    label_b = np.where(mixed, labels[perm], labels)
    return MixedBatch(out, labels.copy(), label_b, w_a, w_b, method.kind, perm, mixed, lam)
