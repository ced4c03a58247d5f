"""Synthetic multi-modal phantoms, normalization, bucketing, patch sampling and
the DL3D volume container."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    DimensionOverflowError,
    FormatError,
    NonFiniteError,
    ShapeError,
    TruncatedFileError,
    VersionMismatchError,
)

MODALITIES = ("T1", "T1ce", "T2", "FLAIR")
CLASSES = ("BG", "NCR", "ED", "ET")
BG, NCR, ED, ET = range(4)
TUMOR_CLASSES = (NCR, ED, ET)

# mean intensity per class, columns T1, T1ce, T2, FLAIR; BG is healthy tissue
CONTRAST = np.array([
    [0.4, 0.4, 0.4, 0.4],
    [0.2, 0.15, 0.6, 0.5],
    [0.45, 0.4, 0.7, 0.9],
    [0.5, 0.9, 0.55, 0.6],
])
NOISE_STD = 0.05

MAGIC = b"DL3D"
VERSION = 1
_HEADER = struct.Struct("<5I")
_MAX_ELEMENTS = 2 ** 31


def fnv1a_64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h = ((h ^ b) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def scanner_bucket(case_id: str, num_buckets: int = 8) -> int:
    """Proxy scanner id: 64-bit FNV-1a of the UTF-8 id, modulo ``num_buckets``."""
    if num_buckets < 1:
        raise ValueError("num_buckets must be >= 1")
    return fnv1a_64(case_id.encode("utf-8")) % num_buckets


@dataclass
class CaseRecord:
    case_id: str
    image: np.ndarray  # [4, D, H, W] float64
    labels: np.ndarray  # [D, H, W] uint8 in {0..3}
    num_buckets: int = 8

    def __post_init__(self):
        if self.image.shape[1:] != self.labels.shape:
            raise ShapeError(f"image {self.image.shape} and labels {self.labels.shape} disagree")

    @property
    def bucket(self) -> int:
        return scanner_bucket(self.case_id, self.num_buckets)

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.labels.shape


@dataclass
class PatchSample:
    image: np.ndarray  # [4, p, p, p], normalized
    labels: np.ndarray  # [p, p, p]
    bucket: int
    case_id: str
    origin: tuple[int, int, int] = field(default=(0, 0, 0))


def zscore_normalize(image: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Per-modality z-score over strictly positive voxels; the rest become 0."""
    if not np.isfinite(image).all():
        raise NonFiniteError("image contains NaN or Inf intensities")
    out = np.zeros_like(image, dtype=np.float64)
    for m in range(image.shape[0]):
        ch = image[m]
        fg = ch > 0
        if not fg.any():
            continue
        vals = ch[fg]
        mu, sigma = vals.mean(), vals.std()
        out[m][fg] = (vals - mu) / (sigma + eps)
    return out


def phantom_rng(seed: int, case_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, fnv1a_64(case_id.encode("utf-8"))])


def generate_phantom(rng: np.random.Generator, extents=(32, 32, 32), case_id: str = "case_000",
                     num_buckets: int = 8) -> CaseRecord:
    """Brain-like ellipsoid holding an edema ellipsoid, an enhancing shell and a
    necrotic core, imaged in four modalities with Gaussian noise."""
    extents = tuple(int(e) for e in extents)
    if len(extents) != 3 or min(extents) < 16:
        raise ShapeError(f"phantom extents must be >= 16 per axis, got {extents}")
    ext = np.array(extents, dtype=float)
    grid = np.stack(np.meshgrid(*[np.arange(n, dtype=float) for n in extents], indexing="ij"))

    brain_c = ext / 2 - 0.5 + rng.uniform(-0.04, 0.04, 3) * ext
    brain_r = ext * rng.uniform(0.38, 0.45, 3)
    brain = _ellipsoid_radius(grid, brain_c, brain_r) <= 1.0

    tumor_r = ext * rng.uniform(0.2, 0.26, 3)
    slack = np.maximum(brain_r - tumor_r - 1.0, 0.0) * 0.5
    tumor_c = brain_c + rng.uniform(-1.0, 1.0, 3) * slack
    rho = _ellipsoid_radius(grid, tumor_c, tumor_r)
    et_outer = rng.uniform(0.58, 0.66)
    ncr_outer = rng.uniform(0.3, 0.36)

    labels = np.zeros(extents, dtype=np.uint8)
    labels[rho <= 1.0] = ED
    labels[rho <= et_outer] = ET
    labels[rho <= ncr_outer] = NCR
    labels[~brain] = BG

    image = np.zeros((4,) + extents)
    for cls in range(4):
        mask = (labels == cls) & brain
        image[:, mask] = CONTRAST[cls][:, None]
    image[:, brain] += rng.normal(0.0, NOISE_STD, size=(4, int(brain.sum())))
    # stored precision is float32; keep the in-memory record exactly representable
    image = image.astype(np.float32).astype(np.float64)
    return CaseRecord(case_id, image, labels, num_buckets)


def _ellipsoid_radius(grid, center, radii):
    return np.sqrt(sum(((grid[i] - center[i]) / radii[i]) ** 2 for i in range(3)))


def sample_patch(case: CaseRecord, p: int, rng: np.random.Generator, tumor_bias: float = 0.8,
                 normalized: np.ndarray | None = None) -> PatchSample:
    """Crop a ``p^3`` patch, centred on a random tumor voxel with probability
    ``tumor_bias`` and uniform otherwise. ``normalized`` may carry a cached
    ``zscore_normalize(case.image)``."""
    ext = np.array(case.extents)
    if (ext < p).any():
        raise ShapeError(f"patch {p} larger than volume {tuple(ext)}")
    hi = ext - p
    use_tumor = rng.random() < tumor_bias
    tumor = np.argwhere(case.labels != BG) if use_tumor else None
    if use_tumor and len(tumor):
        center = tumor[rng.integers(len(tumor))]
        origin = np.clip(center - p // 2, 0, hi)
    else:
        origin = np.array([rng.integers(0, h + 1) for h in hi])
    img = zscore_normalize(case.image) if normalized is None else normalized
    d, h, w = (int(v) for v in origin)
    return PatchSample(
        image=img[:, d:d + p, h:h + p, w:w + p].copy(),
        labels=case.labels[d:d + p, h:h + p, w:w + p].copy(),
        bucket=case.bucket,
        case_id=case.case_id,
        origin=(d, h, w),
    )


def flip(sample: PatchSample, axes) -> PatchSample:
    axes = tuple(axes)
    if not axes:
        return PatchSample(sample.image.copy(), sample.labels.copy(), sample.bucket, sample.case_id, sample.origin)
    return PatchSample(
        np.flip(sample.image, axis=tuple(a + 1 for a in axes)).copy(),
        np.flip(sample.labels, axis=axes).copy(),
        sample.bucket, sample.case_id, sample.origin,
    )


def augment(sample: PatchSample, rng: np.random.Generator, flip_prob: float = 0.5,
            scale_range=(0.9, 1.1), shift_range=(-0.1, 0.1)) -> PatchSample:
    """Random per-axis flips (image and labels) and per-modality ``a*x + b`` (image only)."""
    axes = [a for a, u in enumerate(rng.random(3)) if u < flip_prob]
    out = flip(sample, axes)
    m = out.image.shape[0]
    a = rng.uniform(scale_range[0], scale_range[1], m)
    b = rng.uniform(shift_range[0], shift_range[1], m)
    out.image = out.image * a[:, None, None, None] + b[:, None, None, None]
    return out


# ---------------------------------------------------------------------------
# DL3D container


def write_case(path, case: CaseRecord) -> None:
    path = Path(path)
    cid = case.case_id.encode("utf-8")
    c, d, h, w = case.image.shape
    with open(path, "wb") as f:
        f.write(MAGIC + bytes([VERSION]))
        f.write(_HEADER.pack(c, d, h, w, len(cid)))
        f.write(cid)
        f.write(np.ascontiguousarray(case.image, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(case.labels, dtype=np.uint8).tobytes())


def read_case(path, num_buckets: int = 8) -> CaseRecord:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 5:
        raise TruncatedFileError("header", 5, len(raw))
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if raw[4] != VERSION:
        raise VersionMismatchError(f"{path}: version {raw[4]}, expected {VERSION}")
    pos = 5
    if len(raw) < pos + _HEADER.size:
        raise TruncatedFileError("header", pos + _HEADER.size, len(raw))
    c, d, h, w, id_len = _HEADER.unpack_from(raw, pos)
    pos += _HEADER.size
    n_vox = d * h * w
    if min(c, d, h, w) < 1 or c * n_vox > _MAX_ELEMENTS:
        raise DimensionOverflowError(f"{path}: implausible dimensions {(c, d, h, w)}")
    expected = pos + id_len + 4 * c * n_vox + n_vox
    if len(raw) < expected:
        raise TruncatedFileError("payload", expected, len(raw))
    try:
        cid = raw[pos:pos + id_len].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: case id is not valid UTF-8") from exc
    pos += id_len
    image = np.frombuffer(raw, dtype="<f4", count=c * n_vox, offset=pos).reshape(c, d, h, w)
    pos += 4 * c * n_vox
    labels = np.frombuffer(raw, dtype=np.uint8, count=n_vox, offset=pos).reshape(d, h, w)
    if labels.max() > ET:
        raise FormatError(f"{path}: label value {int(labels.max())} outside 0..{ET}")
    return CaseRecord(cid, image.astype(np.float64), labels.copy(), num_buckets)


def load_cases(root, num_buckets: int = 8) -> list[CaseRecord]:
    """Every ``<root>/<case_id>.dl3d`` in sorted filename order."""
    files = sorted(Path(root).glob("*.dl3d"))
    return [read_case(f, num_buckets) for f in files]
