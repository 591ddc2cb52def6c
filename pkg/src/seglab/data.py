"""Synthetic multi-class segmentation data.

Each sample mimics a short-axis cardiac frame: a bright inner disk (class 3,
"LV") inside a ring (class 2, "Myo"), with a detached crescent (class 1,
"RV") hugging the ring from outside, over a noisy smooth background.  The
geometry gives heavy class imbalance and thin boundaries, which is what the
losses in this stack are built to handle.

The on-disk format is a fixed little-endian header followed by float32
images and uint8 masks; round-trips are bit-exact.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"SEGDATA1"
VERSION = 1
CLASS_NAMES = {0: "background", 1: "RV", 2: "Myo", 3: "LV"}
N_CLASSES = 4

HEADER_STRUCT = struct.Struct("<8sIIIIIq")  # magic, version, count, H, W, classes, seed


class DatasetFormatError(Exception):
    """Base class for dataset file errors."""


class BadMagicError(DatasetFormatError):
    pass


class BadVersionError(DatasetFormatError):
    pass


class TruncatedPayloadError(DatasetFormatError):
    pass


class PayloadSizeMismatchError(DatasetFormatError):
    pass


class GeometryError(Exception):
    """Generator could not satisfy the mask invariants within the retry budget."""


@dataclass
class GeometryRanges:
    """Sampling ranges for the three structures, in pixels at a 64x64 frame."""

    lv_radius: tuple[float, float] = (4.0, 7.0)
    myo_thickness: tuple[float, float] = (2.5, 4.5)
    rv_radius: tuple[float, float] = (4.0, 7.0)
    rv_gap: float = 1.0          # clearance between ring outer edge and crescent
    rv_reach: tuple[float, float] = (0.1, 0.5)  # crescent center offset, in rv radii
    center_jitter: float = 4.0

    def max_extent(self) -> float:
        r_myo = self.lv_radius[1] + self.myo_thickness[1]
        return r_myo + self.rv_gap + self.rv_reach[1] * self.rv_radius[1] + self.rv_radius[1]

    def scaled(self, h: int, w: int) -> "GeometryRanges":
        f = min(h, w) / 64.0
        return GeometryRanges(
            lv_radius=(self.lv_radius[0] * f, self.lv_radius[1] * f),
            myo_thickness=(self.myo_thickness[0] * f, self.myo_thickness[1] * f),
            rv_radius=(self.rv_radius[0] * f, self.rv_radius[1] * f),
            rv_gap=self.rv_gap * f,
            rv_reach=self.rv_reach,
            center_jitter=self.center_jitter * f,
        )


@dataclass
class SegSample:
    image: np.ndarray  # (1, H, W) float32 in [0, 1]
    mask: np.ndarray   # (H, W) uint8 labels {0 bg, 1 RV, 2 Myo, 3 LV}


@dataclass
class DatasetHeader:
    count: int
    height: int
    width: int
    classes: int
    seed: int
    version: int = VERSION


NOISE_SIGMA = 0.05
CLASS_INTENSITY = (0.25, 0.55, 0.75, 0.95)  # bg, RV, Myo, LV mean levels
FIELD_AMPLITUDE = 0.06
MAX_RETRIES = 100


def _sample_geometry(rng, geo, h, w):
    cy = h / 2.0 + rng.uniform(-geo.center_jitter, geo.center_jitter)
    cx = w / 2.0 + rng.uniform(-geo.center_jitter, geo.center_jitter)
    r_lv = rng.uniform(*geo.lv_radius)
    r_myo = r_lv + rng.uniform(*geo.myo_thickness)
    r_rv = rng.uniform(*geo.rv_radius)
    reach = rng.uniform(*geo.rv_reach)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    r_cut = r_myo + geo.rv_gap
    d_rv = r_cut + reach * r_rv
    rv_cy = cy + d_rv * np.sin(angle)
    rv_cx = cx + d_rv * np.cos(angle)
    return cy, cx, r_lv, r_myo, r_rv, r_cut, rv_cy, rv_cx


def generate_sample(seed: int, geo: GeometryRanges | None = None, h: int = 64, w: int = 64) -> SegSample:
    """Deterministic sample for a seed; retries geometry until all four
    classes are present (raises GeometryError after 100 attempts)."""
    if h < 32 or w < 32:
        raise ValueError(f"image must be at least 32x32, got {h}x{w}")
    if geo is None:
        geo = GeometryRanges().scaled(h, w)
    if geo.max_extent() + geo.center_jitter > min(h, w) / 2.0:
        raise ValueError("geometry ranges do not fit inside the frame")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    for _ in range(MAX_RETRIES):
        cy, cx, r_lv, r_myo, r_rv, r_cut, rv_cy, rv_cx = _sample_geometry(rng, geo, h, w)
        dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        dist_rv = np.sqrt((yy - rv_cy) ** 2 + (xx - rv_cx) ** 2)
        mask = np.zeros((h, w), dtype=np.uint8)
        mask[(dist_rv <= r_rv) & (dist > r_cut)] = 1
        mask[(dist <= r_myo) & (dist > r_lv)] = 2
        mask[dist <= r_lv] = 3
        counts = np.bincount(mask.ravel(), minlength=N_CLASSES)
        if np.all(counts > 0):
            break
    else:
        raise GeometryError(f"no valid geometry for seed {seed} in {MAX_RETRIES} attempts")

    base = np.asarray(CLASS_INTENSITY, dtype=np.float64)[mask]
    field = np.zeros((h, w))
    for _ in range(3):
        fy = rng.uniform(0.5, 1.5) / h
        fx = rng.uniform(0.5, 1.5) / w
        phase = rng.uniform(0.0, 2.0 * np.pi)
        field += np.cos(2.0 * np.pi * (fy * yy + fx * xx) + phase)
    image = base + (FIELD_AMPLITUDE / 3.0) * field + rng.normal(0.0, NOISE_SIGMA, (h, w))
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return SegSample(image=image[None], mask=mask)


def generate_dataset(n: int, seed: int, geo: GeometryRanges | None = None,
                     h: int = 64, w: int = 64) -> list[SegSample]:
    """n samples with per-sample seeds spawned from one master seed."""
    seeds = np.random.SeedSequence(seed).generate_state(n)
    return [generate_sample(int(s), geo, h, w) for s in seeds]


# -- on-disk format ----------------------------------------------------------


def _sample_nbytes(h: int, w: int) -> int:
    return h * w * 4 + h * w


def write_dataset(samples: list[SegSample], path, seed: int = 0):
    if not samples:
        raise ValueError("refusing to write an empty dataset")
    _, h, w = samples[0].image.shape
    for s in samples:
        if s.image.shape != (1, h, w) or s.mask.shape != (h, w):
            raise ValueError("samples must share one shape")
        if s.image.dtype != np.float32 or s.mask.dtype != np.uint8:
            raise ValueError("image must be float32 and mask uint8")
    with open(path, "wb") as f:
        f.write(HEADER_STRUCT.pack(MAGIC, VERSION, len(samples), h, w, N_CLASSES, seed))
        for s in samples:
            f.write(np.ascontiguousarray(s.image, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(s.mask, dtype=np.uint8).tobytes())


def read_dataset(path) -> tuple[list[SegSample], DatasetHeader]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < HEADER_STRUCT.size:
        raise TruncatedPayloadError(f"file has {len(raw)} bytes, header needs {HEADER_STRUCT.size}")
    magic, version, count, h, w, classes, seed = HEADER_STRUCT.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise BadVersionError(f"unsupported version {version}")
    expected = HEADER_STRUCT.size + count * _sample_nbytes(h, w)
    if len(raw) < expected:
        raise TruncatedPayloadError(f"expected {expected} bytes, file has {len(raw)}")
    if len(raw) > expected:
        raise PayloadSizeMismatchError(
            f"header promises {expected} bytes but file has {len(raw)}"
        )
    samples = []
    buf = io.BytesIO(raw[HEADER_STRUCT.size:])
    img_bytes = h * w * 4
    for _ in range(count):
        image = np.frombuffer(buf.read(img_bytes), dtype="<f4").reshape(1, h, w)
        mask = np.frombuffer(buf.read(h * w), dtype=np.uint8).reshape(h, w)
        samples.append(SegSample(image=image, mask=mask))
    return samples, DatasetHeader(count=count, height=h, width=w, classes=classes, seed=seed)


def split(samples: list[SegSample], fractions, seed: int) -> list[list[SegSample]]:
    """Deterministic disjoint cover; sizes are floor(f*N) with the remainder
    handed to the earliest partitions."""
    if not samples:
        raise ValueError("cannot split an empty dataset")
    fractions = [float(f) for f in fractions]
    if any(f <= 0 for f in fractions):
        raise ValueError(f"fractions must be positive, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    n = len(samples)
    sizes = [int(np.floor(f * n)) for f in fractions]
    remainder = n - sum(sizes)
    for i in range(remainder):
        sizes[i % len(sizes)] += 1
    order = np.random.default_rng(seed).permutation(n)
    parts = []
    start = 0
    for size in sizes:
        parts.append([samples[i] for i in order[start : start + size]])
        start += size
    return parts
