"""Synthetic shifted-domain segmentation grids.

A domain is a mixture of per-category feature prototypes. Labels are drawn
as spatially coherent blocks, and each pixel's feature is an affine map of
its category prototype plus Gaussian noise. Two domains built from one
prototype set but different affine maps / noise levels give a controllable
stand-in for a real appearance gap.

All randomness runs through Philox (a named 64-bit counter-based generator)
keyed by SeedSequence, so a seed means the same stream everywhere. Features
are stored in float32; label planes in uint16. Dataset files are little-
endian with a fixed "CAGD" header and round-trip bit-exactly.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

MAGIC = b"CAGD"
FORMAT_VERSION = 1

ROLE_CODES = {"source": 0, "target-train": 1, "target-eval": 2}
ROLE_NAMES = {v: k for k, v in ROLE_CODES.items()}


class DatasetParseError(ValueError):
    """Malformed dataset file; message carries the byte offset."""


class DatasetVersionError(ValueError):
    """Wrong magic bytes or unsupported format version."""


def make_rng(*key) -> np.random.Generator:
    """Philox generator for a structured integer key."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def default_prototypes(C: int, D: int, radius: float = 3.0, seed: int = 0) -> np.ndarray:
    """C well-separated points on the radius-`radius` hypersphere in R^D.

    Greedy farthest-point selection over a seeded pool of unit directions,
    starting from the most antipodal pair, so the worst-case pair separation
    stays high for any seed. Values are quantized to float32 precision
    because grid features are stored in float32.
    """
    if C < 2 or D < 2:
        raise ValueError(f"need C >= 2 and D >= 2, got C={C}, D={D}")
    if C > 128:
        raise ValueError(f"C must be <= 128, got {C}")
    rng = make_rng(seed, 0x61636F)  # stream tag for prototype draws
    pool = rng.normal(size=(1024, D))
    pool /= np.linalg.norm(pool, axis=1, keepdims=True)
    gram = pool @ pool.T
    i, j = np.unravel_index(np.argmin(gram), gram.shape)
    chosen = [int(i), int(j)]
    while len(chosen) < C:
        gaps = np.min(np.linalg.norm(pool[:, None, :] - pool[None, chosen, :],
                                     axis=2), axis=1)
        chosen.append(int(np.argmax(gaps)))
    protos = radius * pool[chosen]
    return protos.astype(np.float32).astype(np.float64)


def paired_rotation(D: int, degrees: float) -> np.ndarray:
    """Block-diagonal rotation acting on consecutive coordinate pairs."""
    theta = math.radians(degrees)
    m = np.eye(D)
    c, s = math.cos(theta), math.sin(theta)
    for i in range(0, D - 1, 2):
        m[i, i] = c
        m[i, i + 1] = -s
        m[i + 1, i] = s
        m[i + 1, i + 1] = c
    return m


@dataclass(frozen=True)
class DomainSpec:
    """Recipe for one domain: shared prototypes plus an appearance map."""

    C: int
    D: int
    prototypes: np.ndarray            # [C, D] float64 (float32-representable)
    transform_matrix: np.ndarray      # [D, D] float64
    transform_offset: np.ndarray      # [D] float64
    noise_sigma: float
    coherence_scale: int
    seed: int

    def __post_init__(self):
        if self.C < 2:
            raise ValueError(f"C must be >= 2, got {self.C}")
        if self.D < 2:
            raise ValueError(f"D must be >= 2, got {self.D}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.coherence_scale < 1:
            raise ValueError(f"coherence_scale must be >= 1, got {self.coherence_scale}")
        protos = np.asarray(self.prototypes, dtype=np.float64)
        if protos.shape != (self.C, self.D):
            raise ValueError(f"prototypes must be [{self.C} x {self.D}], got {protos.shape}")
        m = np.asarray(self.transform_matrix, dtype=np.float64)
        if m.shape != (self.D, self.D):
            raise ValueError(f"transform_matrix must be [{self.D} x {self.D}], got {m.shape}")
        off = np.asarray(self.transform_offset, dtype=np.float64)
        if off.shape != (self.D,):
            raise ValueError(f"transform_offset must have length {self.D}, got {off.shape}")
        object.__setattr__(self, "prototypes", protos)
        object.__setattr__(self, "transform_matrix", m)
        object.__setattr__(self, "transform_offset", off)

    @classmethod
    def identity(cls, C: int, D: int, noise_sigma: float = 0.0,
                 coherence_scale: int = 1, seed: int = 0,
                 prototypes: np.ndarray | None = None) -> "DomainSpec":
        if prototypes is None:
            prototypes = default_prototypes(C, D)
        return cls(C=C, D=D, prototypes=prototypes,
                   transform_matrix=np.eye(D), transform_offset=np.zeros(D),
                   noise_sigma=noise_sigma, coherence_scale=coherence_scale, seed=seed)

    def shifted(self, transform_matrix=None, transform_offset=None,
                noise_sigma=None, seed=None) -> "DomainSpec":
        """Twin spec sharing C, D and prototypes; only the appearance differs."""
        return replace(
            self,
            transform_matrix=self.transform_matrix if transform_matrix is None else transform_matrix,
            transform_offset=self.transform_offset if transform_offset is None else transform_offset,
            noise_sigma=self.noise_sigma if noise_sigma is None else noise_sigma,
            seed=self.seed if seed is None else seed,
        )

    def transformed_prototypes(self) -> np.ndarray:
        return self.prototypes @ self.transform_matrix.T + self.transform_offset


@dataclass
class LabeledGrid:
    """One image: per-pixel feature vectors and (optionally) labels."""

    height: int
    width: int
    features: np.ndarray              # [H*W, D] float32
    labels: np.ndarray | None = None  # [H*W] uint16

    def __post_init__(self):
        n = self.height * self.width
        feats = np.asarray(self.features, dtype=np.float32)
        if feats.ndim != 2 or feats.shape[0] != n:
            raise ValueError(f"features must be [{n} x D], got {feats.shape}")
        self.features = feats
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.uint16)
            if labels.shape != (n,):
                raise ValueError(f"labels must have {n} entries, got {labels.shape}")
            self.labels = labels

    @property
    def n_pixels(self) -> int:
        return self.height * self.width

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def without_labels(self) -> "LabeledGrid":
        return LabeledGrid(self.height, self.width, self.features, None)

    def __eq__(self, other):
        if not isinstance(other, LabeledGrid):
            return NotImplemented
        if (self.height, self.width) != (other.height, other.width):
            return False
        if self.features.tobytes() != other.features.tobytes():
            return False
        if (self.labels is None) != (other.labels is None):
            return False
        if self.labels is not None and self.labels.tobytes() != other.labels.tobytes():
            return False
        return True


@dataclass
class Dataset:
    """Grids of one role; all share H, W, D and the category count C."""

    grids: list[LabeledGrid]
    role: str
    C: int

    def __post_init__(self):
        if self.role not in ROLE_CODES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.C < 2:
            raise ValueError(f"C must be >= 2, got {self.C}")
        if self.grids:
            h, w, d = self.grids[0].height, self.grids[0].width, self.grids[0].feature_dim
            for g in self.grids:
                if (g.height, g.width, g.feature_dim) != (h, w, d):
                    raise ValueError("all grids in a dataset must share H, W and D")
                if g.labels is not None and g.labels.size and int(g.labels.max()) >= self.C:
                    raise ValueError(f"label {int(g.labels.max())} out of range for C={self.C}")

    def __len__(self):
        return len(self.grids)

    @property
    def labeled(self) -> bool:
        return all(g.labels is not None for g in self.grids)

    def unlabeled_view(self) -> "Dataset":
        """Same features, no labels. This is the only face the trainer may
        see of target-train data."""
        return Dataset([g.without_labels() for g in self.grids], self.role, self.C)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.role == other.role and self.C == other.C
                and len(self.grids) == len(other.grids)
                and all(a == b for a, b in zip(self.grids, other.grids)))


def generate(spec: DomainSpec, count: int, H: int, W: int,
             role: str = "source") -> Dataset:
    """Draw `count` H x W grids from a domain spec.

    Each grid has its own Philox stream keyed by (spec.seed, grid index), so
    generation is order-independent and reproducible. Labels are drawn per
    coherence block; features are the affine-mapped prototype of the pixel's
    label plus isotropic Gaussian noise.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if H < 1 or W < 1:
        raise ValueError(f"grid size must be positive, got {H}x{W}")

    shifted_protos = spec.transformed_prototypes()
    s = spec.coherence_scale
    blocks_h = (H + s - 1) // s
    blocks_w = (W + s - 1) // s

    grids = []
    for g in range(count):
        rng = make_rng(spec.seed, g)
        block_labels = rng.integers(0, spec.C, size=(blocks_h, blocks_w))
        labels = np.repeat(np.repeat(block_labels, s, axis=0), s, axis=1)[:H, :W]
        labels = labels.reshape(-1).astype(np.uint16)
        noise = rng.normal(loc=0.0, scale=spec.noise_sigma, size=(H * W, spec.D))
        feats = shifted_protos[labels.astype(np.int64)] + noise
        grids.append(LabeledGrid(H, W, feats.astype(np.float32), labels))
    return Dataset(grids, role, spec.C)


def class_pixel_counts(ds: Dataset) -> np.ndarray:
    """Pixels per category over the whole dataset. Requires labels."""
    counts = np.zeros(ds.C, dtype=np.int64)
    for g in ds.grids:
        if g.labels is None:
            raise ValueError("class_pixel_counts needs labels on every grid")
        counts += np.bincount(g.labels.astype(np.int64), minlength=ds.C)
    return counts


def domain_shift_proxy(a: Dataset, b: Dataset) -> float:
    """Mean distance between matched per-category feature means.

    A data-level shift measure: for each category present in both datasets,
    take the mean feature vector on each side and measure their Euclidean
    distance; average over categories.
    """
    if a.C != b.C:
        raise ValueError("datasets must share the category count")

    def category_means(ds):
        feats = np.concatenate([g.features.astype(np.float64) for g in ds.grids])
        labels = np.concatenate([g.labels.astype(np.int64) for g in ds.grids])
        means, present = {}, np.bincount(labels, minlength=ds.C)
        for c in range(ds.C):
            if present[c] > 0:
                means[c] = feats[labels == c].mean(axis=0)
        return means

    ma, mb = category_means(a), category_means(b)
    shared = sorted(set(ma) & set(mb))
    if not shared:
        raise ValueError("no category present in both datasets")
    return float(np.mean([np.linalg.norm(ma[c] - mb[c]) for c in shared]))


# -- file format ---------------------------------------------------------------
#
# header: magic "CAGD" | version u16 | role u16 | H u16 | W u16 | D u16 |
#         C u16 | grid count u32        (little-endian throughout)
# per grid: H*W*D float32 features, then H*W uint16 labels.

_HEADER = struct.Struct("<4sHHHHHHI")


def save(ds: Dataset, path) -> None:
    if not ds.grids:
        raise ValueError("refusing to save an empty dataset")
    if not ds.labeled:
        raise ValueError("cannot persist an unlabeled view; save the labeled dataset")
    g0 = ds.grids[0]
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, ROLE_CODES[ds.role],
                          g0.height, g0.width, g0.feature_dim, ds.C, len(ds.grids))
    with open(path, "wb") as f:
        f.write(header)
        for g in ds.grids:
            f.write(np.ascontiguousarray(g.features, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(g.labels, dtype="<u2").tobytes())


def _read_exact(f, n: int, offset: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise DatasetParseError(
            f"truncated file: expected {n} bytes for {what} at byte {offset}, got {len(buf)}")
    return buf


def load(path) -> Dataset:
    with open(path, "rb") as f:
        offset = 0
        raw = _read_exact(f, _HEADER.size, offset, "header")
        offset += _HEADER.size
        magic, version, role_code, H, W, D, C, count = _HEADER.unpack(raw)
        if magic != MAGIC:
            raise DatasetVersionError(f"bad magic {magic!r}, expected {MAGIC!r}")
        if version != FORMAT_VERSION:
            raise DatasetVersionError(f"unsupported format version {version}")
        if role_code not in ROLE_NAMES:
            raise DatasetParseError(f"unknown role code {role_code} at byte 6")
        grids = []
        feat_bytes = H * W * D * 4
        label_bytes = H * W * 2
        for i in range(count):
            raw = _read_exact(f, feat_bytes, offset, f"features of grid {i}")
            offset += feat_bytes
            feats = np.frombuffer(raw, dtype="<f4").reshape(H * W, D).copy()
            raw = _read_exact(f, label_bytes, offset, f"labels of grid {i}")
            offset += label_bytes
            labels = np.frombuffer(raw, dtype="<u2").copy()
            grids.append(LabeledGrid(H, W, feats, labels))
        trailing = f.read(1)
        if trailing:
            raise DatasetParseError(f"trailing data at byte {offset}")
    return Dataset(grids, ROLE_NAMES[role_code], C)
