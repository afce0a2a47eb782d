"""Category anchors and active-pixel identification.

An anchor is the per-category mean of alignment-space features over labeled
source pixels. Unlabeled target pixels are scored by their distances to the
anchors: a pixel is "active" when the gap between its second-nearest and
nearest anchor exceeds a margin threshold, and its pseudo-label is the
nearest anchor's category. A probability route (softmax confidence)
implements the same interface for comparison.

Anchor sums use math.fsum, which is exactly rounded, so anchor construction
is bit-identical under any permutation of the input pixels.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

SNAP_MAGIC = b"CAGS"
SNAP_VERSION = 1


class SnapshotError(ValueError):
    """Malformed stage snapshot file."""


class AnchorError(ValueError):
    """Anchor set unusable for the requested operation."""


@dataclass
class AnchorSet:
    """Per-category anchor vectors with presence bookkeeping."""

    anchors: np.ndarray   # [C, F] float64; rows of absent categories are 0
    valid: np.ndarray     # [C] bool, category had at least one pixel
    counts: np.ndarray    # [C] int64 contributing pixel counts

    def __post_init__(self):
        self.anchors = np.asarray(self.anchors, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        C = self.anchors.shape[0]
        if self.anchors.ndim != 2:
            raise ValueError(f"anchors must be 2-D, got shape {self.anchors.shape}")
        if self.valid.shape != (C,) or self.counts.shape != (C,):
            raise ValueError("valid and counts must have one entry per category")

    @property
    def C(self) -> int:
        return self.anchors.shape[0]

    @property
    def F(self) -> int:
        return self.anchors.shape[1]

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())


def construct_anchors(features: np.ndarray, labels: np.ndarray, C: int) -> AnchorSet:
    """Mean alignment feature per category.

    `features` is [M, F] float64, `labels` [M] ints in [0, C). Each anchor
    coordinate is an fsum over its pixels divided by the count, so the result
    does not depend on pixel order. Categories with no pixels get a zero row
    and valid=False.
    """
    feats = np.asarray(features, dtype=np.float64)
    labs = np.asarray(labels, dtype=np.int64)
    if feats.ndim != 2 or labs.shape != (feats.shape[0],):
        raise ValueError(f"features [M x F] and labels [M] required, "
                         f"got {feats.shape} and {labs.shape}")
    if labs.size and (labs.min() < 0 or labs.max() >= C):
        raise ValueError(f"labels must lie in [0, {C})")
    F = feats.shape[1]
    anchors = np.zeros((C, F), dtype=np.float64)
    counts = np.zeros(C, dtype=np.int64)
    for c in range(C):
        rows = feats[labs == c]
        counts[c] = rows.shape[0]
        if counts[c]:
            for j in range(F):
                anchors[c, j] = math.fsum(rows[:, j].tolist()) / counts[c]
    return AnchorSet(anchors, counts > 0, counts)


def anchor_distances(features: np.ndarray, anchor_set: AnchorSet) -> np.ndarray:
    """Euclidean distance of each pixel to each anchor, [N, C].

    Columns of absent categories are +inf so they never win an argmin.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != anchor_set.F:
        raise ValueError(f"features must be [N x {anchor_set.F}], got {feats.shape}")
    diff = feats[:, None, :] - anchor_set.anchors[None, :, :]
    d = np.sqrt(np.sum(diff * diff, axis=2))
    d[:, ~anchor_set.valid] = np.inf
    return d


@dataclass
class ActivationResult:
    """Which pixels got pseudo-labels, and with what score.

    `pseudo_labels` is -1 wherever `active` is False. `score` is the margin
    (anchor route) or the winning probability (probability route).
    """

    active: np.ndarray         # [N] bool
    pseudo_labels: np.ndarray  # [N] int64, -1 for inactive
    score: np.ndarray          # [N] float64

    @property
    def n_active(self) -> int:
        return int(self.active.sum())

    @property
    def coverage(self) -> float:
        return self.n_active / self.active.size if self.active.size else 0.0


def identify_active(features: np.ndarray, anchor_set: AnchorSet,
                    margin_threshold: float) -> ActivationResult:
    """Margin rule: active iff (second-nearest minus nearest) distance gap
    strictly exceeds `margin_threshold`.

    Needs at least two valid anchors to define a gap; otherwise every pixel
    is inactive. A pixel tied between its two nearest anchors has margin 0
    and can never activate. Pseudo-label is the nearest anchor's category.
    """
    n = np.asarray(features).shape[0]
    if anchor_set.n_valid < 2:
        return ActivationResult(np.zeros(n, dtype=bool),
                                np.full(n, -1, dtype=np.int64),
                                np.zeros(n, dtype=np.float64))
    d = anchor_distances(features, anchor_set)
    order = np.sort(d, axis=1)
    margins = order[:, 1] - order[:, 0]
    nearest = np.argmin(d, axis=1).astype(np.int64)
    active = margins > margin_threshold
    pseudo = np.where(active, nearest, -1).astype(np.int64)
    return ActivationResult(active, pseudo, margins)


def identify_active_by_probability(probs: np.ndarray,
                                   prob_threshold: float) -> ActivationResult:
    """Confidence rule: active iff the top softmax probability strictly
    exceeds `prob_threshold`; pseudo-label is the argmax category."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError(f"probs must be [N x C], got shape {p.shape}")
    top = p.max(axis=1)
    winner = np.argmax(p, axis=1).astype(np.int64)
    active = top > prob_threshold
    pseudo = np.where(active, winner, -1).astype(np.int64)
    return ActivationResult(active, pseudo, top)


def margin_threshold_for_coverage(margins: np.ndarray, n_active: int) -> float:
    """Threshold that activates (as nearly as strict-> allows) the
    `n_active` largest-margin pixels.

    Picks the midpoint between the n-th and (n+1)-th largest margins, so the
    cut sits between the two populations. Zero-margin pixels never activate,
    which caps the achievable count at the number of positive margins.
    """
    m = np.sort(np.asarray(margins, dtype=np.float64))[::-1]
    if n_active <= 0:
        return float(m[0]) if m.size else 0.0
    n_active = min(n_active, m.size)
    kth = m[n_active - 1]
    nxt = m[n_active] if n_active < m.size else 0.0
    return max(0.0, float((kth + nxt) / 2.0))


def activation_report(result: ActivationResult, C: int) -> dict:
    """JSON-able summary: coverage plus a pseudo-label histogram."""
    hist = np.zeros(C, dtype=np.int64)
    labs = result.pseudo_labels[result.active]
    if labs.size:
        hist = np.bincount(labs, minlength=C)
    return {
        "pixels": int(result.active.size),
        "active": result.n_active,
        "coverage": result.coverage,
        "pseudo_label_counts": [int(x) for x in hist],
    }


# -- stage snapshot format -----------------------------------------------------
#
# One file per training stage: the frozen anchors plus both activation routes
# evaluated on every target-train grid at the stage boundary.
#
# magic "CAGS" | version u16 | stage u16 | C u16 | F u16 |
# grid count u32 | pixels-per-grid u32 |
# anchors C*F f64 | valid C u8 | counts C i64 |
# per grid: anchor-active u8[N], anchor-pseudo i16[N],
#           prob-active u8[N],   prob-pseudo i16[N].

_SNAP_HEADER = struct.Struct("<4sHHHHII")


@dataclass
class StageSnapshot:
    stage: int
    anchor_set: AnchorSet
    anchor_active: list[np.ndarray]   # bool [N] per grid
    anchor_pseudo: list[np.ndarray]   # int16 [N] per grid, -1 inactive
    prob_active: list[np.ndarray]
    prob_pseudo: list[np.ndarray]

    def __eq__(self, other):
        if not isinstance(other, StageSnapshot):
            return NotImplemented
        a, b = self.anchor_set, other.anchor_set
        same_anchors = (self.stage == other.stage
                        and a.anchors.tobytes() == b.anchors.tobytes()
                        and np.array_equal(a.valid, b.valid)
                        and np.array_equal(a.counts, b.counts))
        if not same_anchors:
            return False
        for mine, theirs in ((self.anchor_active, other.anchor_active),
                             (self.anchor_pseudo, other.anchor_pseudo),
                             (self.prob_active, other.prob_active),
                             (self.prob_pseudo, other.prob_pseudo)):
            if len(mine) != len(theirs):
                return False
            if any(not np.array_equal(x, y) for x, y in zip(mine, theirs)):
                return False
        return True


def save_snapshot(snap: StageSnapshot, path) -> None:
    aset = snap.anchor_set
    n_grids = len(snap.anchor_active)
    if not n_grids:
        raise ValueError("refusing to save a snapshot with no grids")
    n_pix = snap.anchor_active[0].size
    with open(path, "wb") as f:
        f.write(_SNAP_HEADER.pack(SNAP_MAGIC, SNAP_VERSION, snap.stage,
                                  aset.C, aset.F, n_grids, n_pix))
        f.write(np.ascontiguousarray(aset.anchors, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(aset.valid, dtype="u1").tobytes())
        f.write(np.ascontiguousarray(aset.counts, dtype="<i8").tobytes())
        for i in range(n_grids):
            for arr, dt in ((snap.anchor_active[i], "u1"),
                            (snap.anchor_pseudo[i], "<i2"),
                            (snap.prob_active[i], "u1"),
                            (snap.prob_pseudo[i], "<i2")):
                a = np.ascontiguousarray(arr, dtype=dt)
                if a.size != n_pix:
                    raise ValueError("all snapshot planes must share the pixel count")
                f.write(a.tobytes())


def _snap_read(f, n, offset, what):
    buf = f.read(n)
    if len(buf) != n:
        raise SnapshotError(
            f"truncated snapshot: expected {n} bytes for {what} at byte {offset}")
    return buf


def load_snapshot(path) -> StageSnapshot:
    with open(path, "rb") as f:
        offset = 0
        raw = _snap_read(f, _SNAP_HEADER.size, offset, "header")
        offset += _SNAP_HEADER.size
        magic, version, stage, C, F, n_grids, n_pix = _SNAP_HEADER.unpack(raw)
        if magic != SNAP_MAGIC:
            raise SnapshotError(f"bad magic {magic!r}, expected {SNAP_MAGIC!r}")
        if version != SNAP_VERSION:
            raise SnapshotError(f"unsupported snapshot version {version}")
        raw = _snap_read(f, C * F * 8, offset, "anchors")
        offset += C * F * 8
        anchors = np.frombuffer(raw, dtype="<f8").reshape(C, F).copy()
        raw = _snap_read(f, C, offset, "valid mask")
        offset += C
        valid = np.frombuffer(raw, dtype="u1").astype(bool)
        raw = _snap_read(f, C * 8, offset, "counts")
        offset += C * 8
        counts = np.frombuffer(raw, dtype="<i8").copy()
        aset = AnchorSet(anchors, valid, counts)
        planes = ([], [], [], [])
        dts = ("u1", "<i2", "u1", "<i2")
        sizes = (n_pix, n_pix * 2, n_pix, n_pix * 2)
        names = ("anchor-active", "anchor-pseudo", "prob-active", "prob-pseudo")
        for i in range(n_grids):
            for k in range(4):
                raw = _snap_read(f, sizes[k], offset, f"{names[k]} of grid {i}")
                offset += sizes[k]
                arr = np.frombuffer(raw, dtype=dts[k]).copy()
                planes[k].append(arr.astype(bool) if dts[k] == "u1" else arr)
        if f.read(1):
            raise SnapshotError(f"trailing data at byte {offset}")
    return StageSnapshot(stage, aset, *planes)
