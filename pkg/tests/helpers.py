"""Shared test utilities: a finite-difference gradient checker and
naive-loop oracles for everything the fast numpy paths must match.

The oracles are deliberately slow and dumb: explicit Python loops, no
vectorization, so that a bug in the library cannot hide in a shared
shortcut.
"""

import math

import numpy as np

from anchoradapt.tensor import backward, no_grad, tensor

# filled by the acceptance tests, printed by the conftest summary hook
ACCEPTANCE_LINES = []


def fd_rel_error(build, arrays, h=1e-5):
    """Worst relative error between tape gradients and central differences.

    `build` maps one Tensor per input array to a scalar Tensor. The
    relative error of one element is |a - f| / max(1, |a|, |f|).
    """
    ts = [tensor(np.array(a, dtype=np.float64), requires_grad=True)
          for a in arrays]
    loss = build(*ts)
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad
                for t in ts]
    work = [np.array(a, dtype=np.float64) for a in arrays]

    def value():
        with no_grad():
            return build(*[tensor(w) for w in work]).item()

    worst = 0.0
    for k in range(len(work)):
        flat = work[k].reshape(-1)
        aflat = analytic[k].reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = value()
            flat[i] = keep - h
            down = value()
            flat[i] = keep
            fd = (up - down) / (2.0 * h)
            err = abs(aflat[i] - fd) / max(1.0, abs(aflat[i]), abs(fd))
            worst = max(worst, err)
    return worst


def nudge_off_kink(a, width=0.05, shift=0.1):
    """Move values away from zero so relu subgradients cannot poison a
    finite-difference probe."""
    a = np.array(a, dtype=np.float64)
    a[np.abs(a) < width] += shift
    return a


# -- loop oracles ------------------------------------------------------------

def oracle_anchor_means(features, labels, C):
    """Per-category feature means via explicit loops; (anchors, counts)."""
    M, F = features.shape
    anchors = np.zeros((C, F), dtype=np.float64)
    counts = np.zeros(C, dtype=np.int64)
    for c in range(C):
        rows = [features[i] for i in range(M) if labels[i] == c]
        counts[c] = len(rows)
        if rows:
            for j in range(F):
                anchors[c, j] = math.fsum(float(r[j]) for r in rows) / len(rows)
    return anchors, counts


def oracle_distances(features, anchors, valid):
    """[N, C] Euclidean distances, +inf for invalid anchor columns."""
    N = features.shape[0]
    C = anchors.shape[0]
    d = np.zeros((N, C), dtype=np.float64)
    for i in range(N):
        for c in range(C):
            if not valid[c]:
                d[i, c] = np.inf
                continue
            s = 0.0
            for j in range(features.shape[1]):
                s += (features[i, j] - anchors[c, j]) ** 2
            d[i, c] = math.sqrt(s)
    return d


def oracle_margin_activation(distances, threshold):
    """(active, pseudo, margin) per pixel from a distance matrix."""
    N = distances.shape[0]
    active = np.zeros(N, dtype=bool)
    pseudo = np.full(N, -1, dtype=np.int64)
    margin = np.zeros(N, dtype=np.float64)
    for i in range(N):
        row = sorted(distances[i])
        margin[i] = row[1] - row[0]
        if margin[i] > threshold:
            active[i] = True
            pseudo[i] = int(np.argmin(distances[i]))
    return active, pseudo, margin


def oracle_prob_activation(probs, threshold):
    N = probs.shape[0]
    active = np.zeros(N, dtype=bool)
    pseudo = np.full(N, -1, dtype=np.int64)
    top = np.zeros(N, dtype=np.float64)
    for i in range(N):
        best = int(np.argmax(probs[i]))
        top[i] = probs[i, best]
        if top[i] > threshold:
            active[i] = True
            pseudo[i] = best
    return active, pseudo, top


def oracle_ce(probs, labels, mask=None):
    """-sum over masked pixels of log(max(p[i, label], 1e-12))."""
    total = 0.0
    for i in range(probs.shape[0]):
        if mask is not None and not mask[i]:
            continue
        total += -math.log(max(float(probs[i, labels[i]]), 1e-12))
    return total


def oracle_dis(features, labels, mask, anchors):
    """Sum over masked pixels of squared distance to the labeled anchor."""
    total = 0.0
    for i in range(features.shape[0]):
        if mask is not None and not mask[i]:
            continue
        a = anchors[labels[i]]
        for j in range(features.shape[1]):
            total += (float(features[i, j]) - float(a[j])) ** 2
    return total


def oracle_confusion(pred, true, C):
    cm = np.zeros((C, C), dtype=np.int64)
    for p, t in zip(pred, true):
        cm[int(t), int(p)] += 1
    return cm


def oracle_iou(cm):
    """(per-category IoU with NaN exclusions, unweighted mean)."""
    C = cm.shape[0]
    per = np.full(C, np.nan)
    kept = []
    for c in range(C):
        tp = cm[c, c]
        fn = sum(cm[c, j] for j in range(C)) - tp
        fp = sum(cm[i, c] for i in range(C)) - tp
        if tp + fp + fn > 0:
            per[c] = tp / (tp + fp + fn)
            kept.append(per[c])
    mean = float(np.mean(kept)) if kept else float("nan")
    return per, mean
