"""How the two pseudo-labeling routes behave on an unadapted model.

Train briefly on source only, freeze per-category anchors from source
features, then compare the margin rule against the probability rule on
target pixels: coverage (how many pixels activate) and precision (how many
of those got the right label). Target labels are used only to audit.
"""

import numpy as np

from anchoradapt.anchors import (construct_anchors, identify_active,
                                 identify_active_by_probability)
from anchoradapt.config import build_datasets, default_config
from anchoradapt.metrics import pseudo_label_audit
from anchoradapt.model import SegModel
from anchoradapt.tensor import no_grad
from anchoradapt.trainer import pretrain

cfg = default_config(seed=0)
source, target_train, _ = build_datasets(cfg)

model = SegModel(D=cfg.data.feature_dim, C=cfg.data.categories, seed=0,
                 **cfg.model.dims())
pretrain(model, source, cfg.train)

feats = np.concatenate([model.project_np(g.features) for g in source.grids])
labels = np.concatenate([g.labels.astype(np.int64) for g in source.grids])
anchors = construct_anchors(feats, labels, source.C)
print("valid anchors:", anchors.n_valid, "of", anchors.C)

tf = np.concatenate([model.project_np(g.features) for g in target_train.grids])
with no_grad():
    tp = np.concatenate([model.forward(g.features).probs.data
                         for g in target_train.grids])
truth = np.concatenate([g.labels.astype(np.int64) for g in target_train.grids])

print("\nmargin rule: active iff (2nd nearest - nearest) anchor distance")
print("exceeds the threshold; bigger threshold = fewer, safer pixels")
print("threshold  coverage  precision")
for margin in (0.5, 1.5, 2.5, 3.5):
    audit = pseudo_label_audit(identify_active(tf, anchors, margin), truth)
    p = "-" if audit["precision"] is None else f"{audit['precision']:.3f}"
    print(f"   {margin:4.1f}     {audit['coverage']:.3f}     {p}")

print("\nprobability rule: active iff max softmax prob exceeds the threshold")
print("threshold  coverage  precision")
for p0 in (0.80, 0.95, 0.99):
    audit = pseudo_label_audit(identify_active_by_probability(tp, p0), truth)
    p = "-" if audit["precision"] is None else f"{audit['precision']:.3f}"
    print(f"   {p0:4.2f}     {audit['coverage']:.3f}     {p}")
