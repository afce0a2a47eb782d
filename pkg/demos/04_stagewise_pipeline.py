"""The full pipeline, stage by stage: supervised pretraining, an
adversarial warm-up, then anchor-guided self-training stages with
everything frozen at each stage boundary.

Only the target evaluation below reads target labels; training sees the
unlabeled view.
"""

from anchoradapt.config import build_datasets, default_config
from anchoradapt.metrics import evaluate_model
from anchoradapt.model import SegModel
from anchoradapt.trainer import run_pipeline, train_source_only

cfg = default_config(seed=0)
source, target_train, target_eval = build_datasets(cfg)

baseline = train_source_only(
    SegModel(D=cfg.data.feature_dim, C=cfg.data.categories, seed=0,
             **cfg.model.dims()),
    source, cfg.train)
base_miou = evaluate_model(baseline, target_eval).miou
print(f"source-only baseline (same budget): mIoU {100 * base_miou:.2f}")


def eval_stage(model, stage):
    return {"miou": evaluate_model(model, target_eval).miou}


model, records = run_pipeline(source, target_train, cfg.train,
                              cfg.model.dims(), eval_fn=eval_stage)

print("\nstage  active(anchor)  active(prob)  mIoU")
for r in records:
    print(f"  {r['stage']}    {r['active_anchor_total']:6d}        "
          f"{r['active_prob_total']:6d}      {100 * r['miou']:.2f}")

final = evaluate_model(model, target_eval)
print(f"\nfinal target mIoU {100 * final.miou:.2f} "
      f"(gain over baseline {100 * (final.miou - base_miou):+.2f})")
print("\nper-category IoU:")
print(final.to_table())
