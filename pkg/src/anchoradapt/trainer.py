"""Stagewise anchor-guided training.

The pipeline is three phases: supervised pretraining on source, an
adversarial warm-up that nudges target features toward source features, and
K adaptation stages. Each stage freezes a fresh anchor set, the active
target pixels, and their pseudo-labels, then runs L SGD iterations on the
combined objective. Frozen per-stage state is what keeps pseudo-label noise
from feeding back into itself mid-stage.

Determinism contract: every phase draws grids from its own named Philox
stream, keyed by (seed, phase tag[, stage]). Streams never interact, so
disabling one side of the objective cannot shift the other side's draws,
and a run is reproducible bit for bit from (seed, config, data).
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .anchors import (ActivationResult, AnchorSet, StageSnapshot,
                      construct_anchors, identify_active,
                      identify_active_by_probability, save_snapshot)
from .domains import Dataset, make_rng
from .model import Discriminator, SegModel, load_model, save_model
from .objectives import (LossBreakdown, LossTerms, adversarial_losses,
                         ce_loss, combine, dis_loss)
from .tensor import backward, no_grad, scalar

# grid-sampling stream tags; one per (phase, role)
TAG_PRETRAIN = 1
TAG_WARMUP_SRC = 2
TAG_WARMUP_TGT = 3
TAG_STAGE_SRC = 4
TAG_STAGE_TGT = 5

OPT_MAGIC = b"CAGO"
OPT_VERSION = 1


class StageError(RuntimeError):
    """A stage could not be set up (e.g. too few categories for anchors)."""


class TrainingDivergedError(RuntimeError):
    """Non-finite loss; carries the offending iteration's record."""

    def __init__(self, message: str, record: dict):
        super().__init__(message)
        self.record = record


class OptimizerStateError(ValueError):
    """Malformed or mismatched optimizer state file."""


@dataclass
class TrainConfig:
    """All knobs for the three phases. Defaults follow the reference
    hyperparameters; switches gate individual objective terms so ablation
    variants are configs, not code paths."""

    seed: int
    stages: int = 3                      # K
    iterations_per_stage: int = 120      # L
    pretrain_iterations: int = 120
    warmup_iterations: int = 120
    base_lr: float = 2.5e-4
    poly_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lambda_dis: float = 0.3              # lambda1, weight of distance terms
    lambda_ce: float = 0.7               # lambda2, weight of target CE terms
    margin_threshold: float = 2.5        # delta_d, anchor activation margin
    prob_threshold: float = 0.95         # p0, probability activation floor
    adversarial_weight: float = 1e-2
    restart_lr_each_stage: bool = False
    balance_target_ce: bool = False      # divide target CE terms by active count
    enable_warmup: bool = True
    enable_dis_source: bool = True
    enable_dis_target: bool = True
    enable_ce_target_anchor: bool = True
    enable_ce_target_prob: bool = True

    def __post_init__(self):
        if self.stages < 0:
            raise ValueError(f"stages must be >= 0, got {self.stages}")
        if self.iterations_per_stage < 1:
            raise ValueError("iterations_per_stage must be >= 1")
        if self.pretrain_iterations < 0 or self.warmup_iterations < 0:
            raise ValueError("phase iteration counts must be >= 0")
        for name in ("base_lr", "momentum", "weight_decay", "lambda_dis",
                     "lambda_ce", "margin_threshold", "adversarial_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.poly_power <= 0:
            raise ValueError("poly_power must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if not 0 < self.prob_threshold <= 1:
            raise ValueError("prob_threshold must lie in (0, 1]")


def poly_lr(iteration: int, max_iterations: int, base_lr: float,
            power: float) -> float:
    """base_lr * (1 - iteration/max_iterations) ** power."""
    if max_iterations == 0:
        raise ValueError("max_iterations must be positive")
    if not 0 <= iteration <= max_iterations:
        raise ValueError(f"iteration {iteration} outside [0, {max_iterations}]")
    return base_lr * (1.0 - iteration / max_iterations) ** power


class SGD:
    """Momentum SGD with coupled weight decay.

    Per parameter: g = grad + weight_decay * p; buf = momentum * buf + g;
    p -= lr * buf. Parameters without a gradient this step are untouched.
    """

    def __init__(self, params, momentum: float, weight_decay: float):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: float):
        for p, buf in zip(self.params, self.buffers):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            buf *= self.momentum
            buf += g
            p.data = p.data - lr * buf

    def load_buffers(self, buffers: list[np.ndarray]):
        if len(buffers) != len(self.buffers):
            raise OptimizerStateError(
                f"expected {len(self.buffers)} buffers, got {len(buffers)}")
        for i, (mine, theirs) in enumerate(zip(self.buffers, buffers)):
            if mine.shape != theirs.shape:
                raise OptimizerStateError(
                    f"buffer {i} shape {theirs.shape} does not match {mine.shape}")
        self.buffers = [np.array(b, dtype=np.float64) for b in buffers]


_OPT_HEADER = struct.Struct("<4sHHQ")


def save_optimizer(opt: SGD, global_iteration: int, path) -> None:
    with open(path, "wb") as f:
        f.write(_OPT_HEADER.pack(OPT_MAGIC, OPT_VERSION, len(opt.buffers),
                                 global_iteration))
        for b in opt.buffers:
            f.write(struct.pack("<H", b.ndim))
            f.write(struct.pack(f"<{b.ndim}I", *b.shape))
            f.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_optimizer(path) -> tuple[list[np.ndarray], int]:
    with open(path, "rb") as f:
        raw = f.read(_OPT_HEADER.size)
        if len(raw) != _OPT_HEADER.size:
            raise OptimizerStateError("truncated optimizer state header")
        magic, version, n, global_iteration = _OPT_HEADER.unpack(raw)
        if magic != OPT_MAGIC:
            raise OptimizerStateError(f"bad magic {magic!r}, expected {OPT_MAGIC!r}")
        if version != OPT_VERSION:
            raise OptimizerStateError(f"unsupported optimizer state version {version}")
        buffers = []
        for _ in range(n):
            raw = f.read(2)
            if len(raw) != 2:
                raise OptimizerStateError("truncated buffer shape")
            ndim, = struct.unpack("<H", raw)
            raw = f.read(4 * ndim)
            if len(raw) != 4 * ndim:
                raise OptimizerStateError("truncated buffer shape")
            shape = struct.unpack(f"<{ndim}I", raw)
            count = int(np.prod(shape)) if ndim else 1
            raw = f.read(count * 8)
            if len(raw) != count * 8:
                raise OptimizerStateError("truncated buffer data")
            buffers.append(np.frombuffer(raw, dtype="<f8").reshape(shape).copy())
        if f.read(1):
            raise OptimizerStateError("trailing data in optimizer state")
    return buffers, global_iteration


class GridSampler:
    """Epoch-shuffled grid indices from a dedicated seeded stream."""

    def __init__(self, n_grids: int, *stream_key):
        if n_grids < 1:
            raise ValueError("sampler needs at least one grid")
        self.n = n_grids
        self.rng = make_rng(*stream_key)
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> int:
        if self._pos >= self._order.size:
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        i = int(self._order[self._pos])
        self._pos += 1
        return i


class MetricsLogger:
    """Line-delimited JSON records, written as produced.

    Records hold only values derived from (seed, config, data), never wall
    time, so logs from two runs with one seed are byte-identical.
    """

    def __init__(self, path=None):
        self.path = path
        self.records: list[dict] = []
        self._fh = open(path, "w", encoding="utf-8") if path else None

    def write(self, record: dict) -> None:
        import json
        self.records.append(record)
        if self._fh:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _require_labeled(ds: Dataset, what: str):
    if not ds.labeled:
        raise ValueError(f"{what} needs a labeled dataset")


def pretrain(model: SegModel, source: Dataset, cfg: TrainConfig,
             log: MetricsLogger | None = None) -> SegModel:
    """Supervised CE on source only; poly schedule over its own budget."""
    if cfg.pretrain_iterations == 0:
        return model
    _require_labeled(source, "pretraining")
    opt = SGD(model.parameters(), cfg.momentum, cfg.weight_decay)
    sampler = GridSampler(len(source), cfg.seed, TAG_PRETRAIN)
    for it in range(cfg.pretrain_iterations):
        lr = poly_lr(it, cfg.pretrain_iterations, cfg.base_lr, cfg.poly_power)
        g = source.grids[sampler.next()]
        out = model.forward(g.features)
        loss = ce_loss(out.probs, g.labels, None)
        opt.zero_grad()
        backward(loss)
        opt.step(lr)
        if log:
            v = loss.item()
            log.write({"phase": "pretrain", "iteration": it, "lr": lr,
                       "ce_source": v, "ce_source_mean": v / g.n_pixels})
    return model


def warmup(model: SegModel, disc: Discriminator, source: Dataset,
           target: Dataset, cfg: TrainConfig,
           log: MetricsLogger | None = None) -> SegModel:
    """Alternating per iteration: a discriminator step on detached features,
    then a model step on CE plus the weighted fooling loss.

    The target dataset may be (and in the pipeline always is) an unlabeled
    view; nothing here reads labels from it.
    """
    if cfg.warmup_iterations == 0:
        return model
    _require_labeled(source, "warm-up")
    opt = SGD(model.parameters(), cfg.momentum, cfg.weight_decay)
    disc_opt = SGD(disc.parameters(), cfg.momentum, cfg.weight_decay)
    src_sampler = GridSampler(len(source), cfg.seed, TAG_WARMUP_SRC)
    tgt_sampler = GridSampler(len(target), cfg.seed, TAG_WARMUP_TGT)
    for it in range(cfg.warmup_iterations):
        lr = poly_lr(it, cfg.warmup_iterations, cfg.base_lr, cfg.poly_power)
        sg = source.grids[src_sampler.next()]
        tg = target.grids[tgt_sampler.next()]
        src_out = model.forward(sg.features)
        tgt_out = model.forward(tg.features)
        disc_loss, align_loss = adversarial_losses(disc, src_out.projected,
                                                   tgt_out.projected)
        disc_opt.zero_grad()
        backward(disc_loss)
        disc_opt.step(lr)
        ce = ce_loss(src_out.probs, sg.labels, None)
        # exact-reduction contract: weight 0 means the term is absent
        if cfg.adversarial_weight != 0.0:
            loss = ce + scalar(cfg.adversarial_weight) * align_loss
        else:
            loss = ce
        opt.zero_grad()
        backward(loss)
        opt.step(lr)
        if log:
            n_all = sg.n_pixels + tg.n_pixels
            log.write({"phase": "warmup", "iteration": it, "lr": lr,
                       "ce_source": ce.item(),
                       "disc_loss": disc_loss.item(),
                       "disc_loss_mean": disc_loss.item() / n_all,
                       "align_loss": align_loss.item(),
                       "align_loss_mean": align_loss.item() / tg.n_pixels})
    return model


@dataclass
class StageState:
    """Everything frozen for one stage: anchors and both activation routes,
    per target grid, plus the iteration cursor."""

    stage: int
    anchor_set: AnchorSet
    anchor_activations: list[ActivationResult]
    prob_activations: list[ActivationResult]
    snapshot: StageSnapshot
    iteration: int = 0

    @property
    def total_anchor_active(self) -> int:
        return sum(a.n_active for a in self.anchor_activations)

    @property
    def total_prob_active(self) -> int:
        return sum(a.n_active for a in self.prob_activations)


def begin_stage(model: SegModel, source: Dataset, target: Dataset,
                cfg: TrainConfig, k: int,
                snapshot_path=None) -> StageState:
    """Freeze anchors, activations and pseudo-labels for stage k.

    Pure function of (model parameters, data, config): identical inputs give
    a bit-identical snapshot. Raises StageError when fewer than two source
    categories are present, since a margin needs a runner-up anchor.
    """
    if k < 1:
        raise ValueError(f"stage index must be >= 1, got {k}")
    _require_labeled(source, "anchor construction")
    feats = np.concatenate([model.project_np(g.features) for g in source.grids])
    labels = np.concatenate([g.labels.astype(np.int64) for g in source.grids])
    aset = construct_anchors(feats, labels, source.C)
    if aset.n_valid < 2:
        raise StageError(
            f"stage {k}: only {aset.n_valid} source categor"
            f"{'y' if aset.n_valid == 1 else 'ies'} present; anchor guidance "
            "needs at least 2; generate more or more varied source data")
    anchor_acts, prob_acts = [], []
    for g in target.grids:
        with no_grad():
            out = model.forward(g.features)
        anchor_acts.append(identify_active(out.projected.data, aset,
                                           cfg.margin_threshold))
        prob_acts.append(identify_active_by_probability(out.probs.data,
                                                        cfg.prob_threshold))
    snap = StageSnapshot(
        k, aset,
        [a.active.copy() for a in anchor_acts],
        [a.pseudo_labels.astype(np.int16) for a in anchor_acts],
        [p.active.copy() for p in prob_acts],
        [p.pseudo_labels.astype(np.int16) for p in prob_acts])
    if snapshot_path is not None:
        save_snapshot(snap, snapshot_path)
    return StageState(k, aset, anchor_acts, prob_acts, snap)


def run_stage(model: SegModel, state: StageState, source: Dataset,
              target: Dataset, cfg: TrainConfig, opt: SGD,
              schedule_offset: int, schedule_max: int,
              log: MetricsLogger | None = None) -> SegModel:
    """L SGD iterations on the combined objective with stage-frozen state.

    Each iteration pairs one source grid with one target grid (batch of
    one). Terms whose switch is off, whose weight is zero, or whose mask is
    empty are skipped outright and contribute exactly nothing, so zeroed
    weights reduce this to plain source CE training, bit for bit.
    """
    want_dis_s = cfg.enable_dis_source and cfg.lambda_dis != 0.0
    want_dis_t = cfg.enable_dis_target and cfg.lambda_dis != 0.0
    want_ce_a = cfg.enable_ce_target_anchor and cfg.lambda_ce != 0.0
    want_ce_p = cfg.enable_ce_target_prob and cfg.lambda_ce != 0.0
    need_target = want_dis_t or want_ce_a or want_ce_p

    src_sampler = GridSampler(len(source), cfg.seed, TAG_STAGE_SRC, state.stage)
    tgt_sampler = GridSampler(len(target), cfg.seed, TAG_STAGE_TGT, state.stage)

    for i in range(state.iteration, cfg.iterations_per_stage):
        g_iter = schedule_offset + i
        lr = poly_lr(g_iter, schedule_max, cfg.base_lr, cfg.poly_power)
        sg = source.grids[src_sampler.next()]
        src_out = model.forward(sg.features)
        terms = LossTerms(ce_source=ce_loss(src_out.probs, sg.labels, None))
        counts = {"ce_source": sg.n_pixels}
        if want_dis_s:
            terms.dis_source = dis_loss(src_out.projected, sg.labels, None,
                                        state.anchor_set)
            counts["dis_source"] = sg.n_pixels
        record = {"phase": "stage", "stage": state.stage, "iteration": i,
                  "global_iteration": g_iter, "lr": lr}
        if need_target:
            ti = tgt_sampler.next()
            tg = target.grids[ti]
            a_act = state.anchor_activations[ti]
            p_act = state.prob_activations[ti]
            record["active_anchor"] = a_act.n_active
            record["active_prob"] = p_act.n_active
            use_anchor = (want_ce_a or want_dis_t) and a_act.n_active > 0
            use_prob = want_ce_p and p_act.n_active > 0
            if use_anchor or use_prob:
                tgt_out = model.forward(tg.features)
                if want_ce_a and a_act.n_active > 0:
                    t = ce_loss(tgt_out.probs, a_act.pseudo_labels, a_act.active)
                    if cfg.balance_target_ce:
                        t = scalar(1.0 / a_act.n_active) * t
                    terms.ce_target_anchor = t
                    counts["ce_target_anchor"] = a_act.n_active
                if want_dis_t and a_act.n_active > 0:
                    terms.dis_target = dis_loss(tgt_out.projected,
                                                a_act.pseudo_labels,
                                                a_act.active, state.anchor_set)
                    counts["dis_target"] = a_act.n_active
                if use_prob:
                    t = ce_loss(tgt_out.probs, p_act.pseudo_labels, p_act.active)
                    if cfg.balance_target_ce:
                        t = scalar(1.0 / p_act.n_active) * t
                    terms.ce_target_prob = t
                    counts["ce_target_prob"] = p_act.n_active
        total = combine(terms, cfg.lambda_dis, cfg.lambda_ce)
        breakdown = LossBreakdown.from_terms(terms, total, counts)
        record.update(breakdown.as_record())
        if not math.isfinite(breakdown.total):
            if log:
                log.write({**record, "phase": "diverged"})
            raise TrainingDivergedError(
                f"non-finite loss at stage {state.stage} iteration {i}: "
                f"{breakdown.total}", record)
        opt.zero_grad()
        backward(total)
        opt.step(lr)
        state.iteration = i + 1
        if log:
            log.write(record)
    return model


def adapt(model: SegModel, source: Dataset, target: Dataset, cfg: TrainConfig,
          out_dir=None, log: MetricsLogger | None = None, eval_fn=None,
          start_stage: int = 1, opt_buffers=None,
          stop_after_stage: int | None = None) -> tuple[SegModel, list[dict]]:
    """Run stages start_stage..K, sharing one optimizer across stages.

    With an out_dir, each stage leaves a snapshot, a model checkpoint and an
    optimizer state file, which is everything needed to resume at the next
    stage boundary. eval_fn(model, stage) may add fields to the per-stage
    record.
    """
    records: list[dict] = []
    if cfg.stages == 0 or start_stage > cfg.stages:
        return model, records
    opt = SGD(model.parameters(), cfg.momentum, cfg.weight_decay)
    if opt_buffers is not None:
        opt.load_buffers(opt_buffers)
    L = cfg.iterations_per_stage
    for k in range(start_stage, cfg.stages + 1):
        snap_path = os.path.join(out_dir, f"stage-{k}.snapshot") if out_dir else None
        state = begin_stage(model, source, target, cfg, k, snap_path)
        if cfg.restart_lr_each_stage:
            offset, max_iter = 0, L
        else:
            offset, max_iter = (k - 1) * L, cfg.stages * L
        run_stage(model, state, source, target, cfg, opt, offset, max_iter, log)
        if out_dir:
            save_model(model, os.path.join(out_dir, f"stage-{k}.model"))
            save_optimizer(opt, k * L, os.path.join(out_dir, f"stage-{k}.opt"))
        rec = {"phase": "stage_end", "stage": k,
               "active_anchor_total": state.total_anchor_active,
               "active_prob_total": state.total_prob_active}
        if eval_fn is not None:
            rec.update(eval_fn(model, k))
        records.append(rec)
        if log:
            log.write(rec)
        if stop_after_stage is not None and k >= stop_after_stage:
            break
    return model, records


def run_pipeline(source: Dataset, target: Dataset, cfg: TrainConfig,
                 model_dims: dict | None = None, out_dir=None,
                 log: MetricsLogger | None = None, eval_fn=None,
                 resume_stage: int | None = None,
                 stop_after_stage: int | None = None) -> tuple[SegModel, list[dict]]:
    """The whole program: pretrain, optional warm-up, K stages.

    The target dataset is reduced to its unlabeled view here, so no code
    downstream can read target labels even by accident. resume_stage=k loads
    stage k's checkpoint and optimizer state from out_dir and continues at
    k+1, which reproduces the uninterrupted run exactly.
    """
    target = target.unlabeled_view()
    D = source.grids[0].feature_dim
    dims = dict(model_dims or {})
    if resume_stage is not None:
        if out_dir is None:
            raise ValueError("resuming needs the run directory")
        model = load_model(os.path.join(out_dir, f"stage-{resume_stage}.model"))
        buffers, global_iteration = load_optimizer(
            os.path.join(out_dir, f"stage-{resume_stage}.opt"))
        expected = resume_stage * cfg.iterations_per_stage
        if global_iteration != expected:
            raise OptimizerStateError(
                f"optimizer state is at iteration {global_iteration}, "
                f"but stage {resume_stage} ends at {expected}")
        model, records = adapt(model, source, target, cfg, out_dir, log,
                               eval_fn, start_stage=resume_stage + 1,
                               opt_buffers=buffers,
                               stop_after_stage=stop_after_stage)
    else:
        model = SegModel(D=D, C=source.C, seed=cfg.seed, **dims)
        pretrain(model, source, cfg, log)
        if out_dir:
            save_model(model, os.path.join(out_dir, "pretrain.model"))
        if cfg.enable_warmup and cfg.warmup_iterations > 0:
            disc = Discriminator(F=model.F, hidden=model.hidden, seed=cfg.seed)
            warmup(model, disc, source, target, cfg, log)
        if out_dir:
            save_model(model, os.path.join(out_dir, "warmup.model"))
        model, records = adapt(model, source, target, cfg, out_dir, log,
                               eval_fn, stop_after_stage=stop_after_stage)
    finished = stop_after_stage is None or stop_after_stage >= cfg.stages
    if out_dir and finished:
        save_model(model, os.path.join(out_dir, "final.model"))
    return model, records


def train_source_only(model: SegModel, source: Dataset, cfg: TrainConfig,
                      include_warmup: bool = True) -> SegModel:
    """Supervised mirror of the pipeline's phase structure, CE only.

    Matches the pipeline's samplers, schedules and optimizer boundaries
    exactly, so a pipeline with both loss weights and the adversarial
    weight at zero lands on bit-identical parameters.
    """
    _require_labeled(source, "source-only training")

    def ce_phase(n_iterations, sampler, opt, offset=0, max_iter=None):
        for it in range(n_iterations):
            lr = poly_lr(offset + it, max_iter or n_iterations,
                         cfg.base_lr, cfg.poly_power)
            g = source.grids[sampler.next()]
            out = model.forward(g.features)
            loss = ce_loss(out.probs, g.labels, None)
            opt.zero_grad()
            backward(loss)
            opt.step(lr)

    if cfg.pretrain_iterations > 0:
        ce_phase(cfg.pretrain_iterations,
                 GridSampler(len(source), cfg.seed, TAG_PRETRAIN),
                 SGD(model.parameters(), cfg.momentum, cfg.weight_decay))
    if include_warmup and cfg.warmup_iterations > 0:
        ce_phase(cfg.warmup_iterations,
                 GridSampler(len(source), cfg.seed, TAG_WARMUP_SRC),
                 SGD(model.parameters(), cfg.momentum, cfg.weight_decay))
    if cfg.stages > 0:
        opt = SGD(model.parameters(), cfg.momentum, cfg.weight_decay)
        L = cfg.iterations_per_stage
        for k in range(1, cfg.stages + 1):
            sampler = GridSampler(len(source), cfg.seed, TAG_STAGE_SRC, k)
            if cfg.restart_lr_each_stage:
                ce_phase(L, sampler, opt, 0, L)
            else:
                ce_phase(L, sampler, opt, (k - 1) * L, cfg.stages * L)
    return model
