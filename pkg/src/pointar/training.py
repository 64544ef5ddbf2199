"""Training stages and harnesses.

Stages: self-supervised pre-training on next-patch generation, an
optional supervised post-pre-training pass on a second labeled corpus,
fine-tuning with the generation task kept as an auxiliary objective, and
evaluation / few-shot protocols. A TrainState bundles parameters,
optimizer moments, the rng stream, and the step counter; checkpoints
round-trip all of it bit-exactly.

Determinism: one rng stream per run, consumed in a fixed order (batch
order, then per-item masks / augmentations within the batch), so twin
runs match byte for byte and resuming from an epoch-boundary checkpoint
continues an uninterrupted run exactly.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from pointar.data import AugmentConfig, augment
from pointar.exceptions import ConfigMismatchError, FormatError, NumericError
from pointar.loss import cross_entropy, finetune_loss, generation_loss
from pointar.model import (
    ModelConfig,
    build_dual_mask,
    classification_head,
    extractor_forward,
    generator_forward,
    init_model_params,
    pooled_features,
    predict_patches,
)
from pointar.nncore.layers import init_linear, linear
from pointar.nncore.optim import LRSchedule, OptimizerState, adamw_step, clip_global_norm, cosine_lr
from pointar.nncore import tensor as T
from pointar.nncore.tensor import ParameterSet, Tensor, as_tensor, backward
from pointar.sequencer import (
    SequencerConfig,
    absolute_positional_encoding,
    relative_direction_prompts,
    embed_patches,
    sequence_geometry,
)

__all__ = [
    "PretrainConfig",
    "PostPretrainConfig",
    "FinetuneConfig",
    "TrainState",
    "MetricsLog",
    "EvalResult",
    "FewShotResult",
    "new_state",
    "desk_sequencer_config",
    "pretrain",
    "post_pretrain",
    "finetune",
    "evaluate",
    "few_shot_eval",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"PGCK"
CHECKPOINT_VERSION = 1
CSV_HEADER = "step,lr,loss_total,loss_cd1,loss_cd2,loss_ce"

_DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class PretrainConfig:
    """Desk-scale defaults; the published recipe uses 300 epochs at batch
    128 with the same learning rate and decay."""

    epochs: int = 60
    batch_size: int = 16
    base_lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_frac: float = 0.05
    dual_mask_ratio: float = 0.7
    seed: int = 0
    grad_clip: float = 10.0
    log_every: int = 1
    checkpoint_every: int = 0  # epochs between mid-run checkpoints; 0 = final only
    augment: bool = False
    dtype: str = "float32"
    max_steps: int | None = None  # stop early; the lr schedule still spans all epochs

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.base_lr <= 0.0 or not 0.0 <= self.warmup_frac < 1.0:
            raise ValueError("need base_lr > 0 and warmup_frac in [0, 1)")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {tuple(_DTYPES)}")


@dataclass(frozen=True)
class FinetuneConfig:
    """Supervised stage with the auxiliary generation objective.

    lam = 3 follows the published sweep; lam = 0 recovers a pure
    classification fine-tune. Epoch count and lr are desk-scale choices.
    """

    lam: float = 3.0
    epochs: int = 30
    batch_size: int = 16
    lr: float = 5e-4
    weight_decay: float = 0.05
    warmup_frac: float = 0.05
    seed: int = 0
    grad_clip: float = 10.0
    log_every: int = 1
    augment: bool = False
    freeze: tuple[str, ...] = ()  # parameter-name prefixes excluded from updates

    def __post_init__(self):
        if self.lam < 0.0:
            raise ValueError("lambda must be nonnegative")


@dataclass(frozen=True)
class PostPretrainConfig:
    """Intermediate supervised stage on the second labeled pool."""

    epochs: int = 20
    batch_size: int = 16
    lr: float = 5e-4
    weight_decay: float = 0.05
    warmup_frac: float = 0.05
    seed: int = 0
    grad_clip: float = 10.0
    log_every: int = 1
    augment: bool = False


@dataclass
class StepRecord:
    step: int
    lr: float
    loss_total: float
    loss_cd1: float
    loss_cd2: float
    loss_ce: float


@dataclass
class MetricsLog:
    steps: list[StepRecord] = field(default_factory=list)
    evals: list[tuple[int, str, float]] = field(default_factory=list)  # (epoch, split, acc)

    def append_step(self, record: StepRecord) -> None:
        if self.steps and record.step <= self.steps[-1].step:
            raise ValueError("metric steps must be strictly increasing")
        self.steps.append(record)

    def to_csv(self, path) -> None:
        lines = [CSV_HEADER]
        for r in self.steps:
            lines.append(
                f"{r.step},{r.lr!r},{r.loss_total!r},{r.loss_cd1!r},{r.loss_cd2!r},{r.loss_ce!r}"
            )
        Path(path).write_text("\n".join(lines) + "\n")

    def eval_to_csv(self, path) -> None:
        lines = ["epoch,split,accuracy"]
        for epoch, split, acc in self.evals:
            lines.append(f"{epoch},{split},{acc!r}")
        Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class TrainState:
    model_cfg: ModelConfig
    seq_cfg: SequencerConfig
    params: ParameterSet
    opt: OptimizerState
    rng: np.random.Generator
    step: int = 0
    seed: int = 0

    @property
    def dtype(self):
        first = next(iter(self.params.values()))
        return first.data.dtype

    def clone(self) -> "TrainState":
        """Deep copy; stages never mutate their input state."""
        params = ParameterSet()
        for name, p in self.params.items():
            params.add(name, p.data.copy())
        opt = OptimizerState(
            beta1=self.opt.beta1,
            beta2=self.opt.beta2,
            eps=self.opt.eps,
            weight_decay=self.opt.weight_decay,
            step=self.opt.step,
            m={k: v.copy() for k, v in self.opt.m.items()},
            v={k: v.copy() for k, v in self.opt.v.items()},
        )
        rng = np.random.Generator(np.random.PCG64())
        rng.bit_generator.state = self.rng.bit_generator.state
        return TrainState(
            model_cfg=self.model_cfg,
            seq_cfg=self.seq_cfg,
            params=params,
            opt=opt,
            rng=rng,
            step=self.step,
            seed=self.seed,
        )


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    per_class: dict[int, float]
    count: int


@dataclass(frozen=True)
class FewShotResult:
    mean: float
    std: float
    per_trial: tuple[float, ...]
    ways: int
    shots: int

    def __str__(self) -> str:
        return f"{100 * self.mean:.2f}±{100 * self.std:.2f}"


def desk_sequencer_config(**overrides) -> SequencerConfig:
    return SequencerConfig(**overrides)


def new_state(
    model_cfg: ModelConfig,
    seq_cfg: SequencerConfig,
    seed: int = 0,
    dtype: str = "float64",
    weight_decay: float = 0.05,
) -> TrainState:
    """Fresh parameters plus a training rng stream derived from the seed."""
    np_dtype = _DTYPES[dtype] if isinstance(dtype, str) else dtype
    init_rng = np.random.default_rng([seed, 0])
    params = init_model_params(model_cfg, seq_cfg, init_rng, np_dtype)
    opt = OptimizerState.for_params(params, weight_decay)
    return TrainState(
        model_cfg=model_cfg,
        seq_cfg=seq_cfg,
        params=params,
        opt=opt,
        rng=np.random.default_rng([seed, 1]),
        seed=seed,
    )


# -- batched forward helpers ----------------------------------------------


def _batch_geometry(records, seq_cfg, indices, dtype, aug_rng=None, aug_cfg=None):
    """Stack sorted centers and normalized patches for a batch of records."""
    centers, patches, ids = [], [], []
    for i in indices:
        rec = records[int(i)]
        pts = rec.points
        if aug_rng is not None:
            pts = augment(rec, aug_rng, aug_cfg or AugmentConfig()).points
        _, c, p = sequence_geometry(pts.astype(np.float64), seq_cfg)
        centers.append(c)
        patches.append(p)
        ids.append(int(i))
    return np.stack(centers), np.stack(patches).astype(dtype), ids


def _encodings(centers, channels, dtype):
    ape = absolute_positional_encoding(centers, channels).astype(dtype)
    rdp = relative_direction_prompts(centers, channels).astype(dtype)
    return ape, rdp


def _pretrain_batch_loss(state: TrainState, centers, patches):
    """Generation loss for one batch: fresh per-item dual masks."""
    cfg = state.model_cfg
    bsz, n = patches.shape[0], patches.shape[1]
    ape, rdp = _encodings(centers, cfg.channels, patches.dtype)
    masks = np.stack(
        [build_dual_mask(n, cfg.dual_mask_ratio, state.rng).matrix for _ in range(bsz)]
    )
    tokens = embed_patches(patches, state.params)
    latents = extractor_forward(tokens, ape, masks, state.params, cfg)
    generated = generator_forward(latents[:, :-1, :], rdp, state.params, cfg)
    predicted = predict_patches(generated, state.params, cfg.points_per_patch)
    return generation_loss(predicted, patches[:, 1:])


def _supervised_batch_loss(state: TrainState, centers, patches, labels, lam: float):
    """Cross-entropy plus lam * generation loss with the causal-only mask."""
    cfg = state.model_cfg.with_mode("finetune")
    ape, rdp = _encodings(centers, cfg.channels, patches.dtype)
    tokens = embed_patches(patches, state.params)
    latents = extractor_forward(tokens, ape, None, state.params, cfg)
    logits = classification_head(latents, state.params)
    ce = cross_entropy(logits, labels)
    if lam > 0.0:
        generated = generator_forward(latents[:, :-1, :], rdp, state.params, cfg)
        predicted = predict_patches(generated, state.params, cfg.points_per_patch)
        lg, cd1, cd2 = generation_loss(predicted, patches[:, 1:])
        total = finetune_loss(ce, lg, lam)
        return total, ce, cd1, cd2
    zero = as_tensor(np.zeros((), dtype=patches.dtype))
    return ce, ce, zero, zero


def _check_finite(value: float, step: int, batch_ids) -> None:
    if not np.isfinite(value):
        raise NumericError(
            f"non-finite loss {value!r} at step {step}; batch records {list(batch_ids)}"
        )


def _trainable(params: ParameterSet, freeze: tuple[str, ...]) -> ParameterSet:
    """View of the parameters whose names match no frozen prefix."""
    if not freeze:
        return params
    keep = ParameterSet()
    for name, p in params.items():
        if not any(name.startswith(prefix) for prefix in freeze):
            keep._params[name] = p  # shares tensors with the full set
    return keep


# -- stages ----------------------------------------------------------------


def pretrain(
    records,
    state: TrainState,
    cfg: PretrainConfig,
    outdir=None,
) -> tuple[TrainState, MetricsLog]:
    """Auto-regressive pre-training; resumes from state.step if nonzero.

    Writes ``checkpoint.pgck`` and ``metrics.csv`` under ``outdir`` when given.
    """
    if len(records) == 0:
        raise ValueError("pre-training dataset is empty")
    if abs(cfg.dual_mask_ratio - state.model_cfg.dual_mask_ratio) > 1e-12:
        state = TrainState(
            model_cfg=replace(state.model_cfg, dual_mask_ratio=cfg.dual_mask_ratio),
            seq_cfg=state.seq_cfg,
            params=state.params,
            opt=state.opt,
            rng=state.rng,
            step=state.step,
            seed=state.seed,
        )
    log = MetricsLog()
    dtype = state.dtype
    steps_per_epoch = (len(records) + cfg.batch_size - 1) // cfg.batch_size
    schedule = LRSchedule(
        base_lr=cfg.base_lr,
        warmup_steps=int(round(cfg.warmup_frac * cfg.epochs * steps_per_epoch)),
        total_steps=max(cfg.epochs * steps_per_epoch, 1),
    )
    geo_cache = None
    if not cfg.augment:
        geo_cache = [
            sequence_geometry(r.points.astype(np.float64), state.seq_cfg) for r in records
        ]
    start_epoch = state.step // steps_per_epoch
    for epoch in range(start_epoch, cfg.epochs):
        if cfg.max_steps is not None and state.step >= cfg.max_steps:
            break
        order = state.rng.permutation(len(records))
        for lo in range(0, len(records), cfg.batch_size):
            if cfg.max_steps is not None and state.step >= cfg.max_steps:
                break
            batch = order[lo : lo + cfg.batch_size]
            if cfg.augment:
                centers, patches, ids = _batch_geometry(
                    records, state.seq_cfg, batch, dtype, aug_rng=state.rng
                )
            else:
                centers = np.stack([geo_cache[int(i)][1] for i in batch])
                patches = np.stack([geo_cache[int(i)][2] for i in batch]).astype(dtype)
                ids = [int(i) for i in batch]
            lr = cosine_lr(state.step, schedule)
            lg, cd1, cd2 = _pretrain_batch_loss(state, centers, patches)
            total = float(lg.data)
            _check_finite(total, state.step, ids)
            backward(lg, state.params)
            clip_global_norm(state.params, cfg.grad_clip)
            adamw_step(state.params, state.opt, lr)
            state.step += 1
            if state.step % cfg.log_every == 0:
                log.append_step(
                    StepRecord(state.step, lr, total, float(cd1.data), float(cd2.data), 0.0)
                )
        if (
            outdir is not None
            and cfg.checkpoint_every > 0
            and (epoch + 1) % cfg.checkpoint_every == 0
            and epoch + 1 < cfg.epochs
        ):
            save_checkpoint(Path(outdir) / f"checkpoint_epoch{epoch + 1:04d}.pgck", state)
    if outdir is not None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(outdir / "checkpoint.pgck", state)
        log.to_csv(outdir / "metrics.csv")
    return state, log


def _supervised_stage(
    records,
    state: TrainState,
    *,
    epochs: int,
    batch_size: int,
    lr: float,
    warmup_frac: float,
    grad_clip: float,
    log_every: int,
    lam: float,
    augment_flag: bool,
    freeze: tuple[str, ...] = (),
    eval_records=None,
    log: MetricsLog | None = None,
) -> tuple[TrainState, MetricsLog]:
    if len(records) == 0:
        raise ValueError("training dataset is empty")
    labels = np.array([r.label for r in records], dtype=np.int64)
    if labels.max(initial=0) >= state.model_cfg.num_classes:
        raise ValueError(
            f"dataset has label {labels.max()} but the model head has "
            f"{state.model_cfg.num_classes} classes"
        )
    log = log if log is not None else MetricsLog()
    dtype = state.dtype
    trainable = _trainable(state.params, freeze)
    steps_per_epoch = (len(records) + batch_size - 1) // batch_size
    schedule = LRSchedule(
        base_lr=lr,
        warmup_steps=int(round(warmup_frac * epochs * steps_per_epoch)),
        total_steps=max(epochs * steps_per_epoch, 1),
    )
    geo_cache = None
    if not augment_flag:
        geo_cache = [
            sequence_geometry(r.points.astype(np.float64), state.seq_cfg) for r in records
        ]
    local_step = 0
    for epoch in range(epochs):
        order = state.rng.permutation(len(records))
        for lo in range(0, len(records), batch_size):
            batch = order[lo : lo + batch_size]
            if augment_flag:
                centers, patches, ids = _batch_geometry(
                    records, state.seq_cfg, batch, dtype, aug_rng=state.rng
                )
            else:
                centers = np.stack([geo_cache[int(i)][1] for i in batch])
                patches = np.stack([geo_cache[int(i)][2] for i in batch]).astype(dtype)
                ids = [int(i) for i in batch]
            step_lr = cosine_lr(local_step, schedule)
            total, ce, cd1, cd2 = _supervised_batch_loss(
                state, centers, patches, labels[batch], lam
            )
            value = float(total.data)
            _check_finite(value, state.step, ids)
            backward(total, state.params)
            clip_global_norm(trainable, grad_clip)
            adamw_step(trainable, state.opt, step_lr)
            local_step += 1
            state.step += 1
            if state.step % log_every == 0:
                log.append_step(
                    StepRecord(
                        state.step,
                        step_lr,
                        value,
                        float(cd1.data),
                        float(cd2.data),
                        float(ce.data),
                    )
                )
        if eval_records is not None:
            result = evaluate(eval_records, state)
            log.evals.append((epoch + 1, "val", result.accuracy))
    return state, log


def post_pretrain(
    records,
    state: TrainState,
    cfg: PostPretrainConfig,
    eval_records=None,
    outdir=None,
) -> tuple[TrainState, MetricsLog]:
    """Supervised classification on the labeled pool, causal mask only."""
    out = state.clone()
    out.opt = OptimizerState.for_params(out.params, cfg.weight_decay)
    out.step = 0
    out.rng = np.random.default_rng([cfg.seed, 2])
    out, log = _supervised_stage(
        records,
        out,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        lr=cfg.lr,
        warmup_frac=cfg.warmup_frac,
        grad_clip=cfg.grad_clip,
        log_every=cfg.log_every,
        lam=0.0,
        augment_flag=cfg.augment,
        eval_records=eval_records,
    )
    if outdir is not None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(outdir / "checkpoint.pgck", out)
        log.to_csv(outdir / "metrics.csv")
    return out, log


def finetune(
    records,
    state: TrainState,
    cfg: FinetuneConfig,
    eval_records=None,
    outdir=None,
) -> tuple[TrainState, MetricsLog]:
    """Fine-tune with loss = cross-entropy + lam * generation loss.

    The extractor runs causal-only; the generator and prediction head stay
    alive to compute the auxiliary objective and are simply unused at
    inference.
    """
    out = state.clone()
    out.opt = OptimizerState.for_params(out.params, cfg.weight_decay)
    out.step = 0
    out.rng = np.random.default_rng([cfg.seed, 3])
    out, log = _supervised_stage(
        records,
        out,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        lr=cfg.lr,
        warmup_frac=cfg.warmup_frac,
        grad_clip=cfg.grad_clip,
        log_every=cfg.log_every,
        lam=cfg.lam,
        augment_flag=cfg.augment,
        freeze=cfg.freeze,
        eval_records=eval_records,
    )
    if outdir is not None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(outdir / "checkpoint.pgck", out)
        log.to_csv(outdir / "metrics.csv")
    return out, log


# -- evaluation -------------------------------------------------------------


def _logits_for_records(state: TrainState, records, batch_size: int = 32) -> np.ndarray:
    cfg = state.model_cfg.with_mode("inference")
    dtype = state.dtype
    outputs = []
    for lo in range(0, len(records), batch_size):
        chunk = records[lo : lo + batch_size]
        centers, patches, _ = _batch_geometry(
            chunk, state.seq_cfg, range(len(chunk)), dtype
        )
        ape, _ = _encodings(centers, cfg.channels, dtype)
        tokens = embed_patches(patches, state.params)
        latents = extractor_forward(tokens, ape, None, state.params, cfg)
        outputs.append(classification_head(latents, state.params).data)
    return np.concatenate(outputs, axis=0)


def evaluate(records, state: TrainState, batch_size: int = 32) -> EvalResult:
    """Deterministic accuracy over a labeled split; no augmentation."""
    if len(records) == 0:
        raise ValueError("cannot evaluate an empty split")
    logits = _logits_for_records(state, records, batch_size)
    preds = logits.argmax(axis=-1)
    truth = np.array([r.label for r in records], dtype=np.int64)
    per_class: dict[int, float] = {}
    for cls in sorted(set(int(t) for t in truth)):
        sel = truth == cls
        per_class[cls] = float((preds[sel] == cls).mean())
    return EvalResult(
        accuracy=float((preds == truth).mean()), per_class=per_class, count=len(records)
    )


# -- few-shot protocol -------------------------------------------------------


def _extract_features(state: TrainState, records, cache: dict | None = None) -> np.ndarray:
    """Pooled extractor features (2D per record), causal mask, frozen params."""
    missing = [r for r in records if cache is None or id(r) not in cache]
    if missing:
        cfg = state.model_cfg.with_mode("inference")
        dtype = state.dtype
        for lo in range(0, len(missing), 32):
            chunk = missing[lo : lo + 32]
            centers, patches, _ = _batch_geometry(chunk, state.seq_cfg, range(len(chunk)), dtype)
            ape, _ = _encodings(centers, cfg.channels, dtype)
            tokens = embed_patches(patches, state.params)
            latents = extractor_forward(tokens, ape, None, state.params, cfg)
            feats = pooled_features(latents).data
            for rec, f in zip(chunk, feats):
                if cache is not None:
                    cache[id(rec)] = f
        if cache is None:
            raise AssertionError("feature cache required")
    return np.stack([cache[id(r)] for r in records])


def _init_head(dim: int, ways: int, rng: np.random.Generator, dtype) -> ParameterSet:
    head = ParameterSet()
    init_linear(head, "fs.fc1", 2 * dim, dim, rng, dtype)
    init_linear(head, "fs.fc2", dim, ways, rng, dtype)
    return head


def _head_logits(features, head: ParameterSet) -> Tensor:
    hidden = T.relu(linear(as_tensor(features), head, "fs.fc1"))
    return linear(hidden, head, "fs.fc2")


def _adapt_head(
    features: np.ndarray,
    targets: np.ndarray,
    ways: int,
    dim: int,
    rng: np.random.Generator,
    dtype,
    epochs: int = 150,
    lr: float = 1e-2,
) -> ParameterSet:
    """Train a fresh w-way head on frozen support features (full batch)."""
    head = _init_head(dim, ways, rng, dtype)
    opt = OptimizerState.for_params(head, weight_decay=0.0)
    schedule = LRSchedule(base_lr=lr, warmup_steps=0, total_steps=epochs)
    feats = features.astype(dtype)
    for step in range(epochs):
        ce = cross_entropy(_head_logits(feats, head), targets)
        backward(ce, head)
        adamw_step(head, opt, cosine_lr(step, schedule))
    return head


def few_shot_eval(
    records,
    state: TrainState,
    ways: int,
    shots: int,
    trials: int = 10,
    queries_per_class: int = 20,
    seed: int = 0,
    freeze_extractor: bool = True,
    labels=None,
) -> FewShotResult:
    """w-way s-shot protocol with independent trials.

    Per trial: sample ``ways`` classes, ``shots`` support records each,
    adapt a fresh classification head (extractor frozen by default; set
    ``freeze_extractor=False`` to fine-tune everything), then score on
    ``queries_per_class`` held-out records per class. Query record labels
    are only read after all query predictions exist.
    """
    if ways < 1 or shots < 1 or trials < 1:
        raise ValueError("ways, shots, and trials must be positive")
    if labels is None:
        labels = [r.label for r in records]
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.array(sorted(set(int(c) for c in labels)))
    need = shots + queries_per_class
    eligible = [c for c in classes if (labels == c).sum() >= need]
    if len(eligible) < ways:
        raise ValueError(
            f"need {ways} classes with at least {need} records each; only "
            f"{len(eligible)} qualify"
        )
    eligible = np.array(eligible)
    cache: dict = {}
    accs = []
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        chosen = eligible[rng.choice(eligible.size, size=ways, replace=False)]
        support_records, query_records, support_targets = [], [], []
        for way, cls in enumerate(chosen):
            pool = np.flatnonzero(labels == cls)
            sel = pool[rng.choice(pool.size, size=need, replace=False)]
            support_records += [records[int(i)] for i in sel[:shots]]
            query_records += [records[int(i)] for i in sel[shots:]]
            support_targets += [way] * shots
        support_targets = np.array(support_targets, dtype=np.int64)

        if freeze_extractor:
            sup_feats = _extract_features(state, support_records, cache)
            head = _adapt_head(
                sup_feats, support_targets, ways, state.model_cfg.channels, rng, state.dtype
            )
            query_feats = _extract_features(state, query_records, cache)
            logits = _head_logits(query_feats.astype(state.dtype), head).data
        else:
            adapted, head = _full_adapt(
                state, support_records, support_targets, ways, rng
            )
            query_feats = _extract_features(adapted, query_records, {})
            logits = _head_logits(query_feats.astype(state.dtype), head).data

        predicted_classes = chosen[logits.argmax(axis=-1)]
        # evaluation: query labels are read here, after prediction
        truth = np.array([rec.label for rec in query_records], dtype=np.int64)
        accs.append(float((predicted_classes == truth).mean()))
    accs = np.array(accs)
    return FewShotResult(
        mean=float(accs.mean()),
        std=float(accs.std()),
        per_trial=tuple(accs.tolist()),
        ways=ways,
        shots=shots,
    )


def _full_adapt(state: TrainState, support_records, targets, ways, rng, epochs: int = 30, lr: float = 5e-4):
    """Fine-tune a copy of the whole model plus a fresh w-way head."""
    adapted = state.clone()
    head = _init_head(adapted.model_cfg.channels, ways, rng, adapted.dtype)
    joint = ParameterSet()
    joint.merge(adapted.params)
    joint.merge(head)
    opt = OptimizerState.for_params(joint, weight_decay=0.0)
    cfg = adapted.model_cfg.with_mode("finetune")
    dtype = adapted.dtype
    centers, patches, _ = _batch_geometry(
        support_records, adapted.seq_cfg, range(len(support_records)), dtype
    )
    ape, _ = _encodings(centers, cfg.channels, dtype)
    schedule = LRSchedule(base_lr=lr, warmup_steps=0, total_steps=epochs)
    for step in range(epochs):
        tokens = embed_patches(patches, adapted.params)
        latents = extractor_forward(tokens, ape, None, adapted.params, cfg)
        ce = cross_entropy(_head_logits(pooled_features(latents), head), targets)
        backward(ce, joint)
        adamw_step(joint, opt, cosine_lr(step, schedule))
    return adapted, head


# -- checkpoints -------------------------------------------------------------

_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2, np.dtype(np.uint64): 3}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def _config_text(state: TrainState) -> str:
    m, s = state.model_cfg, state.seq_cfg
    entries = {
        "model.channels": m.channels,
        "model.heads": m.heads,
        "model.extractor_depth": m.extractor_depth,
        "model.generator_depth": m.generator_depth,
        "model.dual_mask_ratio": repr(m.dual_mask_ratio),
        "model.points_per_patch": m.points_per_patch,
        "model.num_classes": m.num_classes,
        "model.mode": m.mode,
        "model.dropout": repr(m.dropout),
        "seq.num_points": s.num_points,
        "seq.num_patches": s.num_patches,
        "seq.points_per_patch": s.points_per_patch,
        "seq.channels": s.channels,
        "train.step": state.step,
        "train.seed": state.seed,
        "opt.beta1": repr(state.opt.beta1),
        "opt.beta2": repr(state.opt.beta2),
        "opt.eps": repr(state.opt.eps),
        "opt.weight_decay": repr(state.opt.weight_decay),
        "opt.step": state.opt.step,
    }
    return "".join(f"{k} = {v}\n" for k, v in sorted(entries.items()))


def _parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition(" = ")
        out[key] = value
    return out


def _write_tensor(fh, name: str, arr: np.ndarray) -> None:
    code = _DTYPE_CODES[arr.dtype]
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<BB", code, arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(np.ascontiguousarray(arr).tobytes())


def _read_tensor(fh):
    head = fh.read(2)
    if not head:
        return None  # clean EOF
    if len(head) != 2:
        raise FormatError("checkpoint truncated in tensor header")
    (name_len,) = struct.unpack("<H", head)
    name = _read_exact(fh, name_len).decode("utf-8")
    code, rank = struct.unpack("<BB", _read_exact(fh, 2))
    if code not in _CODE_DTYPES:
        raise FormatError(f"checkpoint tensor {name!r} has unknown dtype code {code}")
    dims = [struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(rank)]
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(dims)) if dims else 1
    raw = _read_exact(fh, count * dtype.itemsize)
    arr = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()
    return name, arr


def _read_exact(fh, size: int) -> bytes:
    buf = fh.read(size)
    if len(buf) != size:
        raise FormatError("checkpoint file is truncated")
    return buf


def _rng_state_tensors(rng: np.random.Generator) -> list[tuple[str, np.ndarray]]:
    st = rng.bit_generator.state
    if st.get("bit_generator") != "PCG64":
        raise ValueError("only PCG64 rng state is supported")
    def split128(value: int) -> tuple[int, int]:
        return value >> 64, value & ((1 << 64) - 1)
    s_hi, s_lo = split128(st["state"]["state"])
    i_hi, i_lo = split128(st["state"]["inc"])
    return [
        ("rng.pcg64", np.array([s_hi, s_lo, i_hi, i_lo], dtype=np.uint64)),
        (
            "rng.aux",
            np.array([st["has_uint32"], st["uinteger"]], dtype=np.uint64),
        ),
    ]


def _rng_from_tensors(pcg: np.ndarray, aux: np.ndarray) -> np.random.Generator:
    state = {
        "bit_generator": "PCG64",
        "state": {
            "state": (int(pcg[0]) << 64) | int(pcg[1]),
            "inc": (int(pcg[2]) << 64) | int(pcg[3]),
        },
        "has_uint32": int(aux[0]),
        "uinteger": int(aux[1]),
    }
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = state
    return rng


def save_checkpoint(path, state: TrainState) -> None:
    """Binary checkpoint: magic, version, config block, then tensors.

    Tensor payloads keep their native dtype (tagged with a one-byte code)
    so float64 training round-trips exactly.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    config = _config_text(state).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(config)))
        fh.write(config)
        for name, p in state.params.items():
            _write_tensor(fh, f"param.{name}", p.data)
        for name in state.params.names():
            _write_tensor(fh, f"opt.m.{name}", state.opt.m[name])
        for name in state.params.names():
            _write_tensor(fh, f"opt.v.{name}", state.opt.v[name])
        for name, arr in _rng_state_tensors(state.rng):
            _write_tensor(fh, name, arr)


def load_checkpoint(path, expect_model: ModelConfig | None = None,
                    expect_seq: SequencerConfig | None = None) -> TrainState:
    path = Path(path)
    with path.open("rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: bad magic, not a checkpoint")
        (version,) = struct.unpack("<H", _read_exact(fh, 2))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        (config_len,) = struct.unpack("<I", _read_exact(fh, 4))
        cfg = _parse_config_text(_read_exact(fh, config_len).decode("utf-8"))
        tensors = {}
        while True:
            item = _read_tensor(fh)
            if item is None:
                break
            tensors[item[0]] = item[1]

    model_cfg = ModelConfig(
        channels=int(cfg["model.channels"]),
        heads=int(cfg["model.heads"]),
        extractor_depth=int(cfg["model.extractor_depth"]),
        generator_depth=int(cfg["model.generator_depth"]),
        dual_mask_ratio=float(cfg["model.dual_mask_ratio"]),
        points_per_patch=int(cfg["model.points_per_patch"]),
        num_classes=int(cfg["model.num_classes"]),
        mode=cfg["model.mode"],
        dropout=float(cfg["model.dropout"]),
    )
    seq_cfg = SequencerConfig(
        num_points=int(cfg["seq.num_points"]),
        num_patches=int(cfg["seq.num_patches"]),
        points_per_patch=int(cfg["seq.points_per_patch"]),
        channels=int(cfg["seq.channels"]),
    )
    if expect_model is not None and expect_model != model_cfg:
        raise ConfigMismatchError(
            f"{path}: checkpoint model config {model_cfg} does not match requested {expect_model}"
        )
    if expect_seq is not None and expect_seq != seq_cfg:
        raise ConfigMismatchError(
            f"{path}: checkpoint sequencer config {seq_cfg} does not match requested {expect_seq}"
        )

    params = ParameterSet()
    opt = OptimizerState(
        beta1=float(cfg["opt.beta1"]),
        beta2=float(cfg["opt.beta2"]),
        eps=float(cfg["opt.eps"]),
        weight_decay=float(cfg["opt.weight_decay"]),
        step=int(cfg["opt.step"]),
    )
    for name, arr in tensors.items():
        if name.startswith("param."):
            params.add(name[len("param."):], arr)
        elif name.startswith("opt.m."):
            opt.m[name[len("opt.m."):]] = arr
        elif name.startswith("opt.v."):
            opt.v[name[len("opt.v."):]] = arr
    missing = [n for n in params.names() if n not in opt.m or n not in opt.v]
    if missing or "rng.pcg64" not in tensors or "rng.aux" not in tensors:
        raise FormatError(f"{path}: checkpoint is missing tensors")
    rng = _rng_from_tensors(tensors["rng.pcg64"], tensors["rng.aux"])
    return TrainState(
        model_cfg=model_cfg,
        seq_cfg=seq_cfg,
        params=params,
        opt=opt,
        rng=rng,
        step=int(cfg["train.step"]),
        seed=int(cfg["train.seed"]),
    )
