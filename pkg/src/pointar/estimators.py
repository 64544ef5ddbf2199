"""scikit-learn style front end.

SequencePretrainer is a transformer: fit() runs self-supervised
pre-training on raw clouds, transform() yields pooled latent features
ready for any downstream sklearn estimator. PointCloudClassifier is a
classifier: fit() fine-tunes (optionally from a pretrained state or
checkpoint file) with the auxiliary generation objective, predict()
returns labels.

Both follow the usual conventions: __init__ stores hyperparameters
verbatim (so get_params/set_params/clone work), fitted state lives in
trailing-underscore attributes.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin

from pointar import training
from pointar.data import CloudRecord
from pointar.model import ModelConfig
from pointar.sequencer import SequencerConfig
from pointar.validation import check_clouds, check_fitted, check_labels

__all__ = ["SequencePretrainer", "PointCloudClassifier"]


def _records_from(clouds, labels=None) -> list[CloudRecord]:
    if labels is None:
        labels = np.zeros(len(clouds), dtype=np.int64)
    return [
        CloudRecord(points=c.astype(np.float32), label=int(lab))
        for c, lab in zip(clouds, labels)
    ]


def _seq_config(clouds, num_patches, points_per_patch, channels) -> SequencerConfig:
    min_points = min(c.shape[0] for c in clouds)
    return SequencerConfig(
        num_points=min_points,
        num_patches=num_patches,
        points_per_patch=points_per_patch,
        channels=channels,
    )


class SequencePretrainer(TransformerMixin, BaseEstimator):
    """Self-supervised pre-training as a feature transformer.

    fit(X) learns to generate each next patch from its Morton-ordered
    prefix; transform(X) returns the frozen extractor's pooled latents,
    one (2 * channels)-vector per cloud.

    Parameters mirror the training configuration; see
    ``pointar.training.PretrainConfig`` for semantics.
    """

    def __init__(
        self,
        channels: int = 96,
        heads: int = 4,
        extractor_depth: int = 4,
        generator_depth: int = 4,
        num_patches: int = 64,
        points_per_patch: int = 32,
        dual_mask_ratio: float = 0.7,
        epochs: int = 10,
        batch_size: int = 16,
        base_lr: float = 1e-3,
        weight_decay: float = 0.05,
        warmup_frac: float = 0.05,
        seed: int = 0,
        dtype: str = "float32",
    ):
        self.channels = channels
        self.heads = heads
        self.extractor_depth = extractor_depth
        self.generator_depth = generator_depth
        self.num_patches = num_patches
        self.points_per_patch = points_per_patch
        self.dual_mask_ratio = dual_mask_ratio
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.weight_decay = weight_decay
        self.warmup_frac = warmup_frac
        self.seed = seed
        self.dtype = dtype

    def fit(self, X, y=None):
        clouds = check_clouds(X, min_points=max(self.num_patches, self.points_per_patch))
        seq_cfg = _seq_config(clouds, self.num_patches, self.points_per_patch, self.channels)
        model_cfg = ModelConfig(
            channels=self.channels,
            heads=self.heads,
            extractor_depth=self.extractor_depth,
            generator_depth=self.generator_depth,
            dual_mask_ratio=self.dual_mask_ratio,
            points_per_patch=self.points_per_patch,
        )
        state = training.new_state(
            model_cfg, seq_cfg, seed=self.seed, dtype=self.dtype,
            weight_decay=self.weight_decay,
        )
        cfg = training.PretrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            base_lr=self.base_lr,
            weight_decay=self.weight_decay,
            warmup_frac=self.warmup_frac,
            dual_mask_ratio=self.dual_mask_ratio,
            seed=self.seed,
            dtype=self.dtype,
        )
        self.state_, self.history_ = training.pretrain(_records_from(clouds), state, cfg)
        return self

    def transform(self, X) -> np.ndarray:
        check_fitted(self, "state_")
        clouds = check_clouds(X, min_points=max(self.num_patches, self.points_per_patch))
        records = _records_from(clouds)
        cache: dict = {}
        return training._extract_features(self.state_, records, cache).astype(np.float64)

    def save_checkpoint(self, path) -> None:
        check_fitted(self, "state_")
        training.save_checkpoint(Path(path), self.state_)


class PointCloudClassifier(ClassifierMixin, BaseEstimator):
    """Shape classifier fine-tuned with the auxiliary generation loss.

    ``pretrained`` may be None (train from scratch), a fitted
    SequencePretrainer, a training.TrainState, or a checkpoint path.
    ``lam`` weights the generation objective; 0 is a plain classifier.
    """

    def __init__(
        self,
        pretrained=None,
        lam: float = 3.0,
        epochs: int = 30,
        batch_size: int = 16,
        lr: float = 5e-4,
        weight_decay: float = 0.05,
        warmup_frac: float = 0.05,
        seed: int = 0,
        channels: int = 96,
        heads: int = 4,
        extractor_depth: int = 4,
        generator_depth: int = 4,
        num_patches: int = 64,
        points_per_patch: int = 32,
        dtype: str = "float32",
        freeze_extractor: bool = False,
    ):
        self.pretrained = pretrained
        self.lam = lam
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup_frac = warmup_frac
        self.seed = seed
        self.channels = channels
        self.heads = heads
        self.extractor_depth = extractor_depth
        self.generator_depth = generator_depth
        self.num_patches = num_patches
        self.points_per_patch = points_per_patch
        self.dtype = dtype
        self.freeze_extractor = freeze_extractor

    def _base_state(self, clouds, num_classes: int) -> training.TrainState:
        source = self.pretrained
        if isinstance(source, SequencePretrainer):
            source = source.state_
        if isinstance(source, (str, Path)):
            source = training.load_checkpoint(source)
        if source is None:
            seq_cfg = _seq_config(clouds, self.num_patches, self.points_per_patch, self.channels)
            model_cfg = ModelConfig(
                channels=self.channels,
                heads=self.heads,
                extractor_depth=self.extractor_depth,
                generator_depth=self.generator_depth,
                points_per_patch=self.points_per_patch,
                num_classes=num_classes,
            )
            return training.new_state(
                model_cfg, seq_cfg, seed=self.seed, dtype=self.dtype,
                weight_decay=self.weight_decay,
            )
        state = source.clone()
        if state.model_cfg.num_classes != num_classes:
            state = _with_fresh_head(state, num_classes, self.seed)
        return state

    def fit(self, X, y):
        clouds = check_clouds(X, min_points=max(self.num_patches, self.points_per_patch))
        y = check_labels(y, len(clouds))
        self.classes_, encoded = np.unique(y, return_inverse=True)
        state = self._base_state(clouds, num_classes=len(self.classes_))
        records = _records_from(clouds, encoded)
        cfg = training.FinetuneConfig(
            lam=self.lam,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            weight_decay=self.weight_decay,
            warmup_frac=self.warmup_frac,
            seed=self.seed,
            freeze=("embed", "extractor") if self.freeze_extractor else (),
        )
        self.state_, self.history_ = training.finetune(records, state, cfg)
        return self

    def decision_function(self, X) -> np.ndarray:
        check_fitted(self, "state_")
        clouds = check_clouds(X, min_points=max(self.num_patches, self.points_per_patch))
        return training._logits_for_records(self.state_, _records_from(clouds))

    def predict_proba(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        shifted = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        return self.classes_[self.decision_function(X).argmax(axis=-1)]


def _with_fresh_head(state: training.TrainState, num_classes: int, seed: int) -> training.TrainState:
    """Swap the classification head for a freshly initialized one."""
    from dataclasses import replace

    from pointar.nncore.layers import init_linear
    from pointar.nncore.optim import OptimizerState
    from pointar.nncore.tensor import ParameterSet

    rng = np.random.default_rng([seed, 4])
    dim = state.model_cfg.channels
    params = ParameterSet()
    for name, p in state.params.items():
        if not name.startswith("cls."):
            params.add(name, p.data.copy())
    init_linear(params, "cls.fc1", 2 * dim, dim, rng, state.dtype)
    init_linear(params, "cls.fc2", dim, num_classes, rng, state.dtype)
    return training.TrainState(
        model_cfg=replace(state.model_cfg, num_classes=num_classes),
        seq_cfg=state.seq_cfg,
        params=params,
        opt=OptimizerState.for_params(params, state.opt.weight_decay),
        rng=np.random.default_rng([seed, 5]),
        step=0,
        seed=seed,
    )
