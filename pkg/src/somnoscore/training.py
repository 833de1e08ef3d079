"""Weighted cross-entropy training with validation-driven checkpointing.

The rare-but-clinically-telling N1 stage gets a per-class loss weight
of 5.0 against 0.9 for the other four stages, so the objective is

    loss = (1/B) * sum_m w[y_m] * (-log softmax(logits_m)[y_m])

mean-reduced over the batch with the weights left unnormalized.

Runs are replayable: the batch visited at iteration k is a pure
function of (seed, k), validation never touches optimizer state, and
checkpoints carry the Adam moments, so a run stopped at iteration k
and resumed to k+j is bit-identical (single-threaded) to a straight
k+j-iteration run.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import (
    BadLabel,
    ConfigError,
    ConfigMismatch,
    DivergedLoss,
    EmptySplit,
)
from .metrics import build_report
from .model import ModelConfig, forward, init_params, load_params, save_params
from .optim import Adam
from .store import EpochStore, batches_per_pass, pass_order

BEST_CHECKPOINT = "best.ssck"
LAST_CHECKPOINT = "last.ssck"

_CHECKPOINT_METRICS = ("accuracy", "weighted_f1")


@dataclass(frozen=True)
class LossWeights:
    """Per-class weights for [W, N1, N2, N3, REM]."""
    values: tuple[float, ...] = (0.9, 5.0, 0.9, 0.9, 0.9)

    def __post_init__(self):
        if len(self.values) != 5:
            raise ConfigError("loss_weights", f"need 5 weights, got {len(self.values)}")
        if any(w <= 0 for w in self.values):
            raise ConfigError("loss_weights", f"weights must be positive: {self.values}")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


def weighted_cross_entropy(logits, labels, weights: LossWeights | None = None):
    """Scalar loss tensor; unit weights reduce to plain cross-entropy."""
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.dtype.kind not in "iu":
        raise BadLabel(f"labels must be an integer vector, got {labels.dtype}")
    n_classes = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise BadLabel(f"labels outside 0..{n_classes - 1}")
    if weights is None:
        sample_weights = None
    else:
        table = weights.as_array() if isinstance(weights, LossWeights) \
            else np.asarray(weights, dtype=np.float64)
        if (table <= 0).any():
            raise ConfigError("loss_weights", f"weights must be positive: {table}")
        sample_weights = table[labels]
    return ad.cross_entropy_with_logits(logits, labels, sample_weights)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 0.001
    batch_size: int = 64
    max_iterations: int = 1000
    eval_every: int = 100
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    checkpoint_dir: str = "checkpoints"
    metric_for_checkpoint: str = "accuracy"

    def __post_init__(self):
        for name in ("batch_size", "max_iterations", "eval_every"):
            if getattr(self, name) < 1:
                raise ConfigError(name, f"must be >= 1, got {getattr(self, name)}")
        if self.lr <= 0:
            raise ConfigError("lr", f"must be positive, got {self.lr}")
        if self.metric_for_checkpoint not in _CHECKPOINT_METRICS:
            raise ConfigError(
                "metric_for_checkpoint",
                f"must be one of {_CHECKPOINT_METRICS}, got {self.metric_for_checkpoint!r}",
            )

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "lr": self.lr,
            "batch_size": self.batch_size,
            "max_iterations": self.max_iterations,
            "eval_every": self.eval_every,
            "seed": self.seed,
            "loss_weights": list(self.loss_weights.values),
            "checkpoint_dir": self.checkpoint_dir,
            "metric_for_checkpoint": self.metric_for_checkpoint,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        if not isinstance(obj, dict):
            raise ConfigError("<root>", f"run config must be an object, got {type(obj).__name__}")
        known = set(cls().to_dict())
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown run config key")
        kwargs = dict(obj)
        try:
            if "model" in kwargs:
                kwargs["model"] = ModelConfig.from_dict(kwargs["model"])
            if "loss_weights" in kwargs:
                kwargs["loss_weights"] = LossWeights(tuple(kwargs["loss_weights"]))
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError("<run config>", str(exc)) from exc

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        try:
            obj = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(str(path), f"cannot read run config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(str(path), f"run config is not valid JSON: {exc}") from exc
        return cls.from_dict(obj)

    def apply_overrides(self, overrides: dict) -> "RunConfig":
        """Apply flat ``key=value`` overrides; model fields via ``model.key``."""
        merged = self.to_dict()
        for key, value in overrides.items():
            if key.startswith("model."):
                sub = key.split(".", 1)[1]
                if sub not in merged["model"]:
                    raise ConfigError(key, "unknown model config key")
                merged["model"][sub] = value
            elif key == "model":
                if not isinstance(value, dict):
                    raise ConfigError(key, "model override must be an object")
                unknown = set(value) - set(merged["model"])
                if unknown:
                    raise ConfigError(f"model.{sorted(unknown)[0]}", "unknown model config key")
                merged["model"].update(value)
            elif key in merged:
                merged[key] = value
            else:
                raise ConfigError(key, "unknown run config key")
        return RunConfig.from_dict(merged)


@dataclass
class TrainLog:
    """Per-evaluation records plus the best-checkpoint pointer."""
    records: list[dict] = field(default_factory=list)
    best_iteration: int | None = None
    best_metric: float | None = None
    best_path: str | None = None

    def canonical(self) -> dict:
        """Determinism-comparable content: wall time stripped."""
        return {
            "records": [
                {k: v for k, v in record.items() if k != "wall_time"}
                for record in self.records
            ],
            "best_iteration": self.best_iteration,
            "best_metric": self.best_metric,
        }

    def to_jsonl(self, path) -> None:
        lines = [json.dumps({"kind": "eval", **record}, sort_keys=True)
                 for record in self.records]
        lines.append(json.dumps({
            "kind": "best",
            "best_iteration": self.best_iteration,
            "best_metric": self.best_metric,
            "best_path": self.best_path,
        }, sort_keys=True))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "TrainLog":
        log = cls()
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            obj = json.loads(line)
            kind = obj.pop("kind", "eval")
            if kind == "best":
                log.best_iteration = obj.get("best_iteration")
                log.best_metric = obj.get("best_metric")
                log.best_path = obj.get("best_path")
            else:
                log.records.append(obj)
        return log


def evaluate_split(params, model_config: ModelConfig, store: EpochStore,
                   split: str | None, batch_size: int = 256,
                   column: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Greedy predictions over a split in stored order -> (preds, truth).

    ``column`` restricts the input to one montage channel for
    single-channel models.
    """
    epochs = store.epochs_for_split(split)
    if not epochs:
        raise EmptySplit(f"split {split!r} holds no epochs")
    preds = np.empty(len(epochs), dtype=np.int64)
    truth = np.array([e.label for e in epochs], dtype=np.int64)
    for start in range(0, len(epochs), batch_size):
        chunk = epochs[start:start + batch_size]
        inputs = np.stack([e.samples for e in chunk]).astype(np.float32)
        if column is not None:
            inputs = inputs[:, :, column:column + 1]
        logits, _ = forward(params, model_config, inputs)
        preds[start:start + len(chunk)] = logits.data.argmax(axis=1)
    return preds, truth


def _batch_at(epochs, iteration: int, batch_size: int, seed: int,
              per_pass: int, column: int | None = None):
    """Materialize the batch visited at a given iteration."""
    p, j = divmod(iteration, per_pass)
    order = pass_order(len(epochs), seed, p)
    chunk = order[j * batch_size:(j + 1) * batch_size]
    inputs = np.stack([epochs[i].samples for i in chunk]).astype(np.float32)
    if column is not None:
        inputs = inputs[:, :, column:column + 1]
    labels = np.array([epochs[i].label for i in chunk], dtype=np.int64)
    return inputs, labels


def train(config: RunConfig, store: EpochStore, *,
          log_path=None, progress=None, column: int | None = None) -> TrainLog:
    """Run the optimization loop from scratch; returns the log.

    Side effects: ``best.ssck`` (highest validation metric so far) and
    ``last.ssck`` (params + Adam state, for resuming) under
    ``config.checkpoint_dir``; optionally a line-delimited JSON log.
    """
    for split in ("train", "val"):
        if not store.epochs_for_split(split):
            raise EmptySplit(f"split {split!r} holds no epochs")
    params = init_params(config.model, config.seed)
    optimizer = Adam(params, lr=config.lr)
    return _run_loop(config, store, params, optimizer, 0, TrainLog(),
                     log_path=log_path, progress=progress, column=column)


def resume(checkpoint_path, config: RunConfig, store: EpochStore, *,
           log_path=None, progress=None, column: int | None = None) -> TrainLog:
    """Continue a run from its ``last.ssck``.

    The stored run configuration must match ``config`` exactly except
    for ``max_iterations`` (extending the horizon is the point of
    resuming) and ``checkpoint_dir`` (artifacts may have moved).
    """
    _, params, extra, state_arrays = load_params(checkpoint_path, dtype="float32")
    saved_run = extra.get("run_config")
    if saved_run is None:
        raise ConfigMismatch(f"{checkpoint_path} was not written by a training run")
    current = config.to_dict()
    ignorable = ("max_iterations", "checkpoint_dir")
    drifted = [
        key for key in current
        if key not in ignorable and saved_run.get(key) != current[key]
    ]
    if drifted:
        detail = "; ".join(
            f"{key}: checkpoint={saved_run.get(key)} requested={current[key]}"
            for key in drifted
        )
        raise ConfigMismatch(detail)

    iteration = int(extra["iteration"])
    if iteration >= config.max_iterations:
        raise ConfigMismatch(
            f"checkpoint is already at iteration {iteration}, "
            f"max_iterations={config.max_iterations} adds nothing"
        )
    optimizer = Adam(params, lr=config.lr)
    optimizer.load_state(state_arrays, t=iteration)
    log = TrainLog(
        records=list(extra.get("records", [])),
        best_iteration=extra.get("best_iteration"),
        best_metric=extra.get("best_metric"),
        best_path=extra.get("best_path"),
    )
    return _run_loop(config, store, params, optimizer, iteration, log,
                     log_path=log_path, progress=progress, column=column)


def _run_loop(config: RunConfig, store: EpochStore, params, optimizer,
              start_iteration: int, log: TrainLog, *,
              log_path=None, progress=None, column: int | None = None) -> TrainLog:
    epochs = store.epochs_for_split("train")
    if not epochs:
        raise EmptySplit("split 'train' holds no epochs")
    per_pass = batches_per_pass(len(epochs), config.batch_size, drop_last=False)
    checkpoint_dir = Path(config.checkpoint_dir)
    checkpoint_dir.mkdir(parents=True, exist_ok=True)
    started = time.monotonic()

    for iteration in range(start_iteration, config.max_iterations):
        inputs, labels = _batch_at(epochs, iteration, config.batch_size,
                                   config.seed, per_pass, column)
        logits, _ = forward(params, config.model, inputs)
        loss = weighted_cross_entropy(logits, labels, config.loss_weights)
        loss_value = float(loss.data)
        if not np.isfinite(loss_value):
            dump = checkpoint_dir / "diverged.ssck"
            save_params(dump, config.model, params,
                        extra={"iteration": iteration, "loss": loss_value},
                        state_arrays=optimizer.state_arrays())
            raise DivergedLoss(
                f"loss became {loss_value} at iteration {iteration + 1}; "
                f"state dumped to {dump}"
            )
        optimizer.zero_grad()
        ad.backward(loss)
        optimizer.step()

        done = iteration + 1
        if done % config.eval_every == 0 or done == config.max_iterations:
            preds, truth = evaluate_split(params, config.model, store, "val",
                                          batch_size=config.batch_size, column=column)
            report = build_report(preds, truth)
            record = {
                "iteration": done,
                "train_loss": loss_value,
                "val_accuracy": report.accuracy,
                "val_weighted_f1": report.weighted_f1,
                "val_kappa": report.kappa,
                "wall_time": time.monotonic() - started,
            }
            log.records.append(record)
            metric = record[f"val_{config.metric_for_checkpoint}"]
            if log.best_metric is None or metric > log.best_metric:
                log.best_metric = metric
                log.best_iteration = done
                log.best_path = str(checkpoint_dir / BEST_CHECKPOINT)
                save_params(log.best_path, config.model, params, extra={
                    "iteration": done,
                    "metric_name": config.metric_for_checkpoint,
                    "metric": metric,
                    "run_config": config.to_dict(),
                })
            save_params(checkpoint_dir / LAST_CHECKPOINT, config.model, params,
                        extra={
                            "iteration": done,
                            "run_config": config.to_dict(),
                            "records": log.records,
                            "best_iteration": log.best_iteration,
                            "best_metric": log.best_metric,
                            "best_path": log.best_path,
                        },
                        state_arrays=optimizer.state_arrays())
            if log_path is not None:
                log.to_jsonl(log_path)
            if progress is not None:
                progress(record)
    return log
