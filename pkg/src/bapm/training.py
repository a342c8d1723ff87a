"""Pretext training, frozen-encoder fine-tuning and repeated-split evaluation."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import augment as aug
from .checkpoint import Checkpoint, encode_checkpoint, decode_checkpoint
from .config import EvalSettings, FinetuneSettings, PretextSettings
from .losses import cross_entropy, one_hot, pretext_loss
from .metrics import CLASSIFICATION_METRICS, all_classification_metrics, mean_std
from .model import DownstreamModel, ModelConfig, PretextModel, load_encoder
from .optim import Adam
from .tensor import Tape, Tensor, no_grad
from .volume import Volume

log = logging.getLogger(__name__)

ABSENT = "NA"


class TrainingError(ValueError):
    pass


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(tuple(int(p) for p in parts)).generate_state(1)[0])


def _fmt(v) -> str:
    return ABSENT if v is None else repr(float(v))


@dataclass
class TraceRow:
    stage: str
    epoch: int
    step: int
    l_rec: float | None = None
    l_seg: float | None = None
    l_total: float | None = None
    l_ce: float | None = None


@dataclass
class LossTrace:
    rows: list[TraceRow] = field(default_factory=list)

    def epoch_means(self, column: str) -> list[float]:
        by_epoch: dict[int, list[float]] = {}
        for r in self.rows:
            v = getattr(r, column)
            if v is not None:
                by_epoch.setdefault(r.epoch, []).append(v)
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]

    def write_csv(self, path) -> None:
        if not self.rows:
            header = ["stage", "epoch", "step", "l_rec", "l_seg", "l_total"]
            cols = header[3:]
        elif self.rows[0].stage == "finetune":
            header = ["stage", "epoch", "step", "l_ce"]
            cols = ["l_ce"]
        else:
            header = ["stage", "epoch", "step", "l_rec", "l_seg", "l_total"]
            cols = header[3:]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in self.rows:
                w.writerow([r.stage, r.epoch, r.step] + [_fmt(getattr(r, c)) for c in cols])


# ---------------------------------------------------------------- pretext


@dataclass
class PretextItem:
    """A source volume and its tissue labels (both on the same grid)."""

    intensity: Volume
    labels: Volume


def as_pretext_items(samples) -> list[PretextItem]:
    return [s if isinstance(s, PretextItem) else PretextItem(s.intensity, s.labels) for s in samples]


def pretext_subset_size(n: int, fraction: float) -> int:
    return int(math.floor(n * fraction + 1e-9))


@dataclass
class PretrainResult:
    model: PretextModel
    trace: LossTrace
    used: list[int]

    def checkpoint(self, metadata: dict | None = None) -> Checkpoint:
        return decode_checkpoint(encode_checkpoint(self.model.params, metadata))


def _augment_pair(item: PretextItem, cfg: aug.AugmentConfig | None, seed: int):
    """(corrupted input, clean spatially-aligned target, labels)."""
    if cfg is None or not cfg.enabled:
        return item.intensity.data, item.intensity.data, item.labels.data
    params = aug.sample_params(cfg, np.random.default_rng(seed))
    corrupted = aug.apply_params(item.intensity, params)
    target = aug.apply_spatial(item.intensity, params)
    labels = aug.apply_spatial(item.labels, params)
    return corrupted.data, target.data, labels.data


def pretrain(dataset: Sequence, model_config: ModelConfig, settings: PretextSettings,
             augment: aug.AugmentConfig | None = None, seed: int = 0, model: PretextModel | None = None,
             progress=None) -> PretrainResult:
    """Train encoder + decoder(s) on (intensity, labels) pairs.

    Only the first ``settings.fraction`` of a seeded shuffle of ``dataset``
    is used.  Each epoch draws a fresh augmentation per sample; the
    reconstruction target is the clean volume moved by the same spatial
    transform.
    """
    items = as_pretext_items(dataset)
    if len(items) < settings.batch_size:
        raise TrainingError(f"dataset has {len(items)} samples, fewer than one batch of {settings.batch_size}")
    rng = np.random.default_rng(derive_seed(seed, 1))
    shuffled = rng.permutation(len(items))
    n_used = pretext_subset_size(len(items), settings.fraction)
    if n_used < settings.batch_size:
        raise TrainingError(f"fraction {settings.fraction} leaves {n_used} samples, fewer than one batch")
    used = [int(i) for i in shuffled[:n_used]]

    model = model or PretextModel(model_config, tasks=settings.tasks, seed=derive_seed(seed, 2))
    opt = Adam(model.params, lr=settings.lr)
    trace = LossTrace()
    step = 0
    for epoch in range(settings.epochs):
        order = rng.permutation(n_used)
        for start in range(0, n_used, settings.batch_size):
            batch = [used[i] for i in order[start:start + settings.batch_size]]
            xs, ts, ls = zip(*(_augment_pair(items[i], augment, derive_seed(seed, 3, epoch, i)) for i in batch))
            x = np.stack(xs)[:, None]
            target = np.stack(ts)[:, None]
            labels = one_hot(np.stack(ls))
            opt.zero_grad()
            with Tape() as tape:
                rec, seg = model.forward(Tensor(x))
                loss, report = pretext_loss(rec, target, seg, labels, settings.tasks)
                tape.backward(loss)
            opt.step()
            trace.rows.append(TraceRow("pretext", epoch, step, report.l_rec, report.l_seg, report.l_total))
            step += 1
        if progress:
            progress(epoch, trace)
        log.info("pretext epoch %d mean loss %.5f", epoch, trace.epoch_means("l_total")[-1])
    return PretrainResult(model, trace, used)


def predict_pretext(model: PretextModel, volumes: Sequence[np.ndarray], batch_size: int = 4):
    """Reconstructions (N x D x H x W) and segmentation probabilities (N x 4 x ...)."""
    recs, segs = [], []
    with no_grad():
        for start in range(0, len(volumes), batch_size):
            x = np.stack(volumes[start:start + batch_size])[:, None].astype(np.float32)
            rec, seg = model.forward(Tensor(x))
            recs.append(None if rec is None else rec.data[:, 0])
            segs.append(None if seg is None else seg.data)
    rec = None if recs[0] is None else np.concatenate(recs)
    seg = None if segs[0] is None else np.concatenate(segs)
    return rec, seg


# ---------------------------------------------------------------- fine-tuning


@dataclass
class FinetuneResult:
    model: DownstreamModel
    trace: LossTrace
    frozen: bool


def learning_rate(settings: FinetuneSettings, epoch: int) -> float:
    return settings.lr * settings.decay ** (epoch // settings.decay_every)


def finetune(volumes: Sequence[np.ndarray], labels: Sequence[int], model_config: ModelConfig,
             settings: FinetuneSettings, encoder: Checkpoint | dict | None = None,
             augment: aug.AugmentConfig | None = None, seed: int = 0) -> FinetuneResult:
    """Supervised training of the downstream model.

    With ``encoder`` given, its ``encoder.*`` tensors are loaded and frozen;
    without it the whole model trains from scratch.  Every epoch each sample
    is seen once as-is and once under a random affine.
    """
    volumes = [np.asarray(getattr(v, "data", v), np.float32) for v in volumes]
    labels = np.asarray(labels, dtype=np.int64)
    if len(volumes) != len(labels) or not volumes:
        raise TrainingError("need equally many (non-zero) volumes and labels")
    model = DownstreamModel(model_config, seed=derive_seed(seed, 4))
    frozen = encoder is not None
    if frozen:
        entries = encoder.entries if isinstance(encoder, Checkpoint) else encoder
        try:
            load_encoder(model.params, entries)
        except (KeyError, ValueError) as exc:
            raise TrainingError(f"checkpoint does not fit the downstream model: {exc}") from None
        model.freeze_encoder()
    augment = augment or aug.AugmentConfig()
    frozen_names = model.encoder_names if frozen else []
    opt = Adam(model.params, lr=settings.lr, frozen=frozen_names)
    rng = np.random.default_rng(derive_seed(seed, 5))
    trace = LossTrace()
    n = len(volumes)
    step = 0
    for epoch in range(settings.epochs):
        opt.lr = learning_rate(settings, epoch)
        copies = [(i, False) for i in range(n)] + [(i, True) for i in range(n)]
        order = rng.permutation(len(copies))
        for start in range(0, len(copies), settings.batch_size):
            batch = [copies[j] for j in order[start:start + settings.batch_size]]
            xs = []
            for i, augmented in batch:
                v = volumes[i]
                if augmented:
                    v = aug.random_affine(Volume(v), augment, derive_seed(seed, 6, epoch, i)).data
                xs.append(v)
            x = Tensor(np.stack(xs)[:, None])
            y = labels[[i for i, _ in batch]]
            opt.zero_grad()
            with Tape() as tape:
                loss = cross_entropy(model.forward(x), y)
                tape.backward(loss)
            opt.step()
            trace.rows.append(TraceRow("finetune", epoch, step, l_ce=loss.item()))
            step += 1
        log.info("finetune epoch %d mean ce %.5f", epoch, trace.epoch_means("l_ce")[-1])
    return FinetuneResult(model, trace, frozen)


def predict_proba(model: DownstreamModel, volumes: Sequence[np.ndarray], batch_size: int = 4) -> np.ndarray:
    """Positive-class (index 1) probabilities."""
    out = []
    with no_grad():
        for start in range(0, len(volumes), batch_size):
            x = np.stack([np.asarray(getattr(v, "data", v), np.float32) for v in volumes[start:start + batch_size]])
            logits = model.forward(Tensor(x[:, None])).data.astype(np.float64)
            z = logits - logits.max(axis=1, keepdims=True)
            p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
            out.append(p[:, 1])
    return np.concatenate(out)


# ---------------------------------------------------------------- evaluation


@dataclass
class MetricsReport:
    """Per-metric values over repeats, summarised as mean and standard deviation."""

    task: str
    values: dict[str, list[float]] = field(default_factory=dict)

    def add(self, metrics: dict[str, float]) -> None:
        for k, v in metrics.items():
            self.values.setdefault(k, []).append(float(v))

    def summary(self) -> dict[str, tuple[float, float]]:
        return {k: mean_std(v) for k, v in self.values.items()}

    def rows(self) -> list[tuple[str, str, float, float]]:
        return [(self.task, k, m, s) for k, (m, s) in self.summary().items()]


def write_report_csv(reports: Sequence[MetricsReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task", "metric", "mean", "std"])
        for rep in reports:
            for task, metric, m, s in rep.rows():
                w.writerow([task, metric, repr(m), repr(s)])


def stratified_split(labels: Sequence[int], train_fraction: float, rng: np.random.Generator):
    labels = np.asarray(labels)
    train, test = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if idx.size < 2:
            raise TrainingError(f"class {c} has {idx.size} sample(s); cannot stratify")
        idx = rng.permutation(idx)
        k = int(round(train_fraction * idx.size))
        k = min(max(k, 1), idx.size - 1)
        train.extend(idx[:k].tolist())
        test.extend(idx[k:].tolist())
    return sorted(train), sorted(test)


def repeated_split_eval(volumes: Sequence[np.ndarray], labels: Sequence[int], model_config: ModelConfig,
                        finetune_settings: FinetuneSettings, eval_settings: EvalSettings,
                        encoder: Checkpoint | None = None, augment: aug.AugmentConfig | None = None,
                        seed: int = 0, task: str = "BAPM", classifier=None) -> MetricsReport:
    """Stratified train/test splits repeated with independent seeds.

    ``classifier(train_idx, test_idx, repeat_seed) -> scores`` replaces the
    fine-tune-and-predict step when given (used for harness checks).
    """
    labels = np.asarray(labels)
    report = MetricsReport(task)
    for r in range(eval_settings.repeats):
        split_rng = np.random.default_rng(derive_seed(seed, 7, r))
        train_idx, test_idx = stratified_split(labels, eval_settings.train_fraction, split_rng)
        run_seed = derive_seed(seed, 8, r)
        if classifier is not None:
            scores = np.asarray(classifier(train_idx, test_idx, run_seed), dtype=np.float64)
        else:
            result = finetune([volumes[i] for i in train_idx], labels[train_idx], model_config,
                              finetune_settings, encoder, augment, run_seed)
            scores = predict_proba(result.model, [volumes[i] for i in test_idx])
        report.add(all_classification_metrics(scores, labels[test_idx], eval_settings.threshold))
        log.info("%s split %d: %s", task, r, {k: round(v[-1], 2) for k, v in report.values.items()})
    missing = [m for m in CLASSIFICATION_METRICS if m not in report.values]
    if missing:
        raise TrainingError(f"metrics missing from report: {missing}")
    return report
