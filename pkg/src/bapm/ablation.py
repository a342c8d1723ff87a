"""Variant matrix (full / reconstruction-only / segmentation-only pretext,
no pretext, no augmentation) and the pretext-fraction sweep."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .config import Settings
from .metrics import mean_std, reconstruction_metrics, segmentation_metrics, soft_dice_scores
from .phantom import PhantomSample, generate_dataset
from .training import (MetricsReport, PretrainResult, derive_seed, predict_pretext, pretrain,
                       repeated_split_eval)

log = logging.getLogger(__name__)

# variant -> (pretext tasks or None for no pretraining, augmentation on)
VARIANT_SPECS = {
    "BAPM": ("both", True),
    "BAPM-R": ("rec_only", True),
    "BAPM-S": ("seg_only", True),
    "BAPM-B": (None, True),
    "BAPMw/oA": ("both", False),
}


@dataclass
class PretextEvaluation:
    soft_dice: np.ndarray  # per held-out sample
    ssim: np.ndarray
    mae: np.ndarray
    nmi: np.ndarray
    hard_dice: np.ndarray

    def summary(self) -> dict[str, tuple[float, float]]:
        out = {}
        for name in ("soft_dice", "ssim", "mae", "nmi", "hard_dice"):
            v = getattr(self, name)
            if v.size and not np.all(np.isnan(v)):
                out[name] = mean_std(v)
        return out


def evaluate_pretext(result_or_model, heldout: Sequence[PhantomSample]) -> PretextEvaluation:
    model = getattr(result_or_model, "model", result_or_model)
    volumes = [s.intensity.data for s in heldout]
    truth = np.stack([s.labels.data for s in heldout])
    rec, seg = predict_pretext(model, volumes)
    nan = np.full(len(heldout), np.nan)
    soft = hard = nan
    if seg is not None:
        soft = soft_dice_scores(seg, truth)
        hard = np.array([segmentation_metrics(seg[i].argmax(0), truth[i])["mean"]["Dice"]
                         for i in range(len(heldout))])
    ssim_v = mae = nmi = nan
    if rec is not None:
        rm = [reconstruction_metrics(volumes[i], rec[i]) for i in range(len(heldout))]
        ssim_v = np.array([m["SSIM"] for m in rm])
        mae = np.array([m["MAE"] for m in rm])
        nmi = np.array([m["NMI"] for m in rm])
    return PretextEvaluation(soft, ssim_v, mae, nmi, hard)


@dataclass
class PhantomData:
    pretext: list[PhantomSample]
    heldout: list[PhantomSample]
    target: list[PhantomSample]


def phantom_data(settings: Settings) -> PhantomData:
    spec = settings.phantom()
    seed = settings["seed"]
    n_pre, n_held = settings["data.pretext_count"], settings["data.heldout_count"]
    pool = generate_dataset(n_pre + n_held, spec, derive_seed(seed, 100))
    target = generate_dataset(settings["data.target_count"], spec, derive_seed(seed, 101))
    return PhantomData(pool[:2 * n_pre], pool[2 * n_pre:], target)


def run_pretext(settings: Settings, data: Sequence, tasks: str = "both", augmented: bool = True,
                fraction: float | None = None) -> PretrainResult:
    pre = settings.pretext()
    pre = replace(pre, tasks=tasks, fraction=pre.fraction if fraction is None else fraction)
    aug_cfg = settings.augment() if augmented else None
    return pretrain(data, settings.model(), pre, aug_cfg, seed=derive_seed(settings["seed"], 200))


def run_variants(settings: Settings, data: PhantomData, variants: Sequence[str] | None = None,
                 pretrained: dict[str, PretrainResult] | None = None) -> dict[str, MetricsReport]:
    """Repeated-split classification for each variant on the target phantoms.

    ``pretrained`` may supply already-trained pretext runs keyed by variant.
    """
    variants = list(variants or settings["ablate.variants"])
    pretrained = dict(pretrained or {})
    volumes = [s.intensity.data for s in data.target]
    labels = [s.class_label for s in data.target]
    reports = {}
    for name in variants:
        tasks, augmented = VARIANT_SPECS[name]
        encoder = None
        if tasks is not None:
            if name not in pretrained:
                log.info("pretext training for %s", name)
                pretrained[name] = run_pretext(settings, data.pretext, tasks, augmented)
            encoder = pretrained[name].checkpoint()
        reports[name] = repeated_split_eval(volumes, labels, settings.model(), settings.finetune(),
                                            settings.evaluation(), encoder, settings.augment(),
                                            seed=derive_seed(settings["seed"], 300), task=name)
    return reports


def fraction_sweep(settings: Settings, data: PhantomData, fractions: Sequence[float] | None = None,
                   pretrained: dict[float, PretrainResult] | None = None) -> dict[float, PretextEvaluation]:
    fractions = list(fractions or settings["ablate.fractions"])
    pretrained = dict(pretrained or {})
    out = {}
    for f in fractions:
        if f not in pretrained:
            log.info("pretext training on fraction %.2f", f)
            pretrained[f] = run_pretext(settings, data.pretext, fraction=f)
        out[f] = evaluate_pretext(pretrained[f], data.heldout)
    return out


def sweep_reports(sweep: dict[float, PretextEvaluation]) -> list[MetricsReport]:
    reports = []
    for f, ev in sweep.items():
        rep = MetricsReport(f"pretext_fraction={f:g}")
        for metric, values in (("soft_dice", ev.soft_dice), ("SSIM", ev.ssim)):
            if not np.all(np.isnan(values)):
                rep.values[metric] = [float(v) for v in values]
        reports.append(rep)
    return reports
