"""``bapm`` command line: phantom generation, training, inference, evaluation
and the ablation matrix."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import ablation
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import KEYS, ConfigError, Settings, load_settings
from .metrics import all_classification_metrics, reconstruction_metrics, segmentation_metrics
from .model import DownstreamModel, ModelConfig, PretextModel, load_encoder, pad_to_multiple
from .nifti import NiftiError, read_nifti, write_nifti
from .phantom import generate_phantom, sample_seed
from .runtime import thread_limits
from .tensor import Tensor, no_grad
from .training import (TrainingError, derive_seed, finetune, predict_proba, pretrain, stratified_split,
                       write_report_csv)
from .volume import LABELS, Volume

log = logging.getLogger("bapm")

MANIFEST = "manifest.csv"


class UsageError(Exception):
    pass


def _keys_epilog() -> str:
    lines = ["configuration keys (file `key = value` or --set key=value):"]
    for k, (_, default, help_) in KEYS.items():
        lines.append(f"  {k} = {default}" + (f"    # {help_}" if help_ else ""))
    return "\n".join(lines)


# ---------------------------------------------------------------- data helpers


def read_manifest(directory: Path) -> list[dict]:
    path = directory / MANIFEST
    if not path.exists():
        raise UsageError(f"no {MANIFEST} in {directory}")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def load_pairs(directory: Path):
    rows = read_manifest(directory)
    vols, labs, classes = [], [], []
    for r in rows:
        vols.append(read_nifti(directory / f"{r['id']}_img.nii", kind="intensity"))
        lab_path = directory / f"{r['id']}_lab.nii"
        labs.append(read_nifti(lab_path, kind=LABELS) if lab_path.exists() else None)
        classes.append(int(r["class"]))
    return vols, labs, classes


def _model_metadata(settings: Settings, kind: str, tasks: str, epochs: int) -> dict:
    m = settings.model()
    return {
        "kind": kind,
        "tasks": tasks,
        "model.width_factor": settings.text["model.width_factor"],
        "model.input_dims": ",".join(str(d) for d in m.input_dims),
        "model.num_classes": str(m.num_classes),
        "seed": str(settings["seed"]),
        "config_hash": settings.digest(),
        "epoch": str(epochs),
    }


def _config_from_metadata(meta: dict) -> ModelConfig:
    try:
        dims = tuple(int(x) for x in meta["model.input_dims"].split(","))
        return ModelConfig(meta["model.width_factor"], dims, int(meta["model.num_classes"]))
    except KeyError as exc:
        raise CheckpointError(f"checkpoint metadata lacks {exc}") from None


def _pretext_from_checkpoint(path: Path) -> PretextModel:
    ckpt = load_checkpoint(path)
    if ckpt.metadata.get("kind") != "pretext":
        raise CheckpointError(f"{path} is not a pretext checkpoint")
    model = PretextModel(_config_from_metadata(ckpt.metadata), tasks=ckpt.metadata.get("tasks", "both"))
    missing = [k for k in model.params if k not in ckpt.entries]
    if missing:
        raise CheckpointError(f"{path} lacks {missing[0]}")
    for k, p in model.params.items():
        if ckpt.entries[k].shape != p.shape:
            raise CheckpointError(f"{k}: expected shape {p.shape}, found {ckpt.entries[k].shape}")
        p.data = ckpt.entries[k]
    return model


# ---------------------------------------------------------------- commands


def cmd_phantom_gen(args, settings: Settings) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = settings.phantom()
    rows = []
    for i in range(args.count):
        seed = sample_seed(settings["seed"], i)
        sample = generate_phantom(spec.with_class(i % 2), seed)
        ident = f"phantom_{i:04d}"
        write_nifti(sample.intensity, out / f"{ident}_img.nii")
        write_nifti(sample.labels, out / f"{ident}_lab.nii")
        rows.append((ident, sample.class_label, seed))
    with open(out / MANIFEST, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "class", "seed"])
        w.writerows(rows)
    log.info("wrote %d phantoms to %s", len(rows), out)


def cmd_pretrain(args, settings: Settings) -> None:
    vols, labs, _ = load_pairs(Path(args.data))
    if any(lab is None for lab in labs):
        raise UsageError("pretext training needs a label volume (<id>_lab.nii) for every image")
    from .training import PretextItem
    items = [PretextItem(v, lab) for v, lab in zip(vols, labs)]
    pre = settings.pretext()
    aug_cfg = settings.augment() if settings["augment.enabled"] else None
    result = pretrain(items, settings.model(), pre, aug_cfg, seed=settings["seed"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model.params, _model_metadata(settings, "pretext", pre.tasks, pre.epochs),
                    out / "pretext.ckpt")
    result.trace.write_csv(out / "pretext_trace.csv")


def cmd_finetune(args, settings: Settings) -> None:
    vols, _, classes = load_pairs(Path(args.data))
    encoder = load_checkpoint(args.ckpt, prefix="encoder.") if args.ckpt else None
    ft = settings.finetune()
    result = finetune([v.data for v in vols], classes, settings.model(), ft, encoder, settings.augment(),
                      seed=settings["seed"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = _model_metadata(settings, "downstream", "frozen" if result.frozen else "scratch", ft.epochs)
    save_checkpoint(result.model.params, meta, out / "downstream.ckpt")
    result.trace.write_csv(out / "finetune_trace.csv")


def _infer(args):
    model = _pretext_from_checkpoint(Path(args.ckpt))
    vol = read_nifti(args.inp, kind="intensity")
    x, crop = pad_to_multiple(vol)
    with no_grad():
        rec, seg = model.forward(x)
    return vol, rec, seg, crop


def cmd_reconstruct(args, settings: Settings) -> None:
    vol, rec, _, crop = _infer(args)
    if rec is None:
        raise UsageError("checkpoint has no reconstruction decoder")
    write_nifti(vol.with_data(crop.crop(rec.data[0, 0])), args.out)


def cmd_segment(args, settings: Settings) -> None:
    vol, _, seg, crop = _infer(args)
    if seg is None:
        raise UsageError("checkpoint has no segmentation decoder")
    probs = crop.crop(seg.data[0])
    write_nifti(Volume(probs.argmax(axis=0).astype(np.uint8), vol.spacing, vol.affine, LABELS), args.out)
    if args.probs:
        stem = str(args.out)
        stem = stem[:-4] if stem.endswith(".nii") else stem
        for c in range(probs.shape[0]):
            write_nifti(vol.with_data(probs[c], kind="intensity"), f"{stem}_prob{c}.nii")


def cmd_evaluate(args, settings: Settings) -> None:
    rows = []
    if args.kind in ("segmentation", "reconstruction"):
        if not args.pred or len(args.pred) != len(args.truth or []):
            raise UsageError("give matching --pred/--truth pairs")
        for i, (p, t) in enumerate(zip(args.pred, args.truth)):
            if args.kind == "segmentation":
                res = segmentation_metrics(read_nifti(p, kind=LABELS), read_nifti(t, kind=LABELS))
                for c, vals in res["per_class"].items():
                    rows += [(f"pair{i}", f"{name}_class{c}", v) for name, v in vals.items()]
                rows += [(f"pair{i}", f"{name}_mean", v) for name, v in res["mean"].items()]
            else:
                res = reconstruction_metrics(read_nifti(t, kind="intensity"), read_nifti(p, kind="intensity"))
                rows += [(f"pair{i}", k, v) for k, v in res.items()]
    else:
        if not args.data:
            raise UsageError("classification evaluation needs --data")
        vols, _, classes = load_pairs(Path(args.data))
        encoder = load_checkpoint(args.ckpt, prefix="encoder.") if args.ckpt else None
        ev = settings.evaluation()
        labels = np.asarray(classes)
        for r in range(ev.repeats):
            tr, te = stratified_split(labels, ev.train_fraction,
                                      np.random.default_rng(derive_seed(settings["seed"], 7, r)))
            res = finetune([vols[i].data for i in tr], labels[tr], settings.model(), settings.finetune(), encoder,
                           settings.augment(), seed=derive_seed(settings["seed"], 8, r))
            scores = predict_proba(res.model, [vols[i].data for i in te])
            rows += [(f"split{r}", k, v) for k, v in
                     all_classification_metrics(scores, labels[te], ev.threshold).items()]
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["item", "metric", "value"])
        for item, metric, v in rows:
            w.writerow([item, metric, repr(float(v))])


def cmd_ablate(args, settings: Settings) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = ablation.phantom_data(settings)
    reports = ablation.run_variants(settings, data)
    sweep = ablation.fraction_sweep(settings, data)
    write_report_csv(list(reports.values()) + ablation.sweep_reports(sweep), out / "ablation.csv")


COMMANDS = {
    "phantom-gen": (cmd_phantom_gen, "write synthetic phantom image/label pairs and a manifest"),
    "pretrain": (cmd_pretrain, "train the pretext (reconstruction + segmentation) model"),
    "finetune": (cmd_finetune, "train the downstream classifier, optionally on a frozen pretrained encoder"),
    "reconstruct": (cmd_reconstruct, "reconstruct a NIfTI volume with a pretext checkpoint"),
    "segment": (cmd_segment, "segment a NIfTI volume into background/WM/GM/CSF"),
    "evaluate": (cmd_evaluate, "compute segmentation, reconstruction or classification metrics"),
    "ablate": (cmd_ablate, "run the pretext-variant matrix and the pretext-fraction sweep"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bapm", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_, description=help_, epilog=_keys_epilog(),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "phantom-gen":
            p.add_argument("--count", type=int, required=True, help="number of phantoms (classes alternate)")
            p.add_argument("--out", required=True)
        elif name in ("pretrain", "finetune"):
            p.add_argument("--data", required=True, help="directory with manifest.csv and NIfTI pairs")
            p.add_argument("--out", required=True)
            if name == "finetune":
                p.add_argument("--ckpt", help="pretext checkpoint whose encoder is loaded and frozen")
        elif name in ("reconstruct", "segment"):
            p.add_argument("--ckpt", required=True)
            p.add_argument("--in", dest="inp", required=True)
            p.add_argument("--out", required=True)
            if name == "segment":
                p.add_argument("--probs", action="store_true", help="also write the 4 probability maps")
        elif name == "evaluate":
            p.add_argument("--kind", choices=("segmentation", "reconstruction", "classification"),
                           default="segmentation")
            p.add_argument("--pred", action="append")
            p.add_argument("--truth", action="append")
            p.add_argument("--data")
            p.add_argument("--ckpt")
            p.add_argument("--out", default="metrics.csv")
        elif name == "ablate":
            p.add_argument("--out", required=True)
    return parser


def resolve_settings(args) -> Settings:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(item, "--set expects KEY=VALUE")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    return load_settings(args.config, overrides)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        settings = resolve_settings(args)
    except ConfigError as exc:
        print(f"bapm: config error: {exc}", file=sys.stderr)
        return 1
    log.info("resolved configuration:\n%s", settings.render())
    out = getattr(args, "out", None)
    func = COMMANDS[args.command][0]
    try:
        with thread_limits():
            func(args, settings)
        if out and Path(out).is_dir():
            (Path(out) / "resolved_config.txt").write_text(settings.render(), encoding="utf-8")
    except ConfigError as exc:
        print(f"bapm: config error: {exc}", file=sys.stderr)
        return 1
    except (UsageError, NiftiError, CheckpointError, TrainingError, ValueError, KeyError, OSError) as exc:
        print(f"bapm {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
