"""``pecon`` command line.

Output layout under the configured ``output_dir``::

    data/                     generated dataset (manifest.csv, ct/, ehr_*.csv)
    pretrain/f_c.peck, f_e.peck, history.csv
    finetune_visual/classifier.peck, history.csv
    finetune_ehr/classifier.peck, history.csv
    eval/metrics.csv, sweep.csv, embeddings.csv

Failures exit with status 1 and print a single ``error:<kind>: <message>``
line on stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config
from .datamodel import generate_synthetic, load_manifest
from .errors import MissingPrerequisiteError, PeconError
from .evaluation import export_embeddings, sweep_lambda
from .evaluation import evaluate as evaluate_models
from .neuralnet import load_checkpoint, save_checkpoint
from .pipeline import init_heads, prepare_splits
from .training import Classifier, finetune_head, pretrain

log = logging.getLogger("pecon")

MODALITY_STAGE = {"visual": "finetune_visual", "ehr": "finetune_ehr"}


def _require(path, hint):
    if not path.is_file():
        raise MissingPrerequisiteError(f"missing {path} ({hint})")
    return path


def _splits(cfg):
    dataset = load_manifest(_require(cfg.manifest_path, "run `pecon generate` or set data.manifest"))
    return dataset, prepare_splits(dataset)


def _load_heads(cfg):
    d = cfg.stage_dir("pretrain")
    f_c = load_checkpoint(_require(d / "f_c.peck", "run `pecon pretrain` first")).mlp
    f_e = load_checkpoint(_require(d / "f_e.peck", "run `pecon pretrain` first")).mlp
    return f_c, f_e


def _load_classifier(cfg, modality):
    path = cfg.stage_dir(MODALITY_STAGE[modality]) / "classifier.peck"
    ckpt = load_checkpoint(_require(path, f"run `pecon finetune --modality {modality}` first"))
    return Classifier(ckpt.mlps[0], ckpt.mlps[1], modality)


def cmd_generate(cfg, args):
    manifest = generate_synthetic(cfg.data, cfg.manifest_path.parent)
    print(manifest)


def cmd_pretrain(cfg, args):
    dataset, (train, val, _) = _splits(cfg)
    f_c, f_e = init_heads(cfg.model, dataset.d, dataset.D_e, cfg.pretrain.seed)
    f_c, f_e, history = pretrain(train, val, f_c, f_e, cfg.pretrain)
    out = cfg.stage_dir("pretrain")
    out.mkdir(parents=True, exist_ok=True)
    best = history.records[history.best_epoch]
    save_checkpoint(f_c, out / "f_c.peck", best.epoch, best.val_loss)
    save_checkpoint(f_e, out / "f_e.peck", best.epoch, best.val_loss)
    history.to_csv(out / "history.csv")
    log.info("best epoch %d, validation loss %.6f", best.epoch, best.val_loss)
    for name in ("f_c.peck", "f_e.peck", "history.csv"):
        print(out / name)


def cmd_finetune(cfg, args):
    dataset, (train, val, _) = _splits(cfg)
    stage = MODALITY_STAGE[args.modality]
    if args.from_scratch:
        f_c, f_e = init_heads(cfg.model, dataset.d, dataset.D_e, cfg.pretrain.seed)
    else:
        f_c, f_e = _load_heads(cfg)
    head = f_c if args.modality == "visual" else f_e
    model, history = finetune_head(head, train, val, getattr(cfg, stage))
    out = cfg.stage_dir(stage)
    out.mkdir(parents=True, exist_ok=True)
    best = history.records[history.best_epoch]
    save_checkpoint([model.head, model.unit], out / "classifier.peck", best.epoch, best.val_loss)
    history.to_csv(out / "history.csv")
    print(out / "classifier.peck")
    print(out / "history.csv")


def _eval_dir(cfg):
    out = cfg.stage_dir("eval")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_evaluate(cfg, args):
    _, (_, val, test) = _splits(cfg)
    visual, ehr = _load_classifier(cfg, "visual"), _load_classifier(cfg, "ehr")
    lam = cfg.eval.lam
    if lam is None:
        lam = sweep_lambda(visual, ehr, val, cfg.eval.grid, cfg.eval.threshold).best_lambda
        log.info("selected lambda %.4f on validation", lam)
    text = ""
    for include in cfg.eval.include_subsegmental:
        report = evaluate_models(visual, ehr, test, lam, include, cfg.eval.threshold)
        for note in report.annotations:
            log.warning("%s", note)
        chunk = report.to_csv()
        text += chunk if not text else chunk.split("\n", 1)[1]
    path = _eval_dir(cfg) / "metrics.csv"
    path.write_text(text)
    sys.stdout.write(text)


def cmd_sweep_lambda(cfg, args):
    _, (_, val, _) = _splits(cfg)
    visual, ehr = _load_classifier(cfg, "visual"), _load_classifier(cfg, "ehr")
    result = sweep_lambda(visual, ehr, val, cfg.eval.grid, cfg.eval.threshold)
    path = _eval_dir(cfg) / "sweep.csv"
    sys.stdout.write(result.to_csv(path))
    log.info("best lambda by validation F1: %s", result.best_lambda)


def cmd_export_embeddings(cfg, args):
    dataset, splits = _splits(cfg)
    f_c, f_e = _load_heads(cfg)
    full = dataset.subset(s for part in splits for s in part.samples)
    path = export_embeddings(f_c, f_e, full, _eval_dir(cfg) / "embeddings.csv")
    print(path)


COMMANDS = {
    "generate": (cmd_generate, "write a synthetic paired CT/EHR dataset"),
    "pretrain": (cmd_pretrain, "contrastive pretraining of both projection heads"),
    "finetune": (cmd_finetune, "fine-tune one projection head as a classifier"),
    "evaluate": (cmd_evaluate, "CT-only, EHR-only and fused test metrics"),
    "sweep-lambda": (cmd_sweep_lambda, "fused validation metrics over a grid of fusion weights"),
    "export-embeddings": (cmd_export_embeddings, "write joint-space features for external plotting"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="pecon", description="Contrastive CT/EHR pretraining, fine-tuning and late fusion")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (func, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("-c", "--config", required=True, help="path to the JSON run config")
        if name == "finetune":
            p.add_argument("--modality", required=True, choices=sorted(MODALITY_STAGE))
            p.add_argument(
                "--from-scratch",
                action="store_true",
                help="start from freshly initialised heads instead of pretrain checkpoints",
            )
        p.set_defaults(func=func)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = load_config(args.config)
        args.func(cfg, args)
    except PeconError as exc:
        print(f"error:{exc.kind}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error:{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
