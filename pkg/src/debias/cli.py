"""Command-line entry point: ``debias <command> ...``.

Commands mirror the pipeline: generate-data -> train (baseline, unlearn) ->
evaluate / diff -> report. Every output directory receives a ``run.json``
provenance record; existing outputs are never overwritten without --force.
"""

from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from . import __version__
from .config import PipelineConfig, load_config
from .dataset import CLASSES, ImageSample, build_dataset, load_dataset, load_image, save_dataset
from .evaluation import (
    background_swap_eval,
    classification_report,
    confusion_matrix,
    embeddings_csv,
    export_embeddings,
    model_predict_fn,
    pca_csv,
    pca_project,
    report_json,
    seafloor_silhouette,
)
from .explain import explain, to_mask
from .model import load as load_ckpt
from .model import save as save_ckpt
from .trainer import sanity_checks, train
from .uesf import uesf_report, write_artifacts

log = logging.getLogger("debias")


class CommandError(RuntimeError):
    pass


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, timeout=10, cwd=Path(__file__).parent)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _prepare_out(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()) and not force:
        raise CommandError(f"output directory {path} is not empty; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_run(out: Path, argv: Sequence[str], cfg: PipelineConfig, started: str, **extra: Any) -> None:
    doc = {
        "tool": "debias",
        "version": __version__,
        "command": list(argv),
        "config": cfg.to_dict(),
        "git_describe": _git_describe(),
        "started": started,
        "finished": _now(),
        **extra,
    }
    (out / "run.json").write_text(json.dumps(doc, indent=1, sort_keys=True))


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _apply(section: Any, **overrides: Any) -> None:
    for key, val in overrides.items():
        if val is not None:
            setattr(section, key, val)


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args: argparse.Namespace, cfg: PipelineConfig, argv: Sequence[str]) -> None:
    started = _now()
    _apply(cfg.data, n_per_class=args.n_per_class, bias_strength=args.bias, noise_level=args.noise,
           seed=args.seed, image_size=args.image_size)
    out = _prepare_out(Path(args.out), args.force)
    ds = build_dataset(cfg.data.synth_spec(), cfg.data.ratios)
    save_dataset(ds, out)
    _write_run(out, argv, cfg, started, n_samples=len(ds.samples))
    print(f"wrote {len(ds.samples)} images to {out}")


def cmd_train(args: argparse.Namespace, cfg: PipelineConfig, argv: Sequence[str]) -> None:
    started = _now()
    _apply(cfg.train, seed=args.seed, epochs=args.epochs, lr=args.lr, batch_size=args.batch_size,
           margin=args.margin, lam=args.lam)
    if args.no_augment:
        cfg.train.augment = False
    out = _prepare_out(Path(args.out), args.force)
    ds = load_dataset(args.data)
    init = load_ckpt(args.init) if args.init else None
    tc = cfg.train.train_config()
    from .model import Classifier

    probe = Classifier(arch=tc.arch, dim=tc.dim, norm=ds.norm)
    sanity = sanity_checks(ds, probe)
    (out / "sanity.json").write_text(json.dumps(sanity, indent=1, sort_keys=True))
    if not sanity["passed"]:
        failed = [c["name"] for c in sanity["checks"] if not c["passed"]]
        raise CommandError(f"sanity checks failed: {failed}")
    run = train(args.mode, tc, ds, init=init)
    (out / "history.json").write_text(run.history_json())
    save_ckpt(run.best_checkpoint, out / "best.ckpt")
    save_ckpt(run.final_checkpoint, out / "final.ckpt")
    _write_run(out, argv, cfg, started, mode=args.mode, data=str(args.data),
               init=str(args.init) if args.init else None, best_epoch=run.best_epoch)
    print(f"{args.mode}: best epoch {run.best_epoch}, "
          f"val accuracy {run.history[run.best_epoch - 1]['val_accuracy']:.4f}")


def _explain_cfg(cfg: PipelineConfig, args: argparse.Namespace):
    _apply(cfg.explain, n_samples=args.n_samples, kernel_width=args.kernel_width,
           segmentation=args.segmentation, top_k=args.top_k, seed=args.seed)
    return cfg.explain


def cmd_explain(args: argparse.Namespace, cfg: PipelineConfig, argv: Sequence[str]) -> None:
    started = _now()
    ecfg = _explain_cfg(cfg, args)
    out = _prepare_out(Path(args.out), args.force)
    model = load_ckpt(args.model).build()
    pixels = load_image(args.image)
    ex = explain(model, pixels, ecfg)
    am = to_mask(ex, ecfg.top_k)
    doc = ex.to_json()
    doc.update(class_name=CLASSES[ex.explained_class], top_segments=am.segments)
    (out / "weights.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    from PIL import Image

    from .uesf import _overlay

    Image.fromarray(am.mask * 255).save(out / "mask.png")
    Image.fromarray(_overlay(pixels, am.mask, (255, 60, 0))).save(out / "overlay.png")
    _write_run(out, argv, cfg, started, model=str(args.model), image=str(args.image))
    print(f"explained class {CLASSES[ex.explained_class]} (fidelity {ex.fidelity:.3f})")


def _image_set(path: Path, split: str) -> list[ImageSample]:
    if (path / "manifest.json").exists():
        return load_dataset(path).subset(split)
    files = sorted(p for p in path.rglob("*.png"))
    if not files:
        raise CommandError(f"no images found under {path}")
    return [ImageSample(pixels=load_image(p), label=0, sample_id=p.stem) for p in files]


def cmd_diff(args: argparse.Namespace, cfg: PipelineConfig, argv: Sequence[str]) -> None:
    started = _now()
    ecfg = _explain_cfg(cfg, args)
    out = _prepare_out(Path(args.out), args.force)
    images = _image_set(Path(args.images), args.split)
    if args.objects_only:
        images = [s for s in images if s.object_mask is not None and s.object_mask.any()]
    if args.limit:
        images = images[: args.limit]
    report, diffs, masks = uesf_report(load_ckpt(args.baseline), load_ckpt(args.unlearned), images, ecfg)
    write_artifacts(out, images, report, diffs, masks)
    _write_run(out, argv, cfg, started, baseline=str(args.baseline), unlearned=str(args.unlearned),
               images=str(args.images))
    print(f"{report.n_images} images; background ratio baseline={report.mean_ratio_baseline} "
          f"unlearned={report.mean_ratio_unlearned}; forgotten area={report.forgotten_area:.4f}")


def cmd_evaluate(args: argparse.Namespace, cfg: PipelineConfig, argv: Sequence[str]) -> None:
    started = _now()
    ckpt = load_ckpt(args.model)
    model = ckpt.build()
    ds = load_dataset(args.data)
    out = Path(args.out) if args.out else Path(args.model).parent / f"eval_{args.split}"
    out = _prepare_out(out, args.force)
    samples = ds.subset(args.split)
    preds = model_predict_fn(model)(samples)
    labels = np.array([s.label for s in samples])
    cm = confusion_matrix(preds, labels)
    rep = classification_report(cm)
    swap = background_swap_eval(model, samples, seed=args.swap_seed) if args.swap else None
    ids, y, z = export_embeddings(model, samples)
    pca = pca_project(z, 2)
    (out / "report.json").write_text(report_json(cm, rep, swap))
    (out / "confusion.json").write_text(json.dumps(cm.to_json(), indent=1))
    (out / "embeddings.csv").write_text(embeddings_csv(ids, y, z))
    (out / "pca2.csv").write_text(pca_csv(ids, y, pca.coords))
    sil = seafloor_silhouette(z, y)
    _write_run(out, argv, cfg, started, model=str(args.model), data=str(args.data), split=args.split,
               seafloor_silhouette=sil)
    msg = f"accuracy {rep.accuracy:.4f}"
    if swap is not None:
        msg += f"; swapped {swap.swapped:.4f} (gap {swap.gap:.4f})"
    print(msg)


def cmd_report(args: argparse.Namespace, cfg: PipelineConfig, argv: Sequence[str]) -> None:
    root = Path(args.run_dir)
    if not root.is_dir():
        raise CommandError(f"{root} is not a directory")
    reports = sorted(root.rglob("report.json"))
    bias = sorted(root.rglob("bias_report.json"))
    if not reports and not bias:
        raise CommandError(f"no report.json or bias_report.json under {root}")
    summary: dict[str, Any] = {"classification": {}, "bias": {}}
    lines = ["# Pipeline summary", ""]
    for p in reports:
        doc = json.loads(p.read_text())
        key = str(p.parent.relative_to(root))
        rep = doc["report"]
        entry = {"accuracy": rep["accuracy"], "macro_f1": rep["macro_avg"]["f1"]}
        if "background_swap" in doc:
            entry.update(swapped=doc["background_swap"]["swapped"], gap=doc["background_swap"]["gap"])
        summary["classification"][key] = entry
        lines += [f"## {key}", "", "| class | precision | recall | F1 | support |", "|---|---|---|---|---|"]
        for row in rep["classes"]:
            lines.append(f"| {row['class']} | {row['precision']:.2f} | {row['recall']:.2f} | "
                         f"{row['f1']:.2f} | {row['support']} |")
        lines.append(f"| **accuracy** | {rep['accuracy']:.4f} | | | |")
        if "background_swap" in doc:
            bs = doc["background_swap"]
            lines.append("")
            lines.append(f"Background swap: in-distribution {bs['in_distribution']:.4f}, "
                         f"swapped {bs['swapped']:.4f}, gap {bs['gap']:.4f}")
        lines.append("")
    for p in bias:
        doc = json.loads(p.read_text())
        key = str(p.parent.relative_to(root))
        entry = {k: doc[k] for k in ("n_images", "n_scored", "mean_ratio_baseline", "mean_ratio_unlearned",
                                     "frac_images_lower", "forgotten_area")}
        summary["bias"][key] = entry
        lines += [f"## UESF: {key}", ""]
        lines += [f"- {k}: {v}" for k, v in entry.items()]
        lines.append("")
    (root / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    (root / "summary.md").write_text("\n".join(lines))
    print("\n".join(lines))


# ---------------------------------------------------------------------------
# parser


def _explain_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n-samples", type=int)
    p.add_argument("--kernel-width", type=float)
    p.add_argument("--segmentation", choices=["grid", "slic"])
    p.add_argument("--top-k", type=int)
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="debias", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"debias {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, **kw: Any) -> argparse.ArgumentParser:
        p = sub.add_parser(name, **kw)
        p.add_argument("--config", help="JSON or TOML pipeline config")
        p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
        return p

    g = add("generate-data", help="generate the synthetic sonar dataset")
    g.add_argument("--n-per-class", type=int)
    g.add_argument("--bias", type=float, help="probability of the class-correlated texture")
    g.add_argument("--noise", type=float, help="speckle variance")
    g.add_argument("--image-size", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    for name, mode in (("train", None), ("unlearn", "unlearn")):
        t = add(name, help="train a baseline or unlearned model" if mode is None else "alias for train --mode unlearn")
        if mode is None:
            t.add_argument("--mode", choices=["baseline", "unlearn"], required=True)
        else:
            t.set_defaults(mode=mode)
        t.add_argument("--data", required=True)
        t.add_argument("--out", required=True)
        t.add_argument("--init", help="start from this checkpoint")
        t.add_argument("--seed", type=int)
        t.add_argument("--epochs", type=int)
        t.add_argument("--lr", type=float)
        t.add_argument("--batch-size", type=int)
        t.add_argument("--margin", type=float)
        t.add_argument("--lam", type=float, help="triplet weight (grid: 0.1, 0.5, 1.0, 2.0)")
        t.add_argument("--no-augment", action="store_true")
        t.set_defaults(func=cmd_train)

    e = add("explain", help="LIME explanation of one image")
    e.add_argument("--model", required=True)
    e.add_argument("--image", required=True)
    e.add_argument("--out", required=True)
    _explain_flags(e)
    e.set_defaults(func=cmd_explain)

    d = add("diff", help="explanation-difference maps between two models")
    d.add_argument("--baseline", required=True)
    d.add_argument("--unlearned", required=True)
    d.add_argument("--images", required=True, help="dataset directory or a directory of PNGs")
    d.add_argument("--split", default="test")
    d.add_argument("--limit", type=int, help="only the first N images")
    d.add_argument("--objects-only", action="store_true", help="skip images without an object mask")
    d.add_argument("--out", required=True)
    _explain_flags(d)
    d.set_defaults(func=cmd_diff)

    v = add("evaluate", help="classification report, confusion matrix, embeddings")
    v.add_argument("--model", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--split", default="test", choices=["train", "val", "test"])
    v.add_argument("--swap", action="store_true", help="also run the background-swap test")
    v.add_argument("--swap-seed", type=int, default=0)
    v.add_argument("--out")
    v.set_defaults(func=cmd_evaluate)

    r = add("report", help="summarize a run directory")
    r.add_argument("--run-dir", required=True)
    r.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        args.func(args, cfg, argv)
    except Exception as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(err), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
