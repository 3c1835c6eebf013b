#!/usr/bin/env python
"""Command line front end: gen-data, train, eval, ablate, export-attn, validate-data.

Run as ``python -m app.cli <command> --help``.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from pydantic import ValidationError

from app.config import build_data_config, get_settings, load_config_file, resolve_run_config
from app.data.dataset import SimRDataset
from app.data.synth import SyntheticDatasetGenerator
from app.data.text import PROMPT_TEMPLATES, resolve_template
from app.exceptions import ConfigError, DataError, SimRError
from app.export import export_attention_map
from app.metrics import pointing_game
from app.model.simr import load_model
from app.services.ablation_service import AblationService, build_cells
from app.services.evaluation_service import EvaluationService, write_reports
from app.services.rewrite_service import RewriteService
from app.services.training_service import TrainingService

logger = logging.getLogger("app.cli")


def _csv(value: str) -> List[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def _on_off(value: str) -> List[bool]:
    mapping = {"on": True, "off": False, "true": True, "false": False}
    try:
        return [mapping[v.lower()] for v in _csv(value)]
    except KeyError as exc:
        raise argparse.ArgumentTypeError(f"expected on/off values, got {exc}") from None


def _templates(value: str) -> List[str]:
    ids = _csv(value)
    for template_id in ids:
        resolve_template(template_id)
    return ids


def add_run_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON config file (flags override it)")
    parser.add_argument("--dataset", type=Path, help="Dataset directory written by gen-data")
    parser.add_argument("--out", dest="output_dir", type=Path, help="Output directory")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--dim", type=int, help="Shared feature dimension D")
    parser.add_argument("--heads", type=int, help="Cross-attention heads")
    parser.add_argument("--enc-layers", type=int, help="Self-attention blocks per encoder")
    parser.add_argument("--enc-heads", type=int)
    parser.add_argument("--ff-dim", type=int)
    parser.add_argument("--mlp-hidden", type=int)
    parser.add_argument("--head-kind", choices=["linear", "mlp", "cos_proj_proj", "cos_proj_orig"])
    parser.add_argument("--kv-choice", choices=["global", "local", "both"])
    parser.add_argument("--residual", action=argparse.BooleanOptionalAction, default=None)
    parser.add_argument("--cross-attention", action=argparse.BooleanOptionalAction, default=None)
    parser.add_argument("--prompt-align", action=argparse.BooleanOptionalAction, default=None)
    parser.add_argument("--augment-flip", action=argparse.BooleanOptionalAction, default=None)
    parser.add_argument("--direction", choices=["mean", "t2i", "i2t"])
    parser.add_argument("--optimizer", dest="kind", choices=["adam", "sgd"])
    parser.add_argument("--lr", type=float)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--rewriter-endpoint", help="Remote rewriter URL (env SIMR_REWRITER_ENDPOINT)")
    parser.add_argument("--quiet", action="store_true", help="No progress bars")


def run_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    get = lambda name: getattr(args, name, None)  # noqa: E731
    return {
        "dataset": get("dataset"),
        "output_dir": get("output_dir"),
        "seed": get("seed"),
        "prompt_align": get("prompt_align"),
        "augment_flip": get("augment_flip"),
        "direction": get("direction"),
        "rewriter_endpoint": get("rewriter_endpoint"),
        "model": {
            "dim": get("dim"),
            "heads": get("heads"),
            "enc_layers": get("enc_layers"),
            "enc_heads": get("enc_heads"),
            "ff_dim": get("ff_dim"),
            "mlp_hidden": get("mlp_hidden"),
            "head_kind": get("head_kind"),
            "kv_choice": get("kv_choice"),
            "residual": get("residual"),
            "cross_attention": get("cross_attention"),
        },
        "optim": {
            "kind": get("kind"),
            "lr": get("lr"),
            "epochs": get("epochs"),
            "batch_size": get("batch_size"),
        },
    }


def _load_dataset(path: Optional[Path]) -> SimRDataset:
    if path is None:
        raise ConfigError("--dataset is required")
    return SimRDataset(path)


def cmd_gen_data(args: argparse.Namespace) -> int:
    file_values = load_config_file(args.config).get("data", {})
    overrides = {
        "k": args.k,
        "grid_rows": args.grid_rows,
        "grid_cols": args.grid_cols,
        "p": args.p,
        "max_len": args.max_len,
        "n_train": args.n_train,
        "n_val": args.n_val,
        "n_test": args.n_test,
        "seed": args.seed,
        "noise_sigma": args.noise_sigma,
        "max_concepts_per_image": args.max_concepts,
    }
    config = build_data_config({**file_values, **{k: v for k, v in overrides.items() if v is not None}})

    print("🚀 Generating synthetic dataset...")
    print(f"   Output: {args.out}")
    generator = SyntheticDatasetGenerator(config, args.out)
    manifest = generator.run()

    print("\n" + "=" * 50)
    print("📊 Dataset Summary")
    print("=" * 50)
    for label, value in generator.summary():
        print(f"✅ {label}: {value}")
    print(f"✅ concepts: {', '.join(manifest.concepts)}")
    print(f"✅ grid {manifest.grid_dims[0]}x{manifest.grid_dims[1]}, P={manifest.p}, M={manifest.m}")
    print(f"\n🎉 Manifest written to {Path(args.out) / 'manifest.json'}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = resolve_run_config(run_overrides(args), args.config)
    dataset = _load_dataset(config.dataset)
    rewriter = None
    if config.prompt_align and config.rewriter_endpoint:
        rewriter = RewriteService(dataset.concepts, endpoint=config.rewriter_endpoint)

    print("🚀 Training SimR model...")
    print(f"   Dataset: {config.dataset}")
    print(f"   Output:  {config.output_dir}")
    service = TrainingService(config, dataset, rewriter=rewriter, progress=not args.quiet and sys.stderr.isatty())
    result = service.run()

    print("\n" + "=" * 50)
    print("📊 Training Summary")
    print("=" * 50)
    print(f"✅ Iterations: {len(result.history)}")
    print(f"✅ Loss: {result.initial_loss:.4f} -> {result.final_loss:.4f}")
    print(f"✅ Best epoch (val loss): {result.best_epoch}")
    print(f"✅ Checkpoints: {result.best_checkpoint.name}, {result.last_checkpoint.name}")
    if rewriter is not None:
        print(f"✅ Rewriter: {rewriter.stats['remote']} remote, {rewriter.stats['fallback']} fallback")
        if rewriter.stats["fallback"]:
            print("⚠️  Some reports used the rule-based prompt alignment")
    print("\n🎉 Training completed successfully!")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    model, sidecar = load_model(args.checkpoint)
    run = sidecar.get("run", {})
    direction = args.direction or run.get("direction", "mean")
    dataset = _load_dataset(args.dataset or run.get("dataset") and Path(run["dataset"]))
    output_dir = Path(args.out or Path(args.checkpoint).parent)
    evaluator = EvaluationService(model, dataset, run)

    print("🔍 Zero-shot evaluation...")
    reports = [evaluator.evaluate(t, direction, args.split) for t in args.template]
    paths = write_reports(reports, output_dir)

    print("\n" + "=" * 50)
    print("📊 Evaluation Summary")
    print("=" * 50)
    for report in reports:
        m = report.mean
        flag = " (aligned)" if report.aligned else ""
        auc_text = "n/a" if m.auc is None else f"{m.auc:.4f}"
        hit_text = "n/a" if m.pointing_hit_rate is None else f"{m.pointing_hit_rate:.4f}"
        print(f"✅ {report.template_id}{flag} [{report.direction}]: AUC {auc_text}, MCC {m.mcc:.4f}, "
              f"F1 {m.f1:.4f}, ACC {m.acc:.4f}, pointing {hit_text}")
        fallbacks = [c.concept for c in report.per_class if c.threshold_fallback]
        if fallbacks:
            print(f"   ⚠️  Median threshold fallback for: {', '.join(fallbacks)}")
    for path in paths:
        print(f"   📁 {path}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    base = resolve_run_config(run_overrides(args), args.config)
    dataset = _load_dataset(base.dataset)
    cells = build_cells(args.head_kinds, args.kv_choices, args.pa, args.ca)
    print(f"🧪 Ablation grid: {len(cells)} cells x {len(args.templates)} templates")
    service = AblationService(base, dataset, args.templates, progress=False)
    table = service.run(cells, check_ordering=not args.no_ordering_check)

    print("\n" + "=" * 50)
    print("📊 Ablation Summary")
    print("=" * 50)
    for row in table.itertuples():
        status = "✅" if row.status == "ok" else "❌"
        auc_text = "failed" if row.status != "ok" or row.auc != row.auc else f"AUC {row.auc:.4f}"
        print(f"{status} CA={row.cross_attention} PA={row.prompt_align} {row.head_kind}/{row.kv_choice} "
              f"{row.template}: {auc_text}")
    print(f"\n📁 {Path(base.output_dir) / 'ablation.csv'}")
    return 0


def cmd_export_attn(args: argparse.Namespace) -> int:
    model, sidecar = load_model(args.checkpoint)
    run = sidecar.get("run", {})
    dataset = _load_dataset(args.dataset or run.get("dataset") and Path(run["dataset"]))
    if args.concept not in dataset.concepts:
        raise ConfigError(f"unknown concept {args.concept!r}; dataset has {', '.join(dataset.concepts)}")
    k = dataset.concepts.index(args.concept)
    split = dataset.split(args.split)
    lookup = {int(sid): row for row, sid in enumerate(split.ids)}
    try:
        rows = [lookup[int(sid)] for sid in args.samples]
    except KeyError as exc:
        raise DataError(f"sample id {exc} is not in the {args.split} split") from None

    evaluator = EvaluationService(model, dataset, run)
    result = evaluator.attention_for(args.template, args.split, rows)
    out_dir = Path(args.out)
    print(f"🖼️  Exporting {len(rows)} attention maps for {args.concept}...")
    for j, (sid, row) in enumerate(zip(args.samples, rows)):
        attn = result.attn_t2i[j, k]
        grounding = split.grounding_sets(row, k)
        path = export_attention_map(
            attn,
            dataset.grid_dims,
            result.local_count,
            out_dir / f"{args.split}_{sid}_{args.concept}.pgm",
            log_row={
                "sample_id": int(sid),
                "concept": args.concept,
                "label": int(split.labels[row, k] > 0.5),
                "score": float(result.scores[j, k]),
                "argmax_patch": int(np.argmax(attn.mean(axis=0)[: result.local_count])),
                "hit": pointing_game(attn, grounding, result.local_count) if grounding else None,
            },
            config={**run, "export": {"template": args.template, "split": args.split, "concept": args.concept}},
        )
        print(f"   ✅ {path}")
    return 0


def cmd_validate_data(args: argparse.Namespace) -> int:
    print(f"🔍 Validating dataset {args.dataset}...")
    dataset = SimRDataset(args.dataset)
    for name, split in dataset.splits.items():
        print(f"   📁 {name}: {len(split)} samples, {int(split.labels.sum())} positive labels")
    problems = dataset.validate()
    if problems:
        print(f"\n⚠️  Found {len(problems)} problems:")
        for problem in problems[:20]:
            print(f"   - {problem}")
        if len(problems) > 20:
            print(f"   ... and {len(problems) - 20} more")
        return DataError.exit_code
    print("\n🎉 Dataset is consistent")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="SimR cross-attention alignment lab")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="Generate a synthetic paired dataset")
    gen.add_argument("--out", type=Path, required=True)
    gen.add_argument("--config", type=Path)
    gen.add_argument("--seed", type=int)
    gen.add_argument("--k", type=int, help="Number of concepts")
    gen.add_argument("--grid-rows", type=int)
    gen.add_argument("--grid-cols", type=int)
    gen.add_argument("--p", type=int, help="Raw features per patch")
    gen.add_argument("--max-len", type=int, help="Maximum text length M")
    gen.add_argument("--n-train", type=int)
    gen.add_argument("--n-val", type=int)
    gen.add_argument("--n-test", type=int)
    gen.add_argument("--noise-sigma", type=float)
    gen.add_argument("--max-concepts", type=int)
    gen.set_defaults(func=cmd_gen_data)

    train = sub.add_parser("train", help="Train a model")
    add_run_arguments(train)
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="Zero-shot evaluation of a checkpoint")
    ev.add_argument("--checkpoint", type=Path, required=True)
    ev.add_argument("--dataset", type=Path)
    ev.add_argument("--template", type=_templates, default=["P1"],
                    help=f"Prompt template id(s), comma separated: {', '.join(PROMPT_TEMPLATES)}")
    ev.add_argument("--direction", choices=["mean", "t2i", "i2t"])
    ev.add_argument("--split", default="test")
    ev.add_argument("--out", type=Path)
    ev.set_defaults(func=cmd_eval)

    ab = sub.add_parser("ablate", help="Train and evaluate a grid of variants")
    add_run_arguments(ab)
    ab.add_argument("--head-kinds", type=_csv, default=["linear", "mlp", "cos_proj_proj", "cos_proj_orig"])
    ab.add_argument("--kv-choices", type=_csv, default=["both"])
    ab.add_argument("--pa", type=_on_off, default=[True], help="Prompt alignment axis, e.g. on,off")
    ab.add_argument("--ca", type=_on_off, default=[True], help="Cross-attention axis, e.g. on,off")
    ab.add_argument("--templates", type=_templates, default=["P1"])
    ab.add_argument("--no-ordering-check", action="store_true")
    ab.set_defaults(func=cmd_ablate)

    ex = sub.add_parser("export-attn", help="Write attention maps as PGM images")
    ex.add_argument("--checkpoint", type=Path, required=True)
    ex.add_argument("--dataset", type=Path)
    ex.add_argument("--concept", required=True)
    ex.add_argument("--samples", type=lambda v: [int(x) for x in _csv(v)], required=True,
                    help="Comma separated sample ids")
    ex.add_argument("--split", default="test")
    ex.add_argument("--template", default="P1")
    ex.add_argument("--out", type=Path, required=True)
    ex.set_defaults(func=cmd_export_attn)

    val = sub.add_parser("validate-data", help="Check a dataset directory for consistency")
    val.add_argument("--dataset", type=Path, required=True)
    val.set_defaults(func=cmd_validate_data)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    settings = get_settings()
    logging.basicConfig(level=settings.log_level, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as exc:
        print(f"❌ {exc}", file=sys.stderr)
        return exc.exit_code
    try:
        return args.func(args)
    except SimRError as exc:
        print(f"❌ {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValidationError as exc:
        print(f"❌ invalid configuration: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    except OSError as exc:
        print(f"❌ I/O error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
