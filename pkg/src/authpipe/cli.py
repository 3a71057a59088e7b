"""``authpipe`` command-line entry point.

Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.
Diagnostics go to stderr; machine-readable results go to files.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Sequence

from authpipe import __version__
from authpipe.errors import AuthpipeError, ValidationError

log = logging.getLogger("authpipe")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
COMMANDS = ("ingest", "patch", "split", "train", "run", "eval", "summarize", "report", "prompts", "stylegan-cmd")


@dataclass(frozen=True)
class GlobalConfig:
    cache_dir: Path = Path("cache")
    results_dir: Path = Path("results")
    master_seed: int = 0
    worker_count: int = 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cache_dir"], d["results_dir"] = str(self.cache_dir), str(self.results_dir)
        return d


def resolve_config(args: argparse.Namespace, environ: dict | None = None) -> GlobalConfig:
    """defaults < config file < AUTHPIPE_CACHE < command-line flags."""
    environ = os.environ if environ is None else environ
    cfg = GlobalConfig()
    if args.config_file:
        path = Path(args.config_file)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config file {path}: {exc}") from None
        known = {f.name for f in fields(GlobalConfig)}
        unknown = set(doc) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg = replace(cfg, **doc)
    if environ.get("AUTHPIPE_CACHE"):
        cfg = replace(cfg, cache_dir=environ["AUTHPIPE_CACHE"])
    overrides = {
        "cache_dir": args.cache_dir, "results_dir": args.results_dir,
        "master_seed": args.master_seed, "worker_count": args.workers,
    }
    cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    cfg = replace(cfg, cache_dir=Path(cfg.cache_dir), results_dir=Path(cfg.results_dir))
    if cfg.worker_count < 1:
        raise ValidationError("worker_count must be positive")
    if not 0 <= int(cfg.master_seed) < 2**64:
        raise ValidationError("master_seed must be an unsigned 64-bit integer")
    return cfg


def dump_effective_config(out_dir: Path, cfg: GlobalConfig, command: str, options: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "version": __version__, "global": cfg.to_dict(), "options": options}
    (out_dir / "effective_config.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8"
    )


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise ValidationError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="authpipe", description="Art authentication experiment pipeline.")
    p.add_argument("--version", action="version", version=f"authpipe {__version__}")
    p.add_argument("--config-file", help="global JSON config (cache_dir, results_dir, master_seed, worker_count)")
    p.add_argument("--cache-dir")
    p.add_argument("--results-dir")
    p.add_argument("--master-seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    s = sub.add_parser("ingest", help="validate a manifest and tabulate its composition")
    s.add_argument("--manifest", required=True)
    s.add_argument("--check-table1", action="store_true", help="compare with the published composition")
    s.add_argument("--reference", help="reference dataset name (default: the manifest's artist_tag)")
    s.add_argument("--out", help="write the composition summary as JSON")

    s = sub.add_parser("patch", help="extract and cache patches")
    s.add_argument("--manifest", required=True)
    s.add_argument("--target-side", type=int, choices=(224, 256), required=True)
    s.add_argument("--out", help="cache root (default: <cache_dir>/<side>px)")

    s = sub.add_parser("split", help="generate bootstrapped splits")
    s.add_argument("--manifest", required=True)
    s.add_argument("--n", type=int, default=10)
    s.add_argument("--seed", type=int, help="master seed (default: global master_seed)")
    s.add_argument("--out", required=True)

    for name, helptext in (("train", "train one cell"), ("eval", "evaluate a trained cell")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config", required=True, help="experiment JSON")
        s.add_argument("--split", type=int, required=True)
        s.add_argument("--force", action="store_true")
        if name == "eval":
            _add_eval_flags(s)

    s = sub.add_parser("run", help="run the experiment matrix")
    s.add_argument("--artist", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--matrix", choices=("with_forgeries", "without_forgeries", "both"), default="both")
    s.add_argument("--backbones", default="swin_base,efficientnet_b0")
    s.add_argument("--pretrained", choices=("imagenet", "none"))
    s.add_argument("--splits", required=True)
    s.add_argument("--out", help="results directory (default: global results_dir)")
    s.add_argument("--lr", type=float, default=1e-5)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--max-epochs", type=int, default=50)
    s.add_argument("--patience", type=int, default=5)
    s.add_argument("--train-seed", type=int, default=0)
    s.add_argument("--force", action="store_true")
    _add_eval_flags(s)

    s = sub.add_parser("summarize", help="median and uncertainty per configuration")
    s.add_argument("--in", dest="in_dir", required=True)
    s.add_argument("--uncertainty", choices=("bootstrap", "empirical"), default="bootstrap")
    s.add_argument("--n-bootstrap", type=int, default=10_000)
    s.add_argument("--out", help="summary JSON (default: <in>/summary.json)")

    s = sub.add_parser("report", help="render tables and bar charts")
    s.add_argument("--in", dest="in_dir", required=True)
    s.add_argument("--artist", required=True)
    s.add_argument("--kind", default="all",
                   choices=("all", "forgery_detection_with", "forgery_detection_without", "synthetic_detection"))
    s.add_argument("--formats", default="csv,markdown,svg")
    s.add_argument("--out", required=True)

    s = sub.add_parser("prompts", help="emit diffusion generation jobs")
    s.add_argument("--artist", required=True)
    s.add_argument("--style", required=True)
    s.add_argument("--contents", required=True, help="text file, one content phrase per line")
    s.add_argument("--count", type=int, default=1, help="images per prompt")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    s = sub.add_parser("stylegan-cmd", help="print the StyleGAN training command")
    s.add_argument("--resolution", type=int, required=True)
    return p


def _add_eval_flags(s: argparse.ArgumentParser) -> None:
    s.add_argument("--groups", default="originals,forgeries,diffusion,tuned_gans,proxies")
    s.add_argument("--aggregation", choices=("mean", "majority"), default="mean")


def _csv(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def cmd_ingest(args, cfg: GlobalConfig) -> int:
    from authpipe.manifest import REFERENCE_COMPOSITIONS, compare_to_reference, ingest_manifest, summarize_manifest

    m = ingest_manifest(args.manifest, workers=cfg.worker_count)
    summary = summarize_manifest(m)
    print(f"{m.artist_tag}: {len(m)} images", file=sys.stderr)
    for row in summary:
        print(f"  {row.set_label.value:<11} {row.image_count:>5} images {row.expected_patch_count:>6} patches",
              file=sys.stderr)
    if args.out:
        doc = {"artist_tag": m.artist_tag,
               "sets": [{"set": r.set_label.value, "images": r.image_count, "patches": r.expected_patch_count}
                        for r in summary]}
        Path(args.out).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    if args.check_table1:
        ref_name = args.reference or m.artist_tag
        if ref_name not in REFERENCE_COMPOSITIONS:
            raise ValidationError(
                f"no reference composition {ref_name!r}; known: {', '.join(REFERENCE_COMPOSITIONS)}"
            )
        problems = compare_to_reference(summary, REFERENCE_COMPOSITIONS[ref_name])
        for msg in problems:
            print(f"mismatch: {msg}", file=sys.stderr)
        if problems:
            return EXIT_INVALID
        print(f"composition matches the {ref_name} reference", file=sys.stderr)
    return EXIT_OK


def cmd_patch(args, cfg: GlobalConfig) -> int:
    from authpipe.manifest import ingest_manifest
    from authpipe.patcher import build_patch_cache

    m = ingest_manifest(args.manifest, workers=cfg.worker_count)
    out = Path(args.out) if args.out else cfg.cache_dir / f"{args.target_side}px"
    n = build_patch_cache(m, args.target_side, out, workers=cfg.worker_count)
    dump_effective_config(out, cfg, "patch", {"manifest": args.manifest, "target_side": args.target_side})
    print(f"wrote {n} patches for {len(m)} images to {out}", file=sys.stderr)
    return EXIT_OK


def cmd_split(args, cfg: GlobalConfig) -> int:
    from authpipe.manifest import ingest_manifest
    from authpipe.splitter import make_splits, save_splits

    seed = cfg.master_seed if args.seed is None else args.seed
    m = ingest_manifest(args.manifest, workers=cfg.worker_count)
    plans = make_splits(m, n_splits=args.n, master_seed=seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_splits(plans, out)
    dump_effective_config(out.parent, replace(cfg, master_seed=seed), "split",
                          {"manifest": args.manifest, "n": args.n, "out": str(out)})
    print(f"wrote {len(plans)} splits to {out}", file=sys.stderr)
    return EXIT_OK


def _cell_context(args, cfg: GlobalConfig):
    from authpipe.experiment_runner import ResultsStore, load_experiment
    from authpipe.manifest import ingest_manifest
    from authpipe.splitter import load_splits

    exp = load_experiment(args.config)
    manifest = ingest_manifest(exp.manifest_file, workers=cfg.worker_count)
    plans = load_splits(exp.split_file)
    plan = next((p for p in plans if p.split_index == args.split), None)
    if plan is None:
        raise ValidationError(f"split {args.split} not in {exp.split_file}")
    store = ResultsStore(cfg.results_dir)
    return exp, manifest, plan, store


def cmd_train(args, cfg: GlobalConfig) -> int:
    from authpipe.classifier_harness import build_model, save_model, train
    from authpipe.experiment_runner import prepare_cell

    exp, manifest, plan, store = _cell_context(args, cfg)
    run_dir = store.run_dir(exp.fingerprint(), args.split)
    if (run_dir / "train_log.json").exists() and not args.force:
        raise ValidationError(f"{run_dir} already holds a trained model; use --force")
    cell = prepare_cell(exp, plan, manifest, cfg.cache_dir)
    model = build_model(exp.backbone, seed=cell.train_cfg.seed)
    train(model, cell.train_patches, cell.val_patches, cell.train_cfg)
    ckpt = save_model(model, run_dir)
    dump_effective_config(run_dir, cfg, "train", {"config": args.config, "split": args.split})
    print(f"best epoch {model.best_epoch}; checkpoint {ckpt}", file=sys.stderr)
    return EXIT_OK


def cmd_eval(args, cfg: GlobalConfig) -> int:
    from authpipe.classifier_harness import load_model
    from authpipe.evaluator import evaluate, write_eval
    from authpipe.patcher import load_patch_index, resolve_cache_root

    exp, manifest, plan, store = _cell_context(args, cfg)
    fp = exp.fingerprint()
    run_dir = store.run_dir(fp, args.split)
    model = load_model(run_dir)
    side = exp.backbone.input_side
    refs = load_patch_index(manifest, resolve_cache_root(cfg.cache_dir, side), side)
    report = evaluate(model, plan, refs, manifest, groups=_csv(args.groups), rule=args.aggregation)
    row = {"fingerprint": fp, "split_index": args.split, "config": exp.identity(), "label": exp.label()}
    meta = {"code_version": __version__, "split_seed": plan.seed, "master_seed": plan.master_seed,
            "best_epoch": model.best_epoch}
    write_eval(report, run_dir / "eval.json", metadata={**row, "train_meta": meta})
    store.add({**row, "status": "ok", "report": report.to_dict(with_predictions=False), "train_meta": meta},
              force=args.force)
    for group, acc in report.per_set_accuracy.items():
        print(f"  {group:<11} {acc:.3f} ({report.n_images[group]} images)", file=sys.stderr)
    return EXIT_OK


def cmd_run(args, cfg: GlobalConfig) -> int:
    from authpipe.classifier_harness import BackboneSpec, TrainConfig
    from authpipe.experiment_runner import ResultsStore, enumerate_matrix, run_matrix
    from authpipe.manifest import ingest_manifest
    from authpipe.splitter import load_splits

    manifest = ingest_manifest(args.manifest, workers=cfg.worker_count)
    if manifest.artist_tag != args.artist:
        raise ValidationError(f"manifest is for {manifest.artist_tag!r}, not {args.artist!r}")
    plans = load_splits(args.splits)
    backbones = [BackboneSpec.named(b, args.pretrained) for b in _csv(args.backbones)]
    train_cfg = TrainConfig(args.lr, args.batch_size, args.max_epochs, args.patience, args.train_seed)
    configs = enumerate_matrix(args.artist, backbones, args.matrix, args.splits, args.manifest, train_cfg)
    out = Path(args.out) if args.out else cfg.results_dir
    store = ResultsStore(out)
    outcome = run_matrix(configs, manifest=manifest, plans=plans, cache_dir=cfg.cache_dir, store=store,
                         workers=cfg.worker_count, groups=_csv(args.groups), rule=args.aggregation,
                         force=args.force)
    dump_effective_config(out, cfg, "run", {k: v for k, v in vars(args).items() if k != "func"})
    print(f"{len(outcome.completed)} cells run, {len(outcome.skipped)} already recorded, "
          f"{len(outcome.failed)} failed", file=sys.stderr)
    return EXIT_RUNTIME if outcome.failed else EXIT_OK


def cmd_summarize(args, cfg: GlobalConfig) -> int:
    from authpipe.experiment_runner import ResultsStore, save_summary, summarize_matrix

    store_dir = Path(args.in_dir)
    if not (store_dir / "results.jsonl").is_file():
        raise ValidationError(f"no results.jsonl in {store_dir}")
    rows = summarize_matrix(ResultsStore(store_dir), uncertainty=args.uncertainty,
                            n_bootstrap=args.n_bootstrap, seed=cfg.master_seed)
    out = Path(args.out) if args.out else store_dir / "summary.json"
    save_summary(rows, out, metadata={"uncertainty": args.uncertainty, "n_bootstrap": args.n_bootstrap,
                                      "master_seed": cfg.master_seed, "version": __version__})
    flagged = sorted({r.fingerprint for r in rows if r.incomplete})
    print(f"{len(rows)} summary rows written to {out}; {len(flagged)} incomplete configs", file=sys.stderr)
    return EXIT_OK


def cmd_report(args, cfg: GlobalConfig) -> int:
    from authpipe.experiment_runner import ResultsStore, load_summary, summarize_matrix
    from authpipe.report import TABLE_KINDS, render_report

    in_dir = Path(args.in_dir)
    summary_file = in_dir / "summary.json"
    if summary_file.is_file():
        rows = load_summary(summary_file)
    elif (in_dir / "results.jsonl").is_file():
        rows = summarize_matrix(ResultsStore(in_dir), seed=cfg.master_seed)
    else:
        raise ValidationError(f"no summary.json or results.jsonl in {in_dir}")
    kinds = list(TABLE_KINDS) if args.kind == "all" else [args.kind]
    written = render_report(rows, args.artist, kinds, _csv(args.formats), args.out)
    for path in written:
        print(f"wrote {path}", file=sys.stderr)
    if not written:
        raise ValidationError(f"nothing to report for {args.artist}")
    return EXIT_OK


def cmd_prompts(args, cfg: GlobalConfig) -> int:
    from authpipe.synthetic_tooling import PromptSpec, emit_diffusion_jobs, write_jobs

    try:
        lines = Path(args.contents).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ValidationError(f"cannot read {args.contents}: {exc}") from None
    specs = [PromptSpec(args.style, c.strip(), args.artist) for c in lines if c.strip()]
    jobs = emit_diffusion_jobs(specs, args.count, seed=args.seed) if specs else []
    write_jobs(jobs, args.out)
    print(f"wrote {len(jobs)} jobs to {args.out}", file=sys.stderr)
    return EXIT_OK


def cmd_stylegan(args, cfg: GlobalConfig) -> int:
    from authpipe.synthetic_tooling import emit_stylegan_command

    print(emit_stylegan_command(args.resolution))
    return EXIT_OK


HANDLERS = {
    "ingest": cmd_ingest, "patch": cmd_patch, "split": cmd_split, "train": cmd_train,
    "run": cmd_run, "eval": cmd_eval, "summarize": cmd_summarize, "report": cmd_report,
    "prompts": cmd_prompts, "stylegan-cmd": cmd_stylegan,
}


def dispatch(argv: Sequence[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_INVALID
        logging.basicConfig(
            level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
            stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
        )
        cfg = resolve_config(args)
        return HANDLERS[args.command](args, cfg)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (AuthpipeError, OSError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
