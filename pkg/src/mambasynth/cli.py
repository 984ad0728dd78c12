"""Command-line entry point.

Subcommands: make-phantoms, train, synth, eval, selftest.  Every
artifact-producing command validates its inputs before touching the
filesystem, writes only under --out, and records a run manifest there.
Exit codes: 0 success, 1 property/metric failure, 2 usage or environment
error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint
from .data import (
    DataError,
    DatasetManifest,
    dataset_content_hash,
    denormalize,
    load_dataset,
    parse_task,
    read_raw_tensor,
    sample_arrays,
    write_phantom_dataset,
    write_raw_tensor,
)
from .discriminator import PatchDiscriminator
from .generator import GeneratorConfig, build_generator
from .metrics import ImageMetrics, build_report, psnr, ssim, wilcoxon_signed_rank
from .report import (
    save_preview_grid,
    write_metric_csv,
    write_metric_figures,
    write_metric_table,
    write_training_curves,
)
from .selftest import SUITES, inject_fault, run_suites
from .tensor import ConfigError
from .training import (
    TrainConfig,
    TrainingDiverged,
    restore_training_checkpoint,
    synthesize,
    train,
)


class UsageError(Exception):
    pass


def _write_run_manifest(out_dir: Path, command: str, resolved: dict) -> None:
    manifest = {"tool": "mambasynth", "version": __version__,
                "command": command, "resolved": resolved}
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        blob = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise UsageError(f"cannot read config file {path}: {err}") from err
    if not isinstance(blob, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return blob


def _require_dataset(root) -> Path:
    root = Path(root)
    if not root.is_dir() or not (root / "manifest.txt").is_file():
        raise UsageError(f"dataset root {root} missing or has no manifest.txt")
    return root


# -- subcommands ---------------------------------------------------------------------


def cmd_make_phantoms(args) -> int:
    out = Path(args.out)
    counts = {"train": args.train, "val": args.val, "test": args.test}
    manifest = write_phantom_dataset(out, counts, (args.size, args.size), args.seed)
    _write_run_manifest(out, "make-phantoms", {
        "counts": counts, "size": args.size, "seed": args.seed,
        "dataset_hash": manifest.content_hash,
    })
    total = sum(counts.values())
    print(f"wrote {total} phantom sample(s) under {out} (hash {manifest.content_hash[:12]})")
    return 0


def _resolve_train_configs(args, height: int, width: int, num_sources: int):
    blob = _load_config_file(args.config)
    gen_kw = dict(blob.get("generator", {}))
    train_kw = dict(blob.get("train", {}))

    gen_kw.update(num_sources=num_sources, height=height, width=width)
    for flag, key in [("channels", "channels"), ("stages", "stages"), ("patch", "patch"),
                      ("state_dim", "state_dim"), ("base_width", "base_width")]:
        if getattr(args, flag) is not None:
            gen_kw[key] = getattr(args, flag)
    if args.mixer_stages is not None:
        text = args.mixer_stages.strip()
        gen_kw["mixer_stages"] = [int(s) for s in text.split(",") if s] if text else []

    for flag, key in [("epochs", "epochs"), ("lr", "learning_rate"),
                      ("lambda_pix", "lambda_pix"), ("lambda_adv", "lambda_adv"),
                      ("seed", "seed"), ("batch_size", "batch_size"),
                      ("max_iterations", "max_iterations"),
                      ("checkpoint_every", "checkpoint_every"),
                      ("loss_orientation", "loss_mode"),
                      ("disc_width", "disc_base_width"),
                      ("target_psnr", "target_train_psnr"),
                      ("target_ssim", "target_train_ssim")]:
        if getattr(args, flag) is not None:
            train_kw[key] = getattr(args, flag)
    if args.flip_augment:
        train_kw["flip_augment"] = True

    try:
        return GeneratorConfig(**gen_kw), TrainConfig(**train_kw)
    except (ConfigError, TypeError) as err:
        raise UsageError(f"invalid configuration: {err}") from err


def cmd_train(args) -> int:
    root = _require_dataset(args.data)
    task = parse_task(args.task)
    train_samples, manifest = load_dataset(root, task, "train")
    if not train_samples:
        raise UsageError(f"no training samples under {root}/train for task {task}")
    val_samples, _ = ([], None)
    if (root / "val").is_dir():
        val_samples, _ = load_dataset(root, task, "val")
    h, w = next(iter(train_samples[0].images.values())).shape
    gen_config, train_config = _resolve_train_configs(args, h, w, len(task.sources))
    target_range = manifest.ranges[task.target]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data_hash = dataset_content_hash(root)
    generator = build_generator(gen_config, seed=train_config.seed)
    discriminator = None
    if train_config.lambda_adv > 0:
        discriminator = PatchDiscriminator(
            len(task.sources), base_width=train_config.disc_base_width,
            rng=np.random.default_rng(np.random.SeedSequence([train_config.seed, 17])),
            dtype=gen_config.np_dtype)

    _write_run_manifest(out, "train", {
        "data": str(root), "task": str(task), "dataset_hash": data_hash,
        "seed": train_config.seed, "generator": gen_config.to_dict(),
        "train": asdict(train_config),
        "resume_from": str(args.checkpoint) if args.checkpoint else None,
    })
    try:
        result = train(generator, discriminator, train_samples, val_samples, task,
                       target_range, train_config, out, dataset_hash=data_hash,
                       resume_from=args.checkpoint)
    except TrainingDiverged as err:
        print(f"training diverged: {err}", file=sys.stderr)
        if err.last_checkpoint is not None:
            print(f"last good checkpoint: {err.last_checkpoint}", file=sys.stderr)
        return 1
    write_training_curves(result.log_path, out / "training_curves.png")
    print(f"trained {result.iterations} iteration(s) over {result.epochs_run} epoch(s)")
    print(f"final checkpoint: {result.final_checkpoint}")
    if result.last_train_report is not None:
        print(f"training-set PSNR {result.last_train_report.psnr_mean:.2f} dB, "
              f"SSIM {result.last_train_report.ssim_mean:.4f}")
    return 0


def cmd_synth(args) -> int:
    try:
        arrays, meta = load_checkpoint(args.checkpoint)
    except (OSError, CheckpointError) as err:
        raise UsageError(f"cannot load checkpoint {args.checkpoint}: {err}") from err
    if "gen_config" not in meta or "task" not in meta:
        raise UsageError(f"checkpoint {args.checkpoint} lacks a self-describing config")
    task = parse_task(meta["task"])
    if args.task and args.task != str(task):
        raise UsageError(
            f"checkpoint was trained for task '{task}', requested '{args.task}'")
    root = _require_dataset(args.data)
    samples, manifest = load_dataset(root, task, args.split)
    if not samples:
        raise UsageError(f"no samples under {root}/{args.split} for task {task}")

    gen_config = GeneratorConfig.from_dict(meta["gen_config"])
    h, w = next(iter(samples[0].images.values())).shape
    if (h, w) != (gen_config.height, gen_config.width):
        raise UsageError(
            f"checkpoint expects {gen_config.height}x{gen_config.width} images, "
            f"dataset provides {h}x{w}")
    generator = build_generator(gen_config, seed=0)
    from .checkpoint import restore_module

    restore_module(generator, arrays, "gen.")
    generator.eval()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lo, hi = meta.get("target_range", manifest.ranges[task.target])
    preview_rows = []
    for s in samples:
        x, y_ref = sample_arrays(s, task)
        y_hat = synthesize(generator, x)
        native = denormalize(y_hat[0], lo, hi).astype(np.float32)
        write_raw_tensor(out / f"{s.subject}_{s.index:04d}.raw", native)
        if len(preview_rows) < args.preview_rows:
            panels = [denormalize(x[i], *manifest.ranges[m])
                      for i, m in enumerate(task.sources)]
            panels += [native, denormalize(y_ref[0], lo, hi)]
            preview_rows.append((f"{s.subject}/{s.index}", panels))
    save_preview_grid(preview_rows, out / "preview.png", vmin=lo, vmax=hi)
    _write_run_manifest(out, "synth", {
        "checkpoint": str(args.checkpoint), "data": str(root), "split": args.split,
        "task": str(task), "count": len(samples),
        "dataset_hash": dataset_content_hash(root),
        "checkpoint_meta": {k: meta[k] for k in ("task", "dataset_hash") if k in meta},
    })
    print(f"synthesized {len(samples)} image(s) into {out}")
    return 0


def _paired_idents(synth_dir: Path, samples) -> list[tuple[str, Path]]:
    pairs = []
    missing = []
    for s in samples:
        path = synth_dir / f"{s.subject}_{s.index:04d}.raw"
        if path.is_file():
            pairs.append((f"{s.subject}/{s.index}", path))
        else:
            missing.append(path.name)
    if missing:
        raise UsageError("unpaired samples, missing synthesized files: " + ", ".join(missing))
    return pairs


def _eval_against_dataset(args, synth_dir: Path):
    root = _require_dataset(args.data)
    task = parse_task(args.task)
    samples, manifest = load_dataset(root, task, args.split)
    lo, hi = manifest.ranges[task.target]
    rows = []
    per_image = {}
    for (ident, path), s in zip(_paired_idents(synth_dir, samples), samples):
        y_hat = read_raw_tensor(path)
        y_ref = denormalize(s.images[task.target], lo, hi)
        row = ImageMetrics(ident, psnr(y_hat, y_ref, hi - lo), ssim(y_hat, y_ref, hi - lo))
        rows.append(row)
        per_image[ident] = row
    return build_report(str(task), rows), samples, (lo, hi), per_image


def _eval_against_reference(args, synth_dir: Path):
    ref_dir = Path(args.reference)
    names = sorted(p.name for p in synth_dir.glob("*.raw"))
    if not names:
        raise UsageError(f"no .raw files in {synth_dir}")
    missing = [n for n in names if not (ref_dir / n).is_file()]
    if missing:
        raise UsageError("unpaired files, missing references: " + ", ".join(missing))
    rows = []
    rng = args.data_range
    for name in names:
        a = read_raw_tensor(synth_dir / name)
        b = read_raw_tensor(ref_dir / name)
        rows.append(ImageMetrics(name, psnr(a, b, rng), ssim(a, b, rng)))
    return build_report(f"{synth_dir.name} vs {ref_dir.name}", rows)


def cmd_eval(args) -> int:
    synth_dir = Path(args.synth)
    if not synth_dir.is_dir():
        raise UsageError(f"synthesis directory {synth_dir} does not exist")
    if (args.reference is None) == (args.data is None):
        raise UsageError("pass exactly one of --reference or --data/--task")

    if args.reference is not None:
        report = _eval_against_reference(args, synth_dir)
    else:
        if args.task is None:
            raise UsageError("--task is required with --data")
        report, samples, (lo, hi), per_image = _eval_against_dataset(args, synth_dir)
        if args.compare_to:
            other = Path(args.compare_to)
            other_rows = {}
            for (ident, path), s in zip(_paired_idents(other, samples), samples):
                y_hat = read_raw_tensor(path)
                y_ref = denormalize(s.images[parse_task(args.task).target], lo, hi)
                other_rows[ident] = ImageMetrics(
                    ident, psnr(y_hat, y_ref, hi - lo), ssim(y_hat, y_ref, hi - lo))
            idents = [r.ident for r in report.rows]
            report.p_values["psnr_vs_compare"] = wilcoxon_signed_rank(
                [per_image[i].psnr for i in idents],
                [other_rows[i].psnr for i in idents])
            report.p_values["ssim_vs_compare"] = wilcoxon_signed_rank(
                [per_image[i].ssim for i in idents],
                [other_rows[i].ssim for i in idents])

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_metric_table(report, out / "metrics.txt")
    write_metric_csv(report, out / "metrics.csv")
    write_metric_figures(report, out)
    _write_run_manifest(out, "eval", {
        "synth": str(synth_dir),
        "reference": str(args.reference) if args.reference else None,
        "data": str(args.data) if args.data else None,
        "task": args.task, "split": args.split,
        "compare_to": str(args.compare_to) if args.compare_to else None,
    })
    print((out / "metrics.txt").read_text(), end="")
    return 0


def cmd_selftest(args) -> int:
    if args.inject_fault:
        inject_fault(args.inject_fault)
    suites = [args.suite] if args.suite else list(SUITES)
    try:
        results = run_suites(suites)
    finally:
        inject_fault("none")
    width = max(len(name) for name, _, _ in results)
    failures = 0
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name:<{width}}  {detail}")
        failures += not ok
    print(f"{len(results) - failures}/{len(results)} checks passed")
    return 1 if failures else 0


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mambasynth",
        description="Selective state-space image-to-image synthesis engine")
    parser.add_argument("--version", action="version", version=f"mambasynth {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-phantoms", help="generate a synthetic paired dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=8)
    p.add_argument("--val", type=int, default=4)
    p.add_argument("--test", type=int, default=0)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_phantoms)

    p = sub.add_parser("train", help="train a synthesis model")
    p.add_argument("--data", required=True)
    p.add_argument("--task", required=True, help="e.g. 'T1,T2->PD'")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file with 'generator' and 'train' sections")
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda-pix", dest="lambda_pix", type=float)
    p.add_argument("--lambda-adv", dest="lambda_adv", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--loss-orientation", dest="loss_orientation",
                   choices=["literal", "conventional"])
    p.add_argument("--max-iterations", dest="max_iterations", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--stages", type=int)
    p.add_argument("--mixer-stages", dest="mixer_stages",
                   help="comma-separated stage indices; empty string disables")
    p.add_argument("--patch", type=int)
    p.add_argument("--state-dim", dest="state_dim", type=int)
    p.add_argument("--base-width", dest="base_width", type=int)
    p.add_argument("--disc-width", dest="disc_width", type=int)
    p.add_argument("--target-psnr", dest="target_psnr", type=float)
    p.add_argument("--target-ssim", dest="target_ssim", type=float)
    p.add_argument("--flip-augment", dest="flip_augment", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", help="synthesize target images from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--task", help="must match the checkpoint's task if given")
    p.add_argument("--out", required=True)
    p.add_argument("--preview-rows", dest="preview_rows", type=int, default=8)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="PSNR/SSIM report for synthesized images")
    p.add_argument("--synth", required=True, help="directory of synthesized .raw files")
    p.add_argument("--data", help="dataset root (pairs by subject/index)")
    p.add_argument("--task")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--reference", help="reference directory (pairs by filename)")
    p.add_argument("--data-range", dest="data_range", type=float, default=1.0)
    p.add_argument("--compare-to", dest="compare_to",
                   help="second synthesis directory for a Wilcoxon comparison")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("selftest", help="run built-in verification suites")
    p.add_argument("--suite", choices=list(SUITES))
    p.add_argument("--inject-fault", dest="inject_fault", choices=["scan"],
                   help="test hook: perturb the fast scan and expect a failure")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, DataError, ConfigError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
