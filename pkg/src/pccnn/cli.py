"""Batch command-line surface: phantom generation, training, evaluation,
and the gradient-check suite.

Every command resolves its flags into a manifest (written before any heavy
work) so a run can be reproduced exactly: manifests carry the tool version,
the fully resolved configuration, the seed, and SHA-256 digests of all input
files. Exit codes: 0 success, 1 usage error, 2 validation or contract
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import data as dat
from . import geometry as geo
from . import metrics as met
from . import trainer as tr
from .gradcheck import standard_suite
from .model import PCCNNConfig, build


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _input_digests(paths) -> dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        files = sorted(f for f in p.rglob("*") if f.is_file()) if p.is_dir() else [p]
        for f in files:
            out[str(f)] = _sha256(f)
    return out


def write_manifest(out_dir: Path, command: str, config: dict, seed: int, inputs) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "tool_version": __version__,
        "config": config,
        "seed": seed,
        "inputs": _input_digests(inputs),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _add_threads(parser) -> None:
    parser.add_argument("--threads", type=int, default=1, help="worker threads for evaluation (default 1)")


def build_parser() -> Parser:
    parser = Parser(prog="pccnn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic multi-tensor dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--shells", default="1000,2000,3000", help="comma-separated b-values")
    p.add_argument("--dirs", type=int, default=90, help="directions per shell")
    p.add_argument("--size", type=int, default=40, help="cubic volume extent in voxels")
    p.add_argument("--noise", type=float, default=0.02, help="Rician noise scale as a fraction of S0")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train a network on a phantom dataset")
    p.add_argument("--data", nargs="+", required=True, help="dataset directories")
    p.add_argument("--val-data", nargs="*", default=[], help="validation dataset directories")
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=["standard", "bv", "sp", "bv_sp"], default="standard")
    p.add_argument("--ablation", choices=list(tr.ABLATIONS), default="none")
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=1e-2)
    p.add_argument("--q-out", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--overfit", action="store_true", help="repeat one sampled example every step")
    p.add_argument("--n-pointwise", type=int, default=2)
    p.add_argument("--n-blocks", type=int, default=2)
    p.add_argument("--c1", type=int, default=16)
    p.add_argument("--c3", type=int, default=16)
    p.add_argument("--hyper-width", type=int, default=32)
    p.add_argument("--fourier-bands", type=int, default=4)
    p.add_argument("--kq", type=int, default=20)
    p.add_argument("--weight-mode", choices=["full", "per_channel", "scalar"], default="per_channel")
    p.add_argument("--val-every", type=int, default=50)
    _add_threads(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint or baseline")
    p.add_argument("--data", nargs="+", required=True, help="dataset directories (one per subject)")
    p.add_argument("--checkpoint")
    p.add_argument("--baseline", choices=list(tr.BASELINES))
    p.add_argument("--protocol", choices=["single", "multi"], default="single")
    p.add_argument("--qin", type=int, default=6)
    p.add_argument("--input-bval", type=float, default=1000.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_threads(p)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


def cmd_phantom(args) -> int:
    out = Path(args.out)
    bvals = [float(b) for b in args.shells.split(",") if b]
    if not bvals or args.dirs < 1 or args.size < 1:
        raise UsageError("need at least one shell, one direction, and a positive size")
    config = {
        "shells": bvals, "dirs": args.dirs, "size": args.size,
        "noise": args.noise, "seed": args.seed,
    }
    write_manifest(out, "phantom", config, args.seed, [])
    shells = [geo.make_shell(b, args.dirs, seed=args.seed + i) for i, b in enumerate(bvals)]
    spec = dat.default_phantom_spec(shape=(args.size,) * 3, noise_sigma=args.noise, seed=args.seed)
    vols = dat.generate_phantom(spec, shells)
    normed, record = dat.normalize_99(vols)
    dat.save_dataset(normed, out)
    print(f"wrote {out} ({vols.intensities.shape[3]} volumes, norm scale {record.scale:.6g})")
    return 0


def _model_config(args) -> PCCNNConfig:
    cfg = PCCNNConfig(
        n_pointwise=args.n_pointwise,
        n_blocks=args.n_blocks,
        c1=args.c1,
        c3=args.c3,
        hyper_width=args.hyper_width,
        fourier_bands=args.fourier_bands,
        k_q=args.kq,
        variant=args.variant,
        weight_mode=args.weight_mode,
    )
    return tr.apply_ablation(cfg, args.ablation)


def cmd_train(args) -> int:
    out = Path(args.out)
    model_cfg = _model_config(args)
    train_cfg = tr.TrainConfig(
        lr=args.lr,
        weight_decay=args.weight_decay,
        batch_size=args.batch,
        iterations=args.iters,
        seed=args.seed,
        ablation=args.ablation,
        q_out=args.q_out,
        val_every=args.val_every,
        overfit=args.overfit,
    )
    config = {
        "model": dataclasses.asdict(model_cfg),
        "train": dataclasses.asdict(train_cfg),
        "data": list(args.data),
        "val_data": list(args.val_data),
    }
    write_manifest(out, "train", config, args.seed, list(args.data) + list(args.val_data))
    subjects = [dat.load_dataset(d) for d in args.data]
    val = [dat.load_dataset(d) for d in args.val_data] or None
    model = build(model_cfg, seed=args.seed)
    result = tr.train(model, subjects, train_cfg, val_vols=val)
    if val is not None:
        result.restore_best()
    state = tr.AdamWState.init(model.parameters())
    tr.save_checkpoint(out / "checkpoint", model, state, iteration=args.iters)
    tr.write_loss_log(result.history, out / "loss.csv")
    if result.history:
        print(f"trained {args.iters} steps: loss {result.initial_loss:.6g} -> {result.final_loss:.6g}")
    else:
        print("trained 0 steps: checkpoint equals initialization")
    return 0


def cmd_eval(args) -> int:
    if (args.checkpoint is None) == (args.baseline is None):
        raise UsageError("exactly one of --checkpoint or --baseline is required")
    out = Path(args.out)
    protocol = "single_shell" if args.protocol == "single" else "multi_shell"
    config = {
        "checkpoint": args.checkpoint,
        "baseline": args.baseline,
        "protocol": protocol,
        "qin": args.qin,
        "input_bval": args.input_bval,
        "data": list(args.data),
        "threads": args.threads,
    }
    inputs = list(args.data) + ([args.checkpoint] if args.checkpoint else [])
    write_manifest(out, "eval", config, args.seed, inputs)
    subjects = [dat.load_dataset(d) for d in args.data]
    if args.checkpoint:
        predictor, _, _ = tr.load_checkpoint(args.checkpoint)
    else:
        predictor = args.baseline
    report = tr.evaluate_subjects(
        predictor, subjects, args.qin, protocol, seed=args.seed,
        input_bval=args.input_bval, threads=args.threads,
    )
    met.write_report(report, out / "report.json", out / "report.csv")
    for name in sorted(report):
        s = report[name]
        print(f"{name}: {s.mean:.6g} +/- {s.std:.6g}")
    return 0


def cmd_gradcheck(args) -> int:
    checks = standard_suite(seed=args.seed, step=args.step, tol=args.tol)
    worst_name, worst_err, all_passed = "", 0.0, True
    for name, report in checks:
        w = report.worst
        status = "PASS" if report.passed else "FAIL"
        print(f"[{status}] {name}: max rel err {w.max_rel_err:.3e} ({w.name})")
        if w.max_rel_err > worst_err:
            worst_name, worst_err = f"{name}/{w.name}", w.max_rel_err
        all_passed &= report.passed
    if not all_passed:
        print(f"worst offender: {worst_name} at {worst_err:.3e} (tolerance {args.tol:g})")
        return 2
    print(f"all gradient checks passed (worst {worst_name} at {worst_err:.3e})")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        handler = {
            "phantom": cmd_phantom,
            "train": cmd_train,
            "eval": cmd_eval,
            "gradcheck": cmd_gradcheck,
        }[args.command]
        return handler(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # argparse --help / --version
        return 0 if exc.code in (0, None) else 1
    except (ValueError, FileNotFoundError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
