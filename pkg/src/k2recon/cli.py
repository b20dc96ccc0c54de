"""Command-line surface: gen-data, train, reconstruct, evaluate.

Configuration comes from one JSON file (sections "data", "train",
"reconstruct", "evaluate") with command-line flags taking precedence; every
command echoes its fully resolved configuration to
<out>/config.resolved.json before doing any work.

Exit codes: 0 success, 2 configuration/usage, 3 I/O, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

from .baselines import cg_sense, tv_reconstruct, zero_filled
from .data import (
    DataConfig,
    generate_dataset,
    read_array_container,
    read_dataset,
    write_array_container,
    write_dataset,
)
from .errors import (
    ConfigurationError,
    ContractViolation,
    CorruptDatasetError,
    NumericalBreakdownError,
    UnsupportedVersionError,
)
from .linops import EncodingOperator
from .metrics import MetricReport, psnr, ssim
from .sampling import CalibrationSchedule, make_mask
from .training import (
    TrainConfig,
    config_from_dict,
    load_checkpoint,
    reconstruct_sample,
    train,
)

THREADS_ENV = "K2RECON_THREADS"
BASELINE_METHODS = ("zero-filled", "cg-sense", "tv")


def _load_config_section(path: str | None, section: str) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"config file not found: {p}")
    try:
        blob = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"config file {p} is not valid JSON: {e}")
    if not isinstance(blob, dict):
        raise ConfigurationError(f"config file {p} must hold a JSON object")
    sec = blob.get(section, {})
    if not isinstance(sec, dict):
        raise ConfigurationError(f"config section {section!r} must be an object")
    return sec


def _merge_config(defaults: dict, file_section: dict, flags: dict) -> dict:
    merged = dict(defaults)
    unknown = set(file_section) - set(defaults)
    if unknown:
        raise ConfigurationError(
            f"unknown config keys {sorted(unknown)}; known: {sorted(defaults)}"
        )
    merged.update(file_section)
    merged.update({k: v for k, v in flags.items() if v is not None})
    return merged


def _echo_resolved(out_dir: Path, command: str, resolved: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "resolved": resolved}
    (out_dir / "config.resolved.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True)
    )


def _thread_count(flag_value: int | None) -> int:
    if flag_value is not None:
        n = flag_value
    else:
        n = int(os.environ.get(THREADS_ENV, "1"))
    if n < 1:
        raise ConfigurationError(f"thread count must be >= 1, got {n}")
    return n


def _map_samples(fn, samples, threads: int):
    if threads <= 1 or len(samples) <= 1:
        return [fn(s) for s in samples]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, samples))


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    flags = {
        "h": args.height, "w": args.width, "ncoil": args.ncoil,
        "n_train": args.train_count, "n_val": args.val_count,
        "n_test": args.test_count, "phantom": args.phantom,
        "noise_sigma": args.noise_sigma, "accel": args.accel,
        "acs_lines": args.acs_lines, "mask_kind": args.mask_kind,
        "seed": args.seed,
    }
    resolved = _merge_config(asdict(DataConfig()),
                             _load_config_section(args.config, "data"), flags)
    cfg = DataConfig(**resolved)
    cfg.validate()
    out = Path(args.out)
    _echo_resolved(out, "gen-data", resolved)
    samples = generate_dataset(cfg)
    write_dataset(samples, {"data_config": resolved}, out)
    print(f"wrote {len(samples)} samples "
          f"({cfg.n_train} train / {cfg.n_val} val / {cfg.n_test} test) to {out}")
    return 0


# ---------------------------------------------------------------------------
# train


_TRAIN_DEFAULTS = {
    "lr": 5e-4, "batch_size": 2, "epochs": 100, "loss_kind": "mixed",
    "rho": 0.4, "seed": 0, "supervision": "self", "unroll_k": 5,
    "cg_tol": 1e-6, "cg_max_iter": 15, "n_lambda": 1, "lambda_init": 0.05,
    "leaky_slope": 0.01, "grad_clip": 1.0,
    "k2c_steps": 0, "k2c_prob": 0.5, "k2c_resample": True, "k2c_seed": 0,
    "accel": None,
}


def _train_config_from_resolved(resolved: dict) -> TrainConfig:
    schedule = CalibrationSchedule(
        keep_prob=resolved["k2c_prob"],
        enabled_steps=resolved["k2c_steps"],
        resample_each_batch=resolved["k2c_resample"],
        seed=resolved["k2c_seed"],
    )
    cfg = TrainConfig(
        lr=resolved["lr"], batch_size=resolved["batch_size"],
        epochs=resolved["epochs"], loss_kind=resolved["loss_kind"],
        rho=resolved["rho"], schedule=schedule, seed=resolved["seed"],
        supervision=resolved["supervision"], unroll_k=resolved["unroll_k"],
        cg_tol=resolved["cg_tol"], cg_max_iter=resolved["cg_max_iter"],
        n_lambda=resolved["n_lambda"], lambda_init=resolved["lambda_init"],
        leaky_slope=resolved["leaky_slope"], grad_clip=resolved["grad_clip"],
    )
    cfg.validate()
    return cfg


def _override_acceleration(samples, accel: float):
    """Regenerate each sample's acquisition mask at a new acceleration."""
    for s in samples:
        h, w = s.omega.grid.shape
        s.omega = make_mask(h, w, accel, acs_lines=None, kind="random-1d",
                            seed=s.omega.seed)


def cmd_train(args) -> int:
    flags = {
        "lr": args.lr, "batch_size": args.batch, "epochs": args.epochs,
        "loss_kind": args.loss, "rho": args.rho, "seed": args.seed,
        "supervision": args.supervision, "unroll_k": args.unroll_k,
        "k2c_steps": args.k2c_steps, "k2c_prob": args.k2c_prob,
        "accel": args.accel, "n_lambda": args.n_lambda,
    }
    resolved = _merge_config(_TRAIN_DEFAULTS,
                             _load_config_section(args.config, "train"), flags)
    cfg = _train_config_from_resolved(resolved)
    out = Path(args.out)
    _echo_resolved(out, "train", resolved)

    _, samples = read_dataset(args.dataset)
    if resolved["accel"] is not None:
        _override_acceleration(samples, float(resolved["accel"]))

    resume_from = None
    if args.resume:
        resume_from = out / "checkpoint_last"
        if not (resume_from / "manifest.json").is_file():
            raise ConfigurationError(f"cannot resume: no checkpoint under {resume_from}")

    def log_line(rec):
        val = "" if rec["val_psnr"] is None else f"  val_psnr={rec['val_psnr']:.2f}"
        print(f"epoch {rec['epoch']:4d}  loss={rec['train_loss']:.5f}{val}"
              f"  ({rec['seconds']:.1f}s)", flush=True)

    result = train(samples, cfg, out_dir=out, resume_from=resume_from,
                   log_fn=log_line)
    from .reporting import save_training_curves

    if result.log:
        save_training_curves(out / "training_curves.png", result.log)
    print(f"best epoch {result.best_epoch} (score {result.best_score:.3f}); "
          f"checkpoints in {out}")
    return 0


# ---------------------------------------------------------------------------
# reconstruct


def _baseline_reconstruct(method: str, sample, tv_weight: float, cg_reg: float):
    op = EncodingOperator(sample.coils, sample.omega.grid)
    y = sample.y_omega()
    if method == "zero-filled":
        return zero_filled(op, y)
    if method == "cg-sense":
        x, _ = cg_sense(op, y, l2_reg=cg_reg)
        return x
    x, _ = tv_reconstruct(op, y, tv_weight=tv_weight, iters=60)
    return x


def cmd_reconstruct(args) -> int:
    if (args.checkpoint is None) == (args.baseline is None):
        raise ConfigurationError(
            "reconstruct needs exactly one of --checkpoint or --baseline"
        )
    threads = _thread_count(args.threads)
    out = Path(args.out)
    _, samples = read_dataset(args.dataset)
    roles = set(args.roles.split(","))
    picked = [s for s in samples if s.role in roles]
    if not picked:
        raise ConfigurationError(f"no samples with roles {sorted(roles)} in dataset")

    if args.checkpoint is not None:
        ckpt_dir = Path(args.checkpoint)
        if not (ckpt_dir / "manifest.json").is_file():
            raise ConfigurationError(f"checkpoint not found: {ckpt_dir}")
        params, _, meta = load_checkpoint(ckpt_dir)
        cfg = config_from_dict(meta["config"])
        method = args.method_id or (
            f"{cfg.supervision}-K{cfg.unroll_k}-m{cfg.schedule.enabled_steps}"
        )
        k2c_steps = cfg.schedule.enabled_steps

        def recon_one(s):
            x, _ = reconstruct_sample(params, s, cfg)
            return x
    else:
        if args.baseline not in BASELINE_METHODS:
            raise ConfigurationError(
                f"unknown baseline {args.baseline!r}, expected {BASELINE_METHODS}"
            )
        method = args.method_id or args.baseline
        k2c_steps = None

        def recon_one(s):
            return _baseline_reconstruct(args.baseline, s, args.tv_weight,
                                         args.cg_reg)

    resolved = {
        "dataset": str(args.dataset), "checkpoint": args.checkpoint,
        "baseline": args.baseline, "roles": sorted(roles), "method": method,
        "render": args.render, "threads": threads,
        "tv_weight": args.tv_weight, "cg_reg": args.cg_reg,
    }
    _echo_resolved(out, "reconstruct", resolved)

    recons = _map_samples(recon_one, picked, threads)
    arrays = {f"{s.id}.recon": r for s, r in zip(picked, recons)}
    meta_out = {
        "method": method,
        "k2c_steps": k2c_steps,
        "acceleration": picked[0].omega.acceleration,
        "samples": [{"id": s.id, "role": s.role} for s in picked],
        "source_dataset": str(args.dataset),
    }
    write_array_container(out, "recon", meta_out, arrays)

    if args.render:
        from .reporting import save_magnitude_png, save_residual_png

        for s, r in zip(picked, recons):
            save_magnitude_png(out / f"{s.id}.recon.png", r, s.ground_truth,
                               title=f"{method} {s.id}")
            if s.ground_truth is not None:
                save_residual_png(out / f"{s.id}.residual.png", r,
                                  s.ground_truth, title=f"|{s.id} - truth|")
    print(f"reconstructed {len(picked)} samples with {method} into {out}")
    return 0


# ---------------------------------------------------------------------------
# evaluate


def _read_recon_dir(path: Path):
    meta, arrays = read_array_container(path, expect_kind="recon")
    recons = {}
    for sm in meta["samples"]:
        key = f"{sm['id']}.recon"
        if key in arrays:
            recons[sm["id"]] = arrays[key]
    if not recons:
        raise ConfigurationError(f"recon dir {path} holds no reconstructions")
    return meta, recons


def _format_table(reports: list[MetricReport]) -> str:
    accels = sorted({r.acceleration for r in reports})
    headers = ["method"]
    for a in accels:
        headers += [f"{a:g}x PSNR", f"{a:g}x SSIM"]
    rows = []
    for r in reports:
        row = [r.method]
        for a in accels:
            if r.acceleration == a:
                p = "inf" if math.isinf(r.psnr_db) else f"{r.psnr_db:.3f}"
                row += [p, f"{r.ssim:.4f}"]
            else:
                row += ["-", "-"]
        rows.append(row)
    widths = [max(len(h), *(len(row[i]) for row in rows)) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(headers))]
    for row in rows:
        lines.append("  ".join(c.ljust(widths[i]) for i, c in enumerate(row)))
    return "\n".join(lines)


def cmd_evaluate(args) -> int:
    out = Path(args.out)
    threads = _thread_count(args.threads)
    resolved = {"dataset": str(args.dataset), "recon_dirs": list(args.recon_dirs),
                "threads": threads}
    _echo_resolved(out, "evaluate", resolved)

    _, samples = read_dataset(args.dataset)
    by_id = {s.id: s for s in samples}

    reports: list[MetricReport] = []
    for rdir in args.recon_dirs:
        meta, recons = _read_recon_dir(Path(rdir))
        per_sample = []
        for sid, recon in sorted(recons.items()):
            s = by_id.get(sid)
            if s is None:
                raise ConfigurationError(
                    f"recon dir {rdir} references sample {sid!r} missing from dataset"
                )
            if s.ground_truth is None:
                raise ConfigurationError(
                    f"sample {sid!r} has no ground truth; cannot evaluate"
                )
            per_sample.append({
                "id": sid,
                "psnr_db": psnr(recon, s.ground_truth),
                "ssim": ssim(recon, s.ground_truth),
            })
        report = MetricReport.from_samples(
            meta["method"], float(meta["acceleration"]), per_sample,
            seed_provenance={"recon_dir": str(rdir),
                             "k2c_steps": meta.get("k2c_steps")},
        )
        reports.append(report)

    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(
        json.dumps([r.to_dict() for r in reports], indent=2)
    )
    with open(out / "metrics.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["method", "acceleration", "k2c_steps", "psnr_db",
                         "ssim", "n_samples"])
        for r in reports:
            writer.writerow([
                r.method, r.acceleration, r.seed_provenance.get("k2c_steps"),
                "" if math.isinf(r.psnr_db) else f"{r.psnr_db:.6f}",
                f"{r.ssim:.6f}", len(r.per_sample),
            ])
    table = _format_table(reports)
    (out / "table.txt").write_text(table + "\n")
    print(table)

    swept = [r for r in reports if r.seed_provenance.get("k2c_steps") is not None]
    ms = sorted({r.seed_provenance["k2c_steps"] for r in swept})
    if len(ms) >= 2:
        from .reporting import save_psnr_vs_m_plot

        swept.sort(key=lambda r: r.seed_provenance["k2c_steps"])
        with open(out / "psnr_vs_m.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["k2c_steps", "psnr_db", "ssim", "method"])
            for r in swept:
                writer.writerow([r.seed_provenance["k2c_steps"],
                                 f"{r.psnr_db:.6f}", f"{r.ssim:.6f}", r.method])
        save_psnr_vs_m_plot(
            out / "psnr_vs_m.png",
            [r.seed_provenance["k2c_steps"] for r in swept],
            [r.psnr_db for r in swept],
            swept[0].acceleration,
            [r.ssim for r in swept],
        )
        print(f"sweep artifacts written: {out / 'psnr_vs_m.png'}")
    return 0


# ---------------------------------------------------------------------------
# parser and dispatch


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="k2recon",
        description="Self-supervised unrolled MRI reconstruction with "
                    "k-space calibration.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic phantom dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.add_argument("--height", type=int, dest="height")
    g.add_argument("--width", type=int, dest="width")
    g.add_argument("--ncoil", type=int)
    g.add_argument("--train-count", type=int)
    g.add_argument("--val-count", type=int)
    g.add_argument("--test-count", type=int)
    g.add_argument("--phantom", choices=("shepp-logan", "random-ellipses"))
    g.add_argument("--noise-sigma", type=float)
    g.add_argument("--accel", type=float)
    g.add_argument("--acs-lines", type=int)
    g.add_argument("--mask-kind", choices=("random-1d", "uniform-1d"))
    g.add_argument("--seed", type=int)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train the unrolled network")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--unroll-k", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--k2c-steps", type=int)
    t.add_argument("--k2c-prob", type=float)
    t.add_argument("--rho", type=float)
    t.add_argument("--accel", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--loss", choices=("l2", "l1", "mixed"))
    t.add_argument("--supervision", choices=("self", "full"))
    t.add_argument("--n-lambda", type=int)
    t.add_argument("--resume", action="store_true")
    t.add_argument("--threads", type=int)
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("reconstruct", help="reconstruct with a checkpoint or baseline")
    r.add_argument("--dataset", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--checkpoint")
    r.add_argument("--baseline", choices=BASELINE_METHODS)
    r.add_argument("--roles", default="test")
    r.add_argument("--method-id")
    r.add_argument("--tv-weight", type=float, default=0.002)
    r.add_argument("--cg-reg", type=float, default=0.01)
    r.add_argument("--threads", type=int)
    render = r.add_mutually_exclusive_group()
    render.add_argument("--render", dest="render", action="store_true", default=True)
    render.add_argument("--no-render", dest="render", action="store_false")
    r.set_defaults(fn=cmd_reconstruct)

    e = sub.add_parser("evaluate", help="score reconstruction dirs against truth")
    e.add_argument("recon_dirs", nargs="+")
    e.add_argument("--dataset", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--threads", type=int)
    e.set_defaults(fn=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except (ConfigurationError, ContractViolation) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (CorruptDatasetError, UnsupportedVersionError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 3
    except NumericalBreakdownError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
