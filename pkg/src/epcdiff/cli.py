"""Command line entry point: ``epcdiff <subcommand> [--config F] [--seed N] [--out DIR]``.

Artefacts live under ``--out``::

    data/            manifest.json, pairs/*.epcv
    ae/              checkpoint.epcv, log.csv
    diffusion/       checkpoint.epcv, log.csv, timing.csv
    samples/         <pair id>.epcv, timing.csv
    eval/            metrics.csv, baseline_metrics.csv, equivariance.csv,
                     diff/<pair id>.epcv, profiles/<pair id>.csv
"""
from __future__ import annotations

import argparse
import math
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import container
from .autoencoder import AECheckpoint, train_ae, write_csv
from .config import ConfigError, RunConfig, load_config
from .dataset import build_dataset, load_pairs
from .diffusion import DiffusionCheckpoint, Guidance, sample, sample_guided
from .metrics import compute_metrics, line_profile, write_metrics_csv
from .phantom import NORM_TO_MU_OFFSET, NORM_TO_MU_SCALE
from .tomo import Geometry, equivariance_residual, support_mask
from .tomo import projector
from .train import TrainPair, draw_rotations, stream, train_diffusion, write_log
from .verify import report_csv, run_checks

# rotations used for the test-set equivariance residual: every 45 degrees except 0
EVAL_ANGLES = [k * math.pi / 4.0 for k in range(1, 8)]


class CommandError(RuntimeError):
    pass


def _fresh_dir(path: Path, overwrite: bool) -> Path:
    if path.exists() and any(path.iterdir()):
        if not overwrite:
            raise CommandError(f"{path} already exists; rerun with --overwrite to replace it")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise CommandError(f"missing {what}: {path}")
    return path


def cmd_gen_data(cfg: RunConfig, out: Path, overwrite: bool = False) -> dict:
    try:
        manifest = build_dataset(out / "data", cfg.data, seed=cfg.seed, overwrite=overwrite)
    except FileExistsError as exc:
        raise CommandError(str(exc)) from None
    counts = {}
    for p in manifest["pairs"]:
        key = (p["domain"], p["split"])
        counts[key] = counts.get(key, 0) + 1
    for (d, s), n in sorted(counts.items()):
        print(f"domain {d} {s}: {n} pairs")
    return manifest


def cmd_train_ae(cfg: RunConfig, out: Path, overwrite: bool = False) -> AECheckpoint:
    data = _require(out / "data", "dataset (run gen-data first)")
    pairs = load_pairs(data, split="train")
    if not pairs:
        raise CommandError("dataset has no training pairs")
    vols = [p.x0 for p in pairs] + ([p.xc for p in pairs] if cfg.ae.train_on_cbct else [])
    dst = _fresh_dir(out / "ae", overwrite)
    t0 = time.perf_counter()
    ckpt = train_ae(vols, cfg.ae, seed=cfg.seed, log_path=dst / "log.csv",
                    ckpt_path=dst / "checkpoint.epcv")
    print(f"autoencoder: {cfg.ae.steps} steps in {time.perf_counter() - t0:.1f} s")
    return ckpt


def _train_pairs(data: Path) -> list[TrainPair]:
    return [TrainPair(p.x0, p.xc, p.y0, p.domain, Geometry(**p.meta["geometry"]))
            for p in load_pairs(data, split="train")]


def cmd_train_diffusion(cfg: RunConfig, out: Path, overwrite: bool = False):
    data = _require(out / "data", "dataset (run gen-data first)")
    ae_path = _require(out / "ae" / "checkpoint.epcv", "autoencoder checkpoint (run train-ae)")
    ae = AECheckpoint.load(ae_path)
    pairs = _train_pairs(data)
    dst = _fresh_dir(out / "diffusion", overwrite)
    try:
        res = train_diffusion(pairs, ae, cfg, seed=cfg.seed)
    except ValueError as exc:
        raise CommandError(str(exc)) from None
    res.ckpt.ae_path = str(ae_path.relative_to(out))
    res.ckpt.extra = {"config": cfg.to_dict(), "eq_epochs": res.eq_epochs}
    res.ckpt.save(dst / "checkpoint.epcv")
    write_log(dst / "log.csv", res.rows)
    write_csv(dst / "timing.csv", ["step", "epoch", "seconds"], res.timing)
    print(f"diffusion: {res.ckpt.step} steps, {len(res.eq_epochs)} equivariance epochs, "
          f"{res.timing[-1][2]:.1f} s")
    return res


def cmd_sample(cfg: RunConfig, out: Path, overwrite: bool = False,
               n_steps: int | None = None) -> dict:
    """Sample every test pair; returns per-volume seconds and projector call counts."""
    data = _require(out / "data", "dataset")
    ck_path = _require(out / "diffusion" / "checkpoint.epcv", "diffusion checkpoint")
    ckpt = DiffusionCheckpoint.load(ck_path)
    ae = AECheckpoint.load(_require(out / ckpt.ae_path if ckpt.ae_path else out / "ae" / "checkpoint.epcv",
                                    "autoencoder checkpoint"))
    steps = cfg.sample.n_steps if n_steps is None else n_steps
    dst = _fresh_dir(out / "samples", overwrite)
    timing = []
    calls = 0
    rot_rng = stream(cfg.seed, "rotation")
    for p in load_pairs(data, split="test"):
        projector.reset_call_counter()
        t0 = time.perf_counter()
        if cfg.sample.guided:
            g = Geometry(**p.meta["geometry"])
            gd = Guidance(p.y0, g, draw_rotations(rot_rng, g, cfg.sample.guidance_rotations, False),
                          cfg.sample.guidance_weight, cfg.sample.guidance_sigma2)
            x_hat = sample_guided(ckpt, ae, p.xc, gd, steps, seed=cfg.seed)
        else:
            x_hat = sample(ckpt, ae, p.xc, steps, seed=cfg.seed)
        sec = time.perf_counter() - t0
        n_calls = projector.CALLS["forward"] + projector.CALLS["adjoint"]
        calls += n_calls
        container.save(dst / f"{p.id}.epcv", {"x_hat": x_hat},
                       meta={"id": p.id, "n_steps": steps, "seed": cfg.seed,
                             "guided": cfg.sample.guided})
        timing.append([p.id, sec, n_calls])
        print(f"{p.id}: {sec:.2f} s, projector calls {n_calls}")
    write_csv(dst / "timing.csv", ["id", "seconds", "projector_calls"], timing)
    return {"timing": timing, "projector_calls": calls}


def _eq_residual(x_norm: np.ndarray, y0: np.ndarray, g: Geometry) -> float:
    mu = (x_norm * NORM_TO_MU_SCALE + NORM_TO_MU_OFFSET) * support_mask(*x_norm.shape[-2:])
    return equivariance_residual(mu, y0, g, EVAL_ANGLES, fill=0.0, check=False)


def cmd_eval(cfg: RunConfig, out: Path, overwrite: bool = False, pred_dir: Path | None = None,
             ref_dir: Path | None = None) -> dict:
    """Metrics of predictions against the CT references of the test split."""
    pred = _require(pred_dir or out / "samples", "predictions directory")
    refs = load_pairs(_require(ref_dir or out / "data", "reference dataset"), split="test")
    files = sorted(pred.glob("*.epcv"))
    if len(files) != len(refs):
        raise CommandError(f"{len(files)} predictions but {len(refs)} reference pairs")
    by_id = {f.stem: f for f in files}
    missing = [p.id for p in refs if p.id not in by_id]
    if missing:
        raise CommandError(f"no prediction for pairs {missing}")
    dst = _fresh_dir(out / "eval", overwrite)
    ids, reports, base, eq_rows = [], [], [], []
    for p in refs:
        arrays, _ = container.load(by_id[p.id])
        x_hat = arrays["x_hat"]
        if x_hat.shape != p.x0.shape:
            raise CommandError(f"{p.id}: prediction {x_hat.shape} vs reference {p.x0.shape}")
        ids.append(p.id)
        reports.append(compute_metrics(x_hat, p.x0))
        base.append(compute_metrics(p.xc, p.x0))
        container.save(dst / "diff" / f"{p.id}.epcv", {"abs_diff": np.abs(p.x0 - x_hat)})
        prof = np.column_stack([line_profile(p.x0), line_profile(x_hat)[:, 1],
                                line_profile(p.xc)[:, 1]])
        _write_profiles(dst / "profiles" / f"{p.id}.csv", prof)
        g = Geometry(**p.meta["geometry"])
        eq_rows.append([p.id, _eq_residual(x_hat, p.y0, g), _eq_residual(p.xc, p.y0, g),
                        _eq_residual(p.x0, p.y0, g)])
    write_metrics_csv(dst / "metrics.csv", ids, reports)
    write_metrics_csv(dst / "baseline_metrics.csv", ids, base)
    write_csv(dst / "equivariance.csv", ["id", "sct", "cbct", "ct"], eq_rows)
    for i, r, b in zip(ids, reports, base):
        print(f"{i}: sCT PSNR {r.psnr:.2f} dB SSIM {r.ssim:.4f} | CBCT PSNR {b.psnr:.2f} dB")
    return {"ids": ids, "reports": reports, "baseline": base, "equivariance": eq_rows}


def _write_profiles(path: Path, prof: np.ndarray) -> None:
    write_csv(path, ["column", "hu_ct", "hu_sct", "hu_cbct"],
              [[int(r[0])] + [float(v) for v in r[1:]] for r in prof])


def cmd_verify(level: str, out: Path | None = None) -> int:
    checks = run_checks(level)
    text = report_csv(checks)
    print(text, end="")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / f"verify_{level}.csv").write_text(text)
    return 0 if all(c.passed for c in checks) else 1


def run_pipeline(cfg: RunConfig, out: Path, overwrite: bool = False) -> dict:
    """gen-data, train-ae, train-diff, sample and eval in sequence."""
    t0 = time.perf_counter()
    cmd_gen_data(cfg, out, overwrite)
    cmd_train_ae(cfg, out, overwrite)
    cmd_train_diffusion(cfg, out, overwrite)
    sampled = cmd_sample(cfg, out, overwrite)
    evaluated = cmd_eval(cfg, out, overwrite)
    return {"sample": sampled, "eval": evaluated, "seconds": time.perf_counter() - t0}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="TOML run configuration")
    common.add_argument("--seed", type=int, default=None, help="override the configured seed")
    common.add_argument("--out", type=Path, default=Path("runs/default"), help="run directory")
    common.add_argument("--overwrite", action="store_true", help="replace existing artefacts")
    ap = argparse.ArgumentParser(prog="epcdiff", parents=[common],
                                 description="Latent diffusion CBCT-to-CT synthesis on phantoms")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="simulate the paired dataset")
    sub.add_parser("train-ae", parents=[common], help="pretrain the latent autoencoder")
    sub.add_parser("train-diff", parents=[common], help="train the conditional diffusion model")
    sp = sub.add_parser("sample", parents=[common], help="synthesise CT for the test pairs")
    sp.add_argument("--n-steps", type=int, default=None)
    ev = sub.add_parser("eval", parents=[common], help="score predictions against references")
    ev.add_argument("--pred", type=Path, default=None)
    ev.add_argument("--ref", type=Path, default=None)
    vp = sub.add_parser("verify", parents=[common], help="run the invariant checks")
    vp.add_argument("--level", choices=["quick", "full"], default="quick")
    sub.add_parser("all", parents=[common], help="run the whole pipeline")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "verify":
            return cmd_verify(args.level, args.out)
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        out = args.out
        if args.command == "gen-data":
            cmd_gen_data(cfg, out, args.overwrite)
        elif args.command == "train-ae":
            cmd_train_ae(cfg, out, args.overwrite)
        elif args.command == "train-diff":
            cmd_train_diffusion(cfg, out, args.overwrite)
        elif args.command == "sample":
            cmd_sample(cfg, out, args.overwrite, args.n_steps)
        elif args.command == "eval":
            cmd_eval(cfg, out, args.overwrite, args.pred, args.ref)
        elif args.command == "all":
            run_pipeline(cfg, out, args.overwrite)
    except (ConfigError, CommandError, FileNotFoundError) as exc:
        print(f"epcdiff: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
