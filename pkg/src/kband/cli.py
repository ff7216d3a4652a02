"""``kband`` command-line interface.

Exit codes: 0 success, 2 invalid arguments, 3 verification failure,
4 I/O error, 5 numerical divergence. ``KBAND_OUTPUT_ROOT`` sets the default
output root; every command writes a ``config.json`` echo of its parameters.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data, grid, training, verify
from .errors import (ConvergenceError, CorruptRecord, DivergenceError, InvalidArgument, InvalidRecord,
                     KBandError, UnsupportedVersion)

EXIT_OK, EXIT_ARGS, EXIT_VERIFY, EXIT_IO, EXIT_DIVERGED = 0, 2, 3, 4, 5

STRATEGY_FLAGS = {
    "kband": "kband_weighted",
    "kband-unweighted": "kband_unweighted",
    "kvertical": "kvertical",
    "ksquare": "ksquare",
    "supervised": "supervised_full",
}


def _out_dir(args, command: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get("KBAND_OUTPUT_ROOT", "kband-out")) / command


def _echo_config(out: Path, args):
    out.mkdir(parents=True, exist_ok=True)
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True, default=str))


def _shape(text):
    try:
        return grid.GridShape.parse(text)
    except (InvalidArgument, ValueError) as exc:
        raise argparse.ArgumentTypeError(str(exc))


def _pair(text):
    try:
        a, b = text.lower().split("x")
        return int(a), int(b)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected AxB, got {text!r}")


def _print(obj, as_json: bool, lines=()):
    if as_json:
        print(json.dumps(obj, indent=2, sort_keys=True))
    else:
        for line in lines:
            print(line)


def _check_budget(args):
    if getattr(args, "matched_budget", False) and args.r_vd != args.r_band:
        raise InvalidArgument(f"--matched-budget needs r_vd == r_band, got r_band {args.r_band}, r_vd {args.r_vd}")


def _arch(args) -> tuple[ad.Architecture, ad.UnrollConfig]:
    ucfg = ad.UnrollConfig(args.unrolls, args.eta, not args.unshared)
    arch = ad.Architecture(args.layers, args.channels, 3, args.activation, not args.no_residual,
                           1 if ucfg.weight_sharing else ucfg.n_unrolls)
    return arch, ucfg


# ---------------------------------------------------------------------------
# commands

def cmd_phantom(args) -> int:
    spec = data.PhantomSpec(args.shape, args.n_ellipses, tuple(args.intensity_range), args.phase_smoothness,
                            args.noise_std, args.seed)
    img = data.make_phantom(spec)
    out = _out_dir(args, "phantom")
    _echo_config(out, args)
    path = out / "phantom.c64"
    data.fft2c(img).astype("<c8").tofile(path) if args.domain == "kspace" else img.astype("<c8").tofile(path)
    path.with_suffix(".json").write_text(json.dumps(
        {"rows": spec.shape.rows, "cols": spec.shape.cols, "domain": args.domain, "dtype": "complex64"}))
    summary = {"path": str(path), "shape": list(spec.shape.tuple), "max_modulus": float(np.abs(img).max())}
    _print(summary, args.json, [f"wrote {path} ({spec.shape}, max |x| = {summary['max_modulus']:.4g})"])
    return EXIT_OK


def cmd_dataset(args) -> int:
    _check_budget(args)
    images = [data.ingest_slice(p) for p in args.ingest] if args.ingest else None
    out = _out_dir(args, "dataset")
    _echo_config(out, args)
    policy = training.POLICY[STRATEGY_FLAGS[args.strategy]] if args.strategy else args.policy
    phantom = {"n_ellipses": args.n_ellipses, "noise_std": args.noise_std}
    manifest, records = data.build_dataset(
        args.shape, args.n_train, args.n_test, args.r_band, args.r_vd, args.seed, policy, args.vd_kind,
        args.calib, args.density_power, phantom, images, out_dir=out)
    summary = {"path": str(out), "records": len(manifest.records), "policy": policy,
               "splits": manifest.splits, "crc32c": [e["crc32c"] for e in manifest.records]}
    _print(summary, args.json, [
        f"wrote {len(manifest.records)} records to {out}",
        f"  shape {manifest.shape}, policy {policy}, r_band {args.r_band}, r_vd {args.r_vd}, seed {args.seed}",
        f"  train {manifest.splits['train']}, test {manifest.splits['test']}",
    ])
    return EXIT_OK


def cmd_wmask(args) -> int:
    angles = grid.uniform_angles(args.n_angles)
    wm = grid.kband_weight_mask(args.shape, args.r_band, angles)
    out = _out_dir(args, "wmask")
    _echo_config(out, args)
    np.save(out / "weights.npy", wm.weights)
    cr, cc = args.shape.center
    w = wm.weights
    covered = w[w > 0]
    with open(out / "profile.csv", "w", newline="") as fh:
        cw = csv.writer(fh)
        cw.writerow(["ky", "column_weight", "row_weight"])
        for i in range(args.shape.rows):
            cw.writerow([i - cr, repr(float(w[i, cc])), repr(float(w[cr, i])) if i < args.shape.cols else ""])
    peak = np.unravel_index(np.argmax(w), w.shape)
    summary = {
        "min": float(covered.min()) if covered.size else 0.0,
        "max": float(w.max()),
        "center": float(w[cr, cc]),
        "argmax": [int(peak[0]) - cr, int(peak[1]) - cc],
        "zero_coverage": int(wm.n_zero_coverage),
        "n_angles": len(angles),
    }
    _print(summary, args.json, [
        f"weight mask {args.shape}, r_band {args.r_band}, {len(angles)} angles",
        f"  min {summary['min']:.6g}  max {summary['max']:.6g}  center {summary['center']:.6g}",
        f"  max at offset {tuple(summary['argmax'])}, zero-coverage pixels {summary['zero_coverage']}",
    ])
    if wm.n_zero_coverage:
        print(f"warning: {wm.n_zero_coverage} pixels are never covered by a band; their weight is 0",
              file=sys.stderr)
    return EXIT_OK


def _container(path) -> data.Container:
    if not Path(path).exists():
        raise FileNotFoundError(f"no dataset at {path}")
    return data.Container(path)


def _strategy(args, container) -> training.Strategy:
    name = STRATEGY_FLAGS[args.strategy]
    if args.no_weight_mask and name == "kband_weighted":
        name = "kband_unweighted"
    m = container.manifest
    r_vd = m.r_vd if args.r_vd is None else args.r_vd
    r_band = m.r_band if args.r_band is None else args.r_band
    if args.matched_budget and r_vd != r_band:
        raise InvalidArgument(f"--matched-budget needs r_vd == r_band, got r_band {r_band}, r_vd {r_vd}")
    return training.Strategy(name, r_band, r_vd)


def cmd_train(args) -> int:
    container = _container(args.data)
    strategy = _strategy(args, container)
    arch, ucfg = _arch(args)
    tcfg = training.TrainConfig(args.lr, args.momentum, args.epochs, args.seed, args.precision, args.loss,
                                args.validate_every, args.init_scale, args.schedule)
    out = _out_dir(args, "train")
    _echo_config(out, args)
    init = ad.init_params(arch, args.seed, output_scale=args.init_scale)
    ad.save_checkpoint(init, out / "initial.json")
    log = None if args.json else (lambda row: print(
        f"epoch {row['epoch']:3d}  loss {row['train_loss']:.6g}"
        + (f"  val nmse {row['val']['nmse']:.5f} ssim {row['val']['ssim']:.4f}" if "val" in row else "")))
    params, rec = training.train(container, strategy, arch, ucfg, tcfg, init, out_dir=out, log=log)
    table = training.evaluate(params, container, ucfg, method=strategy.name, r_band=strategy.r_band)
    table.write_csv(out / "eval.csv")
    (out / "eval.json").write_text(json.dumps(table.as_json(), indent=2))
    summary = {"strategy": strategy.name, "checkpoint": rec.checkpoint, "params_checksum": rec.params_checksum,
               "initial_checksum": init.checksum(), "train_loss": rec.train_loss, "test_mean": table.mean,
               "test_std": table.std, "wall_clock": rec.wall_clock}
    _print(summary, args.json, [
        f"{strategy.name}: {len(rec.epochs)} epochs in {rec.wall_clock:.1f}s, checkpoint {rec.checkpoint}",
        "  test " + "  ".join(f"{k} {table.mean[k]:.5g} ± {table.std[k]:.3g}" for k in ("nmse", "psnr", "ssim")),
    ])
    return EXIT_OK


def cmd_eval(args) -> int:
    container = _container(args.data)
    arch, ucfg = _arch(args)
    if args.checkpoint:
        params = ad.load_checkpoint(args.checkpoint)
        arch = params.arch
    elif args.identity:
        params = ad.zero_params(arch)
    else:
        raise InvalidArgument("eval needs --checkpoint or --identity")
    out = _out_dir(args, "eval")
    _echo_config(out, args)
    table = training.evaluate(params, container, ucfg, r_vd=args.r_vd, method=args.method,
                              r_band=container.manifest.r_band)
    table.write_csv(out / "eval.csv")
    (out / "eval.json").write_text(json.dumps(table.as_json(), indent=2))
    lines = [f"{r['slice_id']}  nmse {r['nmse']:.5g}  psnr {r['psnr']:.4g}  ssim {r['ssim']:.4f}" for r in table.rows]
    lines.append("mean  " + "  ".join(f"{k} {table.mean[k]:.5g} ± {table.std[k]:.3g}" for k in ("nmse", "psnr", "ssim")))
    _print(table.as_json(), args.json, lines)
    return EXIT_OK


def run_verification(shape, n_angles, r_band, seeds, weighted=True) -> dict:
    """All verification checks; returns ``{"hard": {...}, "info": {...}, "passed": bool}``."""
    arch, ucfg = verify.DEFAULT_ARCH, verify.DEFAULT_UNROLL
    hard, info = {}, {}
    unb = [verify.check_unbiasedness_independent(shape, n_angles, r_band, arch, ucfg, s, weighted) for s in seeds]
    hard["unbiasedness_independent"] = {
        "passed": all(r.relative_error <= 1e-8 for r in unb), "threshold": 1e-8,
        "relative_errors": [r.relative_error for r in unb]}
    var = [verify.check_variance_bound(shape, n_angles, r_band, arch, ucfg, "l1", s) for s in seeds]
    hard["variance_bound_l1"] = {
        "passed": all(r.satisfied for r in var),
        "reports": [r.to_json() for r in var]}
    par = [verify.check_parseval((32, 32), s) for s in seeds]
    hard["parseval"] = {
        "passed": all(r.abs_difference <= 1e-10 * r.rhs for r in par), "threshold": 1e-10,
        "relative_differences": [r.abs_difference / r.rhs for r in par]}
    cpl = [verify.check_unbiasedness_kband(shape, n_angles, r_band, 2.0, arch, ucfg, s) for s in seeds]
    info["unbiasedness_kband_coupled"] = {"relative_errors": [r.relative_error for r in cpl]}
    cmp_ = [verify.compare_gradient_variance(shape, n_angles, r_band, arch, s, ucfg) for s in seeds]
    info["variance_ratio_l2_over_l1"] = {"ratios": [r.ratio for r in cmp_]}
    return {"hard": hard, "info": info, "passed": all(v["passed"] for v in hard.values()),
            "config": {"shape": list(as_tuple(shape)), "n_angles": n_angles, "r_band": r_band,
                       "seeds": list(seeds), "weighted": weighted}}


def as_tuple(shape):
    return grid.as_shape(shape).tuple


def cmd_verify(args) -> int:
    seeds = list(range(args.seed, args.seed + args.n_seeds))
    out = _out_dir(args, "verify")
    _echo_config(out, args)
    report = run_verification(args.shape, args.n_angles, args.r_band, seeds, not args.no_weight_mask)
    (out / "verify.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    lines = []
    for name, r in report["hard"].items():
        vals = r.get("relative_errors") or r.get("relative_differences") or \
            [f"{x['empirical_second_moment']:.4g} <= {x['bound_value']:.4g}" for x in r["reports"]]
        lines.append(f"{'PASS' if r['passed'] else 'FAIL'}  {name}: {vals}")
    for name, r in report["info"].items():
        lines.append(f"info  {name}: {next(iter(r.values()))}")
    _print(report, args.json, lines)
    if not report["passed"]:
        if not args.json:
            failing = {k: v for k, v in report["hard"].items() if not v["passed"]}
            print(json.dumps(failing, indent=2), file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def _common(p, out=True):
    p.add_argument("--config", help="JSON file of parameter defaults; flags override it")
    p.add_argument("--json", action="store_true", help="print machine-readable output")
    if out:
        p.add_argument("--out", help="output directory (default $KBAND_OUTPUT_ROOT/<command>)")


def _model_flags(p):
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--activation", choices=sorted(ad.ACTIVATIONS), default="relu")
    p.add_argument("--no-residual", action="store_true")
    p.add_argument("--unrolls", type=int, default=2)
    p.add_argument("--eta", type=float, default=1.0)
    p.add_argument("--unshared", action="store_true", help="separate CNN weights per unroll")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kband", description="k-band reconstruction toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="write one synthetic phantom as raw complex64 + sidecar")
    _common(p)
    p.add_argument("--shape", type=_shape, default=grid.GridShape(64, 64))
    p.add_argument("--n-ellipses", type=int, default=6)
    p.add_argument("--intensity-range", type=float, nargs=2, default=[0.2, 1.0])
    p.add_argument("--phase-smoothness", type=float, default=1.0)
    p.add_argument("--noise-std", type=float, default=0.0)
    p.add_argument("--domain", choices=["kspace", "image"], default="kspace")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("dataset", help="simulate band acquisition and write a KBND-1 container")
    _common(p)
    p.add_argument("--shape", type=_shape, default=grid.GridShape(64, 64))
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-test", type=int, default=40)
    p.add_argument("--r-band", type=float, default=4.0)
    p.add_argument("--r-vd", type=float, default=4.0)
    p.add_argument("--matched-budget", action="store_true", help="require r_vd == r_band")
    p.add_argument("--policy", choices=data.POLICIES, default="uniform")
    p.add_argument("--strategy", choices=sorted(STRATEGY_FLAGS), help="pick the acquisition policy of a strategy")
    p.add_argument("--vd-kind", choices=["2d", "1d", "bernoulli"], default="2d")
    p.add_argument("--calib", type=_pair, help="calibration block, e.g. 8x8")
    p.add_argument("--density-power", type=float, default=2.0)
    p.add_argument("--n-ellipses", type=int, default=6)
    p.add_argument("--noise-std", type=float, default=0.0)
    p.add_argument("--ingest", nargs="*", help="raw complex64 slices with .json sidecars instead of phantoms")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("wmask", help="write the coverage weight mask and its profiles")
    _common(p)
    p.add_argument("--shape", type=_shape, default=grid.GridShape(64, 64))
    p.add_argument("--r-band", type=float, default=3.0)
    p.add_argument("--n-angles", type=int, default=180)
    p.set_defaults(func=cmd_wmask)

    p = sub.add_parser("train", help="train one strategy on a container, then evaluate on its test split")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--strategy", choices=sorted(STRATEGY_FLAGS), default="kband")
    p.add_argument("--no-weight-mask", action="store_true", help="drop the weight mask from the k-band loss")
    p.add_argument("--matched-budget", action="store_true", help="require r_vd == r_band")
    p.add_argument("--r-band", type=float, help="defaults to the container's value")
    p.add_argument("--r-vd", type=float, help="defaults to the container's value")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--loss", choices=["l1", "l2"], default="l1")
    p.add_argument("--precision", choices=["single", "double"], default="double")
    p.add_argument("--validate-every", type=int, default=1)
    p.add_argument("--schedule", choices=["constant", "cosine"], default="constant")
    p.add_argument("--init-scale", type=float, default=0.0,
                   help="scale of the last layer at initialisation; 0 starts at the zero-filled solution")
    p.add_argument("--seed", type=int, default=0)
    _model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a container's test split")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--identity", action="store_true", help="use zero CNN parameters (residual identity)")
    p.add_argument("--r-vd", type=float, help="redraw VD masks at this acceleration")
    p.add_argument("--method", default="model")
    _model_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run the numerical verification checks")
    _common(p)
    p.add_argument("--shape", type=_shape, default=grid.GridShape(16, 16))
    p.add_argument("--n-angles", type=int, default=12)
    p.add_argument("--r-band", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-seeds", type=int, default=1)
    p.add_argument("--no-weight-mask", action="store_true", help="fault injection: drop the weight mask")
    p.set_defaults(func=cmd_verify)
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read --config {args.config}: {exc}")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in sub._actions}
        unknown = sorted(set(cfg) - set(known))
        if unknown:
            parser.error(f"unknown keys in --config: {', '.join(unknown)}")
        for k, v in cfg.items():
            act = known[k]
            if isinstance(v, str) and act.type is not None:
                v = act.type(v)
            sub.set_defaults(**{k: v})
        args = parser.parse_args(argv)
    if isinstance(getattr(args, "shape", None), (list, tuple)):
        args.shape = grid.as_shape(args.shape)
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, CorruptRecord, InvalidRecord, UnsupportedVersion) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (InvalidArgument, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except KBandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGS


if __name__ == "__main__":
    sys.exit(main())
