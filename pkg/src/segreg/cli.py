"""Command-line front end: ``segreg <subcommand> ...``.

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical
failure (non-finite energy, divergence, failed gradient check).

Heavy modules are imported after ``--threads`` has been applied so the
thread count reaches the BLAS / OpenMP runtimes.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3

THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

logger = logging.getLogger("segreg")


class ConfigError(ValueError):
    pass


def _check(name, v, lo=None, hi=None, lo_open=False, hi_open=False, odd=False):
    if lo is not None and (v < lo or (lo_open and v == lo)):
        raise ConfigError(f"{name}={v} is out of range")
    if hi is not None and (v > hi or (hi_open and v == hi)):
        raise ConfigError(f"{name}={v} is out of range")
    if odd and v % 2 == 0:
        raise ConfigError(f"{name}={v} must be odd")


@dataclass
class RunConfig:
    """Flat run configuration; every key maps onto one solver setting."""

    # segmentation
    n_classes: int = 3
    sigma: float = 20.0
    epsilon: float = 1.0
    lam: float = 0.5
    omega_side: int = 7
    zeta: float = 1.0
    seg_max_iter: int = 100
    seg_tol: float = 1e-5
    update_bias: bool = True
    # registration
    eta: float = 0.05
    xi: float = 0.7
    levels: int = 8
    factor: float = 0.7
    spacing: int = 4
    reg_max_iter: int = 100
    memory: int = 10
    gtol: float = 1e-5
    ftol: float = 1e-8
    # outer loop
    max_iter: int = 10
    tol: float = 1e-5
    divergence: float = 0.10
    grouping: str = ""
    seed: int = 0
    # paths
    fixed: str = ""
    moving: str = ""
    atlas: str = ""
    out: str = ""

    def validate(self) -> "RunConfig":
        _check("n_classes", self.n_classes, 2, 64)
        _check("sigma", self.sigma, 0, lo_open=True)
        _check("epsilon", self.epsilon, 0, lo_open=True)
        _check("lam", self.lam, 0)
        _check("omega_side", self.omega_side, 1, odd=True)
        _check("zeta", self.zeta, 0)
        _check("seg_max_iter", self.seg_max_iter, 1)
        _check("seg_tol", self.seg_tol, 0)
        _check("eta", self.eta, 0)
        _check("xi", self.xi, 0)
        _check("levels", self.levels, 1, 32)
        _check("factor", self.factor, 0, 1, lo_open=True, hi_open=True)
        _check("spacing", self.spacing, 1)
        _check("reg_max_iter", self.reg_max_iter, 1)
        _check("memory", self.memory, 1)
        _check("gtol", self.gtol, 0)
        _check("ftol", self.ftol, 0)
        _check("max_iter", self.max_iter, 1)
        _check("tol", self.tol, 0)
        _check("divergence", self.divergence, 0)
        _check("seed", self.seed, 0)
        return self

    @classmethod
    def parse(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        """Parse ``key = value`` lines; ``#`` starts a comment."""
        out = base or cls()
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"config line {n}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            out = out.with_value(key, value)
        return out.validate()

    def with_value(self, key: str, value: str) -> "RunConfig":
        types = {f.name: f.type for f in fields(self)}
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        kind = types[key]
        try:
            if kind == "bool":
                low = value.lower()
                if low not in ("true", "false", "1", "0"):
                    raise ValueError(value)
                v = low in ("true", "1")
            elif kind == "int":
                v = int(value)
            elif kind == "float":
                v = float(value)
                if v != v or v in (float("inf"), float("-inf")):
                    raise ValueError(value)
            else:
                v = value
        except ValueError:
            raise ConfigError(f"config key {key!r}: cannot parse {value!r} as {kind}") from None
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d[key] = v
        return RunConfig(**d)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    def joint_config(self, n_atlas: int):
        from segreg.core import ClassGrouping
        from segreg.joint import JointConfig
        from segreg.registration import RegConfig
        from segreg.segmentation import SegConfig

        seg = SegConfig(
            n_classes=self.n_classes, sigma=self.sigma, epsilon=self.epsilon, lam=self.lam,
            omega_side=self.omega_side, zeta=self.zeta, max_iter=self.seg_max_iter,
            tol=self.seg_tol, update_bias=self.update_bias,
        )
        reg = RegConfig(
            zeta=self.zeta, eta=self.eta, xi=self.xi, levels=self.levels, factor=self.factor,
            spacing=self.spacing, max_iter=self.reg_max_iter, memory=self.memory,
            gtol=self.gtol, ftol=self.ftol,
        )
        grouping = None
        if self.grouping:
            try:
                grouping = ClassGrouping.parse(self.grouping, self.n_classes, n_atlas)
            except ValueError as exc:
                raise ConfigError(f"grouping {self.grouping!r}: {exc}") from None
        return JointConfig(
            seg=seg, reg=reg, max_iter=self.max_iter, tol=self.tol, grouping=grouping,
            seed=self.seed, divergence=self.divergence,
        )


def load_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        p = Path(args.config)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {p}")
        cfg = RunConfig.parse(p.read_text(), cfg)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg = cfg.with_value(k.strip(), v.strip())
    for key in ("fixed", "moving", "atlas", "out", "seed"):
        v = getattr(args, key, None)
        if v is not None:
            cfg = cfg.with_value(key, str(v))
    return cfg.validate()


def _need(cfg: RunConfig, *keys):
    for k in keys:
        if not getattr(cfg, k):
            raise ConfigError(f"missing required input {k!r} (flag --{k} or config key)")


def _read_atlas(path, image_shape):
    import numpy as np

    from segreg.core import FieldError, check_soft, one_hot
    from segreg.io import read_field

    a = read_field(path)
    if a.shape == tuple(image_shape):
        if not np.all(a == np.round(a)) or a.min() < 0:
            raise FieldError(f"{path}: single-channel atlas must be a label map")
        return one_hot(a.astype(np.int64))
    if a.shape[1:] != tuple(image_shape):
        raise FieldError(f"{path}: atlas grid {a.shape[1:]} does not match image {tuple(image_shape)}")
    return check_soft(a, f"atlas {path}", atol=1e-5)


def _fmt(v) -> str:
    return repr(float(v))


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


SEG_TRACE_HEADER = ["iter", "E_seg_data", "E_entropy", "E_reg_term", "E_CE", "E_fidelity", "E_total"]
OUTER_TRACE_HEADER = ["iter", "E_seg", "E_CE", "E_reg_fidelity", "E_reg_tikhonov", "E_total"]
REG_TRACE_HEADER = ["outer", "level", "shape", "n_iter", "status",
                    "E_CE", "E_reg_fidelity", "E_reg_tikhonov"]


def _seg_rows(trace, prefix=()):
    return [
        [*prefix, i + 1, _fmt(e.data), _fmt(e.entropy), _fmt(e.reg), _fmt(e.ce),
         _fmt(e.fidelity), _fmt(e.total)]
        for i, e in enumerate(trace)
    ]


def _reg_rows(trace, outer):
    return [
        [outer, r["level"], "x".join(map(str, r["shape"])), r["n_iter"], r["status"],
         _fmt(r["e_ce"]), _fmt(r["e_reg_fidelity"]), _fmt(r["e_reg_tikhonov"])]
        for r in trace
    ]


def _out_dir(cfg) -> Path:
    _need(cfg, "out")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands -------------------------------------------------------------


def cmd_phantom(args) -> int:
    from segreg.io import write_field
    from segreg.phantom import PhantomSpec, make_pair

    kw = {}
    if args.shape:
        kw["shape"] = tuple(int(s) for s in args.shape.split(","))
    spec = getattr(PhantomSpec, args.preset)(seed=args.seed, **kw)
    pair = make_pair(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_field(out / "moving", pair.moving)
    write_field(out / "fixed", pair.fixed)
    write_field(out / "gt_moving", pair.gt_moving)
    write_field(out / "gt_fixed", pair.gt_fixed)
    write_field(out / "true_T", pair.true_T, channels=True)
    write_field(out / "true_beta", pair.true_beta)
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"wrote phantom ({args.preset}, seed {args.seed}) to {out}")
    return EXIT_OK


def cmd_segment(args) -> int:
    from segreg.core import argmax_label
    from segreg.figures import contour_overlay, write_ppm
    from segreg.io import read_field, write_field
    from segreg.segmentation import kmeans_init, lgmm_solve

    cfg = load_config(args)
    _need(cfg, "fixed")
    fixed = read_field(cfg.fixed)
    jc = cfg.joint_config(cfg.n_classes)
    seg = jc.seg
    u0 = kmeans_init(fixed, seg.n_classes, cfg.seed)
    res = lgmm_solve(fixed, u0, None, replace(seg, zeta=0.0))
    out = _out_dir(cfg)
    labels = argmax_label(res.u)
    write_field(out / "labels", labels)
    write_field(out / "u", res.u, channels=True)
    write_field(out / "beta", res.beta)
    _write_csv(out / "seg_trace.csv", SEG_TRACE_HEADER, _seg_rows(res.trace))
    (out / "config.txt").write_text(cfg.to_text())
    write_ppm(out / "contours.ppm", contour_overlay(fixed, labels))
    print(f"segmentation: {res.n_iter} iterations, converged={res.converged}")
    return EXIT_OK


def cmd_register(args) -> int:
    from segreg.core import argmax_label
    from segreg.figures import deformed_mesh, displacement_raster, write_pgm, write_ppm
    from segreg.io import read_field, write_field
    from segreg.registration import register, warp, warp_channels

    cfg = load_config(args)
    _need(cfg, "fixed", "moving")
    fixed = read_field(cfg.fixed)
    moving = read_field(cfg.moving)
    reg = cfg.joint_config(cfg.n_classes).reg
    rr = register(fixed, moving, None, None, replace(reg, xi=0.0))
    out = _out_dir(cfg)
    write_field(out / "T", rr.T, channels=True)
    write_field(out / "warped_moving", warp(moving, rr.T))
    if cfg.atlas:
        atlas = _read_atlas(cfg.atlas, fixed.shape)
        write_field(out / "labels_atlas", argmax_label(warp_channels(atlas, rr.T)))
    _write_csv(out / "reg_trace.csv", REG_TRACE_HEADER, _reg_rows(rr.trace, 1))
    (out / "config.txt").write_text(cfg.to_text())
    write_pgm(out / "mesh.pgm", deformed_mesh(rr.T))
    write_ppm(out / "displacement.ppm", displacement_raster(rr.T))
    print(f"registration: final energy {rr.energy.total:.6g}")
    return EXIT_OK


def _write_joint(out: Path, cfg: RunConfig, res, fixed):
    from segreg.figures import (contour_overlay, deformed_mesh, displacement_raster,
                                write_pgm, write_ppm)
    from segreg.io import write_field

    write_field(out / "labels", res.labels)
    write_field(out / "labels_u", res.labels_u)
    write_field(out / "labels_atlas", res.labels_atlas)
    write_field(out / "u", res.u, channels=True)
    write_field(out / "T", res.T, channels=True)
    write_field(out / "beta", res.beta)
    write_field(out / "warped_moving", res.warped_moving)
    _write_csv(
        out / "trace.csv", OUTER_TRACE_HEADER,
        [[i, _fmt(e.e_seg), _fmt(e.e_ce), _fmt(e.e_reg_fidelity), _fmt(e.e_reg_tikhonov),
          _fmt(e.total)] for i, e in enumerate(res.trace)],
    )
    seg_rows = []
    for t, tr in enumerate(res.seg_traces, 1):
        seg_rows += _seg_rows(tr, (t,))
    _write_csv(out / "seg_trace.csv", ["outer", *SEG_TRACE_HEADER], seg_rows)
    reg_rows = []
    for t, tr in enumerate(res.reg_traces, 1):
        reg_rows += _reg_rows(tr, t)
    _write_csv(out / "reg_trace.csv", REG_TRACE_HEADER, reg_rows)
    (out / "config.txt").write_text(cfg.to_text())
    summary = {"mode": res.mode, "status": res.status, "n_iter": res.n_iter}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    write_ppm(out / "contours.ppm", contour_overlay(fixed, res.labels))
    write_pgm(out / "mesh.pgm", deformed_mesh(res.T))
    write_ppm(out / "displacement.ppm", displacement_raster(res.T))


def cmd_joint(args) -> int:
    from segreg.io import read_field
    from segreg.joint import DivergenceError, joint_solve

    cfg = load_config(args)
    _need(cfg, "fixed", "moving", "atlas")
    fixed = read_field(cfg.fixed)
    moving = read_field(cfg.moving)
    atlas = _read_atlas(cfg.atlas, fixed.shape)
    jc = cfg.joint_config(atlas.shape[0])
    out = _out_dir(cfg)
    try:
        res = joint_solve(fixed, moving, atlas, jc, mode=args.mode)
    except DivergenceError as exc:
        _write_joint(out, cfg, exc.result, fixed)
        raise
    _write_joint(out, cfg, res, fixed)
    print(f"{args.mode}: {res.n_iter} outer iterations, status {res.status}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    from segreg.io import read_labels
    from segreg.metrics import best_label_permutation, class_report

    pred = read_labels(args.pred)
    truth = read_labels(args.truth)
    if pred.shape != truth.shape:
        raise ConfigError(f"label maps differ in shape: {pred.shape} vs {truth.shape}")
    if args.permute:
        pred = best_label_permutation(pred, truth, int(pred.max()) + 1, int(truth.max()) + 1)
    classes = [int(s) for s in args.classes.split(",")] if args.classes else None
    text = class_report(pred, truth, classes).to_csv()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from segreg.gradcheck import run_suite

    r = run_suite(seed=args.seed, n_instances=args.instances, shape=(args.size, args.size))
    print(f"max relative error: {r.max_rel_error:.3e} "
          f"({r.n_checked} components, {r.n_skipped} skipped at cell boundaries)")
    return EXIT_OK if r.max_rel_error < args.threshold else EXIT_NUMERIC


# -- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="segreg", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads for BLAS/OpenMP; affects speed only")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def run_opts(sp, inputs):
        sp.add_argument("--config", help="flat key = value run configuration")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
        for name in inputs:
            sp.add_argument(f"--{name}")
        sp.add_argument("--out")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("segment", help="bias-corrected mixture segmentation of one image")
    run_opts(sp, ["fixed"])
    sp.set_defaults(func=cmd_segment)

    sp = sub.add_parser("register", help="intensity registration of moving onto fixed")
    run_opts(sp, ["fixed", "moving", "atlas"])
    sp.set_defaults(func=cmd_register)

    sp = sub.add_parser("joint", help="joint segmentation and registration")
    run_opts(sp, ["fixed", "moving", "atlas"])
    sp.add_argument("--mode", choices=("joint", "seg_only", "reg_only"), default="joint")
    sp.set_defaults(func=cmd_joint)

    sp = sub.add_parser("phantom", help="write a synthetic image pair with ground truth")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--preset", choices=("shapes", "biased", "thigh"), default="shapes")
    sp.add_argument("--shape", help="comma-separated grid shape, e.g. 96,96")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_phantom)

    sp = sub.add_parser("metrics", help="per-class mJ / DSC / ASD of two label maps")
    sp.add_argument("pred")
    sp.add_argument("truth")
    sp.add_argument("--classes", help="comma-separated class ids (default: all in truth)")
    sp.add_argument("--permute", action="store_true",
                    help="relabel pred by best Dice matching first")
    sp.add_argument("--out", help="also write the CSV here")
    sp.set_defaults(func=cmd_metrics)

    sp = sub.add_parser("gradcheck", help="finite-difference check of the registration gradient")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--instances", type=int, default=10)
    sp.add_argument("--size", type=int, default=24)
    sp.add_argument("--threshold", type=float, default=1e-4)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return EXIT_INPUT
        for var in THREAD_VARS:
            os.environ[var] = str(args.threads)

    from segreg.core import FieldError
    from segreg.joint import DivergenceError, GroupingError
    from segreg.segmentation import DegenerateInputError

    try:
        return args.func(args)
    except FileNotFoundError as exc:
        msg, code = f"missing file: {exc.filename or exc}", EXIT_INPUT
    except FieldError as exc:
        msg, code = f"invalid field data: {exc}", EXIT_INPUT
    except (ConfigError, GroupingError) as exc:
        msg, code = f"invalid configuration: {exc}", EXIT_INPUT
    except DegenerateInputError as exc:
        msg, code = f"degenerate input: {exc}", EXIT_INPUT
    except DivergenceError as exc:
        msg, code = f"diverged: {exc}", EXIT_NUMERIC
    except FloatingPointError as exc:
        msg, code = f"numerical failure: {exc}", EXIT_NUMERIC
    print(f"error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
