"""Command-line interface.

Subcommands: phantom, fit, maps, distort, register, evaluate, reproduce.
Exit codes: 0 success, 2 I/O, 3 validation, 4 degenerate data,
5 optimization failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .errors import (
    DataError, DegenerateError, DomainError, FormatError, OptimizationError, SingularJacobianError,
    ValidationError,
)
from .evaluation import CSV_COLUMNS, evaluate, paired_ttest
from .optimizer import OptimizerConfig
from .registration import RegistrationConfig, RegistrationMode, register
from .synthetic import PhantomSpec, make_moving, make_phantom, random_tps
from .tensor_model import fit_tensor, scalar_indices
from .volume_io import DwiSet, ScalarVolume, TensorVolume, VectorField, export_slice_ppm, load_volume, save_volume

log = logging.getLogger("dtireg")

EXIT_OK, EXIT_IO, EXIT_VALIDATION, EXIT_DEGENERATE, EXIT_OPTIMIZATION = 0, 2, 3, 4, 5
MODES = [m.value for m in RegistrationMode]


@dataclass(frozen=True)
class RunConfig:
    mode: str = "jt-dt"
    levels: int = 3
    control_spacing: float = 8.0
    bins: int = 32
    alpha: float = 2.0
    epsilon: float = 0.01
    relative_epsilon: bool = True
    max_iterations: int = 200
    seed: int = 0
    seeds: int = 10
    size: int = 48
    magnitude: float = 4.0
    points: int = 27

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got '{self.mode}'")
        checks = [
            (1 <= self.levels <= 5, "levels must be in 1..5"),
            (self.control_spacing >= 2, "control_spacing must be >= 2 voxels"),
            (8 <= self.bins <= 1024, "bins must be in 8..1024"),
            (self.alpha > 0 and self.alpha != 1, "alpha must be positive and != 1"),
            (self.epsilon > 0, "epsilon must be positive"),
            (self.max_iterations >= 1, "max_iterations must be >= 1"),
            (self.seed >= 0, "seed must be nonnegative"),
            (self.seeds >= 3, "seeds must be >= 3 for the paired t-test"),
            (self.size >= 16, "size must be >= 16"),
            (self.magnitude >= 0, "magnitude must be nonnegative"),
            (self.points >= 4, "points must be >= 4"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValidationError(msg)

    def registration(self) -> RegistrationConfig:
        opt = OptimizerConfig(epsilon=self.epsilon, relative=self.relative_epsilon,
                              max_iterations=self.max_iterations)
        return RegistrationConfig(RegistrationMode(self.mode), self.levels, self.control_spacing,
                                  self.bins, self.alpha, opt)


def load_config(path, overrides: dict) -> RunConfig:
    """JSON config (unknown keys rejected) with non-None flag overrides on top."""
    known = {f.name: f for f in fields(RunConfig)}
    data = {}
    if path:
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ValidationError("config must be a JSON object")
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ValidationError(f"unknown config key(s): {', '.join(unknown)}")
    data.update({k: v for k, v in overrides.items() if v is not None and k in known})
    typed = {}
    for k, v in data.items():
        kind = known[k].type
        if kind == "bool" and not isinstance(v, bool):
            raise ValidationError(f"config key '{k}' must be true or false")
        if kind in ("int", "float") and (isinstance(v, bool) or not isinstance(v, (int, float))):
            raise ValidationError(f"config key '{k}' must be numeric")
        if kind == "int" and int(v) != v:
            raise ValidationError(f"config key '{k}' must be an integer")
        typed[k] = {"int": int, "float": float}.get(kind, lambda x: x)(v)
    return RunConfig(**typed)


# ---------------------------------------------------------------------------
# helpers

def _as_tensors(obj) -> TensorVolume:
    if isinstance(obj, TensorVolume):
        return obj
    if isinstance(obj, DwiSet):
        return fit_tensor(obj)
    raise ValidationError(f"expected a tensor or DWI volume, got {type(obj).__name__}")


def _load(path, *kinds):
    obj = load_volume(path)
    if kinds and not isinstance(obj, kinds):
        names = "/".join(k.__name__ for k in kinds)
        raise ValidationError(f"{path}: expected {names}, found {type(obj).__name__}")
    return obj


def _write_json(path, data):
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _summary(rows):
    """Per-mode medians and paired t-tests of JT-DT against the other modes."""
    by_mode = {}
    for case, mode, rep in rows:
        by_mode.setdefault(mode, []).append(rep)
    out = {"medians": {}, "ttests": {}}
    for mode, reps in by_mode.items():
        out["medians"][mode] = {
            "C": float(np.median([r["C"] for r in reps])),
            "a_deg": float(np.median([r["a_deg"] for r in reps])),
            "ovl": float(np.median([r["ovl"] for r in reps])),
            "n": len(reps),
        }
    base = "jt-dt"
    for other in by_mode:
        if other == base or base not in by_mode or len(by_mode[other]) != len(by_mode[base]):
            continue
        for metric in ("C", "a_deg", "ovl"):
            if len(by_mode[base]) < 3:
                continue
            t = paired_ttest([r[metric] for r in by_mode[base]], [r[metric] for r in by_mode[other]])
            out["ttests"][f"{base} vs {other}: {metric}"] = {
                "t": t.t, "p": t.p, "df": t.df, "degenerate": t.degenerate}
    return out


def _rows_from_csv(path):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(CSV_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise ValidationError(f"{path}: missing column(s) {sorted(missing)}")
        for r in reader:
            rows.append((r["case"], r["mode"], {k: float(r[k]) for k in ("C", "a_deg", "ovl")}))
    return rows


def _write_cases(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for case, mode, rep in rows:
            w.writerow([case, mode, repr(rep["C"]), repr(rep["a_deg"]), repr(rep["ovl"]), rep["N_B"]])


def _result_json(result):
    return {
        "mode": result.mode.value,
        "status": result.status,
        "parameters": [float(v) for v in result.transform.parameters()],
        "levels": [{"index": lv.level.index, "factor": lv.level.factor,
                    "control_spacing_mm": lv.level.control_spacing, "iterations": lv.iterations,
                    "evaluations": lv.evaluations, "status": lv.status, "excluded_voxels": lv.excluded,
                    "initial_cost": lv.costs[0], "final_cost": lv.costs[-1]} for lv in result.levels],
    }


def _register_to(out_dir, fixed, moving, cfg: RunConfig):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = register(fixed, moving, cfg.registration())
    if hasattr(result.transform, "to_container"):
        save_volume(result.transform, out / "transform.dtv")
    save_volume(result.field, out / "field.dtv")
    save_volume(result.registered_tensors, out / "registered.dtv")
    result.write_trace(out / "costs.csv")
    _write_json(out / "result.json", _result_json(result))
    return result


# ---------------------------------------------------------------------------
# commands

def cmd_phantom(args, cfg):
    size = args.size or cfg.size
    dwi, tensors = make_phantom(PhantomSpec(dims=(size,) * 3), seed=cfg.seed)
    save_volume(dwi, args.dwi)
    if args.tensors:
        save_volume(tensors, args.tensors)
    print(f"phantom {size}^3 written to {args.dwi}")


def cmd_fit(args, cfg):
    dwi = _load(args.dwi, DwiSet)
    tensors = fit_tensor(dwi)
    save_volume(tensors, args.out)
    print(f"invalid voxels: {int((~tensors.valid).sum())}")


def cmd_maps(args, cfg):
    tensors = _as_tensors(_load(args.tensors))
    idx = scalar_indices(tensors)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_volume(idx.fa, out / "fa.dtv")
    save_volume(idx.md, out / "md.dtv")
    axis = args.axis
    index = tensors.geometry.dims[axis] // 2 if args.index is None else args.index
    export_slice_ppm(idx.fa, axis, index, out / "fa.ppm")
    export_slice_ppm(idx.md, axis, index, out / "md.ppm")
    r, g, b = idx.rgb_for_display()
    fa = idx.fa.samples
    weighted = [ScalarVolume(tensors.geometry, c.samples * fa) for c in (r, g, b)]
    export_slice_ppm(weighted, axis, index, out / "rgb.ppm")
    print(f"maps written to {out}")


def cmd_distort(args, cfg):
    dwi = _load(args.dwi, DwiSet)
    warp = random_tps(dwi.geometry, cfg.points, cfg.magnitude, cfg.seed)
    moving, truth = make_moving(dwi, warp.field(dwi.geometry))
    save_volume(moving, args.moving)
    save_volume(truth, args.truth)
    print(f"seed {cfg.seed}: max ground-truth displacement {truth.norms().max():.3f} mm")


def cmd_register(args, cfg):
    fixed = _as_tensors(_load(args.fixed))
    moving = _as_tensors(_load(args.moving))
    result = _register_to(args.out_dir, fixed, moving, cfg)
    print(f"{cfg.mode}: status {result.status}, final cost {result.costs[-1]:.6g}")
    if result.status == "line_search_failed":
        log.warning("optimizer stopped on a line-search failure; result is the best point found")


def cmd_evaluate(args, cfg):
    if args.batch:
        rows = _rows_from_csv(args.batch)
        summary = _summary(rows)
        text = json.dumps(summary, indent=2, sort_keys=True)
        if args.out:
            Path(args.out).write_text(text + "\n")
        print(text)
        return
    if not (args.fixed and args.registered and args.field and args.truth):
        raise ValidationError("evaluate needs FIXED REGISTERED FIELD TRUTH, or --batch CSV")
    fixed = _as_tensors(_load(args.fixed))
    registered = _load(args.registered, TensorVolume)
    est = _load(args.field, VectorField)
    truth = _load(args.truth, VectorField)
    rep = evaluate(fixed, registered, est, truth)
    if args.out:
        Path(args.out).write_text(rep.to_json() + "\n")
    if args.csv:
        _write_cases(args.csv, [(args.case, args.mode or cfg.mode, rep.to_dict())])
    print(rep.to_json())


def cmd_reproduce(args, cfg):
    """distort -> register (all modes) -> evaluate over a range of seeds."""
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dwi, fixed = make_phantom(PhantomSpec(dims=(cfg.size,) * 3))
    rows = []
    for seed in range(cfg.seed, cfg.seed + cfg.seeds):
        warp = random_tps(fixed.geometry, cfg.points, cfg.magnitude, seed)
        moving_dwi, truth = make_moving(dwi, warp.field(fixed.geometry))
        moving = fit_tensor(moving_dwi)
        for mode in MODES:
            run = replace(cfg, mode=mode)
            if args.keep:
                result = _register_to(out / f"seed{seed}" / mode, fixed, moving, run)
            else:
                result = register(fixed, moving, run.registration())
            rep = evaluate(fixed, result.registered_tensors, result.field, truth)
            rows.append((f"seed{seed}", mode, rep.to_dict()))
            print(f"seed {seed} {mode}: C {rep.C:.4f} a {rep.a:.3f} OVL {rep.ovl:.4f}", flush=True)
    _write_cases(out / "cases.csv", rows)
    summary = _summary(rows)
    _write_json(out / "summary.json", summary)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "median_C", "median_a_deg", "median_ovl", "n"])
        for mode, m in summary["medians"].items():
            w.writerow([mode, repr(m["C"]), repr(m["a_deg"]), repr(m["ovl"]), m["n"]])
    print(json.dumps(summary, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dtireg", description="Nonrigid DTI registration with Jensen-Tsallis similarity")
    p.add_argument("--config", help="JSON run configuration; flags override its values")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--mode", choices=MODES)
        sp.add_argument("--levels", type=int)
        sp.add_argument("--control-spacing", dest="control_spacing", type=float)
        sp.add_argument("--bins", type=int)
        sp.add_argument("--alpha", type=float)
        sp.add_argument("--epsilon", type=float)
        sp.add_argument("--absolute-epsilon", dest="relative_epsilon", action="store_const", const=False,
                        help="stop on the raw cost difference rather than relative to progress")
        sp.add_argument("--max-iterations", dest="max_iterations", type=int)
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("phantom", help="write a synthetic bundle phantom")
    sp.add_argument("dwi")
    sp.add_argument("--tensors")
    sp.add_argument("--size", type=int)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_phantom)

    sp = sub.add_parser("fit", help="fit tensors to a DWI set")
    sp.add_argument("dwi")
    sp.add_argument("out")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("maps", help="FA/MD volumes and PPM slices")
    sp.add_argument("tensors")
    sp.add_argument("--out-dir", default=".")
    sp.add_argument("--axis", type=int, default=2, choices=(0, 1, 2))
    sp.add_argument("--index", type=int)
    sp.set_defaults(func=cmd_maps)

    sp = sub.add_parser("distort", help="apply a random TPS warp to a DWI set")
    sp.add_argument("dwi")
    sp.add_argument("moving")
    sp.add_argument("truth")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--magnitude", type=float, help="maximum control displacement in voxels")
    sp.add_argument("--points", type=int)
    sp.set_defaults(func=cmd_distort)

    sp = sub.add_parser("register", help="register a moving volume onto a fixed one")
    sp.add_argument("fixed")
    sp.add_argument("moving")
    sp.add_argument("--out-dir", default="registration")
    common(sp)
    sp.set_defaults(func=cmd_register)

    sp = sub.add_parser("evaluate", help="score a registration against ground truth")
    sp.add_argument("fixed", nargs="?")
    sp.add_argument("registered", nargs="?")
    sp.add_argument("field", nargs="?")
    sp.add_argument("truth", nargs="?")
    sp.add_argument("--out", help="JSON report path")
    sp.add_argument("--csv", help="CSV row output path")
    sp.add_argument("--case", default="case0")
    sp.add_argument("--mode", choices=MODES)
    sp.add_argument("--batch", help="cases CSV; report per-mode medians and paired t-tests")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("reproduce", help="distort, register with every mode and evaluate over seeds")
    sp.add_argument("--out-dir", default="reproduce")
    sp.add_argument("--seeds", type=int)
    sp.add_argument("--size", type=int)
    sp.add_argument("--magnitude", type=float)
    sp.add_argument("--points", type=int)
    sp.add_argument("--keep", action="store_true", help="also write per-case volumes")
    common(sp)
    sp.set_defaults(func=cmd_reproduce)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, vars(args))
        args.func(args, cfg)
    except (OSError, FormatError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValidationError, DomainError, SingularJacobianError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except DegenerateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except OptimizationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OPTIMIZATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
