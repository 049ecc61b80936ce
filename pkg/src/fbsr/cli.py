"""Command-line pipeline: simulate, stage1, stage2, sr, eval, grid, export.

Configuration is a flat ``key=value`` file (``--config``) overridden by
repeatable ``--set key=value`` flags. Unknown keys are rejected. Every
command writes its resolved config, input hashes and a log into ``--out``.

Exit codes: 0 ok, 2 config error, 3 missing prerequisite, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidArgument, InvalidState
from .filterbank import load_bank, save_bank
from .metrics import DegenerateInput, rows_to_csv, rows_to_table, wilcoxon_signed_rank
from .optim import NumericalFailure, Stage1Config, train_stage1
from .pipeline import METHODS, baseline_volumes, evaluate, fit_dims, run_cell, stage1_report
from .regressor import RegressorConfig, load_model, save_model, train_stage2
from .volume import (AXES, AcquisitionSpec, PatchSampler, extract_lines, extract_patch_pairs,
                     generate_phantom, load_volume, log_spectrum, save_volume, simulate_lr,
                     super_resolve, write_pgm)

log = logging.getLogger("fbsr")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4

DEFAULTS = {
    "input": "",
    "phantom": "blobs",
    "phantom_dims": "64,64,64",
    "fwhm": 2,
    "gap": 0,
    "through_axis": "z",
    "seed": 0,
    "stage1_steps": 5000,
    "stage1_batch": 32,
    "stage1_lr": 0.1,
    "filter_length": 0,
    "stage2_steps": 2000,
    "stage2_batch": 8,
    "stage2_lr": 1e-3,
    "blocks": 4,
    "features": 8,
    "patch_size": 32,
    "pairs": 2000,
    "adversarial": False,
    "adversarial_weight": 1.0,
    "l1_weight": 100.0,
    "dtype": "float32",
    "peak": 0.0,
    "format": "csv",
    "grid_fwhm": "2,4,6",
    "grid_gap": "0,1,2",
    "grid_seeds": "0",
    "volume": "",
    "slice_axis": "z",
    "slice_index": -1,
    "spectrum": False,
}


class ConfigError(Exception):
    pass


class MissingPrerequisite(Exception):
    pass


def _parse_value(key, raw):
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {type(default).__name__}")
    return raw.strip()


def _parse_pairs(lines, source):
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r} ({source}:{n})")
        out[key] = _parse_value(key, raw)
    return out


def resolve_config(args) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file {str(path)!r} not found")
        cfg.update(_parse_pairs(path.read_text().splitlines(), path.name))
    cfg.update(_parse_pairs(args.set or [], "--set"))
    if args.seed is not None:
        cfg["seed"] = args.seed
    if cfg["format"] not in ("csv", "table"):
        raise ConfigError(f"config key 'format' must be csv or table, got {cfg['format']!r}")
    if cfg["dtype"] not in ("float32", "float64"):
        raise ConfigError(f"config key 'dtype' must be float32 or float64, got {cfg['dtype']!r}")
    return cfg


def _ints(cfg, key):
    try:
        return tuple(int(v) for v in str(cfg[key]).split(","))
    except ValueError:
        raise ConfigError(f"config key {key!r}: expected comma-separated integers, got {cfg[key]!r}")


def acquisition(cfg, fwhm=None, gap=None) -> AcquisitionSpec:
    try:
        return AcquisitionSpec(cfg["fwhm"] if fwhm is None else fwhm,
                               cfg["gap"] if gap is None else gap,
                               cfg["through_axis"])
    except InvalidArgument as exc:
        raise ConfigError(f"config keys 'fwhm'/'gap'/'through_axis': {exc}")


def stage1_config(cfg, seed=None) -> Stage1Config:
    return Stage1Config(steps=cfg["stage1_steps"], batch_size=cfg["stage1_batch"],
                        max_lr=cfg["stage1_lr"], seed=cfg["seed"] if seed is None else seed,
                        filter_length=cfg["filter_length"] or None)


def regressor_config(cfg, seed=None) -> RegressorConfig:
    return RegressorConfig(residual_blocks=cfg["blocks"], base_features=cfg["features"],
                           patch_size=cfg["patch_size"], adversarial=cfg["adversarial"],
                           adversarial_weight=cfg["adversarial_weight"], l1_weight=cfg["l1_weight"],
                           steps=cfg["stage2_steps"], batch_size=cfg["stage2_batch"],
                           max_lr=cfg["stage2_lr"], seed=cfg["seed"] if seed is None else seed,
                           dtype=cfg["dtype"])


# ---------------------------------------------------------------- run directory

class Run:
    """Output directory bookkeeping for one command invocation."""

    def __init__(self, out: Path, command: str, cfg: dict):
        self.out, self.command, self.cfg = out, command, cfg
        out.mkdir(parents=True, exist_ok=True)
        self.inputs = []
        lines = [f"{k}={cfg[k]}" for k in sorted(cfg)]
        (out / f"{command}.config.txt").write_text("\n".join(lines) + "\n")
        self._handler = logging.FileHandler(out / f"{command}.log", mode="w")
        self._handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
        log.addHandler(self._handler)

    def path(self, name):
        return self.out / name

    def require(self, name, what):
        p = self.path(name)
        if not p.is_file():
            raise MissingPrerequisite(f"missing {what}: {p}")
        self.inputs.append(p)
        return p

    def close(self):
        lines = [f"{hashlib.sha256(p.read_bytes()).hexdigest()}  {p.name}" for p in self.inputs]
        (self.out / f"{self.command}.inputs.txt").write_text("".join(l + "\n" for l in lines))
        log.removeHandler(self._handler)
        self._handler.close()


# ---------------------------------------------------------------- commands

def cmd_simulate(run: Run, cfg):
    spec = acquisition(cfg)
    if cfg["input"]:
        src = Path(cfg["input"])
        if not src.is_file():
            raise ConfigError(f"config key 'input': file {str(src)!r} not found")
        run.inputs.append(src)
        x = load_volume(src)
    else:
        dims = _ints(cfg, "phantom_dims")
        if len(dims) != 3:
            raise ConfigError("config key 'phantom_dims' needs three integers")
        try:
            x = generate_phantom(dims, cfg["seed"], cfg["phantom"])
        except InvalidArgument as exc:
            raise ConfigError(f"config key 'phantom': {exc}")
    try:
        y = simulate_lr(x, spec)
    except InvalidArgument as exc:
        raise ConfigError(f"config keys 'fwhm'/'gap': {exc}")
    save_volume(x, run.path("hr.fbv"))
    save_volume(y, run.path("lr.fbv"))
    run.path("acquisition.txt").write_text(
        f"fwhm={spec.fwhm}\ngap={spec.gap}\nM={spec.M}\nthrough_axis={'xyz'[spec.through_axis]}\n"
        f"hr_dims={','.join(map(str, x.dims))}\nlr_dims={','.join(map(str, y.dims))}\n")
    log.info("simulated %s: HR %s -> LR %s (M=%d)", spec.label, x.dims, y.dims, spec.M)


def cmd_stage1(run: Run, cfg):
    spec = acquisition(cfg)
    y = load_volume(run.require("lr.fbv", "LR volume (run simulate)"))
    hr_path = run.path("hr.fbv")
    x = load_volume(hr_path) if hr_path.is_file() else None
    try:
        bank, trace = train_stage1(extract_lines(y, spec), spec.slice_profile(), spec.M,
                                   stage1_config(cfg), progress=500)
    except InvalidArgument as exc:
        raise ConfigError(f"stage 1: {exc}")
    save_bank(bank, run.path("bank.fbk"))
    trace.write_csv(run.path("stage1_loss.csv"))
    report = stage1_report(x, y, bank, spec)
    rows = [{"label": spec.label, "measure": k, "psnr": v} for k, v in report.items()]
    run.path("stage1_report.csv").write_text(rows_to_csv(rows, ["label", "measure", "psnr"]))
    log.info("stage 1 done: %s", report)


def cmd_stage2(run: Run, cfg):
    spec = acquisition(cfg)
    y = load_volume(run.require("lr.fbv", "LR volume (run simulate)"))
    bank = load_bank(run.require("bank.fbk", "filter bank (run stage1)"))
    rcfg = regressor_config(cfg)
    try:
        pairs = extract_patch_pairs(y, bank, PatchSampler(rcfg.patch_size, spec.M, cfg["pairs"],
                                                          seed=cfg["seed"]), spec)
    except InvalidArgument as exc:
        raise ConfigError(f"config key 'patch_size': {exc}")
    model, trace = train_stage2(pairs, spec.M, rcfg, progress=500)
    save_model(model, run.path("model.rgr"))
    trace.write_csv(run.path("stage2_loss.csv"))


def cmd_sr(run: Run, cfg):
    spec = acquisition(cfg)
    y = load_volume(run.require("lr.fbv", "LR volume (run simulate)"))
    bank = load_bank(run.require("bank.fbk", "filter bank (run stage1)"))
    model = load_model(run.require("model.rgr", "regressor model (run stage2)"))
    if bank.M != spec.M or model.M != spec.M:
        raise ConfigError(f"config M={spec.M} does not match bank M={bank.M} / model M={model.M}")
    save_volume(super_resolve(y, bank, model, spec), run.path("sr.fbv"))
    for name, v in baseline_volumes(y, bank, spec).items():
        save_volume(v, run.path(f"{name}.fbv"))


def cmd_eval(run: Run, cfg):
    spec = acquisition(cfg)
    x = load_volume(run.require("hr.fbv", "ground-truth volume (run simulate)"))
    vols = {}
    for method, name in (("zero-fill", "zero-fill.fbv"), ("cubic", "cubic.fbv"),
                         ("zero-detail", "zero-detail.fbv"), ("proposed", "sr.fbv")):
        vols[method] = load_volume(run.require(name, f"{method} volume (run sr)"))
    try:
        rows = evaluate(x, vols, spec.through_axis, cfg["peak"] or None)
    except InvalidArgument as exc:
        raise ConfigError(f"eval: {exc}")
    for r in rows:
        r["label"] = spec.label
    cols = ["label", "method", "psnr", "ssim", "peak"]
    run.path("metrics.csv").write_text(rows_to_csv(rows, cols))
    sys.stdout.write(rows_to_csv(rows, cols) if cfg["format"] == "csv" else rows_to_table(rows, cols))


def _grid_cell(args):
    cfg, fwhm, gap, seed = args
    spec = acquisition(cfg, fwhm, gap)
    dims = fit_dims(_ints(cfg, "phantom_dims"), spec.M, spec.through_axis)
    res = run_cell(spec, seed, dims, cfg["phantom"], stage1_config(cfg, seed),
                   regressor_config(cfg, seed), cfg["pairs"])
    return spec.label, seed, res.stage1, res.metrics


def _mean_std(vals):
    a = np.asarray(vals, dtype=np.float64)
    return float(a.mean()), float(a.std())


def cmd_grid(run: Run, cfg, threads=1):
    seeds = _ints(cfg, "grid_seeds")
    jobs = [(cfg, f, g, s) for f in _ints(cfg, "grid_fwhm") for g in _ints(cfg, "grid_gap") for s in seeds]
    for _, f, g, _ in jobs:
        acquisition(cfg, f, g)
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_grid_cell, jobs))
    else:
        results = [_grid_cell(j) for j in jobs]

    cells = {}
    for label, seed, s1, metrics in results:
        cells.setdefault(label, []).append((seed, s1, metrics))
    order = sorted(cells, key=lambda lab: tuple(int(v) for v in lab.split("⊕")))

    s1_rows, rows = [], []
    for label in order:
        entries = sorted(cells[label], key=lambda e: e[0])
        for key in entries[0][1]:
            m, s = _mean_std([e[1][key] for e in entries])
            s1_rows.append({"cell": label, "measure": key, "n": len(entries), "psnr_mean": m, "psnr_std": s})
        per_method = {meth: [r for e in entries for r in e[2] if r["method"] == meth] for meth in METHODS}
        diffs = [a["psnr"] - b["psnr"] for a, b in zip(per_method["proposed"], per_method["zero-detail"])]
        try:
            p = wilcoxon_signed_rank(diffs).pvalue
        except DegenerateInput:
            p = math.nan
        for meth in METHODS:
            pm, ps = _mean_std([r["psnr"] for r in per_method[meth]])
            sm, ss = _mean_std([r["ssim"] for r in per_method[meth]])
            rows.append({"cell": label, "method": meth, "n": len(per_method[meth]),
                         "psnr_mean": pm, "psnr_std": ps, "ssim_mean": sm, "ssim_std": ss,
                         "wilcoxon_p": p if meth == "proposed" else math.nan})
    s1_cols = ["cell", "measure", "n", "psnr_mean", "psnr_std"]
    cols = ["cell", "method", "n", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std", "wilcoxon_p"]
    run.path("stage1_grid.csv").write_text(rows_to_csv(s1_rows, s1_cols))
    run.path("grid.csv").write_text(rows_to_csv(rows, cols))
    sys.stdout.write(rows_to_csv(rows, cols) if cfg["format"] == "csv" else rows_to_table(rows, cols))


def cmd_export(run: Run, cfg):
    if not cfg["volume"]:
        raise ConfigError("config key 'volume' is required for export")
    src = Path(cfg["volume"]) if Path(cfg["volume"]).is_file() else run.path(cfg["volume"])
    if not src.is_file():
        raise MissingPrerequisite(f"missing volume to export: {cfg['volume']}")
    run.inputs.append(src)
    v = load_volume(src)
    axis = AXES.get(cfg["slice_axis"])
    if axis is None:
        raise ConfigError(f"config key 'slice_axis' must be x, y or z, got {cfg['slice_axis']!r}")
    index = cfg["slice_index"] if cfg["slice_index"] >= 0 else v.dims[axis] // 2
    if index >= v.dims[axis]:
        raise ConfigError(f"config key 'slice_index': {index} outside extent {v.dims[axis]}")
    img = np.take(v.voxels, index, axis=axis)
    stem = f"{src.stem}_{cfg['slice_axis']}{index}"
    if cfg["spectrum"]:
        img, stem = log_spectrum(img), stem + "_spectrum"
    write_pgm(img, run.path(stem + ".pgm"))


COMMANDS = {"simulate": cmd_simulate, "stage1": cmd_stage1, "stage2": cmd_stage2, "sr": cmd_sr,
            "eval": cmd_eval, "grid": cmd_grid, "export": cmd_export}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--out", default="run", help="output directory (default: run)")
    common.add_argument("--seed", type=int, help="override the seed key")
    common.add_argument("--threads", type=int, default=1, help="worker processes for grid")
    parser = argparse.ArgumentParser(prog="fbsr", description="Filter-bank super-resolution pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=fn.__doc__)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    if not log.handlers:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    log.setLevel(logging.INFO)
    run = None
    try:
        cfg = resolve_config(args)
        run = Run(Path(args.out), args.command, cfg)
        if args.command == "grid":
            cmd_grid(run, cfg, args.threads)
        else:
            COMMANDS[args.command](run, cfg)
        return EXIT_OK
    except (ConfigError, InvalidArgument) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingPrerequisite as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (FormatError, InvalidState) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        if run is not None:
            run.close()


if __name__ == "__main__":
    sys.exit(main())
