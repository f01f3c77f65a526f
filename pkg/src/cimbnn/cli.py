"""Command-line experiments.  Every command is deterministic per (config, seed)
and echoes its resolved configuration into its output.

Exit status: 0 ok, 2 bad arguments, 3 I/O error, 4 stale calibration,
5 training failure, 6 file schema/version mismatch.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import bnn, energy, grng, stats
from .calibration import CalibrationError, OffsetMap, load_weights, measure_offsets
from .tile import Tile, TileConfig, TileError, tile_mvm

EXIT_OK, EXIT_ARGS, EXIT_IO, EXIT_STALE, EXIT_TRAIN, EXIT_SCHEMA = 0, 2, 3, 4, 5, 6


class CliError(Exception):
    def __init__(self, msg: str, code: int):
        super().__init__(msg)
        self.code = code


def write_atomic(path, text: str) -> None:
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent if str(path.parent) else ".", prefix=f".{path.name}.")
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except OSError as e:
        raise CliError(f"cannot write {path}: {e}", EXIT_IO) from e


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise CliError(f"missing file: {path}", EXIT_IO) from e
    except OSError as e:
        raise CliError(f"cannot read {path}: {e}", EXIT_IO) from e
    except json.JSONDecodeError as e:
        raise CliError(f"{path} is not valid JSON: {e}", EXIT_SCHEMA) from e


def _echo(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True)


def _csv(header, rows, cfg: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    buf.write(f"# config: {_echo(cfg)}\n")
    return buf.getvalue()


def _floats(value) -> list:
    if value is None or value == "":
        return []
    if isinstance(value, (list, tuple)):
        return [float(v) for v in value]
    return [float(v) for v in str(value).split(",") if v.strip()]


def _grng_config(cfg: dict) -> grng.GrngConfig:
    return grng.grng_config_from_dict(cfg.get("grng", {}))


# -- grng-sweep -------------------------------------------------------------------

SWEEP_HEADER = ("point", "v_r", "temp_c", "mean_latency_s", "sd_width_s", "mean_width_s",
                "rvalue", "censored_fraction", "analytic_latency_s", "analytic_sd_s")


def cmd_grng_sweep(cfg: dict) -> str:
    """One row per grid point of v_r (volts) or temperature (degC)."""
    base = _grng_config(cfg)
    axis = cfg["sweep"]
    if axis not in ("v_r", "temp"):
        raise CliError("sweep must be 'v_r' or 'temp'", EXIT_ARGS)
    n = int(cfg["n_samples"])
    floor = float(cfg.get("censor_floor", base.censor_floor))
    rows = []
    for k, value in enumerate(_floats(cfg.get("grid"))):
        v_r, temp = base.v_r, base.temp
        if axis == "v_r":
            v_r = value
        else:
            temp = grng.celsius(value)
        stream = grng.RngStream(int(cfg["seed"]), k)
        pulse = grng.censor(grng.sample_pulse(base.physics, base.instance, v_r, temp, stream, size=n), floor)
        d = grng.discharge_params(base.physics, base.instance, v_r, temp)
        w = pulse.signed_width
        rows.append((k, v_r, temp - grng.ZERO_CELSIUS, float(pulse.latency.mean()), float(w.std(ddof=1)),
                     float(w.mean()), stats.qq_rvalue(w), float(pulse.censored.mean()),
                     max(d.mu_p, d.mu_n), math.hypot(d.sigma_p, d.sigma_n)))
    return _csv(SWEEP_HEADER, rows, cfg)


# -- tiles ----------------------------------------------------------------------------

def _tile_config(cfg: dict) -> TileConfig:
    geometry = dict(rows=int(cfg.get("rows", 64)), words_per_row=int(cfg.get("words", 8)))
    if cfg.get("ideal_adc"):
        return TileConfig.ideal(**geometry)
    fs = cfg.get("adc_full_scale")
    return TileConfig(**geometry, adc_full_scale=None if fs is None else float(fs))


def _build_tile(cfg: dict) -> Tile:
    tcfg = _tile_config(cfg)
    base = _grng_config(cfg)
    stream = grng.RngStream(int(cfg.get("tile_seed", 0)))
    shape = (tcfg.rows, tcfg.words_per_row)
    sd = float(cfg.get("mismatch_sd", 0.0))
    inst = grng.GrngInstance.mismatched(shape, sd, stream.child(1)) if sd else base.instance
    if "weights" in cfg and cfg["weights"]:
        w = read_json(cfg["weights"])
        mu, sigma = w["mu"], w["sigma"]
    else:
        g = stream.generator
        mu = g.integers(-tcfg.mu_max, tcfg.mu_max + 1, size=shape)
        sigma = g.integers(0, tcfg.sigma_max + 1, size=shape)
    try:
        return Tile(tcfg, mu, sigma, grng=inst, physics=base.physics, v_r=base.v_r, temp=base.temp)
    except TileError as e:
        raise CliError(str(e), EXIT_ARGS) from e


def _load_offsets(path, tile: Tile) -> OffsetMap:
    try:
        om = OffsetMap.load(path)
    except FileNotFoundError as e:
        raise CliError(f"missing file: {path}", EXIT_IO) from e
    except (CalibrationError, KeyError, json.JSONDecodeError) as e:
        raise CliError(f"{path}: {e}", EXIT_SCHEMA) from e
    if om.fingerprint != tile.fingerprint():
        raise CliError(f"offset map {path} is stale for this tile "
                       f"({om.fingerprint} != {tile.fingerprint()})", EXIT_STALE)
    return om


def cmd_calibrate(cfg: dict) -> tuple[str, str]:
    """Measure offsets; returns (offset map JSON, residual CSV).

    Residuals are the means of fresh, offset-subtracted GRNG readouts
    (``verify_factor * n_cal`` per word) in epsilon units.
    """
    tile = _build_tile(cfg)
    n_cal = int(cfg["n_cal"])
    seed = int(cfg["seed"])
    if cfg.get("offsets"):
        _load_offsets(cfg["offsets"], tile)
    om = measure_offsets(tile, n_cal, grng.RngStream(seed, 1))
    n_ver = int(cfg.get("verify_factor", 16)) * n_cal
    vstream = grng.RngStream(seed, 2)
    lim = tile.eps_limit
    rows = []
    for i in range(tile.config.rows):
        eps, _ = grng.sample_epsilon(tile.physics, tile.grng[i], tile.v_r, tile.temp, vstream,
                                     t_unit=tile.t_unit, size=n_ver)
        resid = np.clip(eps, -lim, lim).mean(axis=0) - om.offsets[i]
        rows += [(i, j, float(om.offsets[i, j]), float(r)) for j, r in enumerate(resid)]
    bound = 4.0 / math.sqrt(n_cal)
    worst = max(abs(r[3]) for r in rows)
    text = _csv(("row", "word", "offset_estimate", "residual_mean"), rows,
                {**cfg, "max_abs_residual": worst, "bound": bound})
    doc = om.to_dict()
    doc["config"] = cfg
    return json.dumps(doc, indent=1, sort_keys=True) + "\n", text


def cmd_mvm(cfg: dict) -> str:
    tile = _build_tile(cfg)
    if cfg.get("offsets"):
        om = _load_offsets(cfg["offsets"], tile)
        load_weights(tile, tile.mu.copy(), tile.sigma.copy(), om)
    x = cfg.get("x")
    if x is None or x == "":
        x = grng.RngStream(int(cfg["seed"]), 7).generator.integers(0, tile.config.input_max + 1,
                                                                   tile.config.rows)
    else:
        x = np.array([int(v) for v in (x if isinstance(x, list) else str(x).split(","))])
    mode = cfg.get("mode", "stochastic")
    stream = grng.RngStream(int(cfg["seed"]))
    rows = []
    try:
        for call in range(int(cfg.get("repeat", 1))):
            y = tile_mvm(tile, x, stream, mode=mode, forced_eps=cfg.get("forced_eps"))
            rows += [(call, j, int(v)) for j, v in enumerate(y)]
    except TileError as e:
        raise CliError(str(e), EXIT_ARGS) from e
    return _csv(("call", "word", "output"), rows, {**cfg, "x": [int(v) for v in x]})


# -- BNN --------------------------------------------------------------------------

def _dataset(cfg: dict, which: str):
    n = int(cfg[f"n_{which}"])
    seed = int(cfg["data_seed"]) + (0 if which == "train" else 1)
    return bnn.two_moons(n, float(cfg["noise"]), grng.RngStream(seed))


def cmd_train(cfg: dict) -> str:
    x, y = _dataset(cfg, "train")
    arch = bnn.Architecture(2, tuple(int(h) for h in _floats(cfg["hidden"])), 2)
    tc = bnn.TrainConfig(steps=int(cfg["steps"]), batch_size=int(cfg["batch_size"]), lr=float(cfg["lr"]),
                         beta=None if cfg.get("beta") is None else float(cfg["beta"]),
                         init_rho=float(cfg["init_rho"]))
    try:
        model = bnn.train_vi(x, y, arch, tc, grng.RngStream(int(cfg["seed"])))
    except bnn.TrainingDiverged as e:
        raise CliError(str(e), EXIT_TRAIN) from e
    bnn.quantize_model(model, x)
    doc = bnn.model_to_dict(model)
    doc["config"] = cfg
    return json.dumps(doc) + "\n"


def _load_model(path) -> bnn.BayesModel:
    doc = read_json(path)
    try:
        return bnn.model_from_dict(doc)
    except bnn.SchemaVersionError as e:
        raise CliError(str(e), EXIT_SCHEMA) from e
    except (ValueError, KeyError) as e:
        raise CliError(f"{path}: {e}", EXIT_SCHEMA) from e


def cmd_infer(cfg: dict) -> str:
    model = _load_model(cfg["model"])
    xt, _ = _dataset(cfg, "train")
    x, y = _dataset(cfg, "test")
    ledger = energy.Ledger()
    kind = cfg.get("backend", "tile")
    if kind == "tile":
        if model.quantized is None:
            bnn.quantize_model(model, xt)
        backend = bnn.TileBackend.build(model, mismatch_sd=float(cfg.get("mismatch_sd", 0.0)),
                                        n_cal=int(cfg["n_cal"]), ledger=ledger, calib_x=xt,
                                        stream=grng.RngStream(int(cfg.get("tile_seed", 0))))
    elif kind in ("software", "mean"):
        backend = bnn.SoftwareBackend(model, deterministic=kind == "mean")
    elif kind == "ideal":
        backend = bnn.IdealBackend(model)
    else:
        raise CliError(f"unknown backend {kind}", EXIT_ARGS)
    rep = bnn.evaluate_uncertainty(model, backend, x, y, int(cfg["s"]), grng.RngStream(int(cfg["seed"])),
                                   thresholds=_floats(cfg["thresholds"]))
    summary = rep.summary()
    n_ood = int(cfg.get("n_ood", 0))
    if n_ood:
        # probe far outside the training support; ids continue after the test set
        ood = bnn.far_from_support(n_ood, grng.RngStream(int(cfg["data_seed"]) + 2))
        res = bnn.infer_dataset(model, backend, ood, int(cfg["s"]), grng.RngStream(int(cfg["seed"])),
                                ids=np.arange(len(x), len(x) + n_ood))
        summary["ape_ood"] = float(np.mean([r.entropy for r in res]))
    doc = {
        "format": "cimbnn-inference", "version": 1,
        "summary": summary,
        "recovery": [list(r) for r in rep.recovery],
        "calibration_curve": [list(b) for b in rep.calibration.bins],
        "predictions": [{"entropy": float(h), "confidence": float(c), "correct": bool(k)}
                        for h, c, k in zip(rep.entropies, rep.confidences, rep.correct)],
        "counters": json.loads(energy.counts_to_json(ledger.snapshot())),
        "config": cfg,
    }
    return json.dumps(doc, indent=1, sort_keys=True, allow_nan=True) + "\n"


def cmd_report(cfg: dict) -> str:
    run = read_json(cfg["run"])
    if run.get("format") != "cimbnn-inference":
        raise CliError(f"{cfg['run']} is not an inference result", EXIT_SCHEMA)
    counts = energy.WorkloadCounts(**run["counters"])
    model = energy.EnergyModel()
    rep = energy.tally(model, counts)
    out = [energy.report_csv(rep).rstrip("\n"), "",
           energy.breakdown_csv(model).rstrip("\n"), "",
           *("# " + line for line in energy.comparison_table(model).rstrip("\n").split("\n")),
           f"# config: {_echo(cfg)}"]
    return "\n".join(out) + "\n"


DEFAULTS = {
    "grng-sweep": {"seed": 0, "sweep": "v_r", "grid": "0.16,0.17,0.18,0.19,0.2", "n_samples": 2500,
                   "censor_floor": 1e-9},
    "calibrate": {"seed": 0, "tile_seed": 0, "rows": 64, "words": 8, "mismatch_sd": 0.0,
                  "n_cal": 1024, "verify_factor": 16, "offsets": None},
    "mvm": {"seed": 0, "tile_seed": 0, "rows": 64, "words": 8, "mismatch_sd": 0.0, "mode": "stochastic",
            "repeat": 1, "ideal_adc": False, "adc_full_scale": None, "weights": None, "x": None,
            "offsets": None, "forced_eps": None},
    "train": {"seed": 0, "data_seed": 100, "n_train": 200, "noise": 0.3, "hidden": "32,32",
              "steps": 3000, "batch_size": 64, "lr": 0.01, "beta": None, "init_rho": -5.0},
    "infer": {"seed": 0, "tile_seed": 0, "data_seed": 100, "n_train": 200, "n_test": 500, "noise": 0.3,
              "n_ood": 200, "s": 32, "backend": "tile", "mismatch_sd": 0.0, "n_cal": 1024,
              "thresholds": ",".join(str(t) for t in stats.default_thresholds())},
    "report": {},
}

COMMANDS = {"grng-sweep": cmd_grng_sweep, "calibrate": cmd_calibrate, "mvm": cmd_mvm,
            "train": cmd_train, "infer": cmd_infer, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cimbnn", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON file of parameters; flags override it")
        sp.add_argument("--out", required=out_required, help="output path")
        sp.add_argument("--seed", type=int)
        return sp

    sp = common(sub.add_parser("grng-sweep", help="GRNG latency/SD/normality over v_r or temperature"))
    sp.add_argument("--sweep", choices=("v_r", "temp"))
    sp.add_argument("--grid", help="comma-separated values (volts or degC); empty for header only")
    sp.add_argument("--n-samples", type=int)
    sp.add_argument("--censor-floor", type=float)

    tile_help = {"calibrate": "measure per-cell GRNG offsets and residuals",
                 "mvm": "stochastic matrix-vector products on a simulated tile"}
    for name in ("calibrate", "mvm"):
        sp = common(sub.add_parser(name, help=tile_help[name]))
        sp.add_argument("--tile-seed", type=int)
        sp.add_argument("--rows", type=int)
        sp.add_argument("--words", type=int)
        sp.add_argument("--mismatch-sd", type=float)
        sp.add_argument("--offsets", help="offset map to check/apply")
        if name == "calibrate":
            sp.add_argument("--n-cal", type=int)
            sp.add_argument("--report", help="residual CSV path (default: <out>.residuals.csv)")
        else:
            sp.add_argument("--weights", help="JSON with 'mu' and 'sigma' matrices")
            sp.add_argument("--x", help="comma-separated integer inputs")
            sp.add_argument("--mode", choices=("stochastic", "mean_only", "forced_eps"))
            sp.add_argument("--forced-eps", type=float)
            sp.add_argument("--repeat", type=int)
            sp.add_argument("--ideal-adc", action="store_true", default=None)
            sp.add_argument("--adc-full-scale", type=float)

    sp = common(sub.add_parser("train", help="train a partial-Bayesian classifier on two moons"))
    for flag, typ in (("--data-seed", int), ("--n-train", int), ("--noise", float), ("--hidden", str),
                      ("--steps", int), ("--batch-size", int), ("--lr", float), ("--beta", float),
                      ("--init-rho", float)):
        sp.add_argument(flag, type=typ)

    sp = common(sub.add_parser("infer", help="repeated-sampling inference and uncertainty metrics"))
    sp.add_argument("--model", required=False)
    for flag, typ in (("--tile-seed", int), ("--data-seed", int), ("--n-train", int), ("--n-test", int),
                      ("--n-ood", int), ("--noise", float), ("--s", int), ("--mismatch-sd", float), ("--n-cal", int),
                      ("--thresholds", str)):
        sp.add_argument(flag, type=typ)
    sp.add_argument("--backend", choices=("tile", "software", "ideal", "mean"))

    sp = common(sub.add_parser("report", help="energy ledger for a finished inference run"))
    sp.add_argument("--run", required=False)
    return p


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[args.command])
    if args.config:
        cfg.update(read_json(args.config))
    skip = {"command", "config", "out", "report"}
    for k, v in vars(args).items():
        if k not in skip and v is not None:
            cfg[k] = v
    for required in {"infer": ("model",), "report": ("run",)}.get(args.command, ()):
        if not cfg.get(required):
            raise CliError(f"--{required} is required", EXIT_ARGS)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = resolve_config(args)
        result = COMMANDS[args.command](cfg)
        if args.command == "calibrate":
            offsets_text, residual_text = result
            write_atomic(args.out, offsets_text)
            write_atomic(args.report or f"{args.out}.residuals.csv", residual_text)
        else:
            write_atomic(args.out, result)
    except CliError as e:
        print(f"cimbnn {args.command}: {e}", file=sys.stderr)
        return e.code
    except (grng.InvalidArgument, TileError, ValueError) as e:
        print(f"cimbnn {args.command}: {e}", file=sys.stderr)
        return EXIT_ARGS
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
