"""Command-line entry point.

Commands: gen, convert-csv, train, forecast, eval, sweep, modes. Every
command reads a YAML config (--config), writes machine-readable artifacts
(FGRID / CSV / JSON lines on stdout) under the output directory, and is
idempotent for a given config hash: outputs produced by a different config
are never overwritten without --force.

Exit codes: 0 ok, 2 config error, 3 I/O or format error, 4 numerical
failure, 5 unsupported version.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
import time

import numpy as np
import yaml

from . import config as cfgmod
from . import kernels
from .analysis import (
    assemble_effective_layer,
    concat_readout,
    concat_states,
    modal_decomposition,
    rmse_map,
    rmse_upto,
)
from .errors import (
    ConfigError,
    DataFormatError,
    NumericalError,
    UnsupportedVersionError,
    UntrainedError,
    XsrcError,
)
from .experiments import SWEEP_COLUMNS, grid_search
from .field import GridSeries, load_csv_series, load_grid_series, save_grid_series
from .hierarchy import forecast, load_model, save_model, sync_states, train_hierarchy
from .synth import gen_multiscale_synthetic


def _emit(event: str, **fields):
    print(json.dumps({"event": event, **fields}, sort_keys=True), flush=True)


def _atomic_bytes(path: str, data: bytes):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_csv(path: str, header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(header)
    for row in rows:
        writer.writerow(row)
    _atomic_bytes(path, buf.getvalue().encode())


def _out_dir(args, norm) -> str:
    directory = args.out if args.out else norm["output"]["directory"]
    os.makedirs(directory, exist_ok=True)
    return directory


def _manifest_gate(outdir: str, command: str, chash: str, force: bool):
    """Refuse to overwrite outputs produced by a different config."""
    path = os.path.join(outdir, "manifest.json")
    entries = {}
    if os.path.exists(path):
        with open(path) as f:
            entries = json.load(f)
        previous = entries.get(command)
        if previous is not None and previous != chash and not force:
            raise ConfigError(
                f"{outdir} holds {command!r} outputs from a different config "
                f"(hash {previous[:12]}... vs {chash[:12]}...); rerun with --force "
                f"to overwrite"
            )
    entries[command] = chash
    return path, entries


def _manifest_commit(path: str, entries: dict):
    _atomic_bytes(path, json.dumps(entries, indent=2, sort_keys=True).encode())


def _load_norm(args) -> dict:
    if not args.config:
        raise ConfigError("--config is required for this command")
    norm = cfgmod.load_config(args.config)
    if args.seed is not None:
        norm["seed"] = args.seed
    return norm


def _load_data(norm) -> GridSeries:
    data = norm["data"]
    if "path" in data:
        return load_grid_series(data["path"])
    return gen_multiscale_synthetic(cfgmod.synth_spec(norm))


def _model_path(args, outdir: str) -> str:
    return args.model if getattr(args, "model", None) else os.path.join(outdir, "model.xsrc")


def _require_finite(name: str, array: np.ndarray):
    if not np.isfinite(array).all():
        raise NumericalError(f"{name} contains non-finite values")


def cmd_gen(args) -> int:
    norm = _load_norm(args)
    chash = cfgmod.config_hash(norm)
    spec = cfgmod.synth_spec(norm)
    outdir = _out_dir(args, norm)
    mpath, entries = _manifest_gate(outdir, "gen", chash, args.force)
    series = gen_multiscale_synthetic(spec)
    path = os.path.join(outdir, "synth.fgrid")
    save_grid_series(series, path)
    _manifest_commit(mpath, entries)
    _emit(
        "gen_done",
        path=path,
        n_time=series.n_time,
        n_rows=series.n_rows,
        n_cols=series.n_cols,
        n_components=len(spec.components),
        seed=spec.seed,
        config_hash=chash,
    )
    return 0


def cmd_convert_csv(args) -> int:
    series = load_csv_series(args.input, dt=args.dt)
    save_grid_series(series, args.output)
    _emit(
        "convert_done",
        input=args.input,
        output=args.output,
        n_time=series.n_time,
        n_rows=series.n_rows,
        n_cols=series.n_cols,
        valid_cells=series.n_valid,
    )
    return 0


def cmd_train(args) -> int:
    norm = _load_norm(args)
    chash = cfgmod.config_hash(norm)
    data = _load_data(norm)
    hcfg = cfgmod.hierarchy_config(norm)
    train_frames = norm["training"]["train_frames"]
    if train_frames > data.n_time:
        raise ConfigError(
            f"train_frames {train_frames} exceeds series length {data.n_time}"
        )
    outdir = _out_dir(args, norm)
    mpath, entries = _manifest_gate(outdir, "train", chash, args.force)
    start = time.perf_counter()
    model = train_hierarchy(
        hcfg,
        data.slice_time(0, train_frames),
        norm["seed"],
        n_jobs=args.threads,
        provenance={"config_hash": chash},
    )
    wall = time.perf_counter() - start
    path = os.path.join(outdir, "model.xsrc")
    save_model(model, path)
    _manifest_commit(mpath, entries)
    _emit(
        "train_done",
        path=path,
        config_hash=chash,
        n_layers=model.n_layers,
        reservoirs=[layer.n_reservoirs for layer in model.layers],
        kernel_backend=kernels.backend_name(),
        wall_time_s=round(wall, 3),
    )
    return 0


def cmd_forecast(args) -> int:
    norm = _load_norm(args)
    chash = cfgmod.config_hash(norm)
    data = _load_data(norm)
    model = load_model(_model_path(args, args.out if args.out else norm["output"]["directory"]))
    train_frames = norm["training"]["train_frames"]
    warmup_frames = norm["forecast"]["warmup_frames"]
    horizon = norm["forecast"]["horizon"]
    if warmup_frames > train_frames or train_frames > data.n_time:
        raise ConfigError("warmup window does not fit inside the training window")
    outdir = _out_dir(args, norm)
    mpath, entries = _manifest_gate(outdir, "forecast", chash, args.force)
    warmup = data.slice_time(train_frames - warmup_frames, train_frames)
    result = forecast(model, warmup, horizon)
    paths = []
    for k in range(model.n_layers):
        series = result.layer_series(k)
        _require_finite(f"layer {k + 1} forecast", series.values)
        path = os.path.join(outdir, f"forecast_layer{k + 1}.fgrid")
        save_grid_series(series, path)
        paths.append(path)
    finest = os.path.join(outdir, "forecast.fgrid")
    save_grid_series(result.finest_series, finest)
    _manifest_commit(mpath, entries)
    _emit(
        "forecast_done",
        finest=finest,
        layers=paths,
        horizon=horizon,
        warmup_frames=warmup_frames,
        config_hash=chash,
    )
    return 0


def cmd_eval(args) -> int:
    norm = _load_norm(args)
    chash = cfgmod.config_hash(norm)
    data = _load_data(norm)
    train_frames = norm["training"]["train_frames"]
    horizon = norm["forecast"]["horizon"]
    outdir = _out_dir(args, norm)
    forecast_path = args.forecast or os.path.join(outdir, "forecast.fgrid")
    pred = load_grid_series(forecast_path)
    if train_frames + pred.n_time > data.n_time:
        raise ConfigError(
            "truth window (train_frames + forecast length) exceeds the series"
        )
    truth = data.slice_time(train_frames, train_frames + pred.n_time)
    horizons = [t for t in norm["eval"]["horizons"] if t <= pred.n_time]
    if not horizons:
        raise ConfigError("no eval horizon fits inside the forecast length")
    mpath, entries = _manifest_gate(outdir, "eval", chash, args.force)
    rows = []
    baseline = load_grid_series(args.baseline) if args.baseline else None
    if baseline is not None and baseline.values.shape != pred.values.shape:
        raise ConfigError("baseline forecast shape does not match the forecast")
    for T in horizons:
        r = rmse_upto(pred, truth, T)
        if baseline is None:
            rows.append((T, r))
        else:
            rb = rmse_upto(baseline, truth, T)
            rows.append((T, r, rb, r / rb if rb > 0 else float("inf")))
    header = ("T", "rmse") if baseline is None else ("T", "rmse", "rmse_baseline", "ratio")
    curve_path = os.path.join(outdir, "rmse_curve.csv")
    _write_csv(curve_path, header, rows)
    outputs = {"rmse_curve": curve_path}
    if baseline is not None:
        T = max(horizons)
        delta = rmse_map(pred, truth, T).values[0] - rmse_map(baseline, truth, T).values[0]
        delta_series = GridSeries(delta[None, :, :], pred.mask, dt=pred.dt)
        delta_path = os.path.join(outdir, f"delta_rmse_T{T}.fgrid")
        save_grid_series(delta_series, delta_path)
        outputs["delta_rmse"] = delta_path
    _manifest_commit(mpath, entries)
    _emit("eval_done", config_hash=chash, horizons=horizons, **outputs)
    return 0


def cmd_sweep(args) -> int:
    norm = _load_norm(args)
    chash = cfgmod.config_hash(norm)
    data = _load_data(norm)
    sweep = cfgmod.sweep_spec(norm)
    hcfg = cfgmod.hierarchy_config(norm)
    train_frames = norm["training"]["train_frames"]
    warmup_frames = norm["forecast"]["warmup_frames"]
    horizon = norm["forecast"]["horizon"]
    if train_frames + horizon > data.n_time:
        raise ConfigError("train_frames + horizon exceeds the series length")
    outdir = _out_dir(args, norm)
    mpath, entries = _manifest_gate(outdir, "sweep", chash, args.force)
    best, rows = grid_search(
        sweep,
        hcfg,
        data.slice_time(0, train_frames),
        data.slice_time(train_frames, train_frames + horizon),
        warmup_frames,
        norm["seed"],
        n_jobs=args.threads,
    )
    results_path = os.path.join(outdir, "sweep_results.csv")
    _write_csv(results_path, SWEEP_COLUMNS, rows)
    best_doc = {
        "layers": [
            {
                "g": h.g,
                "noise_std": h.noise_std,
                "g_in": h.g_in,
                "g_l": h.g_l,
                "tau": h.tau,
            }
            for h in best
        ]
    }
    best_path = os.path.join(outdir, "sweep_best.yaml")
    _atomic_bytes(best_path, yaml.safe_dump(best_doc, sort_keys=True).encode())
    _manifest_commit(mpath, entries)
    _emit(
        "sweep_done",
        results=results_path,
        best=best_path,
        config_hash=chash,
        n_rows=len(rows),
    )
    return 0


def cmd_modes(args) -> int:
    norm = _load_norm(args)
    chash = cfgmod.config_hash(norm)
    data = _load_data(norm)
    model = load_model(_model_path(args, args.out if args.out else norm["output"]["directory"]))
    level = args.level
    if not (1 <= level <= model.n_layers):
        raise ConfigError(f"--level {level} outside 1..{model.n_layers}")
    train_frames = norm["training"]["train_frames"]
    warmup_frames = norm["forecast"]["warmup_frames"]
    horizon = norm["forecast"]["horizon"]
    outdir = _out_dir(args, norm)
    mpath, entries = _manifest_gate(outdir, "modes", chash, args.force)
    warmup = data.slice_time(train_frames - warmup_frames, train_frames)

    layer = model.layers[level - 1]
    states, _ = sync_states(model, warmup)
    W_tilde = assemble_effective_layer(layer, frozen_parent=level > 1)
    W_out_cat = concat_readout(layer)
    r0 = concat_states(layer, states[level - 1])
    tau = next(iter(layer.reservoirs.values())).hyper.tau
    decomp = modal_decomposition(W_tilde, W_out_cat, r0, tau)

    spectrum_path = os.path.join(outdir, "modes_spectrum.csv")
    _write_csv(
        spectrum_path,
        ("rank", "re_lambda", "im_lambda", "abs_weight"),
        [
            (k, decomp.lam[k].real, decomp.lam[k].imag, abs(decomp.weights[k]))
            for k in range(decomp.n_modes)
        ],
    )
    weights_path = os.path.join(outdir, "modes_weights.csv")
    _write_csv(
        weights_path,
        ("rank", "abs_weight"),
        [(k, abs(decomp.weights[k])) for k in range(decomp.n_modes)],
    )

    # leading complex-conjugate pair trajectory (modes are weight-sorted)
    pair_rows = []
    pair = None
    for k in range(decomp.n_modes):
        if decomp.lam[k].imag != 0:
            others = [j for j in range(decomp.n_modes) if j != k]
            partner = min(
                others, key=lambda j: abs(decomp.lam[j] - decomp.lam[k].conjugate())
            )
            pair = (k, partner)
            break
    if pair is not None:
        a, b = pair
        dt = model.layers[level - 1].reservoirs[
            next(iter(model.layers[level - 1].reservoirs))
        ].hyper.dt_step
        times = np.arange(horizon) * dt
        za = decomp.z0[a] * np.exp((decomp.lam[a] - 1.0) * times / decomp.tau)
        zb = decomp.z0[b] * np.exp((decomp.lam[b] - 1.0) * times / decomp.tau)
        pair_rows = [
            (t, za[i].real, za[i].imag, zb[i].real, zb[i].imag)
            for i, t in enumerate(times)
        ]
    pair_path = os.path.join(outdir, "modes_top_pair.csv")
    _write_csv(pair_path, ("t", "re_a", "im_a", "re_b", "im_b"), pair_rows)

    result = forecast(model, warmup, horizon, record_activity=True)
    activity_path = os.path.join(outdir, "activity.csv")
    _write_csv(
        activity_path,
        ("layer", "preact_max", "state_max"),
        [
            (k + 1, float(result.activity[k][:, 0].max()), float(result.activity[k][:, 1].max()))
            for k in range(model.n_layers)
        ]
        if horizon > 0
        else [],
    )
    _manifest_commit(mpath, entries)
    _emit(
        "modes_done",
        level=level,
        n_modes=decomp.n_modes,
        spectrum=spectrum_path,
        weights=weights_path,
        top_pair=pair_path,
        activity=activity_path,
        config_hash=chash,
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xsrc",
        description="Cross-scale reservoir computing for gridded spatiotemporal fields",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML config path")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--threads", type=int, default=1, help="worker cap")
        p.add_argument("--out", default=None, help="override output directory")
        p.add_argument("--force", action="store_true", help="overwrite outputs from a different config")

    p = sub.add_parser("gen", help="generate synthetic data to FGRID")
    common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("convert-csv", help="convert t,row,col,value CSV to FGRID")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--dt", type=float, default=1.0)
    p.set_defaults(func=cmd_convert_csv)

    p = sub.add_parser("train", help="train a model and write the checkpoint")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("forecast", help="closed-loop forecast from a checkpoint")
    common(p)
    p.add_argument("--model", default=None, help="checkpoint path (default OUT/model.xsrc)")
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("eval", help="RMSE curves, ratios, and delta maps")
    common(p)
    p.add_argument("--forecast", default=None, help="forecast FGRID (default OUT/forecast.fgrid)")
    p.add_argument("--baseline", default=None, help="baseline forecast FGRID for ratios/delta map")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="hyperparameter grid search")
    common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("modes", help="modal decomposition of a trained layer")
    common(p)
    p.add_argument("--model", default=None, help="checkpoint path (default OUT/model.xsrc)")
    p.add_argument("--level", type=int, default=1, help="layer to analyze (1 = coarsest)")
    p.set_defaults(func=cmd_modes)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except UnsupportedVersionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 5
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except UntrainedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except XsrcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
