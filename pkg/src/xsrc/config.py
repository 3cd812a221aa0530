"""Run configuration: schema validation, normalization, and content hashing.

Configs are YAML documents with sections data / model / training / forecast /
eval / sweep / output. Unknown keys are rejected anywhere in the tree. The
stable content hash is the SHA-256 of the canonical JSON form of the
normalized config (defaults applied, keys sorted), so two configs that mean
the same thing hash identically.
"""

from __future__ import annotations

import hashlib
import json

import yaml

from .errors import ConfigError
from .experiments import ForecastProtocol, SweepSpec
from .hierarchy import HierarchyConfig, LayerConfig, PARENT_SIGNALS, PARENT_TIMINGS
from .reservoir import ReservoirHyperparams
from .synth import GlobalOscillation, LocalChaos, SynthSpec, TravelingWave

_HYPER_DEFAULTS = {
    "g_l": 1.0,
    "tau": 1.0,
    "dt_step": 1.0,
    "noise_std": 0.0,
    "beta": 1e-6,
    "beta_mode": "relative",
    "washout": 100,
}
_HYPER_REQUIRED = ("d_r", "g", "p", "g_in")

_COMPONENT_FIELDS = {
    "global_oscillation": (("amplitude", "period"), {"phase_gradient": 0.0}),
    "traveling_wave": (("amplitude", "wavelength", "speed"), {"axis": "col"}),
    "local_chaos": (("amplitude", "mu"), {"transient": 100}),
}


def _require_mapping(node, where: str) -> dict:
    if not isinstance(node, dict):
        raise ConfigError(f"{where} must be a mapping, got {type(node).__name__}")
    return node


def _check_keys(node: dict, allowed, where: str):
    unknown = sorted(set(node) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in {where}")


def _need(node: dict, key: str, where: str):
    if key not in node:
        raise ConfigError(f"missing required key {key!r} in {where}")
    return node[key]


def _as_int(value, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{where} must be an integer, got {value!r}")
    return value


def _as_number(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where} must be a number, got {value!r}")
    return float(value)


def load_config(path) -> dict:
    """Parse and normalize a YAML config file."""
    with open(path) as f:
        try:
            raw = yaml.safe_load(f)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    return normalize_config(_require_mapping(raw, str(path)))


def _normalize_hyper(node, where: str) -> dict:
    node = _require_mapping(node, where)
    _check_keys(node, _HYPER_REQUIRED + tuple(_HYPER_DEFAULTS), where)
    out = {}
    for key in _HYPER_REQUIRED:
        out[key] = _need(node, key, where)
    for key, default in _HYPER_DEFAULTS.items():
        out[key] = node.get(key, default)
    out["d_r"] = _as_int(out["d_r"], f"{where}.d_r")
    out["washout"] = _as_int(out["washout"], f"{where}.washout")
    for key in ("g", "p", "g_in", "g_l", "tau", "dt_step", "noise_std", "beta"):
        out[key] = _as_number(out[key], f"{where}.{key}")
    if out["beta_mode"] not in ("relative", "absolute"):
        raise ConfigError(f"{where}.beta_mode must be relative|absolute")
    ReservoirHyperparams(**out).validate()
    return out


def _normalize_layer(node, where: str) -> dict:
    node = _require_mapping(node, where)
    _check_keys(
        node,
        ("tile_rows", "tile_cols", "overlap", "boundary_row", "boundary_col", "hyper"),
        where,
    )
    out = {
        "tile_rows": _as_int(_need(node, "tile_rows", where), f"{where}.tile_rows"),
        "tile_cols": _as_int(_need(node, "tile_cols", where), f"{where}.tile_cols"),
        "overlap": _as_int(node.get("overlap", 2), f"{where}.overlap"),
        "boundary_row": node.get("boundary_row", "clamp"),
        "boundary_col": node.get("boundary_col", "periodic"),
        "hyper": _normalize_hyper(_need(node, "hyper", where), f"{where}.hyper"),
    }
    for key in ("boundary_row", "boundary_col"):
        if out[key] not in ("clamp", "periodic"):
            raise ConfigError(f"{where}.{key} must be clamp|periodic")
    return out


def _normalize_component(node, where: str) -> dict:
    node = _require_mapping(node, where)
    ctype = _need(node, "type", where)
    if ctype not in _COMPONENT_FIELDS:
        raise ConfigError(
            f"{where}.type must be one of {sorted(_COMPONENT_FIELDS)}, got {ctype!r}"
        )
    required, defaults = _COMPONENT_FIELDS[ctype]
    _check_keys(node, ("type",) + required + tuple(defaults), where)
    out = {"type": ctype}
    for key in required:
        out[key] = _need(node, key, where)
    for key, default in defaults.items():
        out[key] = node.get(key, default)
    return out


def _normalize_synth(node, where: str) -> dict:
    node = _require_mapping(node, where)
    _check_keys(
        node,
        ("grid_rows", "grid_cols", "n_time", "seed", "mask_rects", "components", "dt"),
        where,
    )
    comps = _need(node, "components", where)
    if not isinstance(comps, list) or not comps:
        raise ConfigError(f"{where}.components must be a nonempty list")
    rects = node.get("mask_rects", [])
    if not isinstance(rects, list):
        raise ConfigError(f"{where}.mask_rects must be a list of [r0, c0, r1, c1]")
    for rect in rects:
        if not (isinstance(rect, list) and len(rect) == 4):
            raise ConfigError(f"{where}.mask_rects entries must be [r0, c0, r1, c1]")
    return {
        "grid_rows": _as_int(_need(node, "grid_rows", where), f"{where}.grid_rows"),
        "grid_cols": _as_int(_need(node, "grid_cols", where), f"{where}.grid_cols"),
        "n_time": _as_int(_need(node, "n_time", where), f"{where}.n_time"),
        "seed": _as_int(node["seed"], f"{where}.seed") if "seed" in node else None,
        "dt": _as_number(node.get("dt", 1.0), f"{where}.dt"),
        "mask_rects": [[_as_int(v, f"{where}.mask_rects") for v in rect] for rect in rects],
        "components": [
            _normalize_component(c, f"{where}.components[{i}]")
            for i, c in enumerate(comps)
        ],
    }


def _normalize_sweep(node, n_layers: int, where: str) -> dict:
    node = _require_mapping(node, where)
    _check_keys(node, ("layers", "horizons", "seeds_per_config"), where)
    layers = _need(node, "layers", where)
    if not isinstance(layers, list) or len(layers) != n_layers:
        raise ConfigError(f"{where}.layers must list one grid per model layer")
    grids = []
    for i, grid in enumerate(layers):
        grid = _require_mapping(grid, f"{where}.layers[{i}]")
        _check_keys(grid, ("g", "noise", "g_in", "g_l", "tau"), f"{where}.layers[{i}]")
        out = {}
        for key in ("g", "noise", "g_in", "g_l", "tau"):
            vals = _need(grid, key, f"{where}.layers[{i}]")
            if not isinstance(vals, list) or not vals:
                raise ConfigError(f"{where}.layers[{i}].{key} must be a nonempty list")
            out[key] = [_as_number(v, f"{where}.layers[{i}].{key}") for v in vals]
        grids.append(out)
    horizons = node.get("horizons", [1, 5, 10, 50])
    if not isinstance(horizons, list) or not horizons:
        raise ConfigError(f"{where}.horizons must be a nonempty list")
    return {
        "layers": grids,
        "horizons": [_as_int(t, f"{where}.horizons") for t in horizons],
        "seeds_per_config": _as_int(
            node.get("seeds_per_config", 2), f"{where}.seeds_per_config"
        ),
    }


def normalize_config(raw: dict) -> dict:
    """Validate a parsed config and fill defaults; returns the full form."""
    _check_keys(
        raw,
        ("seed", "data", "model", "training", "forecast", "eval", "sweep", "output"),
        "config",
    )
    out = {"seed": _as_int(_need(raw, "seed", "config"), "config.seed")}

    data = _require_mapping(_need(raw, "data", "config"), "config.data")
    _check_keys(data, ("path", "synth"), "config.data")
    if ("path" in data) == ("synth" in data):
        raise ConfigError("config.data needs exactly one of path | synth")
    if "path" in data:
        if not isinstance(data["path"], str):
            raise ConfigError("config.data.path must be a string")
        out["data"] = {"path": data["path"]}
    else:
        out["data"] = {"synth": _normalize_synth(data["synth"], "config.data.synth")}

    model = _require_mapping(_need(raw, "model", "config"), "config.model")
    _check_keys(
        model,
        ("n_layers", "refine_factors", "layers", "parent_signal", "parent_timing"),
        "config.model",
    )
    layers = _need(model, "layers", "config.model")
    if not isinstance(layers, list) or not layers:
        raise ConfigError("config.model.layers must be a nonempty list (coarse to fine)")
    n_layers = len(layers)
    if "n_layers" in model and _as_int(model["n_layers"], "config.model.n_layers") != n_layers:
        raise ConfigError(
            f"config.model.n_layers = {model['n_layers']} but {n_layers} layers are listed"
        )
    factors = model.get("refine_factors", [])
    if not isinstance(factors, list):
        raise ConfigError("config.model.refine_factors must be a list")
    if len(factors) != n_layers - 1:
        raise ConfigError(
            f"config.model.refine_factors needs {n_layers - 1} entries for "
            f"{n_layers} layers"
        )
    parent_signal = model.get("parent_signal", "truth")
    parent_timing = model.get("parent_timing", "same_step")
    if parent_signal not in PARENT_SIGNALS:
        raise ConfigError(f"config.model.parent_signal must be one of {PARENT_SIGNALS}")
    if parent_timing not in PARENT_TIMINGS:
        raise ConfigError(f"config.model.parent_timing must be one of {PARENT_TIMINGS}")
    out["model"] = {
        "n_layers": n_layers,
        "refine_factors": [_as_int(f, "config.model.refine_factors") for f in factors],
        "layers": [
            _normalize_layer(lc, f"config.model.layers[{i}]")
            for i, lc in enumerate(layers)
        ],
        "parent_signal": parent_signal,
        "parent_timing": parent_timing,
    }

    training = _require_mapping(raw.get("training", {}), "config.training")
    _check_keys(training, ("train_frames",), "config.training")
    out["training"] = {
        "train_frames": _as_int(
            _need(training, "train_frames", "config.training"),
            "config.training.train_frames",
        )
    }

    forecast = _require_mapping(raw.get("forecast", {}), "config.forecast")
    _check_keys(forecast, ("warmup_frames", "horizon"), "config.forecast")
    out["forecast"] = {
        "warmup_frames": _as_int(
            _need(forecast, "warmup_frames", "config.forecast"),
            "config.forecast.warmup_frames",
        ),
        "horizon": _as_int(
            _need(forecast, "horizon", "config.forecast"), "config.forecast.horizon"
        ),
    }

    ev = _require_mapping(raw.get("eval", {}), "config.eval")
    _check_keys(ev, ("horizons",), "config.eval")
    horizons = ev.get("horizons", [1, 5, 10, 50])
    if not isinstance(horizons, list) or not horizons:
        raise ConfigError("config.eval.horizons must be a nonempty list")
    out["eval"] = {"horizons": [_as_int(t, "config.eval.horizons") for t in horizons]}

    if "sweep" in raw:
        out["sweep"] = _normalize_sweep(raw["sweep"], n_layers, "config.sweep")

    output = _require_mapping(raw.get("output", {}), "config.output")
    _check_keys(output, ("directory",), "config.output")
    directory = output.get("directory", "out")
    if not isinstance(directory, str):
        raise ConfigError("config.output.directory must be a string")
    out["output"] = {"directory": directory}
    return out


def canonical_text(norm: dict) -> str:
    """Canonical JSON form used for hashing and checkpoint provenance."""
    return json.dumps(norm, sort_keys=True, separators=(",", ":"))


def config_hash(norm: dict) -> str:
    return hashlib.sha256(canonical_text(norm).encode()).hexdigest()


def synth_spec(norm: dict) -> SynthSpec:
    """SynthSpec from a normalized config (requires data.synth)."""
    if "synth" not in norm["data"]:
        raise ConfigError("config.data.synth is required for generation")
    node = norm["data"]["synth"]
    comps = []
    for c in node["components"]:
        kind = c["type"]
        if kind == "global_oscillation":
            comps.append(
                GlobalOscillation(
                    amplitude=c["amplitude"],
                    period=c["period"],
                    phase_gradient=c["phase_gradient"],
                )
            )
        elif kind == "traveling_wave":
            comps.append(
                TravelingWave(
                    amplitude=c["amplitude"],
                    wavelength=c["wavelength"],
                    speed=c["speed"],
                    axis=c["axis"],
                )
            )
        else:
            comps.append(
                LocalChaos(
                    amplitude=c["amplitude"], mu=c["mu"], transient=c["transient"]
                )
            )
    seed = node["seed"] if node["seed"] is not None else norm["seed"]
    return SynthSpec(
        grid_rows=node["grid_rows"],
        grid_cols=node["grid_cols"],
        n_time=node["n_time"],
        components=tuple(comps),
        seed=seed,
        mask_rects=tuple(tuple(r) for r in node["mask_rects"]),
        dt=node["dt"],
    ).validate()


def hierarchy_config(norm: dict) -> HierarchyConfig:
    model = norm["model"]
    return HierarchyConfig(
        layer_configs=tuple(
            LayerConfig(
                tile_rows=lc["tile_rows"],
                tile_cols=lc["tile_cols"],
                overlap=lc["overlap"],
                boundary_row=lc["boundary_row"],
                boundary_col=lc["boundary_col"],
                hyper=ReservoirHyperparams(**lc["hyper"]),
            )
            for lc in model["layers"]
        ),
        refine_factors=tuple(model["refine_factors"]),
        parent_signal=model["parent_signal"],
        parent_timing=model["parent_timing"],
    ).validate()


def forecast_protocol(norm: dict) -> ForecastProtocol:
    return ForecastProtocol(
        train_frames=norm["training"]["train_frames"],
        warmup_frames=norm["forecast"]["warmup_frames"],
        horizon=norm["forecast"]["horizon"],
    )


def sweep_spec(norm: dict) -> SweepSpec:
    if "sweep" not in norm:
        raise ConfigError("config has no sweep section")
    node = norm["sweep"]
    grids = tuple(
        {
            "g": tuple(g["g"]),
            "noise": tuple(g["noise"]),
            "g_in": tuple(g["g_in"]),
            "g_l": tuple(g["g_l"]),
            "tau": tuple(g["tau"]),
        }
        for g in node["layers"]
    )
    return SweepSpec(
        layer_grids=grids,
        horizons=tuple(node["horizons"]),
        seeds_per_config=node["seeds_per_config"],
    )
