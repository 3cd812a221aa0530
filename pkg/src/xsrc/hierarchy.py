"""The full cross-scale model: layer stack, top-down training, recursive
multi-layer forecasting, and checkpoint persistence.

Layers are ordered coarse to fine (level 1 = coarsest). Training proceeds
top-down with the coarse-grained ground truth as the parent signal (the
prediction-mode ablation feeds the parent's teacher-forced one-step
predictions instead). Forecasting synchronizes every layer on a ground-truth
warmup window, then runs closed-loop: within each step the coarsest layer
advances first and finer layers consume the parent prediction just computed
for that same step (set parent_timing="previous_step" for the lagged
ablation).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import (
    ChecksumError,
    ConfigError,
    CorruptHeaderError,
    UnsupportedVersionError,
    UntrainedError,
)
from .field import GridSeries, TileSpec, Tiling, coarse_grain
from .layer import (
    Layer,
    ParentRoute,
    build_layer,
    layer_forecast_step,
    predict_open_loop,
    sync_layer,
    train_layer,
)
from .reservoir import Reservoir, ReservoirHyperparams, init_reservoir

MODEL_MAGIC = b"XSRC"
MODEL_VERSION = 1

PARENT_SIGNALS = ("truth", "prediction")
PARENT_TIMINGS = ("same_step", "previous_step")


@dataclass(frozen=True)
class LayerConfig:
    """Geometry and hyperparameters of one level."""

    tile_rows: int
    tile_cols: int
    hyper: ReservoirHyperparams
    overlap: int = 2
    boundary_row: str = "clamp"
    boundary_col: str = "periodic"


@dataclass(frozen=True)
class HierarchyConfig:
    """Architecture of a model: layer count, refinement chain, per-layer
    geometry/hyper, and the training/forecast coupling conventions."""

    layer_configs: tuple
    refine_factors: tuple = ()
    parent_signal: str = "truth"
    parent_timing: str = "same_step"

    @property
    def n_layers(self) -> int:
        return len(self.layer_configs)

    def validate(self):
        if self.n_layers < 1:
            raise ConfigError("a model needs at least one layer")
        if len(self.refine_factors) != self.n_layers - 1:
            raise ConfigError(
                f"need {self.n_layers - 1} refine factors for {self.n_layers} "
                f"layers, got {len(self.refine_factors)}"
            )
        for f in self.refine_factors:
            if int(f) != f or f < 2:
                raise ConfigError(f"refine factors must be integers >= 2, got {f}")
        if self.parent_signal not in PARENT_SIGNALS:
            raise ConfigError(f"parent_signal must be one of {PARENT_SIGNALS}")
        if self.parent_timing not in PARENT_TIMINGS:
            raise ConfigError(f"parent_timing must be one of {PARENT_TIMINGS}")
        for lc in self.layer_configs:
            lc.hyper.validate()
        return self

    def layer_dims(self, finest_rows: int, finest_cols: int) -> list:
        """Grid dims per layer, coarse to fine."""
        dims = [(finest_rows, finest_cols)]
        for f in reversed(self.refine_factors):
            r, c = dims[0]
            if r % f or c % f:
                raise ConfigError(
                    f"refine factor {f} does not divide grid {r}x{c}"
                )
            dims.insert(0, (r // f, c // f))
        return dims


@dataclass
class HierarchyModel:
    layers: list  # coarse -> fine
    refine_factors: tuple
    finest_rows: int
    finest_cols: int
    master_seed: int
    parent_timing: str = "same_step"
    provenance: dict = dc_field(default_factory=dict)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def finest(self) -> Layer:
        return self.layers[-1]

    @property
    def trained(self) -> bool:
        return all(layer.trained for layer in self.layers)

    @property
    def max_washout(self) -> int:
        return max(
            r.hyper.washout for layer in self.layers for r in layer.reservoirs.values()
        )

    def layer_mask(self, k: int) -> np.ndarray:
        layer = self.layers[k]
        mask = np.zeros(layer.grid_rows * layer.grid_cols, dtype=bool)
        for tile in layer.tiling.tiles:
            mask[tile.center_cells] = True
        return mask.reshape(layer.grid_rows, layer.grid_cols)


@dataclass
class ForecastResult:
    """Per-layer closed-loop predictions for steps 1..H plus sync metadata."""

    frames: list  # per layer, (H, rows, cols) arrays, coarse -> fine
    masks: list
    warmup_frames: int
    dt: float = 1.0
    activity: list = None  # per layer, (H, 2) arrays of (preact_max, state_max)

    @property
    def horizon(self) -> int:
        return self.frames[-1].shape[0]

    def layer_series(self, k: int) -> GridSeries:
        if self.horizon == 0:
            raise ConfigError("empty forecast (horizon 0) has no series")
        return GridSeries(self.frames[k], self.masks[k], dt=self.dt)

    @property
    def finest_series(self) -> GridSeries:
        return self.layer_series(len(self.frames) - 1)


def coarse_chain(series: GridSeries, refine_factors) -> list:
    """Coarse-grained versions of ``series`` per layer, coarse to fine."""
    chain = [series]
    for f in reversed(tuple(refine_factors)):
        chain.insert(0, coarse_grain(chain[0], f))
    return chain


def build_hierarchy(cfg: HierarchyConfig, finest_rows: int, finest_cols: int,
                    master_seed: int, finest_mask=None) -> HierarchyModel:
    """Construct all layers (untrained). Layer masks follow the block-any
    coarsening of the finest mask."""
    cfg.validate()
    dims = cfg.layer_dims(finest_rows, finest_cols)
    if finest_mask is None:
        finest_mask = np.ones((finest_rows, finest_cols), dtype=bool)
    masks = [np.asarray(finest_mask, dtype=bool)]
    for f in reversed(cfg.refine_factors):
        m = masks[0]
        r, c = m.shape
        masks.insert(0, m.reshape(r // f, f, c // f, f).any(axis=(1, 3)))
    layers = []
    for k, lc in enumerate(cfg.layer_configs):
        rows, cols = dims[k]
        parent = layers[k - 1] if k > 0 else None
        factor = cfg.refine_factors[k - 1] if k > 0 else None
        layers.append(
            build_layer(
                level=k + 1,
                grid_rows=rows,
                grid_cols=cols,
                tile_rows=lc.tile_rows,
                tile_cols=lc.tile_cols,
                overlap=lc.overlap,
                boundary_row=lc.boundary_row,
                boundary_col=lc.boundary_col,
                hyper=lc.hyper,
                master_seed=master_seed,
                mask=masks[k],
                parent_layer=parent,
                refine_factor=factor,
            )
        )
    return HierarchyModel(
        layers=layers,
        refine_factors=tuple(int(f) for f in cfg.refine_factors),
        finest_rows=finest_rows,
        finest_cols=finest_cols,
        master_seed=int(master_seed),
        parent_timing=cfg.parent_timing,
    )


def train_hierarchy(cfg: HierarchyConfig, finest_series: GridSeries, master_seed: int,
                    n_jobs: int = 1, provenance: dict = None) -> HierarchyModel:
    """Coarse-grain the data into the layer chain and train top-down."""
    cfg.validate()
    model = build_hierarchy(
        cfg, finest_series.n_rows, finest_series.n_cols, master_seed,
        finest_mask=finest_series.mask,
    )
    chain = coarse_chain(finest_series, model.refine_factors)
    for k, layer in enumerate(model.layers):
        if k == 0:
            parent_series = None
        elif cfg.parent_signal == "truth":
            parent_series = chain[k - 1]
        else:
            grandparent = chain[k - 2] if k >= 2 else None
            parent_series = predict_open_loop(model.layers[k - 1], chain[k - 1], grandparent)
        train_layer(layer, chain[k], parent_series, n_jobs=n_jobs)
    model.provenance = dict(provenance or {})
    model.provenance.setdefault("master_seed", int(master_seed))
    model.provenance.setdefault("parent_signal", cfg.parent_signal)
    model.provenance.setdefault("data_fingerprint", finest_series.fingerprint())
    return model


def sync_states(model: HierarchyModel, warmup_series: GridSeries):
    """Teacher-force every layer through the warmup window.

    Returns (states, warm): per-layer state dicts after consuming the final
    warmup frame, and the coarse-grained warmup chain.
    """
    if not model.trained:
        raise UntrainedError("model has untrained layers")
    if (
        warmup_series.n_rows != model.finest_rows
        or warmup_series.n_cols != model.finest_cols
    ):
        raise ConfigError("warmup series does not match the model's finest grid")
    washout = model.max_washout
    if warmup_series.n_time < max(washout, 1):
        raise ConfigError(
            f"warmup length {warmup_series.n_time} is shorter than the model "
            f"washout {washout}"
        )
    warm = coarse_chain(warmup_series, model.refine_factors)
    states = []
    for k, layer in enumerate(model.layers):
        parent_frames = warm[k - 1].values if k > 0 else None
        states.append(sync_layer(layer, warm[k].values, parent_frames))
    return states, warm


def forecast(model: HierarchyModel, warmup_series: GridSeries, horizon: int,
             record_activity: bool = False, parent_timing: str = None) -> ForecastResult:
    """Synchronize on the warmup window, then run the closed loop for
    ``horizon`` steps. No ground truth is consumed past the warmup."""
    if horizon < 0:
        raise ConfigError(f"horizon must be >= 0, got {horizon}")
    timing = parent_timing or model.parent_timing
    if timing not in PARENT_TIMINGS:
        raise ConfigError(f"parent_timing must be one of {PARENT_TIMINGS}")
    states, warm = sync_states(model, warmup_series)

    n_layers = model.n_layers
    frames = [
        np.zeros((horizon, layer.grid_rows, layer.grid_cols))
        for layer in model.layers
    ]
    activity = [np.zeros((horizon, 2)) for _ in model.layers] if record_activity else None
    last_own = [warm[k].values[-1] for k in range(n_layers)]
    prev_parent = [warm[k - 1].values[-1] if k > 0 else None for k in range(n_layers)]
    for step_idx in range(horizon):
        current = [None] * n_layers
        for k in range(n_layers):
            if k == 0:
                parent_frame = None
            elif timing == "same_step":
                parent_frame = current[k - 1]
            else:
                parent_frame = prev_parent[k]
            next_frame, states[k], act = layer_forecast_step(
                model.layers[k], states[k], last_own[k], parent_frame
            )
            current[k] = next_frame
            frames[k][step_idx] = next_frame
            if record_activity:
                activity[k][step_idx] = act
        for k in range(n_layers):
            if k > 0:
                prev_parent[k] = current[k - 1]
            last_own[k] = current[k]
    return ForecastResult(
        frames=frames,
        masks=[model.layer_mask(k) for k in range(n_layers)],
        warmup_frames=warmup_series.n_time,
        dt=warmup_series.dt,
        activity=activity,
    )


# ---------------------------------------------------------------------------
# checkpoint container: magic, version, CRC-framed sections
# ---------------------------------------------------------------------------

_SEC_END = 0
_SEC_HEADER = 1
_SEC_GEOMETRY = 2
_SEC_RESERVOIR = 3


def _pack_section(kind: int, payload: bytes) -> bytes:
    return struct.pack("<IQ", kind, len(payload)) + payload + struct.pack(
        "<I", zlib.crc32(payload)
    )


def _iter_sections(blob: bytes, offset: int):
    n = len(blob)
    while True:
        if offset + 12 > n:
            raise CorruptHeaderError("truncated section header in model container")
        kind, length = struct.unpack_from("<IQ", blob, offset)
        offset += 12
        if offset + length + 4 > n:
            raise CorruptHeaderError("truncated section payload in model container")
        payload = blob[offset : offset + length]
        offset += length
        (crc,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        if crc != zlib.crc32(payload):
            raise ChecksumError(f"section kind {kind} failed its CRC check")
        yield kind, payload
        if kind == _SEC_END:
            return


def _hyper_to_dict(h: ReservoirHyperparams) -> dict:
    return {
        "d_r": h.d_r, "g": h.g, "p": h.p, "g_in": h.g_in, "g_l": h.g_l,
        "tau": h.tau, "dt_step": h.dt_step, "noise_std": h.noise_std,
        "beta": h.beta, "beta_mode": h.beta_mode, "washout": h.washout,
    }


def _geometry_payload(layer: Layer) -> bytes:
    doc = {
        "level": layer.level,
        "grid_rows": layer.grid_rows,
        "grid_cols": layer.grid_cols,
        "tile_rows": layer.tiling.tile_rows,
        "tile_cols": layer.tiling.tile_cols,
        "overlap": layer.tiling.overlap,
        "boundary_row": layer.tiling.boundary_row,
        "boundary_col": layer.tiling.boundary_col,
        "refine_factor": layer.refine_factor,
        "tiles": [
            {
                "tile_index": t.tile_index,
                "row0": t.row0,
                "col0": t.col0,
                "center_cells": t.center_cells.tolist(),
                "input_cells": t.input_cells.tolist(),
            }
            for t in layer.tiling.tiles
        ],
        "routes": None
        if layer.parent_routes is None
        else {
            str(i): {
                "parent_tile_index": r.parent_tile_index,
                "parent_cell_indices": r.parent_cell_indices.tolist(),
            }
            for i, r in layer.parent_routes.items()
        },
    }
    return json.dumps(doc, sort_keys=True).encode()


def _reservoir_payload(level: int, tile_index: int, res: Reservoir) -> bytes:
    meta = json.dumps(
        {
            "level": level,
            "tile_index": tile_index,
            "seed": res.seed,
            "d_in_local": res.d_in_local,
            "d_in_parent": res.d_in_parent,
            "d_out": res.d_out,
            "hyper": _hyper_to_dict(res.hyper),
        },
        sort_keys=True,
    ).encode()
    w_out = np.ascontiguousarray(res.W_out, dtype="<f8").tobytes()
    probe = np.ascontiguousarray(res.weight_probe(), dtype="<f8").tobytes()
    return struct.pack("<Q", len(meta)) + meta + w_out + probe


def save_model(model: HierarchyModel, path) -> None:
    """Write the versioned checkpoint. W and W_in are regenerated from seeds
    on load; only W_out is stored densely, plus a W probe for integrity."""
    if not model.trained:
        raise UntrainedError("refusing to save an untrained model")
    parts = [MODEL_MAGIC, struct.pack("<I", MODEL_VERSION)]
    header = {
        "n_layers": model.n_layers,
        "refine_factors": list(model.refine_factors),
        "finest_rows": model.finest_rows,
        "finest_cols": model.finest_cols,
        "master_seed": model.master_seed,
        "parent_timing": model.parent_timing,
        "provenance": model.provenance,
    }
    parts.append(_pack_section(_SEC_HEADER, json.dumps(header, sort_keys=True).encode()))
    for layer in model.layers:
        parts.append(_pack_section(_SEC_GEOMETRY, _geometry_payload(layer)))
        for i in layer.active_indices():
            parts.append(
                _pack_section(
                    _SEC_RESERVOIR,
                    _reservoir_payload(layer.level, i, layer.reservoirs[i]),
                )
            )
    parts.append(_pack_section(_SEC_END, b""))
    blob = b"".join(parts)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _layer_from_geometry(doc: dict) -> Layer:
    tiles = tuple(
        TileSpec(
            tile_index=t["tile_index"],
            row0=t["row0"],
            col0=t["col0"],
            center_cells=np.asarray(t["center_cells"], dtype=np.int64),
            input_cells=np.asarray(t["input_cells"], dtype=np.int64),
        )
        for t in doc["tiles"]
    )
    tiling = Tiling(
        grid_rows=doc["grid_rows"],
        grid_cols=doc["grid_cols"],
        tile_rows=doc["tile_rows"],
        tile_cols=doc["tile_cols"],
        overlap=doc["overlap"],
        boundary_row=doc["boundary_row"],
        boundary_col=doc["boundary_col"],
        tiles=tiles,
    )
    routes = None
    if doc["routes"] is not None:
        routes = {
            int(i): ParentRoute(
                parent_tile_index=r["parent_tile_index"],
                parent_cell_indices=np.asarray(r["parent_cell_indices"], dtype=np.int64),
            )
            for i, r in doc["routes"].items()
        }
    return Layer(
        level=doc["level"],
        grid_rows=doc["grid_rows"],
        grid_cols=doc["grid_cols"],
        tiling=tiling,
        reservoirs={},
        parent_routes=routes,
        refine_factor=doc["refine_factor"],
    )


def _restore_reservoir(payload: bytes) -> tuple:
    (meta_len,) = struct.unpack_from("<Q", payload, 0)
    meta = json.loads(payload[8 : 8 + meta_len].decode())
    hyper = ReservoirHyperparams(**meta["hyper"])
    res = init_reservoir(
        hyper, meta["d_in_local"], meta["d_in_parent"], meta["d_out"], meta["seed"]
    )
    d_r, d_out = hyper.d_r, meta["d_out"]
    offset = 8 + meta_len
    w_out_bytes = d_out * d_r * 8
    expected = offset + w_out_bytes + d_r * 8
    if len(payload) != expected:
        raise CorruptHeaderError("reservoir section has unexpected size")
    res.W_out = (
        np.frombuffer(payload, dtype="<f8", count=d_out * d_r, offset=offset)
        .reshape(d_out, d_r)
        .copy()
    )
    probe_stored = np.frombuffer(
        payload, dtype="<f8", count=d_r, offset=offset + w_out_bytes
    )
    probe_now = res.weight_probe()
    if not np.allclose(probe_now, probe_stored, rtol=1e-9, atol=1e-12):
        raise ChecksumError(
            f"regenerated weights for level {meta['level']} tile "
            f"{meta['tile_index']} do not match the stored integrity probe"
        )
    return meta["level"], meta["tile_index"], res


def load_model(path) -> HierarchyModel:
    """Read a checkpoint; load-then-forecast reproduces the saved model's
    forecasts bit-exactly on the same platform and backend."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 8 or blob[:4] != MODEL_MAGIC:
        raise CorruptHeaderError(f"{path}: not a model container")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != MODEL_VERSION:
        raise UnsupportedVersionError(
            f"{path}: container version {version} not supported "
            f"(expected {MODEL_VERSION})"
        )
    header = None
    layers = []
    for kind, payload in _iter_sections(blob, 8):
        if kind == _SEC_HEADER:
            header = json.loads(payload.decode())
        elif kind == _SEC_GEOMETRY:
            layers.append(_layer_from_geometry(json.loads(payload.decode())))
        elif kind == _SEC_RESERVOIR:
            level, tile_index, res = _restore_reservoir(payload)
            target = next((l for l in layers if l.level == level), None)
            if target is None:
                raise CorruptHeaderError(
                    f"reservoir section for unknown level {level}"
                )
            target.reservoirs[tile_index] = res
        elif kind == _SEC_END:
            break
        else:
            raise CorruptHeaderError(f"unknown section kind {kind}")
    if header is None or len(layers) != header["n_layers"]:
        raise CorruptHeaderError(f"{path}: container is missing sections")
    model = HierarchyModel(
        layers=layers,
        refine_factors=tuple(header["refine_factors"]),
        finest_rows=header["finest_rows"],
        finest_cols=header["finest_cols"],
        master_seed=header["master_seed"],
        parent_timing=header["parent_timing"],
        provenance=header["provenance"],
    )
    if any(not l.reservoirs for l in layers) or not model.trained:
        raise CorruptHeaderError(f"{path}: container has layers without reservoirs")
    return model
