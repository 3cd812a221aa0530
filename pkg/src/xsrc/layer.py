"""One resolution level: a tiled collection of reservoirs.

Each active tile owns a reservoir whose local input is the tile's buffered
window and whose optional parent features are coarse-layer cells routed down
from the level above, excluding parent cells whose footprint lies entirely
inside the tile's own central region (no redundant self-information).

Forecast stepping is synchronous: every tile reads the same pair of frames,
so the result is independent of tile evaluation order and worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import kernels, rng
from .errors import ConfigError, UntrainedError
from .field import GridSeries, Tiling, extract_tile_input, make_tiling, scatter_tile_outputs
from .reservoir import (
    Reservoir,
    ReservoirHyperparams,
    effective_beta,
    init_reservoir,
    train_readout,
)


@dataclass(frozen=True)
class ParentRoute:
    """Coarse-layer cells fed to one child tile as extra input features."""

    parent_tile_index: int
    parent_cell_indices: np.ndarray  # flat indices into the parent grid

    def __len__(self):
        return self.parent_cell_indices.size


@dataclass
class Layer:
    level: int  # 1 = coarsest
    grid_rows: int
    grid_cols: int
    tiling: Tiling
    reservoirs: dict  # active tile index -> Reservoir
    parent_routes: dict = None  # active tile index -> ParentRoute; None at level 1
    refine_factor: int = None  # parent grid * factor = this grid; None at level 1

    @property
    def n_reservoirs(self) -> int:
        return len(self.reservoirs)

    @property
    def trained(self) -> bool:
        return all(r.trained for r in self.reservoirs.values())

    @property
    def has_parent(self) -> bool:
        return self.parent_routes is not None

    def active_indices(self) -> list:
        return sorted(self.reservoirs)

    def zero_states(self) -> dict:
        return {i: r.zero_state() for i, r in self.reservoirs.items()}


def _footprint_contained(parent_cell: int, parent_cols: int, factor: int,
                         r0: int, c0: int, tile_rows: int, tile_cols: int) -> bool:
    """True when the parent cell's factor x factor child block lies entirely
    inside the child tile's central rectangle."""
    pr, pc = divmod(parent_cell, parent_cols)
    fr0, fc0 = pr * factor, pc * factor
    return (
        fr0 >= r0
        and fr0 + factor <= r0 + tile_rows
        and fc0 >= c0
        and fc0 + factor <= c0 + tile_cols
    )


def _build_parent_routes(tiling: Tiling, parent_layer: Layer, factor: int) -> dict:
    parent_tiling = parent_layer.tiling
    owner_tile, _ = parent_tiling.owner_maps()
    routes = {}
    for tile in tiling.tiles:
        if not tile.active:
            continue
        rows = tile.center_cells // tiling.grid_cols
        cols = tile.center_cells % tiling.grid_cols
        parent_cells = np.unique((rows // factor) * parent_tiling.grid_cols + (cols // factor))
        owners = np.unique(owner_tile[parent_cells])
        if owners.size != 1 or owners[0] < 0:
            raise ConfigError(
                f"tile {tile.tile_index} at level grid "
                f"{tiling.grid_rows}x{tiling.grid_cols} does not sit inside a "
                f"single parent tile (owners {owners.tolist()})"
            )
        parent_index = int(owners[0])
        parent_center = parent_tiling.tiles[parent_index].center_cells
        keep = [
            int(c)
            for c in parent_center
            if not _footprint_contained(
                int(c), parent_tiling.grid_cols, factor,
                tile.row0, tile.col0, tiling.tile_rows, tiling.tile_cols,
            )
        ]
        routes[tile.tile_index] = ParentRoute(
            parent_tile_index=parent_index,
            parent_cell_indices=np.asarray(keep, dtype=np.int64),
        )
    return routes


def build_layer(level: int, grid_rows: int, grid_cols: int, tile_rows: int,
                tile_cols: int, overlap: int, boundary_row: str, boundary_col: str,
                hyper: ReservoirHyperparams, master_seed: int, mask=None,
                parent_layer: Layer = None, refine_factor: int = None) -> Layer:
    """Construct the tiling, parent routes, and seeded reservoirs of one level.

    Reservoir seeds come from the stream (master_seed, "layer", level, "tile",
    tile_index), so the layer is reproducible independent of build order.
    """
    tiling = make_tiling(
        grid_rows, grid_cols, tile_rows, tile_cols, overlap,
        boundary_row, boundary_col, mask,
    )
    routes = None
    if parent_layer is not None:
        if refine_factor is None or refine_factor < 1:
            raise ConfigError("refine_factor >= 1 required when a parent layer is given")
        if (
            parent_layer.grid_rows * refine_factor != grid_rows
            or parent_layer.grid_cols * refine_factor != grid_cols
        ):
            raise ConfigError(
                f"parent grid {parent_layer.grid_rows}x{parent_layer.grid_cols} "
                f"x factor {refine_factor} != this grid {grid_rows}x{grid_cols}"
            )
        routes = _build_parent_routes(tiling, parent_layer, refine_factor)
    reservoirs = {}
    for tile in tiling.tiles:
        if not tile.active:
            continue
        d_in_parent = len(routes[tile.tile_index]) if routes is not None else 0
        reservoirs[tile.tile_index] = init_reservoir(
            hyper,
            d_in_local=tile.input_cells.size,
            d_in_parent=d_in_parent,
            d_out=tile.center_cells.size,
            seed=rng.derive_seed(master_seed, "layer", level, "tile", tile.tile_index),
        )
    return Layer(
        level=level,
        grid_rows=grid_rows,
        grid_cols=grid_cols,
        tiling=tiling,
        reservoirs=reservoirs,
        parent_routes=routes,
        refine_factor=refine_factor if parent_layer is not None else None,
    )


def _route_for(layer: Layer, tile_index: int):
    if layer.parent_routes is None:
        return None
    return layer.parent_routes[tile_index]


def assemble_input(layer: Layer, tile_index: int, own_frame: np.ndarray,
                   parent_frame: np.ndarray = None) -> np.ndarray:
    """[local buffered window ; routed parent cells], in fixed order."""
    local = extract_tile_input(own_frame, layer.tiling, tile_index)
    route = _route_for(layer, tile_index)
    if route is None or len(route) == 0:
        return local
    if parent_frame is None:
        raise ConfigError(f"tile {tile_index} has a parent route but no parent frame")
    return np.concatenate([local, np.asarray(parent_frame).reshape(-1)[route.parent_cell_indices]])


def assemble_input_series(layer: Layer, tile_index: int, own_frames: np.ndarray,
                          parent_frames: np.ndarray = None) -> np.ndarray:
    """Vectorized assemble_input over a whole (T, rows, cols) stack."""
    tile = layer.tiling.tiles[tile_index]
    if not tile.active:
        raise ConfigError(f"tile {tile_index} is inactive")
    T = own_frames.shape[0]
    local = own_frames.reshape(T, -1)[:, tile.input_cells]
    route = _route_for(layer, tile_index)
    if route is None or len(route) == 0:
        return local
    if parent_frames is None:
        raise ConfigError(f"tile {tile_index} has a parent route but no parent frames")
    parent = parent_frames.reshape(T, -1)[:, route.parent_cell_indices]
    return np.concatenate([local, parent], axis=1)


def _check_parent_series(layer: Layer, series: GridSeries, parent_series):
    if series.n_rows != layer.grid_rows or series.n_cols != layer.grid_cols:
        raise ConfigError(
            f"series grid {series.n_rows}x{series.n_cols} does not match layer "
            f"{layer.grid_rows}x{layer.grid_cols}"
        )
    if layer.has_parent:
        if parent_series is None:
            raise ConfigError("layer has parent routes; parent_series is required")
        if parent_series.n_time != series.n_time:
            raise ConfigError("series and parent_series must be time-aligned")


def _train_tile(layer: Layer, tile_index: int, series: GridSeries,
                parent_series: GridSeries):
    res = layer.reservoirs[tile_index]
    hyper = res.hyper
    own = series.values
    parent = parent_series.values if parent_series is not None else None
    # inputs at t = 0 .. T-2; state after consuming u(t) is fitted to u(t+1)
    U = assemble_input_series(
        layer, tile_index, own[:-1], parent[:-1] if parent is not None else None
    )
    noise_rng = rng.stream(res.seed, "noise") if hyper.noise_std > 0 else None
    if noise_rng is not None:
        U = U + noise_rng.normal(0.0, hyper.noise_std, U.shape)
    proj = U @ res.W_in.T
    states = kernels.drive(res.W, proj, res.zero_state(), res.alpha)
    S = states[hyper.washout :]
    tile = layer.tiling.tiles[tile_index]
    V = series.frames_flat()[hyper.washout + 1 :, tile.center_cells]
    res.W_out = train_readout(S.T, V.T, effective_beta(hyper, S))


def train_layer(layer: Layer, series: GridSeries, parent_series: GridSeries = None,
                n_jobs: int = 1) -> Layer:
    """Fit every tile's readout by teacher forcing (one-step-ahead targets).

    parent_series carries the coarse frames seen as parent features, aligned
    in time with ``series``. Tiles are independent; n_jobs > 1 trains them in
    a thread pool with identical results.
    """
    _check_parent_series(layer, series, parent_series)
    washout = max(r.hyper.washout for r in layer.reservoirs.values())
    if series.n_time < washout + 2:
        raise ConfigError(
            f"series length {series.n_time} is shorter than washout + 2 = {washout + 2}"
        )
    indices = layer.active_indices()
    if n_jobs > 1 and len(indices) > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            futures = [
                pool.submit(_train_tile, layer, i, series, parent_series)
                for i in indices
            ]
            for f in futures:
                f.result()
    else:
        for i in indices:
            _train_tile(layer, i, series, parent_series)
    return layer


def sync_layer(layer: Layer, own_frames: np.ndarray, parent_frames: np.ndarray = None,
               states: dict = None) -> dict:
    """Teacher-force through ground-truth frames; returns per-tile states
    after consuming the final frame. Noise-free."""
    out = {}
    for i in layer.active_indices():
        res = layer.reservoirs[i]
        U = assemble_input_series(layer, i, own_frames, parent_frames)
        r0 = states[i] if states is not None else res.zero_state()
        trajectory = kernels.drive(res.W, U @ res.W_in.T, r0, res.alpha)
        out[i] = trajectory[-1]
    return out


def layer_forecast_step(layer: Layer, states: dict, own_frame: np.ndarray,
                        parent_frame: np.ndarray = None):
    """Advance every tile synchronously by one closed-loop step.

    All tiles read the same (own_frame, parent_frame); outputs are scattered
    into the next frame. Returns (next_frame, next_states, activity) where
    activity = (max |pre-activation|, max |state|) over tiles this step.
    """
    if not layer.trained:
        raise UntrainedError(f"layer {layer.level} has untrained reservoirs")
    next_states = {}
    outputs = {}
    pre_max = 0.0
    state_max = 0.0
    for i in layer.active_indices():
        res = layer.reservoirs[i]
        u = assemble_input(layer, i, own_frame, parent_frame)
        r_next, pre = kernels.step(res.W, res.W_in, u, states[i], res.alpha)
        next_states[i] = r_next
        outputs[i] = res.W_out @ r_next
        pre_max = max(pre_max, pre)
        state_max = max(state_max, float(np.max(np.abs(r_next))))
    next_frame = scatter_tile_outputs(outputs, layer.tiling)
    return next_frame, next_states, (pre_max, state_max)


def predict_open_loop(layer: Layer, series: GridSeries,
                      parent_series: GridSeries = None) -> GridSeries:
    """Teacher-forced one-step predictions over a window.

    Frame t (t >= 1) is the model's prediction of series frame t given truth
    up to t-1; frame 0 is copied from the truth. Used as the parent signal in
    prediction-mode child training.
    """
    _check_parent_series(layer, series, parent_series)
    if not layer.trained:
        raise UntrainedError(f"layer {layer.level} is untrained")
    T = series.n_time
    out = np.zeros_like(series.values)
    out[0] = series.values[0]
    per_tile = {}
    for i in layer.active_indices():
        res = layer.reservoirs[i]
        U = assemble_input_series(
            layer, i, series.values[:-1],
            parent_series.values[:-1] if parent_series is not None else None,
        )
        states = kernels.drive(res.W, U @ res.W_in.T, res.zero_state(), res.alpha)
        per_tile[i] = states @ res.W_out.T  # (T-1, d_out), row t predicts frame t+1
    flat = out.reshape(T, -1)
    for i, preds in per_tile.items():
        flat[1:, layer.tiling.tiles[i].center_cells] = preds
    return series.with_values(out)
