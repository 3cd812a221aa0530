"""Experiment protocols: hyperparameter grid search, depth comparison, and
the slow-mode (PCA removal) ablation, all at desk scale.

Every protocol derives its per-run seeds from a master seed through named
streams, runs train -> closed-loop forecast -> pooled RMSE, and returns plain
tables/curves; nothing here depends on scheduling or worker count.
"""

from __future__ import annotations

import itertools
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import rng
from .analysis import mean_abs_autocorr, remove_top_pcs, rmse_upto
from .errors import ConfigError
from .field import GridSeries, coarse_grain
from .hierarchy import HierarchyConfig, HierarchyModel, ForecastResult, forecast, train_hierarchy

SWEEP_COLUMNS = ("layer", "g", "noise", "g_in", "g_l", "tau", "seed", "T", "rmse", "wall_time_s")


@dataclass(frozen=True)
class SweepSpec:
    """Per-layer grids (linear in g and noise, log-spaced lists for g_in, g_l,
    tau), the scoring horizons, and the number of seeds per configuration."""

    layer_grids: tuple  # one dict per layer: {"g": [...], "noise": [...], ...}
    horizons: tuple = (1, 5, 10, 50)
    seeds_per_config: int = 2

    def validate(self, n_layers: int):
        if len(self.layer_grids) != n_layers:
            raise ConfigError(
                f"sweep defines {len(self.layer_grids)} layer grids for a "
                f"{n_layers}-layer model"
            )
        for k, grid in enumerate(self.layer_grids):
            for key in ("g", "noise", "g_in", "g_l", "tau"):
                vals = grid.get(key, ())
                if not len(vals):
                    raise ConfigError(f"layer {k + 1} sweep grid {key!r} is empty")
                if key in ("g_in", "g_l", "tau") and any(v <= 0 for v in vals):
                    raise ConfigError(
                        f"log-spaced grid {key!r} must be strictly positive"
                    )
        if not self.horizons or any(t < 1 for t in self.horizons):
            raise ConfigError("horizons must be >= 1")
        if self.seeds_per_config < 1:
            raise ConfigError("seeds_per_config must be >= 1")
        return self


@dataclass(frozen=True)
class ForecastProtocol:
    """How a trial slices its data: train on [0, train_frames), warm up on the
    train tail, forecast the following ``horizon`` frames."""

    train_frames: int
    warmup_frames: int
    horizon: int

    def validate(self, n_time: int):
        if self.warmup_frames < 1 or self.train_frames <= self.warmup_frames:
            raise ConfigError("need train_frames > warmup_frames >= 1")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.train_frames + self.horizon > n_time:
            raise ConfigError(
                f"train_frames {self.train_frames} + horizon {self.horizon} "
                f"exceeds series length {n_time}"
            )
        return self


def run_trial(cfg: HierarchyConfig, data: GridSeries, protocol: ForecastProtocol,
              seed: int, n_jobs: int = 1, record_activity: bool = False):
    """Train on the protocol's train window and forecast the validation
    window. Returns (model, ForecastResult, finest truth series)."""
    protocol.validate(data.n_time)
    train = data.slice_time(0, protocol.train_frames)
    model = train_hierarchy(cfg, train, seed, n_jobs=n_jobs)
    warmup = data.slice_time(
        protocol.train_frames - protocol.warmup_frames, protocol.train_frames
    )
    result = forecast(model, warmup, protocol.horizon, record_activity=record_activity)
    truth = data.slice_time(
        protocol.train_frames, protocol.train_frames + protocol.horizon
    )
    return model, result, truth


def depth_config(cfg: HierarchyConfig, depth: int) -> HierarchyConfig:
    """The sub-model keeping the finest ``depth`` layers of a chain."""
    if not (1 <= depth <= cfg.n_layers):
        raise ConfigError(f"depth {depth} outside 1..{cfg.n_layers}")
    return replace(
        cfg,
        layer_configs=cfg.layer_configs[cfg.n_layers - depth :],
        refine_factors=cfg.refine_factors[cfg.n_layers - depth :],
    )


def _coarse_prefix_config(cfg: HierarchyConfig, k: int) -> HierarchyConfig:
    """The sub-model of the coarsest k+1 layers (used for top-down tuning)."""
    return replace(
        cfg,
        layer_configs=cfg.layer_configs[: k + 1],
        refine_factors=cfg.refine_factors[:k],
    )


@dataclass
class ErrorCurve:
    """RMSE_{t<=T} per horizon with run statistics over seeds."""

    horizons: tuple
    per_run: np.ndarray  # (runs, len(horizons))

    @property
    def mean(self) -> np.ndarray:
        return self.per_run.mean(axis=0)

    @property
    def sem(self) -> np.ndarray:
        n = self.per_run.shape[0]
        if n < 2:
            return np.zeros(self.per_run.shape[1])
        return self.per_run.std(axis=0, ddof=1) / math.sqrt(n)

    @property
    def n_runs(self) -> int:
        return self.per_run.shape[0]


def _curve_for_result(result: ForecastResult, truth: GridSeries, horizons) -> np.ndarray:
    pred = result.finest_series
    return np.array([rmse_upto(pred, truth, T) for T in horizons])


def compare_depths(cfg: HierarchyConfig, data: GridSeries, depths, runs: int,
                   protocol: ForecastProtocol, curve_horizons, master_seed: int,
                   n_jobs: int = 1):
    """Train and forecast each depth with shared per-run seeds.

    Returns (curves, ratios): curves maps depth -> ErrorCurve at the finest
    resolution; ratios maps depth -> ErrorCurve of per-run RMSE ratios to the
    deepest requested model.
    """
    depths = sorted(set(int(d) for d in depths))
    if runs < 2:
        raise ConfigError(f"compare_depths needs runs >= 2, got {runs}")
    if any(d < 1 or d > cfg.n_layers for d in depths):
        raise ConfigError(f"depths {depths} outside 1..{cfg.n_layers}")
    seeds = [rng.derive_seed(master_seed, "depth-run", r) for r in range(runs)]
    curves = {}
    for d in depths:
        sub = depth_config(cfg, d)
        per_run = np.empty((runs, len(curve_horizons)))
        for r, seed in enumerate(seeds):
            _, result, truth = run_trial(sub, data, protocol, seed, n_jobs=n_jobs)
            per_run[r] = _curve_for_result(result, truth, curve_horizons)
        curves[d] = ErrorCurve(tuple(curve_horizons), per_run)
    deepest = max(depths)
    ratios = {
        d: ErrorCurve(
            tuple(curve_horizons), curves[d].per_run / curves[deepest].per_run
        )
        for d in depths
    }
    return curves, ratios


@dataclass
class PcaAblationResult:
    P_values: tuple
    ratio_per_run: np.ndarray  # (len(P), runs) shallow/deep RMSE at the fixed horizon
    autocorr: np.ndarray  # (len(P), max_lag + 1)

    @property
    def ratio_mean(self) -> np.ndarray:
        return self.ratio_per_run.mean(axis=1)

    @property
    def ratio_sem(self) -> np.ndarray:
        n = self.ratio_per_run.shape[1]
        if n < 2:
            return np.zeros(self.ratio_per_run.shape[0])
        return self.ratio_per_run.std(axis=1, ddof=1) / math.sqrt(n)


def pca_ablation_experiment(cfg: HierarchyConfig, data: GridSeries, P_list,
                            horizon_T: int, runs: int, protocol: ForecastProtocol,
                            master_seed: int, shallow_depth: int = 1,
                            deep_depth: int = None, max_lag: int = 200,
                            n_jobs: int = 1) -> PcaAblationResult:
    """Remove the top P principal components, retrain both depth variants with
    the same seeds, and track the shallow/deep RMSE ratio at a fixed horizon
    alongside the data's mean absolute autocorrelation."""
    deep_depth = cfg.n_layers if deep_depth is None else deep_depth
    if horizon_T > protocol.horizon:
        raise ConfigError("horizon_T exceeds the forecast horizon")
    total_var = float(np.var(data.values[:, data.mask], axis=0).sum())
    seeds = [rng.derive_seed(master_seed, "depth-run", r) for r in range(runs)]
    ratios = np.empty((len(P_list), runs))
    autocorr = np.empty((len(P_list), max_lag + 1))
    for pi, P in enumerate(P_list):
        reduced = remove_top_pcs(data, P)
        resid_var = float(np.var(reduced.values[:, reduced.mask], axis=0).sum())
        if total_var > 0 and resid_var < 1e-10 * total_var:
            raise ConfigError(
                f"removing P = {P} components leaves a degenerate "
                f"(near-zero-variance) residual"
            )
        autocorr[pi] = mean_abs_autocorr(reduced, max_lag)
        for r, seed in enumerate(seeds):
            vals = {}
            for depth in (shallow_depth, deep_depth):
                sub = depth_config(cfg, depth)
                _, result, truth = run_trial(sub, reduced, protocol, seed, n_jobs=n_jobs)
                vals[depth] = rmse_upto(result.finest_series, truth, horizon_T)
            ratios[pi, r] = vals[shallow_depth] / vals[deep_depth]
    return PcaAblationResult(
        P_values=tuple(int(p) for p in P_list),
        ratio_per_run=ratios,
        autocorr=autocorr,
    )


def score_normalized_rank(per_config: np.ndarray) -> np.ndarray:
    """Multi-horizon selection score: mean over horizons of RMSE divided by
    the per-horizon minimum over configs. Scale-invariant (multiplying every
    RMSE by a constant changes nothing); configs with any non-finite RMSE
    score infinity."""
    per_config = np.asarray(per_config, dtype=np.float64)
    finite = np.isfinite(per_config).all(axis=1)
    if not finite.any():
        return np.full(per_config.shape[0], np.inf)
    col_min = np.min(np.where(finite[:, None], per_config, np.inf), axis=0)
    col_min = np.where(col_min > 0, col_min, 1.0)
    return np.where(finite, (per_config / col_min).mean(axis=1), np.inf)


def _apply_combo(hyper, combo):
    g, noise, g_in, g_l, tau = combo
    return hyper.with_updates(g=g, noise_std=noise, g_in=g_in, g_l=g_l, tau=tau)


def grid_search(sweep: SweepSpec, cfg: HierarchyConfig, train: GridSeries,
                validate: GridSeries, protocol_warmup: int, master_seed: int,
                n_jobs: int = 1):
    """Tune layers sequentially top-down over the sweep grids.

    While layer k is tuned, coarser layers are frozen at their chosen best and
    the candidate model (coarsest k+1 layers) is scored at layer k's own
    resolution on the validation window: score = mean over horizons T of
    RMSE_T(config) / min_config RMSE_T, ties broken by smaller g then smaller
    noise then grid order. Configs yielding non-finite forecasts score
    infinity (logged, not fatal). The root layer has no parent features, so
    its g_l grid is collapsed to the configured value.

    Returns (best_hypers, rows): one tuned ReservoirHyperparams per layer and
    the full results table as tuples matching SWEEP_COLUMNS.
    """
    sweep.validate(cfg.n_layers)
    if train.n_time <= protocol_warmup:
        raise ConfigError("train window shorter than the warmup")
    horizon = validate.n_time
    rows = []
    best_hypers = []
    chosen_cfg = cfg
    for k in range(cfg.n_layers):
        grid = sweep.layer_grids[k]
        base_hyper = cfg.layer_configs[k].hyper
        g_l_values = tuple(grid["g_l"]) if k > 0 else (base_hyper.g_l,)
        combos = list(
            itertools.product(grid["g"], grid["noise"], grid["g_in"], g_l_values, grid["tau"])
        )
        factor_rest = int(np.prod(cfg.refine_factors[k:])) if k < cfg.n_layers - 1 else 1
        train_k = coarse_grain(train, factor_rest)
        validate_k = coarse_grain(validate, factor_rest)
        sub_cfg = _coarse_prefix_config(chosen_cfg, k)
        seeds = [
            rng.derive_seed(master_seed, "sweep", k, s)
            for s in range(sweep.seeds_per_config)
        ]

        def job(ci_si):
            ci, si = ci_si
            combo = combos[ci]
            lc = sub_cfg.layer_configs[k]
            candidate = replace(
                sub_cfg,
                layer_configs=sub_cfg.layer_configs[:k]
                + (replace(lc, hyper=_apply_combo(lc.hyper, combo)),),
            )
            start = time.perf_counter()
            model = train_hierarchy(candidate, train_k, seeds[si], n_jobs=1)
            warmup = train_k.slice_time(train_k.n_time - protocol_warmup, train_k.n_time)
            result = forecast(model, warmup, horizon)
            pred = result.finest_series
            wall = time.perf_counter() - start
            vals = []
            for T in sweep.horizons:
                err = rmse_upto(pred, validate_k, T)
                vals.append(err if np.isfinite(err) else float("inf"))
            return ci, si, vals, wall

        jobs = [(ci, si) for ci in range(len(combos)) for si in range(len(seeds))]
        if n_jobs > 1:
            with ThreadPoolExecutor(max_workers=n_jobs) as pool:
                outcomes = list(pool.map(job, jobs))
        else:
            outcomes = [job(j) for j in jobs]
        outcomes.sort(key=lambda o: (o[0], o[1]))

        rmse_table = np.full((len(combos), len(seeds), len(sweep.horizons)), np.inf)
        for ci, si, vals, wall in outcomes:
            rmse_table[ci, si] = vals
            g, noise, g_in, g_l, tau = combos[ci]
            for T, err in zip(sweep.horizons, vals):
                rows.append(
                    (k + 1, g, noise, g_in, g_l, tau, seeds[si], T, err, wall)
                )
        per_config = rmse_table.mean(axis=1)  # (combos, horizons), inf-propagating
        scores = score_normalized_rank(per_config)
        if not np.isfinite(scores).any():
            raise ConfigError(
                f"every sweep configuration for layer {k + 1} produced "
                f"non-finite forecasts"
            )
        if not np.isfinite(scores).all():
            warnings.warn(
                f"layer {k + 1}: {int(np.isinf(scores).sum())} sweep configs scored "
                f"infinity (non-finite forecasts)",
                stacklevel=2,
            )
        order = sorted(
            range(len(combos)),
            key=lambda ci: (scores[ci], combos[ci][0], combos[ci][1], ci),
        )
        winner = combos[order[0]]
        tuned = _apply_combo(base_hyper, winner)
        best_hypers.append(tuned)
        lc = chosen_cfg.layer_configs[k]
        chosen_cfg = replace(
            chosen_cfg,
            layer_configs=chosen_cfg.layer_configs[:k]
            + (replace(lc, hyper=tuned),)
            + chosen_cfg.layer_configs[k + 1 :],
        )
    return best_hypers, rows
