"""Evaluation metrics and the small-signal linearization / modal suite.

The pooled forecast error is

    rmse_upto(T) = sqrt( (1/C) * sum_cells mean_{t<=T} (v - v_hat)^2 )

over valid cells. The modal side builds the effective connectivity of a
trained reservoir (or of a whole layer run closed-loop), W_tilde = W +
W_in_fb W_out, whose eigendecomposition gives independent modes

    z_k(t) = z_k(0) exp((lambda_k - 1) t / tau)

and output weights w_k = sum_i [W_out Z]_{ik} z_k(0) ranking each mode's
contribution to the readout signal.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NoValidCellsError, NumericalError, UntrainedError
from .field import GridSeries
from .layer import Layer
from .reservoir import Reservoir


def _check_aligned(forecast: GridSeries, truth: GridSeries, T: int):
    if forecast.values.shape != truth.values.shape:
        raise ConfigError(
            f"forecast {forecast.values.shape} and truth {truth.values.shape} differ"
        )
    if not np.array_equal(forecast.mask, truth.mask):
        raise ConfigError("forecast and truth must share the validity mask")
    if T < 1:
        raise ConfigError(f"horizon T must be >= 1, got {T}")
    if T > forecast.n_time:
        raise ConfigError(f"T = {T} exceeds series length {forecast.n_time}")


def rmse_upto(forecast: GridSeries, truth: GridSeries, T: int) -> float:
    """Total RMSE pooled over valid cells and steps 1..T."""
    _check_aligned(forecast, truth, T)
    mask = forecast.mask
    if not mask.any():
        raise NoValidCellsError("empty mask")
    diff = forecast.values[:T, mask] - truth.values[:T, mask]
    return float(np.sqrt(np.mean(diff**2, axis=0).mean()))


def rmse_map(forecast: GridSeries, truth: GridSeries, T: int) -> GridSeries:
    """Per-cell RMSE up to T as a single-frame series (masked cells invalid).

    The spatial mean of the squared map equals rmse_upto(T) squared.
    """
    _check_aligned(forecast, truth, T)
    mask = forecast.mask
    out = np.zeros((1, *mask.shape))
    diff = forecast.values[:T] - truth.values[:T]
    out[0][mask] = np.sqrt(np.mean(diff[:, mask] ** 2, axis=0))
    return GridSeries(out, mask, dt=forecast.dt, origin_lat=forecast.origin_lat,
                      origin_lon=forecast.origin_lon, cell_deg=forecast.cell_deg)


def remove_top_pcs(series: GridSeries, P: int) -> GridSeries:
    """Subtract the rank-P principal-component reconstruction of the field.

    Cells are the PCA variables, frames the samples; each valid cell's series
    is centered first and the means are added back afterwards. P = 0 is the
    identity. Applying the operation twice with the same P changes nothing
    (projection).
    """
    P = int(P)
    cells = series.valid_cells()
    if P < 0 or P >= cells.size or P >= series.n_time:
        raise ConfigError(
            f"P = {P} out of range (needs 0 <= P < min(valid cells {cells.size}, "
            f"n_time {series.n_time}))"
        )
    if P == 0:
        return series.with_values(series.values)
    X = series.frames_flat()[:, cells]
    means = X.mean(axis=0)
    Xc = X - means
    # economy SVD covers both n_time < n_cells and the opposite
    U, s, Vt = np.linalg.svd(Xc, full_matrices=False)
    recon = (U[:, :P] * s[:P]) @ Vt[:P]
    out = np.zeros_like(series.frames_flat())
    out[:, cells] = Xc - recon + means
    return series.with_values(out.reshape(series.values.shape))


def mean_abs_autocorr(series: GridSeries, max_lag: int) -> np.ndarray:
    """Mean over valid cells of |rho(tau)| for tau = 0..max_lag.

    rho is each cell's autocorrelation after centering, normalized so that
    rho(0) = 1 exactly and a pure sinusoid returns |rho| = 1 at multiples of
    its period (lag products averaged over the overlap window). Zero-variance
    cells are excluded from the average (with a warning).
    """
    if max_lag < 0 or series.n_time <= max_lag:
        raise ConfigError(
            f"max_lag must satisfy 0 <= max_lag < n_time, got {max_lag} "
            f"with n_time {series.n_time}"
        )
    X = series.frames_flat()[:, series.valid_cells()]
    Xc = X - X.mean(axis=0)
    T = Xc.shape[0]
    var = (Xc**2).sum(axis=0) / T
    keep = var > 0
    if not keep.all():
        warnings.warn(
            f"excluding {int((~keep).sum())} zero-variance cells from autocorrelation",
            stacklevel=2,
        )
    if not keep.any():
        raise NumericalError("all valid cells have zero variance")
    Xc = Xc[:, keep]
    var = var[keep]
    out = np.empty(max_lag + 1)
    for lag in range(max_lag + 1):
        num = (Xc[: T - lag] * Xc[lag:]).sum(axis=0) / (T - lag)
        out[lag] = np.mean(np.abs(num / var))
    return out


def effective_matrix(res: Reservoir, feedback_positions=None,
                     feedback_outputs=None) -> np.ndarray:
    """Effective connectivity of one reservoir run closed-loop.

    Default (no arguments) requires the identity feedback d_in == d_out with
    no parent features, giving W_tilde = W + W_in W_out. Otherwise
    ``feedback_positions`` lists the input-feature columns that receive
    feedback and ``feedback_outputs`` the W_out row feeding each one:
    W_tilde = W + W_in[:, pos] @ W_out[rows, :].
    """
    if not res.trained:
        raise UntrainedError("effective_matrix needs a trained reservoir")
    W = res.W.toarray()
    if feedback_positions is None:
        if res.d_in_parent != 0 or res.d_in_local != res.d_out:
            raise ConfigError(
                "identity feedback needs d_in_local == d_out and no parent "
                f"features (got d_in_local {res.d_in_local}, d_out {res.d_out}, "
                f"d_in_parent {res.d_in_parent}); pass an explicit feedback map"
            )
        return W + res.W_in @ res.W_out
    pos = np.asarray(feedback_positions, dtype=np.int64)
    rows = np.asarray(feedback_outputs, dtype=np.int64)
    if pos.shape != rows.shape:
        raise ConfigError("feedback_positions and feedback_outputs must align")
    return W + res.W_in[:, pos] @ res.W_out[rows, :]


def assemble_effective_layer(layer: Layer, frozen_parent: bool = False) -> np.ndarray:
    """Effective connectivity of a whole layer as one block matrix.

    The layer's closed loop concatenates tile states; block (i, j) carries
    tile i's input columns reading cells owned by tile j times the matching
    W_out rows of tile j. Valid for layers without parent routes; layers with
    routes require frozen_parent=True (parent signal pinned at zero, so
    parent columns contribute nothing).
    """
    if not layer.trained:
        raise UntrainedError("assemble_effective_layer needs a trained layer")
    if layer.has_parent and any(len(r) for r in layer.parent_routes.values()):
        if not frozen_parent:
            raise ConfigError(
                "layer has parent routes; analyze with frozen_parent=True to pin "
                "the parent signal at zero"
            )
    indices = layer.active_indices()
    owner_tile, owner_row = layer.tiling.owner_maps()
    d_r = {i: layer.reservoirs[i].hyper.d_r for i in indices}
    offsets = {}
    total = 0
    for i in indices:
        offsets[i] = total
        total += d_r[i]
    M = np.zeros((total, total))
    for i in indices:
        res = layer.reservoirs[i]
        oi = offsets[i]
        M[oi : oi + d_r[i], oi : oi + d_r[i]] += res.W.toarray()
        cells = layer.tiling.tiles[i].input_cells
        owners = owner_tile[cells]
        for j in indices:
            sel = np.flatnonzero(owners == j)
            if sel.size == 0:
                continue
            oj = offsets[j]
            rows = owner_row[cells[sel]]
            M[oi : oi + d_r[i], oj : oj + d_r[j]] += (
                res.W_in[:, sel] @ layer.reservoirs[j].W_out[rows, :]
            )
    return M


def concat_readout(layer: Layer) -> np.ndarray:
    """Block-diagonal W_out over active tiles, matching the state
    concatenation order of assemble_effective_layer."""
    indices = layer.active_indices()
    d_out = sum(layer.reservoirs[i].d_out for i in indices)
    d_r = sum(layer.reservoirs[i].hyper.d_r for i in indices)
    out = np.zeros((d_out, d_r))
    ro = co = 0
    for i in indices:
        res = layer.reservoirs[i]
        out[ro : ro + res.d_out, co : co + res.hyper.d_r] = res.W_out
        ro += res.d_out
        co += res.hyper.d_r
    return out


def concat_states(layer: Layer, states: dict) -> np.ndarray:
    """Per-tile states stacked in active-index order."""
    return np.concatenate([states[i] for i in layer.active_indices()])


@dataclass
class ModalDecomposition:
    """Eigenmodes of an effective connectivity matrix, weight-sorted.

    lam: eigenvalues; Z: eigenvector columns; z0 = Z^-1 r0; weights
    w_k = sum_i out_map[i, k] * z0_k with out_map = W_out Z. Modes are sorted
    by |w_k| descending and conjugate pairs survive truncation together.
    """

    lam: np.ndarray
    Z: np.ndarray
    z0: np.ndarray
    weights: np.ndarray
    out_map: np.ndarray
    tau: float

    @property
    def n_modes(self) -> int:
        return self.lam.size

    def mode_period(self, k: int) -> float:
        """Oscillation period 2 pi tau / |Im lambda_k| (inf for real modes)."""
        im = abs(self.lam[k].imag)
        return float(np.inf) if im == 0 else 2.0 * np.pi * self.tau / im


def modal_decomposition(W_tilde: np.ndarray, W_out: np.ndarray, r0: np.ndarray,
                        tau: float, residual_tol: float = 1e-6) -> ModalDecomposition:
    """Eigendecompose a real effective connectivity matrix.

    Raises NumericalError when Z diag(lam) Z^-1 fails to reconstruct W_tilde
    to ``residual_tol`` relative Frobenius error (near-defective matrix).
    """
    W_tilde = np.asarray(W_tilde, dtype=np.float64)
    if W_tilde.ndim != 2 or W_tilde.shape[0] != W_tilde.shape[1]:
        raise ConfigError(f"W_tilde must be square, got {W_tilde.shape}")
    if tau <= 0:
        raise ConfigError(f"tau must be > 0, got {tau}")
    lam, Z = np.linalg.eig(W_tilde)
    norm = np.linalg.norm(W_tilde)
    recon = (Z * lam) @ np.linalg.inv(Z)
    residual = np.linalg.norm(recon - W_tilde) / (norm if norm > 0 else 1.0)
    if residual > residual_tol:
        raise NumericalError(
            f"near-defective matrix: eigendecomposition reconstruction residual "
            f"{residual:.3e} exceeds {residual_tol:.1e}"
        )
    z0 = np.linalg.solve(Z, np.asarray(r0, dtype=np.float64))
    out_map = np.asarray(W_out, dtype=np.float64) @ Z
    weights = out_map.sum(axis=0) * z0
    order = np.argsort(-np.abs(weights), kind="stable")
    return ModalDecomposition(
        lam=lam[order],
        Z=Z[:, order],
        z0=z0[order],
        weights=weights[order],
        out_map=out_map[:, order],
        tau=float(tau),
    )


def _complete_conjugate_pairs(decomp: ModalDecomposition, selected: np.ndarray) -> np.ndarray:
    """Extend a mode selection so no complex conjugate pair is split."""
    chosen = set(int(k) for k in selected)
    lam = decomp.lam
    for k in list(chosen):
        if lam[k].imag == 0:
            continue
        others = [j for j in range(lam.size) if j != k]
        partner = min(others, key=lambda j: abs(lam[j] - lam[k].conjugate()))
        chosen.add(partner)
    return np.array(sorted(chosen), dtype=np.int64)


def linear_reconstruct(decomp: ModalDecomposition, times, top_k: int = None) -> np.ndarray:
    """Evaluate the modal output expansion at the given times.

    v_i(t) = sum_k out_map[i, k] z0_k exp((lambda_k - 1) t / tau), truncated
    to the top_k modes by |w_k| (conjugate pairs are kept whole, so the count
    may grow by one). Returns the real part, (d_out, n_times); a non-trivial
    imaginary residue raises NumericalError.
    """
    times = np.asarray(times, dtype=np.float64)
    if top_k is None or top_k >= decomp.n_modes:
        sel = np.arange(decomp.n_modes)
    else:
        if top_k < 1:
            raise ConfigError(f"top_k must be >= 1, got {top_k}")
        sel = _complete_conjugate_pairs(decomp, np.arange(top_k))
    lam = decomp.lam[sel]
    coeff = decomp.out_map[:, sel] * decomp.z0[sel]
    expo = np.exp(np.outer(lam - 1.0, times) / decomp.tau)
    v = coeff @ expo
    re_norm = np.linalg.norm(v.real)
    im_norm = np.linalg.norm(v.imag)
    if im_norm > 1e-8 * re_norm + 1e-12:
        raise NumericalError(
            f"imaginary residue {im_norm:.3e} vs real magnitude {re_norm:.3e}; "
            "input matrix was not real or pairs are inconsistent"
        )
    return v.real


@dataclass(frozen=True)
class ActivityStats:
    """Trajectory maxima: |W r + W_in u| (linearity criterion) and |r_i|."""

    preact_max: float
    state_max: float


def max_activity(res: Reservoir, states: np.ndarray, inputs: np.ndarray,
                 initial_state: np.ndarray = None) -> ActivityStats:
    """Maxima over a recorded trajectory.

    ``states`` holds the state after each step (n, d_r) and ``inputs`` the
    input consumed by that step (n, d_in); the pre-activation at step t is
    W r(t-1) + W_in u(t), with r(-1) = initial_state (zero by default).
    """
    states = np.asarray(states, dtype=np.float64)
    inputs = np.asarray(inputs, dtype=np.float64)
    if states.ndim != 2 or states.shape[0] < 1:
        raise ConfigError("states must be a nonempty (n, d_r) trajectory")
    if inputs.shape[0] != states.shape[0]:
        raise ConfigError("states and inputs must have equal length")
    prev = np.empty_like(states)
    prev[0] = np.zeros(states.shape[1]) if initial_state is None else initial_state
    prev[1:] = states[:-1]
    pre = res.W.dot(prev.T).T + inputs @ res.W_in.T
    return ActivityStats(
        preact_max=float(np.max(np.abs(pre))),
        state_max=float(np.max(np.abs(states))),
    )
