"""Single reservoir network: construction, driven evolution, ridge readout.

Dynamics are the leaky form tau * dr/dt = -r + tanh(W r + W_in u), advanced
by explicit Euler steps of size dt_step:

    r' = r + (dt_step / tau) * (-r + tanh(W r + W_in u))

For dt_step <= tau every state entry stays in [-max(|r0|, 1), max(|r0|, 1)].
Only the linear readout v = W_out r is trained (ridge regression); W and
W_in are fixed at construction and regenerate bit-exactly from the seed.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg
from scipy import sparse

from . import kernels, rng
from .errors import ConfigError, NumericalError, UntrainedError


@dataclass(frozen=True)
class ReservoirHyperparams:
    """Reservoir construction and training knobs.

    d_r: neurons. g: recurrent gain (W entries have std g/sqrt(p*d_r), so the
    spectral radius of W concentrates near g). p: connection density in (0,1].
    g_in / g_l: input gains for local and cross-layer (parent) features.
    tau: time constant; dt_step: Euler step, must not exceed tau. noise_std:
    i.i.d. input noise during teacher forcing only. beta: ridge regularizer;
    with beta_mode="relative" the value is scaled by the mean squared state
    amplitude and the sample count at fit time. washout: driven steps
    discarded before fitting.
    """

    d_r: int
    g: float
    p: float
    g_in: float
    g_l: float = 1.0
    tau: float = 1.0
    dt_step: float = 1.0
    noise_std: float = 0.0
    beta: float = 1e-6
    beta_mode: str = "relative"
    washout: int = 100

    def validate(self):
        if self.d_r < 1:
            raise ConfigError(f"d_r must be >= 1, got {self.d_r}")
        if not (0.0 < self.p <= 1.0):
            raise ConfigError(f"p must be in (0, 1], got {self.p}")
        if self.g < 0 or self.g_in < 0 or self.g_l < 0:
            raise ConfigError("gains g, g_in, g_l must be >= 0")
        if not (self.tau > 0 and self.dt_step > 0):
            raise ConfigError("tau and dt_step must be > 0")
        if self.dt_step > self.tau:
            raise ConfigError(
                f"dt_step {self.dt_step} exceeds tau {self.tau} (stability guard)"
            )
        if self.noise_std < 0 or self.beta < 0:
            raise ConfigError("noise_std and beta must be >= 0")
        if self.beta_mode not in ("relative", "absolute"):
            raise ConfigError(f"beta_mode must be relative|absolute, got {self.beta_mode}")
        if self.washout < 0:
            raise ConfigError("washout must be >= 0")
        return self

    def with_updates(self, **kw) -> "ReservoirHyperparams":
        return replace(self, **kw).validate()


@dataclass
class Reservoir:
    """One network: fixed W (sparse) and W_in, trained W_out, state-free."""

    hyper: ReservoirHyperparams
    d_in_local: int
    d_in_parent: int
    d_out: int
    seed: int
    W: sparse.csr_matrix
    W_in: np.ndarray
    W_out: np.ndarray = None

    @property
    def d_in(self) -> int:
        return self.d_in_local + self.d_in_parent

    @property
    def alpha(self) -> float:
        return self.hyper.dt_step / self.hyper.tau

    @property
    def trained(self) -> bool:
        return self.W_out is not None

    def zero_state(self) -> np.ndarray:
        return np.zeros(self.hyper.d_r)

    def weight_probe(self) -> np.ndarray:
        """W @ 1, the integrity probe stored in checkpoints."""
        return self.W.dot(np.ones(self.hyper.d_r))


def init_reservoir(hyper: ReservoirHyperparams, d_in_local: int, d_in_parent: int,
                   d_out: int, seed: int) -> Reservoir:
    """Build a reservoir deterministically from (hyper, dims, seed).

    W: each of the d_r^2 slots is independently nonzero with probability p;
    nonzero values ~ Normal(0, g^2 / (p * d_r)). W_in: dense Uniform(-1, 1),
    local columns scaled by g_in, parent columns by g_l.
    """
    hyper.validate()
    if d_in_local < 1 or d_in_parent < 0 or d_out < 1:
        raise ConfigError(
            f"dims must satisfy d_in_local >= 1, d_in_parent >= 0, d_out >= 1, "
            f"got ({d_in_local}, {d_in_parent}, {d_out})"
        )
    d_r = hyper.d_r
    gw = rng.stream(seed, "W")
    connected = gw.random((d_r, d_r)) < hyper.p
    values = gw.normal(0.0, hyper.g / np.sqrt(hyper.p * d_r), (d_r, d_r))
    W = sparse.csr_matrix(np.where(connected, values, 0.0))
    W.indices = W.indices.astype(np.int32, copy=False)
    W.indptr = W.indptr.astype(np.int32, copy=False)

    gi = rng.stream(seed, "W_in")
    W_in = gi.uniform(-1.0, 1.0, (d_r, d_in_local + d_in_parent))
    W_in[:, :d_in_local] *= hyper.g_in
    W_in[:, d_in_local:] *= hyper.g_l
    return Reservoir(
        hyper=hyper,
        d_in_local=d_in_local,
        d_in_parent=d_in_parent,
        d_out=d_out,
        seed=int(seed),
        W=W,
        W_in=W_in,
    )


def step(res: Reservoir, state: np.ndarray, inp: np.ndarray) -> np.ndarray:
    """One Euler step driven by ``inp``; returns the next state."""
    inp = np.asarray(inp, dtype=np.float64)
    if inp.shape != (res.d_in,):
        raise ConfigError(f"input length {inp.shape} != d_in {res.d_in}")
    if not np.isfinite(inp).all():
        raise NumericalError("non-finite input to reservoir step")
    r_next, _ = kernels.step(res.W, res.W_in, inp, state, res.alpha)
    return r_next


def drive(res: Reservoir, inputs: np.ndarray, initial_state: np.ndarray = None,
          noise_std: float = 0.0, noise_rng: np.random.Generator = None) -> np.ndarray:
    """Teacher-forced evolution over an input sequence.

    Returns every state including the washout window (callers slice). When
    noise_std > 0 (training mode) i.i.d. Normal(0, noise_std^2) noise is added
    to each input component before stepping; ``noise_rng`` must then be given.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[0] < 1 or inputs.shape[1] != res.d_in:
        raise ConfigError(
            f"inputs must be (n_steps >= 1, {res.d_in}), got {inputs.shape}"
        )
    if not np.isfinite(inputs).all():
        raise NumericalError("non-finite input to reservoir drive")
    if noise_std > 0.0:
        if noise_rng is None:
            raise ConfigError("noise_std > 0 requires a noise_rng stream")
        inputs = inputs + noise_rng.normal(0.0, noise_std, inputs.shape)
    r0 = res.zero_state() if initial_state is None else np.asarray(initial_state, dtype=np.float64)
    proj = inputs @ res.W_in.T
    return kernels.drive(res.W, proj, r0, res.alpha)


def train_readout(states: np.ndarray, targets: np.ndarray, beta: float) -> np.ndarray:
    """Ridge-regression readout fit.

    states: (d_r, N), targets: (d_out, N), washout already removed by the
    caller. Returns W_out = V S^T (S S^T + beta I)^-1, the minimizer of
    ||V - W_out S||_F^2 + beta ||W_out||_F^2, solved via Cholesky on the
    symmetric positive (semi)definite normal equations.
    """
    S = np.asarray(states, dtype=np.float64)
    V = np.asarray(targets, dtype=np.float64)
    if S.ndim != 2 or V.ndim != 2 or S.shape[1] != V.shape[1] or S.shape[1] < 1:
        raise ConfigError(
            f"states {S.shape} / targets {V.shape} must share N >= 1 columns"
        )
    if beta < 0:
        raise ConfigError(f"beta must be >= 0, got {beta}")
    d_r = S.shape[0]
    G = S @ S.T
    G[np.diag_indices(d_r)] += beta
    rhs = S @ V.T
    try:
        cho = scipy.linalg.cho_factor(G, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise NumericalError(
            "ridge normal equations are singular (rank-deficient states with "
            "beta = 0); set beta > 0"
        ) from exc
    return scipy.linalg.cho_solve(cho, rhs, check_finite=False).T


def effective_beta(hyper: ReservoirHyperparams, states: np.ndarray) -> float:
    """Absolute ridge strength for a fit on ``states`` (rows = time).

    relative mode: beta * mean(s_i^2) * n_samples, which keeps the
    regularizer proportional to the typical diagonal of S S^T.
    """
    if hyper.beta_mode == "absolute":
        return hyper.beta
    power = float(np.mean(states**2)) if states.size else 0.0
    return hyper.beta * power * states.shape[0]


def readout(res: Reservoir, state: np.ndarray) -> np.ndarray:
    """v = W_out r for a trained reservoir."""
    if not res.trained:
        raise UntrainedError("readout requested before train_readout")
    return res.W_out @ state
