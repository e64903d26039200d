"""Domain types, hyperparameter defaults and model-implied covariance.

The observation model decomposes a log-intensity matrix into batch means,
dense systematic (technical) effects, sparse protein effects and noise:

    x_n = mu[batch(n)] + A z_n + B w_n + eps_n

where every isotope group (row) loads on exactly one latent protein, so B
has a single nonnegative entry per row, stored as (value b_i, label u_i).
Labels ``u`` and batch indices are 1-based everywhere in the public types.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

__all__ = [
    "Dataset",
    "Hyperparameters",
    "ModelState",
    "PosteriorArchive",
    "model_mean",
    "implied_covariance",
    "materialize_B",
    "extract_B",
]


@dataclass
class Dataset:
    """p x N log-intensity matrix with missingness mask and sample metadata.

    ``annotations`` partially maps 1-based IG indices to protein label
    strings; ``batch`` holds 1-based batch indices.
    """

    values: np.ndarray
    missing_mask: np.ndarray
    batch: np.ndarray
    subject: Optional[np.ndarray] = None
    time: Optional[np.ndarray] = None
    replicate_group: Optional[np.ndarray] = None
    annotations: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.missing_mask = np.asarray(self.missing_mask, dtype=bool)
        self.batch = np.asarray(self.batch, dtype=int)

    @property
    def n_igs(self) -> int:
        return self.values.shape[0]

    @property
    def n_samples(self) -> int:
        return self.values.shape[1]

    @property
    def n_batches(self) -> int:
        return int(self.batch.max())

    def validate(self):
        p, n = self.values.shape
        if p < 1 or n < 1:
            raise ValueError("values must be a nonempty p x N matrix")
        if self.missing_mask.shape != (p, n):
            raise ValueError("missing_mask shape must match values")
        if self.batch.shape != (n,):
            raise ValueError("batch must have one label per sample")
        if self.batch.min() < 1:
            raise ValueError("batch labels are 1-based")
        present = np.unique(self.batch)
        if not np.array_equal(present, np.arange(1, self.n_batches + 1)):
            raise ValueError("every batch label in 1..N_B must occur at least once")
        for key in self.annotations:
            if not 1 <= key <= p:
                raise ValueError(f"annotation key {key} outside 1..p")
        for name in ("subject", "time", "replicate_group"):
            arr = getattr(self, name)
            if arr is not None and len(arr) != n:
                raise ValueError(f"{name} must have one entry per sample")
        if not np.all(np.isfinite(self.values[~self.missing_mask])):
            raise ValueError("observed values must be finite")
        return self


def default_n_factors(n_igs: int) -> int:
    """Conservative upper bound on the number of systematic factors."""
    return max(1, int(math.floor(2.0 * math.log(n_igs))))


@dataclass
class Hyperparameters:
    """Prior settings and run lengths; defaults follow the model's flat priors."""

    noise_shape: float = 1.1          # inverse-gamma shape on noise variances
    noise_rate: float = 0.001
    batch_mean: float = 8.0           # Gaussian prior mean on batch effects
    batch_precision: float = 0.01
    laplace_shape: float = 4.0        # gamma hyperprior on the Laplace rate
    laplace_rate: float = 2.0
    ard_shape: float = 1.1            # gamma prior on column precisions of A
    ard_rate: float = 0.001
    conc_shape: float = 1.0           # gamma prior on Dirichlet concentration
    conc_rate: float = 1.0
    n_factors: Optional[int] = None   # None: floor(2 log p) at fit time
    n_proteins: int = 2
    ard_threshold: float = 1e3
    smc_particles: int = 16
    iterations: int = 4000
    burn_in: int = 3000
    thin: int = 1
    phi_model: str = "diag"           # one of {"diag", "iw", "gp"}
    tree: bool = True                 # False: i.i.d. latent proteins (no-tree mode)
    literal_formulas: bool = False    # printed conditional forms, for A/B testing

    def validate(self):
        positive = [
            ("noise_shape", self.noise_shape), ("noise_rate", self.noise_rate),
            ("batch_precision", self.batch_precision),
            ("laplace_shape", self.laplace_shape), ("laplace_rate", self.laplace_rate),
            ("ard_shape", self.ard_shape), ("ard_rate", self.ard_rate),
            ("conc_shape", self.conc_shape), ("conc_rate", self.conc_rate),
            ("ard_threshold", self.ard_threshold),
        ]
        for name, val in positive:
            if val <= 0:
                raise ValueError(f"{name} must be strictly positive")
        if self.n_factors is not None and self.n_factors < 1:
            raise ValueError("n_factors must be >= 1")
        if self.n_proteins < 1:
            raise ValueError("n_proteins must be >= 1")
        if self.smc_particles < 1:
            raise ValueError("smc_particles must be >= 1")
        for name in ("iterations", "burn_in", "thin"):
            if getattr(self, name) < (0 if name == "burn_in" else 1):
                raise ValueError(f"{name} out of range")
        if self.burn_in >= self.iterations:
            raise ValueError("burn_in must be smaller than iterations")
        if self.phi_model not in ("diag", "iw", "gp"):
            raise ValueError("phi_model must be one of diag/iw/gp")
        return self

    def resolved_n_factors(self, n_igs: int) -> int:
        return self.n_factors if self.n_factors is not None else default_n_factors(n_igs)


@dataclass
class ModelState:
    """All latent quantities of one posterior draw.

    ``imputed`` holds the current values for missing cells, ordered like
    ``np.nonzero(dataset.missing_mask)`` (row-major).
    """

    mu: np.ndarray        # (N_B, p) batch means
    A: np.ndarray         # (p, N_F) systematic loadings
    rho: np.ndarray       # (N_F,) ARD column precisions
    Z: np.ndarray         # (N_F, N) systematic scores
    tau: np.ndarray       # (N_F, N) mixing variances
    lambda2: float        # Laplace rate
    b: np.ndarray         # (p,) nonnegative protein-loading values
    u: np.ndarray         # (p,) 1-based protein labels
    alpha: float          # Dirichlet concentration
    W: np.ndarray         # (N_P, N) latent protein profiles
    psi: np.ndarray       # (p,) noise variances
    imputed: np.ndarray   # (n_missing,) values for missing cells

    @property
    def n_igs(self) -> int:
        return self.A.shape[0]

    @property
    def n_factors(self) -> int:
        return self.A.shape[1]

    @property
    def n_proteins(self) -> int:
        return self.W.shape[0]

    @property
    def n_samples(self) -> int:
        return self.W.shape[1]

    def validate(self):
        p, nf = self.A.shape
        npb, nn = self.W.shape
        if self.mu.shape[1] != p or self.Z.shape != (nf, nn):
            raise ValueError("inconsistent state shapes")
        if self.tau.shape != (nf, nn) or self.b.shape != (p,) or self.u.shape != (p,):
            raise ValueError("inconsistent state shapes")
        if self.psi.shape != (p,):
            raise ValueError("inconsistent state shapes")
        if np.any(self.psi <= 0) or np.any(self.rho <= 0) or np.any(self.tau <= 0):
            raise ValueError("psi, rho and tau must be strictly positive")
        if self.lambda2 <= 0 or self.alpha <= 0:
            raise ValueError("lambda2 and alpha must be strictly positive")
        if np.any(self.b < 0):
            raise ValueError("protein loadings must be nonnegative")
        if np.any((self.u < 1) | (self.u > npb)):
            raise ValueError("labels u must lie in 1..N_P")
        return self

    def copy(self) -> "ModelState":
        return ModelState(
            mu=self.mu.copy(), A=self.A.copy(), rho=self.rho.copy(),
            Z=self.Z.copy(), tau=self.tau.copy(), lambda2=float(self.lambda2),
            b=self.b.copy(), u=self.u.copy(), alpha=float(self.alpha),
            W=self.W.copy(), psi=self.psi.copy(), imputed=self.imputed.copy(),
        )

    def imputed_entries(self, dataset: Dataset) -> dict[tuple[int, int], float]:
        """Sparse (row, col) -> value view of the imputed cells, 1-based."""
        rows, cols = np.nonzero(dataset.missing_mask)
        return {(int(i) + 1, int(n) + 1): float(v)
                for i, n, v in zip(rows, cols, self.imputed)}


@dataclass
class PosteriorArchive:
    """Thinned post-burn-in draws with their tree scores."""

    draws: list          # list of (ModelState, TreeState | None, float)
    seed: int
    hyper: Hyperparameters

    def __len__(self) -> int:
        return len(self.draws)

    def states(self):
        return [d[0] for d in self.draws]

    def trees(self):
        return [d[1] for d in self.draws]

    def tree_log_marginals(self) -> np.ndarray:
        return np.array([d[2] for d in self.draws])


def materialize_B(b, u, n_proteins: int) -> np.ndarray:
    """Dense (p, N_P) loading matrix with b_i at column u_i of row i."""
    b = np.asarray(b, dtype=float)
    u = np.asarray(u, dtype=int)
    if np.any((u < 1) | (u > n_proteins)):
        raise ValueError("labels u must lie in 1..N_P")
    if np.any(b < 0):
        raise ValueError("loadings b must be nonnegative")
    B = np.zeros((b.size, n_proteins))
    B[np.arange(b.size), u - 1] = b
    return B


def extract_B(B: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of materialize_B for matrices with one nonzero per row."""
    B = np.asarray(B, dtype=float)
    nz = np.count_nonzero(B, axis=1)
    if np.any(nz > 1):
        raise ValueError("B must have at most one nonzero per row")
    u = np.where(nz == 0, 1, np.argmax(B != 0, axis=1) + 1)
    b = B[np.arange(B.shape[0]), u - 1]
    return b, u


def model_mean(state: ModelState, n: int, m: int) -> np.ndarray:
    """Mean vector mu[m] + A z_n + B w_n for 1-based sample n and batch m."""
    if not 1 <= n <= state.n_samples:
        raise IndexError(f"sample index {n} outside 1..{state.n_samples}")
    if not 1 <= m <= state.mu.shape[0]:
        raise IndexError(f"batch index {m} outside 1..{state.mu.shape[0]}")
    protein = state.b * state.W[state.u - 1, n - 1]
    return state.mu[m - 1] + state.A @ state.Z[:, n - 1] + protein


def implied_covariance(state: ModelState) -> np.ndarray:
    """Model-implied p x p covariance A A^T + B S_hat B^T + Psi.

    S_hat is the empirical covariance of the rows of W across the N samples,
    so the result is the one-draw plug-in estimate of the data covariance.
    """
    if state.n_samples < 2:
        raise ValueError("need at least two samples for the empirical covariance of W")
    s_hat = np.atleast_2d(np.cov(state.W, ddof=1))
    idx = state.u - 1
    protein = np.outer(state.b, state.b) * s_hat[np.ix_(idx, idx)]
    sigma = state.A @ state.A.T + protein + np.diag(state.psi)
    return 0.5 * (sigma + sigma.T)


def state_with(state: ModelState, **updates) -> ModelState:
    return replace(state, **updates)
