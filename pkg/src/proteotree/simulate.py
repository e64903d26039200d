"""Synthetic data generators for benchmarking the model.

``generate_dataset`` draws from the artificial-data hierarchy (batch means,
dense Gaussian systematic loadings, half-normal protein loadings with
Dirichlet-allocated labels, Wishart-precision profile covariance, heavy-
tailed noise variances) and flags a uniform fraction of cells missing.
``generate_confounded_dataset`` overlays two group effects on the first two
protein profiles with a controlled batch/effect overlap.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from .core import Dataset, materialize_B
from .stochastics import RngStream, sample_truncated_normal_positive

__all__ = ["SimConfig", "GroundTruth", "generate_dataset", "generate_confounded_dataset"]


@dataclass
class SimConfig:
    n_igs: int = 800
    n_samples: int = 80
    n_batches: int = 2
    n_factors: int = 4
    n_proteins: int = 32
    missing_fraction: float = 0.2
    alpha_range: tuple[float, float] = (0.8, 2.4)
    seed: int = 0

    def validate(self):
        if self.n_igs < 1 or self.n_samples < 1:
            raise ValueError("matrix dimensions must be positive")
        if self.n_proteins > self.n_igs:
            raise ValueError("cannot have more proteins than isotope groups")
        if self.n_batches > self.n_samples:
            raise ValueError("cannot have more batches than samples")
        if not 0.0 <= self.missing_fraction <= 1.0:
            raise ValueError("missing_fraction must lie in [0, 1]")
        return self


@dataclass
class GroundTruth:
    mu: np.ndarray
    A: np.ndarray
    b: np.ndarray
    u: np.ndarray
    S: np.ndarray
    psi: np.ndarray
    sigma: np.ndarray
    missing_mask: np.ndarray
    batch: np.ndarray
    complete: np.ndarray
    effect: Optional[np.ndarray] = None
    W: Optional[np.ndarray] = None
    labels: list[str] = field(default_factory=list)


def _protein_label(k: int) -> str:
    return f"p{k:03d}"


def _batch_labels(n_samples: int, n_batches: int, gen: np.random.Generator) -> np.ndarray:
    """Uniform batch labels, redrawn until every batch occurs."""
    while True:
        batch = gen.integers(1, n_batches + 1, size=n_samples)
        if np.unique(batch).size == n_batches:
            return batch


def _shared_structure(config: SimConfig, gen: np.random.Generator):
    p, nf, npb = config.n_igs, config.n_factors, config.n_proteins
    mu = 8.0 + np.sqrt(2.0) * gen.standard_normal((config.n_batches, p))
    a = np.sqrt(0.1) * gen.standard_normal((p, nf))
    alpha = float(gen.uniform(*config.alpha_range))
    v = gen.dirichlet(np.full(npb, alpha))
    u = gen.choice(npb, size=p, p=v) + 1
    b = sample_truncated_normal_positive(np.zeros(p), np.ones(p), gen)
    psi = 1.0 / gen.gamma(1.1, 1.0 / 0.02, size=p)
    return mu, a, u, b, psi


def generate_dataset(config: SimConfig, rng) -> tuple[Dataset, GroundTruth]:
    """One replicate of the artificial-data hierarchy.

    Samples are drawn marginally as x_n ~ N(mu[batch], Sigma) with
    Sigma = A A^T + B S B^T + Psi and S the inverse of a Wishart(I, N_P)
    precision draw.  The true labels are exposed as the annotation map.
    """
    config.validate()
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    p, n, npb = config.n_igs, config.n_samples, config.n_proteins
    mu, a, u, b, psi = _shared_structure(config, gen)
    batch = _batch_labels(n, config.n_batches, gen)

    s_prec = stats.wishart.rvs(df=npb, scale=np.eye(npb), random_state=gen)
    s_prec = np.atleast_2d(s_prec)
    s_cov = np.linalg.inv(s_prec)
    s_cov = 0.5 * (s_cov + s_cov.T)

    big_b = materialize_B(b, u, npb)
    sigma = a @ a.T + big_b @ s_cov @ big_b.T + np.diag(psi)
    sigma = 0.5 * (sigma + sigma.T)
    chol = np.linalg.cholesky(sigma)
    x = mu[batch - 1].T + chol @ gen.standard_normal((p, n))

    mask = gen.random((p, n)) < config.missing_fraction
    labels = [_protein_label(k) for k in range(1, npb + 1)]
    annotations = {i + 1: labels[u[i] - 1] for i in range(p)}
    values = x.copy()
    values[mask] = np.nan
    dataset = Dataset(values=values, missing_mask=mask, batch=batch,
                      annotations=annotations).validate()
    truth = GroundTruth(mu=mu, A=a, b=b, u=u, S=s_cov, psi=psi, sigma=sigma,
                        missing_mask=mask, batch=batch, complete=x, labels=labels)
    return dataset, truth


def generate_confounded_dataset(config: SimConfig, overlap: float, rng,
                                effect_size: float = 0.75) -> tuple[Dataset, GroundTruth]:
    """Replicate with two group effects partially confounded with batch.

    Profiles are drawn explicitly: the first two proteins carry mean
    +/- ``effect_size`` depending on each sample's effect label, the rest are
    standard normal.  Exactly floor(overlap * N) samples have effect label
    equal to their batch label, so the overlap grid is noiseless by design.
    """
    config.validate()
    if config.n_batches != 2:
        raise ValueError("confounded generator needs exactly two batches")
    if config.n_proteins < 3:
        raise ValueError("confounded generator needs at least three proteins")
    if not 0.5 <= overlap <= 1.0:
        raise ValueError("overlap must lie in [0.5, 1]")
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    p, n, npb = config.n_igs, config.n_samples, config.n_proteins
    mu, a, u, b, psi = _shared_structure(config, gen)
    batch = _batch_labels(n, 2, gen)

    n_agree = int(np.floor(overlap * n))
    order = gen.permutation(n)
    effect = np.where(batch == 1, 2, 1)
    effect[order[:n_agree]] = batch[order[:n_agree]]

    w = gen.standard_normal((npb, n))
    signs = np.where(effect == 1, 1.0, -1.0)
    w[0] += effect_size * signs
    w[1] += effect_size * signs

    z = gen.standard_normal((config.n_factors, n))
    eps = np.sqrt(psi)[:, None] * gen.standard_normal((p, n))
    x = mu[batch - 1].T + a @ z + b[:, None] * w[u - 1] + eps

    big_b = materialize_B(b, u, npb)
    sigma = a @ a.T + big_b @ big_b.T + np.diag(psi)
    mask = gen.random((p, n)) < config.missing_fraction
    labels = [_protein_label(k) for k in range(1, npb + 1)]
    annotations = {i + 1: labels[u[i] - 1] for i in range(p)}
    values = x.copy()
    values[mask] = np.nan
    dataset = Dataset(values=values, missing_mask=mask, batch=batch,
                      annotations=annotations).validate()
    truth = GroundTruth(mu=mu, A=a, b=b, u=u, S=np.eye(npb), psi=psi, sigma=sigma,
                        missing_mask=mask, batch=batch, complete=x,
                        effect=effect, W=w, labels=labels)
    return dataset, truth
