"""Conditional posterior updates and the Gibbs sweep orchestrator.

Each update block redraws one group of latent quantities from its full
conditional.  Missing cells are handled by data augmentation: they carry
current imputed values that enter every conditional like observed data and
are refreshed from the posterior predictive at the end of each sweep.

The ``*_posterior_params`` helpers expose the conditional parameters of the
conjugate blocks as pure functions; the update ops draw from exactly these
conditionals (tests verify them against independent quadrature oracles).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, log_ndtr

from .coalescent import (
    DiagGammaPhi,
    GpKernelPhi,
    InvWishartPhi,
    PhiOps,
    TreeState,
    leaf_prior_messages,
    smc_resample_tree,
    tree_log_marginal,
    update_phi,
)
from .core import Dataset, Hyperparameters, ModelState, PosteriorArchive
from .stochastics import (
    RngStream,
    sample_inverse_gaussian,
    sample_truncated_normal_positive,
    slice_sample_scalar,
)

__all__ = [
    "SweepBlock",
    "SweepPlan",
    "default_sweep_plan",
    "update_noise_variances",
    "update_batch_means",
    "update_systematic_scores",
    "update_mixing_variances",
    "update_systematic_loadings",
    "update_protein_profiles",
    "update_protein_loadings",
    "update_assignments",
    "impute_missing",
    "init_state",
    "run_chain",
    "effective_num_factors",
    "sample_state_from_prior",
    "resample_observed_values",
]

_Z_FLOOR = 1e-10

# Stable stream ids per update block, so draws are reproducible regardless of
# scheduling and of which blocks a plan enables.
BLOCK_IDS = {
    "init": 0,
    "noise": 1,
    "batch_means": 2,
    "scores": 3,
    "loadings": 4,
    "assignments": 5,
    "profiles": 6,
    "tree": 7,
    "missing": 8,
}


# ---------------------------------------------------------------------------
# Shared residual assembly
# ---------------------------------------------------------------------------

def complete_matrix(state: ModelState, data: Dataset) -> np.ndarray:
    """Data matrix with missing cells filled by their current imputed values."""
    x = np.array(data.values, dtype=float)
    if state.imputed.size:
        rows, cols = np.nonzero(data.missing_mask)
        x[rows, cols] = state.imputed
    else:
        x[data.missing_mask] = 0.0
    return x

def centered_matrix(state: ModelState, data: Dataset) -> np.ndarray:
    """Complete matrix with the batch means subtracted."""
    return complete_matrix(state, data) - state.mu[data.batch - 1].T

def protein_effect(state: ModelState) -> np.ndarray:
    return state.b[:, None] * state.W[state.u - 1]

def full_residual(state: ModelState, data: Dataset) -> np.ndarray:
    return centered_matrix(state, data) - state.A @ state.Z - protein_effect(state)


# ---------------------------------------------------------------------------
# Conjugate conditional parameters
# ---------------------------------------------------------------------------

def noise_posterior_params(state, data, hyper):
    """Gamma(shape, rate_i) for each noise precision psi_i^{-1}."""
    resid = full_residual(state, data)
    shape = hyper.noise_shape + 0.5 * data.n_samples
    rates = hyper.noise_rate + 0.5 * np.sum(resid * resid, axis=1)
    return shape, rates

def batch_mean_posterior_params(state, data, hyper, m):
    """Entrywise normal (mean_i, var_i) for the batch-m mean vector."""
    idx = np.nonzero(data.batch == m)[0]
    if idx.size == 0:
        raise ValueError(f"batch {m} is empty")
    x = complete_matrix(state, data)
    fitted = state.A @ state.Z + protein_effect(state)
    partial = np.sum(x[:, idx] - fitted[:, idx], axis=1)
    var = 1.0 / (hyper.batch_precision + idx.size / state.psi)
    mean = var * (hyper.batch_mean * hyper.batch_precision + partial / state.psi)
    return mean, var

def score_posterior_params(state, data, hyper, j):
    """Normal (mean_n, var_n) for row j of Z given the leave-j-out residual."""
    resid_j = full_residual(state, data) + np.outer(state.A[:, j], state.Z[j])
    weights = state.A[:, j] / state.psi
    prec_like = float(state.A[:, j] @ weights)
    var = 1.0 / (prec_like + 1.0 / state.tau[j])
    mean = var * (weights @ resid_j)
    return mean, var

def loading_posterior_params(state, data, hyper, j):
    """Normal (mean_i, var_i) for column j of A given the leave-j-out residual."""
    resid_j = full_residual(state, data) + np.outer(state.A[:, j], state.Z[j])
    zz = float(state.Z[j] @ state.Z[j])
    c = 1.0 / (zz + state.psi * state.rho[j])
    mean = c * (resid_j @ state.Z[j])
    return mean, c * state.psi

def ard_posterior_params(state, hyper):
    """Gamma(shape, rate_j) for the column precisions of A."""
    shape = hyper.ard_shape + 0.5 * state.n_igs
    ss = np.sum(state.A * state.A, axis=0)
    factor = 1.0 if hyper.literal_formulas else 0.5
    return shape, hyper.ard_rate + factor * ss

def mixing_posterior_params(state, hyper):
    """Inverse-Gaussian (mean matrix, scale) for the reciprocal mixing variances."""
    z_abs = np.maximum(np.abs(state.Z), _Z_FLOOR)
    if hyper.literal_formulas:
        mean = np.sqrt(state.lambda2 / z_abs)
    else:
        mean = np.sqrt(state.lambda2) / z_abs
    return mean, state.lambda2

def lambda2_posterior_params(state, hyper):
    """Gamma(shape, rate) for the Laplace rate lambda^2."""
    if hyper.literal_formulas:
        shape = hyper.laplace_shape + 0.5
    else:
        shape = hyper.laplace_shape + state.tau.size
    return shape, hyper.laplace_rate + 0.5 * float(state.tau.sum())

def protein_loading_posterior_params(state, data, hyper):
    """Truncated-normal (mean_i, var_i) for every nonzero protein loading."""
    e = centered_matrix(state, data) - state.A @ state.Z
    w_rows = state.W[state.u - 1]
    ww = np.sum(state.W * state.W, axis=1)[state.u - 1]
    c = 1.0 / (ww + state.psi)
    mean = c * np.sum(e * w_rows, axis=1)
    return mean, c * state.psi

def profile_posterior_params(state, data, hyper, k, prior_mean, prior_svar, phi_ops):
    """Gaussian conditional for profile row k: returns (mean, cov)."""
    e = centered_matrix(state, data) - state.A @ state.Z
    members = np.nonzero(state.u == k + 1)[0]
    coef = state.b[members] / state.psi[members]
    h = coef @ e[members] if members.size else np.zeros(data.n_samples)
    beta = float(np.sum(state.b[members] ** 2 / state.psi[members]))
    if phi_ops.diagonal is not None:
        prior_var = prior_svar * phi_ops.diagonal
        var = 1.0 / (beta + 1.0 / prior_var)
        mean = var * (h + prior_mean / prior_var)
        return mean, np.diag(var)
    phi = phi_ops._chol @ phi_ops._chol.T
    prec = beta * np.eye(phi_ops.n) + np.linalg.inv(prior_svar * phi)
    cov = np.linalg.inv(prec)
    mean = cov @ (h + np.linalg.solve(prior_svar * phi, prior_mean))
    return mean, cov

def assignment_log_weights(eps_i, psi_i, w_matrix, w_sq, counts, alpha):
    """Unnormalized log conditional over labels for one isotope group.

    Marginalizes the half-normal loading exactly: with q = 1 + |W_k|^2/psi
    and bhat the conditional loading mean, each label scores

        log(alpha + n_k) - log(q)/2 + q bhat^2 / 2 + log Phi(bhat sqrt(q)).
    """
    q = 1.0 + w_sq / psi_i
    cross = w_matrix @ eps_i
    bhat = cross / (psi_i * q)
    root_q = np.sqrt(q)
    return (np.log(alpha + counts) - 0.5 * np.log(q)
            + 0.5 * q * bhat * bhat + log_ndtr(bhat * root_q))

def assignment_log_weights_literal(eps_lit, w_sq, counts, alpha, cross_lit, hyper, n):
    """Printed closed form: noise variance marginalized, no loading-prior
    precision in c and no systematic term in the residual."""
    c = np.maximum(w_sq, _Z_FLOOR)
    ee = float(eps_lit @ eps_lit)
    core = hyper.noise_rate + 0.5 * ee - 0.5 * cross_lit * cross_lit / c
    core = np.maximum(core, _Z_FLOOR)
    return (np.log(alpha + counts) - 0.5 * np.log(c)
            - (hyper.noise_shape + 0.5 * n) * np.log(core))

def concentration_log_density(alpha, counts, hyper):
    """Collapsed Dirichlet-multinomial log conditional for the concentration."""
    if alpha <= 0:
        return -math.inf
    n_proteins = counts.size
    total = int(counts.sum())
    return ((hyper.conc_shape - 1.0) * math.log(alpha) - hyper.conc_rate * alpha
            + gammaln(n_proteins * alpha) - gammaln(n_proteins * alpha + total)
            + float(np.sum(gammaln(alpha + counts))) - n_proteins * gammaln(alpha))


# ---------------------------------------------------------------------------
# Update blocks
# ---------------------------------------------------------------------------

def _gen(rng):
    return rng.generator() if isinstance(rng, RngStream) else rng

def update_noise_variances(state, data, hyper, rng):
    gen = _gen(rng)
    shape, rates = noise_posterior_params(state, data, hyper)
    state.psi = 1.0 / gen.gamma(shape, 1.0 / rates)
    return state.psi

def update_batch_means(state, data, hyper, rng):
    gen = _gen(rng)
    for m in range(1, data.n_batches + 1):
        mean, var = batch_mean_posterior_params(state, data, hyper, m)
        state.mu[m - 1] = mean + np.sqrt(var) * gen.standard_normal(mean.size)
    return state.mu

def update_systematic_scores(state, data, hyper, rng):
    gen = _gen(rng)
    resid = full_residual(state, data)
    for j in range(state.n_factors):
        resid += np.outer(state.A[:, j], state.Z[j])
        weights = state.A[:, j] / state.psi
        prec_like = float(state.A[:, j] @ weights)
        var = 1.0 / (prec_like + 1.0 / state.tau[j])
        mean = var * (weights @ resid)
        state.Z[j] = mean + np.sqrt(var) * gen.standard_normal(data.n_samples)
        resid -= np.outer(state.A[:, j], state.Z[j])
    return state.Z

def update_mixing_variances(state, hyper, rng):
    gen = _gen(rng)
    mean, scale = mixing_posterior_params(state, hyper)
    tau_inv = sample_inverse_gaussian(mean, scale, gen)
    state.tau = 1.0 / tau_inv
    shape, rate = lambda2_posterior_params(state, hyper)
    state.lambda2 = float(gen.gamma(shape, 1.0 / rate))
    return state.tau, state.lambda2

def update_systematic_loadings(state, data, hyper, rng):
    gen = _gen(rng)
    resid = full_residual(state, data)
    for j in range(state.n_factors):
        resid += np.outer(state.A[:, j], state.Z[j])
        zz = float(state.Z[j] @ state.Z[j])
        c = 1.0 / (zz + state.psi * state.rho[j])
        mean = c * (resid @ state.Z[j])
        state.A[:, j] = mean + np.sqrt(c * state.psi) * gen.standard_normal(state.n_igs)
        resid -= np.outer(state.A[:, j], state.Z[j])
    shape, rates = ard_posterior_params(state, hyper)
    state.rho = gen.gamma(shape, 1.0 / rates)
    return state.A, state.rho

def update_protein_profiles(state, data, hyper, rng, tree=None, phi=None):
    """Redraw every profile row from its Gaussian conditional.

    The prior for row k is N(m_k, s_k Phi) with (m_k, s_k) the leaf-parent
    message from the completed tree; without a tree the rows are a priori
    independent standard normal across samples.
    """
    gen = _gen(rng)
    n = data.n_samples
    if tree is not None:
        prior_mean, prior_svar = leaf_prior_messages(tree)
        ops = phi if isinstance(phi, PhiOps) else PhiOps(phi, n)
    else:
        prior_mean = np.zeros((state.n_proteins, n))
        prior_svar = np.ones(state.n_proteins)
        ops = PhiOps(np.ones(n))
    e = centered_matrix(state, data) - state.A @ state.Z
    coef = state.b / state.psi
    h = np.zeros((state.n_proteins, n))
    np.add.at(h, state.u - 1, coef[:, None] * e)
    beta = np.bincount(state.u - 1, weights=state.b ** 2 / state.psi,
                       minlength=state.n_proteins)
    if ops.diagonal is not None:
        prior_var = prior_svar[:, None] * ops.diagonal[None, :]
        var = 1.0 / (beta[:, None] + 1.0 / prior_var)
        mean = var * (h + prior_mean / prior_var)
        state.W = mean + np.sqrt(var) * gen.standard_normal((state.n_proteins, n))
    else:
        phi_inv = np.linalg.inv(ops._chol @ ops._chol.T)
        for k in range(state.n_proteins):
            prec = beta[k] * np.eye(n) + phi_inv / prior_svar[k]
            chol = np.linalg.cholesky(prec)
            rhs = h[k] + phi_inv @ prior_mean[k] / prior_svar[k]
            mean = np.linalg.solve(prec, rhs)
            z = gen.standard_normal(n)
            state.W[k] = mean + np.linalg.solve(chol.T, z)
    return state.W

def update_protein_loadings(state, data, hyper, rng):
    gen = _gen(rng)
    mean, var = protein_loading_posterior_params(state, data, hyper)
    state.b = sample_truncated_normal_positive(mean, var, gen)
    return state.b

def update_assignments(state, data, hyper, rng):
    """Sequential label scan, then loading redraws and a concentration move.

    Each u_i is drawn with its loading marginalized out (so the move updates
    the pair (u_i, b_i) jointly); counts exclude the group being updated.
    """
    gen = _gen(rng)
    e = centered_matrix(state, data) - state.A @ state.Z
    w_sq = np.sum(state.W * state.W, axis=1)
    counts = np.bincount(state.u - 1, minlength=state.n_proteins).astype(float)
    cross = e @ state.W.T
    if hyper.literal_formulas:
        xt = centered_matrix(state, data)
        cross_lit = xt @ state.W.T
    q = 1.0 + w_sq[None, :] / state.psi[:, None]
    root_q = np.sqrt(q)
    bhat = cross / (state.psi[:, None] * q)
    base = -0.5 * np.log(q) + 0.5 * q * bhat * bhat + log_ndtr(bhat * root_q)
    for i in range(state.n_igs):
        counts[state.u[i] - 1] -= 1.0
        if hyper.literal_formulas:
            logw = assignment_log_weights_literal(
                xt[i], w_sq, counts, state.alpha, cross_lit[i], hyper, data.n_samples)
        else:
            logw = np.log(state.alpha + counts) + base[i]
        logw -= logw.max()
        weights = np.exp(logw)
        r = gen.random() * weights.sum()
        k = int(np.searchsorted(np.cumsum(weights), r, side="left"))
        k = min(k, state.n_proteins - 1)
        state.u[i] = k + 1
        counts[k] += 1.0
    c = 1.0 / (w_sq[state.u - 1] + state.psi)
    mean = c * cross[np.arange(state.n_igs), state.u - 1]
    state.b = sample_truncated_normal_positive(mean, c * state.psi, gen)
    state.alpha = float(slice_sample_scalar(
        lambda a: concentration_log_density(a, counts, hyper),
        state.alpha, gen, width=1.0, lower=1e-6, upper=1e6))
    return state.u, state.alpha

def impute_missing(state, data, hyper, rng):
    gen = _gen(rng)
    rows, cols = np.nonzero(data.missing_mask)
    if rows.size == 0:
        return state.imputed
    mean = (state.mu[data.batch - 1].T + state.A @ state.Z + protein_effect(state))
    state.imputed = (mean[rows, cols]
                     + np.sqrt(state.psi[rows]) * gen.standard_normal(rows.size))
    return state.imputed


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def annotation_indices(data: Dataset, n_proteins: int) -> tuple[np.ndarray, list[str]]:
    """Per-IG protein index (1-based, 0 for unannotated) and the label order.

    Distinct annotation labels are enumerated in sorted order; they anchor
    protein indices for initialization and for the structural metrics.
    """
    labels = sorted(set(data.annotations.values()))
    if len(labels) > n_proteins:
        raise ValueError(f"{len(labels)} annotation labels exceed {n_proteins} proteins")
    index = {lab: k + 1 for k, lab in enumerate(labels)}
    out = np.zeros(data.n_igs, dtype=int)
    for ig, lab in data.annotations.items():
        out[ig - 1] = index[lab]
    return out, labels

def init_state(data: Dataset, hyper: Hyperparameters, rng) -> ModelState:
    """Moment-based starting point: observed-data batch means and residual
    variances, random scores/profiles, least-squares loadings, annotation-
    seeded labels."""
    gen = _gen(rng)
    p, n = data.values.shape
    nf = hyper.resolved_n_factors(p)
    npb = hyper.n_proteins
    observed = ~data.missing_mask
    values = np.where(observed, data.values, 0.0)

    row_count = observed.sum(axis=1)
    row_sum = values.sum(axis=1)
    global_mean = np.where(row_count > 0, row_sum / np.maximum(row_count, 1),
                           hyper.batch_mean)
    mu = np.zeros((data.n_batches, p))
    for m in range(1, data.n_batches + 1):
        idx = data.batch == m
        cnt = observed[:, idx].sum(axis=1)
        tot = values[:, idx].sum(axis=1)
        mu[m - 1] = np.where(cnt > 0, tot / np.maximum(cnt, 1), global_mean)

    centered = np.where(observed, data.values - mu[data.batch - 1].T, 0.0)
    ss = np.sum(centered * centered, axis=1)
    psi = np.where(row_count > 1, ss / np.maximum(row_count - 1, 1), 1.0)
    psi = np.maximum(psi, 1e-6)

    z_scores = gen.standard_normal((nf, n))
    w_profiles = gen.standard_normal((npb, n))
    gram = z_scores @ z_scores.T
    loadings = np.linalg.solve(gram, z_scores @ centered.T).T

    seeded, _ = annotation_indices(data, npb)
    u = np.where(seeded > 0, seeded, gen.integers(1, npb + 1, size=p))

    resid = centered - loadings @ z_scores
    w_rows = w_profiles[u - 1]
    denom = np.sum(w_profiles * w_profiles, axis=1)[u - 1]
    b = np.maximum(np.sum(resid * w_rows, axis=1) / np.maximum(denom, 1e-12), 0.0)

    state = ModelState(
        mu=mu, A=loadings, rho=np.ones(nf), Z=z_scores,
        tau=np.ones((nf, n)), lambda2=hyper.laplace_shape / hyper.laplace_rate,
        b=b, u=u.astype(int), alpha=hyper.conc_shape / hyper.conc_rate,
        W=w_profiles, psi=psi,
        imputed=mu[data.batch - 1].T[data.missing_mask],
    )
    return state.validate()


# ---------------------------------------------------------------------------
# Sweep plan and chain
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepBlock:
    name: str
    fields: tuple[str, ...]
    parallelizable: bool = False

@dataclass(frozen=True)
class SweepPlan:
    blocks: tuple[SweepBlock, ...]

    def validate(self, tree_enabled: bool = True):
        mutable = {"psi", "mu", "Z", "tau", "lambda2", "A", "rho",
                   "u", "b", "alpha", "W", "imputed"}
        covered: list[str] = []
        for blk in self.blocks:
            covered.extend(blk.fields)
        if sorted(covered) != sorted(mutable):
            raise ValueError("sweep plan must cover every state field exactly once")
        names = [blk.name for blk in self.blocks]
        if tree_enabled:
            if "tree" not in names:
                raise ValueError("tree-enabled plans need a tree block")
            if names.count("tree") > 1 or names.index("tree") < names.index("profiles"):
                raise ValueError("exactly one tree block, after the profile block")
        return self

def default_sweep_plan(tree_enabled: bool = True) -> SweepPlan:
    blocks = [
        SweepBlock("noise", ("psi",), parallelizable=True),
        SweepBlock("batch_means", ("mu",), parallelizable=True),
        SweepBlock("scores", ("Z", "tau", "lambda2")),
        SweepBlock("loadings", ("A", "rho")),
        SweepBlock("assignments", ("u", "b", "alpha")),
        SweepBlock("profiles", ("W",), parallelizable=True),
    ]
    if tree_enabled:
        blocks.append(SweepBlock("tree", (), parallelizable=True))
    blocks.append(SweepBlock("missing", ("imputed",), parallelizable=True))
    return SweepPlan(tuple(blocks)).validate(tree_enabled)


def _initial_phi(data: Dataset, hyper: Hyperparameters):
    n = data.n_samples
    if hyper.phi_model == "diag":
        return DiagGammaPhi(variances=np.ones(n), shape=hyper.noise_shape,
                            rate=hyper.noise_rate)
    if hyper.phi_model == "iw":
        if data.replicate_group is None:
            raise ValueError("phi_model 'iw' needs replicate_group metadata")
        groups = np.asarray(data.replicate_group)
        same = groups[:, None] == groups[None, :]
        scale = 0.9 * same + 0.1 * np.eye(n)
        return InvWishartPhi(matrix_value=scale.copy(), scale=scale, dof=10.0 * n)
    if hyper.phi_model == "gp":
        if data.time is None or data.subject is None:
            raise ValueError("phi_model 'gp' needs time and subject metadata")
        return GpKernelPhi(length_scale=1.0, noise=0.1,
                           times=np.asarray(data.time, dtype=float),
                           subject=np.asarray(data.subject))
    raise ValueError(f"unknown phi model {hyper.phi_model!r}")


def run_chain(data: Dataset, hyper: Hyperparameters, rng,
              plan: SweepPlan | None = None, threads: int = 1,
              progress=None) -> PosteriorArchive:
    """Run the full sampler and archive every thin-th post-burn-in draw.

    Draws are bit-identical for a fixed seed regardless of ``threads``:
    every block derives its stream from (seed, sweep, block id).
    """
    data.validate()
    hyper.validate()
    stream = rng if isinstance(rng, RngStream) else RngStream(int(rng))
    plan = plan or default_sweep_plan(hyper.tree)
    plan.validate(hyper.tree)
    if hyper.tree and hyper.n_proteins < 2:
        raise ValueError("tree prior needs at least two latent proteins")

    state = init_state(data, hyper, stream.derive(0, BLOCK_IDS["init"]))
    phi = _initial_phi(data, hyper)
    tree: TreeState | None = None
    if hyper.tree:
        res = smc_resample_tree(state.W, phi, hyper.smc_particles,
                                stream.derive(0, BLOCK_IDS["tree"]), threads=threads)
        tree = res.tree

    draws = []
    for sweep in range(1, hyper.iterations + 1):
        for blk in plan.blocks:
            blk_rng = stream.derive(sweep, BLOCK_IDS[blk.name])
            if blk.name == "noise":
                update_noise_variances(state, data, hyper, blk_rng)
            elif blk.name == "batch_means":
                update_batch_means(state, data, hyper, blk_rng)
            elif blk.name == "scores":
                gen = blk_rng.generator()
                update_systematic_scores(state, data, hyper, gen)
                update_mixing_variances(state, hyper, gen)
            elif blk.name == "loadings":
                update_systematic_loadings(state, data, hyper, blk_rng)
            elif blk.name == "assignments":
                update_assignments(state, data, hyper, blk_rng)
            elif blk.name == "profiles":
                update_protein_profiles(state, data, hyper, blk_rng,
                                        tree=tree, phi=phi)
            elif blk.name == "tree":
                res = smc_resample_tree(state.W, phi, hyper.smc_particles,
                                        blk_rng, threads=threads)
                tree = res.tree
                phi = update_phi(tree, phi, blk_rng.derive(1))
                tree.phi = phi
            elif blk.name == "missing":
                impute_missing(state, data, hyper, blk_rng)
            else:
                raise ValueError(f"unknown sweep block {blk.name!r}")
        if sweep > hyper.burn_in and (sweep - hyper.burn_in) % hyper.thin == 0:
            if tree is not None:
                score = tree_log_marginal(state.W, tree, phi, joint=True)
                draws.append((state.copy(), tree.copy(), score))
            else:
                draws.append((state.copy(), None, float("nan")))
        if progress is not None:
            progress(sweep, state)
    return PosteriorArchive(draws=draws, seed=stream.seed, hyper=hyper)


def effective_num_factors(rho_draws, threshold):
    """Per-draw count of active columns (precision below threshold) plus a
    (median, lo90, hi90) summary across draws."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    rho = np.atleast_2d(np.asarray(rho_draws, dtype=float))
    counts = np.sum(rho < threshold, axis=1)
    summary = (float(np.median(counts)),
               float(np.quantile(counts, 0.05)),
               float(np.quantile(counts, 0.95)))
    return counts, summary


# ---------------------------------------------------------------------------
# Prior-predictive helpers (forward draws of the no-tree joint model)
# ---------------------------------------------------------------------------

def sample_state_from_prior(data: Dataset, hyper: Hyperparameters, rng) -> ModelState:
    """State drawn from the model prior for the given data layout.

    Supports the i.i.d.-profile model only (the tree root carries an
    improper flat prior, so the tree variant has no proper joint to draw).
    """
    if hyper.tree:
        raise ValueError("prior draws require the no-tree model")
    gen = _gen(rng)
    p, n = data.values.shape
    nf = hyper.resolved_n_factors(p)
    npb = hyper.n_proteins
    psi = 1.0 / gen.gamma(hyper.noise_shape, 1.0 / hyper.noise_rate, size=p)
    mu = hyper.batch_mean + math.sqrt(1.0 / hyper.batch_precision) * \
        gen.standard_normal((data.n_batches, p))
    rho = gen.gamma(hyper.ard_shape, 1.0 / hyper.ard_rate, size=nf)
    a = gen.standard_normal((p, nf)) / np.sqrt(rho)[None, :]
    lambda2 = float(gen.gamma(hyper.laplace_shape, 1.0 / hyper.laplace_rate))
    tau = gen.exponential(scale=2.0 / lambda2, size=(nf, n))
    z = gen.standard_normal((nf, n)) * np.sqrt(tau)
    alpha = float(gen.gamma(hyper.conc_shape, 1.0 / hyper.conc_rate))
    v = gen.dirichlet(np.full(npb, alpha))
    u = gen.choice(npb, size=p, p=v) + 1
    b = np.abs(gen.standard_normal(p))
    w = gen.standard_normal((npb, n))
    state = ModelState(mu=mu, A=a, rho=rho, Z=z, tau=tau, lambda2=lambda2,
                       b=b, u=u.astype(int), alpha=alpha, W=w, psi=psi,
                       imputed=np.zeros(int(data.missing_mask.sum())))
    rows, cols = np.nonzero(data.missing_mask)
    if rows.size:
        mean = mu[data.batch - 1].T + a @ z + state.b[:, None] * w[u - 1]
        state.imputed = mean[rows, cols] + np.sqrt(psi[rows]) * gen.standard_normal(rows.size)
    return state

def resample_observed_values(state: ModelState, data: Dataset, rng) -> np.ndarray:
    """New observed-cell values from the likelihood at the current state."""
    gen = _gen(rng)
    mean = state.mu[data.batch - 1].T + state.A @ state.Z + protein_effect(state)
    noise = np.sqrt(state.psi)[:, None] * gen.standard_normal(mean.shape)
    values = np.array(data.values, dtype=float)
    observed = ~data.missing_mask
    values[observed] = (mean + noise)[observed]
    return values
