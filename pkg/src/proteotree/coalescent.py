"""Coalescent tree prior over latent protein profiles.

A binary tree over the N_P protein profiles is built by successive pair
merges with exponential holding times.  Profiles diffuse along branches as
Gaussians with shared N x N sample covariance Phi, so upward message passing
is exact: each node carries an N-vector mean and a scalar message variance
(the Phi factor is common to every branch and factors out).

The tree is resampled inside the Gibbs sweep by a leaves-to-root sequential
Monte Carlo pass: holding times are proposed from the exponential prior,
merge pairs from their marginal-likelihood contributions, and the particle
weight absorbs the pair-sum normalizer.  One particle is then selected by
weight and its internal node values are drawn root-to-leaves, which provides
the parent message (mean, variance) that the profile update consumes at each
leaf.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from scipy import linalg

from .stochastics import RngStream, sample_inverse_wishart, slice_sample_scalar

__all__ = [
    "TreeState",
    "DiagGammaPhi",
    "InvWishartPhi",
    "GpKernelPhi",
    "PhiModel",
    "coalescent_sample_prior",
    "coalescent_log_prior",
    "message_up",
    "upward_pass",
    "tree_log_marginal",
    "smc_resample_tree",
    "SmcResult",
    "downward_complete",
    "leaf_prior_messages",
    "update_phi",
    "select_map_tree",
    "export_newick",
]

_LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# Sample covariance models
# ---------------------------------------------------------------------------

@dataclass
class DiagGammaPhi:
    """Diagonal Phi with independent gamma priors on the precisions."""

    variances: np.ndarray
    shape: float = 1.1
    rate: float = 0.001

    def matrix(self) -> np.ndarray:
        return np.diag(self.variances)


@dataclass
class InvWishartPhi:
    """Dense Phi with a conjugate inverse Wishart prior."""

    matrix_value: np.ndarray
    scale: np.ndarray
    dof: float

    def matrix(self) -> np.ndarray:
        return self.matrix_value


@dataclass
class GpKernelPhi:
    """Squared-exponential kernel over sample times, block-restricted to
    samples from the same subject, plus idiosyncratic noise.

    phi(i,j) = 1[subject_i == subject_j] * exp(-d_ij^2 / length_scale)
               + noise * 1[i == j]
    """

    length_scale: float
    noise: float
    times: np.ndarray
    subject: np.ndarray
    length_scale_bounds: tuple[float, float] = (1e-3, 1e3)
    noise_bounds: tuple[float, float] = (1e-6, 1e3)

    def matrix(self) -> np.ndarray:
        t = np.asarray(self.times, dtype=float)
        d2 = (t[:, None] - t[None, :]) ** 2
        same = np.asarray(self.subject)[:, None] == np.asarray(self.subject)[None, :]
        k = same * np.exp(-d2 / self.length_scale)
        return k + self.noise * np.eye(t.size)


PhiModel = Union[DiagGammaPhi, InvWishartPhi, GpKernelPhi]


def identity_phi(n_samples: int) -> DiagGammaPhi:
    return DiagGammaPhi(variances=np.ones(n_samples))


class PhiOps:
    """Cached factorization of a realized Phi for repeated quadratic forms."""

    def __init__(self, phi, n_samples: Optional[int] = None):
        if isinstance(phi, DiagGammaPhi):
            diag = np.asarray(phi.variances, dtype=float)
        elif isinstance(phi, (InvWishartPhi, GpKernelPhi)):
            diag = None
            mat = phi.matrix()
        else:
            arr = np.asarray(phi, dtype=float)
            if arr.ndim == 0:
                if n_samples is None:
                    raise ValueError("scalar phi needs n_samples")
                diag = np.full(n_samples, float(arr))
            elif arr.ndim == 1:
                diag = arr
            else:
                diag = None
                mat = arr
        if diag is not None:
            if np.any(diag <= 0):
                raise ValueError("phi diagonal must be positive")
            self.diagonal: Optional[np.ndarray] = diag
            self._weights = 1.0 / diag
            self._sd = np.sqrt(diag)
            self.log_det = float(np.sum(np.log(diag)))
            self.n = diag.size
        else:
            mat = 0.5 * (mat + mat.T)
            try:
                self._chol = np.linalg.cholesky(mat)
            except np.linalg.LinAlgError as exc:
                raise ValueError("phi must be symmetric positive definite") from exc
            self.diagonal = None
            self.log_det = float(2.0 * np.sum(np.log(np.diag(self._chol))))
            self.n = mat.shape[0]

    def solve_rows(self, v: np.ndarray) -> np.ndarray:
        """Rows of v mapped through Phi^{-1}."""
        if self.diagonal is not None:
            return v * self._weights
        return linalg.cho_solve((self._chol, True), np.atleast_2d(v).T).T.reshape(v.shape)

    def quad(self, d: np.ndarray) -> float:
        """d Phi^{-1} d^T for a single N-vector d."""
        if self.diagonal is not None:
            return float(np.sum(d * d * self._weights))
        y = linalg.solve_triangular(self._chol, d, lower=True)
        return float(y @ y)

    def correlated_noise(self, gen: np.random.Generator) -> np.ndarray:
        """One draw from N(0, Phi)."""
        z = gen.standard_normal(self.n)
        if self.diagonal is not None:
            return z * self._sd
        return self._chol @ z

    def gaussian_logpdf(self, d: np.ndarray, scale: float) -> float:
        """log N(d; 0, scale * Phi)."""
        if scale <= 0:
            return -math.inf
        return -0.5 * (self.n * (_LOG_2PI + math.log(scale)) + self.log_det
                       + self.quad(d) / scale)


# ---------------------------------------------------------------------------
# Tree state
# ---------------------------------------------------------------------------

@dataclass
class TreeState:
    """Binary merge sequence with Gaussian node messages.

    Node ids: leaves are 0..N_P-1, the node created by merge j has id
    N_P + j.  ``times`` are the (negative, strictly decreasing) merge
    pseudo-times; leaves sit at time zero.  ``node_mean`` / ``node_msgvar``
    hold upward messages, ``node_value`` the values drawn by the downward
    completion pass (leaf rows mirror the profiles the tree was built from).
    """

    merges: np.ndarray
    times: np.ndarray
    node_mean: np.ndarray
    node_msgvar: np.ndarray
    phi: Optional[PhiModel] = None
    node_value: Optional[np.ndarray] = None

    @property
    def n_leaves(self) -> int:
        return self.merges.shape[0] + 1

    def node_time(self, node: int) -> float:
        return 0.0 if node < self.n_leaves else float(self.times[node - self.n_leaves])

    def parent_index(self) -> np.ndarray:
        """Parent node id per node; the root maps to -1."""
        n_nodes = 2 * self.n_leaves - 1
        parent = np.full(n_nodes, -1, dtype=int)
        for j, (left, right) in enumerate(self.merges):
            parent[left] = parent[right] = self.n_leaves + j
        return parent

    def validate(self):
        n = self.n_leaves
        if self.times.shape != (n - 1,):
            raise ValueError("times must have one entry per merge")
        if np.any(self.times >= 0) or np.any(np.diff(self.times) >= 0):
            raise ValueError("merge times must be negative and strictly decreasing")
        seen = set()
        alive = set(range(n))
        for j, (left, right) in enumerate(self.merges):
            if left not in alive or right not in alive or left == right:
                raise ValueError("merges must combine two distinct live blocks")
            alive -= {int(left), int(right)}
            alive.add(n + j)
            seen |= {int(left), int(right)}
        if len(alive) != 1:
            raise ValueError("merge sequence must reduce to a single block")
        if np.any(self.node_msgvar < 0):
            raise ValueError("message variances must be nonnegative")
        return self

    def copy(self) -> "TreeState":
        return TreeState(
            merges=self.merges.copy(), times=self.times.copy(),
            node_mean=self.node_mean.copy(), node_msgvar=self.node_msgvar.copy(),
            phi=self.phi, node_value=None if self.node_value is None else self.node_value.copy(),
        )


# ---------------------------------------------------------------------------
# Prior sampling and density
# ---------------------------------------------------------------------------

def coalescent_sample_prior(n_leaves: int, rng) -> TreeState:
    """Topology and times from the coalescent prior: uniformly random pair
    merges with rate-1 exponential holding times."""
    if n_leaves < 2:
        raise ValueError("need at least two leaves")
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    blocks = list(range(n_leaves))
    merges = np.zeros((n_leaves - 1, 2), dtype=int)
    times = np.zeros(n_leaves - 1)
    t = 0.0
    for j in range(n_leaves - 1):
        t -= gen.exponential()
        i1, i2 = gen.choice(len(blocks), size=2, replace=False)
        left, right = blocks[i1], blocks[i2]
        merges[j] = (min(left, right), max(left, right))
        blocks = [x for x in blocks if x not in (left, right)]
        blocks.append(n_leaves + j)
        times[j] = t
    n_nodes = 2 * n_leaves - 1
    return TreeState(merges=merges, times=times,
                     node_mean=np.zeros((n_nodes, 0)),
                     node_msgvar=np.zeros(n_nodes))


def coalescent_log_prior(n_leaves: int, times: np.ndarray) -> float:
    """Log density of (topology, times) under the coalescent prior."""
    times = np.asarray(times, dtype=float)
    deltas = -np.diff(np.concatenate(([0.0], times)))
    if np.any(deltas <= 0):
        raise ValueError("merge times must be strictly decreasing")
    log_pairs = sum(math.log(math.comb(n_leaves - j, 2)) for j in range(n_leaves - 1))
    return -float(deltas.sum()) - log_pairs


# ---------------------------------------------------------------------------
# Message passing
# ---------------------------------------------------------------------------

def message_up(left: tuple[np.ndarray, float], right: tuple[np.ndarray, float],
               d_left: float, d_right: float) -> tuple[np.ndarray, float]:
    """Combine two child messages into the parent message.

    Branch lengths extend each child's message variance; the parent is the
    precision-weighted combination (Phi cancels between the branches).
    """
    if d_left < 0 or d_right < 0:
        raise ValueError("branch lengths must be nonnegative")
    m_l, s_l = left
    m_r, s_r = right
    sl = s_l + d_left
    sr = s_r + d_right
    if sl == 0 and sr == 0:
        raise ValueError("both children are deterministic at the merge point")
    if sl == 0:
        return np.array(m_l, dtype=float, copy=True), 0.0
    if sr == 0:
        return np.array(m_r, dtype=float, copy=True), 0.0
    s_parent = 1.0 / (1.0 / sl + 1.0 / sr)
    m_parent = s_parent * (np.asarray(m_l) / sl + np.asarray(m_r) / sr)
    return m_parent, s_parent


def upward_pass(leaf_values: np.ndarray, merges: np.ndarray, times: np.ndarray,
                ops: PhiOps) -> tuple[np.ndarray, np.ndarray, float]:
    """Leaves-to-root message accumulation.

    Returns per-node means, per-node message variances and the data log
    marginal: the sum over merges of the Gaussian convolution terms
    log N(m_l - m_r; 0, (s_l' + s_r') Phi).
    """
    n_leaves, n_dim = leaf_values.shape
    n_nodes = 2 * n_leaves - 1
    means = np.zeros((n_nodes, n_dim))
    svar = np.zeros(n_nodes)
    means[:n_leaves] = leaf_values
    log_marginal = 0.0
    for j, (left, right) in enumerate(merges):
        t_j = times[j]
        t_left = 0.0 if left < n_leaves else times[left - n_leaves]
        t_right = 0.0 if right < n_leaves else times[right - n_leaves]
        sl = svar[left] + (t_left - t_j)
        sr = svar[right] + (t_right - t_j)
        log_marginal += ops.gaussian_logpdf(means[left] - means[right], sl + sr)
        m, s = message_up((means[left], svar[left]), (means[right], svar[right]),
                          t_left - t_j, t_right - t_j)
        means[n_leaves + j] = m
        svar[n_leaves + j] = s
    return means, svar, log_marginal


def tree_log_marginal(leaf_values: np.ndarray, tree: TreeState, phi=None,
                      joint: bool = True) -> float:
    """log p(W | topology, times, Phi), plus the coalescent prior term when
    scoring jointly (the default used for selecting the summary tree)."""
    source = tree.phi if phi is None else phi
    if source is None:
        raise ValueError("no phi available for tree scoring")
    ops = source if isinstance(source, PhiOps) else PhiOps(source, leaf_values.shape[1])
    _, _, loglik = upward_pass(np.asarray(leaf_values, dtype=float), tree.merges,
                               tree.times, ops)
    if joint:
        loglik += coalescent_log_prior(tree.n_leaves, tree.times)
    return loglik


# ---------------------------------------------------------------------------
# Sequential Monte Carlo over trees
# ---------------------------------------------------------------------------

class _Particle:
    __slots__ = ("n_leaves", "ids", "means", "g", "gram", "t", "merges", "times", "gen")

    def __init__(self, leaf_values, ops, gen):
        self.n_leaves = leaf_values.shape[0]
        self.ids = list(range(self.n_leaves))
        self.means = np.array(leaf_values, dtype=float)
        self.g = np.zeros(self.n_leaves)     # message variance + formation time
        sol = ops.solve_rows(self.means)
        self.gram = self.means @ sol.T
        self.t = 0.0
        self.merges: list[tuple[int, int]] = []
        self.times: list[float] = []
        self.gen = gen

    def clone(self) -> "_Particle":
        other = object.__new__(_Particle)
        other.n_leaves = self.n_leaves
        other.ids = list(self.ids)
        other.means = self.means.copy()
        other.g = self.g.copy()
        other.gram = self.gram.copy()
        other.t = self.t
        other.merges = list(self.merges)
        other.times = list(self.times)
        other.gen = self.gen
        return other


def _pair_log_liks(p: _Particle, t_new: float, ops: PhiOps) -> np.ndarray:
    """Upper-triangular matrix of log N(m_a - m_b; 0, (s_a' + s_b') Phi)."""
    diag = np.diag(p.gram)
    quad = diag[:, None] + diag[None, :] - 2.0 * p.gram
    scale = (p.g[:, None] + p.g[None, :]) - 2.0 * t_new
    k = len(p.ids)
    with np.errstate(divide="ignore", invalid="ignore"):
        ll = -0.5 * (ops.n * (_LOG_2PI + np.log(scale)) + ops.log_det + quad / scale)
    return ll[np.triu_indices(k, 1)]


def _advance(p: _Particle, ops: PhiOps) -> float:
    """One merge step: propose a holding time from the prior and a pair from
    its likelihood contribution; return the log weight increment."""
    k = len(p.ids)
    t_new = p.t - p.gen.exponential()
    log_liks = _pair_log_liks(p, t_new, ops)
    top = log_liks.max()
    w = np.exp(log_liks - top)
    total = w.sum()
    # log of the pair-average likelihood: sum over pairs / number of pairs
    increment = top + math.log(total) - math.log(len(log_liks))
    r = p.gen.random() * total
    choice = int(np.searchsorted(np.cumsum(w), r, side="left"))
    choice = min(choice, len(log_liks) - 1)
    iu = np.triu_indices(k, 1)
    a, bidx = int(iu[0][choice]), int(iu[1][choice])

    sl = p.g[a] - t_new
    sr = p.g[bidx] - t_new
    s_parent = 1.0 / (1.0 / sl + 1.0 / sr)
    m_parent = s_parent * (p.means[a] / sl + p.means[bidx] / sr)

    left_id, right_id = p.ids[a], p.ids[bidx]
    new_id = p.n_leaves + len(p.merges)
    p.merges.append((min(left_id, right_id), max(left_id, right_id)))
    p.times.append(t_new)
    p.t = t_new

    keep = [i for i in range(k) if i not in (a, bidx)]
    p.ids = [p.ids[i] for i in keep] + [new_id]
    means = np.vstack([p.means[keep], m_parent[None, :]])
    g = np.concatenate([p.g[keep], [s_parent + t_new]])
    sol_new = ops.solve_rows(m_parent[None, :])[0]
    cross = means @ sol_new
    gram = np.empty((k - 1, k - 1))
    gram[:-1, :-1] = p.gram[np.ix_(keep, keep)]
    gram[-1, :] = cross
    gram[:, -1] = cross
    p.means = means
    p.g = g
    p.gram = gram
    return increment


@dataclass
class SmcResult:
    tree: TreeState
    log_weights: np.ndarray
    log_evidence: float


def smc_resample_tree(leaf_values: np.ndarray, phi, n_particles: int, rng,
                      ess_fraction: float = 0.5, threads: int = 1) -> SmcResult:
    """Leaves-to-root SMC pass over tree topologies and merge times.

    Holding times are proposed from the coalescent prior, merge pairs from
    their marginal-likelihood contributions; each particle's weight picks up
    the pair-averaged likelihood.  Multinomial resampling triggers when the
    effective sample size drops below ``ess_fraction * n_particles``.  One
    particle is finally drawn by weight and completed by a root-to-leaves
    value pass.  The running mean of the weights estimates the joint
    coalescent marginal likelihood of the profiles.
    """
    leaf_values = np.asarray(leaf_values, dtype=float)
    n_leaves = leaf_values.shape[0]
    if n_leaves < 2:
        raise ValueError("need at least two leaves")
    if n_particles < 1:
        raise ValueError("need at least one particle")
    if not isinstance(rng, RngStream):
        rng = RngStream(int(rng))
    ops = phi if isinstance(phi, PhiOps) else PhiOps(phi, leaf_values.shape[1])

    epoch = 0
    particles = [_Particle(leaf_values, ops, rng.derive(1, slot, epoch).generator())
                 for slot in range(n_particles)]
    log_w = np.zeros(n_particles)
    log_evidence = 0.0
    resample_gen = rng.derive(2).generator()
    pool = None
    if threads > 1 and n_particles > 1:
        from concurrent.futures import ThreadPoolExecutor
        pool = ThreadPoolExecutor(max_workers=threads)

    def step_all():
        if pool is not None:
            return list(pool.map(lambda p: _advance(p, ops), particles))
        return [_advance(p, ops) for p in particles]

    try:
        for step in range(n_leaves - 1):
            log_w += np.asarray(step_all())
            if step < n_leaves - 2:
                shifted = log_w - log_w.max()
                w = np.exp(shifted)
                ess = w.sum() ** 2 / np.sum(w * w)
                if ess < ess_fraction * n_particles:
                    log_evidence += log_w.max() + math.log(w.sum() / n_particles)
                    probs = w / w.sum()
                    counts = resample_gen.multinomial(n_particles, probs)
                    epoch += 1
                    survivors = []
                    for idx, c in enumerate(counts):
                        for _ in range(c):
                            survivors.append(particles[idx].clone())
                    for slot, p in enumerate(survivors):
                        p.gen = rng.derive(1, slot, epoch).generator()
                    particles = survivors
                    log_w = np.zeros(n_particles)
    finally:
        if pool is not None:
            pool.shutdown()

    top = log_w.max()
    w = np.exp(log_w - top)
    log_evidence += top + math.log(w.sum() / n_particles)

    select_gen = rng.derive(3).generator()
    r = select_gen.random() * w.sum()
    chosen = particles[min(int(np.searchsorted(np.cumsum(w), r)), n_particles - 1)]

    merges = np.asarray(chosen.merges, dtype=int)
    times = np.asarray(chosen.times)
    means, svar, _ = upward_pass(leaf_values, merges, times, ops)
    tree = TreeState(merges=merges, times=times, node_mean=means,
                     node_msgvar=svar, phi=phi if not isinstance(phi, PhiOps) else None)
    downward_complete(tree, leaf_values, ops, rng.derive(4))
    return SmcResult(tree=tree, log_weights=log_w.copy(), log_evidence=log_evidence)


def downward_complete(tree: TreeState, leaf_values: np.ndarray, phi, rng) -> np.ndarray:
    """Root-to-leaves draw of internal node values by Gaussian conditioning.

    Fills ``tree.node_value``: leaves carry the given profiles, internal
    nodes fresh draws from their conditional given the parent draw and the
    upward message.
    """
    ops = phi if isinstance(phi, PhiOps) else PhiOps(phi, leaf_values.shape[1])
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    n_leaves = tree.n_leaves
    n_nodes = 2 * n_leaves - 1
    values = np.zeros((n_nodes, leaf_values.shape[1]))
    values[:n_leaves] = leaf_values
    root = n_nodes - 1
    s_root = tree.node_msgvar[root]
    values[root] = tree.node_mean[root] + math.sqrt(s_root) * ops.correlated_noise(gen)
    for j in range(n_leaves - 2, -1, -1):
        parent = n_leaves + j
        for child in tree.merges[j]:
            if child < n_leaves:
                continue
            branch = tree.node_time(child) - tree.times[j]
            s_child = tree.node_msgvar[child]
            if branch <= 0:
                values[child] = values[parent]
                continue
            if s_child <= 0:
                values[child] = tree.node_mean[child]
                continue
            s_cond = 1.0 / (1.0 / s_child + 1.0 / branch)
            m_cond = s_cond * (tree.node_mean[child] / s_child + values[parent] / branch)
            values[child] = m_cond + math.sqrt(s_cond) * ops.correlated_noise(gen)
    tree.node_value = values
    return values


def leaf_prior_messages(tree: TreeState) -> tuple[np.ndarray, np.ndarray]:
    """Per-leaf parent message (mean m_k, scalar s_k with S_k = s_k Phi).

    The mean is the drawn value of the leaf's parent node, the variance the
    branch length back to it.  Requires a completed downward pass.
    """
    if tree.node_value is None:
        raise ValueError("tree has no drawn node values; run downward_complete")
    parent = tree.parent_index()
    n_leaves = tree.n_leaves
    means = np.zeros((n_leaves, tree.node_value.shape[1]))
    svar = np.zeros(n_leaves)
    for leaf in range(n_leaves):
        par = parent[leaf]
        means[leaf] = tree.node_value[par]
        svar[leaf] = -tree.times[par - n_leaves]
    return means, svar


# ---------------------------------------------------------------------------
# Phi updates
# ---------------------------------------------------------------------------

def _tree_edges(tree: TreeState) -> tuple[np.ndarray, np.ndarray]:
    """Per-edge scaled increments: (child - parent) values and branch lengths."""
    if tree.node_value is None:
        raise ValueError("tree has no drawn node values; run downward_complete")
    deltas = []
    lengths = []
    for j, (left, right) in enumerate(tree.merges):
        parent = tree.n_leaves + j
        for child in (int(left), int(right)):
            dt = tree.node_time(child) - tree.times[j]
            if dt <= 0:
                continue
            deltas.append(tree.node_value[child] - tree.node_value[parent])
            lengths.append(dt)
    return np.asarray(deltas), np.asarray(lengths)


def _edge_log_lik(deltas: np.ndarray, lengths: np.ndarray, ops: PhiOps) -> float:
    total = 0.0
    for d, dt in zip(deltas, lengths):
        total += ops.gaussian_logpdf(d, dt)
    return total


def update_phi(tree: TreeState, phi: PhiModel, rng) -> PhiModel:
    """Resample the sample-covariance model given the drawn tree values."""
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    deltas, lengths = _tree_edges(tree)
    n_edges = len(lengths)
    if isinstance(phi, DiagGammaPhi):
        if n_edges == 0:
            shape = np.full(phi.variances.size, phi.shape)
            rate = np.full(phi.variances.size, phi.rate)
        else:
            shape = phi.shape + 0.5 * n_edges
            rate = phi.rate + 0.5 * np.sum(deltas ** 2 / lengths[:, None], axis=0)
        precision = gen.gamma(shape, 1.0 / rate)
        return DiagGammaPhi(variances=1.0 / precision, shape=phi.shape, rate=phi.rate)
    if isinstance(phi, InvWishartPhi):
        scale = phi.scale.copy()
        for d, dt in zip(deltas, lengths):
            scale += np.outer(d, d) / dt
        draw = sample_inverse_wishart(scale, phi.dof + n_edges, gen)
        return InvWishartPhi(matrix_value=draw, scale=phi.scale, dof=phi.dof)
    if isinstance(phi, GpKernelPhi):
        def loglik_at(log_ell, log_noise):
            cand = GpKernelPhi(length_scale=math.exp(log_ell), noise=math.exp(log_noise),
                               times=phi.times, subject=phi.subject,
                               length_scale_bounds=phi.length_scale_bounds,
                               noise_bounds=phi.noise_bounds)
            try:
                ops = PhiOps(cand)
            except ValueError:
                return -math.inf
            return _edge_log_lik(deltas, lengths, ops)

        log_ell = math.log(phi.length_scale)
        log_noise = math.log(phi.noise)
        lo, hi = (math.log(phi.length_scale_bounds[0]), math.log(phi.length_scale_bounds[1]))
        log_ell = slice_sample_scalar(lambda x: loglik_at(x, log_noise), log_ell, gen,
                                      width=1.0, lower=lo, upper=hi)
        lo, hi = (math.log(phi.noise_bounds[0]), math.log(phi.noise_bounds[1]))
        log_noise = slice_sample_scalar(lambda x: loglik_at(log_ell, x), log_noise, gen,
                                        width=1.0, lower=lo, upper=hi)
        return GpKernelPhi(length_scale=math.exp(log_ell), noise=math.exp(log_noise),
                           times=phi.times, subject=phi.subject,
                           length_scale_bounds=phi.length_scale_bounds,
                           noise_bounds=phi.noise_bounds)
    raise TypeError(f"unsupported phi model {type(phi).__name__}")


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------

def select_map_tree(archive) -> TreeState:
    """Archived tree with the largest stored log marginal; ties keep the
    earliest draw."""
    if len(archive.draws) == 0:
        raise ValueError("empty archive")
    scores = archive.tree_log_marginals()
    trees = archive.trees()
    order = np.argmax(scores)
    tree = trees[int(order)]
    if tree is None:
        raise ValueError("archive contains no tree draws")
    return tree


def export_newick(tree: TreeState, labels: Sequence[str]) -> str:
    """Newick text with branch lengths equal to pseudo-time differences.

    Children are ordered by the lexicographically smallest leaf label in
    their subtree, so identical trees always serialize identically.
    """
    n_leaves = tree.n_leaves
    if len(labels) != n_leaves:
        raise ValueError("need exactly one label per leaf")

    def render(node: int) -> tuple[str, str]:
        if node < n_leaves:
            return str(labels[node]), str(labels[node])
        j = node - n_leaves
        parts = []
        for child in tree.merges[j]:
            text, smallest = render(int(child))
            length = tree.node_time(int(child)) - tree.times[j]
            parts.append((smallest, f"{text}:{length:.12g}"))
        parts.sort(key=lambda item: item[0])
        rendered = "(" + ",".join(p[1] for p in parts) + ")"
        return rendered, parts[0][0]

    body, _ = render(2 * n_leaves - 2)
    return body + ";"
