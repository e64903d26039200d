"""Command-line front end: simulate, fit, evaluate, confound.

Every command reads/writes the plain-text formats from ``dataio`` and drops
a ``manifest.json`` (written atomically at the end of the run) listing its
inputs, outputs, seed and wall clock.  Exit codes: 0 ok, 2 input error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__
from .coalescent import export_newick, select_map_tree, tree_log_marginal
from .core import Dataset, Hyperparameters, implied_covariance
from .dataio import (
    assemble_dataset,
    atomic_write_json,
    config_to_hyper,
    config_to_sim,
    default_ig_ids,
    default_sample_ids,
    read_config_file,
    read_data_tsv,
    read_matrix_tsv,
    read_table,
    write_data_tsv,
    write_matrix_tsv,
    write_table,
)
from .gibbs import annotation_indices, effective_num_factors, run_chain
from .metrics import (
    confusion,
    consensus_labels,
    detect_effects,
    identity,
    lda_auc,
    missing_errors,
    covariance_errors,
    stability,
    unique_fraction,
)
from .simulate import SimConfig, generate_confounded_dataset, generate_dataset
from .stochastics import RngStream

INPUT_ERROR = 2
NUMERICAL_ERROR = 3


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def _quantiles(stack: np.ndarray):
    """(median, lo90, hi90) along the first axis."""
    return (np.median(stack, axis=0), np.quantile(stack, 0.05, axis=0),
            np.quantile(stack, 0.95, axis=0))


def _write_summary_csv(path, header, columns):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in zip(*columns):
            fh.write(",".join(format(c, ".17g") if isinstance(c, float) else str(c)
                              for c in row) + "\n")


def _leaf_labels(labels: list[str], n_proteins: int) -> list[str]:
    out = list(labels)
    for k in range(len(out) + 1, n_proteins + 1):
        out.append(f"lp{k:03d}")
    return out


def write_fit_outputs(out_dir, archive, dataset: Dataset, ig_ids, sample_ids,
                      save_profile_draws: bool = False) -> list[str]:
    """Persist posterior summaries, traces, trees and the imputed matrix."""
    os.makedirs(os.path.join(out_dir, "summaries"), exist_ok=True)
    states = archive.states()
    hyper = archive.hyper
    outputs = []

    def track(path):
        outputs.append(os.path.relpath(path, out_dir))
        return path

    p = states[0].n_igs
    n = states[0].n_samples
    npb = states[0].n_proteins

    psi = np.stack([s.psi for s in states])
    b = np.stack([s.b for s in states])
    rho = np.stack([s.rho for s in states])
    lam = np.array([s.lambda2 for s in states])
    alpha = np.array([s.alpha for s in states])
    counts, _ = effective_num_factors(rho, hyper.ard_threshold)

    med, lo, hi = _quantiles(psi)
    _write_summary_csv(track(os.path.join(out_dir, "summaries", "psi.csv")),
                       ["ig", "median", "lo90", "hi90"],
                       [ig_ids, med.tolist(), lo.tolist(), hi.tolist()])
    med, lo, hi = _quantiles(b)
    _write_summary_csv(track(os.path.join(out_dir, "summaries", "b.csv")),
                       ["ig", "median", "lo90", "hi90"],
                       [ig_ids, med.tolist(), lo.tolist(), hi.tolist()])
    med, lo, hi = _quantiles(rho)
    _write_summary_csv(track(os.path.join(out_dir, "summaries", "rho.csv")),
                       ["factor", "median", "lo90", "hi90"],
                       [list(range(1, rho.shape[1] + 1)), med.tolist(),
                        lo.tolist(), hi.tolist()])

    mu = np.stack([s.mu for s in states])            # draws x N_B x p
    med, lo, hi = _quantiles(mu.reshape(mu.shape[0], -1))
    batch_col = [m + 1 for m in range(mu.shape[1]) for _ in range(p)]
    ig_col = [ig_ids[i] for _ in range(mu.shape[1]) for i in range(p)]
    _write_summary_csv(track(os.path.join(out_dir, "summaries", "mu.csv")),
                       ["batch", "ig", "median", "lo90", "hi90"],
                       [batch_col, ig_col, med.tolist(), lo.tolist(), hi.tolist()])

    w = np.stack([s.W for s in states])              # draws x N_P x N
    med, lo, hi = _quantiles(w.reshape(w.shape[0], -1))
    prot_col = [k + 1 for k in range(npb) for _ in range(n)]
    samp_col = [sample_ids[j] for _ in range(npb) for j in range(n)]
    _write_summary_csv(track(os.path.join(out_dir, "summaries", "profiles.csv")),
                       ["protein", "sample", "median", "lo90", "hi90"],
                       [prot_col, samp_col, med.tolist(), lo.tolist(), hi.tolist()])

    scalar_rows = []
    for name, series in (("lambda2", lam), ("alpha", alpha),
                         ("n_factors_effective", counts.astype(float))):
        scalar_rows.append((name, float(np.median(series)),
                            float(np.quantile(series, 0.05)),
                            float(np.quantile(series, 0.95))))
    _write_summary_csv(track(os.path.join(out_dir, "summaries", "scalars.csv")),
                       ["name", "median", "lo90", "hi90"],
                       [[r[0] for r in scalar_rows], [r[1] for r in scalar_rows],
                        [r[2] for r in scalar_rows], [r[3] for r in scalar_rows]])

    with open(track(os.path.join(out_dir, "u_trace.tsv")), "w") as fh:
        for s in states:
            fh.write("\t".join(str(int(x)) for x in s.u) + "\n")
    write_matrix_tsv(track(os.path.join(out_dir, "rho_trace.tsv")), rho)
    if save_profile_draws:
        write_matrix_tsv(track(os.path.join(out_dir, "w_trace.tsv")),
                         w.reshape(w.shape[0], -1))

    _, labels = annotation_indices(dataset, npb)
    leaf_labels = _leaf_labels(labels, npb)
    trees = archive.trees()
    if any(t is not None for t in trees):
        with open(track(os.path.join(out_dir, "trees.nwk")), "w") as fh:
            for t in trees:
                fh.write(export_newick(t, leaf_labels) + "\n")
        map_tree = select_map_tree(archive)
        with open(track(os.path.join(out_dir, "tree.nwk")), "w") as fh:
            fh.write(export_newick(map_tree, leaf_labels) + "\n")

    sigma_hat = np.zeros((p, p))
    for s in states:
        sigma_hat += implied_covariance(s)
    sigma_hat /= len(states)
    write_matrix_tsv(track(os.path.join(out_dir, "sigma_hat.tsv")), sigma_hat)

    filled = np.array(dataset.values, dtype=float)
    if dataset.missing_mask.any():
        imputed_mean = np.mean(np.stack([s.imputed for s in states]), axis=0)
        rows, cols = np.nonzero(dataset.missing_mask)
        filled[rows, cols] = imputed_mean
    write_data_tsv(track(os.path.join(out_dir, "imputed.tsv")), filled,
                   np.zeros_like(dataset.missing_mask), ig_ids, sample_ids)
    return outputs


def _missing_warning(dataset: Dataset):
    annotated = np.array(sorted(dataset.annotations)) - 1
    if annotated.size == 0:
        return
    frac = dataset.missing_mask[annotated].mean(axis=0)
    bad = np.nonzero(frac > 0.3)[0]
    if bad.size:
        print(f"warning: {bad.size} sample(s) exceed 30% missing values in "
              f"annotated rows (columns {', '.join(str(j + 1) for j in bad[:10])}"
              f"{'...' if bad.size > 10 else ''})", file=sys.stderr)


def _manifest(out_dir, command, config_path, seed, inputs, outputs, started, status):
    atomic_write_json(os.path.join(out_dir, "manifest.json"), {
        "command": command,
        "config": config_path,
        "seed": seed,
        "inputs": inputs,
        "outputs": sorted(outputs),
        "version": f"proteotree-{__version__}",
        "wall_clock_seconds": round(time.time() - started, 3),
        "status": status,
    })


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def simulate_command(config_path, out_dir, seed=None, confounded=False,
                     overlap=0.5) -> int:
    started = time.time()
    cfg = read_config_file(config_path)
    sim = config_to_sim(cfg)
    if seed is not None:
        sim.seed = seed
    os.makedirs(os.path.join(out_dir, "truth"), exist_ok=True)
    rng = RngStream(sim.seed)
    if confounded:
        dataset, truth = generate_confounded_dataset(sim, overlap, rng)
    else:
        dataset, truth = generate_dataset(sim, rng)
    ig_ids = default_ig_ids(sim.n_igs)
    sample_ids = default_sample_ids(sim.n_samples)
    outputs = []

    def track(rel):
        outputs.append(rel)
        return os.path.join(out_dir, rel)

    write_data_tsv(track("data.tsv"), dataset.values, dataset.missing_mask,
                   ig_ids, sample_ids)
    write_table(track("batches.tsv"), ["sample", "batch"],
                zip(sample_ids, dataset.batch.tolist()))
    write_table(track("annotations.tsv"), ["ig", "protein"],
                [(ig_ids[i - 1], lab) for i, lab in sorted(dataset.annotations.items())])
    write_matrix_tsv(track(os.path.join("truth", "sigma.tsv")), truth.sigma)
    write_table(track(os.path.join("truth", "labels.tsv")), ["ig", "protein"],
                [(ig_ids[i], truth.labels[truth.u[i] - 1]) for i in range(sim.n_igs)])
    write_matrix_tsv(track(os.path.join("truth", "missing_mask.tsv")),
                     truth.missing_mask.astype(float))
    write_data_tsv(track(os.path.join("truth", "complete.tsv")), truth.complete,
                   np.zeros_like(truth.missing_mask), ig_ids, sample_ids)
    if truth.effect is not None:
        write_table(track(os.path.join("truth", "effects.tsv")),
                    ["sample", "effect"], zip(sample_ids, truth.effect.tolist()))
    _manifest(out_dir, "simulate", config_path, sim.seed, [config_path],
              outputs, started, "ok")
    return 0


def fit_command(data_path, batches_path, out_dir, annotations_path=None,
                metadata_path=None, config_path=None, seed=None, iterations=None,
                burn_in=None, thin=None, particles=None, phi=None, tree=None,
                threads=1, save_profile_draws=None) -> int:
    started = time.time()
    cfg = read_config_file(config_path) if config_path else {}
    hyper = config_to_hyper(cfg)
    if iterations is not None:
        hyper.iterations = iterations
    if burn_in is not None:
        hyper.burn_in = burn_in
    if thin is not None:
        hyper.thin = thin
    if particles is not None:
        hyper.smc_particles = particles
    if phi is not None:
        hyper.phi_model = phi
    if tree is not None:
        hyper.tree = tree
    run_seed = seed if seed is not None else int(cfg.get("seed", 0))
    save_draws = (save_profile_draws if save_profile_draws is not None
                  else cfg.get("save_profile_draws", "false").lower() == "true")

    values, mask, ig_ids, sample_ids = read_data_tsv(data_path)
    header, rows = read_table(batches_path)
    batch_by_sample = {r[0]: r[1] for r in rows}
    annotations_by_ig = None
    inputs = [data_path, batches_path]
    if annotations_path:
        _, arows = read_table(annotations_path)
        annotations_by_ig = {r[0]: r[1] for r in arows}
        inputs.append(annotations_path)
    metadata = None
    if metadata_path:
        mheader, mrows = read_table(metadata_path)
        metadata = {col: {r[0]: r[j] for r in mrows}
                    for j, col in enumerate(mheader) if j > 0}
        inputs.append(metadata_path)
    dataset = assemble_dataset(values, mask, ig_ids, sample_ids,
                               batch_by_sample, annotations_by_ig, metadata)
    if annotations_by_ig:
        n_annotated = len(set(annotations_by_ig.values()))
        if "fit_proteins" not in cfg and "proteins" not in cfg:
            hyper.n_proteins = max(hyper.n_proteins, n_annotated)
    _missing_warning(dataset)
    hyper.validate()

    archive = run_chain(dataset, hyper, RngStream(run_seed), threads=threads)
    os.makedirs(out_dir, exist_ok=True)
    outputs = write_fit_outputs(out_dir, archive, dataset, ig_ids, sample_ids,
                                save_profile_draws=save_draws)
    _manifest(out_dir, "fit", config_path, run_seed, inputs, outputs, started, "ok")
    return 0


def _truth_label_indices(truth_labels: dict[str, str], ig_ids, n_proteins):
    labels = sorted(set(truth_labels.values()))
    index = {lab: k + 1 for k, lab in enumerate(labels)}
    return np.array([index[truth_labels[ig]] for ig in ig_ids]), len(labels)


def evaluate_command(fit_dir, truth_dir, out_path=None) -> int:
    started = time.time()
    out_path = out_path or os.path.join(fit_dir, "metrics.csv")
    u_trace = np.loadtxt(os.path.join(fit_dir, "u_trace.tsv"), dtype=int, ndmin=2)
    rho_trace = read_matrix_tsv(os.path.join(fit_dir, "rho_trace.tsv"))
    _, label_rows = read_table(os.path.join(truth_dir, "labels.tsv"))
    truth_by_ig = {r[0]: r[1] for r in label_rows}
    values, _, ig_ids, sample_ids = read_data_tsv(os.path.join(fit_dir, "imputed.tsv"))
    truth_idx, n_labels = _truth_label_indices(truth_by_ig, ig_ids, None)
    n_proteins = max(int(u_trace.max()), n_labels)

    per_draw_identity = [identity(row, truth_idx, n_proteins) for row in u_trace]
    per_draw_confusion = [confusion(row, truth_idx, n_proteins) for row in u_trace]
    per_draw_unique = [unique_fraction(consensus_labels(row, truth_idx, n_proteins))
                       for row in u_trace]
    _, nf_summary = effective_num_factors(rho_trace, 1e3)

    rows = [
        ("structural", "identity", float(np.median(per_draw_identity))),
        ("structural", "confusion", float(np.median(per_draw_confusion))),
        ("structural", "stability", stability(u_trace)),
        ("structural", "unique", float(np.median(per_draw_unique))),
        ("structural", "nf_median", nf_summary[0]),
        ("structural", "nf_lo90", nf_summary[1]),
        ("structural", "nf_hi90", nf_summary[2]),
    ]

    sigma_path = os.path.join(truth_dir, "sigma.tsv")
    if os.path.exists(sigma_path):
        sigma_hat = read_matrix_tsv(os.path.join(fit_dir, "sigma_hat.tsv"))
        sigma = read_matrix_tsv(sigma_path)
        mse, mae, mab = covariance_errors(sigma_hat, sigma)
        rows += [("covariance", "mse", mse), ("covariance", "mae", mae),
                 ("covariance", "mab", mab)]

    mask_path = os.path.join(truth_dir, "missing_mask.tsv")
    if os.path.exists(mask_path):
        mask = read_matrix_tsv(mask_path).astype(bool)
        complete, _, _, _ = read_data_tsv(os.path.join(truth_dir, "complete.tsv"))
        mse, mae, mab = missing_errors(values[mask], complete[mask])
        rows += [("missing", "mse", mse), ("missing", "mae", mae),
                 ("missing", "mab", mab)]

    effects_path = os.path.join(truth_dir, "effects.tsv")
    if os.path.exists(effects_path):
        _, erow = read_table(effects_path)
        effect_by_sample = {r[0]: int(r[1]) for r in erow}
        groups = np.array([effect_by_sample[s] for s in sample_ids])
        _, prow = read_table(os.path.join(fit_dir, "summaries", "profiles.csv"))
        n_prot = max(int(r[0]) for r in prow)
        med = np.array([float(r[2]) for r in prow]).reshape(n_prot, -1)
        detected = detect_effects(med, groups)
        rows.append(("detection", "detected_proteins",
                     ";".join(str(k) for k in detected) or "none"))
        w_path = os.path.join(fit_dir, "w_trace.tsv")
        if os.path.exists(w_path):
            flat = read_matrix_tsv(w_path)
            w_draws = flat.reshape(flat.shape[0], n_prot, -1)
            for k in range(1, n_prot + 1):
                med_auc, lo, hi = lda_auc(w_draws, groups, k)
                rows.append(("auc", f"protein_{k}",
                             f"{med_auc:.6g};{lo:.6g};{hi:.6g}"))

    with open(out_path, "w") as fh:
        fh.write("section,name,value\n")
        for section, name, value in rows:
            text = format(value, ".17g") if isinstance(value, float) else str(value)
            fh.write(f"{section},{name},{text}\n")
    _manifest(fit_dir, "evaluate", None, None, [fit_dir, truth_dir],
              [os.path.relpath(out_path, fit_dir)], started, "ok")
    return 0


def confound_replicate(sim: SimConfig, hyper: Hyperparameters, tau: float,
                       seed: int, threads: int = 1) -> tuple[int, int]:
    """Generate one confounded replicate, fit it, and count detected effects.

    Returns (true positives among proteins {1, 2}, false positives).
    """
    dataset, truth = generate_confounded_dataset(sim, tau, RngStream(seed))
    archive = run_chain(dataset, hyper, RngStream(seed + 1), threads=threads)
    w_mean = np.mean(np.stack([s.W for s in archive.states()]), axis=0)
    detected = detect_effects(w_mean, truth.effect)
    tp = len([k for k in detected if k <= 2])
    fp = len([k for k in detected if k > 2])
    return tp, fp


def _confound_cell(args):
    sim, hyper, tau, seed = args
    return (tau, seed) + confound_replicate(sim, hyper, tau, seed)


def confound_command(config_path, out_dir, taus, replicates, seed=0, threads=1) -> int:
    started = time.time()
    cfg = read_config_file(config_path)
    sim = config_to_sim(cfg)
    sim.n_batches = 2
    hyper = config_to_hyper(cfg)
    os.makedirs(out_dir, exist_ok=True)
    tasks = [(sim, hyper, tau, seed + 1000 * idx + r)
             for idx, tau in enumerate(taus) for r in range(replicates)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_confound_cell, tasks))
    else:
        results = [_confound_cell(t) for t in tasks]

    long_rows = [(tau, s, tp, fp) for tau, s, tp, fp in results]
    write_table(os.path.join(out_dir, "confound_long.tsv"),
                ["tau", "seed", "true_positives", "false_positives"], long_rows)
    rate_rows = []
    for tau in taus:
        cell = [(tp, fp) for t, _, tp, fp in results if t == tau]
        tps = np.array([c[0] for c in cell])
        fps = np.array([c[1] for c in cell])
        rate_rows.append((tau, float(np.mean(tps == 0)), float(np.mean(tps == 1)),
                          float(np.mean(tps == 2)), float(np.mean(fps > 0))))
    write_table(os.path.join(out_dir, "rates.csv"),
                ["tau", "rate_tp0", "rate_tp1", "rate_tp2", "rate_fp_any"], rate_rows)
    _manifest(out_dir, "confound", config_path, seed, [config_path],
              ["confound_long.tsv", "rates.csv"], started, "ok")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="proteotree",
                                     description="Bayesian protein-tree factor model")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate a synthetic dataset")
    sim.add_argument("--config", required=True)
    sim.add_argument("--out", required=True)
    sim.add_argument("--seed", type=int, default=None)
    sim.add_argument("--confounded", action="store_true")
    sim.add_argument("--overlap", type=float, default=0.5)

    fit = sub.add_parser("fit", help="run the sampler on a dataset")
    fit.add_argument("--data", required=True)
    fit.add_argument("--batches", required=True)
    fit.add_argument("--annotations", default=None)
    fit.add_argument("--metadata", default=None)
    fit.add_argument("--config", default=None)
    fit.add_argument("--out", required=True)
    fit.add_argument("--seed", type=int, default=None)
    fit.add_argument("--iterations", type=int, default=None)
    fit.add_argument("--burn-in", type=int, default=None, dest="burn_in")
    fit.add_argument("--thin", type=int, default=None)
    fit.add_argument("--particles", type=int, default=None)
    fit.add_argument("--phi", choices=["diag", "iw", "gp"], default=None)
    fit.add_argument("--no-tree", action="store_true",
                     help="independent latent proteins (no tree prior)")
    fit.add_argument("--threads", type=int, default=1)
    fit.add_argument("--save-profile-draws", action="store_true")

    ev = sub.add_parser("evaluate", help="score a fit against ground truth")
    ev.add_argument("--fit", required=True)
    ev.add_argument("--truth", required=True)
    ev.add_argument("--out", default=None)

    conf = sub.add_parser("confound", help="overlap sweep of the confounding design")
    conf.add_argument("--config", required=True)
    conf.add_argument("--out", required=True)
    conf.add_argument("--taus", default="0.5,0.75,1.0")
    conf.add_argument("--replicates", type=int, default=20)
    conf.add_argument("--seed", type=int, default=0)
    conf.add_argument("--threads", type=int, default=1)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            return simulate_command(args.config, args.out, seed=args.seed,
                                    confounded=args.confounded, overlap=args.overlap)
        if args.command == "fit":
            return fit_command(args.data, args.batches, args.out,
                               annotations_path=args.annotations,
                               metadata_path=args.metadata,
                               config_path=args.config, seed=args.seed,
                               iterations=args.iterations, burn_in=args.burn_in,
                               thin=args.thin, particles=args.particles,
                               phi=args.phi,
                               tree=False if args.no_tree else None,
                               threads=args.threads,
                               save_profile_draws=args.save_profile_draws or None)
        if args.command == "evaluate":
            return evaluate_command(args.fit, args.truth, args.out)
        if args.command == "confound":
            taus = [float(t) for t in args.taus.split(",") if t]
            return confound_command(args.config, args.out, taus, args.replicates,
                                    seed=args.seed, threads=args.threads)
        raise ValueError(f"unknown command {args.command!r}")
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return INPUT_ERROR
    except (np.linalg.LinAlgError, FloatingPointError, OverflowError,
            ZeroDivisionError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return NUMERICAL_ERROR


if __name__ == "__main__":
    sys.exit(main())
