"""Tab-separated file formats and the line-based configuration parser.

Everything is plain text so runs are diffable: the data matrix uses an ``NA``
token for missing cells, side tables are keyed by sample or IG id, and
config files are ``key = value`` lines with ``#`` comments.  Floats are
written with 17 significant digits so files round-trip exactly and repeated
runs are byte-identical.
"""

from __future__ import annotations

import json
import os
from typing import Optional

import numpy as np

from .core import Dataset, Hyperparameters
from .simulate import SimConfig

__all__ = [
    "write_data_tsv", "read_data_tsv", "write_table", "read_table",
    "write_matrix_tsv", "read_matrix_tsv", "parse_config", "read_config_file",
    "config_to_sim", "config_to_hyper", "assemble_dataset", "atomic_write_json",
    "default_ig_ids", "default_sample_ids",
]

NA = "NA"


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def default_ig_ids(p: int) -> list[str]:
    return [f"ig{i:05d}" for i in range(1, p + 1)]


def default_sample_ids(n: int) -> list[str]:
    return [f"s{j:04d}" for j in range(1, n + 1)]


def write_data_tsv(path, values, missing_mask, ig_ids=None, sample_ids=None):
    """Matrix file: first column IG id, header row of sample ids, NA tokens."""
    values = np.asarray(values, dtype=float)
    missing_mask = np.asarray(missing_mask, dtype=bool)
    p, n = values.shape
    ig_ids = ig_ids or default_ig_ids(p)
    sample_ids = sample_ids or default_sample_ids(n)
    with open(path, "w") as fh:
        fh.write("ig\t" + "\t".join(sample_ids) + "\n")
        for i in range(p):
            cells = [NA if missing_mask[i, j] else _fmt(values[i, j]) for j in range(n)]
            fh.write(ig_ids[i] + "\t" + "\t".join(cells) + "\n")


def read_data_tsv(path):
    """Returns (values, missing_mask, ig_ids, sample_ids); NA cells are zero
    in ``values`` and flagged in the mask."""
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if len(header) < 2:
            raise ValueError(f"{path}: expected an id column plus samples")
        sample_ids = header[1:]
        ig_ids, rows, mask_rows = [], [], []
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            if len(parts) != len(header):
                raise ValueError(f"{path}: ragged row for id {parts[0]!r}")
            ig_ids.append(parts[0])
            vals = [0.0 if c == NA else float(c) for c in parts[1:]]
            mask = [c == NA for c in parts[1:]]
            rows.append(vals)
            mask_rows.append(mask)
    return (np.array(rows, dtype=float), np.array(mask_rows, dtype=bool),
            ig_ids, sample_ids)


def write_table(path, header: list[str], rows):
    with open(path, "w") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(_fmt(c) for c in row) + "\n")


def read_table(path) -> tuple[list[str], list[list[str]]]:
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        rows = [line.rstrip("\n").split("\t") for line in fh if line.strip()]
    for row in rows:
        if len(row) != len(header):
            raise ValueError(f"{path}: ragged row {row!r}")
    return header, rows


def write_matrix_tsv(path, matrix):
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    with open(path, "w") as fh:
        for row in matrix:
            fh.write("\t".join(_fmt(v) for v in row) + "\n")


def read_matrix_tsv(path) -> np.ndarray:
    with open(path) as fh:
        rows = [[float(c) for c in line.rstrip("\n").split("\t")]
                for line in fh if line.strip()]
    return np.array(rows, dtype=float)


def parse_config(text: str) -> dict[str, str]:
    """Line-based ``key = value`` settings; '#' starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def read_config_file(path) -> dict[str, str]:
    with open(path) as fh:
        return parse_config(fh.read())


def _get(cfg, key, cast, default):
    if key not in cfg:
        return default
    raw = cfg[key]
    if cast is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"config key {key}: expected a boolean, got {raw!r}")
    return cast(raw)


def config_to_sim(cfg: dict[str, str]) -> SimConfig:
    return SimConfig(
        n_igs=_get(cfg, "igs", int, 800),
        n_samples=_get(cfg, "samples", int, 80),
        n_batches=_get(cfg, "batches", int, 2),
        n_factors=_get(cfg, "factors", int, 4),
        n_proteins=_get(cfg, "proteins", int, 32),
        missing_fraction=_get(cfg, "missing_fraction", float, 0.2),
        seed=_get(cfg, "seed", int, 0),
    ).validate()


def config_to_hyper(cfg: dict[str, str]) -> Hyperparameters:
    hyper = Hyperparameters(
        noise_shape=_get(cfg, "noise_shape", float, 1.1),
        noise_rate=_get(cfg, "noise_rate", float, 0.001),
        batch_mean=_get(cfg, "batch_mean", float, 8.0),
        batch_precision=_get(cfg, "batch_precision", float, 0.01),
        laplace_shape=_get(cfg, "laplace_shape", float, 4.0),
        laplace_rate=_get(cfg, "laplace_rate", float, 2.0),
        ard_shape=_get(cfg, "ard_shape", float, 1.1),
        ard_rate=_get(cfg, "ard_rate", float, 0.001),
        conc_shape=_get(cfg, "conc_shape", float, 1.0),
        conc_rate=_get(cfg, "conc_rate", float, 1.0),
        n_factors=_get(cfg, "fit_factors", int, None),
        n_proteins=_get(cfg, "fit_proteins", int, _get(cfg, "proteins", int, 2)),
        ard_threshold=_get(cfg, "ard_threshold", float, 1e3),
        smc_particles=_get(cfg, "particles", int, 16),
        iterations=_get(cfg, "iterations", int, 4000),
        burn_in=_get(cfg, "burn_in", int, 3000),
        thin=_get(cfg, "thin", int, 1),
        phi_model=_get(cfg, "phi", str, "diag"),
        tree=_get(cfg, "tree", bool, True),
        literal_formulas=_get(cfg, "literal_formulas", bool, False),
    )
    return hyper.validate()


def assemble_dataset(values, mask, ig_ids, sample_ids, batch_by_sample,
                     annotations_by_ig=None, metadata=None) -> Dataset:
    """Align side tables to the matrix column/row order and build a Dataset."""
    try:
        batch = np.array([int(batch_by_sample[s]) for s in sample_ids])
    except KeyError as exc:
        raise ValueError(f"sample {exc.args[0]!r} has no batch label") from exc
    annotations = {}
    if annotations_by_ig:
        index = {ig: i + 1 for i, ig in enumerate(ig_ids)}
        for ig, label in annotations_by_ig.items():
            if ig in index:
                annotations[index[ig]] = label
    kwargs = {}
    if metadata:
        for name in ("subject", "time", "replicate_group"):
            if name in metadata:
                col = [metadata[name].get(s) for s in sample_ids]
                if any(v is None for v in col):
                    raise ValueError(f"metadata column {name} missing some samples")
                if name == "time":
                    kwargs[name] = np.array([float(v) for v in col])
                else:
                    kwargs[name] = np.array(col)
    return Dataset(values=values, missing_mask=mask, batch=batch,
                   annotations=annotations, **kwargs).validate()


def atomic_write_json(path, payload: dict):
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
