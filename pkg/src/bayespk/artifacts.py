"""Reading and writing fit artifacts (draws.csv, manifest.json)."""
from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from .nuts import META_COLUMNS, DrawsMatrix

__all__ = ["write_draws_csv", "read_draws_csv", "DrawsTable", "write_manifest", "read_manifest",
           "config_hash", "file_sha256"]

INDEX_COLUMNS = ("chain__", "iter__", "warmup__")


def _num(v: float) -> str:
    v = float(v)
    if v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def write_draws_csv(path, draws: DrawsMatrix, log_lik: np.ndarray | None = None, obs_ids=None) -> None:
    """One row per (chain, iteration): index and sampler columns, parameters, then ``log_lik.<obs_id>``."""
    ll_names = [] if log_lik is None else [f"log_lik.{i}" for i in obs_ids]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(INDEX_COLUMNS) + list(META_COLUMNS) + list(draws.param_names) + ll_names)
        for c in range(draws.n_chains):
            for i in range(draws.n_iter):
                row = [c + 1, i + 1, int(i < draws.warmup_included)]
                row += [_num(draws.meta[k][c, i]) for k in META_COLUMNS]
                row += [_num(v) for v in draws.values[c, i]]
                if log_lik is not None:
                    row += [_num(v) for v in log_lik[c, i]]
                w.writerow(row)


class DrawsTable:
    """Parsed draws.csv with column access."""

    def __init__(self, header: list[str], data: np.ndarray):
        self.header = header
        self.data = data
        self.col = {h: i for i, h in enumerate(header)}
        self.chain = data[:, self.col["chain__"]].astype(int)
        self.iter = data[:, self.col["iter__"]].astype(int)
        self.warmup = data[:, self.col["warmup__"]].astype(bool)

    @property
    def param_names(self) -> list[str]:
        skip = set(INDEX_COLUMNS) | set(META_COLUMNS)
        return [h for h in self.header if h not in skip and not h.startswith("log_lik.")]

    @property
    def log_lik_names(self) -> list[str]:
        return [h for h in self.header if h.startswith("log_lik.")]

    def column(self, name: str) -> np.ndarray:
        return self.data[:, self.col[name]]

    def columns(self, names) -> np.ndarray:
        return self.data[:, [self.col[n] for n in names]]

    def to_draws(self) -> DrawsMatrix:
        """Rebuild a :class:`DrawsMatrix` (requires equal-length chains)."""
        chains = np.unique(self.chain)
        n_iter = int(np.sum(self.chain == chains[0]))
        shape = (len(chains), n_iter)
        names = self.param_names
        vals = self.columns(names).reshape(shape + (len(names),))
        meta = {k: self.column(k).reshape(shape) for k in META_COLUMNS}
        warm = int(self.warmup[self.chain == chains[0]].sum())
        return DrawsMatrix(names, vals, meta, seed=0, warmup_included=warm)


def read_draws_csv(path) -> DrawsTable:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = [[float(v) for v in row] for row in r if row]
    data = np.array(rows, dtype=float).reshape(len(rows), len(header))
    return DrawsTable(header, data)


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())
