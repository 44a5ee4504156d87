"""Interaction mechanisms that operate on rank-r token features.

All functions accept eager arrays or traced :class:`~moka.numkernel.Var`
handles; shapes are ``(..., N, r)``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ProtocolError, ShapeError
from .numkernel import Var, concat_rows, matmul, mean_rows, scale, softmax_rows, transpose

DUMP_COLUMNS = ("sample", "query_index", "key_index", "weight")


@dataclass
class AttentionRecord:
    query: str
    key: str
    weights: np.ndarray  # (..., N_query, N_key), post-softmax
    tag: str = ""

    def check(self, atol: float = 1e-6) -> None:
        w = np.asarray(self.weights)
        if w.size and (w.min() < 0 or w.max() > 1 + atol):
            raise ProtocolError(f"attention weights outside [0, 1] for {self.query}->{self.key}")
        if w.size and not np.allclose(w.sum(axis=-1), 1.0, atol=atol, rtol=0):
            raise ProtocolError(f"attention rows not stochastic for {self.query}->{self.key}")


def _value(x):
    return x.value if isinstance(x, Var) else np.asarray(x)


def attend(query, keys, values):
    """``softmax(q k^T / sqrt(r)) v`` with r taken from the query width.

    Returns ``(output, weights)``.
    """
    qs, ks = _value(query).shape, _value(keys).shape
    if ks[-2] == 0:
        raise ProtocolError("attention over an empty key set is undefined")
    if qs[-1] != ks[-1]:
        raise ShapeError(f"query width {qs[-1]} != key width {ks[-1]}")
    r = qs[-1]
    scores = scale(matmul(query, transpose(keys)), 1.0 / math.sqrt(r))
    weights = softmax_rows(scores)
    return matmul(weights, values), weights


def task_centric_attention(q_lr, t_lr):
    """Non-text queries over text keys/values; keys and values are both ``t_lr``."""
    return attend(q_lr, t_lr, t_lr)


def residual_enhance(uni_lr, att_out, lam: float):
    return uni_lr + scale(att_out, lam)


def reversed_query_attention(t_lr, nontext_lr: list, lam: float = 1.0):
    """Text rows attend over all non-text rows and are residually updated.

    Returns ``(updated_text, weights)``; non-text features are left to the caller
    unchanged.
    """
    pool = concat_rows(*nontext_lr)
    out, weights = attend(t_lr, pool, pool)
    return residual_enhance(t_lr, out, lam), weights


def naive_interaction(uni_lr, t_lr, lam: float):
    """Attention-free variant: add lam times the mean text feature to every row."""
    return uni_lr + scale(mean_rows(t_lr), lam)


def projected_attention(q_lr, t_lr, wq, wk, wv):
    """Attention with r x r query/key/value projections applied in rank space."""
    for name, w in (("Wq", wq), ("Wk", wk), ("Wv", wv)):
        s = _value(w).shape
        if s[-1] != s[-2]:
            raise ShapeError(f"{name} must be square, got {s}")
    q = matmul(q_lr, transpose(wq))
    k = matmul(t_lr, transpose(wk))
    v = matmul(t_lr, transpose(wv))
    return attend(q, k, v)


def extra_pair_attention(query_lr, key_lr):
    """Non-text to non-text attention between two chosen modalities."""
    return attend(query_lr, key_lr, key_lr)


def write_attention_dump(record: AttentionRecord, out_dir: str | Path, stem: str) -> tuple[Path, Path]:
    """Write ``<stem>.csv`` (sample, query_index, key_index, weight) and a JSON sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    w = np.asarray(record.weights, dtype=np.float64)
    if w.ndim == 2:
        w = w[None]
    csv_path = out_dir / f"{stem}.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(DUMP_COLUMNS)
        for b in range(w.shape[0]):
            for i in range(w.shape[1]):
                for j in range(w.shape[2]):
                    writer.writerow([b, i, j, repr(float(w[b, i, j]))])
    meta = {
        "query_modality": record.query,
        "key_modality": record.key,
        "attachment": record.tag,
        "samples": int(w.shape[0]),
        "query_tokens": int(w.shape[1]),
        "key_tokens": int(w.shape[2]),
        "columns": list(DUMP_COLUMNS),
    }
    json_path = out_dir / f"{stem}.json"
    json_path.write_text(json.dumps(meta, indent=2) + "\n")
    return csv_path, json_path


def read_attention_dump(csv_path: str | Path) -> np.ndarray:
    meta = json.loads(Path(csv_path).with_suffix(".json").read_text())
    w = np.zeros((meta["samples"], meta["query_tokens"], meta["key_tokens"]))
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != DUMP_COLUMNS:
            raise ValueError(f"unexpected dump header {header}")
        for b, i, j, val in reader:
            w[int(b), int(i), int(j)] = float(val)
    return w
