"""Evaluation metrics: top-fraction classification, cross-head consensus, report tables."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .host import ContractError


class AggregationError(ValueError):
    pass


# ------------------------------------------------------------------ classification


def _top_sets(rows: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the ``k`` largest entries per row, smaller index first on ties."""
    order = np.argsort(-rows.astype(np.float64), axis=-1, kind="stable")[..., :k]
    out = np.zeros(rows.shape, dtype=bool)
    np.put_along_axis(out, order, True, axis=-1)
    return out


def topk_overlap(true_rows, pred_rows, k: int) -> np.ndarray:
    """Per-row |top-k(true) & top-k(pred)| / k over the last axis."""
    true_rows, pred_rows = np.asarray(true_rows), np.asarray(pred_rows)
    if true_rows.shape != pred_rows.shape:
        raise ContractError(f"shape mismatch {true_rows.shape} vs {pred_rows.shape}")
    return (_top_sets(true_rows, k) & _top_sets(pred_rows, k)).sum(axis=-1) / k


def topk_classification_accuracy(a_true, a_pred, fraction: float = 0.5) -> float:
    """Mean overlap of the true and predicted top-``fraction`` sets over causal rows.

    Inputs are (..., L, L); row ``t`` uses columns 0..t and rows with a single
    candidate (t = 0) are skipped. ``k = ceil(fraction * (t+1))``.
    """
    a_true, a_pred = np.asarray(a_true), np.asarray(a_pred)
    if a_true.shape != a_pred.shape:
        raise ContractError(f"shape mismatch {a_true.shape} vs {a_pred.shape}")
    if a_true.ndim < 2 or a_true.shape[-1] != a_true.shape[-2]:
        raise ContractError(f"expected square trailing axes, got {a_true.shape}")
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    n = a_true.shape[-1]
    at = a_true.reshape(-1, n, n)
    ap = a_pred.reshape(-1, n, n)
    total, count = 0.0, 0
    for t in range(1, n):
        k = math.ceil(fraction * (t + 1) - 1e-9)
        total += float(topk_overlap(at[:, t, : t + 1], ap[:, t, : t + 1], k).sum())
        count += at.shape[0]
    if count == 0:
        raise ContractError("no rows with at least two candidates")
    return total / count


# ------------------------------------------------------------------ consensus


@dataclass
class ConsensusMatrix:
    matrix: np.ndarray  # (NH, NH)
    mean: float
    sequences: int
    flagged: list[tuple[int, int]] = field(default_factory=list)  # zero-variance pairs

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        for row in self.matrix:
            w.writerow([f"{v:.6f}" for v in row])
        return buf.getvalue()


def pearson_matrix(rows: np.ndarray) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Pairwise Pearson correlation of ``rows``; pairs with a constant row get 0."""
    x = np.asarray(rows, dtype=np.float64)
    x = x - x.mean(axis=1, keepdims=True)
    norm = np.sqrt((x * x).sum(axis=1))
    flat = norm <= 1e-12 * max(1.0, float(np.abs(rows).max(initial=0.0)))
    safe = np.where(flat, 1.0, norm)
    c = (x @ x.T) / np.outer(safe, safe)
    c = np.clip(c, -1.0, 1.0)
    bad = flat[:, None] | flat[None, :]
    c[bad] = 0.0
    np.fill_diagonal(c, 1.0)
    n = len(x)
    flagged = [(i, j) for i in range(n) for j in range(i + 1, n) if bad[i, j]]
    return c, flagged


def final_rows(logits: np.ndarray) -> np.ndarray:
    """Causal final-position logit rows (NH, L) from (NH, L, L) logits."""
    return np.asarray(logits)[:, -1, :]


def cross_head_consensus(sequences) -> ConsensusMatrix:
    """Average per-sequence head correlation of final-row logits.

    ``sequences`` holds traces (anything with ``.logits``) or raw (NH, L, L)
    arrays; lengths may differ between sequences.
    """
    sequences = list(sequences)
    if len(sequences) < 2:
        raise ContractError("consensus needs at least 2 sequences")
    acc = None
    flagged: set[tuple[int, int]] = set()
    for s in sequences:
        logits = getattr(s, "logits", s)
        c, bad = pearson_matrix(final_rows(logits))
        if acc is not None and c.shape != acc.shape:
            raise ContractError("sequences disagree on head count")
        acc = c if acc is None else acc + c
        flagged.update(bad)
    mat = acc / len(sequences)
    mat = (mat + mat.T) / 2
    np.fill_diagonal(mat, 1.0)
    iu = np.triu_indices(len(mat), k=1)
    mean = float(mat[iu].mean()) if iu[0].size else 1.0
    return ConsensusMatrix(mat, mean, len(sequences), sorted(flagged))


# ------------------------------------------------------------------ reports

_ID_KEYS = ("seed", "sample_seed")


def aggregate_report(records: list[dict]) -> list[dict]:
    """Group by (policy, sparsity): count plus the mean of every numeric field."""
    if not records:
        return []
    keys = list(records[0].keys())
    for r in records:
        if set(r.keys()) != set(keys):
            raise AggregationError(f"mixed schemas: {sorted(keys)} vs {sorted(r.keys())}")
        if "policy" not in r or "sparsity" not in r:
            raise AggregationError("records need policy and sparsity fields")
    value_keys = [k for k in keys if k not in ("policy", "sparsity") + _ID_KEYS and isinstance(records[0][k], (int, float))]
    groups: dict[tuple, list[dict]] = {}
    for r in records:
        groups.setdefault((r["policy"], float(r["sparsity"])), []).append(r)
    out = []
    for (policy, sparsity), rs in sorted(groups.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        row = {"policy": policy, "sparsity": sparsity, "count": len(rs)}
        for k in value_keys:
            row[k] = math.fsum(float(r[k]) for r in rs) / len(rs)
        out.append(row)
    return out


def to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0].keys()), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _cell(v) for k, v in r.items()})
    return buf.getvalue()


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    return v


def to_json(rows: list[dict]) -> str:
    return json.dumps(rows, indent=2) + "\n"


def render_table(summary: list[dict], metrics=("accuracy", "coverage"), percent: bool = True) -> str:
    """Metric rows by policy columns, one block per sparsity level."""
    blocks = []
    for s in sorted({r["sparsity"] for r in summary}):
        rows = [r for r in summary if r["sparsity"] == s]
        names = [r["policy"] for r in rows]
        head = ["Metric"] + names
        body = []
        for m in metrics:
            vals = []
            for r in rows:
                v = r.get(m)
                vals.append("-" if v is None else f"{100 * v if percent else v:.2f}")
            body.append([m.capitalize()] + vals)
        widths = [max(len(row[i]) for row in [head] + body) for i in range(len(head))]

        def line(cells):
            first = cells[0].ljust(widths[0])
            rest = " | ".join(c.rjust(w) for c, w in zip(cells[1:], widths[1:]))
            return f"{first} | {rest}"

        rule = "-" * len(line(head))
        blocks.append("\n".join([f"sparsity {s:g}", line(head), rule] + [line(b) for b in body]))
    return "\n\n".join(blocks) + "\n"
