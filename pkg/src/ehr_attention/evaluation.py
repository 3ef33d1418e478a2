"""Ranking metrics and the Fidelity+/Fidelity- substitution protocol."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .dataset import N_TOKENS


class MetricError(ValueError):
    pass


class FidelityConfigError(ValueError):
    pass


METRICS = ("auroc", "auprc", "mean_prob")


def auroc(scores, labels) -> float:
    """Mann-Whitney statistic: P(score_pos > score_neg), ties counted as 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("auroc needs both classes present")
    ranks = rankdata(scores, method="average")
    # rank sums are exact multiples of 1/2, so this matches pair counting bit for bit
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision; descending scores, ties broken by original index."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        raise MetricError("auprc needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order] == 1
    tp = np.cumsum(hits)
    rank = np.arange(1, len(scores) + 1)
    precisions = tp[hits] / rank[hits]
    return math.fsum(precisions.tolist()) / n_pos


def mean_true_class_prob(probs, labels) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    return float(np.mean(np.where(labels == 1, probs, 1.0 - probs)))


def all_metrics(probs, labels) -> dict[str, float]:
    return {
        "auroc": auroc(probs, labels),
        "auprc": auprc(probs, labels),
        "mean_prob": mean_true_class_prob(probs, labels),
    }


@dataclass
class MetricPoint:
    metric: str
    baseline: float
    perturbed: float
    delta: float

    def to_json(self) -> dict:
        return {
            "metric": self.metric,
            "baseline": self.baseline,
            "perturbed": self.perturbed,
            "delta": self.delta,
        }


@dataclass
class FidelityReport:
    model: str
    method: str
    direction: str
    fractions: list[float]
    rungs: list[dict[str, MetricPoint]]
    draws: int
    seed: int
    substitution: str = "uniform"
    n_records: int = 0
    folds: int = 1

    def delta(self, metric: str, fraction: float) -> float:
        i = _rung_index(self.fractions, fraction)
        return self.rungs[i][metric].delta

    def to_json(self) -> dict:
        return {
            "model": self.model,
            "method": self.method,
            "direction": self.direction,
            "draws": self.draws,
            "seed": self.seed,
            "substitution": self.substitution,
            "n_records": self.n_records,
            "folds": self.folds,
            "rungs": [
                {"fraction": f, "k": rung_k(f), "metrics": [rung[m].to_json() for m in METRICS]}
                for f, rung in zip(self.fractions, self.rungs)
            ],
        }


def _rung_index(fractions, fraction) -> int:
    for i, f in enumerate(fractions):
        if abs(f - fraction) < 1e-12:
            return i
    raise KeyError(f"fraction {fraction} not on the ladder {fractions}")


def rung_k(fraction: float, n_tokens: int = N_TOKENS) -> int:
    return int(math.ceil(fraction * n_tokens - 1e-9))


def _validate_ladder(fractions) -> list[float]:
    fractions = [float(f) for f in fractions]
    if not fractions:
        raise FidelityConfigError("fraction ladder is empty")
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise FidelityConfigError(f"fraction {f} outside (0, 1]")
    return fractions


def substitute(
    X: np.ndarray,
    order: np.ndarray,
    k: int,
    direction: str,
    rng: np.random.Generator,
    substitution: str = "uniform",
    pool: np.ndarray | None = None,
) -> np.ndarray:
    """Replace the top-k (plus) or bottom-k (minus) tokens of each row."""
    n, m = X.shape
    cols = order[:, :k] if direction == "plus" else order[:, m - k :]
    rows = np.repeat(np.arange(n), k).reshape(n, k)
    out = X.copy()
    if substitution == "uniform":
        out[rows, cols] = rng.uniform(0.0, 1.0, size=(n, k))
    elif substitution == "permutation":
        src = pool if pool is not None else X
        donors = rng.integers(0, len(src), size=(n, k))
        out[rows, cols] = src[donors, cols]
    else:
        raise FidelityConfigError(f"unknown substitution mode {substitution!r}")
    return out


def fidelity(
    scorer,
    X: np.ndarray,
    labels: np.ndarray,
    attributions: np.ndarray,
    direction: str,
    fractions=(0.05, 0.10, 0.20),
    draws: int = 10,
    seed: int = 0,
    substitution: str = "uniform",
    model: str = "",
    method: str = "",
) -> FidelityReport:
    """Substitute the most (plus) or least (minus) important tokens and rescore.

    ``attributions`` is (N, 364) per record or (364,) broadcast to every record.
    Deltas are perturbed minus baseline, averaged over ``draws`` seeded draws.
    """
    if direction not in ("plus", "minus"):
        raise FidelityConfigError(f"direction must be plus|minus, got {direction!r}")
    fractions = _validate_ladder(fractions)
    if draws < 1:
        raise FidelityConfigError("draws must be >= 1")
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    attr = np.asarray(attributions, dtype=np.float64)
    if attr.ndim == 1:
        attr = np.broadcast_to(attr, X.shape)
    if attr.shape != X.shape:
        raise FidelityConfigError(f"attributions {attr.shape} do not match inputs {X.shape}")
    order = np.argsort(-attr, axis=1, kind="stable")
    base = all_metrics(scorer(X), labels)
    rungs = []
    for ri, f in enumerate(fractions):
        k = rung_k(f, X.shape[1])
        sums = dict.fromkeys(METRICS, 0.0)
        for r in range(draws):
            rng = np.random.default_rng([seed, ri, r])
            Xp = substitute(X, order, k, direction, rng, substitution)
            m = all_metrics(scorer(Xp), labels)
            for key in METRICS:
                sums[key] += m[key]
        rung = {}
        for key in METRICS:
            pert = sums[key] / draws
            rung[key] = MetricPoint(key, base[key], pert, pert - base[key])
        rungs.append(rung)
    return FidelityReport(
        model=model,
        method=method,
        direction=direction,
        fractions=fractions,
        rungs=rungs,
        draws=draws,
        seed=seed,
        substitution=substitution,
        n_records=len(X),
    )


def combine_reports(reports: list[FidelityReport]) -> FidelityReport:
    """Average fold-level reports of the same (model, method, direction)."""
    if not reports:
        raise ValueError("nothing to combine")
    first = reports[0]
    rungs = []
    for i in range(len(first.fractions)):
        rung = {}
        for key in METRICS:
            b = float(np.mean([r.rungs[i][key].baseline for r in reports]))
            p = float(np.mean([r.rungs[i][key].perturbed for r in reports]))
            d = float(np.mean([r.rungs[i][key].delta for r in reports]))
            rung[key] = MetricPoint(key, b, p, d)
        rungs.append(rung)
    return FidelityReport(
        model=first.model,
        method=first.method,
        direction=first.direction,
        fractions=list(first.fractions),
        rungs=rungs,
        draws=first.draws,
        seed=first.seed,
        substitution=first.substitution,
        n_records=sum(r.n_records for r in reports),
        folds=len(reports),
    )


# ---------------------------------------------------------------------------
# tables
# ---------------------------------------------------------------------------

_ROW_METRICS = (("AUROC", "auroc"), ("AUPRC", "auprc"), ("Prob.", "mean_prob"))


def _fmt_delta(x: float) -> str:
    if x == 0.0:
        return "0.00"
    return f"{x:.2f}"


def fidelity_table_rows(reports: list[FidelityReport], fraction: float = 0.10):
    """Header plus rows laid out as {Fidelity+, Fidelity-} x {AUROC, AUPRC, Prob.}."""
    if not reports:
        raise ValueError("report_table needs at least one report")
    columns = []
    for r in reports:
        key = (r.model, r.method)
        if key not in columns:
            columns.append(key)
    lookup = {(r.model, r.method, r.direction): r for r in reports}
    header = ["", ""] + [f"{m}/{meth}" for m, meth in columns]
    rows = []
    for direction, label, arrow in (("plus", "Fidelity+", "(down)"), ("minus", "Fidelity-", "(up)")):
        for i, (name, key) in enumerate(_ROW_METRICS):
            row = [label if i == 0 else "", f"{name} {arrow}"]
            for m, meth in columns:
                rep = lookup.get((m, meth, direction))
                row.append("" if rep is None else _fmt_delta(rep.delta(key, fraction)))
            rows.append(row)
    return header, rows


def report_table(reports: list[FidelityReport], fraction: float = 0.10) -> str:
    header, rows = fidelity_table_rows(reports, fraction)
    return _render_text([header] + rows)


def report_table_csv(reports: list[FidelityReport], fraction: float = 0.10) -> str:
    header, rows = fidelity_table_rows(reports, fraction)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def utility_table_rows(summary: dict[str, dict]):
    """Models as columns; AUROC/AUPRC rows rendered as mean +/- std."""
    models = list(summary)
    header = [""] + models
    rows = []
    for name, key in (("AUROC", "auroc"), ("AUPRC", "auprc")):
        row = [name]
        for m in models:
            s = summary[m]
            row.append(f"{s[key + '_mean']:.4f} +/- {s[key + '_std']:.2e}")
        rows.append(row)
    return header, rows


def utility_table(summary: dict[str, dict]) -> str:
    header, rows = utility_table_rows(summary)
    return _render_text([header] + rows)


def utility_table_csv(summary: dict[str, dict]) -> str:
    header, rows = utility_table_rows(summary)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _render_text(rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for j, r in enumerate(rows):
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
        if j == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
