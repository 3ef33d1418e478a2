"""Cohort ingestion, preprocessing, stage-1 windows and the synthetic generator.

A cohort is held as dense arrays: ``vitals`` (N, 7, 24) and ``aggregated``
(N, 196) with NaN marking missing entries. Preprocessing steps return new
cohorts and advance a ``stage`` marker so that out-of-order calls fail loudly.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path

import numpy as np
from scipy import linalg

logger = logging.getLogger(__name__)

N_CHANNELS = 7
N_HOURS = 24
N_AGG = 196
N_VITAL_TOKENS = N_CHANNELS * N_HOURS
N_TOKENS = N_VITAL_TOKENS + N_AGG

PAST_HOURS = 12
FUTURE_HOURS = 8
WINDOW_STARTS = (1, 2, 3, 4, 5)

DEFAULT_CHANNEL_NAMES = (
    "heart_rate",
    "sys_bp",
    "dia_bp",
    "resp_rate",
    "spo2",
    "temperature",
    "gcs_motor",
)


class SchemaError(ValueError):
    pass


class ParseError(ValueError):
    pass


class IntegrityError(ValueError):
    pass


class ImputationError(ValueError):
    pass


class BalanceError(ValueError):
    pass


class PipelineStateError(RuntimeError):
    pass


class Stage(IntEnum):
    RAW = 0
    IMPUTED = 1
    NORMALIZED = 2
    BALANCED = 3


def csv_header() -> list[str]:
    cols = ["stay_id", "label"]
    cols += [f"agg_{f}" for f in range(N_AGG)]
    cols += [f"vit_c{c}_h{h}" for c in range(N_CHANNELS) for h in range(1, N_HOURS + 1)]
    return cols


def vital_token(channel: int, hour: int) -> int:
    """Token index of a vital cell; ``hour`` is 1-based."""
    return channel * N_HOURS + (hour - 1)


def agg_token(feature: int) -> int:
    return N_VITAL_TOKENS + feature


def token_registry(
    feature_names=None, channel_names=DEFAULT_CHANNEL_NAMES
) -> list[dict]:
    """Index -> token description; vitals channel-major, then aggregated."""
    feature_names = feature_names or [f"agg_{f}" for f in range(N_AGG)]
    reg = []
    for c in range(N_CHANNELS):
        for h in range(1, N_HOURS + 1):
            reg.append(
                {
                    "index": vital_token(c, h),
                    "kind": "vital",
                    "channel": c,
                    "channel_name": channel_names[c],
                    "hour": h,
                }
            )
    for f in range(N_AGG):
        reg.append({"index": agg_token(f), "kind": "aggregated", "feature": feature_names[f]})
    return reg


@dataclass(frozen=True)
class PatientRecord:
    stay_id: str
    vitals: np.ndarray  # (7, 24), NaN = missing
    aggregated: np.ndarray  # (196,)
    label: int

    def tokens(self) -> np.ndarray:
        return np.concatenate([self.vitals.reshape(-1), self.aggregated])


@dataclass
class Cohort:
    stay_ids: list[str]
    vitals: np.ndarray
    aggregated: np.ndarray
    labels: np.ndarray
    feature_names: list[str] = field(default_factory=lambda: [f"agg_{f}" for f in range(N_AGG)])
    channel_names: list[str] = field(default_factory=lambda: list(DEFAULT_CHANNEL_NAMES))
    provenance: str = ""
    stage: Stage = Stage.RAW

    def __post_init__(self):
        self.vitals = np.asarray(self.vitals, dtype=np.float64)
        self.aggregated = np.asarray(self.aggregated, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.stay_ids)
        if self.vitals.shape != (n, N_CHANNELS, N_HOURS):
            raise SchemaError(f"vitals must be ({n}, 7, 24), got {self.vitals.shape}")
        if self.aggregated.shape != (n, N_AGG):
            raise SchemaError(f"aggregated must be ({n}, 196), got {self.aggregated.shape}")
        if self.labels.shape != (n,) or not np.isin(self.labels, (0, 1)).all():
            raise SchemaError("labels must be a 0/1 vector, one per record")
        if len(set(self.stay_ids)) != n:
            raise IntegrityError("duplicate stay_id in cohort")
        if len(self.feature_names) != N_AGG or len(self.channel_names) != N_CHANNELS:
            raise SchemaError("feature/channel registries have the wrong length")

    def __len__(self) -> int:
        return len(self.stay_ids)

    @property
    def records(self) -> list[PatientRecord]:
        return [self.record(i) for i in range(len(self))]

    def record(self, i: int) -> PatientRecord:
        return PatientRecord(
            self.stay_ids[i], self.vitals[i], self.aggregated[i], int(self.labels[i])
        )

    def index_of(self, stay_id: str) -> int:
        try:
            return self.stay_ids.index(stay_id)
        except ValueError:
            raise KeyError(f"unknown stay_id {stay_id!r}") from None

    def tokens(self) -> np.ndarray:
        """(N, 364) token matrix: 168 vitals (channel-major) then 196 aggregated."""
        return np.concatenate([self.vitals.reshape(len(self), -1), self.aggregated], axis=1)

    def subset(self, idx) -> "Cohort":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(
            self,
            stay_ids=[self.stay_ids[i] for i in idx],
            vitals=self.vitals[idx].copy(),
            aggregated=self.aggregated[idx].copy(),
            labels=self.labels[idx].copy(),
        )

    def with_tokens(self, tokens: np.ndarray, stage: Stage | None = None) -> "Cohort":
        n = len(self)
        return replace(
            self,
            vitals=tokens[:, :N_VITAL_TOKENS].reshape(n, N_CHANNELS, N_HOURS).copy(),
            aggregated=tokens[:, N_VITAL_TOKENS:].copy(),
            stage=self.stage if stage is None else stage,
        )

    def has_missing(self) -> bool:
        return bool(np.isnan(self.vitals).any() or np.isnan(self.aggregated).any())


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def load_cohort_csv(path) -> Cohort:
    path = Path(path)
    header = csv_header()
    with path.open(newline="") as fh:
        lines = fh.readlines()
    # leading '#' lines are provenance comments written by save_cohort_csv
    skip = 0
    while skip < len(lines) and lines[skip].startswith("#"):
        skip += 1
    reader = csv.reader(lines[skip:])
    try:
        got = next(reader)
    except StopIteration:
        raise SchemaError(f"{path}: empty file, header row expected") from None
    if got != header:
        n_agg = sum(1 for h in got if h.startswith("agg_"))
        n_vit = sum(1 for h in got if h.startswith("vit_"))
        raise SchemaError(
            f"{path}: header mismatch ({len(got)} columns, {n_agg} agg, {n_vit} vital; "
            f"expected {len(header)} columns, {N_AGG} agg, {N_VITAL_TOKENS} vital)"
        )
    ids, labels, rows = [], [], []
    seen = set()
    for lineno, row in enumerate(reader, start=skip + 2):
        if not row:
            continue
        if len(row) != len(header):
            raise SchemaError(
                f"{path}: row {lineno} has {len(row)} columns, expected {len(header)}"
            )
        sid = row[0]
        if sid in seen:
            raise IntegrityError(f"{path}: duplicate stay_id {sid!r} at row {lineno}")
        seen.add(sid)
        try:
            label = int(row[1])
        except ValueError:
            raise ParseError(f"{path}: row {lineno}, column label: {row[1]!r}") from None
        if label not in (0, 1):
            raise ParseError(f"{path}: row {lineno}, column label must be 0/1")
        values = np.empty(len(header) - 2)
        for j, cell in enumerate(row[2:]):
            if cell.strip() == "":
                values[j] = np.nan
                continue
            try:
                values[j] = float(cell)
            except ValueError:
                raise ParseError(
                    f"{path}: row {lineno}, column {header[j + 2]}: {cell!r}"
                ) from None
            if not math.isfinite(values[j]):
                raise ParseError(
                    f"{path}: row {lineno}, column {header[j + 2]}: non-finite {cell!r}"
                )
        ids.append(sid)
        labels.append(label)
        rows.append(values)
    mat = np.array(rows).reshape(len(rows), -1) if rows else np.zeros((0, N_TOKENS))
    n = len(ids)
    return Cohort(
        stay_ids=ids,
        vitals=mat[:, N_AGG:].reshape(n, N_CHANNELS, N_HOURS),
        aggregated=mat[:, :N_AGG],
        labels=np.array(labels, dtype=np.int64),
        provenance=str(path),
    )


def _fmt(x: float) -> str:
    return "" if np.isnan(x) else repr(float(x))


def save_cohort_csv(cohort: Cohort, path, comment: str | None = None) -> None:
    with Path(path).open("w", newline="") as fh:
        if comment is not None:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(csv_header())
        for i in range(len(cohort)):
            row = [cohort.stay_ids[i], str(int(cohort.labels[i]))]
            row += [_fmt(x) for x in cohort.aggregated[i]]
            row += [_fmt(x) for x in cohort.vitals[i].reshape(-1)]
            w.writerow(row)


# ---------------------------------------------------------------------------
# MICE
# ---------------------------------------------------------------------------


@dataclass
class MiceImputer:
    """Deterministic chained-equations regression imputer.

    Missing cells start at their column means; each round regresses every
    incomplete column on all other columns (plus an intercept) using the rows
    where that column is observed, then overwrites the missing cells with the
    fitted values. ``transform`` replays the final-round regressions, so a
    test split is imputed with coefficients learned on the training split.
    """

    rounds: int = 10
    means_: np.ndarray | None = None
    coefs_: dict = field(default_factory=dict)
    order_: list = field(default_factory=list)
    history_: list = field(default_factory=list)

    def fit_transform(self, X: np.ndarray, names=None) -> np.ndarray:
        X = np.array(X, dtype=np.float64)
        miss = np.isnan(X)
        n, p = X.shape
        full_missing = np.where(miss.all(axis=0))[0]
        if len(full_missing):
            col = full_missing[0]
            label = names[col] if names is not None else f"column {col}"
            raise ImputationError(f"{label} is entirely missing")
        self.means_ = np.nanmean(X, axis=0) if n else np.zeros(p)
        self.order_ = [j for j in range(p) if miss[:, j].any()]
        self.coefs_ = {}
        self.history_ = []
        if not self.order_:
            return X
        if len(self.order_) == p:
            raise ImputationError("no fully observed column to anchor the imputation")
        Z = np.where(miss, self.means_, X)
        Z1 = np.hstack([Z, np.ones((n, 1))])
        for _ in range(self.rounds):
            prev = Z1[:, :p][miss].copy()
            gram = Z1.T @ Z1
            H = _gram_inverse(gram)
            buf = np.empty_like(gram)
            for j in self.order_:
                mj = miss[:, j]
                beta = _fit_column_from_inverse(Z1, H, j, mj) if H is not None else None
                if beta is None:
                    beta = _fit_column(Z1, gram, j, mj)
                self.coefs_[j] = beta
                old = Z1[mj, j]
                Z1[mj, j] = _predict_column(Z1, j, beta, mj)
                # only the missing cells of column j changed: patch its row/column of the Gram matrix
                dz = Z1[mj, j] - old
                delta = Z1[mj].T @ dz
                delta[j] += old @ dz
                if H is not None:
                    _update_inverse(H, j, delta, buf)
                gram[:, j] += delta
                gram[j, :] = gram[:, j]
            self.history_.append(float(np.max(np.abs(Z1[:, :p][miss] - prev))))
        return Z1[:, :p].copy()

    def transform(self, X: np.ndarray) -> np.ndarray:
        if self.means_ is None:
            raise PipelineStateError("imputer used before fit")
        X = np.array(X, dtype=np.float64)
        miss = np.isnan(X)
        if not miss.any():
            return X
        n, p = X.shape
        Z1 = np.hstack([np.where(miss, self.means_, X), np.ones((n, 1))])
        cols = [j for j in range(p) if miss[:, j].any()]
        for _ in range(self.rounds):
            for j in cols:
                mj = miss[:, j]
                beta = self.coefs_.get(j)
                if beta is None:
                    # column complete at fit time: fall back to its training mean
                    continue
                Z1[mj, j] = _predict_column(Z1, j, beta, mj)
        return Z1[:, :p].copy()


def _gram_inverse(gram: np.ndarray) -> np.ndarray | None:
    c, info = linalg.lapack.dpotrf(gram, lower=1, clean=1)
    if info != 0:
        return None
    rcond, info = linalg.lapack.dpocon(c, np.abs(gram).sum(axis=0).max(), uplo="L")
    if info != 0 or rcond < 1e-10:
        return None
    H, info = linalg.lapack.dpotri(c, lower=1)
    H = np.tril(H) + np.tril(H, -1).T
    return H if np.all(np.isfinite(H)) else None


def _fit_column_from_inverse(Z1: np.ndarray, H: np.ndarray, j: int, mj: np.ndarray) -> np.ndarray | None:
    """Regression of column j on the rest over observed rows, via a Woodbury downdate of H.

    Column j of the inverse of the observed-row Gram matrix gives the
    coefficients directly: beta = -u[rest] / u[j]. Returns None when the
    downdate is ill-conditioned, leaving the caller to factor directly.
    """
    n_obs = len(mj) - int(mj.sum())
    if n_obs <= Z1.shape[1] - 1:
        return None
    u = H[:, j].copy()
    Zm = Z1[mj]
    if len(Zm):
        HZ = H @ Zm.T
        S = np.eye(len(Zm)) - Zm @ HZ
        c, info = linalg.lapack.dpotrf(S, lower=1, clean=1)
        if info != 0:
            return None
        rcond, info = linalg.lapack.dpocon(c, np.abs(S).sum(axis=0).max(), uplo="L")
        if info != 0 or rcond < 1e-8:
            return None
        y, info = linalg.lapack.dpotrs(c, Zm @ u, lower=1)
        u += HZ @ y
    if not np.all(np.isfinite(u)) or u[j] <= 0:
        return None
    return -np.delete(u, j) / u[j]


def _update_inverse(H: np.ndarray, j: int, delta: np.ndarray, buf: np.ndarray) -> None:
    """Update H in place after ``delta`` is added to row and column j of its inverse."""
    # the change is U C U^T with U = [e_j, delta], C = [[-delta_j, 1], [1, 0]]
    HU = np.empty((len(H), 2))
    HU[:, 0] = H[:, j]
    HU[:, 1] = H @ delta
    M = np.array(
        [
            [HU[j, 0], 1.0 + HU[j, 1]],
            [1.0 + delta @ HU[:, 0], delta[j] + delta @ HU[:, 1]],
        ]
    )
    np.matmul(HU, np.linalg.solve(M, HU.T), out=buf)
    H -= buf


def _fit_column(Z1: np.ndarray, gram: np.ndarray, j: int, mj: np.ndarray) -> np.ndarray:
    keep = np.ones(Z1.shape[1], dtype=bool)
    keep[j] = False
    obs = ~mj
    n_obs = int(obs.sum())
    if n_obs <= keep.sum():
        # fewer rows than predictors: minimum-norm least squares on the rows directly
        beta, *_ = np.linalg.lstsq(Z1[obs][:, keep], Z1[obs, j], rcond=None)
        return beta
    Zm = Z1[mj]
    G = gram - Zm.T @ Zm
    A = G[np.ix_(keep, keep)]
    b = G[keep, j]
    try:
        c = linalg.cho_factor(A, check_finite=False)
        beta = linalg.cho_solve(c, b, check_finite=False)
        if np.all(np.isfinite(beta)):
            return beta
    except linalg.LinAlgError:
        pass
    beta, *_ = np.linalg.lstsq(Z1[obs][:, keep], Z1[obs, j], rcond=None)
    return beta


def _predict_column(Z1: np.ndarray, j: int, beta: np.ndarray, mj: np.ndarray) -> np.ndarray:
    rows = Z1[mj]
    return np.delete(rows, j, axis=1) @ beta


def mice_impute(cohort: Cohort, rounds: int = 10) -> Cohort:
    imputed, _ = fit_mice(cohort, rounds)
    return imputed


def fit_mice(cohort: Cohort, rounds: int = 10) -> tuple[Cohort, MiceImputer]:
    if cohort.stage != Stage.RAW:
        raise PipelineStateError(
            f"mice_impute expects a raw cohort, got stage {cohort.stage.name}"
        )
    names = [f"vit_c{c}_h{h}" for c in range(N_CHANNELS) for h in range(1, N_HOURS + 1)]
    names += list(cohort.feature_names)
    imp = MiceImputer(rounds=rounds)
    if len(cohort) == 0:
        return replace(cohort, stage=Stage.IMPUTED), imp
    X = imp.fit_transform(cohort.tokens(), names=names)
    return cohort.with_tokens(X, Stage.IMPUTED), imp


def apply_mice(cohort: Cohort, imp: MiceImputer) -> Cohort:
    if cohort.stage != Stage.RAW:
        raise PipelineStateError("apply_mice expects a raw cohort")
    return cohort.with_tokens(imp.transform(cohort.tokens()), Stage.IMPUTED)


# ---------------------------------------------------------------------------
# min-max scaling
# ---------------------------------------------------------------------------


@dataclass
class ScalingRegistry:
    """Per-column (min, max): one pair per vital channel and per aggregated feature."""

    vital_min: np.ndarray
    vital_max: np.ndarray
    agg_min: np.ndarray
    agg_max: np.ndarray
    warnings: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "vital_min": self.vital_min.tolist(),
            "vital_max": self.vital_max.tolist(),
            "agg_min": self.agg_min.tolist(),
            "agg_max": self.agg_max.tolist(),
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ScalingRegistry":
        return cls(
            np.array(obj["vital_min"]),
            np.array(obj["vital_max"]),
            np.array(obj["agg_min"]),
            np.array(obj["agg_max"]),
            list(obj.get("warnings", [])),
        )


def _scale(x, lo, hi):
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (x - lo) / safe, 0.0)


def fit_minmax(cohort: Cohort) -> ScalingRegistry:
    if len(cohort) == 0:
        raise ValueError("cannot fit scaling on an empty cohort")
    reg = ScalingRegistry(
        vital_min=cohort.vitals.min(axis=(0, 2)),
        vital_max=cohort.vitals.max(axis=(0, 2)),
        agg_min=cohort.aggregated.min(axis=0),
        agg_max=cohort.aggregated.max(axis=0),
    )
    for c in np.where(reg.vital_max == reg.vital_min)[0]:
        reg.warnings.append(f"constant vital channel {cohort.channel_names[c]} mapped to 0.0")
    for f in np.where(reg.agg_max == reg.agg_min)[0]:
        reg.warnings.append(f"constant feature {cohort.feature_names[f]} mapped to 0.0")
    for w in reg.warnings:
        logger.warning(w)
    return reg


def apply_minmax(cohort: Cohort, reg: ScalingRegistry, clip: bool = True) -> Cohort:
    """Scale with a fitted registry; held-out values are clipped into [0, 1]."""
    if cohort.stage != Stage.IMPUTED:
        raise PipelineStateError(
            f"min-max scaling expects an imputed cohort, got stage {cohort.stage.name}"
        )
    if cohort.has_missing():
        raise PipelineStateError("min-max scaling requires imputation first")
    v = _scale(cohort.vitals, reg.vital_min[None, :, None], reg.vital_max[None, :, None])
    a = _scale(cohort.aggregated, reg.agg_min[None, :], reg.agg_max[None, :])
    if clip:
        v, a = np.clip(v, 0.0, 1.0), np.clip(a, 0.0, 1.0)
    return replace(cohort, vitals=v, aggregated=a, stage=Stage.NORMALIZED)


def minmax_normalize(cohort: Cohort) -> tuple[Cohort, ScalingRegistry]:
    reg = fit_minmax(cohort)
    return apply_minmax(cohort, reg), reg


def inverse_minmax(cohort: Cohort, reg: ScalingRegistry) -> Cohort:
    v = cohort.vitals * (reg.vital_max - reg.vital_min)[None, :, None] + reg.vital_min[None, :, None]
    a = cohort.aggregated * (reg.agg_max - reg.agg_min)[None, :] + reg.agg_min[None, :]
    return replace(cohort, vitals=v, aggregated=a, stage=Stage.IMPUTED)


# ---------------------------------------------------------------------------
# undersampling
# ---------------------------------------------------------------------------


def undersample_balance(cohort: Cohort, seed: int) -> Cohort:
    """Keep every positive; draw an equal number of negatives without replacement.

    Allowed on a raw cohort (label-only resampling, used before per-fold
    preprocessing) or on a normalized one; anything else is out of order.
    """
    if cohort.stage not in (Stage.RAW, Stage.NORMALIZED):
        raise PipelineStateError(
            f"undersample_balance after {cohort.stage.name} is out of pipeline order"
        )
    pos = np.where(cohort.labels == 1)[0]
    neg = np.where(cohort.labels == 0)[0]
    if len(pos) == 0:
        raise BalanceError("no positive records to balance against")
    if len(neg) < len(pos):
        raise BalanceError(
            f"fewer negatives ({len(neg)}) than positives ({len(pos)}); nothing to undersample"
        )
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(neg, size=len(pos), replace=False))
    keep = np.sort(np.concatenate([pos, chosen]))
    out = cohort.subset(keep)
    if cohort.stage == Stage.NORMALIZED:
        out.stage = Stage.BALANCED
    return out


# ---------------------------------------------------------------------------
# stage-1 windows
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WindowSample:
    stay_id: str
    channel: int
    start: int  # 1-based hour of the first past value
    past: np.ndarray  # 12 values, hours start..start+11
    future: np.ndarray  # 8 values, hours start+12..start+19


@dataclass
class WindowArrays:
    """Column-wise view of a window list, used by the trainer."""

    channel: np.ndarray
    start: np.ndarray
    past: np.ndarray
    future: np.ndarray

    def __len__(self) -> int:
        return len(self.channel)


def make_windows(cohort: Cohort) -> list[WindowSample]:
    if cohort.stage < Stage.NORMALIZED:
        raise PipelineStateError(
            f"make_windows expects a normalized cohort, got stage {cohort.stage.name}"
        )
    out = []
    for i, sid in enumerate(cohort.stay_ids):
        for c in range(N_CHANNELS):
            series = cohort.vitals[i, c]
            for s in WINDOW_STARTS:
                out.append(
                    WindowSample(
                        stay_id=sid,
                        channel=c,
                        start=s,
                        past=series[s - 1 : s - 1 + PAST_HOURS].copy(),
                        future=series[s - 1 + PAST_HOURS : s - 1 + PAST_HOURS + FUTURE_HOURS].copy(),
                    )
                )
    return out


def windows_to_arrays(windows: list[WindowSample]) -> WindowArrays:
    if not windows:
        return WindowArrays(
            np.zeros(0, np.int64), np.zeros(0, np.int64),
            np.zeros((0, PAST_HOURS)), np.zeros((0, FUTURE_HOURS)),
        )
    return WindowArrays(
        channel=np.array([w.channel for w in windows], dtype=np.int64),
        start=np.array([w.start for w in windows], dtype=np.int64),
        past=np.stack([w.past for w in windows]),
        future=np.stack([w.future for w in windows]),
    )


# ---------------------------------------------------------------------------
# synthetic cohort
# ---------------------------------------------------------------------------

PLANTED_CHANNELS = (1, 4)
PLANTED_HOURS = tuple(range(16, 25))
N_PLANTED_FEATURES = 10
# demographics (age, gender, race) are never knocked out; MICE needs an anchor column
N_COMPLETE_FEATURES = 3


@dataclass
class GroundTruth:
    important_tokens: list[int]
    seed: int
    planted_channels: tuple = PLANTED_CHANNELS
    planted_features: tuple = ()

    def to_json(self) -> str:
        return json.dumps({"important_tokens": self.important_tokens, "seed": self.seed})

    @classmethod
    def from_json(cls, text: str) -> "GroundTruth":
        obj = json.loads(text)
        return cls(important_tokens=list(obj["important_tokens"]), seed=int(obj["seed"]))


def synth_generate(
    n: int,
    positive_fraction: float,
    seed: int,
    missing_fraction: float = 0.02,
    feature_shift: float = 0.3,
    drift: float = 0.35,
) -> tuple[Cohort, GroundTruth]:
    """Planted-signal cohort.

    Vitals are smoothed, bounded random walks. Positive records get a monotone
    upward ramp (reaching ``drift`` at hour 24) on two channels across hours
    16-24, and a ``feature_shift`` offset (clipped) on ten aggregated features.
    ``missing_fraction`` of all cells is knocked out.

    With the default shift the aggregated features alone nearly separate the
    classes; lower it to push the label signal into the late vitals.
    """
    if n < 10:
        raise ValueError("synth_generate needs n >= 10")
    if not 0.0 < positive_fraction < 1.0:
        raise ValueError("positive_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    n_pos = int(round(n * positive_fraction))
    labels = np.zeros(n, dtype=np.int64)
    labels[rng.permutation(n)[:n_pos]] = 1

    start = rng.uniform(0.3, 0.7, size=(n, N_CHANNELS, 1))
    steps = rng.normal(0.0, 0.04, size=(n, N_CHANNELS, N_HOURS))
    kernel = np.array([0.25, 0.5, 0.25])
    smooth = np.apply_along_axis(lambda s: np.convolve(s, kernel, mode="same"), 2, steps)
    walk = start + np.cumsum(smooth, axis=2)
    # reflect into [0.05, 0.95] to stay bounded without piling up at the edges
    walk = 0.05 + np.abs(((walk - 0.05) + 0.9) % 1.8 - 0.9)
    ramp = np.zeros(N_HOURS)
    hours = np.arange(1, N_HOURS + 1)
    late = hours >= PLANTED_HOURS[0]
    ramp[late] = drift * (hours[late] - (PLANTED_HOURS[0] - 1)) / len(PLANTED_HOURS)
    for c in PLANTED_CHANNELS:
        walk[labels == 1, c, :] += ramp
    vitals = np.clip(walk, 0.0, 1.0)

    aggregated = rng.beta(2.0, 2.0, size=(n, N_AGG))
    planted_features = tuple(int(f) for f in np.sort(rng.choice(N_AGG, N_PLANTED_FEATURES, replace=False)))
    for f in planted_features:
        aggregated[labels == 1, f] += feature_shift
    aggregated = np.clip(aggregated, 0.0, 1.0)

    if missing_fraction > 0:
        vm = rng.random(vitals.shape) < missing_fraction
        am = rng.random(aggregated.shape) < missing_fraction
        am[:, :N_COMPLETE_FEATURES] = False
        vitals[vm] = np.nan
        aggregated[am] = np.nan

    width = len(str(n - 1))
    ids = [f"synth-{seed}-{i:0{width}d}" for i in range(n)]
    important = sorted(
        [vital_token(c, h) for c in PLANTED_CHANNELS for h in PLANTED_HOURS]
        + [agg_token(f) for f in planted_features]
    )
    cohort = Cohort(
        stay_ids=ids,
        vitals=vitals,
        aggregated=aggregated,
        labels=labels,
        provenance=f"synth(n={n}, positive_fraction={positive_fraction}, seed={seed})",
    )
    return cohort, GroundTruth(important, seed, PLANTED_CHANNELS, planted_features)


def preprocess_global(cohort: Cohort, rounds: int = 10, balance: bool = True, seed: int = 0):
    """impute -> normalize -> undersample on the whole cohort."""
    imputed = mice_impute(cohort, rounds) if cohort.stage == Stage.RAW else cohort
    normalized, reg = minmax_normalize(imputed)
    if balance:
        normalized = undersample_balance(normalized, seed)
    return normalized, reg
