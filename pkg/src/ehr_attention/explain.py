"""Token attributions over the shared 364-token space.

Three methods: the fusion attention row of the mortality model, KernelSHAP
against a single reference record, and absolute logistic weights.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import linalg

from .dataset import N_TOKENS, token_registry
from .models import LogisticModel, MortalityModel

logger = logging.getLogger(__name__)

Scorer = Callable[[np.ndarray], np.ndarray]

EXACT_MAX_PLAYERS = 12


class ModelStateError(ValueError):
    pass


class ShapleySizeError(ValueError):
    pass


class SingularSystemWarning(RuntimeWarning):
    pass


@dataclass
class Attribution:
    method: str
    scores: np.ndarray
    stay_id: str | None = None
    model: str | None = None
    token_registry: list = field(default_factory=token_registry, repr=False)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != (N_TOKENS,):
            raise ValueError(f"attribution needs {N_TOKENS} scores, got {self.scores.shape}")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("attribution scores must be finite")

    def ranking(self) -> np.ndarray:
        """Token indices by descending score, ties broken by index."""
        return np.argsort(-self.scores, kind="stable")

    def to_json(self) -> str:
        obj = {"method": self.method}
        if self.stay_id is not None:
            obj["stay_id"] = self.stay_id
        obj["scores"] = self.scores.tolist()
        obj["token_registry"] = self.token_registry
        return json.dumps(obj)

    @classmethod
    def from_json(cls, text: str) -> "Attribution":
        obj = json.loads(text)
        return cls(
            method=obj["method"],
            scores=np.array(obj["scores"]),
            stay_id=obj.get("stay_id"),
            token_registry=obj["token_registry"],
        )


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def attention_scores(model: MortalityModel, X: np.ndarray) -> np.ndarray:
    """(N, 364) head-averaged fusion attention for token rows ``X``."""
    if not all(np.all(np.isfinite(p.data)) for p in model.parameters()):
        raise ModelStateError("model parameters contain NaN/Inf")
    X = np.atleast_2d(X)
    return model.attention_tokens(X).mean(axis=1)


def attention_importance(model: MortalityModel, record) -> Attribution:
    scores = attention_scores(model, record.tokens()[None])[0]
    return Attribution("attention", scores, stay_id=record.stay_id, model="attention")


# ---------------------------------------------------------------------------
# Shapley values
# ---------------------------------------------------------------------------


def shapley_kernel(m: int, size: np.ndarray) -> np.ndarray:
    """(M-1) / (C(M,|z|) |z| (M-|z|)) for 0 < |z| < M."""
    size = np.asarray(size)
    comb = np.array([math.comb(m, int(s)) for s in size.ravel()], dtype=np.float64).reshape(size.shape)
    return (m - 1) / (comb * size * (m - size))


def _compose(x, background, players, masks):
    Z = np.repeat(background[None, :], len(masks), axis=0)
    for j, p in enumerate(players):
        on = masks[:, j]
        Z[on, p] = x[p]
    return Z


def exact_shapley(scorer: Scorer, record, background, active) -> np.ndarray:
    """Shapley values of ``active`` tokens by full coalition enumeration.

    Tokens outside ``active`` are held at the background value.
    """
    x = _as_tokens(record)
    bg = _as_tokens(background)
    players = list(active)
    m = len(players)
    if m > EXACT_MAX_PLAYERS:
        raise ShapleySizeError(f"exact Shapley enumerates 2^M coalitions; M={m} > {EXACT_MAX_PLAYERS}")
    if m == 0:
        return np.zeros(0)
    masks = np.array(list(itertools.product([False, True], repeat=m)), dtype=bool)
    base = bg.copy()
    Z = _compose(x, base, players, masks)
    values = np.asarray(scorer(Z), dtype=np.float64)
    index = {tuple(mk): i for i, mk in enumerate(masks.tolist())}
    fact = [math.factorial(i) for i in range(m + 1)]
    phi = np.zeros(m)
    for i, mk in enumerate(masks.tolist()):
        s = sum(mk)
        for j in range(m):
            if mk[j]:
                continue
            with_j = list(mk)
            with_j[j] = True
            w = fact[s] * fact[m - s - 1] / fact[m]
            phi[j] += w * (values[index[tuple(with_j)]] - values[i])
    return phi


def _as_tokens(record) -> np.ndarray:
    if hasattr(record, "tokens"):
        return np.asarray(record.tokens(), dtype=np.float64)
    return np.asarray(record, dtype=np.float64)


def _sample_masks(m: int, n_samples: int, rng: np.random.Generator):
    """Coalition masks and weights whose weighted sum estimates the full kernel sum.

    Sizes are drawn from the kernel's size marginal; every draw is paired with
    its complement (antithetic). Each mask of size s gets the size's total
    kernel mass divided by the number of masks drawn at that size.
    """
    sizes = np.arange(1, m)
    size_mass = (m - 1) / (sizes * (m - sizes))  # C(M,s) * kernel(s)
    p = size_mass / size_mass.sum()
    n_pairs = max(n_samples // 2, 1)
    drawn = rng.choice(sizes, size=n_pairs, p=p)
    masks = np.zeros((2 * n_pairs, m), dtype=bool)
    for i, s in enumerate(drawn):
        on = rng.choice(m, size=s, replace=False)
        masks[2 * i, on] = True
        masks[2 * i + 1] = ~masks[2 * i]
    counts = np.bincount(masks.sum(axis=1), minlength=m + 1)
    msize = masks.sum(axis=1)
    weights = size_mass[msize - 1] / counts[msize]
    return masks, weights


def kernel_shap(
    scorer: Scorer,
    record,
    background,
    n_samples: int = 4096,
    seed: int = 0,
    stay_id: str | None = None,
    model: str | None = None,
) -> Attribution:
    """KernelSHAP with the efficiency constraint imposed exactly.

    Tokens where the record equals the background cannot change the output and
    get zero attribution. If every proper coalition of the remaining M tokens
    fits in ``n_samples`` they are enumerated (exact Shapley values);
    otherwise coalitions are sampled.
    """
    x = _as_tokens(record)
    bg = _as_tokens(background)
    if x.shape != bg.shape:
        raise ValueError("record and background differ in length")
    scores = np.zeros(len(x))
    players = np.where(x != bg)[0]
    m = len(players)
    f_x = float(np.asarray(scorer(x[None]))[0])
    f_bg = float(np.asarray(scorer(bg[None]))[0])
    delta = f_x - f_bg
    if m == 0:
        return Attribution("shap", scores, stay_id=stay_id, model=model)
    if m == 1:
        scores[players[0]] = delta
        return Attribution("shap", scores, stay_id=stay_id, model=model)
    full_enum = m < 63 and (2**m - 2) <= n_samples
    if not full_enum and n_samples < 2 * m + 2:
        raise ValueError(f"n_samples={n_samples} below 2M+2={2 * m + 2} for M={m} varying tokens")
    if full_enum:
        masks = np.array(list(itertools.product([False, True], repeat=m))[1:-1], dtype=bool)
        weights = shapley_kernel(m, masks.sum(axis=1))
    else:
        masks, weights = _sample_masks(m, n_samples, np.random.default_rng(seed))
    Z = _compose(x, bg, players, masks)
    y = np.asarray(scorer(Z), dtype=np.float64) - f_bg
    phi = _constrained_wls(masks.astype(np.float64), y, weights, delta)
    scores[players] = phi
    return Attribution("shap", scores, stay_id=stay_id, model=model)


def _constrained_wls(Zm: np.ndarray, y: np.ndarray, w: np.ndarray, total: float) -> np.ndarray:
    """min sum_i w_i (y_i - z_i.phi)^2 subject to sum(phi) = total.

    Eliminates the last coefficient: phi_M = total - sum(phi_<M).
    """
    last = Zm[:, -1]
    A = Zm[:, :-1] - last[:, None]
    b = y - last * total
    Aw = A * w[:, None]
    G = A.T @ Aw
    r = Aw.T @ b
    try:
        head = linalg.solve(G, r, assume_a="pos", check_finite=False)
        if not np.all(np.isfinite(head)):
            raise linalg.LinAlgError("non-finite solution")
    except (linalg.LinAlgError, ValueError):
        warnings.warn("singular KernelSHAP system; ridge 1e-8 applied", SingularSystemWarning, stacklevel=3)
        head = linalg.solve(G + 1e-8 * np.eye(len(G)), r, check_finite=False)
    phi = np.empty(Zm.shape[1])
    phi[:-1] = head
    # last coefficient from the constraint, with the sum accumulated exactly
    phi[-1] = total - math.fsum(head.tolist())
    return phi


# ---------------------------------------------------------------------------
# logistic weights and random baseline
# ---------------------------------------------------------------------------


def logistic_weight_importance(model: LogisticModel) -> Attribution:
    return Attribution("weight", np.abs(model.weight.data.reshape(-1)), model="logistic")


def random_importance(n_records: int, seed: int) -> np.ndarray:
    """Uninformative per-record scores, the control for the fidelity harness."""
    return np.random.default_rng(seed).random((n_records, N_TOKENS))
