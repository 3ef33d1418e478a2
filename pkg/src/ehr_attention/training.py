"""Two-stage training of the attention model, baseline fitting, and k-fold CV."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import (
    FUTURE_HOURS,
    PAST_HOURS,
    Cohort,
    Stage,
    WindowArrays,
    apply_minmax,
    apply_mice,
    fit_mice,
    fit_minmax,
    make_windows,
    windows_to_arrays,
)
from .evaluation import auprc, auroc
from .models import (
    LogisticModel,
    LstmFusionModel,
    ModelConfig,
    MortalityModel,
    VitalAutoencoder,
    split_tokens,
)

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class StratificationError(ValueError):
    pass


@dataclass
class PretrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    past: int = PAST_HOURS
    future: int = FUTURE_HOURS
    mask_value: float = 0.0
    # windows drawn per epoch; None uses every window
    windows_per_epoch: int | None = None

    def __post_init__(self):
        if self.past + self.future > 24:
            raise ValueError("past + future must fit in 24 hours")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("invalid pretraining budget")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    finetune_encoder: bool = True
    folds: int = 10

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError("fold count must be >= 2")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("invalid training budget")


@dataclass
class LogisticConfig:
    epochs: int = 300
    lr: float = 0.05
    l2: float = 1e-4


# ---------------------------------------------------------------------------
# stage 1
# ---------------------------------------------------------------------------


def stage1_inputs(w: WindowArrays, idx: np.ndarray, cfg: PretrainConfig):
    """Encoder input grid (B, 1, past+future) with future hours overwritten."""
    past = w.past[idx, : cfg.past]
    masked = np.full((len(idx), cfg.future), cfg.mask_value)
    grid = np.concatenate([past, masked], axis=1)[:, None, :]
    target = np.concatenate([past, w.future[idx, : cfg.future]], axis=1)[:, None, :]
    channels = w.channel[idx][:, None]
    hours = (w.start[idx] - 1)[:, None] + np.arange(cfg.past + cfg.future)[None, :]
    return grid, target, channels, hours


def _stage1_loss(ae: VitalAutoencoder, w: WindowArrays, idx, cfg: PretrainConfig):
    grid, target, channels, hours = stage1_inputs(w, idx, cfg)
    tokens = ae.encoder(grid, channels, hours)
    pred = ae.decoder(tokens, 1, cfg.past + cfg.future)
    fut = np.zeros(target.shape)
    fut[..., cfg.past :] = 1.0
    target_t = Tensor(target)
    future_loss = ad.mse_loss(pred, target_t, fut)
    past_loss = ad.mse_loss(pred, target_t, 1.0 - fut)
    return future_loss + past_loss, future_loss, past_loss


def pretrain_stage1(ae: VitalAutoencoder, windows, cfg: PretrainConfig) -> list[dict]:
    """Masked-future prediction plus past reconstruction, equally weighted."""
    w = windows if isinstance(windows, WindowArrays) else windows_to_arrays(windows)
    if len(w) == 0:
        raise TrainingError("pretraining needs at least one window")
    rng = np.random.default_rng([cfg.seed, 1])
    opt = ad.Adam(ae.parameters(), lr=cfg.lr)
    curve = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(w))
        if cfg.windows_per_epoch is not None:
            perm = perm[: cfg.windows_per_epoch]
        tot = fut = pst = 0.0
        for s in range(0, len(perm), cfg.batch_size):
            idx = perm[s : s + cfg.batch_size]
            loss, fl, pl = _stage1_loss(ae, w, idx, cfg)
            loss.backward()
            opt.step()
            tot += loss.item() * len(idx)
            fut += fl.item() * len(idx)
            pst += pl.item() * len(idx)
        n = len(perm)
        curve.append({"epoch": epoch, "loss": tot / n, "future_mse": fut / n, "past_mse": pst / n})
    return curve


def stage1_future_mse(ae: VitalAutoencoder, windows, cfg: PretrainConfig | None = None) -> float:
    cfg = cfg or PretrainConfig()
    w = windows if isinstance(windows, WindowArrays) else windows_to_arrays(windows)
    idx = np.arange(len(w))
    with ad.no_grad():
        _, fl, _ = _stage1_loss(ae, w, idx, cfg)
    return fl.item()


def persistence_future_mse(windows, cfg: PretrainConfig | None = None) -> float:
    """MSE of repeating the last observed value over the future hours."""
    cfg = cfg or PretrainConfig()
    w = windows if isinstance(windows, WindowArrays) else windows_to_arrays(windows)
    last = w.past[:, cfg.past - 1 : cfg.past]
    return float(np.mean((w.future[:, : cfg.future] - last) ** 2))


# ---------------------------------------------------------------------------
# stage 2 and baselines
# ---------------------------------------------------------------------------


def _check_labels(labels, allow_single_class: bool):
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise TrainingError("empty training split")
    if not allow_single_class and len(np.unique(labels)) < 2:
        raise TrainingError("training split contains a single class")
    return labels


def _minibatches(n: int, batch: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for s in range(0, n, batch):
        yield perm[s : s + batch]


def train_stage2(
    model: MortalityModel,
    X: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    allow_single_class: bool = False,
) -> list[dict]:
    """Cross-entropy training on token rows ``X`` (N, 364).

    With ``finetune_encoder`` off the encoder is excluded from the optimizer
    and its (fixed) outputs are computed once up front.
    """
    labels = _check_labels(labels, allow_single_class)
    vit, agg = split_tokens(X)
    rng = np.random.default_rng([cfg.seed, 2])
    if cfg.finetune_encoder:
        params = model.parameters()
        cached = None
    else:
        enc_ids = {id(p) for p in model.encoder.parameters()}
        params = [p for p in model.parameters() if id(p) not in enc_ids]
        with ad.no_grad():
            cached = np.concatenate(
                [model.encoder(vit[s : s + 256]).data for s in range(0, len(vit), 256)]
            )
    opt = ad.Adam(params, lr=cfg.lr)
    curve = []
    for epoch in range(cfg.epochs):
        total = 0.0
        for idx in _minibatches(len(labels), cfg.batch_size, rng):
            if cached is None:
                prob, _ = model(vit[idx], agg[idx])
            else:
                prob, _ = model.from_vital_tokens(Tensor(cached[idx]), agg[idx])
            loss = ad.bce_loss(prob, labels[idx])
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        curve.append({"epoch": epoch, "loss": total / len(labels)})
    return curve


def train_logistic(
    model: LogisticModel, X: np.ndarray, labels: np.ndarray, cfg: LogisticConfig, allow_single_class=False
) -> list[dict]:
    """Full-batch gradient training with an L2 penalty on the weights."""
    labels = _check_labels(labels, allow_single_class)
    model.l2 = cfg.l2
    opt = ad.Adam(model.parameters(), lr=cfg.lr)
    Xt = Tensor(np.asarray(X, dtype=np.float64))
    curve = []
    for epoch in range(cfg.epochs):
        loss = ad.bce_loss(model(Xt), labels) + model.penalty()
        loss.backward()
        opt.step()
        curve.append({"epoch": epoch, "loss": loss.item()})
    return curve


def train_lstm(
    model: LstmFusionModel, X: np.ndarray, labels: np.ndarray, cfg: TrainConfig, allow_single_class=False
) -> list[dict]:
    labels = _check_labels(labels, allow_single_class)
    vit, agg = split_tokens(X)
    rng = np.random.default_rng([cfg.seed, 3])
    opt = ad.Adam(model.parameters(), lr=cfg.lr)
    curve = []
    for epoch in range(cfg.epochs):
        total = 0.0
        for idx in _minibatches(len(labels), cfg.batch_size, rng):
            loss = ad.bce_loss(model(vit[idx], agg[idx]), labels[idx])
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        curve.append({"epoch": epoch, "loss": total / len(labels)})
    return curve


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------


def stratified_kfold(labels, k: int = 10, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Shuffle each class, deal its members round-robin onto k folds."""
    labels = np.asarray(labels)
    if k < 2:
        raise StratificationError("k must be >= 2")
    rng = np.random.default_rng(seed)
    assignment = np.empty(len(labels), dtype=np.int64)
    offset = 0
    for cls in np.unique(labels):
        members = np.where(labels == cls)[0]
        if len(members) < k:
            raise StratificationError(f"class {cls} has {len(members)} members, fewer than k={k}")
        members = rng.permutation(members)
        assignment[members] = (np.arange(len(members)) + offset) % k
        offset += len(members)
    folds = []
    for f in range(k):
        test = np.where(assignment == f)[0]
        train = np.where(assignment != f)[0]
        folds.append((train, test))
    return folds


@dataclass
class FoldData:
    """Preprocessed train/test token matrices for one fold."""

    fold: int
    train_idx: np.ndarray
    test_idx: np.ndarray
    train: Cohort
    test: Cohort

    @property
    def X_train(self) -> np.ndarray:
        return self.train.tokens()

    @property
    def X_test(self) -> np.ndarray:
        return self.test.tokens()

    @property
    def background(self) -> np.ndarray:
        return self.X_train.mean(axis=0)


def prepare_fold(cohort: Cohort, fold: int, train_idx, test_idx, scope: str = "per_fold", rounds: int = 10) -> FoldData:
    """Fit imputation and scaling on the training split only, apply to both."""
    train = cohort.subset(train_idx)
    test = cohort.subset(test_idx)
    if scope == "per_fold":
        if cohort.stage != Stage.RAW:
            raise TrainingError("per-fold preprocessing expects a raw cohort")
        train_imp, imp = fit_mice(train, rounds)
        test_imp = apply_mice(test, imp)
        reg = fit_minmax(train_imp)
        train, test = apply_minmax(train_imp, reg), apply_minmax(test_imp, reg)
    elif scope == "global":
        if cohort.stage < Stage.NORMALIZED:
            raise TrainingError("global scope expects a cohort preprocessed up front")
    else:
        raise ValueError(f"unknown preprocessing scope {scope!r}")
    return FoldData(fold, np.asarray(train_idx), np.asarray(test_idx), train, test)


def prepare_folds(cohort: Cohort, k: int, seed: int, scope: str = "per_fold", rounds: int = 10) -> list[FoldData]:
    return [
        prepare_fold(cohort, f, tr, te, scope, rounds)
        for f, (tr, te) in enumerate(stratified_kfold(cohort.labels, k, seed))
    ]


@dataclass
class CVConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    logistic: LogisticConfig = field(default_factory=LogisticConfig)
    scope: str = "per_fold"
    mice_rounds: int = 10
    seed: int = 0


@dataclass
class FoldResult:
    fold: int
    test_idx: np.ndarray
    probabilities: np.ndarray
    labels: np.ndarray
    auroc: float
    auprc: float
    model: object = field(repr=False, default=None)
    data: FoldData | None = field(repr=False, default=None)
    curves: dict = field(repr=False, default_factory=dict)
    checkpoint: str | None = None

    def to_json(self) -> dict:
        return {
            "fold": self.fold,
            "auroc": self.auroc,
            "auprc": self.auprc,
            "test_stay_ids": list(self.data.test.stay_ids) if self.data is not None else [],
            "probabilities": self.probabilities.tolist(),
            "labels": self.labels.tolist(),
            "checkpoint": self.checkpoint,
        }


@dataclass
class CVResult:
    kind: str
    folds: list[FoldResult]

    @property
    def aurocs(self) -> np.ndarray:
        return np.array([f.auroc for f in self.folds])

    @property
    def auprcs(self) -> np.ndarray:
        return np.array([f.auprc for f in self.folds])

    def summary(self) -> dict:
        return {
            "model": self.kind,
            "auroc_mean": float(np.mean(self.aurocs)),
            "auroc_std": float(np.std(self.aurocs)),
            "auprc_mean": float(np.mean(self.auprcs)),
            "auprc_std": float(np.std(self.auprcs)),
        }


def _fold_model_config(cfg: ModelConfig, seed: int, fold: int) -> ModelConfig:
    return ModelConfig(**{**cfg.__dict__, "seed": seed * 1000 + fold})


def fit_fold_model(kind: str, data: FoldData, cfg: CVConfig):
    """Train one model kind on a fold's training split; returns (model, curves)."""
    X, y = data.X_train, data.train.labels
    _check_labels(y, allow_single_class=False)
    mcfg = _fold_model_config(cfg.model, cfg.seed, data.fold)
    curves = {}
    if kind == "attention":
        ae = VitalAutoencoder(mcfg)
        pcfg = PretrainConfig(**{**cfg.pretrain.__dict__, "seed": mcfg.seed})
        curves["pretrain"] = pretrain_stage1(ae, make_windows(data.train), pcfg)
        model = MortalityModel(mcfg)
        model.encoder.load_state_dict(ae.encoder.state_dict())
        tcfg = TrainConfig(**{**cfg.train.__dict__, "seed": mcfg.seed})
        curves["train"] = train_stage2(model, X, y, tcfg)
    elif kind == "logistic":
        model = LogisticModel(mcfg, l2=cfg.logistic.l2)
        curves["train"] = train_logistic(model, X, y, cfg.logistic)
    elif kind == "lstm":
        model = LstmFusionModel(mcfg)
        tcfg = TrainConfig(**{**cfg.train.__dict__, "seed": mcfg.seed})
        curves["train"] = train_lstm(model, X, y, tcfg)
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    return model, curves


def run_cv(cohort: Cohort, kind: str, cfg: CVConfig, folds: list[FoldData] | None = None) -> CVResult:
    if folds is None:
        folds = prepare_folds(cohort, cfg.train.folds, cfg.seed, cfg.scope, cfg.mice_rounds)
    results = []
    for data in folds:
        logger.info("fold %d: training %s", data.fold, kind)
        model, curves = fit_fold_model(kind, data, cfg)
        probs = model.predict_tokens(data.X_test)
        labels = data.test.labels
        results.append(
            FoldResult(
                fold=data.fold,
                test_idx=data.test_idx,
                probabilities=probs,
                labels=labels,
                auroc=auroc(probs, labels),
                auprc=auprc(probs, labels),
                model=model,
                data=data,
                curves=curves,
            )
        )
    results.sort(key=lambda r: r.fold)
    return CVResult(kind, results)
