"""End-to-end experiment runner: data -> preprocessing -> CV -> explanations -> fidelity -> case studies.

Every artifact carries the stamp {tool_version, config_hash, seed}. JSON is
written with fixed key order and no timestamps, so equal stamps give equal
bytes. A lockfile keeps one experiment per output directory.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .case_study import export_case_study
from .config import ExperimentConfig
from .dataset import load_cohort_csv, save_cohort_csv, synth_generate, preprocess_global, undersample_balance
from .evaluation import (
    combine_reports,
    fidelity,
    report_table,
    report_table_csv,
    utility_table,
    utility_table_csv,
)
from .explain import attention_scores, kernel_shap, logistic_weight_importance, random_importance
from .models import ModelConfig, save_checkpoint
from .training import (
    CVConfig,
    CVResult,
    LogisticConfig,
    PretrainConfig,
    TrainConfig,
    prepare_folds,
    run_cv,
)

logger = logging.getLogger(__name__)

STAGES = ("data", "preprocess", "train", "explain", "fidelity", "case_study")

# which attribution methods apply to which model kind
METHOD_SUPPORT = {
    "attention": {"attention"},
    "weight": {"logistic"},
    "shap": {"attention", "logistic", "lstm"},
    "random": {"attention", "logistic", "lstm"},
}


class StageFailure(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")


class OutputLocked(RuntimeError):
    pass


class _Lock:
    def __init__(self, out: Path):
        self.path = out / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise OutputLocked(
                f"{self.path} exists: another run owns this directory (delete the file if that run is dead)"
            ) from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


@dataclass
class Artifacts:
    out: Path
    stamp: dict
    written: list[str] = field(default_factory=list)

    @property
    def comment(self) -> str:
        return " ".join(f"{k}={v}" for k, v in self.stamp.items())

    def _path(self, rel: str) -> Path:
        p = self.out / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        if rel not in self.written:
            self.written.append(rel)
        return p

    def json(self, rel: str, payload: dict) -> Path:
        p = self._path(rel)
        p.write_text(json.dumps({"stamp": self.stamp, **payload}, indent=2) + "\n")
        return p

    def text(self, rel: str, body: str) -> Path:
        p = self._path(rel)
        p.write_text(f"# {self.comment}\n{body}")
        return p

    def file(self, rel: str) -> Path:
        return self._path(rel)

    def track(self, paths) -> None:
        for p in paths:
            rel = str(Path(p).relative_to(self.out))
            if rel not in self.written:
                self.written.append(rel)

    def manifest(self, status: str, completed: list[str], failed_stage: str | None, error: str | None):
        entries = []
        for rel in sorted(self.written):
            p = self.out / rel
            if p.exists():
                entries.append({"path": rel, "sha256": hashlib.sha256(p.read_bytes()).hexdigest()})
        body = {
            "stamp": self.stamp,
            "status": status,
            "completed_stages": completed,
            "failed_stage": failed_stage,
            "error": error,
            "artifacts": entries,
        }
        (self.out / "MANIFEST.json").write_text(json.dumps(body, indent=2) + "\n")


@dataclass
class RunResult:
    out: Path
    stamp: dict
    cv: dict[str, CVResult]
    fidelity: list
    case_studies: list


def cv_config(cfg: ExperimentConfig) -> CVConfig:
    m = cfg["model"]
    return CVConfig(
        model=ModelConfig(
            d=m["d"],
            layers=m["layers"],
            heads=m["heads"],
            lstm_hidden=m["lstm_hidden"],
            encoder_mode=m["encoder_mode"],
            fusion_mode=m["fusion_mode"],
            seed=cfg.seed,
        ),
        pretrain=PretrainConfig(seed=cfg.seed, **cfg["pretrain"]),
        train=TrainConfig(seed=cfg.seed, **cfg["train"]),
        logistic=LogisticConfig(**cfg["logistic"]),
        scope=cfg["preprocessing"]["scope"],
        mice_rounds=cfg["preprocessing"]["mice_rounds"],
        seed=cfg.seed,
    )


def _shap_subset(labels: np.ndarray, n: int) -> np.ndarray:
    """First n/2 positives and n/2 negatives of a test split, in split order."""
    pos = np.where(labels == 1)[0][: (n + 1) // 2]
    neg = np.where(labels == 0)[0][: n // 2]
    return np.sort(np.concatenate([pos, neg]))


def attributions_for(method: str, kind: str, fold_result, cfg: ExperimentConfig):
    """Return (record indices into the test split, (n, 364) scores)."""
    data = fold_result.data
    model = fold_result.model
    X = data.X_test
    idx = np.arange(len(X))
    if method == "attention":
        return idx, attention_scores(model, X)
    if method == "weight":
        w = logistic_weight_importance(model).scores
        return idx, np.tile(w, (len(X), 1))
    if method == "random":
        return idx, random_importance(len(X), cfg.seed * 1000 + data.fold)
    if method == "shap":
        idx = _shap_subset(data.test.labels, cfg["explain"]["shap_records"])
        bg = data.background
        rows = [
            kernel_shap(
                model.predict_tokens,
                X[i],
                bg,
                n_samples=cfg["explain"]["shap_samples"],
                seed=cfg.seed * 1000 + data.fold,
            ).scores
            for i in idx
        ]
        return idx, np.array(rows)
    raise ValueError(f"unknown attribution method {method!r}")


def run_experiment(config: ExperimentConfig | str | Path, out_dir: str | Path) -> RunResult:
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.from_file(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stamp = {"tool_version": __version__, "config_hash": cfg.hash(), "seed": cfg.seed}
    art = Artifacts(out, stamp)
    completed: list[str] = []
    with _Lock(out):
        stage = STAGES[0]
        try:
            art.json("config.json", {"config": cfg.resolved})

            # data
            d = cfg["data"]
            if d["source"] == "synth":
                params = {k: v for k, v in d.items() if k != "source"}
                n = params.pop("n")
                frac = params.pop("positive_fraction")
                seed = params.pop("seed")
                cohort, truth = synth_generate(n, frac, seed, **params)
                save_cohort_csv(cohort, art.file("cohort.csv"), comment=art.comment)
                art.json("ground_truth.json", json.loads(truth.to_json()))
            else:
                cohort = load_cohort_csv(d["path"])
            completed.append(stage)

            # preprocess
            stage = "preprocess"
            cvcfg = cv_config(cfg)
            pre = cfg["preprocessing"]
            k = cfg["train"]["folds"]
            if pre["scope"] == "per_fold":
                if pre["balance"]:
                    cohort = undersample_balance(cohort, cfg.seed)
                folds = prepare_folds(cohort, k, cfg.seed, "per_fold", pre["mice_rounds"])
            else:
                cohort, _ = preprocess_global(cohort, pre["mice_rounds"], pre["balance"], cfg.seed)
                folds = prepare_folds(cohort, k, cfg.seed, "global")
            art.json(
                "preprocess.json",
                {
                    "n_records": len(cohort),
                    "n_positive": int(cohort.labels.sum()),
                    "scope": pre["scope"],
                    "folds": [
                        {"fold": f.fold, "train": len(f.train_idx), "test": len(f.test_idx)} for f in folds
                    ],
                },
            )
            completed.append(stage)

            # train
            stage = "train"
            cv = {}
            for kind in cfg["models"]:
                logger.info("cross-validating %s", kind)
                cv[kind] = run_cv(None, kind, cvcfg, folds=folds)
                for r in cv[kind].folds:
                    r.checkpoint = f"checkpoints/{kind}_fold{r.fold}.ckpt"
                    save_checkpoint(r.model, art.file(r.checkpoint), extra=stamp)
            art.json(
                "metrics.json",
                {
                    "models": {
                        kind: {"summary": res.summary(), "folds": [r.to_json() for r in res.folds]}
                        for kind, res in cv.items()
                    }
                },
            )
            summary = {kind: res.summary() for kind, res in cv.items()}
            art.text("tables/utility.txt", utility_table(summary))
            art.text("tables/utility.csv", utility_table_csv(summary))
            art.json(
                "curves.json",
                {"models": {kind: [r.curves for r in res.folds] for kind, res in cv.items()}},
            )
            completed.append(stage)

            # explain
            stage = "explain"
            attributions = {}
            for kind, res in cv.items():
                for method in cfg["explain"]["methods"]:
                    if kind not in METHOD_SUPPORT[method]:
                        continue
                    per_fold = [attributions_for(method, kind, r, cfg) for r in res.folds]
                    attributions[kind, method] = per_fold
                    records = []
                    for r, (idx, scores) in zip(res.folds, per_fold):
                        for i, row in zip(idx, scores):
                            records.append(
                                {"fold": r.fold, "stay_id": r.data.test.stay_ids[i], "scores": row.tolist()}
                            )
                    art.json(f"attributions/{kind}_{method}.json", {"model": kind, "method": method, "records": records})
            completed.append(stage)

            # fidelity
            stage = "fidelity"
            fcfg = cfg["fidelity"]
            reports = []
            for (kind, method), per_fold in attributions.items():
                for direction in ("plus", "minus"):
                    fold_reports = []
                    for r, (idx, scores) in zip(cv[kind].folds, per_fold):
                        fold_reports.append(
                            fidelity(
                                r.model.predict_tokens,
                                r.data.X_test[idx],
                                r.data.test.labels[idx],
                                scores,
                                direction,
                                fractions=fcfg["fractions"],
                                draws=fcfg["draws"],
                                seed=cfg.seed,
                                substitution=fcfg["substitution"],
                                model=kind,
                                method=method,
                            )
                        )
                    reports.append(combine_reports(fold_reports))
            if reports:
                art.json(
                    "fidelity.json",
                    {"report_fraction": fcfg["report_fraction"], "reports": [r.to_json() for r in reports]},
                )
                art.text("tables/fidelity.txt", report_table(reports, fcfg["report_fraction"]))
                art.text("tables/fidelity.csv", report_table_csv(reports, fcfg["report_fraction"]))
            completed.append(stage)

            # case studies
            stage = "case_study"
            exports = []
            count = cfg["case_study"]["count"]
            if "attention" in cv and count > 0:
                for fr, stay in case_study_picks(cv["attention"], count):
                    exp = export_case_study(
                        fr.model,
                        fr.data.test,
                        stay,
                        out / "case_studies" / stay,
                        reference=fr.data.train,
                        stamp=stamp,
                    )
                    art.track(sorted((out / "case_studies" / stay).iterdir()))
                    exports.append(exp)
                art.json(
                    "case_studies/index.json",
                    {
                        "cases": [
                            {"stay_id": e.stay_id, "flagged_hours": e.flagged_hours()} for e in exports
                        ]
                    },
                )
            completed.append(stage)
        except Exception as e:
            art.manifest("failed", completed, stage, f"{type(e).__name__}: {e}")
            raise StageFailure(stage, e) from e
        art.manifest("ok", completed, None, None)
    return RunResult(out, stamp, cv, reports, exports)


def case_study_picks(res: CVResult, count: int):
    """Positive test patients taken round-robin across folds, in split order."""
    queues = [[r.data.test.stay_ids[i] for i in np.where(r.data.test.labels == 1)[0]] for r in res.folds]
    picks = []
    depth = 0
    while len(picks) < count and any(depth < len(q) for q in queues):
        for r, q in zip(res.folds, queues):
            if depth < len(q) and len(picks) < count:
                picks.append((r, q[depth]))
        depth += 1
    return picks
