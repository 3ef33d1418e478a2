"""Command-line interface.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .case_study import export_case_study
from .config import ConfigError, ExperimentConfig
from .dataset import (
    BalanceError,
    Cohort,
    ImputationError,
    IntegrityError,
    ParseError,
    PipelineStateError,
    SchemaError,
    Stage,
    load_cohort_csv,
    make_windows,
    preprocess_global,
    save_cohort_csv,
    synth_generate,
)
from .evaluation import FidelityConfigError, MetricError, all_metrics, fidelity
from .explain import (
    attention_scores,
    kernel_shap,
    logistic_weight_importance,
    random_importance,
)
from .models import (
    LogisticModel,
    LstmFusionModel,
    ModelConfig,
    MortalityModel,
    VitalAutoencoder,
    load_checkpoint,
    save_checkpoint,
)
from .runner import OutputLocked, StageFailure, run_experiment
from .training import (
    LogisticConfig,
    PretrainConfig,
    StratificationError,
    TrainConfig,
    pretrain_stage1,
    train_logistic,
    train_lstm,
    train_stage2,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4

DATA_ERRORS = (
    SchemaError,
    ParseError,
    IntegrityError,
    ImputationError,
    BalanceError,
    PipelineStateError,
    StratificationError,
    MetricError,
    FileNotFoundError,
    KeyError,
)
CONFIG_ERRORS = (ConfigError, FidelityConfigError)

logger = logging.getLogger("ehr_attention")


class DataError(ValueError):
    pass


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, StageFailure):
        exc = exc.cause
    if isinstance(exc, CONFIG_ERRORS):
        return EXIT_CONFIG
    if isinstance(exc, DATA_ERRORS + (DataError,)):
        return EXIT_DATA
    return EXIT_RUNTIME


def _dump(obj, path: str | None) -> None:
    text = json.dumps(obj, indent=2) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


def _load_processed(path) -> Cohort:
    """A preprocessed cohort CSV: complete and min-max scaled."""
    cohort = load_cohort_csv(path)
    if cohort.has_missing():
        raise DataError(f"{path}: cohort has missing cells; run `preprocess` first")
    X = cohort.tokens()
    if len(X) and (X.min() < 0.0 or X.max() > 1.0):
        raise DataError(f"{path}: values outside [0, 1]; run `preprocess` first")
    return replace(cohort, stage=Stage.NORMALIZED)


def _model_config(args) -> ModelConfig:
    return ModelConfig(d=args.d, layers=args.layers, heads=args.heads, seed=args.seed)


def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--d", type=int, default=32, help="token width")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cohort, truth = synth_generate(
        args.n,
        args.pos_frac,
        args.seed,
        missing_fraction=args.missing,
        feature_shift=args.feature_shift,
        drift=args.drift,
    )
    save_cohort_csv(cohort, args.out)
    if args.truth:
        Path(args.truth).write_text(truth.to_json() + "\n")
    logger.info("wrote %d records to %s", len(cohort), args.out)
    return EXIT_OK


def cmd_preprocess(args) -> int:
    cohort = load_cohort_csv(args.cohort)
    out, reg = preprocess_global(cohort, args.rounds, not args.no_balance, args.seed)
    save_cohort_csv(out, args.out)
    if args.scaling:
        Path(args.scaling).write_text(json.dumps(reg.to_json(), indent=2) + "\n")
    for w in reg.warnings:
        logger.warning(w)
    logger.info("wrote %d records to %s", len(out), args.out)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cohort = _load_processed(args.cohort)
    ae = VitalAutoencoder(_model_config(args))
    cfg = PretrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        seed=args.seed,
        windows_per_epoch=args.windows_per_epoch,
    )
    curve = pretrain_stage1(ae, make_windows(cohort), cfg)
    save_checkpoint(ae, args.out, extra={"curve": curve})
    logger.info("final future MSE %.5f", curve[-1]["future_mse"] if curve else float("nan"))
    return EXIT_OK


def cmd_train(args) -> int:
    cohort = _load_processed(args.cohort)
    X, y = cohort.tokens(), cohort.labels
    mcfg = _model_config(args)
    if args.kind == "attention":
        if args.encoder:
            ae, _ = load_checkpoint(args.encoder)
            if not isinstance(ae, VitalAutoencoder):
                raise DataError(f"{args.encoder} is not a pretrained autoencoder checkpoint")
            # the encoder fixes the architecture
            model = MortalityModel(replace(ae.cfg, seed=args.seed))
            model.encoder.load_state_dict(ae.encoder.state_dict())
        else:
            model = MortalityModel(mcfg)
        cfg = TrainConfig(
            epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed,
            finetune_encoder=not args.freeze_encoder,
        )
        curve = train_stage2(model, X, y, cfg)
    elif args.kind == "logistic":
        model = LogisticModel(mcfg)
        curve = train_logistic(model, X, y, LogisticConfig())
    else:
        model = LstmFusionModel(mcfg)
        cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed)
        curve = train_lstm(model, X, y, cfg)
    save_checkpoint(model, args.out, extra={"final_loss": curve[-1]["loss"]})
    return EXIT_OK


def _load_predictor(path):
    model, _ = load_checkpoint(path)
    if isinstance(model, VitalAutoencoder):
        raise DataError(f"{path} is a pretraining checkpoint, not a classifier")
    return model


def cmd_evaluate(args) -> int:
    model = _load_predictor(args.model)
    cohort = _load_processed(args.cohort)
    metrics = all_metrics(model.predict_tokens(cohort.tokens()), cohort.labels)
    _dump({"model": model.kind, "n_records": len(cohort), "metrics": metrics}, args.out)
    return EXIT_OK


def _method_scores(method: str, model, X: np.ndarray, background: np.ndarray, args) -> np.ndarray:
    if method == "attention":
        if not isinstance(model, MortalityModel):
            raise ConfigError("attention scores need an attention model checkpoint")
        return attention_scores(model, X)
    if method == "weight":
        if not isinstance(model, LogisticModel):
            raise ConfigError("weight importance needs a logistic checkpoint")
        return np.tile(logistic_weight_importance(model).scores, (len(X), 1))
    if method == "random":
        return random_importance(len(X), args.seed)
    if method == "shap":
        return np.array(
            [kernel_shap(model.predict_tokens, x, background, n_samples=args.samples, seed=args.seed).scores for x in X]
        )
    raise ConfigError(f"unknown method {method!r}")


def _select(cohort: Cohort, stays: list[str] | None) -> np.ndarray:
    if not stays:
        return np.arange(len(cohort))
    return np.array([cohort.index_of(s) for s in stays])


def cmd_explain(args) -> int:
    model = _load_predictor(args.model)
    cohort = _load_processed(args.cohort)
    X = cohort.tokens()
    idx = _select(cohort, args.stay)
    scores = _method_scores(args.method, model, X[idx], X.mean(axis=0), args)
    records = [{"stay_id": cohort.stay_ids[i], "scores": s.tolist()} for i, s in zip(idx, scores)]
    _dump({"model": model.kind, "method": args.method, "records": records}, args.out)
    return EXIT_OK


def cmd_fidelity(args) -> int:
    model = _load_predictor(args.model)
    cohort = _load_processed(args.cohort)
    X = cohort.tokens()
    idx = _select(cohort, args.stay)
    scores = _method_scores(args.method, model, X[idx], X.mean(axis=0), args)
    fractions = [float(f) for f in args.fractions.split(",")]
    reports = [
        fidelity(
            model.predict_tokens,
            X[idx],
            cohort.labels[idx],
            scores,
            direction,
            fractions=fractions,
            draws=args.draws,
            seed=args.seed,
            substitution=args.substitution,
            model=model.kind,
            method=args.method,
        ).to_json()
        for direction in ("plus", "minus")
    ]
    _dump({"reports": reports}, args.out)
    return EXIT_OK


def cmd_case_study(args) -> int:
    model = _load_predictor(args.model)
    if not isinstance(model, MortalityModel):
        raise ConfigError("case studies need an attention model checkpoint")
    cohort = _load_processed(args.cohort)
    export = export_case_study(model, cohort, args.stay, args.out)
    logger.info("flagged hours: %s", export.flagged_hours())
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    result = run_experiment(cfg, args.out)
    for kind, res in result.cv.items():
        s = res.summary()
        logger.info("%s: AUROC %.4f +/- %.4f", kind, s["auroc_mean"], s["auroc_std"])
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ehr-attention", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a planted-signal cohort CSV")
    p.add_argument("--n", type=int, default=600)
    p.add_argument("--pos-frac", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--missing", type=float, default=0.02)
    p.add_argument("--drift", type=float, default=0.35)
    p.add_argument("--feature-shift", type=float, default=0.3)
    p.add_argument("--truth", help="write the planted token indices here")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="impute, scale and undersample a raw cohort")
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rounds", type=int, default=10)
    p.add_argument("--no-balance", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scaling", help="write the fitted min/max registry here")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("pretrain", help="masked-future pretraining of the vitals encoder")
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True)
    _add_model_args(p)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--windows-per-epoch", type=int, default=None)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="train a classifier on a preprocessed cohort")
    p.add_argument("--cohort", required=True)
    p.add_argument("--kind", choices=["attention", "logistic", "lstm"], default="attention")
    p.add_argument("--encoder", help="pretrained autoencoder checkpoint (attention only)")
    p.add_argument("--freeze-encoder", action="store_true")
    p.add_argument("--out", required=True)
    _add_model_args(p)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="AUROC / AUPRC / mean true-class probability")
    p.add_argument("--model", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    for name, func, helptext in (
        ("explain", cmd_explain, "per-record token attributions"),
        ("fidelity", cmd_fidelity, "Fidelity+/- for one attribution method"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--model", required=True)
        p.add_argument("--cohort", required=True)
        p.add_argument("--method", choices=["attention", "shap", "weight", "random"], default="attention")
        p.add_argument("--stay", action="append", help="restrict to these stay ids (repeatable)")
        p.add_argument("--samples", type=int, default=1024, help="KernelSHAP coalition budget")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out")
        if name == "fidelity":
            p.add_argument("--fractions", default="0.05,0.1,0.2")
            p.add_argument("--draws", type=int, default=10)
            p.add_argument("--substitution", choices=["uniform", "permutation"], default="uniform")
        p.set_defaults(func=func)

    p = sub.add_parser("case-study", help="top-20 attention export with SVG panels for one stay")
    p.add_argument("--model", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--stay", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_case_study)

    p = sub.add_parser("run", help="full pipeline from a JSON experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except OutputLocked as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:  # mapped to the documented exit codes
        code = exit_code_for(e)
        print(f"error: {e}", file=sys.stderr)
        if code == EXIT_RUNTIME and args.verbose:
            logger.exception("runtime failure")
        return code
