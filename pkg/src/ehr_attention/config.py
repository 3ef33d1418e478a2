"""Experiment configuration: one JSON document, schema-checked before any work.

Unknown keys are rejected. Errors name the offending line of the source text.
"""

from __future__ import annotations

import copy
import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path

import jsonschema

from .dataset import N_TOKENS

MODEL_KIND_NAMES = ["attention", "logistic", "lstm"]
METHOD_NAMES = ["attention", "shap", "weight", "random"]


class ConfigError(ValueError):
    """Invalid experiment configuration; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        self.line = line
        self.source = source
        where = ""
        if source is not None:
            where = f"{source}:{line}: " if line is not None else f"{source}: "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)


def _obj(properties: dict, required=()) -> dict:
    return {"type": "object", "properties": properties, "required": list(required), "additionalProperties": False}


_INT_POS = {"type": "integer", "minimum": 1}
_NUM_POS = {"type": "number", "exclusiveMinimum": 0}

SCHEMA = _obj(
    {
        "seed": {"type": "integer", "minimum": 0},
        "data": {
            "type": "object",
            "required": ["source"],
            "properties": {"source": {"enum": ["synth", "csv"]}},
            "allOf": [
                {
                    "if": {"properties": {"source": {"const": "synth"}}},
                    "then": _obj(
                        {
                            "source": {},
                            "n": {"type": "integer", "minimum": 10},
                            "positive_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                            "seed": {"type": "integer", "minimum": 0},
                            "missing_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                            "drift": {"type": "number", "minimum": 0},
                            "feature_shift": {"type": "number", "minimum": 0},
                        }
                    ),
                },
                {
                    "if": {"properties": {"source": {"const": "csv"}}},
                    "then": _obj({"source": {}, "path": {"type": "string", "minLength": 1}}, required=["path"]),
                },
            ],
        },
        "preprocessing": _obj(
            {
                "balance": {"type": "boolean"},
                "mice_rounds": _INT_POS,
                "scope": {"enum": ["per_fold", "global"]},
            }
        ),
        "models": {"type": "array", "items": {"enum": MODEL_KIND_NAMES}, "minItems": 1, "uniqueItems": True},
        "model": _obj(
            {
                "d": _INT_POS,
                "layers": _INT_POS,
                "heads": _INT_POS,
                "lstm_hidden": _INT_POS,
                "encoder_mode": {"enum": ["factorized", "full"]},
                "fusion_mode": {"enum": ["query", "self"]},
            }
        ),
        "pretrain": _obj(
            {
                "epochs": {"type": "integer", "minimum": 0},
                "batch_size": _INT_POS,
                "lr": _NUM_POS,
                "windows_per_epoch": {"type": ["integer", "null"], "minimum": 1},
            }
        ),
        "train": _obj(
            {
                "epochs": _INT_POS,
                "batch_size": _INT_POS,
                "lr": _NUM_POS,
                "finetune_encoder": {"type": "boolean"},
                "folds": {"type": "integer", "minimum": 2},
            }
        ),
        "logistic": _obj({"epochs": _INT_POS, "lr": _NUM_POS, "l2": {"type": "number", "minimum": 0}}),
        "explain": _obj(
            {
                "methods": {"type": "array", "items": {"enum": METHOD_NAMES}, "uniqueItems": True},
                "shap_samples": {"type": "integer", "minimum": 2 * N_TOKENS + 2},
                "shap_records": {"type": "integer", "minimum": 2},
            }
        ),
        "fidelity": _obj(
            {
                "fractions": {
                    "type": "array",
                    "items": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                    "minItems": 1,
                },
                "draws": _INT_POS,
                "substitution": {"enum": ["uniform", "permutation"]},
                "report_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            }
        ),
        "case_study": _obj({"count": {"type": "integer", "minimum": 0}}),
    },
    required=["data"],
)

DEFAULTS = {
    "seed": 0,
    "preprocessing": {"balance": True, "mice_rounds": 10, "scope": "per_fold"},
    "models": ["attention", "logistic"],
    "model": {"d": 32, "layers": 2, "heads": 4, "lstm_hidden": 32, "encoder_mode": "factorized", "fusion_mode": "query"},
    "pretrain": {"epochs": 30, "batch_size": 32, "lr": 1e-3, "windows_per_epoch": None},
    "train": {"epochs": 50, "batch_size": 32, "lr": 1e-3, "finetune_encoder": True, "folds": 10},
    "logistic": {"epochs": 300, "lr": 0.05, "l2": 1e-4},
    "explain": {"methods": ["attention", "weight", "random"], "shap_samples": 1024, "shap_records": 10},
    "fidelity": {"fractions": [0.05, 0.10, 0.20], "draws": 10, "substitution": "uniform", "report_fraction": 0.10},
    "case_study": {"count": 10},
}

SYNTH_DEFAULTS = {
    "n": 600,
    "positive_fraction": 0.5,
    "seed": 7,
    "missing_fraction": 0.02,
    "drift": 0.35,
    "feature_shift": 0.3,
}


# ---------------------------------------------------------------------------
# line lookup
# ---------------------------------------------------------------------------

_WS = re.compile(r"[ \t\n\r]*")
_decoder = json.JSONDecoder()


def _locate(text: str) -> dict[tuple, int]:
    """Map every JSON path (tuple of keys/indices) to the offset where it starts.

    Object members map to the offset of their key.
    """
    where: dict[tuple, int] = {}

    def ws(i):
        return _WS.match(text, i).end()

    def value(i, path):
        i = ws(i)
        where.setdefault(path, i)
        ch = text[i : i + 1]
        if ch == "{":
            i = ws(i + 1)
            if text[i] == "}":
                return i + 1
            while True:
                key_at = i
                key, i = json.decoder.scanstring(text, i + 1)
                where[path + (key,)] = key_at
                i = ws(i) + 1  # colon
                i = value(i, path + (key,))
                where[path + (key,)] = key_at
                i = ws(i)
                if text[i] == "}":
                    return i + 1
                i = ws(i + 1)
        if ch == "[":
            i = ws(i + 1)
            if text[i] == "]":
                return i + 1
            n = 0
            while True:
                i = value(i, path + (n,))
                n += 1
                i = ws(i)
                if text[i] == "]":
                    return i + 1
                i = i + 1
        _, end = _decoder.raw_decode(text, i)
        return end

    value(0, ())
    return where


def _line_of(text: str, offset: int) -> int:
    return text.count("\n", 0, offset) + 1


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(obj, text: str | None = None, source: str | None = None) -> None:
    errors = list(jsonschema.Draft202012Validator(SCHEMA).iter_errors(obj))
    if not errors:
        return
    err = jsonschema.exceptions.best_match(errors)
    path = tuple(err.absolute_path)
    line = None
    if text is not None:
        where = _locate(text)
        if err.validator == "additionalProperties":
            extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
            if extra:
                path = path + (extra[0],)
        while path not in where and path:
            path = path[:-1]
        line = _line_of(text, where.get(path, 0))
    dotted = ".".join(str(p) for p in path) or "<root>"
    raise ConfigError(f"{dotted}: {err.message}", line=line, source=source)


@dataclass
class ExperimentConfig:
    """Validated configuration with defaults filled in."""

    raw: dict
    resolved: dict

    @classmethod
    def from_text(cls, text: str, source: str | None = None) -> "ExperimentConfig":
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON: {e.msg}", line=e.lineno, source=source) from None
        validate(obj, text, source)
        resolved = _merge(DEFAULTS, obj)
        if resolved["data"]["source"] == "synth":
            resolved["data"] = _merge({"source": "synth", **SYNTH_DEFAULTS}, obj["data"])
        return cls(raw=obj, resolved=resolved)

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config: {e.strerror}", source=str(p)) from None
        return cls.from_text(text, source=str(p))

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        return cls.from_text(json.dumps(obj, indent=2))

    def __getitem__(self, key):
        return self.resolved[key]

    @property
    def seed(self) -> int:
        return int(self.resolved["seed"])

    def canonical(self) -> str:
        return json.dumps(self.resolved, sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]
