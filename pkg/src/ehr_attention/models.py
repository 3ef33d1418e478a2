"""Hierarchical attention mortality model and the two baselines.

All models score the shared 364-token input: 168 vital tokens (channel-major,
hour-minor) followed by 196 aggregated features.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, ShapeError, leaky_relu, matmul, softmax
from .dataset import N_AGG, N_CHANNELS, N_HOURS, N_TOKENS, N_VITAL_TOKENS

SCHEMA_VERSION = 1


class ModelInputError(ValueError):
    pass


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


class Module:
    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, list) and val and isinstance(val[0], Module):
                for i, m in enumerate(val):
                    yield from m.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for k, p in own.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"{k}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.copy()


def _param(rng: np.random.Generator, shape, scale: float | None = None, zero=False, name=None):
    if zero:
        data = np.zeros(shape)
    else:
        fan_in = shape[-2] if len(shape) >= 2 else shape[-1]
        std = scale if scale is not None else 1.0 / math.sqrt(fan_in)
        data = rng.normal(0.0, std, size=shape)
    return Tensor(data, requires_grad=True, name=name)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng, zero: bool = False):
        self.weight = _param(rng, (d_in, d_out), zero=zero)
        self.bias = _param(rng, (d_out,), zero=True)

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = Tensor(np.ones(d), requires_grad=True)
        self.beta = Tensor(np.zeros(d), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta)


def scaled_dot_attention(queries, keys, values):
    """softmax(Q K^T / sqrt(d)) V over the last two axes.

    ``d`` is the key dimension. Returns ``(output, weights)``.
    """
    q, k, v = (x if isinstance(x, Tensor) else Tensor(x) for x in (queries, keys, values))
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    d = q.shape[-1]
    logits = matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(d))
    weights = softmax(logits, axis=-1)
    return matmul(weights, v), weights


class MultiHeadAttention(Module):
    """Self-attention with ``heads`` heads of width ``head_dim``."""

    def __init__(self, d: int, heads: int, head_dim: int, rng):
        self.heads, self.head_dim = heads, head_dim
        inner = heads * head_dim
        self.w_q = _param(rng, (d, inner))
        self.w_k = _param(rng, (d, inner))
        self.w_v = _param(rng, (d, inner))
        self.w_o = _param(rng, (inner, d))

    def _split(self, x: Tensor) -> Tensor:
        n, s, _ = x.shape
        return x.reshape(n, s, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor):
        n, s, _ = x.shape
        q = self._split(matmul(x, self.w_q))
        k = self._split(matmul(x, self.w_k))
        v = self._split(matmul(x, self.w_v))
        out, weights = scaled_dot_attention(q, k, v)
        out = out.transpose(0, 2, 1, 3).reshape(n, s, self.heads * self.head_dim)
        return matmul(out, self.w_o), weights


class FeedForward(Module):
    def __init__(self, d: int, hidden: int, rng):
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d, rng)

    def __call__(self, x):
        return self.fc2(leaky_relu(self.fc1(x)))


class EncoderBlock(Module):
    """Temporal attention, spatial attention, feed-forward; pre-norm residuals."""

    def __init__(self, d: int, heads: int, rng, mode: str = "factorized"):
        self.mode = mode
        hd = max(d // heads, 1)
        self.norm_t = LayerNorm(d)
        self.attn_t = MultiHeadAttention(d, heads, hd, rng)
        if mode == "factorized":
            self.norm_s = LayerNorm(d)
            self.attn_s = MultiHeadAttention(d, heads, hd, rng)
        self.norm_f = LayerNorm(d)
        self.ff = FeedForward(d, 2 * d, rng)

    def __call__(self, x: Tensor, record: list | None = None) -> Tensor:
        b, c, t, d = x.shape
        if self.mode == "full":
            h = x.reshape(b, c * t, d)
            out, w = self.attn_t(self.norm_t(h))
            x = (h + out).reshape(b, c, t, d)
            if record is not None:
                record.append(("full", w))
        else:
            # temporal: hours attend to hours within a channel
            h = x.reshape(b * c, t, d)
            out, w_t = self.attn_t(self.norm_t(h))
            x = (h + out).reshape(b, c, t, d)
            # spatial: channels attend to channels within an hour
            h = x.transpose(0, 2, 1, 3).reshape(b * t, c, d)
            out, w_s = self.attn_s(self.norm_s(h))
            x = (h + out).reshape(b, t, c, d).transpose(0, 2, 1, 3)
            if record is not None:
                record.append(("temporal", w_t))
                record.append(("spatial", w_s))
        return x + self.ff(self.norm_f(x))


@dataclass
class ModelConfig:
    d: int = 32
    layers: int = 2
    heads: int = 4
    lstm_hidden: int = 32
    encoder_mode: str = "factorized"  # or "full"
    fusion_mode: str = "query"  # or "self"
    seed: int = 0

    def __post_init__(self):
        if self.encoder_mode not in ("factorized", "full"):
            raise ValueError(f"encoder_mode must be factorized|full, got {self.encoder_mode!r}")
        if self.fusion_mode not in ("query", "self"):
            raise ValueError(f"fusion_mode must be query|self, got {self.fusion_mode!r}")
        for k in ("d", "layers", "heads", "lstm_hidden"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be positive")


# ---------------------------------------------------------------------------
# the hierarchical model
# ---------------------------------------------------------------------------


class VitalEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng, n_channels: int = N_CHANNELS, n_hours: int = N_HOURS):
        d = cfg.d
        self.d = d
        self.w_tok = _param(rng, (d,), scale=1.0)
        self.b_tok = _param(rng, (d,), zero=True)
        self.channel_emb = _param(rng, (n_channels, d), scale=0.1)
        self.hour_emb = _param(rng, (n_hours, d), scale=0.1)
        self.blocks = [EncoderBlock(d, cfg.heads, rng, cfg.encoder_mode) for _ in range(cfg.layers)]
        self.norm_out = LayerNorm(d)

    def __call__(self, grid, channels=None, hours=None, record: list | None = None) -> Tensor:
        """Encode a (B, C, T) grid into (B, C*T, d) tokens, channel-major.

        ``channels`` (B, C) / ``hours`` (B, T) hold 0-based embedding rows;
        they default to ``arange(C)`` / ``arange(T)``.
        """
        g = grid.data if isinstance(grid, Tensor) else np.asarray(grid, dtype=np.float64)
        if g.ndim != 3:
            raise ShapeError(f"vital grid must be (B, C, T), got {g.shape}")
        if np.isnan(g).any():
            raise ModelInputError("vital grid contains NaN; impute before encoding")
        b, c, t = g.shape
        ch = np.broadcast_to(np.arange(c) if channels is None else np.asarray(channels), (b, c))
        hr = np.broadcast_to(np.arange(t) if hours is None else np.asarray(hours), (b, t))
        x = Tensor(g[..., None]) * self.w_tok + self.b_tok
        x = x + self.channel_emb[ch][:, :, None, :] + self.hour_emb[hr][:, None, :, :]
        for blk in self.blocks:
            x = blk(x, record)
        x = self.norm_out(x)
        return x.reshape(b, c * t, self.d)


class VitalDecoder(Module):
    def __init__(self, d: int, rng):
        self.proj = Linear(d, 1, rng)

    def __call__(self, tokens: Tensor, n_channels: int, n_hours: int) -> Tensor:
        b, s, _ = tokens.shape
        if s != n_channels * n_hours:
            raise ShapeError(f"decoder got {s} tokens, expected {n_channels * n_hours}")
        return self.proj(tokens).reshape(b, n_channels, n_hours)


class FeatureEmbedder(Module):
    """One scalar -> d two-layer perceptron per aggregated feature."""

    def __init__(self, d: int, rng, n_features: int = N_AGG, hidden: int | None = None):
        h = hidden or d
        self.w1 = _param(rng, (n_features, h), scale=1.0)
        self.b1 = _param(rng, (n_features, h), scale=0.5)
        self.w2 = _param(rng, (n_features, h, d), scale=1.0 / math.sqrt(h))
        self.b2 = _param(rng, (n_features, d), scale=0.1)

    def __call__(self, agg) -> Tensor:
        a = agg.data if isinstance(agg, Tensor) else np.asarray(agg, dtype=np.float64)
        if np.isnan(a).any():
            raise ModelInputError("aggregated features contain NaN")
        h = leaky_relu(Tensor(a[:, :, None]) * self.w1 + self.b1)  # (B, F, h)
        out = matmul(h.transpose(1, 0, 2), self.w2)  # (F, B, d)
        return out.transpose(1, 0, 2) + self.b2


class FusionAttention(Module):
    """Learned classification query attending over the token sequence.

    Each head owns d x d query/key/value maps; logits are scaled by sqrt(d).
    ``mode="self"`` runs full self-attention and mean-pools instead, with the
    token importance taken as the column mean of the attention matrix.
    """

    def __init__(self, d: int, heads: int, rng, mode: str = "query"):
        self.mode = mode
        self.heads = heads
        if mode == "query":
            self.query = _param(rng, (1, d), scale=1.0)
        # head h uses columns h*d:(h+1)*d of each projection
        self.w_q = _param(rng, (d, heads * d))
        self.w_k = _param(rng, (d, heads * d))
        self.w_v = _param(rng, (d, heads * d))
        self.w_o = _param(rng, (heads * d, d))
        self.b_o = _param(rng, (d,), zero=True)

    def _heads(self, x: Tensor) -> Tensor:
        b, s, _ = x.shape
        return x.reshape(b, s, self.heads, -1).transpose(0, 2, 1, 3)

    def __call__(self, tokens: Tensor):
        b, s, d = tokens.shape
        if self.mode == "query":
            return self._query_attend(tokens)
        k = self._heads(matmul(tokens, self.w_k))  # (B, H, S, d)
        v = self._heads(matmul(tokens, self.w_v))
        q = self._heads(matmul(tokens, self.w_q))
        out, w = scaled_dot_attention(q, k, v)  # (B,H,S,d), (B,H,S,S)
        importance = w.mean(axis=2)
        ctx = out.mean(axis=2).reshape(b, self.heads * d)
        return matmul(ctx, self.w_o) + self.b_o, importance

    def _query_attend(self, tokens: Tensor):
        # With a single query, q.(z W_k) = z.(W_k q) and sum_s w_s (z_s W_v) =
        # (sum_s w_s z_s) W_v, so keys and values are never materialized.
        b, s, d = tokens.shape
        h = self.heads
        q = matmul(self.query, self.w_q).reshape(h, d)  # (H, d)
        wk = self.w_k.reshape(d, h, d).transpose(1, 0, 2)  # (H, d_in, d)
        qk = matmul(wk, q.reshape(h, d, 1)).reshape(h, d).transpose(1, 0)  # (d_in, H)
        logits = matmul(tokens, qk) * (1.0 / math.sqrt(d))  # (B, S, H)
        w = softmax(logits.transpose(0, 2, 1), axis=-1)  # (B, H, S)
        pooled = matmul(w, tokens)  # (B, H, d_in)
        wv = self.w_v.reshape(d, h, d).transpose(1, 0, 2)  # (H, d_in, d)
        ctx = matmul(pooled.transpose(1, 0, 2), wv)  # (H, B, d)
        ctx = ctx.transpose(1, 0, 2).reshape(b, h * d)
        return matmul(ctx, self.w_o) + self.b_o, w

    def explicit_query_attend(self, tokens: Tensor):
        """Reference path materializing per-head keys and values."""
        b, s, d = tokens.shape
        k = self._heads(matmul(tokens, self.w_k))
        v = self._heads(matmul(tokens, self.w_v))
        q = matmul(self.query, self.w_q).reshape(1, self.heads, 1, d)
        out, w = scaled_dot_attention(q, k, v)
        ctx = out.reshape(b, self.heads * d)
        return matmul(ctx, self.w_o) + self.b_o, w.reshape(b, self.heads, s)


class MortalityModel(Module):
    kind = "attention"

    def __init__(self, cfg: ModelConfig | None = None):
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.encoder = VitalEncoder(cfg, rng)
        self.embedder = FeatureEmbedder(cfg.d, rng)
        self.token_norm = LayerNorm(cfg.d)
        self.fusion = FusionAttention(cfg.d, cfg.heads, rng, cfg.fusion_mode)
        self.head = Linear(cfg.d, 1, rng)

    def tokens(self, vitals, aggregated) -> Tensor:
        return self._join(self.encoder(vitals), aggregated)

    def _join(self, vital_tokens: Tensor, aggregated) -> Tensor:
        at = self.embedder(aggregated)
        return self.token_norm(ad.concat([vital_tokens, at], axis=1))

    def __call__(self, vitals, aggregated):
        """Return (probabilities (B,), attention weights (B, H, 364))."""
        return self.from_vital_tokens(self.encoder(vitals), aggregated)

    def from_vital_tokens(self, vital_tokens: Tensor, aggregated):
        ctx, weights = self.fusion(self._join(vital_tokens, aggregated))
        prob = ad.sigmoid(self.head(ctx)).reshape(-1)
        return prob, weights

    def predict_tokens(self, X: np.ndarray, batch: int = 256) -> np.ndarray:
        return _batched(lambda v, a: self(v, a)[0], X, batch)

    def attention_tokens(self, X: np.ndarray, batch: int = 256) -> np.ndarray:
        """(N, H, 364) fusion attention for token matrices ``X``."""
        return _batched(lambda v, a: self(v, a)[1], X, batch)


def split_tokens(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None]
    if X.shape[1] != N_TOKENS:
        raise ShapeError(f"token matrix must have {N_TOKENS} columns, got {X.shape[1]}")
    return X[:, :N_VITAL_TOKENS].reshape(-1, N_CHANNELS, N_HOURS), X[:, N_VITAL_TOKENS:]


def _batched(fn, X, batch):
    vit, agg = split_tokens(X)
    outs = []
    with ad.no_grad():
        for s in range(0, len(vit), batch):
            outs.append(fn(vit[s : s + batch], agg[s : s + batch]).data)
    return np.concatenate(outs, axis=0)


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------


class LogisticModel(Module):
    kind = "logistic"

    def __init__(self, cfg: ModelConfig | None = None, l2: float = 1e-4, n_inputs: int = N_TOKENS):
        self.cfg = cfg or ModelConfig()
        self.l2 = l2
        self.weight = Tensor(np.zeros((n_inputs, 1)), requires_grad=True)
        self.bias = Tensor(np.zeros(1), requires_grad=True)

    def __call__(self, X) -> Tensor:
        x = X if isinstance(X, Tensor) else Tensor(np.atleast_2d(X))
        return ad.sigmoid(matmul(x, self.weight) + self.bias).reshape(-1)

    def penalty(self) -> Tensor:
        return (self.weight * self.weight).sum() * self.l2

    def predict_tokens(self, X: np.ndarray, batch: int = 4096) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        with ad.no_grad():
            return self(X).data


class LstmFusionModel(Module):
    """Recurrent cell over 24 hourly 7-vectors fused with a static perceptron."""

    kind = "lstm"

    def __init__(self, cfg: ModelConfig | None = None):
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        h = cfg.lstm_hidden
        rng = np.random.default_rng(cfg.seed)
        self.hidden = h
        self.w_x = _param(rng, (N_CHANNELS, 4 * h))
        self.w_h = _param(rng, (h, 4 * h))
        bias = np.zeros(4 * h)
        bias[h : 2 * h] = 1.0  # forget gate starts open
        self.b = Tensor(bias, requires_grad=True)
        self.static1 = Linear(N_AGG, h, rng)
        self.static2 = Linear(h, h, rng)
        self.head = Linear(2 * h, 1, rng)

    def run_cell(self, vitals) -> tuple[Tensor, list[Tensor]]:
        v = vitals.data if isinstance(vitals, Tensor) else np.asarray(vitals, dtype=np.float64)
        b = v.shape[0]
        h = self.hidden
        hs = Tensor(np.zeros((b, h)))
        cs = Tensor(np.zeros((b, h)))
        states = []
        for t in range(v.shape[2]):
            z = matmul(Tensor(v[:, :, t]), self.w_x) + matmul(hs, self.w_h) + self.b
            i = ad.sigmoid(z[:, :h])
            f = ad.sigmoid(z[:, h : 2 * h])
            g = z[:, 2 * h : 3 * h].tanh()
            o = ad.sigmoid(z[:, 3 * h :])
            cs = f * cs + i * g
            hs = o * cs.tanh()
            states.append(hs)
        return hs, states

    def __call__(self, vitals, aggregated) -> Tensor:
        last, _ = self.run_cell(vitals)
        a = aggregated if isinstance(aggregated, Tensor) else Tensor(aggregated)
        s = self.static2(leaky_relu(self.static1(a)))
        logit = self.head(ad.concat([last, s], axis=1))
        return ad.sigmoid(logit).reshape(-1)

    def predict_tokens(self, X: np.ndarray, batch: int = 1024) -> np.ndarray:
        return _batched(self, X, batch)


# ---------------------------------------------------------------------------
# single-record entry points
# ---------------------------------------------------------------------------


def encode_vitals(enc: VitalEncoder, vitals: np.ndarray) -> np.ndarray:
    """(7, 24) grid -> (168, d) token matrix."""
    with ad.no_grad():
        return enc(np.asarray(vitals, dtype=np.float64)[None]).data[0]


def decode_vitals(dec: VitalDecoder, tokens: np.ndarray, n_channels=N_CHANNELS, n_hours=N_HOURS):
    with ad.no_grad():
        return dec(Tensor(np.asarray(tokens)[None]), n_channels, n_hours).data[0]


def embed_features(emb: FeatureEmbedder, aggregated: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        return emb(np.asarray(aggregated, dtype=np.float64)[None]).data[0]


def fuse_and_predict(model: MortalityModel, record) -> tuple[float, np.ndarray]:
    """Probability and (H, 364) fusion attention rows for one record."""
    with ad.no_grad():
        prob, w = model(np.asarray(record.vitals)[None], np.asarray(record.aggregated)[None])
    return float(prob.data[0]), w.data[0]


def logistic_forward(model: LogisticModel, record) -> float:
    return float(model.predict_tokens(record.tokens())[0])


def lstm_fusion_forward(model: LstmFusionModel, record) -> float:
    return float(model.predict_tokens(record.tokens()[None])[0])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"EHRATTN1"
MODEL_KINDS = {"attention": MortalityModel, "logistic": LogisticModel, "lstm": LstmFusionModel}


class VitalAutoencoder(Module):
    """Stage-1 pair: shared encoder plus per-token decoder."""

    kind = "autoencoder"

    def __init__(self, cfg: ModelConfig | None = None):
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.encoder = VitalEncoder(cfg, rng)
        self.decoder = VitalDecoder(cfg.d, rng)


MODEL_KINDS["autoencoder"] = VitalAutoencoder


def build_model(kind: str, cfg: ModelConfig | None = None) -> Module:
    try:
        cls = MODEL_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown model kind {kind!r}; choose from {sorted(MODEL_KINDS)}") from None
    return cls(cfg)


def save_checkpoint(model: Module, path, extra: dict | None = None) -> None:
    """Write magic, a JSON header, then raw little-endian float64 arrays."""
    params = list(model.named_parameters())
    header = {
        "schema_version": SCHEMA_VERSION,
        "kind": model.kind,
        "d": model.cfg.d,
        "L": model.cfg.layers,
        "H": model.cfg.heads,
        "seed": model.cfg.seed,
        "config": asdict(model.cfg),
        "extra": extra or {},
        "params": [{"name": k, "shape": list(p.shape)} for k, p in params],
    }
    if isinstance(model, LogisticModel):
        header["extra"] = {**header["extra"], "l2": model.l2}
    blob = json.dumps(header, sort_keys=True).encode()
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, p in params:
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[Module, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen])
    if header["schema_version"] != SCHEMA_VERSION:
        raise ValueError(f"unsupported checkpoint schema {header['schema_version']}")
    cfg = ModelConfig(**header["config"])
    model = build_model(header["kind"], cfg)
    if isinstance(model, LogisticModel):
        model.l2 = header["extra"].get("l2", model.l2)
    offset = 16 + hlen
    state = {}
    for spec in header["params"]:
        n = int(np.prod(spec["shape"])) if spec["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=offset)
        state[spec["name"]] = arr.reshape(spec["shape"]).astype(np.float64)
        offset += 8 * n
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes after parameter block")
    model.load_state_dict(state)
    return model, header
