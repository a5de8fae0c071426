"""Encoder-only transformer over item-token sequences.

Embeddings (learned item + position), a stack of transformer layers
(multi-head attention of any supported mechanism, position-wise
feed-forward with GELU, residual connections with post-layer-norm), and
a two-layer GELU output head producing logits over the item vocabulary.

Token id 0 is PAD; the last vocabulary id is the MASK placeholder used
both for cloze training and for next-item inference.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import tensor as T
from .attention import AttentionSpec, Kernel, MaskMode, Mechanism, PaddingMask, attend
from .errors import ConfigError, DataError
from .serialize import load_arrays, save_arrays
from .tensor import Tensor

PAD_TOKEN = 0
LAYER_NORM_EPS = 1e-5


@dataclass
class ModelConfig:
    vocab_size: int                      # items + PAD + MASK
    d: int = 64
    layers: int = 2
    ffn_dim: int = 256
    max_len: int = 50
    dropout: float = 0.1
    init_std: float = 0.02
    attention: AttentionSpec = field(default_factory=AttentionSpec)

    @property
    def mask_token(self) -> int:
        return self.vocab_size - 1

    def validate(self) -> None:
        problems = []
        if self.vocab_size < 3:
            problems.append(f"vocab_size must cover PAD, MASK and >=1 item, got {self.vocab_size}")
        if self.d < 1:
            problems.append(f"d must be positive, got {self.d}")
        if self.layers < 1:
            problems.append(f"layers must be >= 1, got {self.layers}")
        if self.ffn_dim < 1:
            problems.append(f"ffn_dim must be positive, got {self.ffn_dim}")
        if self.max_len < 2:
            problems.append(f"max_len must be >= 2, got {self.max_len}")
        if not 0.0 <= self.dropout < 1.0:
            problems.append(f"dropout must be in [0, 1), got {self.dropout}")
        if self.init_std <= 0:
            problems.append(f"init_std must be positive, got {self.init_std}")
        if self.d % self.attention.heads != 0:
            problems.append(f"heads={self.attention.heads} does not divide d={self.d}")
        if problems:
            raise ConfigError("; ".join(problems))
        self.attention.validate(self.d)


def hydra_config(vocab_size: int, d: int = 64, causal: bool = False, **kw) -> ModelConfig:
    """The flagship configuration: hydra attention with heads == d."""
    spec = AttentionSpec(
        mechanism=Mechanism.HYDRA, kernel=Kernel.L2_ROW_NORM, heads=d,
        mask_mode=MaskMode.CAUSAL if causal else MaskMode.BIDIRECTIONAL)
    return ModelConfig(vocab_size=vocab_size, d=d, attention=spec, **kw)


class Model:
    """Parameter set plus forward pass. Construct via :func:`init_model` or :func:`load_model`."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    # -- parameters ----------------------------------------------------------

    def parameter_list(self) -> list[Tensor]:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    @staticmethod
    def expected_parameter_count(config: ModelConfig) -> int:
        """Closed-form parameter count as a function of the config alone."""
        v, d, f, n = config.vocab_size, config.d, config.ffn_dim, config.max_len
        per_layer = 4 * d * d + (d * f + f) + (f * d + d) + 2 * (2 * d)
        head = (d * d + d) + (d * v + v)
        return v * d + n * d + config.layers * per_layer + head

    # -- forward -------------------------------------------------------------

    def forward(self, tokens: np.ndarray, train_mode: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        """Logits of shape (B, N, vocab_size) for a padded token matrix (B, N).

        Dropout fires only with ``train_mode`` and a nonzero configured rate
        (an ``rng`` must then be supplied so runs stay reproducible).
        """
        cfg = self.config
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise DataError(f"tokens must be a (B, N) matrix, got shape {tokens.shape}")
        b, n = tokens.shape
        if n != cfg.max_len:
            raise DataError(f"token rows must be padded to max_len={cfg.max_len}, got {n}")
        bad = np.argwhere((tokens < 0) | (tokens >= cfg.vocab_size))
        if bad.size:
            r, c = bad[0]
            raise DataError(
                f"token id {tokens[r, c]} out of range [0, {cfg.vocab_size}) "
                f"at batch row {r}, position {c}")

        use_dropout = train_mode and cfg.dropout > 0.0
        if use_dropout and rng is None:
            raise ConfigError("train_mode forward with dropout > 0 requires an rng")

        mask = PaddingMask(tokens != PAD_TOKEN)
        x = T.take_rows(self.params["item_embedding"], tokens)
        x = T.add(x, self.params["position_embedding"])
        x = self._dropout(x, use_dropout, rng)

        for i in range(cfg.layers):
            p = lambda name: self.params[f"layer{i}.{name}"]
            q = T.matmul(x, p("attn.wq"))
            k = T.matmul(x, p("attn.wk"))
            v = T.matmul(x, p("attn.wv"))
            att = attend(q, k, v, cfg.attention, mask)
            att = T.matmul(att, p("attn.wo"))
            att = self._dropout(att, use_dropout, rng)
            x = _layer_norm(T.add(x, att), p("ln1.gamma"), p("ln1.beta"))
            ff = T.matmul(T.gelu(T.add(T.matmul(x, p("ffn.w1")), p("ffn.b1"))), p("ffn.w2"))
            ff = T.add(ff, p("ffn.b2"))
            ff = self._dropout(ff, use_dropout, rng)
            x = _layer_norm(T.add(x, ff), p("ln2.gamma"), p("ln2.beta"))

        h = T.gelu(T.add(T.matmul(x, self.params["head.w1"]), self.params["head.b1"]))
        return T.add(T.matmul(h, self.params["head.w2"]), self.params["head.b2"])

    def _dropout(self, x: Tensor, active: bool, rng) -> Tensor:
        if not active:
            return x
        p = self.config.dropout
        keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
        return T.multiply(x, Tensor(keep))

    # -- inference -----------------------------------------------------------

    def encode_query(self, items: list[int]) -> np.ndarray:
        """Left-padded token row ending in MASK for next-item prediction."""
        if not items:
            raise DataError("cannot predict from an empty item sequence")
        cfg = self.config
        recent = list(items)[-(cfg.max_len - 1):]
        row = np.zeros(cfg.max_len, dtype=np.int64)
        row[-len(recent) - 1: -1] = recent
        row[-1] = cfg.mask_token
        return row

    def scores_for(self, items: list[int]) -> np.ndarray:
        """Logits over the vocabulary at the appended MASK position."""
        row = self.encode_query(items)
        logits = self.forward(row[None, :], train_mode=False)
        return logits.data[0, -1]

    def predict_next(self, items: list[int], k: int) -> list[int]:
        """Top-k next items, ranked by MASK-position logit.

        PAD and MASK are never recommended; ties break by ascending item id.
        """
        scores = self.scores_for(items)
        candidates = np.arange(1, self.config.mask_token)
        order = np.lexsort((candidates, -scores[candidates]))
        return [int(candidates[i]) for i in order[:k]]

    # -- persistence ----------------------------------------------------------

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = {"kind": "model", "config": config_to_dict(self.config)}
        if extra_meta:
            meta.update(extra_meta)
        save_arrays(path, meta, {name: p.data for name, p in self.params.items()})


def _layer_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    mu = T.reduce_mean(x, axis=-1, keepdims=True)
    centered = T.subtract(x, mu)
    var = T.reduce_mean(T.multiply(centered, centered), axis=-1, keepdims=True)
    normed = T.divide(centered, T.sqrt(T.add(var, LAYER_NORM_EPS)))
    return T.add(T.multiply(normed, gamma), beta)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def init_model(config: ModelConfig, seed: int, dtype=np.float32) -> Model:
    """Fresh parameters: weights ~ Gaussian(0, init_std^2) truncated at
    +/- 2 std, biases zero, layer-norm gains one, PAD embedding row zero.
    Deterministic for a given seed."""
    config.validate()
    rng = np.random.default_rng(seed)
    std = config.init_std

    def weight(*shape) -> Tensor:
        draw = stats.truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng)
        return Tensor(draw.astype(dtype), requires_grad=True, dtype=dtype)

    def zeros(*shape) -> Tensor:
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, dtype=dtype)

    def ones(*shape) -> Tensor:
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=True, dtype=dtype)

    v, d, f = config.vocab_size, config.d, config.ffn_dim
    params: dict[str, Tensor] = {}
    item_emb = weight(v, d)
    item_emb.data[PAD_TOKEN] = 0.0
    params["item_embedding"] = item_emb
    params["position_embedding"] = weight(config.max_len, d)
    for i in range(config.layers):
        params[f"layer{i}.attn.wq"] = weight(d, d)
        params[f"layer{i}.attn.wk"] = weight(d, d)
        params[f"layer{i}.attn.wv"] = weight(d, d)
        params[f"layer{i}.attn.wo"] = weight(d, d)
        params[f"layer{i}.ln1.gamma"] = ones(d)
        params[f"layer{i}.ln1.beta"] = zeros(d)
        params[f"layer{i}.ffn.w1"] = weight(d, f)
        params[f"layer{i}.ffn.b1"] = zeros(f)
        params[f"layer{i}.ffn.w2"] = weight(f, d)
        params[f"layer{i}.ffn.b2"] = zeros(d)
        params[f"layer{i}.ln2.gamma"] = ones(d)
        params[f"layer{i}.ln2.beta"] = zeros(d)
    params["head.w1"] = weight(d, d)
    params["head.b1"] = zeros(d)
    params["head.w2"] = weight(d, v)
    params["head.b2"] = zeros(v)
    return Model(config, params)


# ---------------------------------------------------------------------------
# config (de)serialization and checkpoint loading
# ---------------------------------------------------------------------------

def config_to_dict(config: ModelConfig) -> dict:
    a = config.attention
    return {
        "vocab_size": config.vocab_size, "d": config.d, "layers": config.layers,
        "ffn_dim": config.ffn_dim, "max_len": config.max_len,
        "dropout": config.dropout, "init_std": config.init_std,
        "attention": {
            "mechanism": a.mechanism.value, "kernel": a.kernel.value,
            "heads": a.heads, "mask_mode": a.mask_mode.value,
            "normalize_denominator": a.normalize_denominator,
            "scale": a.scale, "per_head_scale": a.per_head_scale, "eps": a.eps,
        },
    }


def config_from_dict(doc: dict) -> ModelConfig:
    a = doc["attention"]
    spec = AttentionSpec(
        mechanism=Mechanism(a["mechanism"]), kernel=Kernel(a["kernel"]),
        heads=a["heads"], mask_mode=MaskMode(a["mask_mode"]),
        normalize_denominator=a["normalize_denominator"],
        scale=a["scale"], per_head_scale=a["per_head_scale"], eps=a["eps"])
    return ModelConfig(
        vocab_size=doc["vocab_size"], d=doc["d"], layers=doc["layers"],
        ffn_dim=doc["ffn_dim"], max_len=doc["max_len"], dropout=doc["dropout"],
        init_std=doc["init_std"], attention=spec)


def load_model(path) -> Model:
    meta, arrays = load_arrays(path)
    config = config_from_dict(meta["config"])
    params = {name: Tensor(arr, requires_grad=True, dtype=arr.dtype)
              for name, arr in arrays.items()}
    return Model(config, params)
