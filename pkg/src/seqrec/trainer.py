"""Cloze-task training: masked-target NLL, Adam, checkpointing, synthetics.

The loss is the mean negative log-likelihood of the masked targets;
unlabeled and padded positions contribute exactly zero. Training is
deterministic for a given seed: every epoch derives its batch and
dropout randomness from (seed, epoch), so a run resumed from an
epoch-boundary checkpoint reproduces the uninterrupted run bit for bit.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Batch, ItemSequence, Vocabulary, make_cloze_batches, split_leave_one_out
from .errors import ConfigError, DataError, NumericError
from .metrics import evaluate
from .model import Model, config_to_dict, load_model
from .serialize import load_arrays, save_arrays
from .tensor import Tensor


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 1e-3
    mask_prob: float = 0.1
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 0.0      # max global grad norm; 0 disables
    eval_every: int = 0         # validation metrics every N epochs; 0 disables
    metric_k: int = 10

    def validate(self) -> None:
        problems = []
        if self.epochs < 1:
            problems.append(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            problems.append(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 < self.mask_prob < 1.0:
            problems.append(f"mask_prob must be in (0, 1), got {self.mask_prob}")
        if problems:
            raise ConfigError("; ".join(problems))


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def cloze_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean -log softmax(logits)[label] over labeled positions.

    ``labels`` is (B, N) with 0 marking not-a-target. Only labeled rows
    enter the log-softmax, so unlabeled positions receive exactly zero
    gradient.
    """
    labels = np.asarray(labels)
    b, n, v = logits.shape
    flat_labels = labels.reshape(-1)
    selected = np.flatnonzero(flat_labels > 0)
    if selected.size == 0:
        raise DataError("cloze batch has no labeled positions")
    rows = T.take_rows(T.reshape(logits, b * n, v), selected)
    log_probs = T.log_softmax_rows(rows)
    picked = T.take_per_row(log_probs, flat_labels[selected])
    return T.negate(T.reduce_mean(picked))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Standard Adam with bias correction over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], learning_rate: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grad_clip: float = 0.0) -> None:
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for k, p in self.params.items()}
        if grad_clip > 0.0:
            total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if total > grad_clip:
                factor = grad_clip / total
                grads = {k: g * factor for k, g in grads.items()}
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            mhat = self.m[k] / bc1
            vhat = self.v[k] / bc2
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        self.step_count = step_count
        for k in self.params:
            self.m[k] = arrays[f"adam.m.{k}"].copy()
            self.v[k] = arrays[f"adam.v.{k}"].copy()


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    loss: float
    wall_seconds: float
    metrics: dict | None = None

    def to_json(self) -> str:
        doc = {"epoch": self.epoch, "loss": self.loss, "wall_seconds": self.wall_seconds}
        if self.metrics is not None:
            doc["metrics"] = self.metrics
        return json.dumps(doc, sort_keys=True)


@dataclass
class TrainResult:
    records: list[EpochRecord]
    best_valid_ndcg: float | None = None
    aborted: bool = False


def _epoch_seed(seed: int, epoch: int) -> int:
    return (seed * 1_000_003 + epoch) % (2 ** 63)


def train(model: Model, train_sequences: list[ItemSequence], config: TrainConfig,
          valid_examples=None, run_dir: str | Path | None = None,
          log_stream=None, start_epoch: int = 0,
          optimizer: Adam | None = None) -> TrainResult:
    """Run the cloze training loop.

    Writes per-epoch JSON-lines to ``log_stream`` (if given) and, under
    ``run_dir``, keeps ``checkpoint.ckpt`` (latest epoch boundary,
    including optimizer state) plus ``best_checkpoint.ckpt`` (highest
    validation NDCG seen). A non-finite loss aborts immediately; the last
    good checkpoint is left in place.
    """
    config.validate()
    if not train_sequences:
        raise DataError("no training sequences")
    cfg = model.config
    opt = optimizer or Adam(model.params, config.learning_rate,
                            config.beta1, config.beta2, config.adam_eps)
    run_dir = Path(run_dir) if run_dir is not None else None
    records: list[EpochRecord] = []
    best_ndcg: float | None = None

    for epoch in range(start_epoch, config.epochs):
        t0 = time.perf_counter()
        eseed = _epoch_seed(config.seed, epoch)
        dropout_rng = np.random.default_rng(eseed + 1)
        losses = []
        for batch in make_cloze_batches(train_sequences, cfg.max_len, cfg.mask_token,
                                        config.mask_prob, eseed, config.batch_size):
            logits = model.forward(batch.tokens, train_mode=True, rng=dropout_rng)
            loss = cloze_loss(logits, batch.labels)
            value = loss.item()
            if not math.isfinite(value):
                records.append(EpochRecord(epoch, value, time.perf_counter() - t0))
                if log_stream is not None:
                    log_stream.write(records[-1].to_json() + "\n")
                raise NumericError(
                    f"non-finite loss {value} at epoch {epoch}; "
                    "last good checkpoint retained")
            T.zero_grads(model.parameter_list())
            T.backward(loss)
            opt.step(config.grad_clip)
            losses.append(value)

        record = EpochRecord(epoch, float(np.mean(losses)), time.perf_counter() - t0)
        if valid_examples and config.eval_every and (epoch + 1) % config.eval_every == 0:
            result = evaluate(model, valid_examples, k=config.metric_k)
            record.metrics = {"ndcg": result.ndcg_at_k, "hr": result.hr_at_k,
                              "recall": result.recall_at_k, "n_users": result.n_users}
            if run_dir is not None and (best_ndcg is None or result.ndcg_at_k > best_ndcg):
                best_ndcg = result.ndcg_at_k
                model.save(run_dir / "best_checkpoint.ckpt",
                           extra_meta={"epoch": epoch, "valid_ndcg": best_ndcg})
        records.append(record)
        if log_stream is not None:
            log_stream.write(record.to_json() + "\n")
            log_stream.flush()
        if run_dir is not None:
            save_training_checkpoint(run_dir / "checkpoint.ckpt", model, opt, epoch + 1)

    return TrainResult(records, best_valid_ndcg=best_ndcg)


def save_training_checkpoint(path, model: Model, opt: Adam, next_epoch: int) -> None:
    arrays = {name: p.data for name, p in model.params.items()}
    arrays.update(opt.state_arrays())
    meta = {"kind": "training_checkpoint", "config": config_to_dict(model.config),
            "next_epoch": next_epoch, "adam_step": opt.step_count}
    save_arrays(path, meta, arrays)


def load_training_checkpoint(path, config: TrainConfig) -> tuple[Model, Adam, int]:
    """Restore model + optimizer + epoch counter from a training checkpoint."""
    from .model import config_from_dict
    meta, arrays = load_arrays(path)
    if meta.get("kind") != "training_checkpoint":
        raise DataError(f"{path} is not a training checkpoint")
    model_cfg = config_from_dict(meta["config"])
    params = {name: Tensor(arr, requires_grad=True, dtype=arr.dtype)
              for name, arr in arrays.items() if not name.startswith("adam.")}
    model = Model(model_cfg, params)
    opt = Adam(model.params, config.learning_rate, config.beta1,
               config.beta2, config.adam_eps)
    opt.load_state_arrays(arrays, meta["adam_step"])
    return model, opt, meta["next_epoch"]


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass
class SyntheticData:
    sequences: list[ItemSequence]
    vocab: Vocabulary
    transition: np.ndarray | None = None   # markov only: row-stochastic matrix

    def bayes_hr_at_1(self) -> float:
        """Best achievable HR@1 for a predictor that knows the generator."""
        if self.transition is None:
            return 1.0  # cyclic: the successor is deterministic
        # average over the stationary-ish empirical distribution of contexts
        counts = np.zeros(self.transition.shape[0])
        for seq in self.sequences:
            for tok in seq.items[:-1]:
                counts[tok - 1] += 1
        probs = counts / counts.sum()
        return float((probs * self.transition.max(axis=1)).sum())


def make_synthetic(kind: str, users: int = 500, catalog: int = 50,
                   length: int = 30, seed: int = 0,
                   top_prob: float = 0.7, branching: int = 4) -> SyntheticData:
    """Generate token sequences with a known-optimal next-item rule.

    cyclic: each user walks the fixed cycle 1..catalog from a random
    offset, so the successor of item x is always x % catalog + 1 and the
    Bayes HR@1 is 1. markov: items follow a seeded sparse row-stochastic
    transition matrix whose rows each put ``top_prob`` on one designated
    successor, so the Bayes HR@1 equals ``top_prob``.
    """
    rng = np.random.default_rng(seed)
    vocab = Vocabulary(list(range(1, catalog + 1)))  # raw id == token
    sequences = []
    if kind == "cyclic":
        transition = None
        for u in range(users):
            offset = int(rng.integers(catalog))
            items = [(offset + i) % catalog + 1 for i in range(length)]
            sequences.append(ItemSequence(u, items))
    elif kind == "markov":
        if not 0.0 < top_prob <= 1.0 or branching < 1:
            raise ConfigError(f"bad markov params: top_prob={top_prob}, branching={branching}")
        transition = np.zeros((catalog, catalog))
        rest = (1.0 - top_prob) / max(branching - 1, 1)
        for row in range(catalog):
            succ = rng.permutation(catalog)[:branching]
            transition[row, succ] = rest
            transition[row, succ[0]] = top_prob if branching > 1 else 1.0
        for u in range(users):
            state = int(rng.integers(catalog))
            items = [state + 1]
            for _ in range(length - 1):
                state = int(rng.choice(catalog, p=transition[state]))
                items.append(state + 1)
            sequences.append(ItemSequence(u, items))
    else:
        raise ConfigError(f"unknown synthetic kind {kind!r} (cyclic or markov)")
    return SyntheticData(sequences, vocab, transition)
