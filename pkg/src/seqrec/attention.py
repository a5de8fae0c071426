"""Four attention mechanisms behind one interface.

* ``dot_product`` — per-head scaled softmax attention, the quadratic
  baseline: softmax(Q K^T * scale) V.
* ``linear`` — kernelized attention reassociated as phi(Q)(phi(K)^T V),
  linear in sequence length, with pluggable feature maps.
* ``hydra`` — the many-heads limit of linear attention. With heads == d
  every head is a single feature column and the whole computation
  collapses to elementwise products against one global feature vector
  g = sum_s phi(k_s) * v_s, giving O(N*d) time and memory.
* ``efficient`` — separate softmaxes: row softmax on Q, per-feature
  softmax over tokens on K, combined as rho(Q)(sigma(K)^T V).

All mechanisms support bidirectional and causal masking plus padding
masks. Causal linear/hydra variants keep linearity with running prefix
sums (chunked, so no O(N^2) or O(N*w^2) intermediate is materialized);
outputs at position t depend bit-exactly only on positions <= t.
Padded key positions are excluded from every sum; padded query rows
produce zero output.

Inputs are ``Tensor``s of shape (N, d) or batched (B, N, d); everything
is differentiable through the tape in `seqrec.tensor`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

# Large-negative logit replacement for masked softmax entries: avoids the
# NaNs a true -inf produces in 32-bit, while exp() still underflows to 0.
MASK_LOGIT = -1e9

# Stability clamp for the causal separate-softmax path, which cannot use
# max-subtraction without peeking at future tokens.
_CAUSAL_EXP_CLIP = 60.0

# Token-axis chunk for causal prefix scans; bounds the materialized
# running-state stack at CHUNK * d * (d/H) elements.
_SCAN_CHUNK = 128


class Mechanism(str, Enum):
    DOT_PRODUCT = "dot_product"
    LINEAR = "linear"
    HYDRA = "hydra"
    EFFICIENT = "efficient"


class Kernel(str, Enum):
    IDENTITY = "identity"
    ELU_PLUS_ONE = "elu_plus_one"
    L2_ROW_NORM = "l2_row_norm"


class MaskMode(str, Enum):
    BIDIRECTIONAL = "bidirectional"
    CAUSAL = "causal"


@dataclass(frozen=True)
class AttentionSpec:
    """Mechanism selector plus kernel, head count, masking and normalization.

    ``normalize_denominator=None`` resolves to the mechanism's convention:
    True for linear attention with the elu+1 kernel (which needs the
    running normalizer), False otherwise — hydra's global-feature form has
    no denominator. ``scale=None`` resolves to 1/sqrt(d) (or
    1/sqrt(d/heads) with ``per_head_scale``); only dot_product uses it.
    """

    mechanism: Mechanism = Mechanism.HYDRA
    kernel: Kernel = Kernel.L2_ROW_NORM
    heads: int = 8
    mask_mode: MaskMode = MaskMode.BIDIRECTIONAL
    normalize_denominator: bool | None = None
    scale: float | None = None
    per_head_scale: bool = False
    eps: float = 1e-6

    def validate(self, d: int) -> None:
        problems = []
        if self.heads < 1:
            problems.append(f"heads must be >= 1, got {self.heads}")
        elif d % self.heads != 0:
            problems.append(f"heads={self.heads} does not divide model dim d={d}")
        if self.mechanism == Mechanism.HYDRA and self.heads > d:
            problems.append(f"hydra requires heads <= d, got heads={self.heads}, d={d}")
        if self.eps <= 0:
            problems.append(f"eps must be positive, got {self.eps}")
        if problems:
            raise ConfigError("; ".join(problems))

    def resolved_normalize(self) -> bool:
        if self.normalize_denominator is not None:
            return self.normalize_denominator
        return self.mechanism == Mechanism.LINEAR and self.kernel == Kernel.ELU_PLUS_ONE

    def resolved_scale(self, d: int) -> float:
        if self.scale is not None:
            return self.scale
        return 1.0 / math.sqrt(d / self.heads if self.per_head_scale else d)

    @property
    def causal(self) -> bool:
        return self.mask_mode == MaskMode.CAUSAL

    def with_heads(self, heads: int) -> "AttentionSpec":
        return replace(self, heads=heads)


@dataclass(frozen=True)
class PaddingMask:
    """Validity flags along the sequence axis: True = real token, False = pad."""

    valid: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "valid", np.asarray(self.valid, dtype=bool))

    @staticmethod
    def all_valid(n: int) -> "PaddingMask":
        return PaddingMask(np.ones(n, dtype=bool))


# ---------------------------------------------------------------------------
# shape & mask plumbing
# ---------------------------------------------------------------------------

def _as_batched(t: Tensor) -> tuple[Tensor, bool]:
    if t.ndim == 2:
        return T.reshape(t, 1, *t.shape), True
    if t.ndim == 3:
        return t, False
    raise ShapeError(f"attention inputs must be (N, d) or (B, N, d), got {t.shape}")


def _mask_tensor(mask: PaddingMask | None, b: int, n: int, dtype) -> Tensor | None:
    """Padding mask as a float (B, N, 1) tensor of 0/1, or None for all-valid."""
    if mask is None:
        return None
    valid = mask.valid
    if valid.ndim == 1:
        if valid.shape[0] != n:
            raise ShapeError(f"padding mask length {valid.shape[0]} != sequence length {n}")
        valid = np.broadcast_to(valid, (b, n))
    elif valid.shape != (b, n):
        raise ShapeError(f"padding mask shape {valid.shape} incompatible with batch ({b}, {n})")
    if valid.all():
        return None
    return Tensor(valid.astype(dtype)[..., None])


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return T.transpose(T.reshape(x, b, n, heads, d // heads), 0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, w = x.shape
    return T.reshape(T.transpose(x, 0, 2, 1, 3), b, n, h * w)


def _apply_kernel(x: Tensor, kernel: Kernel) -> Tensor:
    """Feature map on full d-dimensional rows (before any head split)."""
    if kernel == Kernel.IDENTITY:
        return x
    if kernel == Kernel.ELU_PLUS_ONE:
        return T.add(T.elu(x), 1.0)
    if kernel == Kernel.L2_ROW_NORM:
        return T.l2_normalize_rows(x)
    raise ConfigError(f"unknown kernel {kernel!r}")


def _finish(out: Tensor, qmask: Tensor | None, squeeze: bool) -> Tensor:
    if qmask is not None:
        out = T.multiply(out, qmask)
    if squeeze:
        out = T.reshape(out, out.shape[1], out.shape[2])
    return out


def _check_shapes(q: Tensor, k: Tensor, v: Tensor) -> None:
    if q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(f"Q, K, V must share a shape, got {q.shape}, {k.shape}, {v.shape}")


# ---------------------------------------------------------------------------
# public entry points
# ---------------------------------------------------------------------------

def attend(q: Tensor, k: Tensor, v: Tensor, spec: AttentionSpec,
           mask: PaddingMask | None = None) -> Tensor:
    """Dispatch to the mechanism selected by ``spec``."""
    fn = {
        Mechanism.DOT_PRODUCT: attend_dot_product,
        Mechanism.LINEAR: attend_linear,
        Mechanism.HYDRA: attend_hydra,
        Mechanism.EFFICIENT: attend_efficient,
    }[spec.mechanism]
    return fn(q, k, v, spec, mask)


def attend_dot_product(q: Tensor, k: Tensor, v: Tensor, spec: AttentionSpec,
                       mask: PaddingMask | None = None) -> Tensor:
    """softmax(Q_h K_h^T * scale) V_h per head, heads concatenated.

    Invisible key positions (padding or future, in causal mode) have their
    logits replaced by -1e9 before the softmax, so their weight underflows
    to exactly zero.
    """
    _check_shapes(q, k, v)
    q3, squeeze = _as_batched(q)
    k3, _ = _as_batched(k)
    v3, _ = _as_batched(v)
    b, n, d = q3.shape
    spec.validate(d)
    qmask = _mask_tensor(mask, b, n, q3.data.dtype)

    qh = _split_heads(q3, spec.heads)
    kh = _split_heads(k3, spec.heads)
    vh = _split_heads(v3, spec.heads)
    logits = T.scale(T.matmul(qh, T.swap_last_two(kh)), spec.resolved_scale(d))

    keep = _visibility_matrix(qmask, n, spec.causal, q3.data.dtype)
    if keep is not None:
        # keep is 1 where the key is visible: masked logits become exactly -1e9
        logits = T.add(T.multiply(logits, keep), T.scale(T.subtract(keep, 1.0), -MASK_LOGIT))
    att = T.softmax_rows(logits)
    out = _merge_heads(T.matmul(att, vh))
    return _finish(out, qmask, squeeze)


def _visibility_matrix(qmask: Tensor | None, n: int, causal: bool, dtype) -> Tensor | None:
    """(B, 1, N, N) float matrix, 1 where query row may see key column."""
    parts = []
    if causal:
        parts.append(np.tril(np.ones((n, n), dtype=dtype))[None, None])
    if qmask is not None:
        key_valid = qmask.data[:, None, :, 0]          # (B, 1, N)
        parts.append(key_valid[:, :, None, :].astype(dtype))
    if not parts:
        return None
    keep = parts[0]
    for p in parts[1:]:
        keep = keep * p
    return Tensor(np.ascontiguousarray(np.broadcast_to(keep, (keep.shape[0], 1, n, n))))


def attend_linear(q: Tensor, k: Tensor, v: Tensor, spec: AttentionSpec,
                  mask: PaddingMask | None = None) -> Tensor:
    """Kernelized linear attention phi(Q_h)(phi(K_h)^T V_h) per head.

    The kernel acts on full rows before the head split. Bidirectional mode
    contracts keys once into a (d/H x d/H) state per head; causal mode
    replaces it with a chunked running prefix sum. With
    ``normalize_denominator`` each output row is divided by
    phi(q_t) . sum_s phi(k_s) + eps.
    """
    _check_shapes(q, k, v)
    q3, squeeze = _as_batched(q)
    k3, _ = _as_batched(k)
    v3, _ = _as_batched(v)
    b, n, d = q3.shape
    spec.validate(d)
    qmask = _mask_tensor(mask, b, n, q3.data.dtype)

    phi_q = _apply_kernel(q3, spec.kernel)
    phi_k = _apply_kernel(k3, spec.kernel)
    if qmask is not None:
        phi_k = T.multiply(phi_k, qmask)   # drop padded keys from every sum

    out = _per_head_linear(_split_heads(phi_q, spec.heads),
                           _split_heads(phi_k, spec.heads),
                           _split_heads(v3, spec.heads),
                           spec.resolved_normalize(), spec.causal, spec.eps)
    return _finish(_merge_heads(out), qmask, squeeze)


def _per_head_linear(qh: Tensor, kh: Tensor, vh: Tensor,
                     normalize: bool, causal: bool, eps: float) -> Tensor:
    """Shared per-head engine; inputs are (B, H, N, w) with kernels applied."""
    if not causal:
        kv = T.matmul(T.swap_last_two(kh), vh)               # (B, H, w, w)
        num = T.matmul(qh, kv)                               # (B, H, N, w)
        if not normalize:
            return num
        ksum = T.reduce_sum(kh, axis=2, keepdims=True)       # (B, H, 1, w)
        den = T.reduce_sum(T.multiply(qh, ksum), axis=-1, keepdims=True)
        return T.divide(num, T.add(den, eps), eps=eps)

    b, h, n, w = qh.shape
    chunks = []
    carry = None       # (B, H, 1, w, w) running key-value state
    kcarry = None      # (B, H, 1, w) running key sum
    for start in range(0, n, _SCAN_CHUNK):
        stop = min(start + _SCAN_CHUNK, n)
        qc = T.slice_along_axis(qh, 2, start, stop)
        kc = T.slice_along_axis(kh, 2, start, stop)
        vc = T.slice_along_axis(vh, 2, start, stop)
        c = stop - start
        outer = T.multiply(T.reshape(kc, b, h, c, w, 1), T.reshape(vc, b, h, c, 1, w))
        states = T.cumsum(outer, axis=2)                     # (B, H, C, w, w)
        if carry is not None:
            states = T.add(states, carry)
        ctx = T.matmul(T.reshape(qc, b, h, c, 1, w), states)  # (B, H, C, 1, w)
        ctx = T.reshape(ctx, b, h, c, w)
        if normalize:
            kcum = T.cumsum(kc, axis=2)
            if kcarry is not None:
                kcum = T.add(kcum, kcarry)
            den = T.reduce_sum(T.multiply(qc, kcum), axis=-1, keepdims=True)
            ctx = T.divide(ctx, T.add(den, eps), eps=eps)
            kcarry = T.slice_along_axis(kcum, 2, c - 1, c)
        carry = T.slice_along_axis(states, 2, c - 1, c)
        chunks.append(ctx)
    return chunks[0] if len(chunks) == 1 else T.concat(chunks, axis=2)


def attend_hydra(q: Tensor, k: Tensor, v: Tensor, spec: AttentionSpec,
                 mask: PaddingMask | None = None) -> Tensor:
    """Many-heads linear attention.

    With heads == d the per-head states are scalars and the whole layer
    reduces to out_t = phi(q_t) * g with the global feature vector
    g = sum over valid tokens of phi(k_s) * v_s (prefix sums g_t in causal
    mode): O(N*d) time, no N x N or w x w intermediates. With heads < d it
    runs the per-head linear engine at width d/heads.
    """
    _check_shapes(q, k, v)
    q3, squeeze = _as_batched(q)
    k3, _ = _as_batched(k)
    v3, _ = _as_batched(v)
    b, n, d = q3.shape
    spec.validate(d)
    qmask = _mask_tensor(mask, b, n, q3.data.dtype)

    phi_q = _apply_kernel(q3, spec.kernel)
    phi_k = _apply_kernel(k3, spec.kernel)
    if qmask is not None:
        phi_k = T.multiply(phi_k, qmask)

    if spec.heads == d:
        kv = T.multiply(phi_k, v3)                            # (B, N, d)
        if spec.causal:
            g = T.cumsum(kv, axis=1)
        else:
            g = T.reduce_sum(kv, axis=1, keepdims=True)       # (B, 1, d)
        out = T.multiply(phi_q, g)
        if spec.resolved_normalize():
            ksum = T.cumsum(phi_k, axis=1) if spec.causal else \
                T.reduce_sum(phi_k, axis=1, keepdims=True)
            den = T.reduce_sum(T.multiply(phi_q, ksum), axis=-1, keepdims=True)
            out = T.divide(out, T.add(den, spec.eps), eps=spec.eps)
    else:
        out = _merge_heads(_per_head_linear(
            _split_heads(phi_q, spec.heads), _split_heads(phi_k, spec.heads),
            _split_heads(v3, spec.heads),
            spec.resolved_normalize(), spec.causal, spec.eps))
    return _finish(out, qmask, squeeze)


def attend_efficient(q: Tensor, k: Tensor, v: Tensor, spec: AttentionSpec,
                     mask: PaddingMask | None = None) -> Tensor:
    """Separate-softmax attention rho(Q_h)(sigma(K_h)^T V_h).

    rho is a softmax over each query row's features; sigma normalizes each
    key feature over the valid tokens. Causal mode keeps linearity by
    tracking prefix sums of exp(K) (clamped for overflow safety, since
    max-subtraction would leak future information) and of exp(K)-weighted
    values, normalizing per position.
    """
    _check_shapes(q, k, v)
    q3, squeeze = _as_batched(q)
    k3, _ = _as_batched(k)
    v3, _ = _as_batched(v)
    b, n, d = q3.shape
    spec.validate(d)
    qmask = _mask_tensor(mask, b, n, q3.data.dtype)

    qh = _split_heads(q3, spec.heads)
    kh = _split_heads(k3, spec.heads)
    vh = _split_heads(v3, spec.heads)
    rho = T.softmax_rows(qh)

    if not spec.causal:
        if qmask is not None:
            keep = Tensor(qmask.data[:, None, :, :])          # (B, 1, N, 1)
            kh = T.add(T.multiply(kh, keep), T.scale(T.subtract(keep, 1.0), -MASK_LOGIT))
        # softmax over the token axis, one per key feature
        sigma = T.swap_last_two(T.softmax_rows(T.swap_last_two(kh)))
        ctx = T.matmul(T.swap_last_two(sigma), vh)            # (B, H, w, w)
        out = T.matmul(rho, ctx)
        return _finish(_merge_heads(out), qmask, squeeze)

    ek = T.exp(T.clip_max(kh, _CAUSAL_EXP_CLIP))
    if qmask is not None:
        ek = T.multiply(ek, Tensor(qmask.data[:, None, :, :]))
    w = d // spec.heads
    chunks = []
    carry = None
    ccarry = None
    for start in range(0, n, _SCAN_CHUNK):
        stop = min(start + _SCAN_CHUNK, n)
        c = stop - start
        ec = T.slice_along_axis(ek, 2, start, stop)
        vc = T.slice_along_axis(vh, 2, start, stop)
        rc = T.slice_along_axis(rho, 2, start, stop)
        outer = T.multiply(T.reshape(ec, b, spec.heads, c, w, 1),
                           T.reshape(vc, b, spec.heads, c, 1, w))
        states = T.cumsum(outer, axis=2)
        if carry is not None:
            states = T.add(states, carry)
        colsum = T.cumsum(ec, axis=2)
        if ccarry is not None:
            colsum = T.add(colsum, ccarry)
        # normalize each key-feature row of the running state
        norm_states = T.divide(states, T.reshape(colsum, b, spec.heads, c, w, 1),
                               eps=spec.eps)
        ctx = T.matmul(T.reshape(rc, b, spec.heads, c, 1, w), norm_states)
        chunks.append(T.reshape(ctx, b, spec.heads, c, w))
        carry = T.slice_along_axis(states, 2, c - 1, c)
        ccarry = T.slice_along_axis(colsum, 2, c - 1, c)
    out = chunks[0] if len(chunks) == 1 else T.concat(chunks, axis=2)
    return _finish(_merge_heads(out), qmask, squeeze)
