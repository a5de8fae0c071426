"""Naive float64 reference implementations of every attention mechanism.

These are the oracles: quadratic-time, loop-heavy, written directly from
the defining sums with masking done by *excluding* invisible positions
(rather than the -1e9 logit trick or prefix sums the fast paths use).
They are deliberately kept independent of `seqrec.attention` so the two
routes can cross-check each other; the bench also runs them as a
preflight correctness gate before timing anything.
"""

from __future__ import annotations

import numpy as np


def kernel_identity(x: np.ndarray) -> np.ndarray:
    return x


def kernel_elu_plus_one(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x + 1.0, np.exp(np.minimum(x, 0.0)))


def kernel_l2_row_norm(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    return x / np.maximum(norm, eps)


KERNELS = {
    "identity": kernel_identity,
    "elu_plus_one": kernel_elu_plus_one,
    "l2_row_norm": kernel_l2_row_norm,
}


def _visible(t: int, n: int, causal: bool, valid: np.ndarray) -> list[int]:
    limit = t + 1 if causal else n
    return [s for s in range(limit) if valid[s]]


def _prep(q, k, v, valid):
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    n = q.shape[0]
    if valid is None:
        valid = np.ones(n, dtype=bool)
    return q, k, v, np.asarray(valid, dtype=bool)


def dot_product_attention(q, k, v, heads: int, scale: float,
                          causal: bool = False, valid=None) -> np.ndarray:
    """Per-head softmax attention via direct exp/sum over visible keys."""
    q, k, v, valid = _prep(q, k, v, valid)
    n, d = q.shape
    w = d // heads
    out = np.zeros((n, d))
    for h in range(heads):
        sl = slice(h * w, (h + 1) * w)
        qh, kh, vh = q[:, sl], k[:, sl], v[:, sl]
        for t in range(n):
            if not valid[t]:
                continue
            vis = _visible(t, n, causal, valid)
            logits = np.array([qh[t] @ kh[s] * scale for s in vis])
            e = np.exp(logits - logits.max())
            weights = e / e.sum()
            out[t, sl] = sum(wt * vh[s] for wt, s in zip(weights, vis))
    return out


def linear_attention_pairwise(q, k, v, heads: int, kernel: str,
                              normalize: bool, causal: bool = False,
                              valid=None, eps: float = 1e-6) -> np.ndarray:
    """Kernelized attention as the explicit O(N^2) pairwise sum sim(q,k)·v.

    The kernel is applied to full d-dimensional rows, then heads slice the
    feature axis.
    """
    q, k, v, valid = _prep(q, k, v, valid)
    n, d = q.shape
    w = d // heads
    phi_q = KERNELS[kernel](q)
    phi_k = KERNELS[kernel](k)
    out = np.zeros((n, d))
    for h in range(heads):
        sl = slice(h * w, (h + 1) * w)
        qh, kh, vh = phi_q[:, sl], phi_k[:, sl], v[:, sl]
        for t in range(n):
            if not valid[t]:
                continue
            acc = np.zeros(w)
            den = 0.0
            for s in _visible(t, n, causal, valid):
                sim = qh[t] @ kh[s]
                acc += sim * vh[s]
                den += sim
            out[t, sl] = acc / (den + eps) if normalize else acc
    return out


def hydra_head_loop(q, k, v, kernel: str = "l2_row_norm",
                    causal: bool = False, valid=None,
                    normalize: bool = False, eps: float = 1e-6) -> np.ndarray:
    """Many-heads limit as an explicit loop over d single-column heads.

    Each head is width-1 kernelized linear attention; the kernel is applied
    to full rows first, exactly as in the vectorized formulation.
    """
    q, k, v, valid = _prep(q, k, v, valid)
    n, d = q.shape
    phi_q = KERNELS[kernel](q)
    phi_k = KERNELS[kernel](k)
    out = np.zeros((n, d))
    for h in range(d):
        for t in range(n):
            if not valid[t]:
                continue
            acc = 0.0
            den = 0.0
            for s in _visible(t, n, causal, valid):
                acc += phi_q[t, h] * phi_k[s, h] * v[s, h]
                den += phi_q[t, h] * phi_k[s, h]
            out[t, h] = acc / (den + eps) if normalize else acc
    return out


def efficient_attention_expand(q, k, v, heads: int, causal: bool = False,
                               valid=None) -> np.ndarray:
    """Separate-softmax attention via the explicit (rho(Q) sigma(K)^T) V expansion.

    rho is a row softmax over features; sigma is a per-feature softmax over
    the visible tokens (recomputed per output position in causal mode).
    """
    q, k, v, valid = _prep(q, k, v, valid)
    n, d = q.shape
    w = d // heads
    out = np.zeros((n, d))
    for h in range(heads):
        sl = slice(h * w, (h + 1) * w)
        qh, kh, vh = q[:, sl], k[:, sl], v[:, sl]
        rho = np.exp(qh - qh.max(axis=-1, keepdims=True))
        rho = rho / rho.sum(axis=-1, keepdims=True)
        for t in range(n):
            if not valid[t]:
                continue
            vis = _visible(t, n, causal, valid)
            kv = kh[vis]
            e = np.exp(kv - kv.max(axis=0, keepdims=True))
            sigma = e / e.sum(axis=0, keepdims=True)  # (len(vis), w)
            attn = rho[t] @ sigma.T                   # weights over visible tokens
            out[t, sl] = attn @ vh[vis]
    return out
