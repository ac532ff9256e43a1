"""ReLU linear attention and a softmax baseline.

Three evaluation strategies for the same map

    O_i = sum_j relu(Q_i) relu(K_j)^T V_j / (sum_j relu(Q_i) relu(K_j)^T + eps)

* :func:`linear_attention_naive` loops over queries (O(N^2)); it is the oracle.
* :func:`linear_attention_streaming` forms the shared terms
  ``S = relu(K)^T V`` (d x d) and ``z = relu(K)^T 1`` (d) once, walking the
  tokens in fixed-size chunks so its scratch memory does not grow with N.
* :func:`fused_multihead_linear_attention` does the same for all heads
  straight off the QKV projection, applying ReLU in place on the projection
  buffer.

:func:`linear_attention` and :func:`softmax_attention_heads` are the
tape-aware versions used inside the model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from lindit.errors import ConfigError, DimensionError, DomainError
from lindit.numerics import Tensor, note_kinks, record

DEFAULT_EPS = 1e-6
DEFAULT_CHUNK = 256


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


@dataclass(frozen=True)
class AttentionInputs:
    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        for name in "QKV":
            object.__setattr__(self, name, _arr(getattr(self, name)))
        Q, K, V = self.Q, self.K, self.V
        if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
            raise DimensionError(f"Q, K, V must be matrices, got {Q.shape}, {K.shape}, {V.shape}")
        if Q.shape[1] != K.shape[1] or K.shape[0] != V.shape[0]:
            raise DimensionError(f"inconsistent attention shapes Q{Q.shape} K{K.shape} V{V.shape}")
        if Q.shape[0] < 1 or Q.shape[1] < 1:
            raise DimensionError("attention needs N >= 1 and d >= 1")

    @property
    def N(self) -> int:
        return self.K.shape[0]

    @property
    def d(self) -> int:
        return self.Q.shape[1]


def _check_eps(eps: float) -> None:
    if not eps > 0:
        raise DomainError(f"eps must be positive, got {eps}")


def linear_attention_naive(inp: AttentionInputs, eps: float = DEFAULT_EPS) -> np.ndarray:
    _check_eps(eps)
    Qr = np.maximum(inp.Q, 0)
    Kr = np.maximum(inp.K, 0)
    out = np.empty((inp.Q.shape[0], inp.V.shape[1]), dtype=np.result_type(inp.Q, inp.V))
    for i in range(inp.Q.shape[0]):
        # weights[j] = relu(Q_i) . relu(K_j)
        weights = Kr @ Qr[i]
        out[i] = (weights @ inp.V) / (weights.sum() + eps)
    return out


def _canonical_order(Kr: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Token permutation sorting rows of ``[relu(K) | V]`` lexicographically (last axis -2)."""
    keys = np.concatenate([Kr, V], axis=-1)
    return np.lexsort(np.moveaxis(keys, -1, 0)[::-1], axis=-1)


def shared_terms(K, V, order_invariant: bool = False, chunk: int = DEFAULT_CHUNK):
    """``(S, z) = (relu(K)^T V, relu(K)^T 1)`` accumulated chunk by chunk.

    With ``order_invariant`` the tokens are first put in a canonical order,
    making the sums bitwise independent of how the tokens were permuted.
    """
    K, V = _arr(K), _arr(V)
    if order_invariant and K.shape[0] > 1:
        Kr = np.maximum(K, 0)
        idx = _canonical_order(Kr, V)
        Kr, V = Kr[idx], V[idx]
        return Kr.T @ V, Kr.sum(axis=0)
    dtype = np.result_type(K, V)
    S = np.zeros((K.shape[1], V.shape[1]), dtype=dtype)
    z = np.zeros(K.shape[1], dtype=dtype)
    for start in range(0, K.shape[0], chunk):
        kb = np.maximum(K[start : start + chunk], 0)
        S += kb.T @ V[start : start + chunk]
        z += kb.sum(axis=0)
    return S, z


def linear_attention_streaming(
    inp: AttentionInputs,
    eps: float = DEFAULT_EPS,
    chunk: int = DEFAULT_CHUNK,
    order_invariant: bool = False,
) -> np.ndarray:
    _check_eps(eps)
    S, z = shared_terms(inp.K, inp.V, order_invariant=order_invariant, chunk=chunk)
    N = inp.Q.shape[0]
    out = np.empty((N, inp.V.shape[1]), dtype=S.dtype)
    eps = S.dtype.type(eps)
    for start in range(0, N, chunk):
        qb = np.maximum(inp.Q[start : start + chunk], 0)
        den = qb @ z
        den += eps
        np.divide(qb @ S, den[:, None], out=out[start : start + chunk])
    return out


def softmax_attention(inp: AttentionInputs) -> np.ndarray:
    """``softmax(Q K^T / sqrt(d)) V`` with row-max subtraction."""
    scores = (inp.Q @ inp.K.T) / math.sqrt(inp.d)
    scores -= scores.max(axis=1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=1, keepdims=True)
    return scores @ inp.V


@dataclass(frozen=True)
class MultiHeadParams:
    W_qkv: np.ndarray
    W_out: np.ndarray
    heads: int

    def __post_init__(self):
        object.__setattr__(self, "W_qkv", _arr(self.W_qkv))
        object.__setattr__(self, "W_out", _arr(self.W_out))
        D = self.W_out.shape[0]
        if self.heads < 1 or D % self.heads:
            raise ConfigError(f"model_dim {D} not divisible by heads={self.heads}")
        if self.W_qkv.shape != (D, 3 * D) or self.W_out.shape != (D, D):
            raise DimensionError(
                f"expected W_qkv ({D}, {3 * D}) and W_out ({D}, {D}), "
                f"got {self.W_qkv.shape} and {self.W_out.shape}"
            )

    @property
    def model_dim(self) -> int:
        return self.W_out.shape[0]


def multihead_linear_attention_reference(x, p: MultiHeadParams, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Unfused composition: project, per-head streaming attention, project."""
    x = _arr(x)
    D, dh = p.model_dim, p.model_dim // p.heads
    qkv = x @ p.W_qkv
    heads = []
    for h in range(p.heads):
        sl = slice(h * dh, (h + 1) * dh)
        q, k, v = qkv[:, :D][:, sl], qkv[:, D : 2 * D][:, sl], qkv[:, 2 * D :][:, sl]
        heads.append(linear_attention_streaming(AttentionInputs(q, k, v), eps))
    return np.concatenate(heads, axis=1) @ p.W_out


def fused_multihead_linear_attention(
    x, p: MultiHeadParams, eps: float = DEFAULT_EPS, chunk: int = DEFAULT_CHUNK
) -> np.ndarray:
    """Multi-head ReLU linear attention in two chunked passes over the tokens.

    Pass one projects keys/values, rectifies the key columns in place and
    folds them into per-head ``S`` and ``z``; pass two projects queries,
    rectifies in place, normalizes and applies the output projection.
    """
    _check_eps(eps)
    x = _arr(x)
    N, D = x.shape
    if D != p.model_dim:
        raise DimensionError(f"input width {D} does not match model_dim {p.model_dim}")
    H, dh = p.heads, D // p.heads
    dtype = np.result_type(x, p.W_qkv)
    W_q, W_kv = p.W_qkv[:, :D], p.W_qkv[:, D:]
    S = np.zeros((H, dh, dh), dtype=dtype)
    z = np.zeros((H, dh), dtype=dtype)
    for start in range(0, N, chunk):
        kv = x[start : start + chunk] @ W_kv
        np.maximum(kv[:, :D], 0, out=kv[:, :D])
        c = kv.shape[0]
        k = kv[:, :D].reshape(c, H, dh).transpose(1, 2, 0)
        v = kv[:, D:].reshape(c, H, dh).transpose(1, 0, 2)
        S += k @ v
        z += k.sum(axis=2)
    out = np.empty((N, D), dtype=dtype)
    eps = dtype.type(eps)
    for start in range(0, N, chunk):
        q = x[start : start + chunk] @ W_q
        np.maximum(q, 0, out=q)
        c = q.shape[0]
        qh = q.reshape(c, H, dh).transpose(1, 0, 2)
        den = (qh @ z[:, :, None])[..., 0]
        den += eps
        o = (qh @ S) / den[..., None]
        out[start : start + chunk] = o.transpose(1, 0, 2).reshape(c, D) @ p.W_out
    return out


# ---------------------------------------------------------------------------
# tape-aware multi-head ops over tensors shaped [..., tokens, width]


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    *lead, n, D = x.shape
    return np.moveaxis(x.reshape(*lead, n, heads, D // heads), -2, -3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    x = np.moveaxis(x, -3, -2)
    *lead, n, h, dh = x.shape
    return x.reshape(*lead, n, h * dh)


def _check_heads(op: str, width: int, heads: int) -> None:
    if heads < 1 or width % heads:
        raise ConfigError(f"{op}: width {width} not divisible by heads={heads}")


def linear_attention(q: Tensor, k: Tensor, v: Tensor, heads: int = 1, eps: float = DEFAULT_EPS) -> Tensor:
    """Differentiable multi-head ReLU linear attention.

    Shared terms are summed in canonical token order, so permuting tokens
    permutes the output bitwise.
    """
    _check_eps(eps)
    if q.shape != k.shape or k.shape[:-1] != v.shape[:-1] or q.ndim < 2:
        raise DimensionError(f"linear_attention: shapes q{q.shape} k{k.shape} v{v.shape}")
    _check_heads("linear_attention", q.shape[-1], heads)
    _check_heads("linear_attention", v.shape[-1], heads)
    note_kinks(q.data)
    note_kinks(k.data)
    Q, K, V = (_split_heads(t.data, heads) for t in (q, k, v))
    Qr, Kr = np.maximum(Q, 0), np.maximum(K, 0)
    if K.shape[-2] > 1:
        idx = _canonical_order(Kr, V)[..., None]
        Ks, Vs = np.take_along_axis(Kr, idx, axis=-2), np.take_along_axis(V, idx, axis=-2)
    else:
        Ks, Vs = Kr, V
    S = np.swapaxes(Ks, -1, -2) @ Vs
    z = Ks.sum(axis=-2)
    num = Qr @ S
    den = (Qr @ z[..., None]) + Q.dtype.type(eps)
    O = num / den

    def backward(g):
        G = _split_heads(g, heads)
        g_num = G / den
        g_den = -(G * O).sum(axis=-1, keepdims=True) / den
        g_qr = g_num @ np.swapaxes(S, -1, -2) + g_den * z[..., None, :]
        g_S = np.swapaxes(Qr, -1, -2) @ g_num
        g_z = (Qr * g_den).sum(axis=-2)
        g_kr = V @ np.swapaxes(g_S, -1, -2) + g_z[..., None, :]
        g_v = Kr @ g_S
        return (
            _merge_heads(g_qr * (Q > 0)),
            _merge_heads(g_kr * (K > 0)),
            _merge_heads(g_v),
        )

    return record("linear_attention", _merge_heads(O), (q, k, v), backward)


def softmax_attention_heads(q: Tensor, k: Tensor, v: Tensor, heads: int = 1) -> Tensor:
    """Differentiable multi-head softmax attention; ``q`` is [..., N, D], ``k``/``v`` [..., L, D]."""
    if q.ndim < 2 or k.shape != v.shape or q.shape[:-2] != k.shape[:-2] or q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"softmax_attention: shapes q{q.shape} k{k.shape} v{v.shape}")
    _check_heads("softmax_attention", q.shape[-1], heads)
    Q, K, V = (_split_heads(t.data, heads) for t in (q, k, v))
    c = 1.0 / math.sqrt(Q.shape[-1])
    scores = (Q @ np.swapaxes(K, -1, -2)) * c
    scores -= scores.max(axis=-1, keepdims=True)
    P = np.exp(scores)
    P /= P.sum(axis=-1, keepdims=True)
    O = P @ V

    def backward(g):
        G = _split_heads(g, heads)
        g_v = np.swapaxes(P, -1, -2) @ G
        g_p = G @ np.swapaxes(V, -1, -2)
        g_s = P * (g_p - (g_p * P).sum(axis=-1, keepdims=True)) * c
        return _merge_heads(g_s @ K), _merge_heads(np.swapaxes(g_s, -1, -2) @ Q), _merge_heads(g_v)

    return record("softmax_attention", _merge_heads(O), (q, k, v), backward)
