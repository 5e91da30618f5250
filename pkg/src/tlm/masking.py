"""Token-level masking: masked-token selection and attention connectivity.

An attention-mask vector marks real tokens with 1 and padding with 0. Each
training layer draws a fresh set of masked tokens per sequence, turns it into
a boolean allow matrix (query row may attend key column), and expands that to
an additive score mask.
"""
from __future__ import annotations

import enum
from typing import Iterable, Optional

import numpy as np

from .autodiff import ContractError

#: Additive score for forbidden connections. Finite, so a stabilised softmax
#: never sees ``-inf - -inf``.
MASK_VALUE = -1e9


class ConfigError(ValueError):
    pass


class MaskStrategy(str, enum.Enum):
    NONE = "none"
    SIBLINGS = "siblings"
    SELF = "self"


def as_attn_mask(values) -> np.ndarray:
    attn_m = np.asarray(values)
    if attn_m.ndim != 1:
        raise ContractError(f"attention mask vector must be 1-d, got shape {attn_m.shape}")
    if not ((attn_m == 0) | (attn_m == 1)).all():
        raise ContractError("attention mask entries must be 0 or 1")
    return attn_m.astype(bool)


def check_rate(rate: float, name: str = "rate") -> float:
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"{name} must lie in [0, 1), got {rate}")
    return float(rate)


def select_masked_tokens(attn_m, rate: float, rng: np.random.Generator) -> frozenset:
    """Bernoulli-select real tokens to mask.

    Consumes exactly one ``rng.random(N)`` call per invocation (plus one
    ``rng.integers`` call when the survivor rule fires). If every real token
    would be masked, one selected token, chosen uniformly, is released.
    """
    rate = check_rate(rate)
    real = as_attn_mask(attn_m)
    hits = (rng.random(real.shape[0]) < rate) & real
    if real.any() and hits.sum() == real.sum():
        chosen = np.flatnonzero(hits)
        hits[chosen[rng.integers(len(chosen))]] = False
    return frozenset(int(i) for i in np.flatnonzero(hits))


def draw_strategy(p_self: float, rng: np.random.Generator) -> MaskStrategy:
    """Pick self-masking with probability ``p_self``, else siblings-masking.

    One ``rng.random()`` call per invocation; meant to run once per batch.
    """
    if not 0.0 <= p_self <= 1.0:
        raise ConfigError(f"p_self must lie in [0, 1], got {p_self}")
    return MaskStrategy.SELF if rng.random() < p_self else MaskStrategy.SIBLINGS


def base_allow(attn_m, causal: bool = False) -> np.ndarray:
    real = as_attn_mask(attn_m)
    n = real.shape[0]
    allow = np.broadcast_to(real, (n, n)).copy()
    if causal:
        allow &= np.tri(n, dtype=bool)
    return allow


def strategy_allow(strategy: MaskStrategy, masked: Iterable[int], n: int) -> np.ndarray:
    """Connections left by the masking strategy alone, before padding/causality."""
    allow = np.ones((n, n), dtype=bool)
    strategy = MaskStrategy(strategy)
    for t in masked:
        if strategy is MaskStrategy.SIBLINGS:
            allow[t, :] = False
            allow[:, t] = False
            allow[t, t] = True
        elif strategy is MaskStrategy.SELF:
            allow[:, t] = False
    return allow


def apply_fallback(allow: np.ndarray) -> np.ndarray:
    empty = ~allow.any(axis=-1)
    if empty.any():
        rows = np.flatnonzero(empty)
        allow[rows, rows] = True
    return allow


def build_allow_matrix(strategy, masked: Iterable[int], attn_m, causal: bool = False) -> np.ndarray:
    """Compose padding, causality and a masking strategy into an N x N allow matrix.

    The three constraints are conjoined, so their order does not matter. Any
    row left without a key gets its own diagonal entry back.
    """
    real = as_attn_mask(attn_m)
    masked = sorted(set(masked))
    n = real.shape[0]
    for t in masked:
        if not 0 <= t < n or not real[t]:
            raise ContractError(f"masked position {t} is padding or out of range")
    allow = base_allow(real, causal) & strategy_allow(strategy, masked, n)
    return apply_fallback(allow)


def cross_allow_matrix(query_len: int, memory_attn_m, masked: Iterable[int] = ()) -> np.ndarray:
    """Decoder-to-encoder connectivity: memory padding plus optional removed keys."""
    real = as_attn_mask(memory_attn_m).copy()
    for t in masked:
        real[t] = False
    if not real.any():
        raise ContractError("cross-attention left without any memory key")
    return np.broadcast_to(real, (query_len, real.shape[0])).copy()


def expand_to_additive(allow, batch: int, heads: int) -> np.ndarray:
    """Expand allow matrices to a ``[B, H, Nq, Nk]`` additive mask of 0 / MASK_VALUE.

    ``allow`` is either one ``[Nq, Nk]`` matrix shared by the batch or a
    ``[B, Nq, Nk]`` stack of per-sequence matrices.
    """
    allow = np.asarray(allow, dtype=bool)
    if allow.ndim == 2:
        allow = np.broadcast_to(allow, (batch,) + allow.shape)
    if allow.ndim != 3 or allow.shape[0] != batch:
        raise ContractError(f"allow matrices of shape {allow.shape} do not fit batch {batch}")
    m = np.where(allow, 0.0, MASK_VALUE)
    return np.repeat(m[:, None, :, :], heads, axis=1)


def batch_allow(
    attn_ms: np.ndarray,
    causal: bool,
    strategy: MaskStrategy = MaskStrategy.NONE,
    masked_sets: Optional[list] = None,
) -> np.ndarray:
    """Stack per-sequence allow matrices for a ``[B, N]`` attention-mask batch."""
    attn_ms = np.asarray(attn_ms)
    if attn_ms.ndim != 2 or not ((attn_ms == 0) | (attn_ms == 1)).all():
        raise ContractError("attention masks must be a [B, N] array of 0/1")
    b, n = attn_ms.shape
    allow = np.broadcast_to(attn_ms.astype(bool)[:, None, :], (b, n, n)).copy()
    if causal:
        allow &= np.tri(n, dtype=bool)
    if masked_sets is not None and MaskStrategy(strategy) is not MaskStrategy.NONE:
        for i, ms in enumerate(masked_sets):
            if ms:
                allow[i] = build_allow_matrix(strategy, ms, attn_ms[i], causal)
    return apply_fallback_batch(allow)


def apply_fallback_batch(allow: np.ndarray) -> np.ndarray:
    bs, rows = np.nonzero(~allow.any(axis=-1))
    allow[bs, rows, rows] = True
    return allow
