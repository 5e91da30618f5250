"""Multi-head scaled dot-product attention with pluggable regularizers.

Regularizers run in a fixed order inside one attention call::

    scores + additive mask (TLM) -> softmax -> attention dropout
        -> weighted sum of values -> DropHead

Outside training every regularizer is skipped, so inference is plain
attention whatever the :class:`RegularizerSpec` says.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import NumericError, ShapeError, Tensor, matmul, softmax_lastdim, swapaxes
from .layers import Linear, Module
from .masking import ConfigError, check_rate, expand_to_additive

SCHEMES = ("att_dropout", "drophead", "tlm")


@dataclass(frozen=True)
class AttentionConfig:
    d_emb: int
    heads: int

    def __post_init__(self):
        if self.heads < 1 or self.d_emb % self.heads:
            raise ConfigError(f"heads ({self.heads}) must divide d_emb ({self.d_emb})")

    @property
    def head_dim(self) -> int:
        return self.d_emb // self.heads

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.d_emb / self.heads)


def _parse_schemes(value) -> frozenset:
    if value is None:
        return frozenset()
    if isinstance(value, str):
        value = [s for s in value.replace("+", ",").split(",") if s.strip()]
    schemes = frozenset(s.strip() for s in value) - {"none", "vanilla"}
    unknown = schemes - set(SCHEMES)
    if unknown:
        raise ConfigError(f"scheme: unknown regularizer(s) {sorted(unknown)}; choose from {SCHEMES}")
    return schemes


@dataclass(frozen=True)
class RegularizerSpec:
    """Which attention regularizers are active and at what rates.

    ``schemes`` may hold any subset of ``att_dropout``, ``drophead`` and
    ``tlm`` (empty means vanilla). ``rate`` is shared by every active scheme;
    ``encoder_rate`` / ``decoder_rate`` override it for TLM in encoder and
    decoder self-attention.
    """

    schemes: frozenset = field(default_factory=frozenset)
    rate: float = 0.1
    p_self: float = 0.5
    encoder_rate: Optional[float] = None
    decoder_rate: Optional[float] = None
    cross_attention_tlm: bool = False
    independent_decoder_strategy: bool = False

    def __post_init__(self):
        object.__setattr__(self, "schemes", _parse_schemes(self.schemes))
        check_rate(self.rate, "rate")
        for name in ("encoder_rate", "decoder_rate"):
            value = getattr(self, name)
            if value is not None:
                check_rate(value, name)
        if not 0.0 <= self.p_self <= 1.0:
            raise ConfigError(f"p_self must lie in [0, 1], got {self.p_self}")

    @classmethod
    def none(cls) -> "RegularizerSpec":
        return cls()

    def active(self, scheme: str) -> bool:
        return scheme in self.schemes

    @property
    def label(self) -> str:
        return "+".join(s for s in SCHEMES if s in self.schemes) or "none"

    @property
    def att_dropout_rate(self) -> float:
        return self.rate if self.active("att_dropout") else 0.0

    @property
    def drophead_rate(self) -> float:
        return self.rate if self.active("drophead") else 0.0

    def tlm_rate(self, stack: str) -> float:
        override = self.encoder_rate if stack == "encoder" else self.decoder_rate
        return self.rate if override is None else override


@dataclass
class AttentionOutput:
    output: Tensor
    weights: Optional[np.ndarray] = None  # [B, H, Nq, Nk] post-softmax
    context: Optional[np.ndarray] = None  # [B, Nq, d_emb] before the output projection
    values: Optional[np.ndarray] = None  # [B, H, Nk, dh]


def scaled_scores(q: Tensor, k: Tensor, cfg: AttentionConfig) -> Tensor:
    """``q @ k^T / sqrt(d_emb / H)`` for ``[B, H, N, dh]`` queries and keys."""
    if q.shape[-1] != cfg.head_dim or k.shape[-1] != cfg.head_dim:
        raise ShapeError(f"q {q.shape} / k {k.shape} do not match head_dim {cfg.head_dim}")
    return matmul(q, swapaxes(k, -1, -2)) * cfg.scale


def vanilla_attention(q: Tensor, k: Tensor, v: Tensor, cfg: AttentionConfig) -> Tensor:
    return matmul(softmax_lastdim(scaled_scores(q, k, cfg)), v)


def attention_dropout(weights: Tensor, rate: float, rng, training: bool) -> Tensor:
    """Zero each attention weight with probability ``rate``; rescale survivors."""
    if not training or rate == 0.0:
        return weights
    keep = rng.random(weights.shape) >= rate
    return weights * (keep / (1.0 - rate))


def drophead_keep_mask(batch: int, heads: int, rate: float, rng) -> np.ndarray:
    """Boolean ``[B, H]`` keep mask; a row that would drop every head keeps one at random."""
    keep = rng.random((batch, heads)) >= rate
    for b in np.flatnonzero(~keep.any(axis=1)):
        keep[b, rng.integers(heads)] = True
    return keep


def drophead(head_outputs: Tensor, rate: float, rng, training: bool) -> Tensor:
    if not training or rate == 0.0:
        return head_outputs
    batch, heads = head_outputs.shape[:2]
    keep = drophead_keep_mask(batch, heads, rate, rng)
    scale = keep * (heads / keep.sum(axis=1, keepdims=True))
    return head_outputs * scale[:, :, None, None]


def masked_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    additive,
    cfg: AttentionConfig,
    *,
    att_dropout: float = 0.0,
    rng=None,
    training: bool = False,
    keep_weights: bool = True,
) -> AttentionOutput:
    """softmax(scaled_scores + additive) @ v.

    The returned ``output`` keeps the head axis, ``[B, H, Nq, dh]``.
    """
    scores = scaled_scores(q, k, cfg)
    additive = np.asarray(additive, dtype=np.float64)
    if additive.shape != scores.shape:
        raise ShapeError(f"additive mask {additive.shape} does not match scores {scores.shape}")
    if np.isnan(scores.data).any():
        raise NumericError("NaN in attention scores")
    weights = softmax_lastdim(scores + additive)
    dropped = attention_dropout(weights, att_dropout, rng, training)
    out = matmul(dropped, v)
    return AttentionOutput(out, weights.data.copy() if keep_weights else None)


class MultiHeadAttention(Module):
    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.d_emb
        self.query = Linear(d, d, rng)
        self.key = Linear(d, d, rng)
        self.value = Linear(d, d, rng)
        self.out = Linear(d, d, rng)

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return x.reshape(b, n, self.cfg.heads, self.cfg.head_dim).transpose(0, 2, 1, 3)

    def __call__(
        self,
        x: Tensor,
        memory: Tensor,
        allow: np.ndarray,
        *,
        training: bool = False,
        att_dropout: float = 0.0,
        drophead_rate: float = 0.0,
        rngs=None,
        keep_weights: bool = False,
    ) -> AttentionOutput:
        """Attend from ``x`` ([B, Nq, d]) to ``memory`` ([B, Nk, d]) under ``allow`` ([B, Nq, Nk])."""
        b, n, d = x.shape
        q = self._split(self.query(x))
        k = self._split(self.key(memory))
        v = self._split(self.value(memory))
        additive = expand_to_additive(allow, b, self.cfg.heads)
        att = masked_attention(
            q, k, v, additive, self.cfg,
            att_dropout=att_dropout,
            rng=None if rngs is None else rngs.att_dropout,
            training=training,
            keep_weights=keep_weights,
        )
        heads = drophead(att.output, drophead_rate, None if rngs is None else rngs.drophead, training)
        context = heads.transpose(0, 2, 1, 3).reshape(b, n, d)
        return AttentionOutput(
            output=self.out(context),
            weights=att.weights,
            context=context.data.copy() if keep_weights else None,
            values=v.data.copy() if keep_weights else None,
        )
