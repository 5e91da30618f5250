"""Post-norm Transformer encoder / encoder-decoder with token-level masking.

In training mode each self-attention layer draws a fresh masked set per
sequence; the masking strategy (siblings or self) is drawn once per batch when
the forward state is created. In eval mode all regularizers are skipped.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attention import AttentionConfig, MultiHeadAttention, RegularizerSpec
from .autodiff import ContractError, Tensor, gelu
from .layers import Embedding, LayerNorm, Linear, Module, dropout
from .masking import (
    ConfigError,
    MaskStrategy,
    batch_allow,
    cross_allow_matrix,
    draw_strategy,
    select_masked_tokens,
)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
ARCHITECTURES = ("encoder-classifier", "encoder-decoder")


class LengthError(ValueError):
    pass


@dataclass(frozen=True)
class BlockConfig:
    d_emb: int = 32
    heads: int = 4
    ffn_hidden: Optional[int] = None
    hidden_dropout: float = 0.1
    regularizer: RegularizerSpec = field(default_factory=RegularizerSpec)
    ln_eps: float = 1e-5

    def __post_init__(self):
        AttentionConfig(self.d_emb, self.heads)
        if self.ffn_hidden is None:
            object.__setattr__(self, "ffn_hidden", 4 * self.d_emb)
        if not 0.0 <= self.hidden_dropout < 1.0:
            raise ConfigError(f"hidden_dropout must lie in [0, 1), got {self.hidden_dropout}")

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.d_emb, self.heads)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    max_len: int
    layers: int = 1
    block: BlockConfig = field(default_factory=BlockConfig)
    architecture: str = "encoder-classifier"
    num_classes: int = 2

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        if self.max_len < 2:
            raise ConfigError(f"max_len must be >= 2, got {self.max_len}")
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"architecture must be one of {ARCHITECTURES}, got {self.architecture!r}")
        if self.vocab_size < 4:
            raise ConfigError("vocab_size must leave room for pad/bos/eos/unk")


class Streams:
    """Independent generators, one per consumer.

    Keeping consumers on separate streams means enabling one regularizer
    never shifts the random numbers another one sees.
    """

    NAMES = ("init", "shuffle", "hidden", "att_dropout", "drophead", "mask", "strategy", "decoder_strategy")

    def __init__(self, seed: int):
        self.seed = seed
        children = np.random.SeedSequence(seed).spawn(len(self.NAMES))
        for name, child in zip(self.NAMES, children):
            setattr(self, name, np.random.default_rng(child))


@dataclass
class ForwardState:
    """Per-batch stochastic context threaded through every block.

    ``pinned`` maps ``(stack, layer)`` to per-sequence masked sets and
    replaces sampling for those layers; ``trace`` (a list) receives one
    ``(stack, layer, sequence, masked_set)`` tuple per masked-set draw.
    """

    training: bool
    regularizer: RegularizerSpec
    rngs: Optional[Streams] = None
    encoder_strategy: MaskStrategy = MaskStrategy.NONE
    decoder_strategy: MaskStrategy = MaskStrategy.NONE
    pinned: Optional[dict] = None
    trace: Optional[list] = None
    keep_weights: bool = False
    attentions: list = field(default_factory=list)
    encoder_masked: Optional[list] = None

    @classmethod
    def begin(
        cls,
        training: bool,
        regularizer: RegularizerSpec,
        rngs: Optional[Streams] = None,
        *,
        strategy: Optional[MaskStrategy] = None,
        decoder_strategy: Optional[MaskStrategy] = None,
        **kwargs,
    ) -> "ForwardState":
        if training and rngs is None:
            raise ContractError("training mode needs random streams")
        state = cls(training, regularizer, rngs, **kwargs)
        if training and regularizer.active("tlm"):
            if strategy is None:
                strategy = draw_strategy(regularizer.p_self, rngs.strategy)
            if decoder_strategy is None:
                decoder_strategy = (
                    draw_strategy(regularizer.p_self, rngs.decoder_strategy)
                    if regularizer.independent_decoder_strategy
                    else strategy
                )
            state.encoder_strategy = MaskStrategy(strategy)
            state.decoder_strategy = MaskStrategy(decoder_strategy)
        return state

    @property
    def tlm(self) -> bool:
        return self.training and self.regularizer.active("tlm")

    def strategy_for(self, stack: str) -> MaskStrategy:
        return self.encoder_strategy if stack == "encoder" else self.decoder_strategy

    def masked_sets(self, stack: str, layer: int, attn_ms: np.ndarray) -> list:
        if self.pinned is not None and (stack, layer) in self.pinned:
            sets = [frozenset(s) for s in self.pinned[(stack, layer)]]
        else:
            rate = self.regularizer.tlm_rate(stack)
            sets = [select_masked_tokens(row, rate, self.rngs.mask) for row in attn_ms]
        if self.trace is not None:
            self.trace.extend((stack, layer, b, s) for b, s in enumerate(sets))
        return sets

    def self_allow(self, stack: str, layer: int, attn_ms: np.ndarray, causal: bool) -> np.ndarray:
        if not self.tlm:
            return batch_allow(attn_ms, causal)
        sets = self.masked_sets(stack, layer, attn_ms)
        if stack == "encoder":
            self.encoder_masked = sets
        return batch_allow(attn_ms, causal, self.strategy_for(stack), sets)


class FeedForward(Module):
    def __init__(self, d: int, hidden: int, rng):
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class EncoderBlock(Module):
    """Self-attention -> add & norm -> FFN -> add & norm."""

    def __init__(self, cfg: BlockConfig, rng):
        self.cfg = cfg
        self.attn = MultiHeadAttention(cfg.attention, rng)
        self.norm1 = LayerNorm(cfg.d_emb, cfg.ln_eps)
        self.ffn = FeedForward(cfg.d_emb, cfg.ffn_hidden, rng)
        self.norm2 = LayerNorm(cfg.d_emb, cfg.ln_eps)

    def _attend(self, attn, x, memory, allow, state: ForwardState):
        reg = state.regularizer
        out = attn(
            x, memory, allow,
            training=state.training,
            att_dropout=reg.att_dropout_rate,
            drophead_rate=reg.drophead_rate,
            rngs=state.rngs,
            keep_weights=state.keep_weights,
        )
        if state.keep_weights:
            state.attentions.append(out)
        return out.output

    def _drop(self, x: Tensor, state: ForwardState) -> Tensor:
        rng = None if state.rngs is None else state.rngs.hidden
        return dropout(x, self.cfg.hidden_dropout, rng, state.training)

    def forward(self, x: Tensor, attn_ms: np.ndarray, state: ForwardState, layer: int = 0) -> Tensor:
        allow = state.self_allow("encoder", layer, attn_ms, causal=False)
        h = self.norm1(x + self._drop(self._attend(self.attn, x, x, allow, state), state))
        return self.norm2(h + self._drop(self.ffn(h), state))

    __call__ = forward


class DecoderBlock(EncoderBlock):
    """Causal self-attention, cross-attention over encoder memory, then FFN."""

    def __init__(self, cfg: BlockConfig, rng):
        super().__init__(cfg, rng)
        self.cross = MultiHeadAttention(cfg.attention, rng)
        self.norm3 = LayerNorm(cfg.d_emb, cfg.ln_eps)

    def forward(
        self,
        x: Tensor,
        memory: Tensor,
        self_attn_ms: np.ndarray,
        memory_attn_ms: np.ndarray,
        state: ForwardState,
        layer: int = 0,
    ) -> Tensor:
        allow = state.self_allow("decoder", layer, self_attn_ms, causal=True)
        h = self.norm1(x + self._drop(self._attend(self.attn, x, x, allow, state), state))
        n = x.shape[1]
        removed = [()] * len(memory_attn_ms)
        if state.tlm and state.regularizer.cross_attention_tlm and state.encoder_masked is not None:
            removed = state.encoder_masked
        cross = np.stack([cross_allow_matrix(n, m, r) for m, r in zip(memory_attn_ms, removed)])
        h = self.norm2(h + self._drop(self._attend(self.cross, h, memory, cross, state), state))
        return self.norm3(h + self._drop(self.ffn(h), state))

    __call__ = forward


class Transformer(Module):
    """Encoder classifier (first-position head) or encoder-decoder with a vocab head."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = Streams(seed).init
        d = cfg.block.d_emb
        self.tok = Embedding(cfg.vocab_size, d, rng)
        self.pos = Embedding(cfg.max_len, d, rng)
        self.encoder = [EncoderBlock(cfg.block, rng) for _ in range(cfg.layers)]
        if cfg.architecture == "encoder-decoder":
            self.decoder = [DecoderBlock(cfg.block, rng) for _ in range(cfg.layers)]
            self.head = Linear(d, cfg.vocab_size, rng)
        else:
            self.head = Linear(d, cfg.num_classes, rng)

    @property
    def is_seq2seq(self) -> bool:
        return self.cfg.architecture == "encoder-decoder"

    def _embed(self, ids: np.ndarray, state: ForwardState) -> Tensor:
        if ids.ndim != 2:
            raise ContractError(f"token batch must be [B, N], got shape {ids.shape}")
        n = ids.shape[1]
        if n > self.cfg.max_len:
            raise LengthError(f"sequence length {n} exceeds max_len {self.cfg.max_len}")
        x = self.tok(ids) + self.pos(np.arange(n))
        rng = None if state.rngs is None else state.rngs.hidden
        return dropout(x, self.cfg.block.hidden_dropout, rng, state.training)

    def encode(self, src: np.ndarray, state: ForwardState) -> tuple[Tensor, np.ndarray]:
        attn_ms = (src != PAD).astype(np.int8)
        x = self._embed(src, state)
        for i, block in enumerate(self.encoder):
            x = block(x, attn_ms, state, i)
        return x, attn_ms

    def forward(
        self,
        src,
        tgt_in=None,
        *,
        train: bool = False,
        rngs: Optional[Streams] = None,
        regularizer: Optional[RegularizerSpec] = None,
        state: Optional[ForwardState] = None,
    ) -> Tensor:
        """Logits ``[B, classes]`` for the classifier or ``[B, T, vocab]`` for seq2seq."""
        if state is None:
            reg = self.cfg.block.regularizer if regularizer is None else regularizer
            state = ForwardState.begin(train, reg, rngs)
        src = np.asarray(src, dtype=np.int64)
        memory, src_ms = self.encode(src, state)
        if not self.is_seq2seq:
            return self.head(memory[:, 0, :])
        if tgt_in is None:
            raise ContractError("encoder-decoder forward needs decoder input tokens")
        tgt_in = np.asarray(tgt_in, dtype=np.int64)
        tgt_ms = (tgt_in != PAD).astype(np.int8)
        y = self._embed(tgt_in, state)
        for i, block in enumerate(self.decoder):
            y = block(y, memory, tgt_ms, src_ms, state, i)
        return self.head(y)

    __call__ = forward

    def greedy_decode(self, src, steps: int) -> np.ndarray:
        """Autoregressive eval-mode decoding from BOS for ``steps`` tokens."""
        src = np.asarray(src, dtype=np.int64)
        out = np.full((src.shape[0], 1), BOS, dtype=np.int64)
        for _ in range(steps):
            logits = self.forward(src, out)
            nxt = logits.data[:, -1, :].argmax(axis=-1)
            out = np.concatenate([out, nxt[:, None]], axis=1)
        return out[:, 1:]


def encoder_block_forward(block: EncoderBlock, x: Tensor, attn_ms, mode: str, strategy=None, rngs=None, **kwargs):
    """Functional entry point: run one encoder block in ``"train"`` or ``"eval"`` mode."""
    state = ForwardState.begin(mode == "train", block.cfg.regularizer, rngs, strategy=strategy, **kwargs)
    out = block(x, np.asarray(attn_ms), state, 0)
    return out, state


def decoder_block_forward(block: DecoderBlock, x, memory, self_attn_ms, memory_attn_ms, mode: str,
                          strategy=None, rngs=None, **kwargs):
    state = ForwardState.begin(mode == "train", block.cfg.regularizer, rngs,
                               strategy=strategy, decoder_strategy=strategy, **kwargs)
    out = block(x, memory, np.asarray(self_attn_ms), np.asarray(memory_attn_ms), state, 0)
    return out, state
