import numpy as np
import pytest

from tlm.attention import RegularizerSpec
from tlm.autodiff import ContractError, Tape, Tensor
from tlm.checks import counting_streams
from tlm.masking import MaskStrategy
from tlm.oracle import check_param_grads, finite_diff_grad, relative_error
from tlm.transformer import (
    BlockConfig,
    DecoderBlock,
    EncoderBlock,
    ForwardState,
    LengthError,
    ModelConfig,
    Streams,
    Transformer,
    decoder_block_forward,
    encoder_block_forward,
)


def block_cfg(reg=RegularizerSpec(), d=8, heads=2, drop=0.0):
    return BlockConfig(d_emb=d, heads=heads, hidden_dropout=drop, regularizer=reg)


def test_shape_contract_classifier():
    cfg = ModelConfig(vocab_size=7, max_len=4, layers=1, block=BlockConfig(d_emb=4, heads=2), num_classes=3)
    logits = Transformer(cfg)(np.array([[1, 4, 5], [1, 6, 0]]))
    assert logits.shape == (2, 3)


def test_shape_contract_seq2seq():
    cfg = ModelConfig(vocab_size=9, max_len=6, layers=2, block=BlockConfig(d_emb=8, heads=2),
                      architecture="encoder-decoder")
    logits = Transformer(cfg)(np.array([[4, 5, 6]]), np.array([[1, 4, 5, 6]]))
    assert logits.shape == (1, 4, 9)


def test_length_error():
    cfg = ModelConfig(vocab_size=7, max_len=3)
    with pytest.raises(LengthError):
        Transformer(cfg)(np.array([[1, 4, 5, 6]]))


def test_token_out_of_vocab():
    with pytest.raises(IndexError):
        Transformer(ModelConfig(vocab_size=7, max_len=4))(np.array([[1, 9]]))


def test_train_without_rng_is_contract_error(rng):
    block = EncoderBlock(block_cfg(RegularizerSpec("tlm")), rng)
    with pytest.raises(ContractError):
        encoder_block_forward(block, Tensor(np.zeros((1, 3, 8))), [[1, 1, 1]], "train")


def test_encoder_eval_ignores_regularizer(rng):
    x = Tensor(rng.normal(size=(2, 4, 8)))
    ms = np.array([[1, 1, 1, 1], [1, 1, 0, 0]])
    state = np.random.default_rng(0)
    plain = EncoderBlock(block_cfg(drop=0.1), np.random.default_rng(0))
    reg = EncoderBlock(block_cfg(RegularizerSpec("tlm+drophead+att_dropout", rate=0.4), drop=0.1),
                       np.random.default_rng(0))
    a, _ = encoder_block_forward(plain, x, ms, "eval")
    b, _ = encoder_block_forward(reg, x, ms, "eval", rngs=Streams(1))
    assert np.array_equal(a.data, b.data)
    del state


@pytest.mark.parametrize("scheme", ["tlm", "att_dropout", "drophead", "tlm+att_dropout+drophead"])
@pytest.mark.parametrize("arch", ["encoder-classifier", "encoder-decoder"])
def test_rate_zero_equals_none_in_train_mode(scheme, arch):
    cfg = ModelConfig(vocab_size=9, max_len=6, layers=2, block=block_cfg(drop=0.1), architecture=arch)
    model = Transformer(cfg, seed=3)
    src = np.array([[1, 4, 5, 6], [1, 7, 0, 0]])
    tgt = np.array([[1, 5, 6], [1, 8, 0]]) if arch == "encoder-decoder" else None
    a = model(src, tgt, train=True, rngs=Streams(9), regularizer=RegularizerSpec()).data
    b = model(src, tgt, train=True, rngs=Streams(9), regularizer=RegularizerSpec(scheme, rate=0.0)).data
    assert np.array_equal(a, b)


def test_siblings_row_copies_value_in_block(rng):
    block = EncoderBlock(block_cfg(RegularizerSpec("tlm")), rng)
    x = Tensor(rng.normal(size=(1, 3, 8)))
    _, state = encoder_block_forward(block, x, [[1, 1, 1]], "train", MaskStrategy.SIBLINGS, Streams(0),
                                     pinned={("encoder", 0): [{1}]}, keep_weights=True)
    att = state.attentions[0]
    values = att.values[0].transpose(1, 0, 2).reshape(3, 8)  # heads merged like the context
    np.testing.assert_allclose(att.context[0, 1], values[1], atol=1e-9)


def test_decoder_causal_weights(rng):
    block = DecoderBlock(block_cfg(), rng)
    x, mem = Tensor(rng.normal(size=(1, 4, 8))), Tensor(rng.normal(size=(1, 3, 8)))
    _, state = decoder_block_forward(block, x, mem, [[1, 1, 1, 1]], [[1, 1, 1]], "eval", keep_weights=True)
    w = state.attentions[0].weights[0]
    assert np.triu(w.max(axis=0), k=1).max() == 0.0


def test_decoder_self_masking_fallback(rng):
    block = DecoderBlock(block_cfg(RegularizerSpec("tlm")), rng)
    x, mem = Tensor(rng.normal(size=(1, 3, 8))), Tensor(rng.normal(size=(1, 3, 8)))
    _, state = decoder_block_forward(block, x, mem, [[1, 1, 1]], [[1, 1, 1]], "train", MaskStrategy.SELF,
                                     Streams(0), pinned={("decoder", 0): [{0}]}, keep_weights=True)
    w = state.attentions[0].weights[0]
    np.testing.assert_allclose(w[:, 0], [[1, 0, 0]] * 2, atol=1e-12)
    assert w[:, 1:, 0].max() <= 1e-12
    assert np.triu(w.max(axis=0), k=1).max() <= 1e-12


def test_decoder_rate_zero_is_vanilla(rng):
    block = DecoderBlock(block_cfg(RegularizerSpec("tlm", decoder_rate=0.0)), rng)
    x, mem = Tensor(rng.normal(size=(2, 3, 8))), Tensor(rng.normal(size=(2, 3, 8)))
    a, _ = decoder_block_forward(block, x, mem, [[1, 1, 1], [1, 1, 0]], [[1, 1, 1], [1, 0, 0]], "train",
                                 MaskStrategy.SIBLINGS, Streams(0))
    b, _ = decoder_block_forward(block, x, mem, [[1, 1, 1], [1, 1, 0]], [[1, 1, 1], [1, 0, 0]], "eval")
    assert np.array_equal(a.data, b.data)


def test_cross_attention_flag_removes_encoder_masked_columns():
    reg = RegularizerSpec("tlm", rate=0.5, cross_attention_tlm=True)
    cfg = ModelConfig(vocab_size=9, max_len=6, layers=1, block=block_cfg(reg), architecture="encoder-decoder")
    model = Transformer(cfg, seed=0)
    src, tgt = np.array([[4, 5, 6, 7]]), np.array([[1, 5, 6]])
    state = ForwardState.begin(True, reg, Streams(0), strategy=MaskStrategy.SIBLINGS,
                               pinned={("encoder", 0): [{2}], ("decoder", 0): [set()]}, keep_weights=True)
    model(src, tgt, state=state)
    cross = state.attentions[-1].weights[0]  # decoder cross-attention
    assert cross[..., 2].max() <= 1e-12
    # default: encoder masked keys stay visible to cross-attention
    reg_off = RegularizerSpec("tlm", rate=0.5)
    state = ForwardState.begin(True, reg_off, Streams(0), strategy=MaskStrategy.SIBLINGS,
                               pinned={("encoder", 0): [{2}], ("decoder", 0): [set()]}, keep_weights=True)
    model(src, tgt, state=state)
    assert state.attentions[-1].weights[0][..., 2].min() > 0


def test_two_layers_draw_two_masked_sets_per_sequence():
    cfg = ModelConfig(vocab_size=9, max_len=6, layers=2, block=block_cfg(RegularizerSpec("tlm", rate=0.3)))
    streams = counting_streams(0)
    trace = []
    state = ForwardState.begin(True, cfg.block.regularizer, streams, trace=trace)
    Transformer(cfg)(np.array([[1, 4, 5, 6], [1, 7, 8, 0], [1, 4, 0, 0]]), state=state)
    assert streams.mask.count() == 6
    assert streams.strategy.count() == 1
    assert sorted({(layer, b) for _, layer, b, _ in trace}) == [(l, b) for l in range(2) for b in range(3)]


def test_independent_decoder_strategy_flag():
    reg = RegularizerSpec("tlm", independent_decoder_strategy=True)
    streams = counting_streams(0)
    ForwardState.begin(True, reg, streams)
    assert streams.strategy.count() == 1 and streams.decoder_strategy.count() == 1
    shared = counting_streams(0)
    st = ForwardState.begin(True, RegularizerSpec("tlm"), shared)
    assert shared.decoder_strategy.count() == 0
    assert st.encoder_strategy is st.decoder_strategy


def test_mode_toggle_keeps_weights():
    cfg = ModelConfig(vocab_size=9, max_len=6, block=block_cfg(RegularizerSpec("tlm+drophead"), drop=0.1))
    model = Transformer(cfg, seed=1)
    before = model.state_dict()
    src = np.array([[1, 4, 5]])
    model(src, train=True, rngs=Streams(0))
    model(src)
    model(src, train=True, rngs=Streams(1))
    after = model.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_full_model_gradient_check():
    rng = np.random.default_rng(0)
    reg = RegularizerSpec("tlm", rate=0.3)
    cfg = ModelConfig(vocab_size=11, max_len=4, layers=1, block=block_cfg(reg, drop=0.1))
    model = Transformer(cfg, seed=0)
    for p in model.parameters():
        p.data = rng.normal(0, 0.5, size=p.shape)
    src = np.array([[1, 4, 9, 10], [1, 5, 6, 0]])
    labels = np.array([1, 0])
    pinned = {("encoder", 0): [{2}, {1}]}

    from tlm.autodiff import cross_entropy

    def loss():
        state = ForwardState.begin(True, reg, Streams(4), strategy=MaskStrategy.SELF, pinned=pinned)
        return cross_entropy(model(src, state=state), labels)

    params = dict(model.named_parameters())
    with Tape():
        l = loss()
    l.backward()
    analytic = np.concatenate([params[k].grad.ravel() for k in params])
    numeric = np.concatenate([finite_diff_grad(lambda _x: loss().item(), p.data).ravel() for p in params.values()])
    assert relative_error(analytic, numeric) < 1e-4
    # per-parameter check on the parameters whose gradients are not identically zero
    errs = check_param_grads(lambda: loss().item(), {"head.weight": params["head.weight"]},
                             {"head.weight": params["head.weight"].grad})
    assert errs["head.weight"] < 1e-4


def test_greedy_decode_shape():
    cfg = ModelConfig(vocab_size=9, max_len=6, layers=1, block=block_cfg(), architecture="encoder-decoder")
    out = Transformer(cfg).greedy_decode(np.array([[4, 5, 6], [7, 8, 0]]), steps=4)
    assert out.shape == (2, 4)


def test_init_statistics():
    cfg = ModelConfig(vocab_size=50, max_len=8, block=BlockConfig(d_emb=64, heads=4))
    model = Transformer(cfg, seed=0)
    w = model.encoder[0].ffn.fc1.weight.data
    assert abs(w.std() - 0.02) < 0.002
    assert not model.encoder[0].ffn.fc1.bias.data.any()
