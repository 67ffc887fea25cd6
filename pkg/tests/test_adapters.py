import numpy as np
import pytest

from peftforge import tensor as T
from peftforge.adapters import (
    AdaptionPromptAdapter,
    AdaptionPromptConfig,
    LoraAdapter,
    LoraConfig,
    PrefixAdapter,
    PrefixConfig,
    PromptAdapter,
    PromptConfig,
    PTuningAdapter,
    PTuningConfig,
    adapter_param_count,
    make_adapter,
)
from peftforge.data import Vocab, build_vocab
from peftforge.model import BaseModel, ModelConfig, forward_lm
from peftforge.stacking import AdapterStack

CFG = ModelConfig(vocab_size=64, d_model=32, n_layers=2, n_heads=4, d_ff=64, max_seq_len=48)


def base_model(seed=0):
    return BaseModel(CFG, seed=seed)


def toks(batch=2, seq=7, seed=3):
    return T.make_rng(seed).integers(4, CFG.vocab_size, size=(batch, seq))


# ---------------------------------------------------------------------------
# Low-rank adapter
# ---------------------------------------------------------------------------


def test_lora_init_b_zero_delta_zero():
    ad = LoraAdapter(LoraConfig(r=4, alpha=8), CFG, seed=1)
    assert ad.max_abs_delta() == 0.0
    for name, p in ad.named_params():
        if name.endswith(".B"):
            assert np.all(p.data == 0.0)


def test_lora_param_count_toy():
    # 2 layers x 2 targets x (4*64 + 64*4) on a d=64 model
    cfg64 = ModelConfig(vocab_size=64, d_model=64, n_layers=2, n_heads=4, d_ff=64)
    ad = LoraAdapter(LoraConfig(r=4, alpha=8, targets=("wq", "wv")), cfg64, seed=0)
    assert ad.param_count() == 2048
    assert adapter_param_count(LoraConfig(r=4, alpha=8, targets=("wq", "wv")), cfg64) == 2048


def test_lora_param_count_7b_shapes():
    # 32 layers x 2 targets x (16*4096 + 4096*16), counted from shapes alone
    big = ModelConfig(vocab_size=32000, d_model=4096, n_layers=32, n_heads=32,
                      d_ff=11008, max_seq_len=2048)
    n = adapter_param_count(LoraConfig(r=16, alpha=32, targets=("wq", "wv")), big)
    assert n == 8_388_608


def test_lora_delta_hand_oracle():
    # d=2, r=1, A=[[1,2]], B=[[1],[0]], alpha=2, x=[1,1] -> [6, 0]
    cfg2 = ModelConfig(vocab_size=8, d_model=2, n_layers=1, n_heads=1, d_ff=4)
    ad = LoraAdapter(LoraConfig(r=1, alpha=2.0, dropout=0.0, targets=("wq",)), cfg2, seed=0)
    a, b = ad.pair(0, "wq")
    a.data[:] = np.array([[1.0, 2.0]], dtype=np.float32)
    b.data[:] = np.array([[1.0], [0.0]], dtype=np.float32)
    x = T.constant(np.array([[1.0, 1.0]], dtype=np.float32))
    out = ad.delta(0, "wq", x)
    np.testing.assert_allclose(out.data, np.array([[6.0, 0.0]], dtype=np.float32))


def test_lora_delta_untargeted_projection_rejected():
    ad = LoraAdapter(LoraConfig(targets=("wq",)), CFG, seed=0)
    with pytest.raises(ValueError):
        ad.delta(0, "wv", T.zeros([1, CFG.d_model]))


def test_lora_eval_mode_deterministic_despite_dropout():
    ad = LoraAdapter(LoraConfig(r=2, alpha=4, dropout=0.2), CFG, seed=2)
    for name, p in ad.named_params():
        if name.endswith(".B"):
            p.data[:] = 0.01
    x = T.gaussian([3, CFG.d_model], 0.0, 1.0, seed=5)
    d1 = ad.delta(0, "wq", x, train=False)
    d2 = ad.delta(0, "wq", x, train=False)
    np.testing.assert_array_equal(d1.data, d2.data)


def test_lora_rank_exceeding_width_rejected():
    with pytest.raises(ValueError):
        LoraAdapter(LoraConfig(r=CFG.d_model + 1), CFG, seed=0)


def test_lora_identity_at_init_bit_exact():
    m = base_model(seed=4)
    tk = toks()
    plain, _ = forward_lm(m, tk)
    stacked, _ = forward_lm(m, tk, stack=AdapterStack(domain=LoraAdapter(LoraConfig(), CFG, seed=9)))
    np.testing.assert_array_equal(stacked.data, plain.data)


# ---------------------------------------------------------------------------
# Prefix adapter
# ---------------------------------------------------------------------------


def test_prefix_config_rejects_zero_tokens():
    with pytest.raises(ValueError):
        PrefixConfig(num_virtual_tokens=0)


def test_prefix_direct_rows_are_raw_params():
    ad = PrefixAdapter(PrefixConfig(num_virtual_tokens=5, prefix_projection=False), CFG, seed=1)
    k, v = ad.prefix_kv(1)
    assert k is ad._params["layers.1.k"]
    assert v is ad._params["layers.1.v"]
    assert k.shape == (5, CFG.d_model)


def test_prefix_projection_shapes():
    ad = PrefixAdapter(PrefixConfig(num_virtual_tokens=3, prefix_projection=True), CFG, seed=1)
    k, v = ad.prefix_kv(0)
    assert k.shape == (3, CFG.d_model)
    assert v.shape == (3, CFG.d_model)


def test_prefix_does_not_change_output_length():
    m = base_model(seed=5)
    tk = toks(seq=6)
    ad = PrefixAdapter(PrefixConfig(num_virtual_tokens=4), CFG, seed=2)
    out, n_virtual = forward_lm(m, tk, stack=AdapterStack(domain=ad))
    assert out.shape == (2, 6, CFG.vocab_size)  # keys grow, queries do not
    assert n_virtual == 0


# ---------------------------------------------------------------------------
# Prompt adapter
# ---------------------------------------------------------------------------


def _vocab():
    return build_vocab(["alpha beta gamma delta epsilon"], max_size=32)


def test_prompt_text_init_copies_embeddings():
    m = base_model(seed=6)
    vocab = _vocab()
    cfg = PromptConfig(num_virtual_tokens=3, init="text", init_text="alpha beta gamma")
    ad = PromptAdapter(cfg, CFG, seed=0, base=m, vocab=vocab)
    ids = vocab.encode("alpha beta gamma")
    np.testing.assert_array_equal(ad.virtual_rows().data, m.params["embed.weight"].data[ids])


def test_prompt_text_init_cycles_short_text():
    m = base_model(seed=6)
    vocab = _vocab()
    cfg = PromptConfig(num_virtual_tokens=5, init="text", init_text="alpha beta")
    ad = PromptAdapter(cfg, CFG, seed=0, base=m, vocab=vocab)
    ids = vocab.encode("alpha beta")
    expected = m.params["embed.weight"].data[[ids[0], ids[1], ids[0], ids[1], ids[0]]]
    np.testing.assert_array_equal(ad.virtual_rows().data, expected)


def test_prompt_empty_init_text_rejected():
    with pytest.raises(ValueError):
        PromptAdapter(PromptConfig(init="text", init_text="   "), CFG, seed=0,
                      base=base_model(), vocab=_vocab())


def test_prompt_extends_sequence():
    m = base_model(seed=7)
    ad = PromptAdapter(PromptConfig(num_virtual_tokens=4, init="random"), CFG, seed=3)
    out, n_virtual = forward_lm(m, toks(seq=6), stack=AdapterStack(domain=ad))
    assert n_virtual == 4
    assert out.shape == (2, 10, CFG.vocab_size)


# ---------------------------------------------------------------------------
# P-tuning adapter
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("reparam,hidden,layers", [("MLP", 64, 1), ("MLP", 32, 3), ("LSTM", 16, 1), ("LSTM", 16, 2)])
def test_ptuning_output_shape(reparam, hidden, layers):
    cfg = PTuningConfig(num_virtual_tokens=5, reparameterisation=reparam,
                        hidden=hidden, num_layers=layers, dropout=0.0)
    ad = PTuningAdapter(cfg, CFG, seed=1)
    rows = ad.virtual_rows()
    assert rows.shape == (5, CFG.d_model)


def test_ptuning_gradients_reach_encoder():
    cfg = PTuningConfig(num_virtual_tokens=3, reparameterisation="LSTM",
                        hidden=8, num_layers=1, dropout=0.0)
    ad = PTuningAdapter(cfg, CFG, seed=2)
    rows = ad.virtual_rows()
    T.backward(T.tsum(T.mul(rows, rows)))
    for name, p in ad.named_params():
        assert p.grad is not None, name


def test_ptuning_lstm_grad_check():
    cfg_small = ModelConfig(vocab_size=8, d_model=4, n_layers=1, n_heads=2, d_ff=8)
    cfg = PTuningConfig(num_virtual_tokens=3, reparameterisation="LSTM",
                        hidden=6, num_layers=2, dropout=0.0)
    ad = PTuningAdapter(cfg, cfg_small, seed=3, dtype=np.float64)

    def fn(_):
        rows = ad.virtual_rows()
        return T.tsum(T.mul(rows, rows))

    err = T.grad_check(fn, ad._params["lstm.0.w_ih"], eps=1e-6, coords=12, rng=T.make_rng(0))
    assert err <= 1e-6


# ---------------------------------------------------------------------------
# Adaption-prompt adapter
# ---------------------------------------------------------------------------


def test_adaption_identity_at_zero_gate_bit_exact():
    m = base_model(seed=8)
    tk = toks()
    plain, _ = forward_lm(m, tk)
    ad = AdaptionPromptAdapter(AdaptionPromptConfig(adapter_length=5, adapter_layers=10), CFG, seed=4)
    stacked, _ = forward_lm(m, tk, stack=AdapterStack(domain=ad))
    np.testing.assert_array_equal(stacked.data, plain.data)


def test_adaption_affected_layers_capped_at_top():
    ad = AdaptionPromptAdapter(AdaptionPromptConfig(adapter_length=5, adapter_layers=10), CFG, seed=0)
    assert [ad.affected(i) for i in range(CFG.n_layers)] == [True, True]
    one = AdaptionPromptAdapter(AdaptionPromptConfig(adapter_length=5, adapter_layers=1), CFG, seed=0)
    assert [one.affected(i) for i in range(CFG.n_layers)] == [False, True]
    with pytest.raises(ValueError):
        one.prompt_gate(0)


def test_adaption_saturating_gate_approaches_prompt_value():
    # One prompt row, huge gate: extra context -> that row's value projection
    cfg1 = AdaptionPromptConfig(adapter_length=1, adapter_layers=1)
    m = base_model(seed=9)
    ad = AdaptionPromptAdapter(cfg1, CFG, seed=5)
    ad._params["layers.1.gate"].data[:] = 50.0
    rows = ad._params["layers.1.rows"]

    from peftforge.model import attention, causal_mask

    b, h, t, hd = 1, CFG.n_heads, 3, CFG.head_dim
    rng = T.make_rng(11)
    q = T.gaussian([b, h, t, hd], 0.0, 1.0, rng)
    k = T.gaussian([b, h, t, hd], 0.0, 1.0, rng)
    v = T.gaussian([b, h, t, hd], 0.0, 1.0, rng)
    kv = T.matmul(rows, m.layer(1, "wk"))
    vv = T.matmul(rows, m.layer(1, "wv"))
    kg = T.permute(T.reshape(T.expand_leading(kv, (b,)), (b, 1, h, hd)), (0, 2, 1, 3))
    vg = T.permute(T.reshape(T.expand_leading(vv, (b,)), (b, 1, h, hd)), (0, 2, 1, 3))
    plain = attention(q, k, v, causal_mask(t))
    gated = attention(q, k, v, causal_mask(t), gated_prompt=(kg, vg, ad._params["layers.1.gate"]))
    # softmax over a single prompt row is 1, tanh(50) ~= 1: extra term is the row value
    extra = gated.data - plain.data
    expected = np.broadcast_to(vg.data, extra.shape)
    np.testing.assert_allclose(extra, expected, atol=1e-5)


# ---------------------------------------------------------------------------
# Shared contracts
# ---------------------------------------------------------------------------

ALL_ADAPTERS = [
    ("lora", LoraConfig(r=4, alpha=8, dropout=0.0)),
    ("prefix", PrefixConfig(num_virtual_tokens=3)),
    ("prompt", PromptConfig(num_virtual_tokens=3, init="random")),
    ("ptuning", PTuningConfig(num_virtual_tokens=3, hidden=16, num_layers=1, dropout=0.0)),
    ("adaption", AdaptionPromptConfig(adapter_length=3, adapter_layers=2)),
]


@pytest.mark.parametrize("kind,cfg", ALL_ADAPTERS)
def test_param_counts_match_manifest_enumeration(kind, cfg):
    ad = make_adapter(kind, cfg, CFG, seed=1)
    assert ad.param_count() == adapter_param_count(cfg, CFG)
    assert ad.param_count() == sum(p.size for _, p in ad.named_params())


@pytest.mark.parametrize("kind,cfg", ALL_ADAPTERS)
def test_freeze_flag_toggles_all_params(kind, cfg):
    ad = make_adapter(kind, cfg, CFG, seed=1)
    assert not ad.frozen
    ad.set_frozen(True)
    assert ad.frozen
    assert all(not p.requires_grad for _, p in ad.named_params())
    ad.set_frozen(False)
    assert all(p.requires_grad for _, p in ad.named_params())


@pytest.mark.parametrize("kind,cfg", ALL_ADAPTERS)
def test_base_weights_untouched_by_adapter_forward(kind, cfg):
    m = base_model(seed=10)
    before = {n: p.data.copy() for n, p in m.named_params()}
    ad = make_adapter(kind, cfg, CFG, seed=2)
    forward_lm(m, toks(seq=5), stack=AdapterStack(domain=ad))
    for n, p in m.named_params():
        np.testing.assert_array_equal(p.data, before[n])


@pytest.mark.parametrize("kind,cfg", ALL_ADAPTERS)
def test_adapter_forward_deterministic_in_eval(kind, cfg):
    m = base_model(seed=11)
    tk = toks(seq=5)
    ad = make_adapter(kind, cfg, CFG, seed=3)
    out1, _ = forward_lm(m, tk, stack=AdapterStack(domain=ad), train=False)
    out2, _ = forward_lm(m, tk, stack=AdapterStack(domain=ad), train=False)
    np.testing.assert_array_equal(out1.data, out2.data)


def test_make_adapter_unknown_kind():
    with pytest.raises(ValueError):
        make_adapter("ia3", LoraConfig(), CFG)
