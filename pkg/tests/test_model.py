import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hcasr.errors import ConfigError
from hcasr.model import (
    AttentionDecoder,
    Encoder,
    Fusion,
    Lspc,
    LspcConfig,
    ModelConfig,
    VggConfig,
    VggExtractor,
    attention_step,
    build_model,
    count_parameters,
    ctc_head,
    encode,
    fuse,
    init_parameters,
    length_mask,
    ligru_cell,
    lspc_forward,
    vgg_baseline_forward,
)
from hcasr.verification import tiny_model_config

D64 = torch.float64


def seeded(module, seed=0):
    init_parameters(module, seed)
    return module


# -- LSPC -----------------------------------------------------------------------


def test_desk_lspc_shape():
    lspc = seeded(Lspc(LspcConfig()).double())
    out = lspc_forward(np.random.default_rng(0).normal(size=(98, 80)), lspc)
    assert out.shape == (49, 1024)
    assert torch.isfinite(out).all()


def test_spectrogram_lspc_shape():
    lspc = seeded(Lspc(LspcConfig(input_dim=201, pool_feature_size=3)).double())
    assert lspc_forward(np.ones((98, 201)), lspc).shape == (49, 1024)


def test_lspc_zero_in_zero_out():
    lspc = seeded(Lspc(LspcConfig()).double())
    assert torch.all(lspc_forward(np.zeros((20, 80)), lspc) == 0)


def test_lspc_pool_time_one_keeps_length():
    lspc = seeded(Lspc(LspcConfig(pool_time_size=1, projection_dim=16)).double())
    assert lspc_forward(np.ones((13, 80)), lspc).shape == (13, 16)


def test_lspc_indivisible_feature_dim():
    with pytest.raises(ConfigError, match="not divisible"):
        Lspc(LspcConfig(input_dim=201, pool_feature_size=2))


@pytest.mark.parametrize("ks", [(3, 5), (3, 4, 7), (5, 3, 7), (3, 3, 5)])
def test_lspc_kernel_invariants(ks):
    with pytest.raises(ConfigError):
        LspcConfig(parallel_kernel_sizes=ks).validate()


def test_lspc_wrong_feature_dim():
    lspc = Lspc(LspcConfig(projection_dim=8)).double()
    with pytest.raises(ConfigError):
        lspc_forward(np.zeros((10, 81)), lspc)


def test_vgg_shape_and_zero():
    vgg = seeded(VggExtractor(VggConfig(projection_dim=32)).double())
    assert vgg_baseline_forward(np.ones((98, 80)), vgg).shape == (24, 32)
    assert torch.all(vgg_baseline_forward(np.zeros((98, 80)), vgg) == 0)


# -- fusion -----------------------------------------------------------------------


def test_fuse_arithmetic_and_endpoints():
    f1 = torch.tensor([2.0, 0.0], dtype=D64)
    f2 = torch.tensor([4.0, 2.0], dtype=D64)
    assert fuse(f1, f2, 0.5).tolist() == [3.0, 1.0]
    x1 = torch.randn(5, 7, dtype=D64)
    x2 = torch.randn(5, 7, dtype=D64)
    assert torch.equal(fuse(x1, x2, 0.0), x1)
    assert torch.equal(fuse(x1, x2, 1.0), x2)


def test_fuse_shape_mismatch_names_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(3, 2\)"):
        fuse(torch.zeros(2, 3), torch.zeros(3, 2), 0.5)


def test_trainable_beta_starts_at_half():
    fusion = Fusion("trainable")
    assert fusion.beta().item() == 0.5
    assert fusion.b.requires_grad


@settings(max_examples=50, deadline=None)
@given(st.floats(-30, 30))
def test_sigmoid_beta_stays_inside(b):
    fusion = Fusion("trainable").double()
    with torch.no_grad():
        fusion.b.fill_(b)
    assert 0.0 <= fusion.beta().item() <= 1.0


def test_fusion_gradient_reaches_both_streams_and_beta():
    fusion = Fusion("trainable").double()
    f1 = torch.randn(3, requires_grad=True, dtype=D64)
    f2 = torch.randn(3, requires_grad=True, dtype=D64)
    fusion(f1, f2).sum().backward()
    assert f1.grad is not None and f2.grad is not None and fusion.b.grad is not None


# -- encoder ----------------------------------------------------------------------


def test_ligru_zero_fixed_point():
    h = ligru_cell(torch.zeros(1, 4), torch.zeros(1, 4), torch.zeros(1, 4),
                   torch.zeros(4, 4), torch.zeros(4, 4))
    assert torch.all(h == 0)


def test_encoder_zero_input_zero_params():
    enc = Encoder(6, 4, 4, 5, 3).double()
    with torch.no_grad():
        for p in enc.parameters():
            p.zero_()
    assert torch.all(encode(torch.zeros(7, 6, dtype=D64), enc) == 0)


def test_encoder_shapes():
    enc = seeded(Encoder(1024, 128, 4, 160, 160).double())
    out = encode(torch.randn(49, 1024, dtype=D64), enc)
    assert out.shape == (49, 160) and torch.isfinite(out).all()
    assert encode(torch.randn(1, 1024, dtype=D64), enc).shape == (1, 160)


def test_padded_batch_matches_single_utterances():
    model = build_model(tiny_model_config(3), seed=1)
    rng = np.random.default_rng(0)
    lens = [9, 6, 4]
    fb = [rng.normal(size=(n, 80)) for n in lens]
    sp = [rng.normal(size=(n, 201)) for n in lens]
    fbank = torch.zeros(3, 9, 80, dtype=D64)
    spec = torch.zeros(3, 9, 201, dtype=D64)
    for i, n in enumerate(lens):
        fbank[i, :n] = torch.as_tensor(fb[i])
        spec[i, :n] = torch.as_tensor(sp[i])
        # garbage in the padding must not leak
        fbank[i, n:] = 7.0
    h, out_len = model.encode(fbank, spec, torch.tensor(lens))
    for i, n in enumerate(lens):
        hi, li = model.encode(torch.as_tensor(fb[i])[None], torch.as_tensor(sp[i])[None],
                              torch.tensor([n]))
        assert int(li) == int(out_len[i]) == n // 2
        torch.testing.assert_close(h[i, : n // 2], hi[0], rtol=0, atol=1e-12)


def test_forward_is_deterministic():
    model = build_model(tiny_model_config(2), seed=3)
    x = torch.randn(1, 8, 80, dtype=D64)
    s = torch.randn(1, 8, 201, dtype=D64)
    a, _ = model.encode(x, s, torch.tensor([8]))
    b, _ = model.encode(x, s, torch.tensor([8]))
    assert torch.equal(a, b)


# -- attention ----------------------------------------------------------------------


def decoder_and_input(variant="location", T=5, seed=0):
    cfg = tiny_model_config(3, variant)
    dec = seeded(AttentionDecoder(cfg).double(), seed)
    h = torch.randn(2, T, cfg.encoder_dim, dtype=D64, generator=torch.Generator().manual_seed(seed))
    return dec, h


def test_single_frame_attention_is_one():
    for variant in ("content", "location"):
        dec, h = decoder_and_input(variant, T=1)
        state = dec.init_state(h, torch.tensor([1, 1]))
        state, logits = attention_step(state, h, [0, 3], dec)
        assert torch.all(state.weights == 1.0)
        assert logits.shape == (2, 4)


def test_equal_scores_give_uniform_weights():
    dec, h = decoder_and_input("content")
    with torch.no_grad():
        dec.score.weight.zero_()
    state, _ = attention_step(dec.init_state(h, torch.tensor([5, 5])), h, [1, 2], dec)
    torch.testing.assert_close(state.weights, torch.full((2, 5), 0.2, dtype=D64), rtol=0, atol=1e-15)


def test_location_with_zero_kernel_equals_content():
    dec, h = decoder_and_input("location")
    with torch.no_grad():
        dec.loc_conv.weight.zero_()
    s0 = dec.init_state(h, torch.tensor([5, 5]))
    a_state, a = attention_step(s0, h, [1, 2], dec, variant="location")
    b_state, b = attention_step(s0, h, [1, 2], dec, variant="content")
    assert torch.equal(a, b) and torch.equal(a_state.weights, b_state.weights)


def test_attention_token_out_of_range():
    dec, h = decoder_and_input()
    with pytest.raises(ValueError, match="out of vocabulary"):
        attention_step(dec.init_state(h, torch.tensor([5, 5])), h, [0, 4], dec)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.integers(1, 6), st.sampled_from(["content", "location"]))
def test_attention_weights_stay_on_simplex(seed, steps, variant):
    dec, h = decoder_and_input(variant, seed=seed)
    lengths = torch.tensor([5, 3])
    state = dec.init_state(h, lengths)
    mask = length_mask(lengths, 5)
    for t in range(steps):
        state, _ = dec.step(state, h, dec.key(h), mask, torch.tensor([t % 4, (t + 1) % 4]))
        w = state.weights
        assert torch.all(w >= 0)
        assert torch.all(w[~mask] == 0)
        torch.testing.assert_close(w.sum(-1), torch.ones(2, dtype=D64), rtol=0, atol=1e-9)


# -- CTC head and parameters ----------------------------------------------------------


def test_ctc_head_normalized_and_uniform():
    lin = torch.nn.Linear(6, 4).double()
    rows = ctc_head(torch.randn(9, 6, dtype=D64), lin)
    assert rows.shape == (9, 4)
    torch.testing.assert_close(torch.logsumexp(rows, -1), torch.zeros(9, dtype=D64), rtol=0, atol=1e-9)
    with torch.no_grad():
        lin.weight.zero_()
        lin.bias.zero_()
    assert torch.allclose(ctc_head(torch.zeros(2, 6, dtype=D64), lin),
                          torch.full((2, 4), -math.log(4), dtype=D64), rtol=0, atol=1e-15)


def test_count_parameters_examples():
    assert count_parameters(torch.nn.Linear(1024, 256)) == 262_400
    assert count_parameters(torch.nn.Conv2d(1, 64, 3)) == 640
    with pytest.raises(KeyError):
        count_parameters(torch.nn.Linear(2, 2), "nonsense")


def test_desk_lspc_smaller_than_vgg():
    lspc = Lspc(LspcConfig())
    vgg = VggExtractor(VggConfig(projection_dim=1024))
    assert count_parameters(lspc) < count_parameters(vgg)


def test_vgg_model_rejects_spectrogram_stream():
    with pytest.raises(ConfigError, match="201"):
        ModelConfig(extractor="vgg").validate()


def test_reserved_attention_variant():
    with pytest.raises(ConfigError, match="reserved"):
        ModelConfig(attention_variant="location_lstm").validate()
    with pytest.raises(ConfigError, match="unknown"):
        ModelConfig(attention_variant="nope").validate()


def test_every_parameter_gets_a_gradient():
    from hcasr.training import utterance_loss

    model = build_model(tiny_model_config(3), seed=0)
    fb = torch.randn(2, 12, 80, dtype=D64)
    sp = torch.randn(2, 12, 201, dtype=D64)
    loss, *_ = utterance_loss(model, fb, sp, torch.tensor([12, 10]), [[1, 2, 3], [2, 2]])
    loss.backward()
    names = {n for n, p in model.named_parameters()}
    dead = sorted(n for n, p in model.named_parameters() if p.grad is None or not torch.any(p.grad != 0))
    assert len(names) == len(set(names))
    assert dead == []


def test_init_is_seeded():
    a = build_model(tiny_model_config(2), seed=4).state_dict()
    b = build_model(tiny_model_config(2), seed=4).state_dict()
    c = build_model(tiny_model_config(2), seed=5).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert any(not torch.equal(a[k], c[k]) for k in a)
