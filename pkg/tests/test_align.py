"""Summary-token compression, LoRA adapters, surrogate model, classify."""

import math

import numpy as np
import pytest

from dynssm import align as al
from dynssm import tensor as tt
from dynssm.errors import ConfigError, LengthError, ShapeError
from dynssm.rng import CounterRng
from dynssm.tensor import Tape, Tensor


def make_surrogate(seed=123, **kw):
    defaults = dict(d_k=32, heads=4, vocab=16, block_count=2, max_len=16,
                    rank=4, alpha=8.0, dropout_p=0.0)
    defaults.update(kw)
    return al.SurrogateModel.create(seed=seed, **defaults)


class TestCompressTokens:
    def test_uniform_override_is_mean_pool(self):
        rng = CounterRng(0)
        cp = al.CompressParams.create(rng, d_h=6, d_k=6, k_tokens=1)
        cp.proj_w.data = np.eye(6)
        cp.proj_b.data = np.zeros(6)
        s = CounterRng(1).normal((9, 6))
        z = al.compress_tokens(Tensor(s), cp, uniform_attention=True)
        assert np.allclose(z.z.data[0], s.mean(axis=0), atol=1e-12)

    def test_single_state_collapses_softmax(self):
        rng = CounterRng(2)
        cp = al.CompressParams.create(rng, d_h=5, d_k=4, k_tokens=3)
        s = CounterRng(3).normal((1, 5))
        z = al.compress_tokens(Tensor(s), cp).z.data
        expect = s[0] @ cp.proj_w.data.T + cp.proj_b.data
        for k in range(3):
            assert np.allclose(z[k], expect, atol=1e-12)

    def test_explicit_attention_oracle(self):
        rng = CounterRng(4)
        cp = al.CompressParams.create(rng, d_h=12, d_k=7, k_tokens=4)
        s = CounterRng(5).normal((11, 12))
        z = al.compress_tokens(Tensor(s), cp).z.data
        scores = cp.queries.data @ s.T / math.sqrt(12)
        e = np.exp(scores - scores.max(axis=1, keepdims=True))
        attn = e / e.sum(axis=1, keepdims=True)
        ref = (attn @ s) @ cp.proj_w.data.T + cp.proj_b.data
        assert np.max(np.abs(z - ref)) < 1e-12

    def test_output_shape_independent_of_t(self):
        cp = al.CompressParams.create(CounterRng(6), d_h=5, d_k=8, k_tokens=2)
        for T in (1, 4, 50):
            z = al.compress_tokens(Tensor(CounterRng(T).normal((T, 5))), cp)
            assert z.z.shape == (2, 8)

    def test_masked_padding_invariance(self):
        cp = al.CompressParams.create(CounterRng(7), d_h=5, d_k=4, k_tokens=2)
        s = CounterRng(8).normal((6, 5))
        base = al.compress_tokens(Tensor(s), cp).z.data
        padded = np.concatenate([s, CounterRng(9).normal((3, 5))], axis=0)
        mask = np.zeros((2, 9))
        mask[:, 6:] = -1e30
        out = al.compress_tokens(Tensor(padded), cp, score_mask=mask).z.data
        assert np.allclose(base, out, atol=1e-12)

    def test_empty_states_rejected(self):
        cp = al.CompressParams.create(CounterRng(10), d_h=5, d_k=4, k_tokens=2)
        with pytest.raises(ShapeError):
            al.compress_tokens(Tensor(np.zeros((0, 5))), cp)


class TestLoraAdapter:
    def test_fresh_adapter_is_zero_map(self):
        rng = CounterRng(0)
        ad = al.LoraAdapter.create(rng, d_in=6, d_out=5, rank=3, alpha=6.0)
        w = Tensor(rng.normal((5, 6)))
        x = Tensor(rng.normal((4, 6)))
        base = tt.linear(x, w).data
        adapted = al.lora_linear(x, w, ad).data
        assert np.array_equal(base, adapted)

    def test_hand_low_rank_product(self):
        ad = al.LoraAdapter(a=Tensor([[1.0, 0.0]]), b=Tensor([[1.0], [0.0]]),
                            rank=1, alpha=1.0)
        y = al.lora_linear(Tensor(np.array([[3.0, 7.0]])), Tensor(np.zeros((2, 2))), ad)
        assert np.array_equal(y.data, [[3.0, 0.0]])

    def test_alpha_scales_delta_linearly(self):
        rng = CounterRng(1)
        ad = al.LoraAdapter.create(rng, d_in=4, d_out=4, rank=2, alpha=2.0)
        ad.b.data = rng.normal((4, 2))
        w = Tensor(rng.normal((4, 4)))
        x = Tensor(rng.normal((3, 4)))
        base = tt.linear(x, w).data
        d1 = al.lora_linear(x, w, ad).data - base
        ad.alpha = 4.0
        d2 = al.lora_linear(x, w, ad).data - base
        assert np.allclose(d2, 2.0 * d1, atol=1e-12)

    def test_rank_bound_on_weight_delta(self):
        rng = CounterRng(2)
        ad = al.LoraAdapter.create(rng, d_in=16, d_out=16, rank=3, alpha=6.0)
        ad.b.data = rng.normal((16, 3))
        sv = np.linalg.svd(ad.delta(), compute_uv=False)
        assert np.all(sv[3:] < 1e-10 * sv[0])

    def test_rank_too_large_rejected(self):
        with pytest.raises(ConfigError):
            al.LoraAdapter.create(CounterRng(3), d_in=4, d_out=8, rank=5, alpha=1.0)

    def test_dropout_only_in_training(self):
        rng = CounterRng(4)
        ad = al.LoraAdapter.create(rng, d_in=6, d_out=6, rank=2, alpha=4.0, dropout_p=0.5)
        ad.b.data = rng.normal((6, 2))
        w = Tensor(rng.normal((6, 6)))
        x = Tensor(rng.normal((8, 6)))
        eval_1 = al.lora_linear(x, w, ad, training=False).data
        eval_2 = al.lora_linear(x, w, ad, training=False).data
        assert np.array_equal(eval_1, eval_2)
        train_out = al.lora_linear(x, w, ad, training=True, rng=CounterRng(5)).data
        assert not np.array_equal(eval_1, train_out)

    def test_training_dropout_requires_rng(self):
        ad = al.LoraAdapter.create(CounterRng(6), d_in=4, d_out=4, rank=2,
                                   alpha=4.0, dropout_p=0.3)
        with pytest.raises(ConfigError):
            al.lora_linear(Tensor(np.ones((2, 4))), Tensor(np.eye(4)), ad, training=True)


class TestSurrogate:
    def test_deterministic_forward(self):
        m = make_surrogate()
        z = al.BrainTokens(z=Tensor(CounterRng(1).normal((3, 32))))
        l1 = al.surrogate_forward(z, [1, 2, 3], m).data
        l2 = al.surrogate_forward(z, [1, 2, 3], m).data
        assert np.array_equal(l1, l2)

    def test_zero_init_adapters_do_not_change_outputs(self):
        m = make_surrogate()
        bare = make_surrogate()
        bare.adapters = {}
        z = al.BrainTokens(z=Tensor(CounterRng(2).normal((4, 32))))
        adapted = al.surrogate_forward(z, [1, 4, 2], m).data
        frozen = al.surrogate_forward(z, [1, 4, 2], bare).data
        assert np.max(np.abs(adapted - frozen)) <= 1e-15

    def test_brain_token_permutation_invariance(self):
        m = make_surrogate()
        z = CounterRng(3).normal((5, 32))
        base = al.surrogate_forward(al.BrainTokens(z=Tensor(z)), [1, 2], m).data
        perm = al.surrogate_forward(al.BrainTokens(z=Tensor(z[[3, 0, 4, 1, 2]])),
                                    [1, 2], m).data
        assert np.allclose(base, perm, atol=1e-12)

    def test_position_offsets_break_invariance_when_enabled(self):
        m = make_surrogate(k_tokens_for_pos=3)
        m.brain_pos.data = CounterRng(4).normal((3, 32))
        z = CounterRng(5).normal((3, 32))
        base = al.surrogate_forward(al.BrainTokens(z=Tensor(z)), [1, 2], m).data
        perm = al.surrogate_forward(al.BrainTokens(z=Tensor(z[[2, 0, 1]])), [1, 2], m).data
        assert not np.allclose(base, perm, atol=1e-9)

    def test_context_cap_enforced(self):
        m = make_surrogate(max_len=6)
        z = al.BrainTokens(z=Tensor(np.zeros((4, 32))))
        with pytest.raises(LengthError):
            al.surrogate_forward(z, [1, 2, 3], m)

    def test_prompt_ids_validated(self):
        m = make_surrogate()
        with pytest.raises(ShapeError):
            al.surrogate_forward(None, [99], m)
        with pytest.raises(ShapeError):
            al.surrogate_forward(None, [], m)

    def test_frozen_reproducible_across_instances(self):
        assert make_surrogate(seed=9).checksum() == make_surrogate(seed=9).checksum()
        assert make_surrogate(seed=9).checksum() != make_surrogate(seed=10).checksum()

    def test_gradients_reach_adapters_and_head_only(self):
        m = make_surrogate()
        z = Tensor(CounterRng(6).normal((2, 32)), requires_grad=True)
        with Tape() as tape:
            logits = al.surrogate_forward(al.BrainTokens(z=z), [1, 2], m, training=False)
            grads = tape.backward(tt.tsum(logits))
        assert m.head_w in grads
        assert any(ad.a in grads or ad.b in grads for ad in m.adapters.values())
        assert all(t not in grads for t in m.frozen.values())

    def test_prompt_only_forward(self):
        m = make_surrogate()
        logits = al.surrogate_forward(None, [1, 2, 3], m)
        assert logits.shape == (2,)


class TestClassify:
    def test_tie_goes_to_tc(self):
        assert al.classify(np.array([0.0, 0.0])) == ("TC", 0.5)

    def test_asd_confidence_58(self):
        label, conf = al.classify(np.array([math.log(58.0), math.log(42.0)]))
        assert label == "ASD"
        assert abs(conf - 0.58) < 1e-12

    def test_strong_tc(self):
        label, conf = al.classify(np.array([-5.0, 5.0]))
        assert label == "TC"
        assert abs(conf - 0.9999546021312976) < 1e-12

    def test_confidence_at_least_half(self):
        rng = CounterRng(7)
        for _ in range(50):
            _, conf = al.classify(rng.normal((2,)) * 3)
            assert 0.5 <= conf <= 1.0

    def test_bad_inputs(self):
        with pytest.raises(ShapeError):
            al.classify(np.zeros(3))
