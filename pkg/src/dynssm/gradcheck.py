"""Finite-difference verification sweep over every differentiable operation.

Each named check builds a deterministic scalar function of its parameters
and compares analytic gradients against central differences. Checks that
pass through ReLU select seeds whose pre-activations sit safely away from
the kink (a crossing within +/-eps would invalidate the numeric gradient,
not the analytic one).
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import align as al
from . import graph as gr
from . import ssm as sm
from . import tensor as tt
from .model import BrainSequenceClassifier, ModelConfig
from .rng import CounterRng
from .tensor import Tensor, finite_diff_check
from .training import cross_entropy


def _rand(seed: int, shape, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    u = CounterRng(seed).uniform(shape)
    return lo + (hi - lo) * u


def _away_from_zero(x: np.ndarray, margin: float = 0.15) -> np.ndarray:
    return np.where(x >= 0, x + margin, x - margin)


def _weighted_sum(t: Tensor, seed: int) -> Tensor:
    w = _rand(seed ^ 0x5EED, t.shape)
    return tt.tsum(tt.mul(t, Tensor(w)))


def _check_elementwise(op, seed: int, positive: bool = False, keep_off_kink: bool = False):
    raw = _rand(seed, (3, 4), 0.2 if positive else -1.0, 1.5)
    if keep_off_kink:
        raw = _away_from_zero(raw)
    p = Tensor(raw, requires_grad=True)
    return finite_diff_check(lambda ps: _weighted_sum(op(ps[0]), seed), [p])


def _check_binary(op, seed: int):
    a = Tensor(_rand(seed, (3, 4)), requires_grad=True)
    b = Tensor(_rand(seed + 1, (3, 4)), requires_grad=True)
    c = Tensor(_rand(seed + 2, (4,)), requires_grad=True)      # leading-batch case
    s = Tensor(_rand(seed + 3, ()), requires_grad=True)        # scalar case
    def fn(ps):
        full = op(op(ps[0], ps[1]), ps[2])
        return _weighted_sum(op(full, ps[3]), seed)
    return finite_diff_check(fn, [a, b, c, s])


def _check_matmul(seed: int):
    a = Tensor(_rand(seed, (4, 3)), requires_grad=True)
    b = Tensor(_rand(seed + 1, (3, 5)), requires_grad=True)
    return finite_diff_check(lambda ps: _weighted_sum(tt.matmul(ps[0], ps[1]), seed), [a, b])


def _check_matvec(seed: int):
    a = Tensor(_rand(seed, (4, 3)), requires_grad=True)
    v = Tensor(_rand(seed + 1, (3,)), requires_grad=True)
    return finite_diff_check(lambda ps: _weighted_sum(tt.matmul(ps[0], ps[1]), seed), [a, v])


def _check_bmm(seed: int):
    a = Tensor(_rand(seed, (2, 3, 4)), requires_grad=True)
    b = Tensor(_rand(seed + 1, (2, 4, 2)), requires_grad=True)
    return finite_diff_check(lambda ps: _weighted_sum(tt.bmm(ps[0], ps[1]), seed), [a, b])


def _check_bmv(seed: int):
    a = Tensor(_rand(seed, (3, 4, 5)), requires_grad=True)
    x = Tensor(_rand(seed + 1, (3, 5)), requires_grad=True)
    return finite_diff_check(lambda ps: _weighted_sum(tt.bmv(ps[0], ps[1]), seed), [a, x])


def _check_linear(seed: int):
    x = Tensor(_rand(seed, (2, 3, 4)), requires_grad=True)
    w = Tensor(_rand(seed + 1, (5, 4)), requires_grad=True)
    b = Tensor(_rand(seed + 2, (5,)), requires_grad=True)
    return finite_diff_check(lambda ps: _weighted_sum(tt.linear(*ps), seed), [x, w, b])


def _check_reductions(seed: int):
    p = Tensor(_rand(seed, (3, 4)), requires_grad=True)
    def fn(ps):
        return tt.tsum(ps[0].sum(axis=0) * Tensor(_rand(seed + 1, (4,)))) + \
               tt.tsum(ps[0].mean(axis=1) * Tensor(_rand(seed + 2, (3,)))) + \
               ps[0].mean()
    return finite_diff_check(fn, [p])


def _check_shape_ops(seed: int):
    p = Tensor(_rand(seed, (2, 3, 4)), requires_grad=True)
    def fn(ps):
        moved = ps[0].transpose((2, 0, 1)).reshape((4, 6))
        piece = moved[1:3]
        joined = tt.concat([piece, piece], axis=0)
        return _weighted_sum(joined, seed)
    return finite_diff_check(fn, [p])


def _check_softmax(seed: int, log_mode: bool = False):
    p = Tensor(_rand(seed, (3, 5), -2.0, 2.0), requires_grad=True)
    op = tt.log_softmax if log_mode else tt.softmax
    return finite_diff_check(lambda ps: _weighted_sum(op(ps[0], axis=-1), seed), [p])


def _check_layer_norm(seed: int):
    x = Tensor(_rand(seed, (3, 6)), requires_grad=True)
    g = Tensor(_rand(seed + 1, (6,), 0.5, 1.5), requires_grad=True)
    b = Tensor(_rand(seed + 2, (6,)), requires_grad=True)
    return finite_diff_check(lambda ps: _weighted_sum(tt.layer_norm(*ps), seed), [x, g, b])


def _check_embedding(seed: int):
    table = Tensor(_rand(seed, (7, 4)), requires_grad=True)
    ids = np.array([0, 3, 3, 6, 1])   # repeated row exercises accumulation
    return finite_diff_check(lambda ps: _weighted_sum(tt.embedding(ps[0], ids), seed),
                             [table])


def _check_conv(seed: int, shared: bool):
    T, C, G, c_out, K = 7, 6, 3, 2, 3
    x = Tensor(_rand(seed, (T, C)), requires_grad=True)
    w_groups = 1 if shared else G
    w = Tensor(_rand(seed + 1, (w_groups, c_out, C // G, K)), requires_grad=True)
    b = Tensor(_rand(seed + 2, (c_out,) if shared else (G * c_out,)), requires_grad=True)
    def fn(ps):
        return _weighted_sum(tt.grouped_conv1d(ps[0], K, ps[1], G, bias=ps[2]), seed)
    return finite_diff_check(fn, [x, w, b])


def _check_self_outer(seed: int):
    h2 = Tensor(_rand(seed, (4, 5)), requires_grad=True)
    h3 = Tensor(_rand(seed + 1, (2, 4, 5)), requires_grad=True)
    def fn(ps):
        return _weighted_sum(tt.scaled_self_outer(ps[0]), seed) + \
               _weighted_sum(tt.scaled_self_outer(ps[1]), seed + 1)
    return finite_diff_check(fn, [h2, h3])


def _check_scan(seed: int):
    a = Tensor(_rand(seed, (9, 4), 0.05, 0.95), requires_grad=True)
    b = Tensor(_rand(seed + 1, (9, 4)), requires_grad=True)
    return finite_diff_check(lambda ps: _weighted_sum(tt.selective_scan(*ps), seed), [a, b])


def _check_cross_entropy(seed: int):
    logits = Tensor(_rand(seed, (2,), -2.0, 2.0), requires_grad=True)
    label = int(CounterRng(seed).integers(0, 2))
    return finite_diff_check(lambda ps: cross_entropy(ps[0], label), [logits])


def _check_lora(seed: int):
    rng = CounterRng(seed)
    ad = al.LoraAdapter.create(rng, d_in=5, d_out=4, rank=2, alpha=4.0)
    ad.b.data = rng.normal((4, 2))   # move off the zero init so B has signal
    w = Tensor(rng.normal((4, 5)))
    x = Tensor(rng.normal((3, 5)), requires_grad=True)
    def fn(ps):
        return _weighted_sum(al.lora_linear(ps[0], w, ad), seed)
    return finite_diff_check(fn, [x, ad.a, ad.b])


def _check_compress(seed: int):
    rng = CounterRng(seed)
    cp = al.CompressParams.create(rng, d_h=6, d_k=5, k_tokens=3)
    states = Tensor(rng.normal((7, 6)), requires_grad=True)
    def fn(ps):
        return _weighted_sum(al.compress_tokens(ps[0], cp).z, seed)
    return finite_diff_check(fn, [states, cp.queries, cp.proj_w, cp.proj_b])


def _check_graph_filter(seed: int):
    rng = CounterRng(seed)
    g = Tensor(rng.normal((5, 5)), requires_grad=True)
    x = Tensor(rng.normal((5,)), requires_grad=True)
    def fn(ps):
        raw = gr.graph_filter(ps[0], ps[1], mode="raw")
        norm = gr.graph_filter(ps[0], ps[1], mode="row_normalized")
        return _weighted_sum(raw, seed) + _weighted_sum(norm, seed + 1)
    return finite_diff_check(fn, [g, x])


_MARGIN_TRIES = 6
_MARGIN = 2e-3


def _relu_margin_probe(run: Callable[[], None]) -> float:
    """Smallest |pre-activation| seen by relu during ``run``."""
    margins = [np.inf]
    original = tt.relu
    def probe(a):
        if a.data.size:
            margins.append(float(np.min(np.abs(a.data))))
        return original(a)
    tt.relu = probe
    try:
        run()
    finally:
        tt.relu = original
    return min(margins)


def _off_kink_seed(seed: int, run_once: Callable[[int], Callable[[], None]]) -> int:
    """First seed in a deterministic sequence with safe ReLU margins."""
    for k in range(_MARGIN_TRIES):
        candidate = seed + k * 10_007
        if _relu_margin_probe(run_once(candidate)) > _MARGIN:
            return candidate
    return seed + (_MARGIN_TRIES - 1) * 10_007


def _check_relu(seed: int):
    return _check_elementwise(tt.relu, seed, keep_off_kink=True)


def _check_encoder(seed: int):
    def build(s):
        rng = CounterRng(s)
        params = gr.NodeEncoderParams.create(rng, d_lat=8, conv_features=2,
                                             kernel_size=3, heads=4)
        x = Tensor(rng.normal((6, 4)), requires_grad=True)
        return params, x
    def runner(s):
        params, x = build(s)
        return lambda: gr.encode_nodes(x, params)
    s = _off_kink_seed(seed, runner)
    params, x = build(s)
    targets = [x, params.conv_w, params.conv_b, params.proj_w,
               params.attn["wq"], params.attn["wv"], params.attn["bo"]]
    def fn(ps):
        return _weighted_sum(gr.encode_nodes(x, params), s)
    return finite_diff_check(fn, targets)


def _check_ssm_forward(seed: int):
    rng = CounterRng(seed)
    params = sm.SsmParams.create(rng, d_in=4, d_h=5, block_count=2)
    x = Tensor(rng.normal((7, 4)), requires_grad=True)
    targets = [x, params.blocks[0].a, params.blocks[0].w_delta, params.blocks[0].w_b,
               params.blocks[0].w_mix, params.blocks[1].w_delta, params.w_out]
    def fn(ps):
        return _weighted_sum(sm.ssm_forward(x, params), seed)
    return finite_diff_check(fn, targets)


def _check_surrogate(seed: int):
    def build(s):
        m = al.SurrogateModel.create(seed=s, d_k=8, heads=4, vocab=8, block_count=1,
                                     max_len=8, rank=2, alpha=4.0, dropout_p=0.0)
        z = Tensor(CounterRng(s).normal((2, 8)), requires_grad=True)
        return m, z
    def runner(s):
        m, z = build(s)
        return lambda: al.surrogate_forward(al.BrainTokens(z=z), [1, 2, 3], m)
    s = _off_kink_seed(seed, runner)
    m, z = build(s)
    targets = [z, m.head_w, m.head_b]
    for ad in m.adapters.values():
        targets.extend([ad.a, ad.b])
    def fn(ps):
        out = al.surrogate_forward(al.BrainTokens(z=z), [1, 2, 3], m)
        return _weighted_sum(out, s)
    return finite_diff_check(fn, targets)


def _micro_model(seed: int) -> tuple[BrainSequenceClassifier, np.ndarray]:
    cfg = ModelConfig(n_rois=4, conv_features=2, d_lat=8, encoder_heads=4,
                      d_h=4, ssm_blocks=2, k_tokens=2, d_k=8, surrogate_blocks=1,
                      surrogate_heads=4, vocab=8, prompt_len=3, context_cap=8,
                      lora_rank=2, lora_alpha=4.0, lora_dropout=0.0,
                      param_seed=seed, frozen_seed=seed + 1)
    model = BrainSequenceClassifier(cfg)
    values = CounterRng(seed ^ 0xE2E).normal((8, 4))
    return model, values


def _check_end_to_end(seed: int):
    def runner(s):
        model, values = _micro_model(s)
        return lambda: model.forward(values)
    s = _off_kink_seed(seed, runner)
    model, values = _micro_model(s)
    named = model.named_trainable()
    targets = list(named.values())
    label = int(CounterRng(s).integers(0, 2))
    def fn(ps):
        return cross_entropy(model.forward(values), label)
    return finite_diff_check(fn, targets)


CHECKS: dict[str, Callable[[int], float]] = {
    "add": lambda s: _check_binary(tt.add, s),
    "sub": lambda s: _check_binary(tt.sub, s),
    "mul": lambda s: _check_binary(tt.mul, s),
    "neg": lambda s: _check_elementwise(tt.neg, s),
    "relu": _check_relu,
    "exp": lambda s: _check_elementwise(tt.exp, s),
    "log": lambda s: _check_elementwise(tt.log, s, positive=True),
    "softplus": lambda s: _check_elementwise(tt.softplus, s),
    "sigmoid": lambda s: _check_elementwise(tt.sigmoid, s),
    "tanh": lambda s: _check_elementwise(tt.tanh, s),
    "sum_mean": _check_reductions,
    "shape_ops": _check_shape_ops,
    "matmul": _check_matmul,
    "matvec": _check_matvec,
    "bmm": _check_bmm,
    "bmv": _check_bmv,
    "linear": _check_linear,
    "softmax": lambda s: _check_softmax(s),
    "log_softmax": lambda s: _check_softmax(s, log_mode=True),
    "layer_norm": _check_layer_norm,
    "embedding": _check_embedding,
    "grouped_conv1d": lambda s: _check_conv(s, shared=False),
    "grouped_conv1d_shared": lambda s: _check_conv(s, shared=True),
    "scaled_self_outer": _check_self_outer,
    "selective_scan": _check_scan,
    "cross_entropy": _check_cross_entropy,
    "lora_linear": _check_lora,
    "compress_tokens": _check_compress,
    "graph_filter": _check_graph_filter,
    "node_encoder": _check_encoder,
    "ssm_forward": _check_ssm_forward,
    "surrogate_forward": _check_surrogate,
    "end_to_end_loss": _check_end_to_end,
}


def run_gradcheck(seeds: int = 20, base_seed: int = 0,
                  only: list[str] | None = None) -> dict[str, float]:
    """Max relative finite-difference error per check over ``seeds`` seeds."""
    names = only if only else list(CHECKS)
    results = {}
    for name in names:
        check = CHECKS[name]
        worst = 0.0
        for k in range(seeds):
            worst = max(worst, check(base_seed + 1009 * k + 17))
        results[name] = worst
    return results
