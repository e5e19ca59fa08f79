"""Finite-difference cases shared by the unit suite and the acceptance run."""
import numpy as np

from pkdprune import autodiff as ad
from pkdprune.autodiff import Tensor
from pkdprune.l0 import LagrangianState, MaskSet, achieved_sparsity, lagrangian_loss, sample_masks
from pkdprune.arch import ModelConfig


def central_diff(f, x, eps=1e-6):
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + eps
        fp = f()
        flat[j] = orig - eps
        fm = f()
        flat[j] = orig
        gflat[j] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b):
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1.0)
    return float(np.max(np.abs(a - b)) / scale)


def check(build, arrays, eps=1e-6):
    """Max relative error between autodiff and central differences.

    ``build`` maps a list of leaf Tensors to a scalar Tensor.  Each leaf is
    contracted with a fixed random projection so every output element counts.
    """
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(leaves)
    ad.backward(out, leaves)
    worst = 0.0
    for leaf, arr in zip(leaves, arrays):
        def f():
            with ad.no_grad():
                return build([Tensor(a) for a in arrays]).item()
        num = central_diff(f, arr, eps)
        worst = max(worst, rel_err(leaf.grad, num))
    return worst


def _proj(rng, shape):
    return rng.standard_normal(shape)


def _scalarize(t, w):
    return ad.mul(t, Tensor(w)).sum()


def unary(fn, low=-2.0, high=2.0, avoid_kink=None):
    def make(rng):
        x = rng.uniform(low, high, size=(3, 4))
        if avoid_kink is not None:
            for k in avoid_kink:
                x[np.abs(x - k) < 1e-3] += 0.01
        w = _proj(rng, x.shape)
        return (lambda ls: _scalarize(fn(ls[0]), w)), [x]
    return make


def binary(fn, sa=(3, 4), sb=(3, 4)):
    def make(rng):
        a, b = rng.standard_normal(sa), rng.standard_normal(sb)
        out_shape = np.broadcast_shapes(sa, sb) if fn is not ad.matmul else (sa[0], sb[1])
        w = _proj(rng, out_shape)
        return (lambda ls: _scalarize(fn(ls[0], ls[1]), w)), [a, b]
    return make


def _rms(rng):
    x, g = rng.standard_normal((2, 3, 5)), rng.uniform(0.5, 1.5, 5)
    w = _proj(rng, x.shape)
    return (lambda ls: _scalarize(ad.rms_norm(ls[0], ls[1], 7), w)), [x, g]


def _embedding(rng):
    table = rng.standard_normal((6, 3))
    ids = rng.integers(0, 6, size=(2, 4))
    w = _proj(rng, (2, 4, 3))
    return (lambda ls: _scalarize(ad.embedding(ls[0], ids), w)), [table]


def _batched_matmul(rng):
    a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4, 5))
    w = _proj(rng, (2, 3, 5))
    return (lambda ls: _scalarize(ad.matmul(ls[0], ls[1]), w)), [a, b]


def _reductions(rng):
    x = rng.standard_normal((3, 4, 2))
    w1, w2 = _proj(rng, (3, 2)), _proj(rng, (3, 1, 2))

    def build(ls):
        s = _scalarize(ad.tsum(ls[0], axis=1), w1)
        m = _scalarize(ad.mean(ls[0], axis=1, keepdims=True), w2)
        return ad.add(ad.add(s, m), ls[0].mean())
    return build, [x]


def _shape_ops(rng):
    x = rng.standard_normal((2, 3, 4))
    w = _proj(rng, (4, 3))

    def build(ls):
        y = ls[0].transpose(0, 2, 1).reshape(8, 3)[2:6]
        return _scalarize(y, w)
    return build, [x]


def _hard_concrete(rng):
    la = rng.uniform(-1.5, 1.5, size=(7,))
    u = rng.uniform(0.05, 0.95, size=(7,))
    w = _proj(rng, (7,))
    m_like = dict(beta=2.0 / 3.0, l=-0.1, r=1.1)

    def build(ls):
        s = ad.sigmoid(ad.add(ls[0], np.log(u / (1 - u)) / m_like["beta"]))
        z = ad.clamp(ad.add(ad.mul(s, m_like["r"] - m_like["l"]), m_like["l"]), 0.0, 1.0)
        return _scalarize(z, w)

    # keep every gate away from the clamp kinks at 0 and 1
    for _ in range(100):
        s = 1 / (1 + np.exp(-(la + np.log(u / (1 - u)) / m_like["beta"])))
        st = s * 1.2 - 0.1
        bad = (np.abs(st) < 1e-3) | (np.abs(st - 1) < 1e-3)
        if not bad.any():
            break
        la[bad] += 0.05
    return build, [la]


MICRO = ModelConfig(n_layer=2, d_model=4, n_head=2, d_head=2, d_int=3, vocab_size=256, context_len=8)


def _sparsity_objective(rng):
    """Gates through the sparsity formula and the quadratic Lagrangian."""
    cfg = MICRO
    la = [rng.uniform(-1, 1, size=s) for s in ((2, 2), (2, 3), (4,))]
    lam = [np.array(rng.standard_normal()), np.array(rng.standard_normal())]
    u = tuple(rng.uniform(0.05, 0.95, size=s) for s in ((2, 2), (2, 3), (4,)))
    t = float(rng.uniform(0.2, 0.7))

    def build(ls):
        m = MaskSet(ls[0], ls[1], ls[2])
        z = sample_masks(m, u=u)
        lag = LagrangianState(ls[3], ls[4], t)
        return lagrangian_loss(achieved_sparsity(z, cfg), lag)

    # nudge logits away from clamp kinks
    for k in range(3):
        pre = 1 / (1 + np.exp(-(la[k] + np.log(u[k] / (1 - u[k])) / (2 / 3)))) * 1.2 - 0.1
        la[k][(np.abs(pre) < 1e-3) | (np.abs(pre - 1) < 1e-3)] += 0.05
    return build, la + lam


def _kl(rng):
    from pkdprune.distill import kl_loss
    s, t = rng.standard_normal((2, 3, 5)), rng.standard_normal((2, 3, 5))
    return (lambda ls: kl_loss(ls[0], Tensor(t))), [s]


def _kl_reverse(rng):
    from pkdprune.distill import kl_loss
    s, t = rng.standard_normal((2, 3, 5)), rng.standard_normal((2, 3, 5))
    return (lambda ls: kl_loss(ls[0], Tensor(t), "teacher_student")), [s]


def _layer(rng):
    from pkdprune.distill import layer_loss
    hs = [rng.standard_normal((2, 3, 4)) for _ in range(2)]
    ht = [Tensor(rng.standard_normal((2, 3, 4))) for _ in range(2)]
    return (lambda ls: layer_loss(ls, ht)), hs


def _model(rng):
    """Full masked forward with LoRA: gradient w.r.t. mask logits and LoRA factors."""
    from pkdprune.lightweight import LightweightModule
    from pkdprune.model import init_base, forward_params
    cfg = MICRO
    base = init_base(cfg, rng, std=0.3)
    mod = LightweightModule.init(cfg, rng, rank=1, init_logalpha=0.0)
    la = [p.data.copy() + rng.uniform(-0.5, 0.5, size=p.shape) for p in mod.masks.parameters()]
    lora_keys = sorted(mod.lora.pairs)[:2]
    lora_arrays = []
    for key in lora_keys:
        pair = mod.lora.pairs[key]
        lora_arrays += [pair.a.data.copy(), rng.standard_normal(pair.b.shape) * 0.1]
    tokens = rng.integers(0, 256, size=(2, 5))
    w = _proj(rng, (2, 5, 256))
    from pkdprune.l0 import deterministic_masks
    from pkdprune.lora import LoraPair, LoraSet

    def build(ls):
        m = MaskSet(ls[0], ls[1], ls[2])
        pairs = dict(mod.lora.pairs)
        for j, key in enumerate(lora_keys):
            pairs[key] = LoraPair(ls[3 + 2 * j], ls[4 + 2 * j])
        lora = LoraSet(pairs, mod.lora.rank, mod.lora.scale, mod.lora.targets)
        out = forward_params(cfg, base.tensors(), tokens, deterministic_masks(m), lora)
        return ad.add(_scalarize(out.logits, w), ad.mul(out.hidden_states[0], 0.1).sum())
    return build, la + lora_arrays


CASES = {
    "add": binary(ad.add, (3, 4), (4,)),
    "sub": binary(ad.sub, (3, 1), (3, 4)),
    "mul": binary(ad.mul, (3, 4), (3, 4)),
    "matmul": binary(ad.matmul, (3, 4), (4, 2)),
    "batched_matmul": _batched_matmul,
    "div_scalar": unary(lambda x: ad.div_scalar(x, 3.0)),
    "square": unary(ad.square),
    "sigmoid": unary(ad.sigmoid, -4, 4),
    "tanh": unary(ad.tanh),
    "silu": unary(ad.silu, -4, 4),
    "exp": unary(ad.exp),
    "log": unary(ad.log, 0.2, 3.0),
    "clamp": unary(lambda x: ad.clamp(x, -0.5, 0.7), avoid_kink=(-0.5, 0.7)),
    "softmax": unary(lambda x: ad.softmax(x, axis=-1), -3, 3),
    "log_softmax": unary(lambda x: ad.log_softmax(x, axis=0), -3, 3),
    "rms_norm": _rms,
    "embedding": _embedding,
    "reductions": _reductions,
    "shape_ops": _shape_ops,
    "hard_concrete": _hard_concrete,
    "sparsity_lagrangian": _sparsity_objective,
    "kl": _kl,
    "kl_reverse": _kl_reverse,
    "layer_loss": _layer,
    "masked_lora_forward": _model,
}


def worst_error(name, instances, seed=0):
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    worst = 0.0
    for _ in range(instances):
        build, arrays = CASES[name](rng)
        worst = max(worst, check(build, arrays))
    return worst
