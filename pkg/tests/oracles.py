"""Independent reference implementations used as test oracles."""
from fractions import Fraction

import numpy as np


def survival_fraction(cfg, head, ints, hid):
    """Brute-force fraction of maskable weights that survive binary gates.

    Builds the per-weight survival pattern of every Q, K, V, O, up, gate and
    down matrix entry and counts it, with no use of the factored formula.
    """
    d, dh = cfg.d_model, cfg.d_head
    alive = 0
    total = 0
    for layer in range(cfg.n_layer):
        col_alive = np.repeat(head[layer].astype(bool), dh)  # per attention column
        qkv = hid.astype(bool)[:, None] & col_alive[None, :]  # [d, H*dh]
        o = col_alive[:, None] & hid.astype(bool)[None, :]
        up = hid.astype(bool)[:, None] & ints[layer].astype(bool)[None, :]
        down = ints[layer].astype(bool)[:, None] & hid.astype(bool)[None, :]
        for m in (qkv, qkv, qkv, o, up, up, down):
            alive += int(m.sum())
            total += m.size
    assert total == 4 * dh * cfg.n_layer * cfg.n_head * d + 3 * cfg.n_layer * cfg.d_int * d
    return Fraction(alive, total)


def random_binary(cfg, rng, p=None):
    p = rng.uniform(0.1, 0.9) if p is None else p
    head = rng.random((cfg.n_layer, cfg.n_head)) < p
    ints = rng.random((cfg.n_layer, cfg.d_int)) < p
    hid = rng.random(cfg.d_model) < p
    if not hid.any():
        hid[rng.integers(cfg.d_model)] = True
    return head, ints, hid


_SCALE = 10 ** 30


def _exact(x):
    """The decimal a float prints as, as an integer count of 1e-30 units."""
    f = Fraction(repr(float(x))) * _SCALE
    assert f.denominator == 1
    return f.numerator


def stage1_oracle(s, t, g, i):
    """Exhaustive range membership in exact arithmetic: the teacher index for student sparsity ``s``.

    Inputs are read as the decimals they print as, so ``0.13 + 0.10`` lands
    on the boundary 23/100 rather than a neighbouring binary fraction.
    Returns None when the intact model is responsible.
    """
    s, t, g, i = (_exact(x) for x in (s, t, g, i))
    if s < g + i:
        return None
    found = None
    for k in range(1, _SCALE // i + 1):
        lo = k * i + g
        if lo > s:
            break
        if lo <= s < lo + i:
            assert found is None
            found = k
    return found


def hard_concrete_mean(logalpha, beta, l, r, n, seed):
    """Monte-Carlo mean of the clamped stretched concrete, using the stdlib generator."""
    import math
    import random
    gen = random.Random(seed)
    acc = 0.0
    for _ in range(n):
        u = gen.random()
        while u == 0.0:
            u = gen.random()
        s = 1.0 / (1.0 + math.exp(-(math.log(u / (1 - u)) / beta + logalpha)))
        acc += min(1.0, max(0.0, s * (r - l) + l))
    return acc / n
