import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from pkdprune import autodiff as ad
from pkdprune.arch import ModelConfig
from pkdprune.autodiff import ShapeError, Tensor
from pkdprune.distill import DistillConfig, kl_loss, layer_loss, total_loss
from pkdprune.lightweight import LightweightModule
from pkdprune.lora import LoraPair, LoraSet, apply, merge
from pkdprune.model import init_base

from gradcases import central_diff


def rand_pair(rng, n, m, r):
    return LoraPair(Tensor(rng.standard_normal((n, r))), Tensor(rng.standard_normal((r, m))))


def test_zero_b_is_identity():
    rng = np.random.default_rng(0)
    shapes = {(0, "wq"): (4, 6)}
    lora = LoraSet.init(shapes, 2, rng)
    w = Tensor(rng.standard_normal((4, 6)))
    x = Tensor(rng.standard_normal((3, 4)))
    np.testing.assert_array_equal(apply(w, lora.get(0, "wq"), x).data, (x @ w).data)
    np.testing.assert_array_equal(merge(w.data, lora.get(0, "wq")), w.data)


def test_init_statistics():
    rng = np.random.default_rng(0)
    lora = LoraSet.init({(0, "wu"): (400, 300)}, 8, rng)
    pair = lora.get(0, "wu")
    assert abs(pair.a.data.std() - 0.02) < 0.002
    assert not pair.b.data.any()


def test_zero_weight_rank_bound():
    rng = np.random.default_rng(1)
    pair = rand_pair(rng, 6, 5, 2)
    eff = merge(np.zeros((6, 5)), pair)
    assert np.linalg.matrix_rank(eff) <= 2


def test_dense_merge_oracle():
    rng = np.random.default_rng(2)
    w = rng.standard_normal((4, 4))
    pair = rand_pair(rng, 4, 4, 2)
    x = rng.standard_normal((8, 4))
    dense = w + pair.a.data @ pair.b.data
    np.testing.assert_allclose(apply(Tensor(w), pair, Tensor(x)).data, x @ dense, atol=1e-6)
    np.testing.assert_allclose(merge(w, pair) @ np.eye(4), dense, atol=1e-12)


def test_full_rank_merge():
    rng = np.random.default_rng(3)
    pair = rand_pair(rng, 5, 5, 5)
    assert np.linalg.matrix_rank(merge(np.zeros((5, 5)), pair)) == 5


def test_scale_multiplies_low_rank_path():
    rng = np.random.default_rng(4)
    w = rng.standard_normal((3, 3))
    pair = rand_pair(rng, 3, 3, 1)
    x = rng.standard_normal((2, 3))
    np.testing.assert_allclose(apply(Tensor(w), pair, Tensor(x), 0.5).data,
                               x @ merge(w, pair, 0.5), atol=1e-12)


def test_shape_mismatch_rejected():
    rng = np.random.default_rng(5)
    with pytest.raises(ShapeError):
        apply(Tensor(np.ones((4, 4))), rand_pair(rng, 3, 4, 1), Tensor(np.ones((2, 4))))
    with pytest.raises(ValueError):
        LoraSet.init({(0, "wq"): (2, 2)}, 3, rng)


def test_parameter_efficiency_default_config():
    cfg = ModelConfig()
    rng = np.random.default_rng(0)
    base = init_base(cfg, rng)
    module = LightweightModule.init(cfg, rng)
    assert module.num_params() < 0.02 * base.num_params()


def test_frozen_copy_is_independent():
    cfg = ModelConfig(n_layer=1, d_model=4, n_head=2, d_head=2, d_int=4)
    m = LightweightModule.init(cfg, np.random.default_rng(0))
    snap = m.frozen_copy()
    m.masks.logalpha_hid.data += 1.0
    assert not np.array_equal(snap.masks.logalpha_hid.data, m.masks.logalpha_hid.data)
    assert not any(p.requires_grad for p in snap.parameters())


# ------------------------------------------------------------------ distill


def test_kl_two_token_example():
    s = Tensor(np.log([[0.5, 0.5]]))
    t = Tensor(np.log([[0.9, 0.1]]))
    expected = 0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1)
    assert kl_loss(s, t).item() == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.5108, abs=1e-4)


def test_kl_identical_is_zero():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 7)))
    assert abs(kl_loss(x, x).item()) < 1e-12


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 3, 5), elements=st.floats(-10, 10)),
       arrays(np.float64, (2, 3, 5), elements=st.floats(-10, 10)),
       arrays(np.float64, (2, 3, 1), elements=st.floats(-10, 10)))
def test_kl_nonnegative_and_shift_invariant(s, t, shift):
    assert kl_loss(Tensor(s), Tensor(t)).item() >= -1e-12
    assert kl_loss(Tensor(s), Tensor(t), "teacher_student").item() >= -1e-12
    assert abs(kl_loss(Tensor(s), Tensor(s + shift)).item()) <= 1e-9


def test_kl_gradient_does_not_reach_teacher():
    s = Tensor(np.random.default_rng(0).standard_normal((2, 4)), requires_grad=True)
    t = Tensor(np.random.default_rng(1).standard_normal((2, 4)), requires_grad=True)
    before = t.data.copy()
    ad.backward(kl_loss(s, t), [s, t])
    assert not t.grad.any()
    np.testing.assert_array_equal(t.data, before)


def test_layer_loss_examples():
    assert layer_loss([Tensor([[1.0, 1.0]])], [Tensor([[0.0, 0.0]])]).item() == 1.0
    x = Tensor(np.ones((2, 3)))
    assert layer_loss([x, x], [x, x]).item() == 0.0
    with pytest.raises(ShapeError):
        layer_loss([x], [x, x])


def test_layer_loss_naive_oracle():
    rng = np.random.default_rng(6)
    hs = [rng.standard_normal((2, 3, 4)) for _ in range(3)]
    ht = [rng.standard_normal((2, 3, 4)) for _ in range(3)]
    naive = 0.0
    for a, b in zip(hs, ht):
        acc = 0.0
        for idx in np.ndindex(a.shape):
            acc += (a[idx] - b[idx]) ** 2
        naive += acc / a.size
    got = layer_loss([Tensor(a) for a in hs], [Tensor(b) for b in ht]).item()
    assert got == pytest.approx(naive, abs=1e-8)


def test_total_loss_examples():
    assert total_loss(Tensor(1.0), Tensor(2.0), Tensor(3.0), DistillConfig(0.5, 2.0)).item() == 8.0
    assert total_loss(Tensor(1.25), Tensor(2.0), Tensor(3.0), DistillConfig(0.0, 0.0)).item() == 1.25


def test_total_loss_gradient_is_sum_of_paths():
    rng = np.random.default_rng(7)
    x0 = rng.standard_normal(5)
    teacher = rng.standard_normal((1, 5))
    cfg = DistillConfig(0.3, 2.0)

    def parts(x):
        kl = kl_loss(ad.mul(x, 1.0).reshape(1, 5), Tensor(teacher))
        layer = layer_loss([ad.tanh(x)], [Tensor(np.zeros(5))])
        l0 = ad.square(ad.sigmoid(x).sum())
        return kl, layer, l0

    x = Tensor(x0.copy(), requires_grad=True)
    ad.backward(total_loss(*parts(x), cfg), [x])
    grads = []
    for k, w in enumerate((1.0, cfg.alpha1, cfg.alpha2)):
        xi = Tensor(x0.copy(), requires_grad=True)
        ad.backward(parts(xi)[k], [xi])
        grads.append(w * xi.grad)
    np.testing.assert_allclose(x.grad, sum(grads), rtol=1e-12)

    def f():
        with ad.no_grad():
            return total_loss(*parts(Tensor(arr)), cfg).item()
    arr = x0.copy()
    num = central_diff(f, arr)
    np.testing.assert_allclose(x.grad, num, rtol=1e-3, atol=1e-8)


def test_distill_config_validation():
    with pytest.raises(ValueError):
        DistillConfig(-1.0)
    with pytest.raises(ValueError):
        DistillConfig(kl_direction="sideways")
