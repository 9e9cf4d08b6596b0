import numpy as np
import pytest

from oracles import histogram_mi, ncc_loss_loops, quantized_pair
from reflect_tta.autodiff import Tensor, precision
from reflect_tta.gradcheck import compare
from reflect_tta.similarity import (
    SimilarityConfig,
    apply_attention,
    l1_loss,
    mi_loss,
    mi_parzen,
    ncc_loss,
    parzen_density,
    reflective_loss,
    reflective_terms,
    window_stats,
)
from reflect_tta.errors import ShapeError

CFG = SimilarityConfig()


def rand(rng, shape, lo=0.0, hi=1.0):
    return rng.uniform(lo, hi, size=shape)


def test_config_defaults_and_window_count():
    assert (CFG.n, CFG.mi_bins, CFG.parzen_sigma, CFG.eps) == (9, 32, 1 / 32, 1e-5)
    assert CFG.window_count(18, 18) == 4
    assert CFG.window_count(64, 64) == 64
    with pytest.raises(ValueError):
        SimilarityConfig(n=1)


def test_ncc_self_is_zero():
    a = rand(np.random.default_rng(0), (27, 27), 0, 2)
    assert ncc_loss(a, a).item() < 1e-4


@pytest.mark.parametrize("c", [0.0, 1.0, 5.0])
def test_ncc_negated_is_two(c):
    a = rand(np.random.default_rng(1), (18, 18), 0, 2)
    assert ncc_loss(a, c - a).item() == pytest.approx(2.0, abs=1e-3)


def test_ncc_matches_loop_oracle():
    rng = np.random.default_rng(2)
    for _ in range(10):
        a, b = rand(rng, (18, 18)), rand(rng, (18, 18))
        assert abs(ncc_loss(a, b).item() - ncc_loss_loops(a, b)) < 1e-5


def test_ncc_pads_non_multiple_extents():
    rng = np.random.default_rng(3)
    a, b = rand(rng, (20, 13)), rand(rng, (20, 13))
    assert window_stats(a, b).cc.shape[-1] == CFG.window_count(20, 13)
    assert abs(ncc_loss(a, b).item() - ncc_loss_loops(a, b)) < 1e-5
    with pytest.raises(ShapeError):
        ncc_loss(rand(rng, (8, 20)), rand(rng, (8, 20)))
    with pytest.raises(ShapeError):
        ncc_loss(rand(rng, (18, 18)), rand(rng, (18, 19)))


def test_ncc_bounds():
    rng = np.random.default_rng(4)
    for _ in range(20):
        a, b = rand(rng, (27, 18)), rand(rng, (27, 18))
        s = window_stats(a, b)
        min_var = float(min((s.sigma_a.data ** 2).min(), (s.sigma_b.data ** 2).min()))
        delta = 10 * CFG.eps / (CFG.eps + min_var)
        assert -delta <= ncc_loss(a, b).item() <= 2 + delta


@pytest.mark.parametrize("alpha", [0.5, 2.0])
@pytest.mark.parametrize("beta", [0.0, 0.3])
def test_ncc_affine_invariance(alpha, beta):
    rng = np.random.default_rng(5)
    a, b = rand(rng, (18, 27)), rand(rng, (18, 27))
    assert abs(ncc_loss(alpha * a + beta, b).item() - ncc_loss(a, b).item()) < 1e-3
    assert abs(ncc_loss(a, alpha * b + beta).item() - ncc_loss(a, b).item()) < 1e-3


def test_symmetry():
    rng = np.random.default_rng(6)
    a, b = rand(rng, (32, 32)), rand(rng, (32, 32))
    assert ncc_loss(a, b).item() == pytest.approx(ncc_loss(b, a).item(), abs=1e-6)
    assert mi_parzen(a, b).item() == pytest.approx(mi_parzen(b, a).item(), abs=1e-6)


def test_constant_windows_have_finite_gradients():
    a = Tensor(np.full((1, 1, 18, 18), 0.4), requires_grad=True)
    b = Tensor(rand(np.random.default_rng(7), (1, 1, 18, 18)), requires_grad=True)
    heat = Tensor(np.zeros((1, 1, 18, 18)), requires_grad=True)
    for loss in (ncc_loss(a, b), mi_loss(a, b), reflective_loss(a, b, heat)):
        a.grad = b.grad = heat.grad = None
        loss.backward()
        for t in (a, b, heat):
            if t.grad is not None:
                assert np.all(np.isfinite(t.grad))


def test_mi_of_shuffled_image_is_small():
    rng = np.random.default_rng(8)
    a = rand(rng, (128, 128))
    shuffled = rng.permutation(a.ravel()).reshape(a.shape)
    assert mi_parzen(a, shuffled).item() < 0.1


def test_self_mi_dominates():
    rng = np.random.default_rng(9)
    for _ in range(20):
        a, b = rand(rng, (32, 32)), rand(rng, (32, 32))
        assert mi_parzen(a, a).item() >= mi_parzen(a, b).item()


def test_mi_close_to_histogram_oracle():
    rng = np.random.default_rng(10)
    for coupling in (0.0, 0.5, 1.0):
        a, b = quantized_pair(rng, coupling=coupling)
        est, exact = mi_parzen(a, b).item(), histogram_mi(a, b)
        assert abs(est - exact) <= max(0.15 * exact, 0.05)


def test_parzen_density_is_a_distribution():
    rng = np.random.default_rng(11)
    joint, pa, pb = parzen_density(rand(rng, (16, 16)), rand(rng, (16, 16)))
    assert joint.shape == (32, 32)
    assert joint.data.sum() == pytest.approx(1.0, abs=1e-5)
    assert np.all(joint.data >= 0)
    np.testing.assert_allclose(pa.data, joint.data.sum(axis=1), atol=1e-6)
    np.testing.assert_allclose(pb.data, joint.data.sum(axis=0), atol=1e-6)


def test_parzen_survives_out_of_range_values():
    a = np.full((8, 8), 3.0)
    assert np.isfinite(mi_parzen(a, a).item())


def test_mi_loss_is_negated_mi():
    rng = np.random.default_rng(12)
    a, b = rand(rng, (16, 16)), rand(rng, (16, 16))
    assert mi_loss(a, b).item() == -mi_parzen(a, b).item()
    shuffled = rng.permutation(a.ravel()).reshape(a.shape)
    assert mi_loss(a, a).item() < mi_loss(a, shuffled).item()


def test_mi_gradient_matches_finite_differences():
    rng = np.random.default_rng(13)
    with precision(np.float64):
        a = Tensor(rand(rng, (8, 8)), requires_grad=True)
        b = Tensor(np.clip(a.data + rng.normal(0, 0.1, (8, 8)), 0, 1), requires_grad=True)
        assert compare(lambda: mi_loss(a, b), [a, b], rng) < 1e-3


def test_attention_identity_and_doubling():
    img = rand(np.random.default_rng(14), (1, 1, 5, 5))
    assert np.array_equal(apply_attention(img, np.zeros_like(img)).data, Tensor(img).data)
    np.testing.assert_allclose(apply_attention(img, np.full_like(img, 255.0)).data, 2 * img, rtol=1e-6)


def test_attention_matches_elementwise_loop():
    rng = np.random.default_rng(15)
    img, heat = rand(rng, (6, 7)), rand(rng, (6, 7), 0, 255)
    out = apply_attention(img, heat).data[0, 0]
    for y in range(6):
        for x in range(7):
            assert out[y, x] == pytest.approx((1 + heat[y, x] / 255) * img[y, x], rel=1e-6)


def test_attention_gradient_reaches_both_inputs():
    img = Tensor(np.full((1, 1, 2, 2), 0.5), requires_grad=True)
    heat = Tensor(np.full((1, 1, 2, 2), 51.0), requires_grad=True)
    apply_attention(img, heat).sum().backward()
    np.testing.assert_allclose(img.grad, 1.2, rtol=1e-6)
    np.testing.assert_allclose(heat.grad, 0.5 / 255, rtol=1e-6)


def test_reflective_loss_identical_proxy():
    rng = np.random.default_rng(16)
    a = rand(rng, (1, 1, 18, 18))
    heat = rand(rng, (1, 1, 18, 18), 0, 255)
    terms = reflective_terms(a, a, heat)
    assert terms.ncc.item() < 1e-4
    a_hat = apply_attention(a, heat)
    assert terms.mi.item() == pytest.approx(mi_loss(a_hat, a_hat, value_range=(0, 2)).item())


def test_reflective_loss_is_sum_of_terms():
    rng = np.random.default_rng(17)
    a, b = rand(rng, (1, 1, 27, 27)), rand(rng, (1, 1, 27, 27))
    heat = rand(rng, (1, 1, 27, 27), 0, 255)
    a_hat, b_hat = apply_attention(a, heat), apply_attention(b, heat)
    separate = ncc_loss(a_hat, b_hat) + mi_loss(a_hat, b_hat, value_range=(0, 2))
    assert reflective_loss(a, b, heat).item() == separate.item()


def test_reflective_loss_gradient_wrt_proxy():
    rng = np.random.default_rng(18)
    with precision(np.float64):
        a = Tensor(rand(rng, (1, 1, 16, 16)))
        b = Tensor(np.clip(a.data * 0.8 + rng.normal(0, 0.1, a.shape) + 0.1, 0, 1), requires_grad=True)
        heat = Tensor(rand(rng, (1, 1, 16, 16), 0, 255))
        assert compare(lambda: reflective_loss(a, b, heat), [b], rng) < 1e-3


def test_l1_variant():
    rng = np.random.default_rng(19)
    a, b = rand(rng, (1, 1, 9, 9)), rand(rng, (1, 1, 9, 9))
    heat = np.zeros_like(a)
    assert reflective_loss(a, b, heat, kind="l1").item() == pytest.approx(np.abs(a - b).mean(), rel=1e-6)
    assert l1_loss(a, a).item() == 0.0
    with pytest.raises(ValueError):
        reflective_loss(a, b, heat, kind="ssim")
