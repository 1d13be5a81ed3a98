import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from depthcomp.autograd import ShapeError, Tensor
from depthcomp.autograd.gradcheck import check_gradients
from depthcomp.geometry import PoseSE3, inverse_warp
from depthcomp.losses import (LossWeights, ScaleSet, combine, depth_loss, loss_components, photometric_loss,
                              self_supervised_loss, smoothness_loss, supervised_loss)
from depthcomp.synthetic import fronto_parallel_scene


def _t(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def test_depth_loss_examples():
    pred = _t(np.full((1, 1, 4, 4), 3.0))
    assert depth_loss(pred, np.zeros((1, 1, 4, 4))).item() == 0.0
    d = np.zeros((1, 1, 4, 4))
    d[0, 0, 1, 2] = 5.0
    assert depth_loss(pred, d).item() == pytest.approx(4.0)
    d[0, 0, 1, 2] = 3.0
    assert depth_loss(pred, d).item() == 0.0
    with pytest.raises(ShapeError):
        depth_loss(pred, np.zeros((1, 1, 4, 5)))


def test_empty_depth_loss_keeps_graph():
    pred = _t(np.ones((1, 1, 3, 3)), grad=True)
    loss = depth_loss(pred, np.zeros((1, 1, 3, 3)))
    loss.backward()
    assert loss.item() == 0.0 and np.all(pred.grad == 0)


def test_supervised_loss_examples():
    ann = np.zeros((1, 1, 3, 3))
    ann[0, 0, 0, 0] = 4.0
    pred = _t(np.full((1, 1, 3, 3), 2.0))
    assert supervised_loss(pred, ann, "l1").item() == pytest.approx(2.0)
    assert supervised_loss(pred, ann).item() == pytest.approx(4.0)
    assert supervised_loss(_t(ann), ann).item() == 0.0
    assert supervised_loss(pred, np.zeros_like(ann), "l1").item() == 0.0
    with pytest.raises(ValueError):
        supervised_loss(pred, ann, "huber")


def test_photometric_examples():
    rng = np.random.default_rng(0)
    img = rng.random((1, 3, 8, 8))
    none = np.zeros((1, 1, 8, 8))
    valid = np.ones((1, 1, 8, 8))
    assert photometric_loss(_t(img), img, none, valid).item() == 0.0
    other = rng.random((1, 3, 8, 8))
    assert photometric_loss(_t(img), other, np.ones((1, 1, 8, 8)), valid).item() == 0.0
    # one masked pixel with |diff| = 0.5 on a single channel
    d = np.ones((1, 1, 4, 4))
    d[0, 0, 2, 1] = 0.0
    w = np.zeros((1, 1, 4, 4))
    w[0, 0, 2, 1] = 0.5
    assert photometric_loss(_t(w), np.zeros_like(w), d, np.ones_like(w), (1,)).item() == pytest.approx(0.5)


def test_photometric_shape_errors():
    with pytest.raises(ShapeError):
        photometric_loss(_t(np.zeros((1, 1, 4, 4))), np.zeros((1, 1, 4, 5)), np.zeros((1, 1, 4, 4)), None)
    with pytest.raises(ShapeError):
        photometric_loss(_t(np.zeros((1, 1, 4, 4))), np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 4, 5)), None)


def test_mask_excludes_measured_pixels_exactly():
    rng = np.random.default_rng(1)
    warped = rng.random((1, 3, 16, 16))
    target = rng.random((1, 3, 16, 16))
    d = np.where(rng.random((1, 1, 16, 16)) < 0.2, 5.0, 0.0)
    valid = np.ones((1, 1, 16, 16))
    base = photometric_loss(_t(warped), target, d, valid).item()
    ys, xs = np.nonzero(d[0, 0])
    bumped = warped.copy()
    bumped[0, :, ys, xs] += 10.0
    assert photometric_loss(_t(bumped), target, d, valid).item() == base
    w = _t(warped, grad=True)
    photometric_loss(w, target, d, valid).backward()
    assert np.all(w.grad[0, :, ys, xs] == 0)


def test_invalid_warp_pixels_excluded():
    warped = np.ones((1, 1, 4, 4))
    valid = np.ones((1, 1, 4, 4))
    valid[0, 0, 0, 0] = 0
    warped[0, 0, 0, 0] = 100.0
    assert photometric_loss(_t(warped), np.ones_like(warped), np.zeros_like(warped), valid, (1,)).item() == 0.0


@pytest.mark.parametrize("s", [2, 4, 8])
def test_scale_weight_is_one_over_s(s):
    rng = np.random.default_rng(s)
    warped, target = rng.random((1, 1, 16, 16)), rng.random((1, 1, 16, 16))
    none = np.zeros((1, 1, 16, 16))
    unweighted = (warped - target).reshape(1, 1, 16 // s, s, 16 // s, s).mean(axis=(3, 5))  # pool, then L1
    got = photometric_loss(_t(warped), target, none, np.ones_like(none), (s,)).item()
    assert got * s == pytest.approx(np.abs(unweighted).mean(), rel=1e-12)


def test_multiscale_sum():
    rng = np.random.default_rng(3)
    warped, target = rng.random((1, 2, 16, 16)), rng.random((1, 2, 16, 16))
    args = (np.zeros((1, 1, 16, 16)), np.ones((1, 1, 16, 16)))
    parts = sum(photometric_loss(_t(warped), target, *args, (s,)).item() for s in (1, 2, 4, 8))
    assert photometric_loss(_t(warped), target, *args).item() == pytest.approx(parts, rel=1e-12)


def test_coarse_scale_gradient_points_to_true_depth():
    scene = fronto_parallel_scene(h=64, w=128)
    focal_baseline = scene.K.fx * abs(scene.pose.translation[0])
    true_shift = focal_baseline / scene.depth1[0, 0]
    none = np.zeros((1, 1, 64, 128))
    for offset in (6.0, -6.0):
        z = focal_baseline / (true_shift + offset)
        depth = _t(np.full((1, 1, 64, 128), z), grad=True)
        warped, valid = inverse_warp(_t(scene.image2[None]), depth, scene.K, scene.pose)
        photometric_loss(warped, scene.image1[None], none, valid, (8,)).backward()
        g = depth.grad.sum()
        assert g != 0 and np.sign(g) == -np.sign(offset)  # too near -> push depth out


def test_smoothness_examples():
    assert smoothness_loss(_t(np.full((1, 1, 5, 6), 4.2))).item() == 0.0
    v, u = np.mgrid[0:5, 0:7].astype(float)
    assert smoothness_loss(_t((0.3 * u - 1.2 * v + 2.0)[None, None])).item() == pytest.approx(0.0, abs=1e-12)
    quad = np.tile((np.arange(7.0) ** 2)[None, :], (5, 1))
    assert smoothness_loss(_t(quad[None, None])).item() == pytest.approx(2.0)
    with pytest.raises(ShapeError):
        smoothness_loss(_t(np.zeros((1, 1, 2, 5))))


def test_combination_examples():
    comps = {"depth": _t(4.0), "photo": _t(0.5), "smooth": _t(2.0)}
    assert combine(comps, LossWeights(0.1, 0.1)).item() == pytest.approx(4.25)
    rng = np.random.default_rng(4)
    pred = _t(rng.uniform(1, 5, (1, 1, 8, 8)))
    d = np.where(rng.random((1, 1, 8, 8)) < 0.3, 3.0, 0.0)
    img = rng.random((1, 1, 8, 8))
    ss = self_supervised_loss(pred, d, _t(rng.random((1, 1, 8, 8))), img, np.ones_like(d), LossWeights(0, 0))
    assert ss.item() == depth_loss(pred, d).item()
    with pytest.raises(ValueError):
        LossWeights(-0.1, 0.1)


def test_pose_failure_path_zero_photometric():
    rng = np.random.default_rng(5)
    rgb = rng.random((1, 3, 8, 8))
    pred = _t(rng.uniform(2, 9, (1, 1, 8, 8)), grad=True)
    warped, valid = inverse_warp(_t(rgb), pred, fronto_parallel_scene().K, PoseSE3.identity())
    comps = loss_components(pred, np.zeros((1, 1, 8, 8)), warped, rgb, valid)
    assert comps["photo"].item() == 0.0
    assert loss_components(pred, np.zeros((1, 1, 8, 8)), None, rgb, None)["photo"].item() == 0.0


def test_scaleset_validation():
    assert ScaleSet().scales == (1, 2, 4, 8)
    for bad in ((), (2, 4), (1, 1), (4, 1), (1, 0)):
        with pytest.raises(ValueError):
            ScaleSet(bad)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), density=st.floats(0.0, 1.0))
def test_losses_nonnegative(seed, density):
    rng = np.random.default_rng(seed)
    pred = _t(rng.normal(3, 2, (1, 1, 8, 8)))
    d = np.where(rng.random((1, 1, 8, 8)) < density, rng.uniform(1, 5, (1, 1, 8, 8)), 0.0)
    assert depth_loss(pred, d).item() >= 0
    assert smoothness_loss(pred).item() >= 0
    assert photometric_loss(_t(rng.random((1, 3, 8, 8))), rng.random((1, 3, 8, 8)), d, None).item() >= 0


def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(6)
    d = np.where(rng.random((1, 1, 8, 8)) < 0.3, rng.uniform(1, 5, (1, 1, 8, 8)), 0.0)
    target = rng.random((1, 2, 8, 8))
    pred = _t(rng.uniform(1, 5, (1, 1, 8, 8)), grad=True)
    warped = _t(rng.random((1, 2, 8, 8)), grad=True)
    for fn, ts in ((lambda: depth_loss(pred, d), [pred]),
                   (lambda: supervised_loss(pred, d, "l1"), [pred]),
                   (lambda: smoothness_loss(pred), [pred]),
                   (lambda: photometric_loss(warped, target, d, None), [warped])):
        assert check_gradients(fn, ts, step=1e-6) < 1e-3
