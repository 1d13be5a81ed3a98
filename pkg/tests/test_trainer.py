import os

import numpy as np
import pytest

from depthcomp.autograd import Tensor
from depthcomp.data import Dataset, FrameSample
from depthcomp.geometry import inverse_warp
from depthcomp.losses import combine, loss_components
from depthcomp.network import NetworkConfig, build, forward
from depthcomp.optim import adam_update
from depthcomp.pose import PoseResult
from depthcomp.synthetic import sparse_from_dense, two_view_scene, write_synthetic_dataset
from depthcomp.trainer import (PoseCache, TrainConfig, latest_checkpoint, make_optimizer, read_loss_csv, train,
                               train_step_self_supervised, train_step_supervised)

NET = NetworkConfig(modality="rgb+d", encoder_decoder_pairs=3, filter_multiplier="4x", resnet_depth=18)


@pytest.fixture(scope="module")
def pair():
    scene = two_view_scene(h=32, w=64, focal=60.0, channels=3)
    d1 = sparse_from_dense(scene.depth1, 0.1, seed=0)
    s1 = FrameSample(scene.image1[None].astype(np.float32), d1[None, None].astype(np.float32),
                     scene.depth1[None, None].astype(np.float32), scene.K, "seq", 0)
    s2 = FrameSample(scene.image2[None].astype(np.float32), np.zeros_like(s1.d_sparse), None, scene.K, "seq", 1)
    return s1, s2, scene.pose


def _cfg(**kw):
    return TrainConfig(network=NET, lr0=1e-3, **kw)


def _params(state):
    return [p.data.copy() for p in state.parameters()]


def _failed(a, b):
    return PoseResult(None, 3, True)


def test_failure_path_zero_photometric_and_update(pair):
    s1, s2, _ = pair
    state = build(NET, 0)
    before = _params(state)
    rep = train_step_self_supervised(state, s1, s2, make_optimizer(state), _cfg(), 1e-3, _failed)
    assert rep.photo == 0.0 and rep.pose_ok == [False] and rep.inliers == [3]
    assert rep.depth > 0 and rep.updated
    assert any(not np.array_equal(a, p.data) for a, p in zip(before, state.parameters()))


def test_missing_neighbor_uses_fallback(pair):
    s1, _, _ = pair
    state = build(NET, 0)
    rep = train_step_self_supervised(state, s1, None, make_optimizer(state), _cfg(), 1e-3)
    assert rep.photo == 0.0 and rep.pose_ok == [False]


def test_successful_pose_gives_photometric_term(pair):
    s1, s2, pose = pair
    state = build(NET, 0)
    rep = train_step_self_supervised(state, s1, s2, make_optimizer(state), _cfg(), 1e-3,
                                     lambda a, b: PoseResult(pose, 40, False))
    assert rep.photo > 0 and rep.pose_ok == [True]


def test_zero_betas_match_supervised_update(pair):
    s1, s2, pose = pair
    a, b = build(NET, 0), build(NET, 0)
    sup_sample = FrameSample(s1.rgb, s1.d_sparse, s1.d_sparse, s1.intrinsics, "seq", 0)
    train_step_supervised(a, [sup_sample], make_optimizer(a), _cfg(mode="supervised"), 1e-3)
    train_step_self_supervised(b, s1, s2, make_optimizer(b), _cfg(beta1=0.0, beta2=0.0), 1e-3,
                               lambda x, y: PoseResult(pose, 40, False))
    for pa, pb in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(pa.data, pb.data)


def test_photometric_only_drops_depth_term(pair):
    s1, s2, pose = pair
    cfg = _cfg(mode="photometric_only")
    a = build(NET, 0)
    train_step_self_supervised(a, s1, s2, make_optimizer(a), cfg, 1e-3, lambda x, y: PoseResult(pose, 40, False))

    b = build(NET, 0)
    opt = make_optimizer(b)
    pred = forward(b, s1.rgb, s1.d_sparse, training=True)
    warped, valid = inverse_warp(Tensor(s2.rgb), pred, [s1.intrinsics], [pose])
    comps = loss_components(pred, s1.d_sparse, warped, s1.rgb, valid, cfg.scales)
    b.zero_grad()
    combine(comps, cfg.weights, depth_weight=0.0).backward()
    adam_update(b.parameters(), opt, 1e-3)
    for pa, pb in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(pa.data, pb.data)


def test_non_finite_step_is_skipped(pair):
    s1, _, _ = pair
    bad = FrameSample(np.full_like(s1.rgb, np.nan), s1.d_sparse, s1.annotation, s1.intrinsics, "seq", 0)
    state = build(NET, 0)
    opt = make_optimizer(state)
    before = _params(state)
    rep = train_step_supervised(state, [bad], opt, _cfg(mode="supervised"), 1e-3)
    assert not rep.updated and opt.skipped_steps == 1
    for a, p in zip(before, state.parameters()):
        np.testing.assert_array_equal(a, p.data)
        assert np.all(np.isfinite(p.data))


def test_supervised_needs_annotation(pair):
    _, s2, _ = pair
    state = build(NET, 0)
    with pytest.raises(ValueError):
        train_step_supervised(state, [s2], make_optimizer(state), _cfg(mode="supervised"), 1e-3)


def test_mismatched_batch_rejected(pair):
    s1, s2, _ = pair
    state = build(NET, 0)
    with pytest.raises(ValueError):
        train_step_self_supervised(state, [s1, s1], [s2], make_optimizer(state), _cfg(), 1e-3)


def test_train_config_defaults_and_validation():
    assert TrainConfig().batch_size == 8
    assert TrainConfig(network=NetworkConfig(modality="d")).batch_size == 16
    assert TrainConfig().lr0 == 1e-5 and TrainConfig().lr_halve_every == 5 and TrainConfig().epochs == 12
    for bad in (dict(mode="unsupervised"), dict(batch_size=0), dict(lr0=0.0), dict(photo_target="rgb3"),
                dict(scales=(2, 4))):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_pose_cache_memoises(pair):
    s1, s2, _ = pair
    calls = []

    def provider(a, b):
        calls.append(1)
        return _failed(a, b)

    cache = PoseCache(provider)
    cache(s1, s2)
    cache(s1, s2)
    cache(s2, s1)
    assert len(calls) == 2


@pytest.fixture(scope="module")
def synth_manifest(tmp_path_factory):
    return write_synthetic_dataset(str(tmp_path_factory.mktemp("synth")), n_sequences=2, n_frames=3, h=32, w=64,
                                   focal=60.0)


def test_train_writes_artifacts_and_is_deterministic(tmp_path, synth_manifest):
    cfg = _cfg(epochs=2, batch_size=2, train_manifest=synth_manifest, seed=3)
    train(cfg, str(tmp_path / "a"))
    train(cfg, str(tmp_path / "b"))
    for epoch in ("epoch_000", "epoch_001"):
        da, db = tmp_path / "a" / "checkpoints" / epoch, tmp_path / "b" / "checkpoints" / epoch
        names = sorted(os.listdir(da))
        assert names == sorted(os.listdir(db)) and "config.txt" in names
        for n in names:
            assert (da / n).read_bytes() == (db / n).read_bytes()
    la, lb = (tmp_path / "a" / "losses.csv").read_text(), (tmp_path / "b" / "losses.csv").read_text()
    assert la == lb
    losses = read_loss_csv(str(tmp_path / "a" / "losses.csv"))
    assert len(losses["step"]) == 6 and np.all(np.isfinite(losses["total"]))
    assert latest_checkpoint(str(tmp_path / "a")).endswith("epoch_001")


def test_train_supervised_mode_runs(tmp_path, synth_manifest):
    ds = Dataset.from_manifest(synth_manifest)
    cfg = _cfg(mode="supervised", epochs=1, batch_size=3, steps_per_epoch=2)
    train(cfg, str(tmp_path), dataset=ds)
    assert len(read_loss_csv(str(tmp_path / "losses.csv"))["step"]) == 2


def test_train_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        train(_cfg(train_manifest=str(tmp_path / "nope.txt")), str(tmp_path))
