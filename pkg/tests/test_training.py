import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from echoqa.dataio import load_clips
from echoqa.model import InputSpec, build_model, checkpoint_bytes, default_stream_configs
from echoqa.synth import SynthConfig, generate_dataset
from echoqa.tensor import SeededRng
from echoqa.training import (
    AugmentationSpec, OptimizerState, TrainConfig, TrainingDiverged, apply_transform, augment,
    augment_params, batch_schedule, cross_validate, fold_assignment, mae_grad, mae_loss,
    recalibrate_batchnorm, sgd_step, train,
)

SMALL = InputSpec(frames=2, channels=1, height=32, width=32)


def small_model(seed=0):
    return build_model(SMALL, default_stream_configs(lstm_hidden=8, dense_plan=(8, 4)), SeededRng(seed))


def small_data(n, seed=0):
    r = np.random.default_rng(seed)
    return r.random((n,) + SMALL.clip_shape).astype(np.float32), r.random((n, 4))


def test_mae_examples():
    assert mae_loss([[0.3, 0.1, 0.5, 0.9]], [[0.3, 0.1, 0.5, 0.9]]) == 0.0
    assert mae_loss(np.ones((5, 4)), np.zeros((5, 4))) == 1.0
    assert mae_loss([[0.2, 0.4, 0.6, 0.8]], [[0.0, 0.5, 0.5, 1.0]]) == pytest.approx(0.15, abs=1e-15)
    with pytest.raises(ValueError):
        mae_loss(np.zeros((0, 4)), np.zeros((0, 4)))
    with pytest.raises(ValueError):
        mae_loss(np.zeros((2, 4)), np.zeros((3, 4)))


def test_mae_grad_matches_differences():
    p = np.array([[0.2, 0.4, 0.6, 0.8]])
    t = np.array([[0.0, 0.5, 0.5, 1.0]])
    g = mae_grad(p, t, np.float64)
    for j in range(4):
        d = np.zeros_like(p)
        d[0, j] = 1e-6
        num = (mae_loss(p + d, t) - mae_loss(p - d, t)) / 2e-6
        assert g[0, j] == pytest.approx(num, rel=1e-6)


def test_sgd_examples():
    w = {"w": np.array([1.0])}
    sgd_step(w, {"w": np.array([1.0])}, OptimizerState(momentum=0.0), 0)
    assert w["w"][0] == pytest.approx(0.998, abs=1e-15)
    z = {"w": np.array([0.7, -0.2])}
    sgd_step(z, {"w": np.zeros(2)}, OptimizerState(), 0)
    assert z["w"].tolist() == [0.7, -0.2]
    s = OptimizerState()
    assert s.lr_at(23) == 0.002 and s.lr_at(24) == pytest.approx(0.0002, rel=1e-12)
    with pytest.raises(ValueError):
        sgd_step(z, {"w": np.zeros(3)}, s, 0)
    with pytest.raises(ValueError):
        sgd_step(z, {"v": np.zeros(2)}, s, 0)
    with pytest.raises(ValueError):
        OptimizerState(momentum=1.0)


def test_momentum_accumulates():
    w = {"w": np.array([0.0])}
    s = OptimizerState(learning_rate=0.1, momentum=0.5)
    for _ in range(2):
        sgd_step(w, {"w": np.array([1.0])}, s, 0)
    # v1 = -0.1, v2 = 0.5 * -0.1 - 0.1
    assert w["w"][0] == pytest.approx(-0.1 - 0.15, abs=1e-15)


@given(st.integers(0, 2**31), st.floats(1e-4, 0.1))
def test_zero_momentum_is_plain_gradient_descent(seed, lr):
    r = np.random.default_rng(seed)
    p = {"a": r.standard_normal((3, 2)).astype(np.float32), "b": r.standard_normal(4).astype(np.float32)}
    ref = {k: v.copy() for k, v in p.items()}
    s = OptimizerState(learning_rate=lr, momentum=0.0)
    for step in range(3):
        g = {k: r.standard_normal(v.shape).astype(np.float32) for k, v in p.items()}
        sgd_step(p, g, s, step)
        for k in ref:
            ref[k] = ref[k] - np.multiply(g[k], lr, dtype=np.float32)
    for k in p:
        assert p[k].tobytes() == ref[k].tobytes()


def test_augment_identity():
    clip = np.random.default_rng(0).random((3, 1, 16, 16)).astype(np.float32)
    out = augment(clip, AugmentationSpec(0.0, 0.0), SeededRng(1))
    assert out.tobytes() == clip.tobytes()
    out = augment(clip, AugmentationSpec(translate=False, rotate=False), SeededRng(1))
    assert out.tobytes() == clip.tobytes()


def test_translation_rounds_to_whole_pixels():
    class Fixed:
        def uniform(self, lo, hi, size):
            return np.array([0.0, 1.0, 0.0])

    sy, sx, angle = augment_params(AugmentationSpec(0.05, 0.0), 64, 64, Fixed())
    assert (sy, sx, angle) == (0, 3, 0.0)
    clip = np.random.default_rng(1).random((2, 1, 64, 64)).astype(np.float32)
    out = apply_transform(clip, sy, sx, angle)
    np.testing.assert_array_equal(out[..., :, 3:], clip[..., :, :-3])
    assert not out[..., :, :3].any()


def test_zero_frame_stays_zero():
    clip = np.zeros((3, 1, 32, 32), np.float32)
    for k in range(5):
        out = augment(clip, AugmentationSpec(), SeededRng(k))
        assert out.shape == clip.shape and not out.any()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_augment_shape_dtype_and_frame_coherence(seed):
    frame = np.random.default_rng(seed).random((1, 24, 24)).astype(np.float32)
    clip = np.stack([frame, frame, frame])
    out = augment(clip, AugmentationSpec(), SeededRng(seed))
    assert out.shape == clip.shape and out.dtype == clip.dtype
    assert out[0].tobytes() == out[1].tobytes() == out[2].tobytes()
    assert out.min() >= 0 and out.max() <= 1 + 1e-6


def test_rotation_about_centre_keeps_centre_pixel():
    clip = np.zeros((1, 1, 9, 9), np.float32)
    clip[0, 0, 4, 4] = 1.0
    out = apply_transform(clip, 0, 0, np.radians(4.0))
    assert out[0, 0, 4, 4] == pytest.approx(1.0, abs=0.02)


def test_batch_schedule_covers_and_merges_singletons():
    b = batch_schedule(65, 32, SeededRng(0))
    assert [len(x) for x in b] == [32, 33]
    assert sorted(np.concatenate(b).tolist()) == list(range(65))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    with pytest.raises(ValueError):
        TrainConfig(folds=1)


def test_train_rejects_mismatched_clips():
    m = small_model()
    with pytest.raises(ValueError):
        train(m, np.zeros((4, 2, 1, 30, 32), np.float32), np.zeros((4, 4)), TrainConfig(epochs=1))
    with pytest.raises(ValueError):
        train(m, np.zeros((4,) + SMALL.clip_shape, np.float32), np.zeros((3, 4)), TrainConfig(epochs=1))


def test_training_is_deterministic(tmp_path):
    x, y = small_data(12)
    cfg = TrainConfig(batch_size=4, epochs=2, seed=5)
    runs = []
    for k in range(2):
        m = small_model(3)
        hist = train(m, x, y, cfg, log_path=tmp_path / f"log{k}.jsonl")
        runs.append(([r.loss for r in hist], checkpoint_bytes(m)))
    assert runs[0] == runs[1]
    lines = [json.loads(l) for l in (tmp_path / "log0.jsonl").read_text().splitlines()]
    assert {"epoch", "batch", "loss", "lr", "wall_time"} <= set(lines[0])
    assert sum(l["batch"] is None for l in lines) == 2


def test_zero_learning_rate_leaves_parameters():
    x, y = small_data(8)
    m = small_model(1)
    before = {n: p.copy() for n, p in m.named_parameters()}
    train(m, x, y, TrainConfig(batch_size=4, epochs=2, learning_rate=0.0))
    for n, p in m.named_parameters():
        assert p.tobytes() == before[n].tobytes(), n


def test_every_stream_receives_gradient():
    x, y = small_data(4)
    m = small_model(2)
    before = {n: p.copy() for n, p in m.named_parameters()}
    train(m, x, y, TrainConfig(batch_size=4, epochs=1))
    for s in range(4):
        prefix = m.streams[s].config.attribute + "."
        changed = [n for n, p in m.named_parameters() if n.startswith(prefix) and not np.array_equal(p, before[n])]
        assert changed, prefix


def test_nan_aborts_with_diagnostic():
    x, y = small_data(4)
    m = small_model()
    m.streams[0].out.params["bias"][:] = np.nan
    with pytest.raises(TrainingDiverged) as err:
        train(m, x, y, TrainConfig(batch_size=4, epochs=1))
    info = json.loads(str(err.value))
    assert info["epoch"] == 0 and info["batch"] == 0 and len(info["clips"]) == 4
    assert any(v["nonfinite"] for v in info["parameters"].values())


def test_recalibration_averages_dropout_free_statistics():
    x, _ = small_data(8)
    m = small_model(4)
    drop = m.streams[0].blocks[0][-1]
    recalibrate_batchnorm(m, x, batch_size=8)
    assert drop.p == 0.5
    conv, bn = m.streams[0].blocks[0][:2]
    frames, _, _ = m._frames(x)
    z = conv.forward(frames).reshape(-1, bn.running_mean.size).astype(np.float64)
    np.testing.assert_allclose(bn.running_mean, z.mean(axis=0), rtol=1e-4, atol=1e-6)
    np.testing.assert_allclose(bn.running_var, z.var(axis=0, ddof=1), rtol=1e-4, atol=1e-7)
    state = checkpoint_bytes(m)
    recalibrate_batchnorm(m, x, batch_size=8)
    assert checkpoint_bytes(m) == state


def test_recalibration_only_touches_buffers():
    x, y = small_data(8)
    a, b = small_model(5), small_model(5)
    train(a, x, y, TrainConfig(batch_size=4, epochs=1, recalibrate_bn=False))
    train(b, x, y, TrainConfig(batch_size=4, epochs=1))
    pa, pb = dict(a.named_parameters()), dict(b.named_parameters())
    assert all(pa[k].tobytes() == pb[k].tobytes() for k in pa)
    assert dict(a.named_buffers()).keys() == dict(b.named_buffers()).keys()
    assert any(not np.array_equal(u, v) for (_, u), (_, v) in zip(a.named_buffers(), b.named_buffers()))


def test_fold_partition():
    f = fold_assignment(10, 5, seed=3)
    assert np.bincount(f).tolist() == [2] * 5
    assert f.tolist() == fold_assignment(10, 5, seed=3).tolist()
    with pytest.raises(ValueError):
        fold_assignment(4, 5, 0)


@given(st.integers(5, 60), st.integers(2, 5), st.integers(0, 1000))
def test_folds_are_balanced(n, k, seed):
    counts = np.bincount(fold_assignment(n, k, seed), minlength=k)
    assert counts.sum() == n and counts.max() - counts.min() <= 1


def test_cross_validate_reports():
    x, y = small_data(10)
    cfg = TrainConfig(batch_size=4, epochs=1, folds=5, seed=1)
    reports = cross_validate(x, y, cfg, clip_ids=[f"c{i}" for i in range(10)],
                             model_factory=lambda k: small_model(k))
    assert len(reports) == 5
    seen = [c for r in reports for c in r.validation_clips]
    assert sorted(seen) == sorted(f"c{i}" for i in range(10))
    for r in reports:
        assert r.validation_size == 2 and r.train_size == 8
        assert all(a == pytest.approx((1 - m) * 100) for a, m in zip(r.accuracy, r.mae))
        json.dumps(r.to_dict())


@pytest.mark.slow
def test_four_epochs_on_synthetic_clips_lower_the_loss(tmp_path):
    tr, _ = generate_dataset(200, tmp_path, split_ratio=0.8, rng=SeededRng(0))
    x, y = load_clips(tr, tmp_path)
    m = build_model(rng=SeededRng(0))
    hist = train(m, x, y, TrainConfig(epochs=4, seed=0))
    assert hist[-1].loss < 0.9 * hist[0].loss
