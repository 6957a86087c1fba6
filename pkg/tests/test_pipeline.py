"""Split, patch, training-loop, and evaluation tests.

The training tests run tiny models (depth 1-2, a handful of channels) so
the whole file stays in the seconds range; the full-size configuration is
exercised by the acceptance suite.
"""

import io
import math

import numpy as np
import pytest

from densecount.annotations import AnnotatedImage, DotAnnotation
from densecount.density import KernelSpec, gaussian_density_map, integrate_count
from densecount.errors import ConfigError, TrainingDivergedError, ValidationError
from densecount.pipeline import (
    CountRecord,
    EpochLog,
    MetricsReport,
    SplitSpec,
    TrainConfig,
    compare_report,
    evaluate,
    ground_truth_map,
    load_dataset,
    make_splits,
    sample_patches,
    train,
    write_training_log,
)
from densecount.synthgen import SceneSpec, generate_dataset, generate_scene
from densecount.unet import UNetConfig, predict_count


def _images(n, w=32, h=32):
    return [AnnotatedImage(f"img_{i}.png", w, h, ()) for i in range(n)]


# splits


def test_split_sizes_10_images():
    train_s, val_s, test_s = make_splits(_images(10), SplitSpec(0.8, 0.1, 0.1, seed=0))
    assert (len(train_s), len(val_s), len(test_s)) == (8, 1, 1)


def test_split_deterministic():
    imgs = _images(25)
    a = make_splits(imgs, SplitSpec(seed=7))
    b = make_splits(imgs, SplitSpec(seed=7))
    assert a == b
    c = make_splits(imgs, SplitSpec(seed=8))
    assert a != c


def test_split_union_and_disjoint():
    imgs = _images(23)
    train_s, val_s, test_s = make_splits(imgs, SplitSpec(0.6, 0.2, 0.2, seed=3))
    names = [i.image_path for i in train_s + val_s + test_s]
    assert sorted(names) == sorted(i.image_path for i in imgs)
    assert len(set(names)) == len(names)


def test_split_duplicate_paths_rejected():
    imgs = _images(3) + [AnnotatedImage("img_0.png", 8, 8, ())]
    with pytest.raises(ValidationError):
        make_splits(imgs, SplitSpec())


def test_split_fraction_validation():
    with pytest.raises(ConfigError):
        SplitSpec(0.5, 0.5, 0.5)
    with pytest.raises(ConfigError):
        SplitSpec(-0.1, 0.6, 0.5)


def test_split_everything_train():
    train_s, val_s, test_s = make_splits(_images(5), SplitSpec(1.0, 0.0, 0.0))
    assert len(train_s) == 5 and not val_s and not test_s


# patch sampling


def _scene_with_map(seed=0, count=(3, 3)):
    spec = SceneSpec(width=48, height=48, count_min=count[0], count_max=count[1], seed=seed)
    image, truth = generate_scene(spec, 0)
    dm = gaussian_density_map(truth, KernelSpec.constant(sigma=2.0))
    return image[None], truth, dm


def test_patch_whole_image_is_identity():
    image, _, dm = _scene_with_map()
    (img_patch, dm_patch), = sample_patches(image, dm, 48, 1, seed=0)
    assert np.array_equal(img_patch, image)
    assert np.array_equal(dm_patch, dm.values)


def test_patch_far_from_dots_is_zero():
    truth = AnnotatedImage("a.png", 64, 64, (DotAnnotation(2.0, 2.0),))
    dm = gaussian_density_map(truth, KernelSpec.constant(sigma=1.0))
    image = np.zeros((1, 64, 64), dtype=np.float32)
    # patch pinned to the far corner, kernel support is 4 sigma around (2,2)
    patch = dm.values[48:, 48:]
    assert not patch.any()
    pairs = sample_patches(image[..., 48:, 48:],
                           type(dm)(16, 16, dm.values[48:, 48:]), 16, 3, seed=1)
    assert all(not dp.any() for _, dp in pairs)


def test_patch_mass_bounded_by_total():
    image, _, dm = _scene_with_map(seed=5)
    total = dm.values.sum()
    for _, dp in sample_patches(image, dm, 16, 20, seed=2):
        assert dp.shape == (16, 16)
        assert dp.sum() <= total + 1e-6


def test_patch_object_biased_hits_dots():
    image, truth, dm = _scene_with_map(seed=9)
    assert truth.count > 0
    pairs = sample_patches(image, dm, 16, 10, seed=3, dots=truth.dots, object_biased=True)
    # every other patch is centered on some dot, so it carries real mass
    biased = [dp for i, (_, dp) in enumerate(pairs) if i % 2 == 0]
    assert all(dp.sum() > 0.05 for dp in biased)


def test_patch_too_large_rejected():
    image, _, dm = _scene_with_map()
    with pytest.raises(ConfigError):
        sample_patches(image, dm, 64, 1, seed=0)


def test_patch_deterministic():
    image, _, dm = _scene_with_map(seed=11)
    a = sample_patches(image, dm, 16, 5, seed=42)
    b = sample_patches(image, dm, 16, 5, seed=42)
    for (ia, da), (ib, db) in zip(a, b):
        assert np.array_equal(ia, ib) and np.array_equal(da, db)


# training loop


def _tiny_dataset(n, seed=0, size=32):
    spec = SceneSpec(width=size, height=size, count_min=1, count_max=4,
                     radius_min=2.0, radius_max=4.0, min_separation=6.0, seed=seed)
    out = []
    for i in range(n):
        image, truth = generate_scene(spec, i)
        out.append((image[None], truth))
    return out


def _tiny_train_config(**kw):
    base = dict(
        epochs=2, batch_size=4, patch_size=16, learning_rate=1e-3,
        kernel=KernelSpec.constant(sigma=1.5), scale=100.0, seed=0,
        patches_per_image=2,
    )
    base.update(kw)
    return TrainConfig(**base)


TINY_MODEL = UNetConfig(depth=1, base_channels=4)


def test_train_returns_logs_per_epoch():
    data = _tiny_dataset(4)
    model, logs = train(data[:3], data[3:], _tiny_train_config(), model_config=TINY_MODEL)
    assert len(logs) == 2
    assert [l.epoch for l in logs] == [1, 2]
    for l in logs:
        assert math.isfinite(l.train_loss)
        assert math.isfinite(l.val_mae) and math.isfinite(l.val_rmse)


def test_train_zero_epochs_returns_initialized_model():
    data = _tiny_dataset(2)
    model, logs = train(data[:1], data[1:], _tiny_train_config(epochs=0),
                        model_config=TINY_MODEL)
    assert logs == []
    # stats come from the train split even when no step runs
    assert model.norm_std[0] > 0


def test_train_deterministic():
    data = _tiny_dataset(4)

    def run():
        model, logs = train(data[:3], data[3:], _tiny_train_config(), model_config=TINY_MODEL)
        return logs, [p.value.copy() for p in model.params]

    logs_a, params_a = run()
    logs_b, params_b = run()
    assert logs_a == logs_b
    for a, b in zip(params_a, params_b):
        assert np.array_equal(a, b)


def test_train_empty_train_set_rejected():
    with pytest.raises(ConfigError):
        train([], [], _tiny_train_config(), model_config=TINY_MODEL)


def test_train_patch_size_must_match_depth():
    data = _tiny_dataset(1)
    with pytest.raises(ConfigError):
        train(data, [], _tiny_train_config(patch_size=17), model_config=TINY_MODEL)


def test_train_divergence_names_epoch_and_step():
    data = _tiny_dataset(2)
    # absurd scale overflows float32 targets into inf -> non-finite loss
    cfg = _tiny_train_config(scale=1e308)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(TrainingDivergedError, match="epoch 1"):
            train(data[:1], data[1:], cfg, model_config=TINY_MODEL)


def test_train_overfits_single_image():
    """Loss on one fixed 32x32 scene must collapse under repeated steps."""
    data = _tiny_dataset(1, seed=3)
    losses = []
    cfg = _tiny_train_config(epochs=60, patch_size=32, patches_per_image=1,
                             batch_size=1, learning_rate=3e-3)
    _, logs = train(data, [], cfg, model_config=UNetConfig(depth=2, base_channels=8))
    losses = [l.train_loss for l in logs]
    assert losses[-1] < 0.1 * losses[0]


def test_train_early_stopping_and_best_restore():
    data = _tiny_dataset(5)
    cfg = _tiny_train_config(epochs=30, patience=1)
    model, logs = train(data[:4], data[4:], cfg, model_config=TINY_MODEL)
    # this seeded run worsens at epoch 2 and patience 1 cuts it there
    assert len(logs) < 30
    # the returned parameters are the best-val snapshot, not the last epoch
    rep = evaluate(model, data[4:])
    assert rep.mae == min(l.val_mae for l in logs)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        _tiny_train_config(batch_size=0)
    with pytest.raises(ConfigError):
        _tiny_train_config(epochs=-1)
    with pytest.raises(ConfigError):
        _tiny_train_config(patience=0)
    with pytest.raises(ConfigError):
        _tiny_train_config(beta1=1.0)


# evaluation metrics


def _report_from(pairs):
    recs = [CountRecord(f"i{k}.png", float(y), float(yh)) for k, (y, yh) in enumerate(pairs)]
    return MetricsReport.from_records(recs)


def test_metrics_simple_offsets():
    rep = _report_from([(2, 3), (4, 5)])
    assert rep.mae == 1.0
    assert rep.rmse == 1.0


def test_metrics_hand_computed():
    rep = _report_from([(2, 1), (2, 4)])
    assert abs(rep.mae - 1.5) <= 1e-9
    assert abs(rep.rmse - math.sqrt(2.5)) <= 1e-9


def test_metrics_constant_offset():
    rng = np.random.default_rng(31)
    c = -2.75
    pairs = [(y, y + c) for y in rng.uniform(0, 20, 50)]
    rep = _report_from(pairs)
    assert abs(rep.mae - abs(c)) <= 1e-9
    assert abs(rep.rmse - abs(c)) <= 1e-9


def test_mae_never_exceeds_rmse():
    rng = np.random.default_rng(37)
    for _ in range(20):
        pairs = rng.uniform(0, 30, (int(rng.integers(1, 40)), 2))
        rep = _report_from(pairs)
        assert rep.mae <= rep.rmse + 1e-12


def test_metrics_empty_records_rejected():
    with pytest.raises(ValidationError, match="no records"):
        MetricsReport.from_records([])


def test_metrics_aggregates_recomputable():
    rng = np.random.default_rng(41)
    pairs = rng.uniform(0, 10, (12, 2))
    rep = _report_from(pairs)
    err = np.array([r.y_hat - r.y for r in rep.records])
    assert rep.rmse == float(np.sqrt(np.mean(err**2)))
    assert rep.mae == float(np.mean(np.abs(err)))


def test_report_json_shape():
    rep = MetricsReport.from_records(
        [CountRecord("a.png", 2.0, 2.5)], config_fingerprint="deadbeef")
    import json

    payload = json.loads(rep.to_json())
    assert payload["records"] == [{"image": "a.png", "y": 2.0, "y_hat": 2.5}]
    assert payload["config_fingerprint"] == "deadbeef"
    assert set(payload) == {"records", "rmse", "mae", "config_fingerprint"}


def test_evaluate_oracle_is_nearly_exact():
    data = _tiny_dataset(4, seed=13)
    rep = evaluate(None, data, kernel=KernelSpec.constant(sigma=1.5), oracle=True)
    assert rep.mae <= 1e-6
    assert rep.rmse <= 1e-6


def test_evaluate_oracle_needs_kernel():
    data = _tiny_dataset(1)
    with pytest.raises(ConfigError):
        evaluate(None, data, oracle=True)
    with pytest.raises(ConfigError):
        evaluate(None, data, oracle=False)


def test_evaluate_records_in_input_order():
    data = _tiny_dataset(3, seed=17)
    rep = evaluate(None, data, kernel=KernelSpec.constant(sigma=1.5), oracle=True)
    assert [r.image for r in rep.records] == [t.image_path for _, t in data]
    assert all(r.y == float(t.count) for r, (_, t) in zip(rep.records, data))


# comparison table


def test_compare_report_zero_deltas():
    rep = MetricsReport.from_records(
        [CountRecord("a.png", 1.0, 1.98), CountRecord("b.png", 2.0, 0.98)])
    # force the aggregates to the reference values via a constructed report
    rep = MetricsReport(rep.records, rmse=0.890, mae=0.490)
    table = compare_report(rep, {"aed": (0.890, 0.490)})
    row = [ln for ln in table.splitlines() if ln.startswith("aed")][0]
    assert "+0.000" in row
    assert row.count("+0.000") == 2


def test_compare_report_without_references():
    rep = _report_from([(1, 2)])
    table = compare_report(rep)
    assert "d_rmse" not in table
    assert "this run" in table
    assert table.splitlines()[-1] == "images: 1"


def test_compare_report_empty():
    rep = MetricsReport(records=(), rmse=0.0, mae=0.0)
    with pytest.raises(ValidationError, match="no records"):
        compare_report(rep)


# training log serialization


def test_training_log_csv():
    logs = [EpochLog(1, 0.5, 2.0, 1.5), EpochLog(2, 0.25, 1.0, 0.75)]
    buf = io.StringIO()
    write_training_log(logs, buf, config_fingerprint="cafe01")
    lines = buf.getvalue().splitlines()
    assert lines[0] == "# config_fingerprint=cafe01"
    assert lines[1] == "epoch,train_loss,val_rmse,val_mae"
    assert lines[2] == "1,0.5,2.0,1.5"
    assert len(lines) == 4


def test_training_log_no_fingerprint():
    buf = io.StringIO()
    write_training_log([], buf)
    assert buf.getvalue() == "epoch,train_loss,val_rmse,val_mae\n"


# dataset loading


def test_load_dataset_round_trip(tmp_path):
    spec = SceneSpec(width=40, height=40, count_min=0, count_max=3, seed=5)
    truths = generate_dataset(spec, 4, tmp_path)
    data = load_dataset(tmp_path)
    assert len(data) == 4
    for (image, truth), expected in zip(data, truths):
        assert image.shape == (1, 40, 40)
        assert image.dtype == np.float32
        assert 0.0 <= image.min() and image.max() <= 1.0
        assert truth == expected


def test_load_dataset_missing_csv(tmp_path):
    with pytest.raises(ValidationError, match="not found"):
        load_dataset(tmp_path)


# end-to-end sanity at desk scale


def test_trained_model_beats_constant_on_tiny_set():
    """A short tiny-model run must out-predict the best constant count.

    Small-scale version of the headline claim; the full configuration is
    covered by acceptance.
    """
    data = _tiny_dataset(12, seed=29)
    train_set, val_set, test_set = data[:8], data[8:10], data[10:]
    cfg = _tiny_train_config(epochs=12, patch_size=32, patches_per_image=2,
                             batch_size=4, learning_rate=3e-3, object_biased=True,
                             kernel=KernelSpec.constant(sigma=1.5))
    model, logs = train(train_set, val_set, cfg, model_config=UNetConfig(depth=2, base_channels=8))
    rep = evaluate(model, test_set)

    train_counts = np.array([t.count for _, t in train_set], dtype=float)
    test_counts = np.array([t.count for _, t in test_set], dtype=float)
    const_mae = min(
        float(np.mean(np.abs(test_counts - c)))
        for c in np.arange(train_counts.min(), train_counts.max() + 0.5, 0.5)
    )
    assert rep.mae < const_mae


def test_predict_count_on_trained_model_is_finite():
    data = _tiny_dataset(2, seed=43)
    model, _ = train(data[:1], [], _tiny_train_config(epochs=1), model_config=TINY_MODEL)
    count, dm = predict_count(model, data[1][0])
    assert math.isfinite(count)
    assert count >= 0.0
    assert dm.values.shape == (32, 32)
