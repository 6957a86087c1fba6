"""Synthetic scene generator tests: determinism, separation, statistics."""

import numpy as np
import pytest
from PIL import Image
from scipy.stats import chisquare

from densecount.annotations import parse_dot_csv
from densecount.density import KernelSpec, gaussian_density_map, integrate_count
from densecount.errors import ConfigError
from densecount.synthgen import SceneSpec, generate_dataset, generate_scene


def test_deterministic_from_seed_and_index():
    spec = SceneSpec(seed=7)
    img_a, truth_a = generate_scene(spec, 3)
    img_b, truth_b = generate_scene(spec, 3)
    assert np.array_equal(img_a, img_b)
    assert truth_a == truth_b


def test_different_indices_differ():
    spec = SceneSpec(seed=7)
    img_a, _ = generate_scene(spec, 0)
    img_b, _ = generate_scene(spec, 1)
    assert not np.array_equal(img_a, img_b)


def test_different_seeds_differ():
    img_a, _ = generate_scene(SceneSpec(seed=1), 0)
    img_b, _ = generate_scene(SceneSpec(seed=2), 0)
    assert not np.array_equal(img_a, img_b)


def test_image_range_and_dtype():
    img, _ = generate_scene(SceneSpec(seed=3), 0)
    assert img.dtype == np.float32
    assert img.shape == (128, 128)
    assert img.min() >= 0.0 and img.max() <= 1.0


def test_zero_count_scene():
    spec = SceneSpec(count_min=0, count_max=0, seed=5)
    img, truth = generate_scene(spec, 0)
    assert truth.count == 0
    assert img.shape == (128, 128)


def test_counts_within_requested_range():
    spec = SceneSpec(count_min=2, count_max=6, seed=9)
    for i in range(30):
        _, truth = generate_scene(spec, i)
        assert 2 <= truth.count <= 6


def test_min_separation_respected():
    spec = SceneSpec(count_min=8, count_max=10, min_separation=10.0, seed=11)
    for i in range(15):
        _, truth = generate_scene(spec, i)
        pts = np.array([(d.x, d.y) for d in truth.dots])
        for a in range(len(pts)):
            for b in range(a + 1, len(pts)):
                assert np.linalg.norm(pts[a] - pts[b]) >= 10.0


def test_truth_dots_in_bounds():
    # AnnotatedImage construction enforces the bounds invariant; surviving
    # construction for many scenes is the test
    spec = SceneSpec(width=64, height=48, count_min=5, count_max=10,
                     min_separation=4.0, seed=13)
    for i in range(25):
        _, truth = generate_scene(spec, i)
        assert truth.width == 64 and truth.height == 48


def test_infeasible_separation_rejected():
    # ~100 objects at separation 100 cannot fit a 64x64 frame
    with pytest.raises(ConfigError):
        SceneSpec(width=64, height=64, count_min=100, count_max=100,
                  min_separation=100.0, seed=1)


def test_background_modes():
    for mode in ("flat", "gradient", "speckle"):
        img, _ = generate_scene(SceneSpec(background=mode, count_min=0, count_max=0,
                                          glare_probability=0.0, seed=17), 0)
        assert np.all(np.isfinite(img))
    with pytest.raises(ConfigError):
        SceneSpec(background="plaid")


def test_count_histogram_uniform():
    """Counts over [0, 10] should be uniform (chi-squared, p > 0.01)."""
    spec = SceneSpec(count_min=0, count_max=10, seed=19)
    counts = np.array([generate_scene(spec, i)[1].count for i in range(1000)])
    freq = np.bincount(counts, minlength=11)
    assert freq.sum() == 1000
    _, p = chisquare(freq)
    assert p > 0.01


def test_density_map_recovers_generated_count():
    """Front-half integration: synth -> annotations -> density -> count."""
    spec = SceneSpec(seed=23)
    kernel = KernelSpec.constant(sigma=2.0)
    for i in range(10):
        _, truth = generate_scene(spec, i)
        dm = gaussian_density_map(truth, kernel)
        assert abs(integrate_count(dm) - truth.count) <= 1e-4 * max(1, truth.count)


def test_generate_dataset_round_trip(tmp_path):
    spec = SceneSpec(width=48, height=48, count_min=0, count_max=4, seed=29)
    truths = generate_dataset(spec, 6, tmp_path)
    assert len(truths) == 6

    pngs = sorted(tmp_path.glob("*.png"))
    assert len(pngs) == 6
    img = Image.open(pngs[0])
    assert img.size == (48, 48)
    assert img.mode == "L"

    parsed = parse_dot_csv((tmp_path / "dots.csv").read_text())
    assert len(parsed) == len([t for t in truths])
    by_path = {t.image_path: t for t in truths}
    for img_ann in parsed:
        want = by_path[img_ann.image_path]
        assert img_ann.count == want.count
        assert img_ann.width == 48 and img_ann.height == 48


def test_generate_dataset_size_zero(tmp_path):
    truths = generate_dataset(SceneSpec(seed=31), 0, tmp_path)
    assert truths == []
    content = (tmp_path / "dots.csv").read_text()
    assert content == "image_path,width,height,x,y\n"
    assert not list(tmp_path.glob("*.png"))


def test_generate_dataset_parallel_matches_serial(tmp_path):
    spec = SceneSpec(width=40, height=40, count_min=0, count_max=3, seed=37)
    serial_dir = tmp_path / "serial"
    parallel_dir = tmp_path / "parallel"
    serial_dir.mkdir()
    parallel_dir.mkdir()
    t1 = generate_dataset(spec, 5, serial_dir, jobs=1)
    t2 = generate_dataset(spec, 5, parallel_dir, jobs=2)
    assert t1 == t2
    for name in sorted(p.name for p in serial_dir.iterdir()):
        assert (serial_dir / name).read_bytes() == (parallel_dir / name).read_bytes()


def test_spec_validation():
    with pytest.raises(ConfigError):
        SceneSpec(count_min=5, count_max=2)
    with pytest.raises(ConfigError):
        SceneSpec(width=0)
    with pytest.raises(ConfigError):
        SceneSpec(min_separation=-1.0)
    with pytest.raises(ConfigError):
        SceneSpec(radius_min=5.0, radius_max=3.0)
    with pytest.raises(ConfigError):
        SceneSpec(glare_probability=1.5)
