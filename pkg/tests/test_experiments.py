import json
import math

import numpy as np
import pytest

from srnet import linalg
from srnet.errors import ConfigError, DataError, IdxParseError
from srnet.experiments import data, harness, stats
from srnet.experiments.config import default_params, load_config, parse_config


def doc(**exp):
    return {"experiment": exp}


def test_config_merges_over_defaults():
    cfg = parse_config(doc(command="curve", seed=3, params={"width": 64, "seeds": 2}), "curve")
    assert cfg.seed == 3 and cfg.output_dir is None
    assert cfg.params["width"] == 64 and cfg.params["depth"] == default_params("curve")["depth"]


def test_config_nested_merge_and_float_coercion():
    cfg = parse_config(doc(seed=0, params={"noise": {"learning_rate": 2}}), "mnist")
    assert cfg.params["noise"]["learning_rate"] == 2.0
    assert isinstance(cfg.params["noise"]["learning_rate"], float)
    assert cfg.params["noise"]["seeds"] == 5


@pytest.mark.parametrize("bad", [
    {"experiment": {"seed": 0, "colour": 1}},
    {"experiment": {"seed": 0, "params": {"widht": 3}}},
    {"experiment": {"seed": 0, "params": {"width": "wide"}}},
    {"experiment": {"seed": 0, "params": {"width": 2.5}}},
    {"experiment": {"seed": 0, "params": {"width": True}}},
    {"experiment": {"seed": 0, "params": {"stable_ranks": 5.0}}},
    {"experiment": {"seed": -1}},
    {"experiment": {"seed": 2**64}},
    {"experiment": {"seed": 0, "command": "sample"}},
    {"experiment": {"params": {}}},
    {"other": {}},
    [],
])
def test_config_rejections(bad):
    with pytest.raises(ConfigError):
        parse_config(bad, "curve")


def test_config_seed_and_out_overrides(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(doc(params={})))
    cfg = load_config(path, "sample", seed_override=11, out_override="o")
    assert (cfg.seed, cfg.output_dir) == (11, "o")
    with pytest.raises(ConfigError):
        load_config(path, "sample")
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(path, "sample", seed_override=1)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json", "sample", seed_override=1)
    with pytest.raises(ConfigError):
        default_params("nope")


@pytest.fixture
def idx_files(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(10, 28, 28), dtype=np.uint8)
    labels = np.arange(10, dtype=np.uint8)
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    data.write_idx(ip, lp, images, labels)
    return ip, lp, images, labels


def test_idx_roundtrip(idx_files):
    ip, lp, images, labels = idx_files
    ds = data.load_idx(ip, lp)
    assert len(ds) == 10 and ds.images.shape == (10, 784)
    np.testing.assert_array_equal(ds.images, images.reshape(10, -1) / 255.0)
    np.testing.assert_array_equal(ds.labels, labels)


def test_idx_wrong_magic(idx_files):
    ip, lp, _, _ = idx_files
    raw = bytearray(ip.read_bytes())
    raw[3] = 0x01
    ip.write_bytes(bytes(raw))
    with pytest.raises(IdxParseError) as exc:
        data.load_idx(ip, lp)
    assert exc.value.offset == 0


def test_idx_truncated_and_trailing(idx_files):
    ip, lp, _, _ = idx_files
    raw = ip.read_bytes()
    ip.write_bytes(raw[:-5])
    with pytest.raises(IdxParseError):
        data.load_idx(ip, lp)
    ip.write_bytes(raw + b"\x00")
    with pytest.raises(IdxParseError):
        data.load_idx(ip, lp)
    ip.write_bytes(raw[:10])
    with pytest.raises(IdxParseError):
        data.load_idx(ip, lp)


def test_idx_count_mismatch(tmp_path):
    ip, lp = tmp_path / "i", tmp_path / "l"
    data.write_idx(ip, lp, np.zeros((4, 2, 2)), np.zeros(3))
    with pytest.raises(DataError):
        data.load_idx(ip, lp)
    with pytest.raises(DataError):
        data.load_idx(tmp_path / "absent", lp)


@pytest.mark.parametrize("fraction,expected", [(0.0, 0), (0.25, 250), (0.333, 333), (1.0, 1000)])
def test_shuffle_exact_count_and_inverse(fraction, expected):
    labels = np.arange(1000)
    new, pos, perm = data.shuffle_labels(labels, fraction, linalg.make_rng(4))
    assert pos.size == expected
    assert np.all(new[np.setdiff1d(labels, pos)] == labels[np.setdiff1d(labels, pos)])
    np.testing.assert_array_equal(np.sort(new[pos]), np.sort(labels[pos]))
    np.testing.assert_array_equal(data.unshuffle_labels(new, pos, perm), labels)


def test_shuffle_rejects_bad_fraction():
    with pytest.raises(DataError):
        data.shuffle_labels(np.arange(5), 1.5, linalg.make_rng(0))


def test_gaussian_blobs_shape_and_balance():
    ds = data.gaussian_blobs(linalg.make_rng(0), 100, 20, 2, 10.0)
    assert ds.images.shape == (100, 20)
    assert np.bincount(ds.labels).tolist() == [50, 50]


def test_ks_normal_report():
    x = linalg.make_rng(0).standard_normal(5000) * 2.0
    ok = stats.ks_normal(x, 4.0)
    assert ok.passed and ok.p_value > 0.01 and ok.n == 5000
    assert not stats.ks_normal(x, 1.0).passed
    assert stats.ks_normal(x, 0.0).skipped


def test_mean_within_se_and_binomial():
    x = linalg.make_rng(1).standard_normal(10_000) + 0.5
    assert stats.mean_within_se(x, 0.5).passed
    assert not stats.mean_within_se(x, 0.0).passed
    assert stats.binomial_se(0.5, 100) == pytest.approx(0.05)
    assert stats.binomial_se(0.0, 100) == 0.0


def test_qq_pairs_quantiles():
    x, q = stats.qq_pairs(np.array([3.0, 1.0, 2.0]), 1.0)
    np.testing.assert_array_equal(x, [1.0, 2.0, 3.0])
    assert q[1] == pytest.approx(0.0, abs=1e-15)
    assert q[2] == pytest.approx(-q[0])


def test_parallel_map_preserves_order():
    assert harness.parallel_map(lambda v: v * v, list(range(20))) == [v * v for v in range(20)]


def test_make_points_gram_matrix():
    pts = harness.make_points(0, 4, 30)
    assert pts.shape == (4, 30)
    d = np.linspace(0.8, 1.4, 4)
    idx = np.arange(4)
    gram = d[:, None] * 0.6 ** np.abs(idx[:, None] - idx[None, :]) * d[None, :]
    np.testing.assert_allclose(pts @ pts.T, gram, atol=1e-12)
