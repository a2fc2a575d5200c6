import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pnnet import data
from pnnet.errors import DataError, FormatError


def small_corpus(sizes=(3, 1, 4, 2), seed=0):
    rng = np.random.default_rng(seed)
    ids = np.repeat(np.arange(len(sizes)) * 10, sizes)
    perm = rng.permutation(len(ids))
    pixels = rng.random((len(ids), 64, 64)).astype(np.float32)
    return data.PatchCorpus(pixels, ids[perm])


@pytest.fixture(scope="module")
def toy():
    return data.make_toy_corpus(data.ToyCorpusSpec(num_points=6, patches_per_point=3))


def test_corpus_is_read_only(toy):
    with pytest.raises(ValueError):
        toy.pixels[0, 0, 0] = 1.0
    rec = toy[4]
    assert rec.pixels.shape == (1, 64, 64)
    assert rec.point_id == toy.point_ids[4]


def test_corpus_rejects_bad_shapes():
    with pytest.raises(DataError):
        data.PatchCorpus(np.zeros((2, 32, 32)), [0, 1])
    with pytest.raises(DataError):
        data.PatchCorpus(np.zeros((2, 64, 64)), [0])


def test_normalize_shape_and_moments(toy):
    x = toy.normalized()
    assert x.shape == (len(toy), 1, 32, 32) and x.dtype == np.float32
    np.testing.assert_allclose(x.mean(axis=(1, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(x.std(axis=(1, 2, 3)), 1, atol=1e-4)


def test_normalize_matches_manual_pipeline():
    p = np.random.default_rng(0).random((2, 64, 64))
    small = np.array([[[p[n, 2 * i:2 * i + 2, 2 * j:2 * j + 2].mean() for j in range(32)]
                       for i in range(32)] for n in range(2)])
    expected = (small - small.mean(axis=(1, 2), keepdims=True)) / small.std(axis=(1, 2), keepdims=True)
    np.testing.assert_allclose(data.normalize_patches(p)[:, 0], expected, atol=1e-5)


def test_constant_patch_maps_to_zero():
    out = data.normalize_patches(np.full((2, 64, 64), 0.37))
    assert np.all(out == 0)
    assert data.normalize_patch(np.full((1, 64, 64), 0.1)).shape == (1, 32, 32)
    with pytest.raises(DataError):
        data.normalize_patch(np.zeros((32, 32)))


def test_phototour_roundtrip(tmp_path):
    corpus = data.make_toy_corpus(data.ToyCorpusSpec(num_points=40, patches_per_point=7))
    data.write_phototour(corpus, tmp_path)
    assert sorted(p.name for p in tmp_path.glob("*.bmp")) == ["patches0000.bmp", "patches0001.bmp"]
    back = data.load_phototour(tmp_path)
    np.testing.assert_array_equal(back.pixels, corpus.pixels)
    np.testing.assert_array_equal(back.point_ids, corpus.point_ids)


def test_phototour_missing_info(tmp_path):
    with pytest.raises(DataError, match="info"):
        data.load_phototour(tmp_path)


def test_phototour_count_mismatch(tmp_path, toy):
    data.write_phototour(toy, tmp_path)
    with open(tmp_path / data.INFO_FILE, "a") as fh:
        for _ in range(300):
            fh.write("99 0\n")
    with pytest.raises(DataError):
        data.load_phototour(tmp_path)


def test_phototour_bad_info_line(tmp_path, toy):
    data.write_phototour(toy, tmp_path)
    (tmp_path / data.INFO_FILE).write_text("1 0\nabc 0\n")
    with pytest.raises(FormatError, match="line 2"):
        data.load_phototour(tmp_path)


def test_pairs_file_roundtrip(tmp_path, toy):
    pairs = data.sample_pairs(toy, 50, 3, positive_fraction=0.5)
    path = tmp_path / "m50.txt"
    data.write_pairs_file(pairs, toy, path)
    back = data.load_pairs_file(path, len(toy))
    np.testing.assert_array_equal(back.left, pairs.left)
    np.testing.assert_array_equal(back.right, pairs.right)
    np.testing.assert_array_equal(back.labels, pairs.labels)
    for rec in back.records(toy):
        assert (rec.label == 1) == (rec.left.point_id == rec.right.point_id)


@pytest.mark.parametrize("text, line", [("0 1 0 1 1 0\n0 1 0\n", 2),
                                        ("0 1 0 x 1 0\n", 1),
                                        ("0 1 0 1 1 0\n\n0 1 0 99 1 0\n", 3)])
def test_pairs_file_errors(tmp_path, text, line):
    path = tmp_path / "p.txt"
    path.write_text(text)
    with pytest.raises(FormatError, match=f"line {line}"):
        data.load_pairs_file(path, num_patches=10)


def test_triplet_and_pair_invariants(toy):
    with pytest.raises(DataError):
        data.Triplet(toy[0], toy[3], toy[6])
    with pytest.raises(DataError):
        data.Triplet(toy[0], toy[0], toy[6])
    with pytest.raises(DataError):
        data.LabeledPair(toy[0], toy[1], -1)
    with pytest.raises(DataError):
        data.LabeledPair(toy[0], toy[1], 0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=2, max_size=8).filter(lambda s: max(s) >= 2),
       st.integers(0, 2**31))
def test_sampled_triplets_are_valid(sizes, seed):
    corpus = small_corpus(sizes, seed)
    rows = data.sample_triplets(corpus, 200, seed)
    ids = corpus.point_ids
    assert np.all(ids[rows[:, 0]] == ids[rows[:, 1]])
    assert np.all(rows[:, 0] != rows[:, 1])
    assert np.all(ids[rows[:, 2]] != ids[rows[:, 0]])
    corpus.triplet(rows[0])


def test_triplet_sampling_distribution():
    # anchor point uniform over the 3 matchable points; negative uniform over
    # the patches of other points
    corpus = small_corpus((3, 1, 4, 2))
    n = 60000
    rows = data.sample_triplets(corpus, n, 42)
    ids = corpus.point_ids
    anchors = ids[rows[:, 0]]
    for pid in (0, 20, 30):
        count = np.sum(anchors == pid)
        assert abs(count - n / 3) < 3 * np.sqrt(n * (1 / 3) * (2 / 3))
    assert not np.any(anchors == 10)
    # given anchor point 0 (3 patches), the negative is one of the other 7 patches
    neg = rows[anchors == 0, 2]
    m = len(neg)
    counts = np.bincount(neg, minlength=len(ids))
    others = np.flatnonzero(ids != 0)
    for k in others:
        assert abs(counts[k] - m / 7) < 3 * np.sqrt(m * (1 / 7) * (6 / 7))
    # positive pair uniform over ordered distinct pairs of the point
    pos = rows[anchors == 20][:, :2]
    keys, freq = np.unique(pos, axis=0, return_counts=True)
    assert len(keys) == 12
    p = 1 / 12
    assert np.all(np.abs(freq - len(pos) * p) < 3.5 * np.sqrt(len(pos) * p * (1 - p)))


def test_pair_sampling_fraction():
    corpus = small_corpus((3, 1, 4, 2))
    n = 20000
    pairs = data.sample_pairs(corpus, n, 1, positive_fraction=0.25)
    pos = np.sum(pairs.labels == 1)
    assert abs(pos - n / 4) < 3 * np.sqrt(n * 0.25 * 0.75)
    same = corpus.point_ids[pairs.left] == corpus.point_ids[pairs.right]
    np.testing.assert_array_equal(same, pairs.labels == 1)
    assert np.all(pairs.left != pairs.right)


def test_sampling_is_reproducible():
    corpus = small_corpus()
    a = data.sample_triplets(corpus, 100, data.epoch_seed(3, 2))
    b = data.sample_triplets(corpus, 100, data.epoch_seed(3, 2))
    c = data.sample_triplets(corpus, 100, data.epoch_seed(3, 3))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_sampling_needs_matchable_points():
    with pytest.raises(DataError):
        data.sample_triplets(small_corpus((1, 1, 1)), 5, 0)
    with pytest.raises(DataError):
        data.sample_triplets(small_corpus((4,)), 5, 0)


def test_decompose_triplets():
    pairs = data.decompose_triplets([[1, 2, 3], [4, 5, 6]])
    np.testing.assert_array_equal(pairs.left, [1, 1, 2, 4, 4, 5])
    np.testing.assert_array_equal(pairs.right, [2, 3, 3, 5, 6, 6])
    np.testing.assert_array_equal(pairs.labels, [1, -1, -1, 1, -1, -1])


def test_toy_corpus_spec():
    spec = data.ToyCorpusSpec(num_points=5, patches_per_point=4, seed=2)
    a = data.make_toy_corpus(spec)
    b = data.make_toy_corpus(spec)
    assert len(a) == 20 and a.num_points() == 5
    np.testing.assert_array_equal(a.pixels, b.pixels)
    with pytest.raises(DataError):
        data.ToyCorpusSpec(num_points=1)
    with pytest.raises(DataError):
        data.ToyCorpusSpec(rotation=-1)


def test_zero_jitter_views_are_identical():
    spec = data.ToyCorpusSpec(num_points=3, patches_per_point=3, translation=0, rotation=0,
                              brightness=0)
    c = data.make_toy_corpus(spec)
    for pid in range(3):
        views = c.pixels[c.point_ids == pid]
        assert np.all(views == views[0])
    assert not np.array_equal(c.pixels[0], c.pixels[3])


def test_toy_views_resemble_their_point():
    c = data.make_toy_corpus(data.ToyCorpusSpec(num_points=20, patches_per_point=4))
    flat = c.normalized().reshape(len(c), -1)
    d = np.linalg.norm(flat[:, None] - flat[None], axis=2)
    same = c.point_ids[:, None] == c.point_ids[None]
    off = ~np.eye(len(c), dtype=bool)
    assert d[same & off].mean() < d[~same].mean()
