import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crossloc.embed.checkpoint import load_checkpoint, save_checkpoint
from crossloc.embed.gradcheck import GradCheckConfig, gradient_check, random_triplet
from crossloc.embed.nets import (ImageNetShape, PointNetShape, embed_image, embed_images, embed_points,
                                 embed_volumes, init_image_params, init_point_params)
from crossloc.embed.optim import AdamState, adam_step
from crossloc.embed.train import TrainConfig, make_triplets, sample_negatives, train
from crossloc.errors import ConfigError, DataError, DatasetTooSmall, ShapeMismatch

SMALL_IMG = ImageNetShape((4, 4, 4), 8, 64)
SMALL_PTS = PointNetShape((8, 8, 8), 8, 64)


@pytest.fixture(scope="module")
def nets():
    return init_image_params(seed=3), init_point_params(seed=3)


def _patch(rng):
    p = rng.normal(size=(128, 128))
    return p - p.mean()


def _volume(rng, n=1024):
    v = rng.uniform(-1, 1, size=(n, 3))
    return v / np.linalg.norm(v, axis=1).max()


def test_default_shapes_and_unit_norm(nets, rng):
    img, pts = nets
    assert img["img.conv0.w"].shape == (1, 3, 3, 16)
    assert img["img.conv2.w"].shape == (32, 3, 3, 64)
    assert img["img.fc0.w"].shape == (64, 64) and img["img.fc1.w"].shape == (64, 128)
    assert pts["pt.mlp0.w"].shape == (3, 32) and pts["pt.mlp2.w"].shape == (64, 128)
    assert pts["pt.fc0.w"].shape == (128, 64) and pts["pt.fc1.w"].shape == (64, 128)
    d_img = embed_images(img, [_patch(rng) for _ in range(4)])
    d_pts = embed_volumes(pts, [_volume(rng) for _ in range(4)])
    assert d_img.shape == d_pts.shape == (4, 128)
    np.testing.assert_allclose(np.linalg.norm(d_img, axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(np.linalg.norm(d_pts, axis=1), 1.0, atol=1e-6)


def test_zero_patch_is_well_defined():
    # zero biases and zero input give an exactly zero pre-norm vector
    img = init_image_params(seed=0)
    d = embed_image(img, np.zeros((128, 128)))
    expected = np.zeros(128)
    expected[0] = 1.0
    np.testing.assert_array_equal(d, expected)


@settings(max_examples=20)
@given(seed=st.integers(0, 2**31 - 1))
def test_point_branch_permutation_invariant(seed):
    pts = init_point_params(SMALL_PTS, seed=1)
    rng = np.random.default_rng(seed)
    vol = _volume(rng, 256)
    a = embed_points(pts, vol)
    b = embed_points(pts, vol[rng.permutation(len(vol))])
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_batched_equals_single(nets, rng):
    img, pts = nets
    patches = [_patch(rng) for _ in range(3)]
    vols = [_volume(rng) for _ in range(3)]
    np.testing.assert_allclose(embed_images(img, patches, batch=2)[2], embed_image(img, patches[2]), atol=1e-12)
    np.testing.assert_allclose(embed_volumes(pts, vols, batch=2)[1], embed_points(pts, vols[1]), atol=1e-12)


def test_init_is_seeded():
    a, b = init_image_params(seed=5), init_image_params(seed=5)
    c = init_image_params(seed=6)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["img.conv0.w"], c["img.conv0.w"])
    assert all(not np.any(a[k]) for k in a if k.endswith(".b"))


def test_bad_shapes_rejected():
    with pytest.raises(ConfigError):
        init_image_params(ImageNetShape((), 64, 128))
    with pytest.raises(ConfigError):
        init_point_params(PointNetShape((32,), 64, 0))
    with pytest.raises(ConfigError):
        TrainConfig(D=100)


# optimizer

def test_adam_first_step_moves_by_lr():
    # after bias correction the first update is lr * sign(g) (up to eps)
    params = {"w": np.array([1.0, -2.0, 3.0])}
    grads = {"w": np.array([0.5, -4.0, 1e-3])}
    new, state = adam_step(params, grads, AdamState(), lr=0.1)
    np.testing.assert_allclose(new["w"], params["w"] - 0.1 * np.sign(grads["w"]), atol=1e-5)
    assert state.step == 1
    assert params["w"][0] == 1.0  # input untouched


def test_adam_matches_reference_recursion(rng):
    w = rng.normal(size=5)
    params, state = {"w": w.copy()}, AdamState()
    m = v = np.zeros(5)
    ref = w.copy()
    for t in range(1, 6):
        g = rng.normal(size=5)
        params, state = adam_step(params, {"w": g}, state, lr=0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(params["w"], ref, rtol=1e-12)


def test_adam_shape_checks():
    with pytest.raises(ShapeMismatch):
        adam_step({"w": np.zeros(3)}, {"w": np.zeros(4)}, AdamState(), 0.1)
    with pytest.raises(ShapeMismatch):
        adam_step({"w": np.zeros(3)}, {"v": np.zeros(3)}, AdamState(), 0.1)


# gradient check

def test_gradcheck_passes():
    res = gradient_check(trials=2)
    assert res.max_error <= 1e-4
    assert res.checked > 0 and res.straddled_fraction < 0.05


def test_gradcheck_detects_corruption():
    assert gradient_check(trials=1, corrupt=True).max_error > 1e-2


def test_gradcheck_deterministic():
    cfg = GradCheckConfig(seed=4)
    assert gradient_check(cfg, trials=1).max_error == gradient_check(cfg, trials=1).max_error


# checkpoint

def test_checkpoint_roundtrip(tmp_path):
    img, pts = init_image_params(SMALL_IMG, 1), init_point_params(SMALL_PTS, 1)
    path = tmp_path / "m.x2d3d"
    save_checkpoint(path, img, pts)
    img2, pts2, D = load_checkpoint(path)
    assert D == 64
    assert set(img2) == set(img) and set(pts2) == set(pts)
    assert all(np.array_equal(img[k], img2[k]) for k in img)
    assert all(np.array_equal(pts[k], pts2[k]) for k in pts)
    # rewriting is byte-identical
    save_checkpoint(tmp_path / "again.x2d3d", img2, pts2)
    assert (tmp_path / "again.x2d3d").read_bytes() == path.read_bytes()


@pytest.mark.parametrize("mangle", [
    lambda b: b"XXXXX" + b[5:],
    lambda b: b[:-8],
    lambda b: b + b"\0",
    lambda b: b[:5] + (99).to_bytes(4, "little") + b[9:],
])
def test_checkpoint_corruption_detected(tmp_path, mangle):
    path = tmp_path / "m.x2d3d"
    save_checkpoint(path, init_image_params(SMALL_IMG, 1), init_point_params(SMALL_PTS, 1))
    path.write_bytes(mangle(path.read_bytes()))
    with pytest.raises(DataError):
        load_checkpoint(path)


# training

def _toy_pairs(n_keys, views, seed=0):
    rng = np.random.default_rng(seed)
    pairs, groups = [], []
    for k in range(n_keys):
        vol = _volume(rng, 128)
        for _ in range(views):
            pairs.append((random_triplet(rng, 32, 8).anchor, vol))
            groups.append(k)
    return pairs, np.array(groups)


def test_negatives_differ_from_anchor_group(rng):
    groups = np.repeat(np.arange(5), 3)
    neg = sample_negatives(groups, rng)
    assert np.all(groups[neg] != groups)
    with pytest.raises(DatasetTooSmall):
        sample_negatives(np.zeros(4, dtype=int), rng)


def test_make_triplets_reproducible():
    pairs, groups = _toy_pairs(4, 2)
    a = make_triplets(pairs, seed=1, epoch=2, groups=groups)
    b = make_triplets(pairs, seed=1, epoch=2, groups=groups)
    assert [t.negative is u.negative for t, u in zip(a, b)] == [True] * len(a)
    assert all(t.anchor is p for t, (p, _) in zip(a, pairs))


def test_training_small_and_deterministic():
    pairs, groups = _toy_pairs(6, 2)
    cfg = TrainConfig(epochs=3, batch_size=4, D=64, image_channels=(4, 4, 4), point_widths=(8, 8, 8), hidden=8,
                      learning_rate=1e-3)
    a = train(pairs, cfg, groups=groups)
    b = train(pairs, cfg, groups=groups)
    assert len(a.history) == 3
    assert a.history == b.history
    assert all(np.array_equal(a.image_params[k], b.image_params[k]) for k in a.image_params)
    # the untrained network gives nearly equal distances, so the loss starts near ln 2
    assert abs(a.initial_loss - np.log(2)) < 0.15


def test_training_needs_two_keypoints():
    pairs, _ = _toy_pairs(1, 3)
    with pytest.raises(DatasetTooSmall):
        train(pairs, TrainConfig(epochs=1))
    with pytest.raises(DatasetTooSmall):
        train(pairs[:1], TrainConfig(epochs=1))
