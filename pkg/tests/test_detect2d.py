import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from crossloc.detect2d import (PATCH_SIZE, DogParams, Keypoint2D, Rejected, detect_dog_keypoints, extract_patch,
                               nms_keypoints_2d, patch_side, patches_for_keypoints, preprocess_patch)
from crossloc.errors import ConfigError, ImageTooSmall


def blob(shape, center, sigma, amp=1.0):
    yy, xx = np.mgrid[:shape[0], :shape[1]]
    return amp * np.exp(-((xx - center[0]) ** 2 + (yy - center[1]) ** 2) / (2 * sigma**2))


def test_single_blob_center_and_scale():
    img = blob((200, 240), (101.3, 87.6), 4.0)
    kps = detect_dog_keypoints(img)
    top = kps[0]
    assert np.hypot(top.u - 101.3, top.v - 87.6) < 0.5
    assert 3.0 <= top.scale <= 5.0


def test_upsampled_blob_center():
    img = blob((200, 240), (101.3, 87.6), 4.0)
    top = detect_dog_keypoints(img, upsample=True)[0]
    assert np.hypot(top.u - 101.3, top.v - 87.6) < 0.25


def test_two_blobs_two_keypoints():
    img = blob((160, 320), (60, 80), 4.0) + blob((160, 320), (250, 70), 4.0)
    kps = [k for k in detect_dog_keypoints(img) if k.response > 0.05]
    centers = {(round(k.u / 10), round(k.v / 10)) for k in kps}
    assert {(6, 8), (25, 7)} <= centers


def test_blank_image_has_no_keypoints():
    assert detect_dog_keypoints(np.full((100, 100), 0.5)) == []


def test_small_image_rejected():
    with pytest.raises(ImageTooSmall):
        detect_dog_keypoints(np.zeros((32, 100)))


def test_edge_responses_rejected():
    yy, xx = np.mgrid[:128, :128]
    img = (xx > 64 + 1.5 * np.sin(yy / 7.0)).astype(float)  # wavy step edge
    strict = detect_dog_keypoints(img)
    loose = detect_dog_keypoints(img, edge_threshold=1e9)
    assert len(strict) < len(loose)


def test_patch_side_and_scale_rule():
    assert patch_side(1.0) == 256
    assert patch_side(2.0) == 128
    assert patch_side(0.5) == 256
    img = np.zeros((600, 600))
    assert extract_patch(img, Keypoint2D(300, 300, 5.0)) == Rejected("ScaleTooLarge")
    assert extract_patch(img, Keypoint2D(20, 300, 2.0)) == Rejected("OutOfBounds")
    raw = extract_patch(img, Keypoint2D(300, 300, 4.0))
    assert raw.shape == (64, 64)


def test_preprocess_gives_zero_mean_128(rng):
    p = preprocess_patch(rng.uniform(size=(64, 64)))
    assert p.pixels.shape == (PATCH_SIZE, PATCH_SIZE)
    assert abs(p.pixels.mean()) < 1e-12


def test_patch_center_sample_is_keypoint_pixel():
    img = np.zeros((300, 300))
    img[150, 170] = 1.0
    raw = extract_patch(img, Keypoint2D(170.5, 150.5, 2.0))  # even side: center between pixels
    assert raw.shape == (128, 128)
    assert raw[63:65, 63:65].sum() == pytest.approx(1.0)


@given(st.lists(st.tuples(st.floats(0, 500), st.floats(0, 400), st.floats(0.01, 1)), max_size=40))
def test_nms_spacing_property(items):
    kps = [Keypoint2D(u, v, 2.0, r) for u, v, r in items]
    out = nms_keypoints_2d(kps, 32.0)
    for i, a in enumerate(out):
        for b in out[i + 1:]:
            assert np.hypot(a.u - b.u, a.v - b.v) > 32.0
    # every suppressed keypoint lies near a kept one with at least its response
    for k in kps:
        assert any(np.hypot(k.u - o.u, k.v - o.v) <= 32.0 and o.response >= k.response for o in out)


def test_patches_for_keypoints_filters(rng):
    img = rng.uniform(size=(300, 300))
    kps = [Keypoint2D(150, 150, 2.0), Keypoint2D(5, 5, 2.0), Keypoint2D(150, 150, 9.0)]
    patches, kept = patches_for_keypoints(img, kps)
    assert kept == [kps[0]] and len(patches) == 1


def test_dog_params_validate():
    with pytest.raises(ConfigError):
        DogParams(base_size=255)
