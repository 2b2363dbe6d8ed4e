import math
import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from diwa.data import (
    ImageSample,
    augment_hflip,
    bicubic_resize,
    make_lr_hr_pair,
    synth_dataset,
)
from diwa.tensor import Tensor
from diwa.wavelet import WaveletSubbands


def keys(x, a=-0.5):
    x = abs(x)
    if x <= 1:
        return (a + 2) * x**3 - (a + 3) * x**2 + 1
    if x < 2:
        return a * (x**3 - 5 * x**2 + 8 * x - 4)
    return 0.0


def reference_resize_1d(v, n_out, antialias):
    """Pointwise resampler written straight from the kernel definition."""
    n_in = len(v)
    s = n_in / n_out
    k = max(s, 1.0) if antialias else 1.0
    out = []
    for o in range(n_out):
        centre = (o + 0.5) * s - 0.5
        acc = norm = 0.0
        j = math.floor(centre - 2 * k) - 1
        while j <= centre + 2 * k + 1:
            wgt = keys((j - centre) / k)
            acc += wgt * v[min(max(j, 0), n_in - 1)]
            norm += wgt
            j += 1
        out.append(acc / norm)
    return np.array(out)


def reference_resize(img, oh, ow, antialias=True):
    rows = np.array([[reference_resize_1d(img[c, :, x], oh, antialias) for x in range(img.shape[2])] for c in range(img.shape[0])])
    rows = rows.transpose(0, 2, 1)  # (C, oh, w)
    return np.array([[reference_resize_1d(rows[c, y], ow, antialias) for y in range(oh)] for c in range(img.shape[0])])


def bandlimited_ramp(h, w):
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    base = 0.2 + 0.5 * xx / w + 0.1 * np.sin(2 * np.pi * yy / h)
    return np.stack([base, 1 - base, 0.5 + 0.2 * np.cos(2 * np.pi * (xx + yy) / w)])


# --- bicubic ----------------------------------------------------------------


def test_identity_resize(rng):
    x = rng.random((3, 9, 7))
    out = bicubic_resize(x, 9, 7)
    assert np.max(np.abs(out - x)) <= 1e-12
    out[0, 0, 0] = -1
    assert x[0, 0, 0] != -1


@pytest.mark.parametrize("size", [(1, 1), (5, 13), (32, 32), (64, 48)])
def test_constant_image_stays_constant(size):
    out = bicubic_resize(np.full((2, 16, 24), 0.42), *size)
    assert out.shape == (2, *size)
    assert np.allclose(out, 0.42, rtol=0, atol=1e-14)


def test_down_up_matches_reference_resampler():
    hr = bandlimited_ramp(32, 32)
    down = bicubic_resize(hr, 8, 8, antialias=True)
    up = bicubic_resize(down, 32, 32, antialias=True)
    ref_down = reference_resize(hr, 8, 8)
    ref_up = reference_resize(ref_down, 32, 32)
    assert np.max(np.abs(down - ref_down)) <= 1e-3
    assert np.max(np.abs(up - ref_up)) <= 1e-3


def test_random_resize_matches_reference(rng):
    img = rng.random((1, 10, 14))
    for oh, ow, aa in [(5, 7, True), (20, 9, True), (4, 28, False)]:
        assert np.max(np.abs(bicubic_resize(img, oh, ow, aa) - reference_resize(img, oh, ow, aa))) <= 1e-12


def test_resize_rejects_bad_size():
    with pytest.raises(ValueError):
        bicubic_resize(np.zeros((1, 4, 4)), 0, 4)


# --- pairs ------------------------------------------------------------------


def test_pair_shapes():
    s = make_lr_hr_pair(np.full((3, 32, 32), 0.5), 4)
    assert s.hr.shape == s.lr_up.shape == (3, 32, 32)
    assert s.lr.shape == (3, 8, 8)
    assert s.scale == 4


def test_constant_hr_roundtrips_exactly():
    hr = np.full((3, 16, 16), 0.6)
    s = make_lr_hr_pair(hr, 4)
    assert np.allclose(s.lr_up, hr, rtol=0, atol=1e-14)


def test_nyquist_checkerboard_is_removed():
    cb = (np.indices((32, 32)).sum(0) % 2).astype(float)[None]
    s = make_lr_hr_pair(cb, 4)
    # the same figure through the independent resampler
    ref = reference_resize(reference_resize(cb, 8, 8), 32, 32)
    assert np.max(np.abs(ref - 0.5)) <= 0.1
    assert np.max(np.abs(s.lr_up - 0.5)) <= 0.1


def test_pair_divisibility_error():
    with pytest.raises(ValueError):
        make_lr_hr_pair(np.zeros((3, 20, 20)), 4)


@given(st.integers(0, 2**31 - 1))
def test_pair_range_and_determinism(seed):
    hr = np.random.default_rng(seed).random((3, 16, 16))
    a, b = make_lr_hr_pair(hr, 2), make_lr_hr_pair(hr, 2)
    assert a.lr_up.tobytes() == b.lr_up.tobytes()
    for arr in (a.hr, a.lr, a.lr_up):
        assert arr.min() >= 0.0 and arr.max() <= 1.0


# --- corpus -----------------------------------------------------------------


def test_synth_dataset_deterministic():
    a, b = synth_dataset(6, 32, 32, seed=7), synth_dataset(6, 32, 32, seed=7)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))
    c = synth_dataset(6, 32, 32, seed=8)
    assert not np.array_equal(a[0], c[0])


def test_synth_images_are_per_index():
    a = synth_dataset(5, 16, 16, seed=3)
    b = synth_dataset(3, 16, 16, seed=3)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_synth_range_and_detail_energy():
    for img in synth_dataset(40, 32, 32, seed=7):
        assert img.shape == (3, 32, 32)
        assert img.min() >= 0.0 and img.max() <= 1.0
        s = WaveletSubbands.from_image(Tensor(img[None]))
        detail = sum(float(np.sum(b.data**2)) for b in (s.V, s.H, s.D))
        assert detail > 0.0


def test_synth_budget():
    t0 = time.perf_counter()
    synth_dataset(200, 32, 32, seed=7)
    assert time.perf_counter() - t0 < 5.0


def test_synth_rejects_empty():
    with pytest.raises(ValueError):
        synth_dataset(0, 8, 8, seed=0)


# --- augmentation -----------------------------------------------------------


def sample_pair(rng):
    return make_lr_hr_pair(rng.random((3, 16, 16)), 4)


def test_forced_flip_is_involution(rng):
    s = sample_pair(rng)
    back = augment_hflip(augment_hflip(s, None, force=True), None, force=True)
    assert np.array_equal(back.hr, s.hr) and np.array_equal(back.lr_up, s.lr_up)


def test_flip_pairs_hr_and_lr(rng):
    s = sample_pair(rng)
    r = np.random.default_rng(0)
    for _ in range(50):
        out = augment_hflip(s, r)
        hr_flipped = not np.array_equal(out.hr, s.hr)
        assert np.array_equal(out.hr, s.hr[..., ::-1]) == hr_flipped
        assert np.array_equal(out.lr_up, s.lr_up[..., ::-1] if hr_flipped else s.lr_up)


def test_flip_rate():
    s = ImageSample(hr=np.arange(4.0).reshape(1, 1, 4), lr_up=np.arange(4.0).reshape(1, 1, 4), scale=1)
    r = np.random.default_rng(2024)
    flips = sum(augment_hflip(s, r).hr[0, 0, 0] == 3.0 for _ in range(10_000))
    assert abs(flips / 10_000 - 0.5) <= 0.02
