import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from _oracles import fid_direct, ifc_loop, ssim_bruteforce
from talkface import metrics, render
from talkface.corpus import VideoClip, synth_clip
from talkface.metrics import (
    MetricError,
    extract_mouth_params,
    fid,
    fid_from_embeddings,
    frechet_distance,
    ifc,
    lmd,
    lse,
    psnr,
    ssim,
)


@pytest.fixture(scope="module")
def clip():
    return synth_clip(11, 40, 0.25)


def checkerboard(n=8):
    r, c = np.indices((n, n))
    return ((r + c) % 2).astype(np.float64) * 0.8


# --------------------------------------------------------------------------
# SSIM / PSNR


def test_ssim_identity(clip):
    assert ssim(clip.frames[0], clip.frames[0]) == pytest.approx(1.0, abs=1e-6)
    assert ssim(clip.frames[:3], clip.frames[:3]) == pytest.approx(1.0, abs=1e-6)


def test_ssim_inverted_is_lower(clip):
    f = clip.frames[0]
    assert ssim(f, 1.0 - f) < 1.0


def test_ssim_checkerboard_matches_bruteforce():
    a = checkerboard()
    b = a + 0.1
    assert ssim(a, b) == pytest.approx(ssim_bruteforce(a, b), abs=1e-6)


def test_ssim_random_color_matches_bruteforce():
    rng = np.random.default_rng(0)
    a = rng.random((14, 17, 3))
    b = np.clip(a + 0.2 * rng.standard_normal(a.shape), 0, 1)
    assert ssim(a, b) == pytest.approx(ssim_bruteforce(a, b), abs=1e-6)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (12, 12), elements=st.floats(0, 1)), arrays(np.float64, (12, 12), elements=st.floats(0, 1)))
def test_ssim_symmetric_and_bounded(a, b):
    s = ssim(a, b)
    assert -1.0 - 1e-9 <= s <= 1.0 + 1e-9
    assert s == pytest.approx(ssim(b, a), abs=1e-6)


def test_ssim_shape_mismatch():
    with pytest.raises(MetricError):
        ssim(np.zeros((4, 4)), np.zeros((4, 5)))


def test_psnr():
    a = np.zeros((8, 8, 3))
    assert psnr(a, a) == metrics.PSNR_CAP
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
    rng = np.random.default_rng(1)
    x, y = rng.random((10, 10)), rng.random((10, 10))
    assert psnr(x, y) == pytest.approx(10 * np.log10(1.0 / np.mean((x - y) ** 2)), abs=1e-9)


# --------------------------------------------------------------------------
# FID


def test_fid_identity():
    rng = np.random.default_rng(2)
    e = rng.standard_normal((100, 16))
    assert fid_from_embeddings(e, e) == pytest.approx(0.0, abs=1e-6)


def test_fid_identity_with_tiny_covariance():
    e = 1e-4 * np.random.default_rng(8).standard_normal((40, 64))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert fid_from_embeddings(e, e) == pytest.approx(0.0, abs=1e-12)


def test_fid_matches_moment_oracle():
    rng = np.random.default_rng(3)
    base = rng.standard_normal((100, 12))
    a = base + 0.1 * rng.standard_normal(base.shape)
    b = 0.8 * base + 0.3 + 0.1 * rng.standard_normal(base.shape)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        got = fid_from_embeddings(a, b)
    assert got == pytest.approx(fid_direct(a, b), rel=1e-4)


def test_fid_on_images_with_embedder():
    rng = np.random.default_rng(4)
    set_a = rng.random((100, 4, 4, 3))
    set_b = np.clip(set_a + 0.05 * rng.standard_normal(set_a.shape), 0, 1)

    def embed(x):
        return x.reshape(len(x), -1)[:, :10]

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        got = fid(set_a, set_b, embed)
    assert got == pytest.approx(fid_direct(embed(set_a), embed(set_b)), rel=1e-4)
    assert got == pytest.approx(fid(set_b, set_a, embed), abs=1e-6)


def test_fid_constant_sets_is_mean_gap():
    a = np.tile([1.0, 2.0, 3.0], (10, 1))
    b = np.tile([0.0, 2.0, 5.0], (10, 1))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert fid_from_embeddings(a, b) == pytest.approx(5.0, abs=1e-9)


def test_fid_rank_deficient_is_real_and_non_negative():
    rng = np.random.default_rng(5)
    low = rng.standard_normal((20, 2)) @ rng.standard_normal((2, 30))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        v = fid_from_embeddings(low, low + 1e-9)
    assert np.isreal(v) and v >= 0.0


def test_frechet_symmetric():
    rng = np.random.default_rng(6)
    m = rng.standard_normal((6, 6))
    n = rng.standard_normal((6, 6))
    ca, cb = m @ m.T, n @ n.T
    mu_a, mu_b = rng.standard_normal(6), rng.standard_normal(6)
    assert frechet_distance(mu_a, ca, mu_b, cb) == pytest.approx(frechet_distance(mu_b, cb, mu_a, ca), abs=1e-6)


def test_fid_errors_and_small_sample_warning():
    with pytest.raises(MetricError):
        fid_from_embeddings(np.zeros((0, 4)), np.zeros((3, 4)))
    with pytest.warns(UserWarning, match="biased"):
        fid_from_embeddings(np.random.default_rng(0).random((5, 4)), np.random.default_rng(1).random((5, 4)))


# --------------------------------------------------------------------------
# IFC


def test_ifc_identity(clip):
    assert ifc(clip.frames, clip.frames) == 0.0


def test_ifc_alternating_against_static():
    gt = np.full((6, 4, 4), 0.5)
    gen = np.stack([np.full((4, 4), 0.4 if t % 2 else 0.6) for t in range(6)])
    assert ifc(gen, gt) == pytest.approx(0.2, abs=1e-12)


def test_ifc_matches_loop():
    rng = np.random.default_rng(7)
    a, b = rng.random((9, 5, 5, 3)), rng.random((9, 5, 5, 3))
    assert ifc(a, b) == pytest.approx(ifc_loop(a, b), abs=1e-7)


def test_ifc_errors():
    with pytest.raises(MetricError):
        ifc(np.zeros((1, 4, 4)), np.zeros((1, 4, 4)))
    with pytest.raises(MetricError):
        ifc(np.zeros((3, 4, 4)), np.zeros((4, 4, 4)))


# --------------------------------------------------------------------------
# mouth oracle + LMD


def test_mouth_round_trip_at_0_8():
    ident = render.make_identity(5)
    frame = render.render_face(ident, 0.8, 1.0, -1.5, 3.0)
    mp = extract_mouth_params(frame)
    assert mp.found
    assert mp.aperture == pytest.approx(0.8, abs=0.05)
    want = render.mouth_center(1.0, -1.5, 3.0)
    assert np.hypot(mp.center[0] - want[0], mp.center[1] - want[1]) <= 1.0


def test_closed_mouth_aperture_small():
    frame = render.render_face(render.make_identity(6), 0.0, 0.0, 0.0, 0.0)
    assert extract_mouth_params(frame).aperture <= 0.05


def test_blank_frame_not_found():
    with pytest.warns(UserWarning, match="not found"):
        mp = extract_mouth_params(np.zeros((96, 96, 3)))
    assert not mp.found and mp.aperture == 0.0


def test_lmd_round_trip(clip):
    assert lmd(clip.frames, clip) <= 0.05 * render.MAX_APERTURE_PX


def test_lmd_three_pixel_shift(clip):
    shifted = np.roll(clip.frames, 3, axis=1)
    assert lmd(shifted, clip) == pytest.approx(3.0, abs=0.05 * render.MAX_APERTURE_PX)


def test_lmd_unavailable_without_oracle(clip):
    real = VideoClip("real", clip.frames, clip.waveform)
    assert lmd(clip.frames, real) is None


def test_lmd_blank_frames_penalized(clip):
    assert lmd(np.zeros_like(clip.frames), clip) == pytest.approx(render.MAX_APERTURE_PX)


# --------------------------------------------------------------------------
# LSE + report


def test_lse_too_short(tiny_scorer, clip):
    with pytest.raises(MetricError, match="at least 31"):
        lse(clip.frames[:30], clip.waveform, tiny_scorer)


def test_lse_outputs(tiny_scorer, clip):
    c, d = lse(clip.frames, clip.waveform, tiny_scorer)
    assert c >= 0.0 and 0.0 <= d <= 2.0


def test_lse_confidence_zero_when_curve_is_flat(tiny_scorer, clip):
    # constant frames and digital silence: every offset sees the same pair
    frames = np.repeat(clip.frames[:1], clip.num_frames, axis=0)
    c, d = lse(frames, np.zeros_like(clip.waveform), tiny_scorer)
    assert c == pytest.approx(0.0, abs=1e-9)
    assert d >= 0.0


def test_evaluate_clips_flags_unavailable(clip, tiny_scorer):
    real = VideoClip("real", clip.frames, clip.waveform)
    report = metrics.evaluate_clips([("real", clip.frames, real)], scorer=None)
    assert report.lmd is None and report.fid is None and report.lse_d is None
    assert report.available["lmd"] is False and report.available["ssim"] is True
    assert report.ssim == pytest.approx(1.0, abs=1e-6)
    assert "unavailable" in report.table() and metrics.DESK_SCALE_BANNER in report.table()


def test_evaluate_clips_with_scorer(clip, tiny_scorer):
    report = metrics.evaluate_clips([(clip.clip_id, clip.frames, clip)], scorer=tiny_scorer)
    assert all(report.available.values())
    assert report.fid == pytest.approx(0.0, abs=1e-6)
    assert report.ifc == 0.0 and report.lse_d >= 0.0
    assert set(report.to_dict()["per_clip"]) == {clip.clip_id}
