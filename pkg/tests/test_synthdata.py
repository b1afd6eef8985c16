import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from keymotion import synthdata as S

TINY = S.SynthSpec(seed=3, num_videos=2, frames_per_video=3, size=32)


def test_generation_is_deterministic(tmp_path):
    S.generate_dataset(TINY, tmp_path / "a")
    S.generate_dataset(TINY, tmp_path / "b")
    ha = S.tree_sha256(tmp_path / "a")
    hb = S.tree_sha256(tmp_path / "b")
    assert ha == hb
    other = S.SynthSpec(seed=4, num_videos=2, frames_per_video=3, size=32)
    S.generate_dataset(other, tmp_path / "c")
    assert S.tree_sha256(tmp_path / "c") != ha


def test_video_rng_streams_are_independent_of_count():
    a = S.SynthSpec(seed=5, num_videos=2, frames_per_video=2, size=32)
    b = S.SynthSpec(seed=5, num_videos=7, frames_per_video=2, size=32)
    fa, la, _ = S.render_video(a, 1)
    fb, lb, _ = S.render_video(b, 1)
    assert_array_equal(fa, fb)
    assert_array_equal(la, lb)


def test_tracks_match_rendered_motion():
    frames, loc, cov = S.render_video(TINY, 0)
    t = TINY.frames_per_video
    assert frames.shape == (t, 32, 32, 3)
    assert loc.shape[0] == t and cov.shape[:2] == loc.shape[:2]
    assert frames.min() >= 0.0 and frames.max() <= 1.0
    assert np.abs(loc).max() < 1.0  # bounce script keeps shapes inside
    # covariances are symmetric positive definite throughout
    assert_allclose(cov, np.swapaxes(cov, -1, -2), atol=1e-15)
    assert np.linalg.eigvalsh(cov).min() > 0
    # something actually moves
    assert np.abs(loc[1] - loc[0]).max() > 0


def test_split_arithmetic():
    def split(n):
        spec = S.SynthSpec(num_videos=n)
        n_test = max(1, spec.num_videos // 10) if spec.num_videos > 1 else 0
        return spec.num_videos - n_test, n_test
    assert split(200) == (180, 20)
    assert split(6) == (5, 1)
    assert split(1) == (1, 0)


def test_dataset_loading_round_trip(tmp_path):
    S.generate_dataset(TINY, tmp_path / "d")
    ds = S.Dataset(tmp_path / "d")
    assert len(ds) == 2
    assert ds.split_indices("train") == [0]
    assert ds.split_indices("test") == [1]
    frames, loc, cov = S.render_video(TINY, 0)
    got = ds.frames_float(0)
    assert got.shape == (3, 3, 32, 32)
    # uint8 quantization is the only loss
    assert np.abs(np.moveaxis(got, 1, 3) - frames).max() <= 0.5 / 255 + 1e-12
    tl, tc = ds.videos[0]["track"]
    assert_allclose(tl, loc, atol=1e-12)
    assert_allclose(tc, cov, atol=1e-12)


def test_frames_float_dtype():
    spec = S.SynthSpec(seed=6, num_videos=1, frames_per_video=2, size=32)
    import tempfile
    with tempfile.TemporaryDirectory() as d:
        S.generate_dataset(spec, d)
        ds = S.Dataset(d)
        assert ds.frames_float(0, dtype=np.float32).dtype == np.float32
        assert ds.frames_float(0).dtype == np.float64


def test_dataset_rejects_single_frame_video(tmp_path):
    S.generate_dataset(TINY, tmp_path / "d")
    manifest = tmp_path / "d" / "manifest.txt"
    text = manifest.read_text().replace("video_000, train, 3",
                                        "video_000, train, 1")
    manifest.write_text(text)
    with pytest.raises(ValueError):
        S.Dataset(tmp_path / "d")


def test_metric_l1_oracle():
    a = np.zeros((2, 3, 4, 4))
    b = np.full((2, 3, 4, 4), 0.25)
    assert S.metric_l1(a, b) == 0.25
    assert S.metric_l1(a, a) == 0.0
    with pytest.raises(ValueError):
        S.metric_l1(a, np.zeros((2, 3, 4, 5)))


def test_metric_akd_handles_permutation_and_offset():
    base = np.array([[[-0.5, -0.5], [0.5, 0.5]], [[-0.4, -0.5], [0.5, 0.4]]])
    shifted = base[:, ::-1, :] + 2.0 / 64.0  # swap order, shift 1px diagonally
    akd = S.metric_akd(base, shifted, image_size=64)
    assert_allclose(akd, np.sqrt(2.0), atol=1e-12)  # 1px in x and y


def test_metric_akd_rectangular():
    a = np.zeros((2, 3, 2))
    a[:, 1] = 0.9
    a[:, 2] = -0.9
    b = np.zeros((2, 1, 2)) + 3.0 * 2.0 / 64.0
    # only the nearest of the 3 is matched
    assert_allclose(S.metric_akd(a, b, 64), 3.0 * np.sqrt(2.0), atol=1e-12)


def test_metric_akd_validation():
    with pytest.raises(ValueError):
        S.metric_akd(np.zeros((2, 1, 2)), np.zeros((3, 1, 2)), 64)
    with pytest.raises(ValueError):
        S.match_keypoints(np.zeros((2, 0, 2)), np.zeros((2, 1, 2)))
