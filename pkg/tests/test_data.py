import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image
from scipy.stats import chisquare

from depthcomp.data import (Dataset, FrameRecord, bottom_crop_box, depth_to_raw, elevation_bins, frame_index_from_name,
                            kept_bins, load_calibration, load_depth_png, load_depth_raw, load_rgb, neighbor_candidates,
                            save_depth_png, save_depth_raw, save_rgb, select_neighbor, sequence_id_from_path,
                            subsample_scanlines, subsample_uniform)
from depthcomp.geometry import Intrinsics
from depthcomp.synthetic import lidar_scan, write_synthetic_dataset

SCAN_K = Intrinsics(300.0, 300.0, 200.0, 20.0)


def _scan():
    return lidar_scan(np.full((180, 400), 10.0), SCAN_K)


def _ring_rows():
    elev = np.deg2rad(np.linspace(-24.8, 2.0, 64))
    return np.rint(SCAN_K.cy - SCAN_K.fy * np.tan(elev)).astype(int)  # ring i -> row, ascending elevation


def _dataset(frames_by_seq):
    recs = [FrameRecord(f"{s}/{f}.png", "", None, "", s, f) for s, frames in frames_by_seq.items() for f in frames]
    return Dataset(recs)


# -- PNG and calibration ---------------------------------------------------------

def test_depth_png_examples(tmp_path):
    raw = np.array([[0, 256, 512], [65535, 1, 300]], dtype=np.uint16)
    p = str(tmp_path / "d.png")
    save_depth_raw(p, raw)
    np.testing.assert_array_equal(load_depth_raw(p), raw)
    d = load_depth_png(p)
    assert d[0, 0] == 0.0 and d[0, 1] == 1.0 and d[0, 2] == 2.0
    save_depth_png(str(tmp_path / "e.png"), d)
    np.testing.assert_array_equal(load_depth_raw(str(tmp_path / "e.png")), raw)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_depth_png_round_trip_bit_identical(tmp_path_factory, seed):
    raw = np.random.default_rng(seed).integers(0, 65536, (7, 9)).astype(np.uint16)
    p = str(tmp_path_factory.mktemp("png") / "x.png")
    save_depth_raw(p, raw)
    np.testing.assert_array_equal(depth_to_raw(load_depth_png(p)), raw)


def test_depth_png_wrong_format_rejected(tmp_path):
    p = str(tmp_path / "rgb.png")
    Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(p)
    with pytest.raises(ValueError, match="3 channels"):
        load_depth_png(p)
    p8 = str(tmp_path / "gray8.png")
    Image.fromarray(np.zeros((4, 4), np.uint8)).save(p8)
    with pytest.raises(ValueError, match="16-bit"):
        load_depth_png(p8)


def test_depth_to_raw_floor():
    raw = depth_to_raw(np.array([0.0, 0.2, 5.0]), min_depth=0.9)
    assert (raw / 256.0 >= 0.9).all() and raw[2] == 1280


def test_rgb_round_trip(tmp_path):
    rgb = np.random.default_rng(0).integers(0, 256, (3, 5, 6)) / 255.0
    save_rgb(str(tmp_path / "c.png"), rgb)
    np.testing.assert_allclose(load_rgb(str(tmp_path / "c.png")), rgb, atol=1e-7)


@pytest.mark.parametrize("text", [
    "721.5 721.5 609.6 172.9\n",
    "K: 721.5 0 609.6 0 721.5 172.9 0 0 1\n",
    "P_rect_00: 1 0 0 0 0 1 0 0 0 0 1 0\nP_rect_02: 721.5 0 609.6 44.9 0 721.5 172.9 0.2 0 0 1 0.003\n",
    "P2: 721.5 0 609.6 44.9 0 721.5 172.9 0.2 0 0 1 0.003\n",
])
def test_calibration_formats(tmp_path, text):
    p = tmp_path / "calib.txt"
    p.write_text(text)
    assert load_calibration(str(p)) == Intrinsics(721.5, 721.5, 609.6, 172.9)


def test_calibration_errors(tmp_path):
    p = tmp_path / "calib.txt"
    p.write_text("K: 1 2 3\n")
    with pytest.raises(ValueError, match="9 values"):
        load_calibration(str(p))
    p.write_text("nothing useful here\n")
    with pytest.raises(ValueError):
        load_calibration(str(p))


# -- naming, manifests and crops -------------------------------------------------

def test_naming_helpers():
    assert frame_index_from_name("a/b/0000000042.png") == 42
    assert sequence_id_from_path("2011_09_26_drive_0001_sync/image_02/data/0000000005.png") \
        == "2011_09_26_drive_0001_sync"
    with pytest.raises(ValueError):
        frame_index_from_name("x/frame.png")
    assert bottom_crop_box(375, 1242, 352, 1216) == (23, 13)
    with pytest.raises(ValueError):
        bottom_crop_box(10, 10, 12, 10)


def test_manifest_loading_and_crop(tmp_path):
    manifest = write_synthetic_dataset(str(tmp_path), n_sequences=2, n_frames=3, h=40, w=70)
    full = Dataset.from_manifest(manifest)
    assert len(full) == 6 and len(full.sequences()) == 2
    s = full[0]
    assert s.rgb.shape == (1, 3, 40, 70) and s.d_sparse.shape == (1, 1, 40, 70)
    assert s.annotation is not None and (s.annotation > 0).mean() > (s.d_sparse > 0).mean()
    cropped = Dataset.from_manifest(manifest, crop=(32, 64))[0]
    assert cropped.rgb.shape == (1, 3, 32, 64)
    np.testing.assert_array_equal(cropped.d_sparse[0, 0], s.d_sparse[0, 0, 8:, 3:67])
    assert cropped.intrinsics.cx == pytest.approx(s.intrinsics.cx - 3)
    assert cropped.intrinsics.cy == pytest.approx(s.intrinsics.cy - 8)


def test_manifest_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        Dataset.from_manifest(str(tmp_path / "missing.txt"))
    bad = tmp_path / "m.txt"
    bad.write_text("a b c\n")
    with pytest.raises(ValueError, match="4 fields"):
        Dataset.from_manifest(str(bad))


# -- neighbours ------------------------------------------------------------------

def test_neighbor_candidate_examples():
    frames = list(range(11))
    assert neighbor_candidates(frames, 5) == [2, 3, 4, 6, 7, 8]
    assert neighbor_candidates(frames, 0) == [1, 2, 3, 4, 5, 6]
    assert neighbor_candidates(frames, 10) == [4, 5, 6, 7, 8, 9]
    assert neighbor_candidates([3, 4], 3) == [4]
    assert neighbor_candidates([7], 7) == []


def test_select_neighbor_stays_in_sequence():
    ds = _dataset({"a": range(11), "b": range(3), "c": [0]})
    rng = np.random.default_rng(0)
    for i, rec in enumerate(ds.records):
        nb = select_neighbor(ds, i, rng)
        if rec.sequence_id == "c":
            assert nb is None
        else:
            assert nb != i and ds.records[nb].sequence_id == rec.sequence_id


def test_select_neighbor_is_uniform():
    ds = _dataset({"a": range(11)})
    rng = np.random.default_rng(123)
    draws = [ds.records[select_neighbor(ds, 5, rng)].frame_index for _ in range(10_000)]
    values, counts = np.unique(draws, return_counts=True)
    assert values.tolist() == [2, 3, 4, 6, 7, 8]
    assert chisquare(counts).pvalue > 0.01


# -- scanlines -------------------------------------------------------------------

def test_synthetic_scan_bins_match_rings():
    scan = _scan()
    bins = elevation_bins(scan, SCAN_K)
    for ring, row in enumerate(_ring_rows()):
        measured = scan[row] > 0
        assert measured.any() and np.all(bins[row][measured] == ring)
    assert np.all(bins[scan == 0] == -1)


def test_scanline_examples():
    scan = _scan()
    np.testing.assert_array_equal(subsample_scanlines(scan, 64, SCAN_K), scan)
    half = subsample_scanlines(scan, 32, SCAN_K)
    assert (half > 0).sum() == (scan > 0).sum() // 2
    rows = _ring_rows()
    for ring, row in enumerate(rows):
        assert (half[row] > 0).any() == (ring % 2 == 0)
    one = subsample_scanlines(scan, 1, SCAN_K)
    bins = elevation_bins(scan, SCAN_K)
    assert np.unique(bins[one > 0]).size == 1
    for bad in (0, 65):
        with pytest.raises(ValueError):
            subsample_scanlines(scan, bad, SCAN_K)


@pytest.mark.parametrize("n", [1, 2, 7, 16, 32, 63, 64])
def test_kept_bins_spacing(n):
    kb = kept_bins(n)
    assert kb.size == n and kb[0] == 0 and np.all(np.diff(kb) > 0) and kb[-1] < 64


# -- uniform subsampling ---------------------------------------------------------

def _thousand_points(seed=0):
    rng = np.random.default_rng(seed)
    d = np.zeros((50, 60))
    d.flat[rng.choice(d.size, 1000, replace=False)] = rng.uniform(1, 80, 1000)
    return d


def test_uniform_examples():
    d = _thousand_points()
    assert (subsample_uniform(d, 100, seed=1) > 0).sum() == 100
    np.testing.assert_array_equal(subsample_uniform(d, 5000), d)
    np.testing.assert_array_equal(subsample_uniform(d, 1000), d)
    assert not subsample_uniform(d, 0).any()
    with pytest.raises(ValueError):
        subsample_uniform(d, -1)


def test_uniform_seeding():
    d = _thousand_points()
    np.testing.assert_array_equal(subsample_uniform(d, 100, seed=4), subsample_uniform(d, 100, seed=4))
    assert not np.array_equal(subsample_uniform(d, 100, seed=4) > 0, subsample_uniform(d, 100, seed=5) > 0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(0, 1200), lines=st.integers(1, 64))
def test_subsampling_is_dominated(seed, n, lines):
    d = _thousand_points(seed % 7)
    for out in (subsample_uniform(d, n, seed), subsample_scanlines(d, lines, SCAN_K)):
        kept = out > 0
        assert np.all(out[kept] == d[kept])
        assert np.all(out[~kept] == 0)
