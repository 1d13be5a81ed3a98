import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from depthcomp.metrics import (EMPTY_REPORT, evaluate, evaluate_many, power_law_fit, read_metrics_csv,
                               read_points_csv, write_metrics_csv, write_power_law_csv)
from metric_fixtures import FIXTURES


@pytest.mark.parametrize("name,pred,gt,expected", FIXTURES, ids=[f[0] for f in FIXTURES])
def test_metric_fixtures(name, pred, gt, expected):
    rep = evaluate(pred, gt)
    got = (rep.rmse_mm, rep.mae_mm, rep.irmse_per_km, rep.imae_per_km)
    for g, e in zip(got, expected[:4]):
        assert g == pytest.approx(e, rel=1e-9, abs=1e-12)
    assert rep.valid_pixel_count == expected[4]


def test_empty_report():
    rep = evaluate(np.ones((2, 2)), np.zeros((2, 2)))
    assert rep == EMPTY_REPORT and not rep.defined
    with pytest.raises(ValueError):
        evaluate(np.ones((2, 2)), np.ones((2, 3)))


def _random_pair(seed):
    rng = np.random.default_rng(seed)
    gt = np.where(rng.random((6, 7)) < 0.6, rng.uniform(1, 80, (6, 7)), 0.0)
    pred = rng.uniform(1, 80, (6, 7))
    return pred, gt


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_metric_properties(seed):
    pred, gt = _random_pair(seed)
    rep = evaluate(pred, gt)
    if not rep.defined:
        return
    assert rep.rmse_mm >= rep.mae_mm - 1e-9 and rep.irmse_per_km >= rep.imae_per_km - 1e-9
    mask = gt > 0
    swapped = evaluate(np.where(mask, gt, 0), np.where(mask, pred, 0))
    for a, b in zip(rep.as_row()[:4], swapped.as_row()[:4]):
        assert float(a) == pytest.approx(float(b), rel=1e-12)
    altered = np.where(mask, pred, -123.0)
    assert evaluate(altered, gt) == rep


def test_evaluate_many_pooled_and_mean():
    pairs = [_random_pair(s) for s in range(3)] + [(np.ones((2, 2)), np.zeros((2, 2)))]
    per, pooled, mean = evaluate_many([p for p, _ in pairs], [g for _, g in pairs])
    assert len(per) == 4 and not per[3].defined
    all_p = np.concatenate([p[g > 0] for p, g in pairs])
    all_g = np.concatenate([g[g > 0] for _, g in pairs])
    assert pooled.rmse_mm == pytest.approx(np.sqrt(np.mean((all_p - all_g) ** 2)) * 1000, rel=1e-12)
    assert mean.mae_mm == pytest.approx(np.mean([r.mae_mm for r in per[:3]]), rel=1e-12)
    assert pooled.valid_pixel_count == mean.valid_pixel_count == all_g.size


def test_metrics_csv_round_trip(tmp_path):
    pairs = [_random_pair(s) for s in range(2)]
    per, pooled, mean = evaluate_many([p for p, _ in pairs], [g for _, g in pairs])
    path = str(tmp_path / "m.csv")
    write_metrics_csv(path, ["a", "b"], per, pooled, mean)
    rows = read_metrics_csv(path)
    assert list(rows) == ["a", "b", "aggregate_pooled", "aggregate_frame_mean"]
    assert rows["a"]["rmse_mm"] == per[0].rmse_mm
    assert rows["aggregate_pooled"]["valid_pixels"] == pooled.valid_pixel_count


def test_power_law_examples():
    pts = [(n, 100.0 * n ** -0.5) for n in (10, 100, 1000, 10000)]
    fit = power_law_fit(pts)
    assert fit.c == pytest.approx(100.0, abs=1e-6)
    assert fit.p == pytest.approx(-0.5, abs=1e-6)
    assert fit.r_squared == pytest.approx(1.0, abs=1e-6)
    flat = power_law_fit([(10, 3.0), (100, 3.0), (1000, 3.0)])
    assert flat.p == pytest.approx(0.0, abs=1e-12) and flat.c == pytest.approx(3.0)


def test_power_law_rejections():
    with pytest.raises(ValueError):
        power_law_fit([(10, 1.0), (100, 0.5)])
    with pytest.raises(ValueError):
        power_law_fit([(10, 1.0), (100, 0.0), (1000, 0.2)])
    with pytest.raises(ValueError):
        power_law_fit([(0, 1.0), (100, 0.5), (1000, 0.2)])
    with pytest.raises(ValueError):
        power_law_fit([(10, 1.0), (10, 0.5), (10, 0.2)])


@settings(max_examples=30, deadline=None)
@given(c=st.floats(0.1, 1e4), p=st.floats(-2.0, 0.5))
def test_power_law_recovers_parameters(c, p):
    fit = power_law_fit([(n, c * n ** p) for n in (50, 200, 800, 3200, 12800)])
    assert fit.p == pytest.approx(p, abs=1e-8)
    assert fit.c == pytest.approx(c, rel=1e-8)


def test_power_law_csv(tmp_path):
    pts = [(n, 5.0 * n ** -0.3) for n in (10, 100, 1000)]
    fit = power_law_fit(pts)
    path = tmp_path / "pl.csv"
    write_power_law_csv(str(path), pts, fit)
    lines = path.read_text().splitlines()
    assert lines[0] == "c,p,r_squared" and lines[3].startswith("n_samples")
    src = tmp_path / "points.csv"
    src.write_text("n_samples,rmse\n" + "".join(f"{n},{r!r}\n" for n, r in pts))
    assert read_points_csv(str(src)) == [(float(n), r) for n, r in pts]
