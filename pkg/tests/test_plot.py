"""Tests for the SVG localization figure."""

import xml.etree.ElementTree as ET

import numpy as np
import pytest

from mmae import plot as mp
from mmae.data import EcgRecord
from mmae.errors import ConfigError
from mmae.train import AnomalyReport

SVG_NS = "{http://www.w3.org/2000/svg}"


def _record_and_report(k=2, q=120, with_mask=True, seed=0):
    rng = np.random.default_rng(seed)
    signal = rng.standard_normal((k, q)).astype(np.float32)
    mask = None
    if with_mask:
        mask = np.zeros((k, q), dtype=bool)
        mask[:, 40:60] = True
    rec = EcgRecord(id="fig-test", signal=signal, fs=50,
                    label="abnormal" if with_mask else "normal",
                    point_mask=mask)
    scores = rng.random((k, q))
    scores[:, 40:60] += 5.0
    report = AnomalyReport(record_id=rec.id, sample_score=1.25,
                           point_scores=scores, n_passes=4)
    return rec, report


def test_deciles_split_evenly():
    scores = np.arange(200, dtype=float).reshape(2, 100)
    bins = mp.score_deciles(scores)
    counts = np.bincount(bins.ravel(), minlength=10)
    assert bins.min() == 0 and bins.max() == 9
    np.testing.assert_array_equal(counts, 20)


def test_deciles_handle_constant_scores():
    bins = mp.score_deciles(np.full((2, 50), 3.3))
    assert np.all(bins == 0)


def test_color_ramp_endpoints():
    assert mp._ramp(0) == "#ffffff"
    assert mp._ramp(9) == "#7f0000"


def test_run_length_encoding():
    runs = list(mp._runs(np.array([1, 1, 2, 2, 2, 1])))
    assert runs == [(0, 2, 1), (2, 5, 2), (5, 6, 1)]


def test_svg_is_valid_xml_with_one_row_per_lead():
    rec, report = _record_and_report(k=3)
    blob = mp.render_localization_svg(rec, report)
    root = ET.fromstring(blob)
    assert root.tag == f"{SVG_NS}svg"
    polylines = root.findall(f"{SVG_NS}polyline")
    assert len(polylines) == 3
    title = root.find(f"{SVG_NS}text")
    assert "fig-test" in title.text and "1.25" in title.text


def test_svg_lead_selection_and_window():
    rec, report = _record_and_report(k=3)
    blob = mp.render_localization_svg(rec, report, leads=[2], window=(10, 50))
    root = ET.fromstring(blob)
    polylines = root.findall(f"{SVG_NS}polyline")
    assert len(polylines) == 1
    # 40 samples -> 40 coordinate pairs
    assert len(polylines[0].get("points").split()) == 40


def test_svg_marks_ground_truth_spans():
    rec, report = _record_and_report(with_mask=True)
    with_mask = mp.render_localization_svg(rec, report)
    dashed = [el for el in ET.fromstring(with_mask).iter(f"{SVG_NS}rect")
              if el.get("stroke-dasharray")]
    assert len(dashed) == 2  # one box per lead

    rec2, report2 = _record_and_report(with_mask=False)
    without = mp.render_localization_svg(rec2, report2)
    dashed2 = [el for el in ET.fromstring(without).iter(f"{SVG_NS}rect")
               if el.get("stroke-dasharray")]
    assert not dashed2


def test_svg_heat_strip_darkens_over_hot_region():
    # scores were boosted on samples 40..60, so the darkest decile rectangles
    # must sit inside that span
    rec, report = _record_and_report(k=1)
    blob = mp.render_localization_svg(rec, report)
    root = ET.fromstring(blob)
    dark = [el for el in root.iter(f"{SVG_NS}rect")
            if el.get("fill") == mp._ramp(9)]
    assert dark
    scale = (mp.WIDTH - 2 * mp.PAD) / rec.n_samples
    for el in dark:
        x = float(el.get("x"))
        sample = (x - mp.PAD) / scale
        assert 39 <= sample <= 60


def test_svg_argument_validation():
    rec, report = _record_and_report()
    with pytest.raises(ConfigError):
        mp.render_localization_svg(rec, report, leads=[5])
    with pytest.raises(ConfigError):
        mp.render_localization_svg(rec, report, leads=[])
    with pytest.raises(ConfigError):
        mp.render_localization_svg(rec, report, window=(50, 50))
    with pytest.raises(ConfigError):
        mp.render_localization_svg(rec, report, window=(-1, 10))
    short = AnomalyReport(record_id="x", sample_score=0.0,
                          point_scores=np.zeros((1, 10)), n_passes=1)
    with pytest.raises(ConfigError):
        mp.render_localization_svg(rec, short)
