"""SVG rendering of per-lead waveforms with point-score heat strips.

Each requested lead gets a signal polyline and, underneath it, a strip whose
color encodes the decile of the point score at that sample, deciles taken
over the whole record so leads share one scale.  Ground-truth anomaly spans
are outlined when the record carries a point mask.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET

import numpy as np

from .data import EcgRecord
from .errors import ConfigError
from .train import AnomalyReport

LEAD_HEIGHT = 110
STRIP_HEIGHT = 12
PAD = 28
WIDTH = 960

def _ramp(bin_idx: int) -> str:
    """Decile bin 0..9 -> fill color, white through dark red."""
    t = bin_idx / 9.0
    r = int(round(255 - t * (255 - 127)))
    g = int(round(255 * (1.0 - t)))
    b = int(round(255 * (1.0 - t)))
    return f"#{r:02x}{g:02x}{b:02x}"


def _runs(values: np.ndarray):
    """Yield (start, stop, value) for maximal constant runs."""
    edges = np.flatnonzero(np.diff(values)) + 1
    bounds = np.r_[0, edges, len(values)]
    for a, b in zip(bounds[:-1], bounds[1:]):
        yield int(a), int(b), values[a]


def score_deciles(point_scores: np.ndarray) -> np.ndarray:
    """Map every point to its score decile 0..9 over the whole record.

    Degenerate all-equal scores land in the lowest bin.
    """
    edges = np.quantile(point_scores, np.arange(1, 10) / 10.0)
    return np.searchsorted(edges, point_scores, side="left").astype(np.int8)


def render_localization_svg(record: EcgRecord, report: AnomalyReport,
                            leads: list[int] | None = None,
                            window: tuple[int, int] | None = None) -> bytes:
    """Figure with one waveform row per requested lead; returns SVG bytes."""
    k, q = record.signal.shape
    if leads is None:
        leads = list(range(k))
    if not leads or any(not 0 <= ld < k for ld in leads):
        raise ConfigError(f"leads must be drawn from 0..{k - 1}")
    if window is None:
        window = (0, q)
    a, b = int(window[0]), int(window[1])
    if not 0 <= a < b <= q:
        raise ConfigError(f"window {window} is empty or outside 0..{q}")
    if report.point_scores.shape != (k, q):
        raise ConfigError("report point scores do not match the record shape")

    deciles = score_deciles(report.point_scores)
    n = b - a
    xs = PAD + (np.arange(n) / max(1, n - 1)) * (WIDTH - 2 * PAD)

    height = PAD + len(leads) * (LEAD_HEIGHT + STRIP_HEIGHT + PAD)
    svg = ET.Element("svg", {
        "xmlns": "http://www.w3.org/2000/svg",
        "width": str(WIDTH), "height": str(height),
        "viewBox": f"0 0 {WIDTH} {height}",
    })
    ET.SubElement(svg, "rect", {"x": "0", "y": "0", "width": str(WIDTH),
                                "height": str(height), "fill": "white"})
    title = ET.SubElement(svg, "text", {"x": str(PAD), "y": "18",
                                        "font-size": "13", "font-family": "monospace"})
    title.text = f"{record.id}  score={report.sample_score:.4f}"

    for row, lead in enumerate(leads):
        top = PAD + row * (LEAD_HEIGHT + STRIP_HEIGHT + PAD)
        sig = record.signal[lead, a:b].astype(np.float64)
        lo, hi = float(sig.min()), float(sig.max())
        span = hi - lo if hi > lo else 1.0
        ys = top + (1.0 - (sig - lo) / span) * LEAD_HEIGHT
        pts = " ".join(f"{x:.1f},{y:.1f}" for x, y in zip(xs, ys))
        ET.SubElement(svg, "polyline", {
            "points": pts, "fill": "none", "stroke": "#1c2c4c",
            "stroke-width": "1.0",
        })
        label = ET.SubElement(svg, "text", {
            "x": "4", "y": str(top + LEAD_HEIGHT // 2),
            "font-size": "11", "font-family": "monospace"})
        label.text = f"L{lead + 1}"

        strip_top = top + LEAD_HEIGHT + 2
        scale = (WIDTH - 2 * PAD) / n
        for r0, r1, bin_idx in _runs(deciles[lead, a:b]):
            ET.SubElement(svg, "rect", {
                "x": f"{PAD + r0 * scale:.1f}", "y": str(strip_top),
                "width": f"{max(0.5, (r1 - r0) * scale):.1f}",
                "height": str(STRIP_HEIGHT),
                "fill": _ramp(int(bin_idx)),
            })
        ET.SubElement(svg, "rect", {
            "x": str(PAD), "y": str(strip_top),
            "width": str(WIDTH - 2 * PAD), "height": str(STRIP_HEIGHT),
            "fill": "none", "stroke": "#c0c0c0", "stroke-width": "0.5",
        })

        if record.point_mask is not None:
            for r0, r1, val in _runs(record.point_mask[lead, a:b].astype(np.int8)):
                if not val:
                    continue
                ET.SubElement(svg, "rect", {
                    "x": f"{PAD + r0 * scale:.1f}", "y": str(top),
                    "width": f"{max(0.5, (r1 - r0) * scale):.1f}",
                    "height": str(LEAD_HEIGHT + STRIP_HEIGHT + 2),
                    "fill": "none", "stroke": "#1f8a3b",
                    "stroke-width": "1.2", "stroke-dasharray": "4,2",
                })

    return ET.tostring(svg, encoding="utf-8", xml_declaration=True)
