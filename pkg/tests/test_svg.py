import xml.etree.ElementTree as ET

import numpy as np

from assocmem import svg


def test_marching_squares_traces_a_circle():
    x = y = np.linspace(-2, 2, 81)
    r = np.hypot(x[:, None], y[None, :])
    segs = svg.marching_squares(x, y, r, 1.0)
    assert len(segs) > 50
    pts = np.array([(a, b) for s in segs for a, b in ((s[0], s[1]), (s[2], s[3]))])
    np.testing.assert_allclose(np.hypot(pts[:, 0], pts[:, 1]), 1.0, atol=2e-3)


def test_marching_squares_no_crossing():
    x = y = np.linspace(0, 1, 5)
    assert svg.marching_squares(x, y, np.zeros((5, 5)), 1.0) == []


def test_heatmap_is_well_formed_svg():
    x, y = np.logspace(-2, 2, 5), np.linspace(-1, 1, 4)
    v = np.outer(x, np.ones(4)) + 1.0
    v[0, 0] = np.nan
    text = svg.heatmap_svg(x, y, v, title="a < b & c", log_color=True, logx=True,
                           contour_field=v, levels=[5.0], overlays=[([0.1, 1.0], [0.0, 0.5], "#000")])
    root = ET.fromstring(text)
    assert root.tag.endswith("svg")
    assert len(root.findall("{http://www.w3.org/2000/svg}rect")) >= 20


def test_line_plot_is_well_formed_svg():
    t = np.arange(1, 100)
    text = svg.line_plot_svg([("a", t, np.log(t)), ("b", t, -np.log(t))], logx=True, hlines=(0.0,))
    root = ET.fromstring(text)
    assert len(root.findall("{http://www.w3.org/2000/svg}polyline")) == 2
