import math
import re
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from elseg.losses import nonlinearity, slope_stationary_point
from elseg.plotting import plot_loss_curves, plot_series

SVG = "{http://www.w3.org/2000/svg}"
XLINK = "{http://www.w3.org/1999/xlink}"


def groups(path):
    root = ET.parse(path).getroot()
    return {g.get("id"): g for g in root.iter(f"{SVG}g") if g.get("id", "").startswith(("curve", "marker"))}


def vertices(group):
    (p,) = [e for e in group.iter(f"{SVG}path")]
    nums = [float(v) for v in re.findall(r"-?\d+\.?\d*", p.get("d"))]
    return np.array(nums).reshape(-1, 2)


def data_transform(g):
    """Invert the display mapping using the 1 - x line, whose ends are known exactly."""
    v = vertices(g["curve-linear"])
    (x0, y0), (x1, y1) = v[0], v[-1]
    sx, sy = (x1 - x0) / 0.99, (y1 - y0) / -0.99

    def to_data(px, py):
        return 0.01 + (px - x0) / sx, 0.99 + (py - y0) / sy

    return to_data


class TestLossCurves:
    def test_gamma_one_is_negative_log(self):
        x = np.linspace(0.01, 1.0, 1000)
        assert np.max(np.abs(nonlinearity(x, 1.0) + np.log(x))) < 1e-9

    def test_one_path_per_curve(self, tmp_path):
        g = groups(plot_loss_curves([0.3, 1.0, 2.0], tmp_path / "c.svg"))
        curves = sorted(k for k in g if k.startswith("curve"))
        assert curves == ["curve-gamma-0.3", "curve-gamma-1", "curve-gamma-2", "curve-linear"]
        for k in curves:
            assert len(list(g[k].iter(f"{SVG}path"))) == 1

    def test_marker_only_below_one(self, tmp_path):
        g = groups(plot_loss_curves([0.3, 0.7, 1.0, 2.0], tmp_path / "c.svg"))
        assert sorted(k for k in g if k.startswith("marker")) == ["marker-gamma-0.3", "marker-gamma-0.7"]

    def test_marker_position_read_back(self, tmp_path):
        g = groups(plot_loss_curves([0.3], tmp_path / "c.svg"))
        (use,) = g["marker-gamma-0.3"].iter(f"{SVG}use")
        x, y = data_transform(g)(float(use.get("x")), float(use.get("y")))
        assert abs(x - math.exp(-0.7)) < 1e-4 and round(x, 4) == 0.4966
        assert abs(y - 0.7 ** 0.3) < 1e-4
        assert slope_stationary_point(0.3) == pytest.approx(0.4965853037914095, abs=1e-15)

    def test_gamma_one_curve_read_back(self, tmp_path):
        g = groups(plot_loss_curves([1.0], tmp_path / "c.svg"))
        to_data = data_transform(g)
        pts = np.array([to_data(px, py) for px, py in vertices(g["curve-gamma-1"])])
        inside = pts[(pts[:, 1] > 0) & (pts[:, 1] < 3)]
        assert len(inside) > 100
        np.testing.assert_allclose(inside[:, 1], -np.log(inside[:, 0]), atol=1e-4)

    def test_rejects_non_positive(self, tmp_path):
        with pytest.raises(ValueError, match="> 0"):
            plot_loss_curves([0.3, 0.0], tmp_path / "c.svg")
        assert not (tmp_path / "c.svg").exists()

    def test_byte_identical(self, tmp_path):
        a = plot_loss_curves([0.3, 2.0], tmp_path / "a.svg").read_bytes()
        b = plot_loss_curves([0.3, 2.0], tmp_path / "b.svg").read_bytes()
        assert a == b and b"<dc:date>" not in a


def test_series_with_gaps(tmp_path):
    g = groups(plot_series({"a": [0.1, None, 0.3], "b": [1, 2, 3]}, tmp_path / "s.svg", "dice"))
    assert {"curve-a", "curve-b"} <= set(g)
