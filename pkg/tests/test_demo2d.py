import numpy as np
import pytest

from diffiso.demo2d import demo_2d
from diffiso.fields import Circle2D, Line2D


class TestExactField:
    def test_squares_recover_line(self):
        result = demo_2d(Line2D(offset=0.37), "squares", 16)
        assert result.stats["vertex_count"] > 0
        assert np.abs(result.vertices[:, 0] - 0.37).max() < 1e-12

    def test_triangles_recover_line(self):
        result = demo_2d(Line2D(offset=0.37), "triangles", 16)
        assert np.abs(result.vertices[:, 0] - 0.37).max() < 1e-12

    def test_deviations_zero_on_exact_sdf(self):
        for mode in ("squares", "triangles"):
            result = demo_2d(Line2D(offset=0.37), mode, 16)
            assert result.stats["deviation_rms"] < 1e-12

    def test_circle_closes_into_loop(self):
        result = demo_2d(Circle2D(radius=0.3), "squares", 32)
        assert len(result.polylines) == 1
        loop = result.polylines[0]
        assert loop[0] == loop[-1]  # closed
        radii = np.linalg.norm(result.vertices - 0.5, axis=1)
        assert radii.max() - radii.min() < 0.01


class TestWarpedField:
    def test_squares_straight_with_offset(self):
        warped = Line2D(offset=0.37).warped(0.1)
        result = demo_2d(warped, "squares", 16)
        xs = result.vertices[:, 0]
        assert np.ptp(xs) < 1e-12          # straight
        true_x = 0.37 + np.log(1.1)
        offset = abs(float(xs[0]) - true_x)
        assert 0 < offset < 0.01           # constant, nonzero offset

    def test_triangles_zigzag(self):
        warped = Line2D(offset=0.37).warped(0.1)
        squares = demo_2d(warped, "squares", 16)
        triangles = demo_2d(warped, "triangles", 16)
        assert triangles.stats["x_std"] > 0
        assert triangles.stats["x_std"] > squares.stats["x_std"]
        assert triangles.stats["deviation_rms"] > squares.stats["deviation_rms"]

    def test_iso_adjustment_removes_offset(self):
        # extracting the warped field at its value on the true line recovers it
        warped = Line2D(offset=0.37).warped(0.1)
        h = 1 / 15
        cols = np.arange(16) * h
        k = int(np.floor(0.37 / h))
        f = lambda x: np.exp(x - 0.37) - 1 - 0.1
        u = (0.37 - cols[k]) / h
        iso_c = f(cols[k]) + u * (f(cols[k + 1]) - f(cols[k]))
        result = demo_2d(warped, "squares", 16, iso=iso_c)
        assert np.abs(result.vertices[:, 0] - 0.37).max() < 1e-9


class TestArtifacts:
    def test_svg_and_csv(self, tmp_path):
        result = demo_2d(Line2D(offset=0.37).warped(0.1), "triangles", 16)
        svg = result.to_svg(tmp_path / "out.svg")
        csv_path = result.to_csv(tmp_path / "out.csv")
        text = svg.read_text()
        assert text.startswith("<svg") and "polyline" in text
        rows = csv_path.read_text().splitlines()
        assert rows[0] == "x,y,deviation"
        assert len(rows) == result.stats["vertex_count"] + 1

    def test_res_validation(self):
        with pytest.raises(ValueError):
            demo_2d(Line2D(), "squares", 1)
        with pytest.raises(ValueError):
            demo_2d(Line2D(), "hexagons", 8)
