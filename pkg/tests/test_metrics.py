"""Tests for metrics: PSNR, Bjontegaard BD-rate and report tables."""

import math
from pathlib import Path

import numpy as np
import pytest

from bdrrn.errors import FormatError, RDCurveError, ShapeError
from bdrrn.media_utils import Plane8
from bdrrn.metrics import (
    BDTable,
    RDCurve,
    RDPoint,
    bd_rate,
    mse,
    params_vs_bd,
    parse_rd_text,
    psnr,
    rd_report,
    read_bd_values,
    read_class_map,
)

# Published per-sequence BD-rates of the additive-fusion model over HM-20.0.
# The two RaceHorses clips (classes C and D) are kept apart by suffix.
ADDITIVE_BD_RATES = {
    "Traffic": -7.44,
    "PeopleOnStreet": -7.95,
    "BQTerrace": -6.29,
    "Kimono": -4.88,
    "ParkScene": -4.34,
    "Cactus": -7.24,
    "BasketballDrive": -5.02,
    "RaceHorsesC": -5.07,
    "BasketballDrill": -6.89,
    "BQMall": -6.47,
    "PartyScene": -3.92,
    "BQSquare": -6.59,
    "BlowingBubbles": -4.84,
    "BasketballPass": -5.14,
    "RaceHorsesD": -6.09,
    "Johnny": -5.47,
    "FourPeople": -9.62,
    "KristenAndSara": -7.71,
}


def _curve(rates: list[float], psnrs: list[float]) -> RDCurve:
    return RDCurve([RDPoint(r, p) for r, p in zip(rates, psnrs)])


def _plane(value: int, width: int = 4, height: int = 4) -> Plane8:
    return Plane8.from_array(np.full((height, width), value, dtype=np.uint8))


# ---------------------------------------------------------------------- #
# PSNR                                                                     #
# ---------------------------------------------------------------------- #

class TestPsnr:
    def test_identical_is_infinite(self) -> None:
        assert psnr(_plane(9), _plane(9)) == math.inf

    def test_unit_error(self) -> None:
        assert mse(_plane(0), _plane(1)) == 1.0
        assert psnr(_plane(0), _plane(1)) == pytest.approx(10 * math.log10(255 ** 2))

    def test_size_mismatch(self) -> None:
        with pytest.raises(ShapeError):
            psnr(_plane(0, 4, 4), _plane(0, 4, 2))


# ---------------------------------------------------------------------- #
# RD curves and BD-rate                                                    #
# ---------------------------------------------------------------------- #

class TestRDCurve:
    def test_sorted_by_rate(self) -> None:
        curve = _curve([800, 100, 400, 200], [38, 30, 36, 33])
        assert curve.rates.tolist() == [100, 200, 400, 800]

    def test_needs_four_points(self) -> None:
        with pytest.raises(RDCurveError):
            _curve([100, 200, 400], [30, 33, 36])

    def test_must_increase(self) -> None:
        with pytest.raises(RDCurveError, match="increasing"):
            _curve([100, 200, 400, 800], [30, 33, 32, 38])

    def test_point_validation(self) -> None:
        with pytest.raises(RDCurveError):
            RDPoint(0.0, 30.0)
        with pytest.raises(RDCurveError):
            RDPoint(100.0, math.inf)


def _oracle_bd_rate(anchor: RDCurve, test: RDCurve, samples: int = 2000001) -> float:
    lo = max(anchor.psnrs.min(), test.psnrs.min())
    hi = min(anchor.psnrs.max(), test.psnrs.max())
    grid = np.linspace(lo, hi, samples)
    step = grid[1] - grid[0]
    integrals = []
    for curve in (anchor, test):
        values = np.polyval(np.polyfit(curve.psnrs, np.log10(curve.rates), 3), grid)
        integrals.append(step * (values.sum() - 0.5 * (values[0] + values[-1])))
    return (10 ** ((integrals[1] - integrals[0]) / (hi - lo)) - 1) * 100


class TestBDRate:
    ANCHOR = ([1000.0, 2000.0, 4500.0, 9000.0], [31.0, 34.2, 37.1, 39.8])

    def test_identical_curves(self) -> None:
        a = _curve(*self.ANCHOR)
        assert abs(bd_rate(a, _curve(*self.ANCHOR)).bd_rate_percent) < 1e-12

    def test_constant_ratio(self) -> None:
        rates, psnrs = self.ANCHOR
        result = bd_rate(_curve(rates, psnrs), _curve([0.9 * r for r in rates], psnrs))
        assert abs(result.bd_rate_percent - (-10.0)) < 1e-9
        assert (result.overlap_lo, result.overlap_hi) == (31.0, 39.8)

    def test_least_squares_above_four_points(self) -> None:
        rates = [800.0, 1000.0, 2000.0, 4500.0, 9000.0]
        psnrs = [30.1, 31.0, 34.2, 37.1, 39.8]
        assert abs(bd_rate(_curve(rates, psnrs), _curve(rates, psnrs)).bd_rate_percent) < 1e-12
        cheaper = bd_rate(_curve(rates, psnrs), _curve([0.9 * r for r in rates], psnrs))
        assert abs(cheaper.bd_rate_percent - (-10.0)) < 1e-9

    def test_matches_fine_grid_oracle(self) -> None:
        rng = np.random.default_rng(2024)
        for _ in range(100):
            psnrs = 30.0 + np.cumsum(rng.uniform(0.5, 3.0, 4))
            rates = 100.0 * np.cumprod(rng.uniform(1.3, 2.5, 4))
            anchor = _curve(rates.tolist(), psnrs.tolist())
            test = _curve(
                (rates * rng.uniform(0.85, 1.1, 4)).tolist(),
                (psnrs + rng.uniform(-0.2, 0.2, 4)).tolist(),
            )
            assert abs(bd_rate(anchor, test).bd_rate_percent - _oracle_bd_rate(anchor, test)) < 1e-6

    def _random_pairs(self, count: int, seed: int) -> list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]:
        rng = np.random.default_rng(seed)
        pairs = []
        for _ in range(count):
            psnrs = 30.0 + np.cumsum(rng.uniform(0.5, 3.0, 4))
            rates = 100.0 * np.cumprod(rng.uniform(1.3, 2.5, 4))
            pairs.append((rates, psnrs, rates * rng.uniform(0.85, 1.1, 4), psnrs + rng.uniform(-0.2, 0.2, 4)))
        return pairs

    def test_swapping_curves_inverts_the_ratio(self) -> None:
        for ra, pa, rb, pb in self._random_pairs(20, 7):
            a, b = _curve(ra.tolist(), pa.tolist()), _curve(rb.tolist(), pb.tolist())
            forward = bd_rate(a, b).bd_rate_percent
            reverse = bd_rate(b, a).bd_rate_percent
            assert abs((1 + forward / 100) * (1 + reverse / 100) - 1.0) < 1e-12

    def test_scaling_every_rate_changes_nothing(self) -> None:
        for ra, pa, rb, pb in self._random_pairs(20, 8):
            base = bd_rate(_curve(ra.tolist(), pa.tolist()), _curve(rb.tolist(), pb.tolist())).bd_rate_percent
            for k in (0.001, 3.7, 1e4):
                scaled = bd_rate(_curve((k * ra).tolist(), pa.tolist()), _curve((k * rb).tolist(), pb.tolist()))
                assert abs(scaled.bd_rate_percent - base) < 1e-9

    def test_shifting_both_psnr_axes_changes_nothing(self) -> None:
        for ra, pa, rb, pb in self._random_pairs(20, 9):
            base = bd_rate(_curve(ra.tolist(), pa.tolist()), _curve(rb.tolist(), pb.tolist()))
            for shift in (-5.0, 0.37, 12.0):
                moved = bd_rate(_curve(ra.tolist(), (pa + shift).tolist()), _curve(rb.tolist(), (pb + shift).tolist()))
                assert abs(moved.bd_rate_percent - base.bd_rate_percent) < 1e-9
                assert moved.overlap_lo == pytest.approx(base.overlap_lo + shift)

    def test_disjoint_ranges(self) -> None:
        a = _curve([100, 200, 400, 800], [30, 31, 32, 33])
        b = _curve([100, 200, 400, 800], [40, 41, 42, 43])
        with pytest.raises(RDCurveError, match="overlap"):
            bd_rate(a, b)


# ---------------------------------------------------------------------- #
# Text input                                                               #
# ---------------------------------------------------------------------- #

class TestParseRdText:
    def test_groups_by_sequence(self) -> None:
        text = "# seq qp kbps psnr\nA 22 900 40.1\nA 27 500 37.2\nB 22 1200 39.0\n"
        points = parse_rd_text(text)
        assert set(points) == {"A", "B"}
        assert points["A"][1] == RDPoint(500.0, 37.2, 27)

    def test_bad_line(self) -> None:
        with pytest.raises(FormatError) as exc_info:
            parse_rd_text("A 22 900 40.1\nA 27 five 37.2\n")
        assert exc_info.value.line == 2

    def test_bad_rate(self) -> None:
        with pytest.raises(FormatError):
            parse_rd_text("A 22 -5 40.1\n")


# ---------------------------------------------------------------------- #
# Tables                                                                   #
# ---------------------------------------------------------------------- #

class TestBDTable:
    def test_additive_column_average(self) -> None:
        table = BDTable.from_values([(seq, "Our_Adding", v) for seq, v in ADDITIVE_BD_RATES.items()])
        average = table.averages()["Our_Adding"]
        assert average is not None
        assert abs(average - (-6.16)) <= 0.005 + 1e-9

    def test_csv_layout(self) -> None:
        table = BDTable.from_values([("S1", "m", -1.0), ("S2", "m", -3.0)])
        lines = table.to_csv().splitlines()
        assert lines[0] == "sequence,method,bd_rate_percent"
        assert lines[-1] == "Average,m,-2.000000"

    def test_text_marks_failures(self) -> None:
        curves = {
            "anchor": {
                "S1": [RDPoint(100, 30), RDPoint(200, 33), RDPoint(400, 36), RDPoint(800, 38)],
                "S2": [RDPoint(100, 30), RDPoint(200, 33), RDPoint(400, 36), RDPoint(800, 38)],
            },
            "ours": {
                "S1": [RDPoint(90, 30), RDPoint(180, 33), RDPoint(360, 36), RDPoint(720, 38)],
                "S2": [RDPoint(90, 30), RDPoint(180, 33), RDPoint(360, 36)],
            },
        }
        table = rd_report(curves, "anchor")
        assert table.methods == ["ours"]
        assert table.rows[0].values["ours"] == pytest.approx(-10.0)
        assert table.rows[1].values["ours"] is None
        text = table.to_text()
        assert "n/a" in text
        assert "S2 / ours" in text
        assert table.averages()["ours"] == pytest.approx(-10.0)

    def test_missing_sequence_noted(self) -> None:
        points = [RDPoint(100, 30), RDPoint(200, 33), RDPoint(400, 36), RDPoint(800, 38)]
        table = rd_report({"anchor": {"S1": points}, "ours": {}}, "anchor")
        assert table.rows[0].notes["ours"] == "sequence missing"

    def test_missing_anchor(self) -> None:
        with pytest.raises(RDCurveError):
            rd_report({"ours": {}}, "anchor")

    def test_read_bd_values(self, tmp_path: Path) -> None:
        path = tmp_path / "table.txt"
        path.write_text("Traffic Our_Adding -7.44\n# comment\nKimono Our_Adding -4.88\n")
        assert read_bd_values(path) == [("Traffic", "Our_Adding", -7.44), ("Kimono", "Our_Adding", -4.88)]
        path.write_text("Traffic -7.44\n")
        with pytest.raises(FormatError):
            read_bd_values(path)


# ---------------------------------------------------------------------- #
# Class averages and parameter view                                        #
# ---------------------------------------------------------------------- #

SEQUENCE_CLASSES = {
    "Traffic": "A", "PeopleOnStreet": "A",
    "BQTerrace": "B", "Kimono": "B", "ParkScene": "B", "Cactus": "B", "BasketballDrive": "B",
    "RaceHorsesC": "C", "BasketballDrill": "C", "BQMall": "C", "PartyScene": "C",
    "BQSquare": "D", "BlowingBubbles": "D", "BasketballPass": "D", "RaceHorsesD": "D",
    "Johnny": "E", "FourPeople": "E", "KristenAndSara": "E",
}


class TestClassAverages:
    def _table(self) -> BDTable:
        entries = [(seq, "Our_Adding", v) for seq, v in ADDITIVE_BD_RATES.items()]
        return BDTable.from_values(entries, SEQUENCE_CLASSES)

    def test_per_class_means(self) -> None:
        means = {name: values["Our_Adding"] for name, values in self._table().class_averages().items()}
        assert list(means) == ["A", "B", "C", "D", "E"]
        assert means["A"] == pytest.approx(-7.695)
        assert means["B"] == pytest.approx(-5.554)
        assert means["E"] == pytest.approx(-7.6)

    def test_class_rows_precede_the_average(self) -> None:
        text_rows = [line.split()[:2] for line in self._table().to_text().splitlines()]
        labels = [" ".join(row) for row in text_rows[-6:]]
        assert labels[:5] == ["Class A", "Class B", "Class C", "Class D", "Class E"]
        assert text_rows[-1][0] == "Average"
        csv_rows = self._table().to_csv().splitlines()
        assert csv_rows[-6] == "Class A,Our_Adding,-7.695000"
        assert csv_rows[-1].startswith("Average,Our_Adding,")

    def test_without_classes_nothing_changes(self) -> None:
        table = BDTable.from_values([("S1", "m", -1.0), ("S2", "m", -3.0)])
        assert table.class_averages() == {}
        assert "Class" not in table.to_text()

    def test_unclassified_sequence_only_in_overall_average(self, caplog: pytest.LogCaptureFixture) -> None:
        table = BDTable.from_values([("S1", "m", -1.0), ("S2", "m", -3.0)], {"S1": "A"})
        assert table.class_averages() == {"A": {"m": -1.0}}
        assert table.averages()["m"] == -2.0
        assert "S2" in caplog.text

    def test_rd_report_passes_classes_through(self) -> None:
        points = [RDPoint(100, 30), RDPoint(200, 33), RDPoint(400, 36), RDPoint(800, 38)]
        cheaper = [RDPoint(0.9 * p.rate, p.psnr) for p in points]
        curves = {"anchor": {"S1": points, "S2": points}, "ours": {"S1": cheaper, "S2": cheaper}}
        table = rd_report(curves, "anchor", {"S1": "A", "S2": "B"})
        assert table.class_averages()["B"]["ours"] == pytest.approx(-10.0)

    def test_read_class_map(self, tmp_path: Path) -> None:
        path = tmp_path / "classes.txt"
        path.write_text("Traffic A\n# class B\nKimono B\n")
        assert read_class_map(path) == {"Traffic": "A", "Kimono": "B"}
        path.write_text("Traffic A\nTraffic B\n")
        with pytest.raises(FormatError) as exc_info:
            read_class_map(path)
        assert exc_info.value.line == 2


class TestParamsVsBd:
    def test_sorted_by_parameter_count(self) -> None:
        table = BDTable.from_values([("S1", "drrn", -4.0), ("S1", "concat", -6.5), ("S1", "add", -6.0)])
        lines = params_vs_bd(table, {"concat": 148867, "add": 75075, "drrn": 75075}).splitlines()
        assert lines[0].split() == ["Method", "Params", "BD-rate"]
        assert [line.split() for line in lines[1:]] == [
            ["add", "75075", "-6.00"],
            ["drrn", "75075", "-4.00"],
            ["concat", "148867", "-6.50"],
        ]

    def test_unknown_method(self) -> None:
        table = BDTable.from_values([("S1", "add", -6.0)])
        with pytest.raises(RDCurveError, match="concat"):
            params_vs_bd(table, {"concat": 148867})
