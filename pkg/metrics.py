"""Fidelity metrics: MSE/PSNR on 8-bit planes and Bjontegaard BD-rate."""

import csv
import io
import logging
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, RDCurveError, ShapeError
from .media_utils import Plane8

logger = logging.getLogger(__name__)

PSNR_INFINITE = math.inf
MIN_RD_POINTS = 4
AVERAGE_ROW = "Average"
CLASS_ROW_PREFIX = "Class"


# ---------------------------------------------------------------------- #
# Image fidelity                                                           #
# ---------------------------------------------------------------------- #

def mse(a: Plane8, b: Plane8) -> float:
    if (a.width, a.height) != (b.width, b.height):
        raise ShapeError("mse", f"{a.width}x{a.height} vs {b.width}x{b.height}")
    diff = a.pixels.astype(np.float64) - b.pixels.astype(np.float64)
    return float(np.mean(diff * diff))


def psnr(a: Plane8, b: Plane8) -> float:
    """10*log10(255^2 / mse) in dB; identical planes give +inf."""
    err = mse(a, b)
    if err == 0.0:
        return PSNR_INFINITE
    return 10.0 * math.log10(255.0 * 255.0 / err)


# ---------------------------------------------------------------------- #
# Rate-distortion curves                                                   #
# ---------------------------------------------------------------------- #

@dataclass(frozen=True)
class RDPoint:
    """One encode: bitrate in kbps and luma PSNR in dB."""

    rate: float
    psnr: float
    qp: int | None = None

    def __post_init__(self) -> None:
        if not self.rate > 0 or not math.isfinite(self.rate):
            raise RDCurveError(f"rate must be positive and finite, got {self.rate}")
        if not math.isfinite(self.psnr):
            raise RDCurveError(f"psnr must be finite, got {self.psnr}")


@dataclass(frozen=True)
class RDCurve:
    """At least four RD points, sorted by rate, strictly increasing in both axes."""

    points: tuple[RDPoint, ...]

    def __init__(self, points: Sequence[RDPoint]) -> None:
        ordered = tuple(sorted(points, key=lambda p: p.rate))
        if len(ordered) < MIN_RD_POINTS:
            raise RDCurveError(f"need at least {MIN_RD_POINTS} points, got {len(ordered)}")
        for prev, cur in zip(ordered, ordered[1:]):
            if not (cur.rate > prev.rate and cur.psnr > prev.psnr):
                raise RDCurveError(
                    f"curve not strictly increasing between ({prev.rate}, {prev.psnr}) and ({cur.rate}, {cur.psnr})"
                )
        object.__setattr__(self, "points", ordered)

    @property
    def rates(self) -> np.ndarray:
        return np.array([p.rate for p in self.points])

    @property
    def psnrs(self) -> np.ndarray:
        return np.array([p.psnr for p in self.points])


@dataclass(frozen=True)
class BDResult:
    bd_rate_percent: float
    overlap_lo: float
    overlap_hi: float


def fit_log_rate(curve: RDCurve, center: float = 0.0) -> np.ndarray:
    """Cubic coefficients (highest power first) of log10(rate) as a function of psnr - center.

    Four points are interpolated exactly; more are fitted by least squares.
    """
    t = curve.psnrs - center
    x = np.log10(curve.rates)
    if len(t) == MIN_RD_POINTS:
        return np.linalg.solve(np.vander(t, MIN_RD_POINTS), x)
    return np.polyfit(t, x, 3)


def psnr_overlap(anchor: RDCurve, test: RDCurve) -> tuple[float, float]:
    lo = max(anchor.psnrs.min(), test.psnrs.min())
    hi = min(anchor.psnrs.max(), test.psnrs.max())
    if not hi > lo:
        raise RDCurveError(f"psnr ranges do not overlap ({lo:.4f} >= {hi:.4f})")
    return float(lo), float(hi)


def bd_rate(anchor: RDCurve, test: RDCurve) -> BDResult:
    """Average bitrate difference of test vs anchor at equal PSNR, in percent.

    Negative values mean the test curve needs less rate. Both fits are
    expressed around the middle of the overlap to keep the polynomial well
    conditioned; the integral is unchanged by that shift.
    """
    lo, hi = psnr_overlap(anchor, test)
    center = 0.5 * (lo + hi)
    a, b = lo - center, hi - center
    integrals = []
    for curve in (anchor, test):
        antiderivative = np.polyint(fit_log_rate(curve, center))
        integrals.append(np.polyval(antiderivative, b) - np.polyval(antiderivative, a))
    avg_diff = (integrals[1] - integrals[0]) / (hi - lo)
    return BDResult(bd_rate_percent=float((10.0 ** avg_diff - 1.0) * 100.0), overlap_lo=lo, overlap_hi=hi)


# ---------------------------------------------------------------------- #
# RD text input                                                            #
# ---------------------------------------------------------------------- #

def parse_rd_text(text: str) -> dict[str, list[RDPoint]]:
    """Parse ``<name> <qp> <rate_kbps> <psnr_db>`` lines, grouped by sequence name."""
    points: dict[str, list[RDPoint]] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 4:
            raise FormatError(f"expected '<name> <qp> <rate> <psnr>', got {line!r}", line=line_no)
        try:
            point = RDPoint(rate=float(fields[2]), psnr=float(fields[3]), qp=int(fields[1]))
        except ValueError:
            raise FormatError(f"bad number in {line!r}", line=line_no) from None
        except RDCurveError as exc:
            raise FormatError(str(exc), line=line_no) from exc
        points.setdefault(fields[0], []).append(point)
    return points


def read_rd_file(path: str | Path) -> dict[str, list[RDPoint]]:
    return parse_rd_text(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------- #
# BD tables                                                                #
# ---------------------------------------------------------------------- #

@dataclass
class BDRow:
    sequence: str
    values: dict[str, float | None] = field(default_factory=dict)
    notes: dict[str, str] = field(default_factory=dict)


def _mean_per_method(methods: Sequence[str], rows: Sequence[BDRow]) -> dict[str, float | None]:
    result: dict[str, float | None] = {}
    for method in methods:
        values = [r.values[method] for r in rows if r.values.get(method) is not None]
        result[method] = sum(values) / len(values) if values else None
    return result


@dataclass
class BDTable:
    """BD-rate per sequence and method, with a per-method average.

    ``classes`` optionally maps sequence names to a test class (``A``..``F``);
    every class present gets its own average row ahead of the overall one.
    """

    methods: list[str]
    rows: list[BDRow]
    classes: dict[str, str] = field(default_factory=dict)

    def averages(self) -> dict[str, float | None]:
        """Arithmetic mean per method over rows that have a value."""
        return _mean_per_method(self.methods, self.rows)

    def class_averages(self) -> dict[str, dict[str, float | None]]:
        """Mean per class and method, classes in order of first appearance."""
        groups: dict[str, list[BDRow]] = {}
        for r in self.rows:
            name = self.classes.get(r.sequence)
            if name is not None:
                groups.setdefault(name, []).append(r)
        return {name: _mean_per_method(self.methods, rows) for name, rows in groups.items()}

    def summary_rows(self) -> list[tuple[str, dict[str, float | None]]]:
        rows = [(f"{CLASS_ROW_PREFIX} {name}", values) for name, values in self.class_averages().items()]
        rows.append((AVERAGE_ROW, self.averages()))
        return rows

    @classmethod
    def from_values(
        cls,
        entries: Sequence[tuple[str, str, float]],
        classes: Mapping[str, str] | None = None,
    ) -> "BDTable":
        """Build a table from already computed (sequence, method, bd_percent) triples."""
        methods: list[str] = []
        rows: dict[str, BDRow] = {}
        for sequence, method, value in entries:
            if method not in methods:
                methods.append(method)
            rows.setdefault(sequence, BDRow(sequence)).values[method] = value
        return cls(methods=methods, rows=list(rows.values()), classes=_class_map(classes, rows))

    def to_text(self) -> str:
        """Aligned text table, two decimals, errors shown as n/a with notes below."""
        def cell(v: float | None) -> str:
            return "n/a" if v is None else f"{v:.2f}"

        header = ["Sequence", *self.methods]
        body = [[r.sequence, *(cell(r.values.get(m)) for m in self.methods)] for r in self.rows]
        for label, values in self.summary_rows():
            body.append([label, *(cell(values[m]) for m in self.methods)])
        widths = [max(len(row[i]) for row in [header, *body]) for i in range(len(header))]
        lines = [
            "  ".join(
                text.ljust(width) if i == 0 else text.rjust(width)
                for i, (text, width) in enumerate(zip(row, widths))
            )
            for row in [header, *body]
        ]
        for r in self.rows:
            for method, note in r.notes.items():
                lines.append(f"  {r.sequence} / {method}: {note}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        """CSV with header ``sequence,method,bd_rate_percent``; failed cells are empty."""
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["sequence", "method", "bd_rate_percent"])
        for r in self.rows:
            for method in self.methods:
                value = r.values.get(method)
                writer.writerow([r.sequence, method, "" if value is None else f"{value:.6f}"])
        for label, values in self.summary_rows():
            for method, value in values.items():
                writer.writerow([label, method, "" if value is None else f"{value:.6f}"])
        return out.getvalue()


def _class_map(classes: Mapping[str, str] | None, sequences: Iterable[str]) -> dict[str, str]:
    if not classes:
        return {}
    unclassified = [s for s in sequences if s not in classes]
    if unclassified:
        logger.warning("no class for sequence(s) %s", ", ".join(unclassified))
    return dict(classes)


def _as_curve(points: RDCurve | Sequence[RDPoint]) -> RDCurve:
    return points if isinstance(points, RDCurve) else RDCurve(points)


def rd_report(
    curves: Mapping[str, Mapping[str, RDCurve | Sequence[RDPoint]]],
    anchor: str,
    classes: Mapping[str, str] | None = None,
) -> BDTable:
    """BD-rate of every non-anchor method against the anchor, per sequence.

    Args:
        curves: method name -> sequence name -> curve (or raw points).
        anchor: Method the others are measured against.
        classes: Optional sequence name -> class name, adding per-class averages.

    Raises:
        RDCurveError: The anchor is missing. Per-sequence failures do not
            raise; they leave the cell empty with a note.
    """
    if anchor not in curves:
        raise RDCurveError(f"anchor {anchor!r} not among {sorted(curves)}")
    methods = [m for m in curves if m != anchor]
    rows: list[BDRow] = []
    for sequence, anchor_points in curves[anchor].items():
        row = BDRow(sequence)
        for method in methods:
            row.values[method] = None
            test_points = curves[method].get(sequence)
            if test_points is None:
                row.notes[method] = "sequence missing"
                continue
            try:
                row.values[method] = bd_rate(_as_curve(anchor_points), _as_curve(test_points)).bd_rate_percent
            except RDCurveError as exc:
                row.notes[method] = str(exc)
                logger.warning("bd-rate %s/%s: %s", sequence, method, exc)
        rows.append(row)
    return BDTable(methods=methods, rows=rows, classes=_class_map(classes, curves[anchor]))


def params_vs_bd(table: BDTable, params: Mapping[str, int]) -> str:
    """Parameter count beside the average BD-rate of each method, fewest parameters first.

    Raises:
        RDCurveError: A method in ``params`` has no column in the table.
    """
    averages = table.averages()
    unknown = [m for m in params if m not in averages]
    if unknown:
        raise RDCurveError(f"method(s) {unknown} not in table columns {table.methods}")
    width = max([len("Method"), *(len(m) for m in params)])
    lines = [f"{'Method':<{width}}  {'Params':>9}  {'BD-rate':>7}"]
    for method, count in sorted(params.items(), key=lambda item: (item[1], item[0])):
        value = averages[method]
        bd = "n/a" if value is None else f"{value:.2f}"
        lines.append(f"{method:<{width}}  {count:>9}  {bd:>7}")
    return "\n".join(lines) + "\n"


def _read_fields(path: str | Path, count: int, layout: str) -> list[tuple[int, list[str]]]:
    rows: list[tuple[int, list[str]]] = []
    for line_no, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != count:
            raise FormatError(f"expected '{layout}', got {line!r}", line=line_no)
        rows.append((line_no, fields))
    return rows


def read_bd_values(path: str | Path) -> list[tuple[str, str, float]]:
    """Parse ``<sequence> <method> <bd_percent>`` lines."""
    entries: list[tuple[str, str, float]] = []
    for line_no, fields in _read_fields(path, 3, "<sequence> <method> <bd_percent>"):
        try:
            entries.append((fields[0], fields[1], float(fields[2])))
        except ValueError:
            raise FormatError(f"bad number in {' '.join(fields)!r}", line=line_no) from None
    return entries


def read_class_map(path: str | Path) -> dict[str, str]:
    """Parse ``<sequence> <class>`` lines; a sequence may appear only once."""
    classes: dict[str, str] = {}
    for line_no, (sequence, name) in _read_fields(path, 2, "<sequence> <class>"):
        if sequence in classes:
            raise FormatError(f"sequence {sequence!r} listed twice", line=line_no)
        classes[sequence] = name
    return classes
