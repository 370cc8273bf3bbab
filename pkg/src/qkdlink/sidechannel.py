"""Leakage accounting for hardware imperfections.

Three observables matter: the 4x4 detector-pair correlation matrix
(bit/basis asymmetries and their entropy cost), the per-combination
coincidence timing histograms (detector distinguishability), and a
windowed bit-asymmetry monitor able to flag drifts such as selective
detector blinding.

Timing leakage is quantified as the mutual information between the bit
value and the binned arrival-time residual, taking the bit prior as
uniform (equivalently the Jensen-Shannon divergence of the two
normalized histograms). The underlying reports only state leakage
percentages; this estimator is our concrete reading of them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .postproc import binary_entropy
from .sifter import Coincidences

DETECTOR_NAMES = ("H", "+45", "V", "-45")

# Anticorrelated (key-generating) detector pairings, bit value they encode
# on side B, and the basis they belong to.
_KEY_COMBOS = (
    ("hv", 0, (0, 2)),   # A=H,  B=V   -> B bit 1 / A bit (flipped) 1
    ("hv", 1, (2, 0)),   # A=V,  B=H
    ("diag", 0, (1, 3)),
    ("diag", 1, (3, 1)),
)


@dataclass
class CorrelationMatrix:
    """Coincidence counts, rows = side-A detector, columns = side-B."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (4, 4):
            raise ValueError("correlation matrix must be 4x4")
        if np.any(self.counts < 0):
            raise ValueError("correlation counts must be non-negative")

    @property
    def matched_key_events(self) -> int:
        """Events in the four anticorrelated, key-generating combinations."""
        c = self.counts
        return int(c[0, 2] + c[2, 0] + c[1, 3] + c[3, 1])


def build_matrix(pairs: Coincidences) -> CorrelationMatrix:
    """Accumulate all pair combinations, basis mismatches included."""
    flat = np.asarray(pairs.detector_a, dtype=np.int64) * 4 + np.asarray(
        pairs.detector_b, dtype=np.int64
    )
    counts = np.bincount(flat, minlength=16).reshape(4, 4)
    return CorrelationMatrix(counts)


@dataclass
class LeakageReport:
    hv_bit_ratio: float
    diag_bit_ratio: float
    basis_ratio: float
    hv_entropy_leak: float
    diag_entropy_leak: float
    timing_leak_hv: float | None = None
    timing_leak_diag: float | None = None


def asymmetry_stats(matrix: CorrelationMatrix) -> LeakageReport:
    """Bit/basis asymmetries of the key-generating combinations.

    The bit ratio of a basis compares its two anticorrelated detector
    pairings; the entropy leak 1 - h(ratio) is the raw-key fraction an
    eavesdropper gains from knowing that bias. The basis ratio compares
    HV against diagonal key events.
    """
    c = matrix.counts
    hv = float(c[0, 2] + c[2, 0])
    diag = float(c[1, 3] + c[3, 1])
    if hv == 0 or diag == 0:
        raise ValueError("need key-generating counts in both bases")
    hv_ratio = float(c[0, 2]) / hv
    diag_ratio = float(c[1, 3]) / diag
    return LeakageReport(
        hv_bit_ratio=hv_ratio,
        diag_bit_ratio=diag_ratio,
        basis_ratio=hv / (hv + diag),
        hv_entropy_leak=1.0 - binary_entropy(hv_ratio),
        diag_entropy_leak=1.0 - binary_entropy(diag_ratio),
    )


def mutual_information(hist0: np.ndarray, hist1: np.ndarray) -> float:
    """Bit/residual mutual information with a uniform bit prior, in bits.

    Zero for identical distributions, one for disjoint supports, and
    monotone under blending the two histograms toward their average.
    """
    h0 = np.asarray(hist0, dtype=np.float64)
    h1 = np.asarray(hist1, dtype=np.float64)
    if h0.shape != h1.shape:
        raise ValueError("histograms must share the bin grid")
    if h0.sum() <= 0 or h1.sum() <= 0:
        raise ValueError("histograms must be non-empty")
    p0 = h0 / h0.sum()
    p1 = h1 / h1.sum()
    mix = 0.5 * (p0 + p1)
    mi = 0.0
    for p in (p0, p1):
        pos = p > 0
        mi += 0.5 * float(np.sum(p[pos] * np.log2(p[pos] / mix[pos])))
    return mi


@dataclass
class TimingReport:
    """Residual histograms per key combination plus the leakage numbers."""

    bin_edges: np.ndarray
    histograms: dict = field(default_factory=dict)  # (det_a, det_b) -> counts
    sufficient: dict = field(default_factory=dict)
    timing_leak_hv: float = 0.0
    timing_leak_diag: float = 0.0


def timing_histograms(pairs: Coincidences, bin_width: float = 125e-12,
                      min_counts: int = 1000) -> TimingReport:
    """Arrival-residual histograms of the four key combinations.

    Leakage per basis is the mutual information between the bit value and
    the binned residual. Combinations below ``min_counts`` pairs are
    flagged as statistically insufficient (the leakage is still computed).
    """
    acc = pairs.select(pairs.accepted)
    if len(acc) == 0:
        raise ValueError("no accepted pairs")
    w = acc.accept_window
    n_bins = max(1, int(np.ceil(2 * w / bin_width)))
    edges = -w + np.arange(n_bins + 1) * bin_width
    report = TimingReport(bin_edges=edges)

    hists = {}
    for _, _, (da, db) in _KEY_COMBOS:
        sel = (acc.detector_a == da) & (acc.detector_b == db)
        hist, _ = np.histogram(acc.residual[sel], bins=edges)
        hists[(da, db)] = hist
        report.histograms[(da, db)] = hist
        report.sufficient[(da, db)] = int(hist.sum()) >= min_counts

    report.timing_leak_hv = mutual_information(hists[(0, 2)], hists[(2, 0)])
    report.timing_leak_diag = mutual_information(hists[(1, 3)], hists[(3, 1)])
    return report


@dataclass(frozen=True)
class AsymmetryWindow:
    t_start: float
    n_bits: int
    ones_fraction: float


def windowed_bit_asymmetry(times: np.ndarray, bits: np.ndarray,
                           window: float = 60.0) -> list[AsymmetryWindow]:
    """Raw-key ones fraction over tumbling time windows.

    Continuous monitoring of this statistic is what exposes drifting
    detection efficiencies or selective blinding of single detectors.
    """
    times = np.asarray(times, dtype=np.float64)
    bits = np.asarray(bits)
    if times.size != bits.size:
        raise ValueError("times and bits must be parallel")
    if times.size == 0:
        return []
    out = []
    t0 = float(times[0])
    edges = np.arange(t0, float(times[-1]) + window, window)
    idx = np.searchsorted(times, edges)
    for k in range(len(edges) - 1):
        lo, hi = idx[k], idx[k + 1]
        if hi > lo:
            out.append(AsymmetryWindow(float(edges[k]), int(hi - lo),
                                       float(bits[lo:hi].mean())))
    return out


def load_reference_matrix() -> CorrelationMatrix:
    """The bundled field-measured correlation matrix (regression dataset)."""
    with resources.files("qkdlink.data").joinpath("table1.csv").open("r") as fh:
        return parse_matrix_csv(fh.read())


def parse_matrix_csv(text: str) -> CorrelationMatrix:
    """4x4 counts from CSV; header rows/label columns are tolerated."""
    rows = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        cells = [c.strip() for c in line.split(",")]
        numeric = []
        for c in cells:
            try:
                numeric.append(int(float(c)))
            except ValueError:
                continue
        if len(numeric) >= 4:
            rows.append(numeric[-4:])
    if len(rows) != 4:
        raise ValueError(f"expected 4 numeric rows of 4 counts, found {len(rows)}")
    return CorrelationMatrix(np.array(rows, dtype=np.int64))
