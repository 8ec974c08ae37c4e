"""Estimators: density elements from correlation counts, fidelity bounds,
fringe and gap fits, and the itemized error budget."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .entangled import (BELL, SWAPPED_BELL, ErrorBudget, IonMeasurementModel, dm,
                        rf_rotation, true_fidelity, validate_state, _check_wavelength)

# index order of the four diagonal elements in each basis
ELEMENT_KEYS = ("H0", "H1", "V0", "V1")


# -- density elements ----------------------------------------------------------

def _counts_array(result) -> np.ndarray:
    c = result.counts if hasattr(result, "counts") else result
    c = np.asarray(c, dtype=float)
    if c.shape != (2, 2) or np.any(c < 0):
        raise ValueError("counts must be a non-negative 2x2 table indexed [gamma, b]")
    return c


@dataclass
class DensityElements:
    """Diagonal elements rho_{gamma b, gamma b}; arrays indexed [gamma, b]."""

    unrotated: np.ndarray
    rotated: np.ndarray
    counts: np.ndarray | None = None
    rotated_counts: np.ndarray | None = None

    def __post_init__(self):
        for arr in (self.unrotated, self.rotated):
            if np.any(arr < -1e-12) or np.any(arr > 1 + 1e-12):
                raise ValueError("density elements must lie in [0, 1]")

    def as_dict(self) -> dict:
        out = {}
        for name, arr in (("", self.unrotated), ("~", self.rotated)):
            for k in ELEMENT_KEYS:
                out[name + k] = float(arr["HV".index(k[0]), int(k[1])])
        return out


def _elements(counts: np.ndarray, equal_marginals: bool) -> np.ndarray:
    tot = counts.sum()
    if tot <= 0:
        raise ValueError("zero total counts")
    if not equal_marginals:
        return counts / tot
    row = counts.sum(axis=1, keepdims=True)
    if np.any(row <= 0):
        raise ValueError("equal-marginal mode needs counts in both photon outcomes")
    return 0.5 * counts / row


def density_elements(counts, rotated_counts, force_equal_marginals: bool = False) -> DensityElements:
    """rho_{gamma b} = P(gamma) P(b|gamma) = n(gamma, b) / N.

    With ``force_equal_marginals`` P(gamma) is fixed at 1/2.
    """
    c = _counts_array(counts)
    r = _counts_array(rotated_counts)
    return DensityElements(_elements(c, force_equal_marginals),
                           _elements(r, force_equal_marginals), c, r)


# -- fidelity bounds -----------------------------------------------------------

def _lower(z, x, conv: int, rotated_sign: float = 1.0):
    """Lower bound on arrays z, x shaped (..., 2, 2) indexed [gamma, b]."""
    H0, H1, V0, V1 = z[..., 0, 0], z[..., 0, 1], z[..., 1, 0], z[..., 1, 1]
    h0, h1, v0, v1 = x[..., 0, 0], x[..., 0, 1], x[..., 1, 0], x[..., 1, 1]
    if conv == 493:
        good, bad = H1 + V0, np.sqrt(np.clip(H0 * V1, 0, None))
        rot = (h1 + v0) - (h0 + v1)
    else:
        good, bad = H0 + V1, np.sqrt(np.clip(H1 * V0, 0, None))
        rot = (h0 + v1) - (h1 + v0)
    return 0.5 * (good - 2 * bad + rotated_sign * rot)


def _upper(z, conv: int):
    if conv == 493:
        a, b = z[..., 0, 1], z[..., 1, 0]
    else:
        a, b = z[..., 0, 0], z[..., 1, 1]
    return 0.5 * (np.sqrt(a) + np.sqrt(b)) ** 2


@dataclass
class FidelityBounds:
    lower: float
    upper: float
    lower_stderr: float
    upper_stderr: float
    convention: int
    lower_raw: float = np.nan
    upper_raw: float = np.nan
    clamped: bool = False
    convention_mismatch: bool = False
    rotated_sign: float = 1.0
    notes: list = field(default_factory=list)

    @property
    def combined_stderr(self) -> float:
        return float(np.hypot(self.lower_stderr, self.upper_stderr))

    @property
    def consistent(self) -> bool:
        return self.lower <= self.upper + 2 * self.combined_stderr


def _convention_mismatch(z: np.ndarray, conv: int) -> bool:
    """True when the unrotated correlations favour the other labeling."""
    paired_493 = z[0, 1] + z[1, 0]
    paired_780 = z[0, 0] + z[1, 1]
    return bool(paired_780 > paired_493) if conv == 493 else bool(paired_493 > paired_780)


def fidelity_bounds(elems: DensityElements, convention: int = 493, n_boot: int = 2000,
                    rng: np.random.Generator | None = None,
                    rotated_sign: float | str = 1.0) -> FidelityBounds:
    """Lower and upper fidelity bounds with nonparametric bootstrap errors.

    ``convention`` is 493 (target (|0V> + |1H>)/sqrt2) or 780 (H and V
    exchanged).  ``rotated_sign="auto"`` takes the sign of the rotated-basis
    term from the data instead of assuming the convention's pairing; this is
    only meaningful for datasets whose rotated labeling is unknown.
    """
    _check_wavelength(convention)
    z, x = elems.unrotated, elems.rotated
    if rotated_sign == "auto":
        probe = _lower(z, x, convention, 1.0) - _lower(z, x, convention, -1.0)
        sign = 1.0 if probe >= 0 else -1.0
    else:
        sign = float(rotated_sign)
        if sign not in (1.0, -1.0):
            raise ValueError("rotated_sign must be +1, -1 or 'auto'")
    lo = float(_lower(z, x, convention, sign))
    up = float(_upper(z, convention))

    lo_se = up_se = np.nan
    if elems.counts is not None and elems.rotated_counts is not None and n_boot > 0:
        rng = rng or np.random.default_rng(0)
        c, r = elems.counts, elems.rotated_counts
        nz, nx = int(c.sum()), int(r.sum())
        bz = rng.multinomial(nz, (c / nz).ravel(), size=n_boot).reshape(n_boot, 2, 2) / nz
        bx = rng.multinomial(nx, (r / nx).ravel(), size=n_boot).reshape(n_boot, 2, 2) / nx
        lo_se = float(np.std(_lower(bz, bx, convention, sign), ddof=1))
        up_se = float(np.std(_upper(bz, convention), ddof=1))

    clamped = not (0 <= lo <= 1 and 0 <= up <= 1)
    mismatch = _convention_mismatch(z, convention)
    notes = []
    if clamped:
        notes.append("bound clamped to [0, 1]")
    if mismatch:
        notes.append(f"unrotated correlations favour the other labeling than {convention}")
    return FidelityBounds(float(np.clip(lo, 0, 1)), float(np.clip(up, 0, 1)), lo_se, up_se,
                          convention, lo, up, clamped, mismatch, sign, notes)


def relabel_hv(counts) -> np.ndarray:
    """Swap the photon labels H <-> V of a [gamma, b] table."""
    return _counts_array(counts)[::-1].copy()


# -- exact two-basis statistics for a known state -------------------------------

# rotated-basis photon projectors onto D and A
_D = np.array([1, 1]) / np.sqrt(2)
_A = np.array([1, -1]) / np.sqrt(2)


def basis_probabilities(state, basis: str, convention: int = 493,
                        model: IonMeasurementModel | None = None) -> np.ndarray:
    """Exact joint [gamma, b] distribution in the unrotated ("z") or rotated
    ("x") basis.

    The rotated measurement uses D/A for the photon and a pi/2 ion pulse whose
    phase makes the target state's rotated correlations follow the
    convention's H/V pairing.
    """
    rho = validate_state(state)
    if basis == "x":
        # R(pi/2, +pi/2) maps |+> -> |1>; the 493 target pairs |+>|D> after it
        phase = np.pi / 2 if convention == 493 else -np.pi / 2
        rho = rf_rotation(rho, np.pi / 2, phase)
        photon = (_D, _A)
    elif basis == "z":
        photon = (np.array([1, 0]), np.array([0, 1]))
    else:
        raise ValueError("basis must be 'z' or 'x'")
    r = rho.reshape(2, 2, 2, 2)
    out = np.empty((2, 2))
    for g, v in enumerate(photon):
        for b in range(2):
            out[g, b] = np.real(v.conj() @ r[b, :, b, :] @ v)
    out = np.clip(out, 0, None)
    if model is not None:
        out = out @ model.matrix
    return out / out.sum()


def sample_counts(probs: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.multinomial(n, np.asarray(probs).ravel()).reshape(2, 2)


@dataclass
class BracketReport:
    true_fidelity: float
    bounds: FidelityBounds
    passed: bool

    def __str__(self):
        b = self.bounds
        return (f"F={self.true_fidelity:.4f}  lower={b.lower:.4f}+/-{b.lower_stderr:.4f}  "
                f"upper={b.upper:.4f}+/-{b.upper_stderr:.4f}  "
                f"{'PASS' if self.passed else 'FAIL'}")


def bounds_bracket_check(state, n_events: int, rng: np.random.Generator,
                         convention: int = 493, n_boot: int = 2000,
                         nsigma: float = 3.0) -> BracketReport:
    """Simulate both bases for a known state and test
    lower - 3 sigma <= F <= upper + 3 sigma."""
    target = BELL if convention == 493 else SWAPPED_BELL
    F = true_fidelity(state, target)
    z = sample_counts(basis_probabilities(state, "z", convention), n_events, rng)
    x = sample_counts(basis_probabilities(state, "x", convention), n_events, rng)
    b = fidelity_bounds(density_elements(z, x), convention, n_boot, rng)
    ok = (b.lower_raw - nsigma * b.lower_stderr <= F + 1e-12
          and F <= b.upper_raw + nsigma * b.upper_stderr + 1e-12)
    return BracketReport(F, b, bool(ok))


def random_density_matrix(rng: np.random.Generator, rank: int | None = None) -> np.ndarray:
    """Ginibre-ensemble two-qubit density matrix."""
    k = rank or 4
    g = rng.normal(size=(4, k)) + 1j * rng.normal(size=(4, k))
    rho = g @ g.conj().T
    return rho / np.trace(rho).real


def random_product_state(rng: np.random.Generator) -> np.ndarray:
    def qubit():
        v = rng.normal(size=2) + 1j * rng.normal(size=2)
        return v / np.linalg.norm(v)
    return dm(np.kron(qubit(), qubit()))


# -- fringe fitting ------------------------------------------------------------

@dataclass
class FringeFit:
    visibility: float
    phase: float
    mean: float
    residual_rms: float
    period: float
    visibility_stderr: float = np.nan
    amplitude: float = np.nan  # unclipped half peak-to-peak of the fitted curve

    def argmax(self) -> float:
        """Setting (in [0, period)) where the fitted curve peaks."""
        return float((self.phase / (2 * np.pi) * self.period) % self.period)

    def __call__(self, x):
        k = 2 * np.pi / self.period
        amp = 0.5 * self.visibility if np.isnan(self.amplitude) else self.amplitude
        return self.mean + amp * np.cos(k * np.asarray(x) - self.phase)

    @property
    def peak(self) -> float:
        return self.mean + (0.5 * self.visibility if np.isnan(self.amplitude) else self.amplitude)


def fit_fringe(settings, probabilities, period: float, weights=None) -> FringeFit:
    """Linear least squares for a + (v/2) cos(k x - phi0) at fixed period."""
    x = np.asarray(settings, dtype=float)
    y = np.asarray(probabilities, dtype=float)
    if x.size < 5 or x.size != y.size:
        raise ValueError("need at least 5 points with matching settings/probabilities")
    # tolerance covers settings rounded on the way through a file
    if np.ptp(x) < period * (1 - 1 / x.size) - 1e-3 * period / x.size:
        raise ValueError("settings must span at least one period")
    k = 2 * np.pi / period
    A = np.column_stack([np.ones_like(x), np.cos(k * x), np.sin(k * x)])
    w = np.ones_like(x) if weights is None else np.sqrt(np.asarray(weights, dtype=float))
    coef, *_ = np.linalg.lstsq(A * w[:, None], y * w, rcond=None)
    a, c, s = coef
    amp = np.hypot(c, s)
    resid = y - A @ coef
    rms = float(np.sqrt(np.mean(resid ** 2)))
    dof = max(x.size - 3, 1)
    cov = np.linalg.pinv((A * w[:, None]).T @ (A * w[:, None])) * (np.sum((resid * w) ** 2) / dof)
    if amp > 0:
        g = np.array([0.0, c / amp, s / amp])
        v_se = float(2 * np.sqrt(max(g @ cov @ g, 0.0)))
    else:
        v_se = float(2 * np.sqrt(max(np.trace(cov[1:, 1:]) / 2, 0.0)))
    return FringeFit(float(min(2 * amp, 1.0)), float(np.arctan2(s, c) % (2 * np.pi)),
                     float(a), rms, float(period), v_se, float(amp))


# -- gap distribution ----------------------------------------------------------

@dataclass
class RateFit:
    mean_gap: float
    mean_stderr: float
    ci95: tuple
    rate: float | None
    rate_ci95: tuple | None
    n: int
    zero_variance: bool = False


def fit_gap_distribution(gaps, attempt_rate: float | None = None) -> RateFit:
    """Geometric maximum-likelihood fit of attempts-per-detection.

    Gaps count attempts up to and including the successful one (support
    k >= 1), so the MLE of the mean is the sample mean.
    """
    g = np.asarray(gaps, dtype=float)
    if g.size == 0:
        raise ValueError("no gaps to fit")
    if np.any(g < 1) or np.any(g != np.round(g)):
        raise ValueError("gaps must be positive integers")
    mean = float(g.mean())
    p = 1 / mean
    # Fisher information of the mean for Geometric(p): n / (mean (mean - 1))
    se = float(np.sqrt(mean * (mean - 1) / g.size))
    ci = (mean - 1.96 * se, mean + 1.96 * se)
    rate = rate_ci = None
    if attempt_rate is not None:
        rate = attempt_rate * p
        rate_ci = (attempt_rate / ci[1], attempt_rate / ci[0] if ci[0] > 0 else np.inf)
    return RateFit(mean, se, ci, rate, rate_ci, int(g.size), bool(np.ptp(g) == 0))


def geometric_chi2(gaps, p: float, n_bins: int = 20):
    """Chi-square goodness of fit against Geometric(p) with equiprobable bins.

    Returns (statistic, dof, p_value).
    """
    from scipy.stats import chi2, geom

    g = np.asarray(gaps)
    edges = np.unique(geom.ppf(np.linspace(0, 1, n_bins + 1)[1:-1], p))
    bins = np.concatenate([[0], edges, [np.inf]])
    observed = np.histogram(g, bins=bins)[0]
    cdf = geom.cdf(bins[1:-1], p)
    probs = np.diff(np.concatenate([[0], cdf, [1]]))
    expected = probs * g.size
    stat = float(np.sum((observed - expected) ** 2 / expected))
    dof = len(observed) - 1
    return stat, dof, float(chi2.sf(stat, dof))


# -- error budget --------------------------------------------------------------

@dataclass
class BudgetRow:
    source: str
    low: float
    high: float
    modeled: float | None = None


def _modeled_rows(budget: ErrorBudget, wavelength: int) -> dict:
    """Infidelity each channel alone inflicts on the target state."""
    from .entangled import (depolarize_ion, dephase, misalignment_unitary,
                            noise_floor, on_photon, swap_mixture)
    target = BELL if wavelength == 493 else SWAPPED_BELL
    rho = dm(target)

    def loss(r):
        return 1 - true_fidelity(r, target)

    U = on_photon(misalignment_unitary(budget.pol_rotation(wavelength)))
    # a detection error p misreads the ion; its effect on the measured
    # correlation equals an ion bit flip with that probability
    flip = np.kron(np.array([[0, 1], [1, 0]]), np.eye(2))
    det = budget.detection_err
    return {
        "State Detection": loss((1 - det) * rho + det * flip @ rho @ flip),
        # the simulated production error is the gated multiple-excitation swap
        "Photon Production": loss(swap_mixture(rho, budget.swap_prob)),
        "Polarization Rotation and Measurement": loss(U @ rho @ U.conj().T),
        "Signal-to-Noise Ratio": loss(noise_floor(rho, budget.noise_fraction(wavelength))),
        "RF Gate Errors and Qubit Decoherence": loss(
            depolarize_ion(dephase(rho, budget.coherence_factor()), budget.rf_gate_err)),
    }


def error_budget_report(budget: ErrorBudget | None = None, wavelength: int = 493) -> list[BudgetRow]:
    """Itemized infidelity contributions (quoted ranges) and their sum.

    ``modeled`` is the infidelity of the corresponding simulated channel
    acting alone on the target state at the budget's range point.
    """
    budget = budget or ErrorBudget()
    _check_wavelength(wavelength)
    modeled = _modeled_rows(budget, wavelength)
    pol = budget.pol_rotation_err[wavelength]
    snr = budget.snr_infidelity[wavelength]
    rows = [
        BudgetRow("State Detection", budget.detection_err, budget.detection_err),
        BudgetRow("Photon Production", *budget.photon_production_err),
        BudgetRow("Polarization Rotation and Measurement", *pol),
        BudgetRow("Signal-to-Noise Ratio", snr, snr),
        BudgetRow("RF Gate Errors and Qubit Decoherence", budget.rf_gate_err, budget.rf_gate_err),
    ]
    for r in rows:
        r.modeled = modeled[r.source]
    total = BudgetRow("Sum of Infidelities", sum(r.low for r in rows), sum(r.high for r in rows))
    return rows + [total]


def format_budget(rows: list[BudgetRow]) -> str:
    width = max(len(r.source) for r in rows)
    lines = [f"{'Error source':<{width}}  {'quoted (%)':>12}  {'modeled (%)':>11}"]
    for r in rows:
        q = f"{100 * r.low:.1f}" if abs(r.low - r.high) < 1e-12 else f"{100 * r.low:.1f}-{100 * r.high:.1f}"
        m = "" if r.modeled is None else f"{100 * r.modeled:.2f}"
        lines.append(f"{r.source:<{width}}  {q:>12}  {m:>11}")
    return "\n".join(lines)


def write_budget_csv(rows: list[BudgetRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source", "low", "high", "modeled"])
        for r in rows:
            w.writerow([r.source, f"{r.low:.6g}", f"{r.high:.6g}",
                        "" if r.modeled is None else f"{r.modeled:.6g}"])


# -- time-tag files ------------------------------------------------------------

TIMETAG_COLUMNS = ("attempt_index", "detector", "photon_time_ns", "setting_kind",
                   "setting_value", "ion_outcome", "wavelength")


def read_timetags(path) -> dict:
    """Column arrays from a time-tag CSV."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != TIMETAG_COLUMNS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        rows = list(reader)
    return {
        "attempt_index": np.array([int(r["attempt_index"]) for r in rows], dtype=np.int64),
        "detector": np.array([r["detector"] for r in rows]),
        "photon_time_ns": np.array([float(r["photon_time_ns"]) for r in rows]),
        "setting_kind": np.array([r["setting_kind"] for r in rows]),
        "setting_value": np.array([float(r["setting_value"]) for r in rows]),
        "ion_outcome": np.array([int(r["ion_outcome"]) for r in rows], dtype=int),
        "wavelength": np.array([int(r["wavelength"]) for r in rows], dtype=int),
    }


def counts_from_tags(tags: dict, mask) -> np.ndarray:
    g = (tags["detector"][mask] == "APD-2").astype(int)
    b = tags["ion_outcome"][mask]
    out = np.zeros((2, 2), dtype=int)
    np.add.at(out, (g, b), 1)
    return out


def gaps_from_tags(tags: dict) -> np.ndarray:
    idx = tags["attempt_index"]
    if idx.size == 0:
        return idx
    return np.diff(np.concatenate([[-1], idx]))
