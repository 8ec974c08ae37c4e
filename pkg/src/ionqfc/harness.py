"""Monte Carlo driver: per-attempt trials, calibration scans, time-tag streams
and rate bookkeeping for the 493 nm and converted 780 nm paths.

A detection event is built from independent Bernoulli stages (emission,
software gate, fiber coupling, [conversion, long link], detector).  A click
that survives is background with probability 1/(1 + SNR); otherwise its
photon carries the emitted state, H/V-swapped with the multiple-excitation
probability at the sampled emission time.
"""
from __future__ import annotations

import ast
import csv
import io
from dataclasses import dataclass, field, fields, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .analysis import (FidelityBounds, FringeFit, TIMETAG_COLUMNS, density_elements,
                       fidelity_bounds, fit_fringe)
from .atomic import (EmissionProfile, SequenceTiming, attempt_rate, emission_profile,
                     gated_acceptance)
from .converter import ConverterChannel, conversion_kraus
from .entangled import (BELL, SWAPPED_BELL, ErrorBudget, I2, IonMeasurementModel,
                        SWAP_HV, dephase, depolarize, dm, measure_ion, misalignment_unitary,
                        noise_floor, on_photon, ptrace_photon, random_axis, rf_rotation,
                        _check_wavelength)
from .polarization import (AnalyzerConfig, FiberUnitary, analyzer_povm, calibrate_analyzer,
                           outcome_probabilities)

# mean attempts per 493 nm detection that the emission probability is fitted to
ATTEMPTS_PER_EVENT_493 = 350.0
DETECTORS = ("APD-1", "APD-2")  # transmit (H-type), reflect (V-type)
HWP_SCAN_DEG = tuple(np.arange(0.0, 180.0, 5.0))
PHASE_SCAN_RAD = tuple(np.arange(20) * np.pi / 10)
ROTATED_HWP_OFFSET = 22.5


@lru_cache(maxsize=4)
def default_profile() -> EmissionProfile:
    return emission_profile()


def calibrated_emission_probability(gate_window: float = 40.0) -> float:
    """Per-attempt emission probability reproducing 1/350 with the default
    493 nm efficiencies (0.38 coupling, 0.40 detector)."""
    accept, _ = gated_acceptance(default_profile(), gate_window)
    return 1.0 / (ATTEMPTS_PER_EVENT_493 * accept * 0.38 * 0.40)


@dataclass
class ExperimentConfig:
    wavelength: int = 493
    timing: SequenceTiming = field(default_factory=SequenceTiming)
    # Low end of the quoted ranges: the analyzer re-optimization already
    # absorbs part of the fiber misalignment that the ranges bracket.
    budget: ErrorBudget = field(default_factory=lambda: ErrorBudget(range_point=0.0))
    fiber_coupling: float = 0.38
    link_transmission: float = 0.66
    det_eff_493: float = 0.40
    det_eff_780: float = 0.58
    qubit_splitting: float = 14.67  # MHz
    magnetic_field: float = 5.23  # G, informational
    channel: ConverterChannel | None = None
    events_per_point: int = 500
    seed: int = 0
    gate_window: float = 40.0  # ns
    emission_probability: float | None = None
    fiber_drift_rate: float = 0.1
    pbs_extinction: float = 0.0
    calibration_grid: float = 1.0  # deg
    # adds the budget's photon-production depolarization on top of the
    # profile-driven swap (off: the swap already is that error)
    extra_production_depolarization: bool = False

    def __post_init__(self):
        _check_wavelength(self.wavelength)
        if self.wavelength == 780 and self.channel is None:
            self.channel = ConverterChannel()
        for name in ("fiber_coupling", "link_transmission", "det_eff_493", "det_eff_780"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.events_per_point < 0:
            raise ValueError("events_per_point must be non-negative")
        if self.emission_probability is None:
            self.emission_probability = calibrated_emission_probability(self.gate_window)
        if not 0 <= self.emission_probability <= 1:
            raise ValueError("emission_probability must lie in [0, 1]")

    @property
    def detector_efficiency(self) -> float:
        return self.det_eff_493 if self.wavelength == 493 else self.det_eff_780

    @property
    def target(self) -> np.ndarray:
        return BELL if self.wavelength == 493 else SWAPPED_BELL

    @property
    def orientation(self) -> int:
        """+1 when H pairs with ion 1 in the target, -1 when H pairs with 0."""
        return 1 if self.wavelength == 493 else -1

    def for_wavelength(self, wavelength: int) -> "ExperimentConfig":
        return replace(self, wavelength=wavelength, channel=None if wavelength == 493 else self.channel)


# -- config files --------------------------------------------------------------

def _parse_value(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_config_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """``key = value`` lines with ``#`` comments.  Keys are ExperimentConfig
    fields; ``budget.x``, ``timing.x`` and ``channel.x`` reach nested fields."""
    top, nested = {}, {"budget": {}, "timing": {}, "channel": {}}
    names = {f.name for f in fields(ExperimentConfig)}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        val = _parse_value(val)
        if "." in key:
            head, sub = key.split(".", 1)
            if head not in nested:
                raise ValueError(f"line {lineno}: unknown section {head!r}")
            nested[head][sub] = val
        elif key in names and key not in nested:
            top[key] = val
        else:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
    cfg = base or ExperimentConfig(wavelength=int(top.get("wavelength", 493)))
    if nested["budget"]:
        top["budget"] = replace(cfg.budget, **nested["budget"])
    if nested["timing"]:
        top["timing"] = replace(cfg.timing, **nested["timing"])
    if nested["channel"]:
        ch = cfg.channel or ConverterChannel()
        top["channel"] = replace(ch, **nested["channel"])
    if "emission_probability" not in top and "gate_window" in top:
        top["emission_probability"] = None
    return replace(cfg, **top)


def load_config(path) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text())


# -- apparatus -----------------------------------------------------------------

@dataclass
class Apparatus:
    """Fixed hardware realisation for one run: fiber, residual misalignment,
    emission profile and readout model."""

    config: ExperimentConfig
    profile: EmissionProfile
    fiber: FiberUnitary
    misalignment: np.ndarray
    readout: IonMeasurementModel

    @property
    def photon_unitary(self) -> np.ndarray:
        return self.misalignment @ self.fiber.jones


def build_apparatus(config: ExperimentConfig, profile: EmissionProfile | None = None) -> Apparatus:
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    hw = np.random.default_rng(seeds[0])
    fiber = FiberUnitary.random(hw, config.fiber_drift_rate)
    m = config.budget.pol_rotation(config.wavelength)
    mis = misalignment_unitary(m, random_axis(hw)) if m > 0 else I2.copy()
    readout = IonMeasurementModel.from_errors(p0_to_1=config.budget.detection_err)
    return Apparatus(config, profile or default_profile(), fiber, mis, readout)


def emitted_state(config: ExperimentConfig, swapped: bool = False) -> np.ndarray:
    rho = dm(BELL)
    if swapped:
        rho = SWAP_HV @ rho @ SWAP_HV
    if config.extra_production_depolarization:
        rho = depolarize(rho, config.budget.production())
    return rho


def _converted(rho, channel: ConverterChannel):
    K, _ = conversion_kraus(channel)
    out = K @ rho @ K.conj().T
    p = float(np.real(np.trace(out)))
    return out / p, p


def arriving_state(app: Apparatus, swapped: bool = False) -> tuple[np.ndarray, float]:
    """State at the analyzer and the conversion success probability."""
    cfg = app.config
    rho = emitted_state(cfg, swapped)
    p_conv = 1.0
    if cfg.wavelength == 780:
        rho, p_conv = _converted(rho, cfg.channel)
    U = on_photon(app.photon_unitary)
    return U @ rho @ U.conj().T, p_conv


def _ion_side(rho, cfg: ExperimentConfig, rf):
    if rf is None:
        return rho
    theta, phi = rf
    rho = dephase(rho, cfg.budget.coherence_factor())
    return rf_rotation(rho, theta, phi, cfg.budget.rf_gate_err)


def joint_distributions(app: Apparatus, analyzer: AnalyzerConfig, rf=None) -> dict:
    """Exact [gamma, read-out b] distributions of a click from the emitted,
    swapped and background components."""
    povm = analyzer_povm(analyzer)
    cfg = app.config
    out = {}
    for name, swapped in (("good", False), ("swap", True)):
        rho, _ = arriving_state(app, swapped)
        out[name] = outcome_probabilities(_ion_side(rho, cfg, rf), povm) @ app.readout.matrix
    rho, _ = arriving_state(app, False)
    bg = noise_floor(rho, 1.0)
    out["noise"] = outcome_probabilities(_ion_side(bg, cfg, rf), povm) @ app.readout.matrix
    for k in out:
        out[k] = out[k] / out[k].sum()
    return out


# -- records -------------------------------------------------------------------

@dataclass(frozen=True)
class TimeTagRecord:
    attempt_index: int
    detector: str
    photon_time: float  # ns after the start of the excitation pulse
    setting_kind: str
    setting_value: float
    ion_outcome: int
    wavelength: int

    def row(self) -> list[str]:
        return [str(self.attempt_index), self.detector, f"{self.photon_time:.3f}",
                self.setting_kind, f"{self.setting_value:.6f}", str(self.ion_outcome),
                str(self.wavelength)]


@dataclass
class CorrelationResult:
    setting_kind: str
    setting_value: float
    counts: np.ndarray  # [gamma, b]

    @property
    def n_events(self) -> int:
        return int(self.counts.sum())

    @property
    def p_gamma(self) -> np.ndarray:
        n = self.counts.sum()
        return self.counts.sum(axis=1) / n if n else np.full(2, np.nan)

    @property
    def conditional(self) -> np.ndarray:
        """P(b | gamma), rows gamma."""
        row = self.counts.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(row > 0, self.counts / row, np.nan)

    @property
    def stderr(self) -> np.ndarray:
        """Binomial standard error of P(1 | gamma) per row."""
        row = self.counts.sum(axis=1)
        p = self.conditional[:, 1]
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.sqrt(p * (1 - p) / row)

    @property
    def p1_given_H(self) -> float:
        return float(self.conditional[0, 1])

    @property
    def p1_given_V(self) -> float:
        return float(self.conditional[1, 1])

    @property
    def correlation(self) -> float:
        return self.p1_given_H - self.p1_given_V


# -- stage sampling ------------------------------------------------------------

def _profile_sampler(profile: EmissionProfile):
    cum = profile.cumulative_good + profile.cumulative_swap
    total = profile.intensity_good + profile.intensity_swap
    with np.errstate(invalid="ignore", divide="ignore"):
        swap_share = np.where(total > 0, profile.intensity_swap / total, 0.0)
    keep = np.concatenate([[True], np.diff(cum) > 0])

    def sample_time(u):
        return np.interp(u * cum[-1], cum[keep], profile.time[keep])

    def swap_prob(t):
        return np.interp(t, profile.time, swap_share)

    return sample_time, swap_prob


def per_attempt_success_probability(config: ExperimentConfig, path: int | None = None,
                                    profile: EmissionProfile | None = None) -> float:
    """Closed-form product of stage efficiencies for one attempt."""
    cfg = config if path is None or path == config.wavelength else config.for_wavelength(path)
    accept, _ = gated_acceptance(profile or default_profile(), cfg.gate_window)
    p = cfg.emission_probability * accept * cfg.fiber_coupling
    if cfg.wavelength == 780:
        p *= 0.5 * (cfg.channel.eta_H + cfg.channel.eta_V) * cfg.link_transmission
    return p * cfg.detector_efficiency


def sample_clicks(app: Apparatus, n_clicks: int, rng: np.random.Generator,
                  chunk: int = 1 << 20, max_attempts: int | None = None) -> dict:
    """Run attempts until ``n_clicks`` detections; returns per-click arrays
    (attempt_index, photon_time, component) with component 0 = emitted,
    1 = swapped, 2 = background."""
    cfg = app.config
    sample_time, swap_prob = _profile_sampler(app.profile)
    conv = {}
    if cfg.wavelength == 780:
        for comp, swapped in ((0, False), (1, True)):
            conv[comp] = _converted(emitted_state(cfg, swapped), cfg.channel)[1]
    noise_frac = cfg.budget.noise_fraction(cfg.wavelength)

    idx, times, comps = [], [], []
    done, start = 0, 0
    if n_clicks > 0 and per_attempt_success_probability(cfg, profile=app.profile) <= 0:
        raise ValueError("per-attempt success probability is zero; no clicks possible")
    while done < n_clicks:
        if max_attempts is not None and start >= max_attempts:
            break
        n = chunk if max_attempts is None else min(chunk, max_attempts - start)
        a = np.flatnonzero(rng.random(n) < cfg.emission_probability) + start
        t = sample_time(rng.random(a.size))
        ok = t <= cfg.gate_window
        a, t = a[ok], t[ok]
        comp = (rng.random(a.size) < swap_prob(t)).astype(int)
        ok = rng.random(a.size) < cfg.fiber_coupling
        a, t, comp = a[ok], t[ok], comp[ok]
        if cfg.wavelength == 780:
            p = np.where(comp == 1, conv.get(1, 1.0), conv.get(0, 1.0))
            ok = rng.random(a.size) < p * cfg.link_transmission
            a, t, comp = a[ok], t[ok], comp[ok]
        ok = rng.random(a.size) < cfg.detector_efficiency
        a, t, comp = a[ok], t[ok], comp[ok]
        bg = rng.random(a.size) < noise_frac
        comp = np.where(bg, 2, comp)
        t = np.where(bg, rng.random(a.size) * cfg.gate_window, t)
        idx.append(a)
        times.append(t)
        comps.append(comp)
        done += a.size
        start += n
    attempt = np.concatenate(idx)[:n_clicks] if idx else np.zeros(0, dtype=np.int64)
    return {"attempt_index": attempt.astype(np.int64),
            "photon_time": (np.concatenate(times)[:n_clicks] if times else np.zeros(0)),
            "component": (np.concatenate(comps)[:n_clicks] if comps else np.zeros(0, dtype=int)),
            "attempts": start}


def simulate_attempts(app: Apparatus, n_attempts: int, rng: np.random.Generator) -> int:
    """Number of detection events in exactly ``n_attempts`` attempts."""
    res = sample_clicks(app, np.iinfo(np.int64).max, rng, max_attempts=n_attempts)
    return int(res["attempt_index"].size)


def _outcomes(dists: dict, component: np.ndarray, rng: np.random.Generator):
    """Sample (gamma, b) for each click given its component."""
    gamma = np.empty(component.size, dtype=int)
    b = np.empty(component.size, dtype=int)
    for c, name in enumerate(("good", "swap", "noise")):
        sel = np.flatnonzero(component == c)
        if sel.size == 0:
            continue
        k = rng.choice(4, size=sel.size, p=dists[name].ravel())
        gamma[sel], b[sel] = k // 2, k % 2
    return gamma, b


# -- single attempt (reference path) -------------------------------------------

def run_attempt(config: ExperimentConfig, analyzer: AnalyzerConfig, rf=None,
                rng: np.random.Generator | None = None, apparatus: Apparatus | None = None,
                attempt_index: int = 0, setting=("hwp_deg", np.nan)) -> TimeTagRecord | None:
    """One photon-production attempt with explicit density matrices.

    Returns a record only when a gated photon is detected.
    """
    rng = rng or np.random.default_rng(config.seed)
    app = apparatus or build_apparatus(config)
    cfg = app.config
    sample_time, swap_prob = _profile_sampler(app.profile)
    if rng.random() >= cfg.emission_probability:
        return None
    t = float(sample_time(rng.random()))
    if t > cfg.gate_window:
        return None
    swapped = bool(rng.random() < swap_prob(t))
    rho = emitted_state(cfg, swapped)
    if rng.random() >= cfg.fiber_coupling:
        return None
    if cfg.wavelength == 780:
        rho, p_conv = _converted(rho, cfg.channel)
        if rng.random() >= p_conv * cfg.link_transmission:
            return None
    if rng.random() >= cfg.detector_efficiency:
        return None
    U = on_photon(app.photon_unitary)
    rho = U @ rho @ U.conj().T
    if rng.random() < cfg.budget.noise_fraction(cfg.wavelength):
        rho = noise_floor(rho, 1.0)
        t = float(rng.random() * cfg.gate_window)
    # photon detection collapses the ion onto the conditional state
    E = analyzer_povm(analyzer)
    blocks = [np.kron(I2, e) for e in E]
    p = np.array([np.real(np.trace(B @ rho)) for B in blocks])
    gamma = int(rng.random() >= p[0] / p.sum())
    ion = ptrace_photon(blocks[gamma] @ rho) / p[gamma]
    ion_state = np.kron(ion, I2 / 2)
    ion_state = _ion_side(ion_state, cfg, rf)
    b, _ = measure_ion(ion_state, app.readout, rng)
    kind, value = setting
    return TimeTagRecord(attempt_index, DETECTORS[gamma], t, kind, float(value), b, cfg.wavelength)


# -- scans ---------------------------------------------------------------------

@dataclass
class ScanData:
    results: list
    records: list = field(default_factory=list)


def _measure(app: Apparatus, analyzer: AnalyzerConfig, rf, kind: str, value: float,
             n: int, rng: np.random.Generator, offset: int = 0, keep_records: bool = True):
    clicks = sample_clicks(app, n, rng)
    dists = joint_distributions(app, analyzer, rf)
    gamma, b = _outcomes(dists, clicks["component"], rng)
    counts = np.zeros((2, 2), dtype=int)
    np.add.at(counts, (gamma, b), 1)
    recs = []
    if keep_records:
        base = offset
        for a, t, g, o in zip(clicks["attempt_index"], clicks["photon_time"], gamma, b):
            recs.append(TimeTagRecord(int(base + a), DETECTORS[g], float(t), kind, float(value),
                                      int(o), app.config.wavelength))
    next_offset = offset + (int(clicks["attempt_index"][-1]) + 1 if n else 0)
    return CorrelationResult(kind, float(value), counts), recs, next_offset


def calibrate(app: Apparatus) -> AnalyzerConfig:
    """QWP/HWP calibration against the ideal emitted state through the fiber."""
    cfg = app.config
    return calibrate_analyzer(app.fiber, dm(cfg.target), cfg.calibration_grid,
                              cfg.pbs_extinction)


def run_fringe_scan(config: ExperimentConfig, hwp_angles=HWP_SCAN_DEG,
                    rng: np.random.Generator | None = None, apparatus: Apparatus | None = None,
                    analyzer: AnalyzerConfig | None = None, keep_records: bool = False,
                    offset: int = 0, kind: str = "hwp_scan") -> ScanData:
    app = apparatus or build_apparatus(config)
    rng = rng or np.random.default_rng(config.seed)
    analyzer = analyzer or calibrate(app)
    results, records = [], []
    for h in hwp_angles:
        res, recs, offset = _measure(app, analyzer.with_angles(hwp_deg=h), None, kind, h,
                                     config.events_per_point, rng, offset, keep_records)
        results.append(res)
        records.extend(recs)
    return ScanData(results, records)


def run_phase_scan(config: ExperimentConfig, phases=PHASE_SCAN_RAD,
                   rng: np.random.Generator | None = None, apparatus: Apparatus | None = None,
                   analyzer: AnalyzerConfig | None = None, keep_records: bool = False,
                   offset: int = 0, kind: str = "phase_scan") -> ScanData:
    """``analyzer`` must already sit in the rotated photon basis."""
    app = apparatus or build_apparatus(config)
    rng = rng or np.random.default_rng(config.seed)
    if analyzer is None:
        base = calibrate(app)
        analyzer = base.with_angles(hwp_deg=base.hwp.fast_axis + ROTATED_HWP_OFFSET)
    results, records = [], []
    for ph in phases:
        res, recs, offset = _measure(app, analyzer, (np.pi / 2, ph), kind, ph,
                                     config.events_per_point, rng, offset, keep_records)
        results.append(res)
        records.extend(recs)
    return ScanData(results, records)


def click_weights(app: Apparatus) -> dict:
    """Share of detected clicks from each component (emitted, swapped, background)."""
    cfg = app.config
    _, s = gated_acceptance(app.profile, cfg.gate_window)
    pg = ps = 1.0
    if cfg.wavelength == 780:
        pg = _converted(emitted_state(cfg, False), cfg.channel)[1]
        ps = _converted(emitted_state(cfg, True), cfg.channel)[1]
    g, w = (1 - s) * pg, s * ps
    f = cfg.budget.noise_fraction(cfg.wavelength)
    return {"good": (1 - f) * g / (g + w), "swap": (1 - f) * w / (g + w), "noise": f}


def exact_distribution(app: Apparatus, analyzer: AnalyzerConfig, rf=None) -> np.ndarray:
    """Joint [gamma, b] click distribution in the infinite-statistics limit."""
    d = joint_distributions(app, analyzer, rf)
    return sum(w * d[k] for k, w in click_weights(app).items())


def exact_optimum(app: Apparatus, analyzer: AnalyzerConfig | None = None) -> tuple[float, float]:
    """(hwp_opt, phase_opt) from fits to noiseless scans."""
    cfg = app.config
    analyzer = analyzer or calibrate(app)

    # CorrelationResult accepts a probability table in place of counts
    hs = [CorrelationResult("hwp_scan", h, exact_distribution(app, analyzer.with_angles(hwp_deg=h)))
          for h in HWP_SCAN_DEG]
    h_opt = max_correlation_setting(hs, 90.0, cfg.orientation)
    x_an = analyzer.with_angles(hwp_deg=h_opt + ROTATED_HWP_OFFSET)
    ps = [CorrelationResult("phase_scan", p, exact_distribution(app, x_an, (np.pi / 2, p)))
          for p in PHASE_SCAN_RAD]
    return h_opt, max_correlation_setting(ps, 2 * np.pi, cfg.orientation)


def correlation_fit(results: list, period: float) -> FringeFit:
    x = [r.setting_value for r in results]
    return fit_fringe(x, [r.correlation for r in results], period)


def max_correlation_setting(results: list, period: float, orientation: int = 1) -> float:
    """Setting where orientation * (P(1|H) - P(1|V)) peaks on the fitted fringe."""
    fit = correlation_fit(results, period)
    best = fit.argmax() if orientation > 0 else (fit.argmax() + period / 2) % period
    return float(best)


@dataclass
class ExperimentRun:
    config: ExperimentConfig
    analyzer: AnalyzerConfig
    hwp_scan: ScanData
    phase_scan: ScanData
    hwp_opt: float
    phase_opt: float
    z_basis: CorrelationResult
    x_basis: CorrelationResult
    bounds: FidelityBounds
    records: list

    @property
    def total_attempts(self) -> int:
        return int(self.records[-1].attempt_index) + 1 if self.records else 0


def run_experiment(config: ExperimentConfig, keep_records: bool = True,
                   hwp_angles=HWP_SCAN_DEG, phases=PHASE_SCAN_RAD) -> ExperimentRun:
    """Calibrate, scan both bases, measure at the fitted optima and bound the
    fidelity.  Deterministic for a fixed config (seed included)."""
    app = build_apparatus(config)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(2)[1])
    analyzer = calibrate(app)
    orient = config.orientation

    hs = run_fringe_scan(config, hwp_angles, rng, app, analyzer, keep_records)
    off = _next_offset(hs.records)
    hwp_opt = max_correlation_setting(hs.results, 90.0, orient)
    z_an = analyzer.with_angles(hwp_deg=hwp_opt)
    z, zrec, off = _measure(app, z_an, None, "z_basis", hwp_opt, config.events_per_point,
                            rng, off, keep_records)

    x_an = analyzer.with_angles(hwp_deg=hwp_opt + ROTATED_HWP_OFFSET)
    ps = run_phase_scan(config, phases, rng, app, x_an, keep_records, off)
    off = _next_offset(ps.records, off)
    phase_opt = max_correlation_setting(ps.results, 2 * np.pi, orient)
    x, xrec, off = _measure(app, x_an, (np.pi / 2, phase_opt), "x_basis", phase_opt,
                            config.events_per_point, rng, off, keep_records)

    bounds = fidelity_bounds(density_elements(z, x), config.wavelength,
                             rng=np.random.default_rng(config.seed))
    records = hs.records + zrec + ps.records + xrec
    return ExperimentRun(config, analyzer, hs, ps, hwp_opt, phase_opt, z, x, bounds, records)


def _next_offset(records, default: int = 0) -> int:
    return records[-1].attempt_index + 1 if records else default


# -- time tags -----------------------------------------------------------------

def generate_timetags(config: ExperimentConfig, n_events: int,
                      rng: np.random.Generator | None = None,
                      apparatus: Apparatus | None = None,
                      analyzer: AnalyzerConfig | None = None) -> list[TimeTagRecord]:
    """Detection records at the calibrated max-correlation setting."""
    app = apparatus or build_apparatus(config)
    rng = rng or np.random.default_rng(config.seed)
    if n_events == 0:
        return []
    analyzer = analyzer or calibrate(app)
    _, recs, _ = _measure(app, analyzer, None, "hwp_deg", analyzer.hwp.fast_axis,
                          n_events, rng, 0, True)
    return recs


def write_timetags(records, path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TIMETAG_COLUMNS)
    for r in records:
        w.writerow(r.row())
    Path(path).write_text(buf.getvalue())


def write_scan_csv(results: list, path) -> None:
    kind = results[0].setting_kind if results else "hwp_deg"
    col = "phase_rad" if "phase" in kind else "hwp_deg"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([col, "p1_given_H", "p1_given_V", "n_events", "stderr_H", "stderr_V"])
        for r in results:
            se = r.stderr
            w.writerow([f"{r.setting_value:.6f}", f"{r.p1_given_H:.6f}", f"{r.p1_given_V:.6f}",
                        r.n_events, f"{se[0]:.6f}", f"{se[1]:.6f}"])


def rate_summary(config: ExperimentConfig) -> dict:
    p = per_attempt_success_probability(config)
    r = attempt_rate(config.timing)
    return {"p_success": p, "mean_gap": 1 / p if p > 0 else np.inf,
            "attempt_rate": r, "event_rate": r * p}
