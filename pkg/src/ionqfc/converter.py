"""Polarization-preserving difference-frequency converter (493 nm -> 780 nm).

Each polarization runs through its own direction of the loop, so the two
efficiencies are tuned separately by the pump power sent each way.  The
loop's achromatic half waveplate leaves the converted photon with H and V
exchanged.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.optimize import bisect

from .entangled import I2, SX, validate_state

POLARIZATIONS = ("H", "V")


@dataclass(frozen=True)
class ConversionCurve:
    eta_peak_V: float = 0.379
    eta_peak_H: float = 0.345
    p_peak_V: float = 1.0
    p_peak_H: float = 1.0

    def __post_init__(self):
        if not (0 <= self.eta_peak_V <= 1 and 0 <= self.eta_peak_H <= 1):
            raise ValueError("peak efficiencies must lie in [0, 1]")
        if self.p_peak_V <= 0 or self.p_peak_H <= 0:
            raise ValueError("peak pump powers must be positive")

    def peak(self, pol: str) -> tuple[float, float]:
        if pol not in POLARIZATIONS:
            raise ValueError(f"polarization must be 'H' or 'V', got {pol!r}")
        return (self.eta_peak_H, self.p_peak_H) if pol == "H" else (self.eta_peak_V, self.p_peak_V)


def efficiency(curve: ConversionCurve, pump, pol: str):
    """eta_peak * sin^2((pi/2) sqrt(P / p_peak)); ``pump`` may be an array."""
    p = np.asarray(pump, dtype=float)
    if np.any(p < 0):
        raise ValueError("pump power must be non-negative")
    eta, p_peak = curve.peak(pol)
    out = eta * np.sin(0.5 * np.pi * np.sqrt(p / p_peak)) ** 2
    return float(out) if out.ndim == 0 else out


def solve_pump(curve: ConversionCurve, target: float, pol: str, xtol: float = 1e-12) -> float:
    """Lowest pump power reaching ``target`` on the rising edge of the curve."""
    eta, p_peak = curve.peak(pol)
    if target < 0 or target > eta:
        raise ValueError(f"target {target} outside achievable range [0, {eta}] for {pol}")
    if target == 0:
        return 0.0
    if target == eta:
        return p_peak
    return bisect(lambda p: efficiency(curve, p, pol) - target, 0.0, p_peak, xtol=xtol)


def matched_operating_point(curve: ConversionCurve, target: float = 0.345) -> tuple[float, float]:
    """(pump_V, pump_H) at which both polarizations convert with ``target``."""
    if target > min(curve.eta_peak_V, curve.eta_peak_H):
        raise ValueError("target exceeds the weaker polarization's peak efficiency")
    return solve_pump(curve, target, "V"), solve_pump(curve, target, "H")


def write_curve_csv(curve: ConversionCurve, path, n: int = 101, p_max: float | None = None):
    p_max = p_max or 1.5 * max(curve.p_peak_V, curve.p_peak_H)
    pumps = np.linspace(0.0, p_max, n)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pump", "eta_V", "eta_H"])
        for p, v, h in zip(pumps, efficiency(curve, pumps, "V"), efficiency(curve, pumps, "H")):
            w.writerow([f"{p:.6f}", f"{v:.9f}", f"{h:.9f}"])


@dataclass(frozen=True)
class ConverterChannel:
    eta_V: float = 0.345
    eta_H: float = 0.345
    swap_hv: bool = True
    noise_rate: float = 200.0  # counts/s per detector
    bandpass_width: float = 10.0  # nm, informational
    curve: ConversionCurve = ConversionCurve()

    def __post_init__(self):
        if not 0 <= self.eta_V <= self.curve.eta_peak_V + 1e-12:
            raise ValueError("eta_V must lie in [0, eta_peak_V]")
        if not 0 <= self.eta_H <= self.curve.eta_peak_H + 1e-12:
            raise ValueError("eta_H must lie in [0, eta_peak_H]")
        if self.noise_rate < 0:
            raise ValueError("noise_rate must be non-negative")

    @classmethod
    def lossless(cls, swap_hv: bool = True) -> "ConverterChannel":
        return cls(1.0, 1.0, swap_hv, 0.0, curve=ConversionCurve(1.0, 1.0))


def conversion_kraus(channel: ConverterChannel) -> tuple[np.ndarray, list[np.ndarray]]:
    """(success operator, loss operators) on the joint ion-photon space.

    Loss operators leave the photon in the vacuum, which is modeled by
    returning it to the source basis with the ion untouched; together the
    set is trace preserving.
    """
    amp = np.diag([np.sqrt(channel.eta_H), np.sqrt(channel.eta_V)])
    swap = SX if channel.swap_hv else I2
    K_ok = np.kron(I2, swap @ amp)
    loss_H = np.kron(I2, np.diag([np.sqrt(1 - channel.eta_H), 0.0]))
    loss_V = np.kron(I2, np.diag([0.0, np.sqrt(1 - channel.eta_V)]))
    return K_ok, [loss_H, loss_V]


def conversion_probability(state, channel: ConverterChannel) -> float:
    K, _ = conversion_kraus(channel)
    return float(np.real(np.trace(K @ np.asarray(state) @ K.conj().T)))


def convert(state, channel: ConverterChannel, rng: np.random.Generator):
    """Sample conversion; returns (converted, state).  On failure the input is
    returned unchanged; on success the post-selected converted state."""
    rho = validate_state(state)
    K, _ = conversion_kraus(channel)
    out = K @ rho @ K.conj().T
    p = float(np.real(np.trace(out)))
    if p <= 0 or rng.random() >= p:
        return False, rho
    return True, out / p


def noise_click_probability(channel: ConverterChannel, gate_window: float) -> float:
    """Background click probability per detector per gate (ns), first order."""
    if gate_window <= 0:
        raise ValueError("gate_window must be positive")
    return channel.noise_rate * gate_window * 1e-9
