"""Jones calculus for the analyzers and fiber links.

Convention: Jones vectors are (H, V); a retarder with retardance ``delta``
and fast axis at angle ``theta`` (measured from H, right-handed) is
``R(-theta) diag(e^{-i delta/2}, e^{i delta/2}) R(theta)``.  Results agree
with the textbook forms up to a global phase.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .entangled import I2, concurrence, on_photon, rotation_unitary, validate_state

HWP = np.pi
QWP = np.pi / 2


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class WaveplateSetting:
    retardance: float
    fast_axis: float  # degrees

    def __post_init__(self):
        if not 0 < self.retardance < 2 * np.pi:
            raise ValueError("retardance must lie in (0, 2*pi)")
        object.__setattr__(self, "fast_axis", float(self.fast_axis) % 180.0)


def hwp(angle_deg: float) -> WaveplateSetting:
    return WaveplateSetting(HWP, angle_deg)


def qwp(angle_deg: float) -> WaveplateSetting:
    return WaveplateSetting(QWP, angle_deg)


def retarder(retardance: float, angle_deg):
    """Retarder Jones matrix; ``angle_deg`` may be an array (batched)."""
    th = np.deg2rad(np.asarray(angle_deg, dtype=float))
    c, s = np.cos(th), np.sin(th)
    a, b = np.exp(-0.5j * retardance), np.exp(0.5j * retardance)
    # R(-th) diag(a, b) R(th), expanded
    m00 = a * c * c + b * s * s
    m11 = a * s * s + b * c * c
    m01 = (a - b) * c * s
    return np.stack([np.stack([m00, m01], -1), np.stack([m01, m11], -1)], -2)


def waveplate(setting: WaveplateSetting) -> np.ndarray:
    return retarder(setting.retardance, setting.fast_axis)


def is_unitary(j: np.ndarray, tol: float = 1e-10) -> bool:
    return bool(np.max(np.abs(j.conj().T @ j - I2)) < tol)


def equal_up_to_phase(a: np.ndarray, b: np.ndarray, tol: float = 1e-10) -> bool:
    k = np.argmax(np.abs(b))
    if abs(b.flat[k]) < tol:
        return bool(np.max(np.abs(a)) < tol)
    ph = a.flat[k] / b.flat[k]
    if abs(abs(ph) - 1) > tol:
        return False
    return bool(np.max(np.abs(a - ph * b)) < tol)


@dataclass(frozen=True)
class AnalyzerConfig:
    """QWP then HWP then PBS; PBS transmit -> APD-1 (H), reflect -> APD-2 (V)."""

    qwp: WaveplateSetting = field(default_factory=lambda: qwp(0.0))
    hwp: WaveplateSetting = field(default_factory=lambda: hwp(0.0))
    pbs_extinction: float = 0.0
    detector_map: tuple = (("transmit", "APD-1", "H"), ("reflect", "APD-2", "V"))

    def __post_init__(self):
        if not 0 <= self.pbs_extinction <= 0.05:
            raise ValueError("pbs_extinction must lie in [0, 0.05]")

    def with_angles(self, qwp_deg=None, hwp_deg=None) -> "AnalyzerConfig":
        return AnalyzerConfig(qwp(self.qwp.fast_axis if qwp_deg is None else qwp_deg),
                              hwp(self.hwp.fast_axis if hwp_deg is None else hwp_deg),
                              self.pbs_extinction, self.detector_map)

    def jones(self) -> np.ndarray:
        return waveplate(self.hwp) @ waveplate(self.qwp)


def analyzer_povm(config: AnalyzerConfig):
    """(E_H, E_V) on the photon arriving at the analyzer."""
    W = config.jones()
    PH = W.conj().T @ np.diag([1.0, 0.0]) @ W
    PV = W.conj().T @ np.diag([0.0, 1.0]) @ W
    e = config.pbs_extinction
    return (1 - e) * PH + e * PV, (1 - e) * PV + e * PH


def apply_photon_channel(state, j: np.ndarray):
    j = np.asarray(j, dtype=complex)
    if not is_unitary(j):
        raise ValueError("photon channel must be unitary on the lossless path")
    U = on_photon(j)
    return U @ np.asarray(state, dtype=complex) @ U.conj().T


def outcome_probabilities(state, povm) -> np.ndarray:
    """Joint P(gamma, b) with rows gamma in (H, V), columns ion b in (0, 1)."""
    rho = np.asarray(state).reshape(2, 2, 2, 2)
    out = np.empty((2, 2))
    for g, E in enumerate(povm):
        for b in range(2):
            out[g, b] = np.real(np.trace(rho[b, :, b, :] @ E))
    return np.clip(out, 0.0, None)


def conditional_probabilities(joint: np.ndarray) -> np.ndarray:
    """P(b | gamma) from a joint table with rows gamma."""
    tot = joint.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(tot > 0, joint / tot, 0.5)


def _conditional_blocks(state):
    """Unnormalized photon states conditioned on the ion being 0 or 1."""
    rho = np.asarray(state).reshape(2, 2, 2, 2)
    return rho[0, :, 0, :], rho[1, :, 1, :]


def visibility_grid(state, qwp_deg, hwp_deg, extinction: float = 0.0) -> np.ndarray:
    """|P(1|H) - P(1|V)| on a (qwp, hwp) mesh, vectorized."""
    Q, Hh = np.meshgrid(np.atleast_1d(qwp_deg), np.atleast_1d(hwp_deg), indexing="ij")
    W = retarder(HWP, Hh) @ retarder(QWP, Q)
    s0, s1 = _conditional_blocks(state)

    def ph(block):
        # <H| W block W^dag |H> and the V counterpart
        M = W @ block @ np.conj(np.swapaxes(W, -1, -2))
        return M[..., 0, 0].real, M[..., 1, 1].real

    h0, v0 = ph(s0)
    h1, v1 = ph(s1)
    e = extinction
    h0, v0 = (1 - e) * h0 + e * v0, (1 - e) * v0 + e * h0
    h1, v1 = (1 - e) * h1 + e * v1, (1 - e) * v1 + e * h1
    with np.errstate(invalid="ignore", divide="ignore"):
        p1h = np.where(h0 + h1 > 0, h1 / (h0 + h1), 0.5)
        p1v = np.where(v0 + v1 > 0, v1 / (v0 + v1), 0.5)
    return np.abs(p1h - p1v)


def calibrate_analyzer(fiber, source, grid: float = 1.0, extinction: float = 0.0,
                       flat_tol: float = 1e-6) -> AnalyzerConfig:
    """Grid search over (QWP, HWP) for maximal ion-photon visibility, then one
    golden-section pass per axis around the best grid point.

    Ties are resolved in favour of the lowest (QWP, HWP) angles.
    """
    from scipy.optimize import minimize_scalar

    source = validate_state(source)
    if concurrence(source) <= 1e-9:
        raise CalibrationError("source is separable; visibility landscape is flat")
    U = fiber.jones if isinstance(fiber, FiberUnitary) else np.asarray(fiber)
    arrived = apply_photon_channel(source, U)

    angles = np.arange(0.0, 180.0, grid)
    vis = visibility_grid(arrived, angles, angles, extinction)
    if vis.max() - vis.min() < flat_tol:
        raise CalibrationError("visibility landscape is flat")
    best = np.flatnonzero(vis >= vis.max() - 1e-12)[0]
    q0, h0 = angles[best // angles.size], angles[best % angles.size]

    def refine(f, x0):
        try:
            res = minimize_scalar(lambda x: -f(x), bracket=(x0 - grid, x0, x0 + grid),
                                  method="golden", tol=1e-8)
        except ValueError:  # grid point not strictly bracketed (plateau)
            return x0
        inside = abs(res.x - x0) <= grid
        return res.x if inside and -res.fun > f(x0) + 1e-15 else x0

    q1 = refine(lambda q: float(visibility_grid(arrived, q, h0, extinction)[0, 0]), q0)
    h1 = refine(lambda h: float(visibility_grid(arrived, q1, h, extinction)[0, 0]), h0)
    return AnalyzerConfig(qwp(q1), hwp(h1), extinction)


def analyzer_visibility(config: AnalyzerConfig, state) -> float:
    return float(visibility_grid(state, config.qwp.fast_axis, config.hwp.fast_axis,
                                 config.pbs_extinction)[0, 0])


# -- fibers --------------------------------------------------------------------

def random_su2(rng: np.random.Generator) -> np.ndarray:
    """Haar-random SU(2) element."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    a, b, c, d = q
    return np.array([[a + 1j * b, c + 1j * d], [-c + 1j * d, a - 1j * b]])


@dataclass
class FiberUnitary:
    """Fiber birefringence with an optional random-walk drift.

    ``drift_rate`` is the RMS rotation angle (rad) accumulated per component
    over one hour; the walk is diffusive, so it scales with sqrt(hours).
    """

    jones: np.ndarray = field(default_factory=lambda: I2.copy())
    drift_rate: float = 0.1

    def __post_init__(self):
        self.jones = np.asarray(self.jones, dtype=complex)
        if not is_unitary(self.jones):
            raise ValueError("fiber Jones matrix must be unitary")

    @classmethod
    def random(cls, rng: np.random.Generator, drift_rate: float = 0.1) -> "FiberUnitary":
        return cls(random_su2(rng), drift_rate)

    def advance(self, hours: float, rng: np.random.Generator, steps: int = 1) -> "FiberUnitary":
        """Return the fiber after ``hours`` of drift (the caller owns the update)."""
        J = self.jones
        for _ in range(steps):
            v = rng.normal(scale=self.drift_rate * np.sqrt(hours / steps), size=3)
            ang = np.linalg.norm(v)
            if ang > 0:
                J = rotation_unitary(ang, v) @ J
        return FiberUnitary(J, self.drift_rate)


def drift_infidelity(before: FiberUnitary, after: FiberUnitary) -> float:
    """Bell-state infidelity left after compensating ``before`` but seeing ``after``."""
    R = after.jones @ before.jones.conj().T
    return float(1 - abs(np.trace(R) / 2) ** 2)


def fringe_vs_hwp(state, analyzer: AnalyzerConfig, hwp_deg) -> np.ndarray:
    """Rows (P(1|H), P(1|V)) for each HWP angle, exact."""
    out = []
    for h in np.atleast_1d(hwp_deg):
        joint = outcome_probabilities(state, analyzer_povm(analyzer.with_angles(hwp_deg=h)))
        c = conditional_probabilities(joint)
        out.append((c[0, 1], c[1, 1]))
    return np.array(out)

