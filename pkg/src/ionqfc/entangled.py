"""Ion-photon joint state, error channels, ion rotations and readout.

Joint states are plain 4x4 complex arrays over the basis ``|0H>, |0V>, |1H>,
|1V>`` (ion first, index = 2*ion + photon).  Ion |0> is S1/2 m=-1/2, |1> is
S1/2 m=+1/2; photon H is index 0, V is index 1.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

BASIS = ("0H", "0V", "1H", "1V")
WAVELENGTHS = (493, 780)

I2 = np.eye(2, dtype=complex)
SX = np.array([[0, 1], [1, 0]], dtype=complex)
SY = np.array([[0, -1j], [1j, 0]], dtype=complex)
SZ = np.array([[1, 0], [0, -1]], dtype=complex)


def ket(ion: int, pol: str) -> np.ndarray:
    v = np.zeros(4, dtype=complex)
    v[2 * ion + (0 if pol == "H" else 1)] = 1.0
    return v


def dm(psi: np.ndarray) -> np.ndarray:
    psi = np.asarray(psi, dtype=complex)
    return np.outer(psi, psi.conj())


BELL = (ket(0, "V") + ket(1, "H")) / np.sqrt(2)
SWAPPED_BELL = (ket(0, "H") + ket(1, "V")) / np.sqrt(2)
SWAP_HV = np.kron(I2, SX)


def target_state(wavelength: int = 493) -> np.ndarray:
    """Target pure state: direct at 493 nm, H<->V swapped after conversion."""
    _check_wavelength(wavelength)
    return BELL if wavelength == 493 else SWAPPED_BELL


def _check_wavelength(wavelength):
    if wavelength not in WAVELENGTHS:
        raise ValueError(f"unknown wavelength tag {wavelength!r}; expected 493 or 780")


def validate_state(rho: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    rho = np.asarray(rho, dtype=complex)
    if rho.shape != (4, 4):
        raise ValueError(f"joint state must be 4x4, got {rho.shape}")
    if np.max(np.abs(rho - rho.conj().T)) > tol:
        raise ValueError("joint state is not Hermitian")
    if abs(np.trace(rho).real - 1) > tol:
        raise ValueError("joint state trace differs from 1")
    if np.linalg.eigvalsh(rho).min() < -tol:
        raise ValueError("joint state is not positive semidefinite")
    return rho


def ptrace_photon(rho: np.ndarray) -> np.ndarray:
    """Ion marginal."""
    return np.einsum("ajbj->ab", rho.reshape(2, 2, 2, 2))


def ptrace_ion(rho: np.ndarray) -> np.ndarray:
    """Photon marginal."""
    return np.einsum("iaib->ab", rho.reshape(2, 2, 2, 2))


def on_ion(op: np.ndarray) -> np.ndarray:
    return np.kron(op, I2)


def on_photon(op: np.ndarray) -> np.ndarray:
    return np.kron(I2, op)


def concurrence(rho: np.ndarray) -> float:
    yy = np.kron(SY, SY)
    R = rho @ yy @ rho.conj() @ yy
    ev = np.sqrt(np.clip(np.sort(np.linalg.eigvals(R).real)[::-1], 0, None))
    return float(max(0.0, ev[0] - ev[1] - ev[2] - ev[3]))


# -- emission ------------------------------------------------------------------

@dataclass(frozen=True)
class RawEmissionState:
    """Amplitudes of |0>|sigma+> and |1>|pi> right after P(+1/2) decays."""

    sigma_plus: complex = np.sqrt(2 / 3)
    pi: complex = np.sqrt(1 / 3)

    def __post_init__(self):
        if abs(abs(self.sigma_plus) ** 2 + abs(self.pi) ** 2 - 1) > 1e-12:
            raise ValueError("emission amplitudes are not normalized")


def raw_emission_state() -> RawEmissionState:
    return RawEmissionState()


def project_perpendicular(raw: RawEmissionState | None = None) -> np.ndarray:
    """Joint state for collection perpendicular to the quantization axis.

    Seen side-on, a pi dipole radiates H with full amplitude while a sigma
    dipole radiates V with amplitude 1/sqrt(2), which equalizes the
    Clebsch-Gordan weights.
    """
    raw = raw or RawEmissionState()
    psi = raw.sigma_plus * np.sqrt(0.5) * ket(0, "V") + raw.pi * ket(1, "H")
    psi /= np.linalg.norm(psi)
    return dm(psi)


# -- error budget --------------------------------------------------------------

@dataclass(frozen=True)
class ErrorBudget:
    """Imperfection magnitudes; ranged entries are (low, high) tuples.

    ``range_point`` picks where inside each range the simulation sits.
    ``snr_infidelity`` holds the quoted per-wavelength infidelity attributed
    to background; the channel itself is driven by ``snr``.
    """

    swap_prob: float = 0.02
    snr: dict = field(default_factory=lambda: {493: 55.0, 780: 10.0})
    snr_infidelity: dict = field(default_factory=lambda: {493: 0.012, 780: 0.06})
    photon_production_err: tuple = (0.015, 0.020)
    rf_gate_err: float = 0.01
    detection_err: float = 0.015
    pol_rotation_err: dict = field(default_factory=lambda: {493: (0.01, 0.03),
                                                            780: (0.01, 0.05)})
    t2_no_echo: float = 200.0
    t2_echo: float = 2000.0
    qubit_delay: float = 70.0
    dephasing: str = "gaussian"
    range_point: float = 0.5

    def __post_init__(self):
        probs = [self.swap_prob, self.rf_gate_err, self.detection_err,
                 *self.photon_production_err, *self.snr_infidelity.values()]
        for lo_hi in self.pol_rotation_err.values():
            probs.extend(lo_hi)
        if any(not 0 <= p <= 1 for p in probs):
            raise ValueError("error probabilities must lie in [0, 1]")
        if any(s <= 0 for s in self.snr.values()):
            raise ValueError("snr must be positive")
        if self.t2_echo < self.t2_no_echo:
            raise ValueError("t2_echo must be at least t2_no_echo")
        if self.dephasing not in ("exponential", "gaussian"):
            raise ValueError("dephasing must be 'exponential' or 'gaussian'")
        if not 0 <= self.range_point <= 1:
            raise ValueError("range_point must lie in [0, 1]")

    @classmethod
    def zero(cls) -> "ErrorBudget":
        return cls(swap_prob=0.0, snr={493: np.inf, 780: np.inf},
                   snr_infidelity={493: 0.0, 780: 0.0}, photon_production_err=(0.0, 0.0),
                   rf_gate_err=0.0, detection_err=0.0,
                   pol_rotation_err={493: (0.0, 0.0), 780: (0.0, 0.0)},
                   t2_no_echo=np.inf, t2_echo=np.inf)

    def _pick(self, lo_hi) -> float:
        lo, hi = lo_hi
        return lo + self.range_point * (hi - lo)

    def production(self) -> float:
        return self._pick(self.photon_production_err)

    def pol_rotation(self, wavelength: int) -> float:
        _check_wavelength(wavelength)
        return self._pick(self.pol_rotation_err[wavelength])

    def noise_fraction(self, wavelength: int) -> float:
        _check_wavelength(wavelength)
        return 1.0 / (1.0 + self.snr[wavelength])

    def coherence_factor(self) -> float:
        x = self.qubit_delay / self.t2_echo
        return float(np.exp(-x) if self.dephasing == "exponential" else np.exp(-x * x))


def swap_mixture(rho, p):
    return (1 - p) * rho + p * SWAP_HV @ rho @ SWAP_HV


def depolarize(rho, p):
    return (1 - p) * rho + p * np.eye(4) / 4


def depolarize_ion(rho, p):
    return (1 - p) * rho + p * np.kron(I2 / 2, ptrace_ion(rho))


def dephase(rho, factor):
    """Scale ion coherences (entries with differing ion index) by ``factor``."""
    mask = np.ones((4, 4))
    mask[:2, 2:] = factor
    mask[2:, :2] = factor
    return rho * mask


def noise_floor(rho, f):
    """Replace the photon with an unpolarized click with probability ``f``."""
    return (1 - f) * rho + f * np.kron(ptrace_photon(rho), I2 / 2)


def rotation_unitary(angle: float, axis) -> np.ndarray:
    n = np.asarray(axis, dtype=float)
    n = n / np.linalg.norm(n)
    gen = n[0] * SX + n[1] * SY + n[2] * SZ
    return np.cos(angle / 2) * I2 - 1j * np.sin(angle / 2) * gen


def misalignment_unitary(infidelity: float, axis=None) -> np.ndarray:
    """Photon rotation whose Bell-state infidelity equals ``infidelity``.

    |<Bell| 1 x U |Bell>|^2 = cos^2(angle/2) for any rotation axis.
    """
    angle = 2 * np.arcsin(np.sqrt(infidelity))
    return rotation_unitary(angle, (1, 1, 1) if axis is None else axis)


def random_axis(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def apply_error_budget(state, budget: ErrorBudget, wavelength: int, rng=None,
                       stages=("swap", "production", "dephasing", "noise", "misalignment")):
    """Apply the budget channels in the fixed order swap -> production
    depolarization -> dephasing -> noise floor -> misalignment.

    The misalignment axis is drawn from ``rng`` when given, otherwise the
    (1,1,1) axis on the Poincare sphere is used.
    """
    _check_wavelength(wavelength)
    rho = validate_state(state)
    if "swap" in stages:
        rho = swap_mixture(rho, budget.swap_prob)
    if "production" in stages:
        rho = depolarize(rho, budget.production())
    if "dephasing" in stages:
        rho = dephase(rho, budget.coherence_factor())
    if "noise" in stages:
        rho = noise_floor(rho, budget.noise_fraction(wavelength))
    if "misalignment" in stages:
        m = budget.pol_rotation(wavelength)
        if m > 0:
            U = on_photon(misalignment_unitary(m, None if rng is None else random_axis(rng)))
            rho = U @ rho @ U.conj().T
    return 0.5 * (rho + rho.conj().T)


# -- ion control and readout ---------------------------------------------------

def rf_unitary(polar_angle: float, phase: float) -> np.ndarray:
    """R(theta, phi) = exp(-i theta/2 (cos(phi) X + sin(phi) Y)) on the ion."""
    return rotation_unitary(polar_angle, (np.cos(phase), np.sin(phase), 0.0))


def rf_rotation(state, polar_angle: float, phase: float, err: float = 0.0):
    U = on_ion(rf_unitary(polar_angle, phase))
    rho = U @ np.asarray(state, dtype=complex) @ U.conj().T
    if err:
        rho = depolarize_ion(rho, err)
    return rho


@dataclass(frozen=True)
class IonMeasurementModel:
    """Classical readout confusion; ``confusion[true, read]``.

    |0> is the shelved (dark) state, targeting D5/2 m=-1/2, so its failure
    mode is a bright misread.
    """

    confusion: tuple = ((1.0, 0.0), (0.0, 1.0))

    def __post_init__(self):
        c = np.asarray(self.confusion, dtype=float)
        if c.shape != (2, 2) or np.any(c < 0) or not np.allclose(c.sum(axis=1), 1):
            raise ValueError("confusion rows must be probability distributions")

    @property
    def matrix(self) -> np.ndarray:
        return np.asarray(self.confusion, dtype=float)

    @classmethod
    def from_errors(cls, p0_to_1: float = 0.0, p1_to_0: float = 0.0):
        return cls(((1 - p0_to_1, p0_to_1), (p1_to_0, 1 - p1_to_0)))

    @classmethod
    def symmetric(cls, p: float):
        return cls.from_errors(p, p)


def ion_probabilities(state, model: IonMeasurementModel | None = None) -> np.ndarray:
    """Readout distribution (P(read 0), P(read 1))."""
    born = np.clip(np.real(np.diag(ptrace_photon(np.asarray(state)))), 0, 1)
    born /= born.sum()
    m = (model or IonMeasurementModel()).matrix
    return born @ m


def measure_ion(state, model: IonMeasurementModel | None, rng: np.random.Generator):
    """Sample a readout; returns (outcome, record) with the collapsed photon state."""
    rho = np.asarray(state, dtype=complex)
    born = np.clip(np.real(np.diag(ptrace_photon(rho))), 0, 1)
    born /= born.sum()
    projected = int(rng.random() >= born[0])
    m = (model or IonMeasurementModel()).matrix
    outcome = int(rng.random() >= m[projected, 0])
    block = rho.reshape(2, 2, 2, 2)[projected, :, projected, :]
    photon = block / np.trace(block)
    return outcome, {"projected": projected, "photon_state": photon,
                     "probabilities": born @ m}


def true_fidelity(state, target) -> float:
    """<psi|rho|psi>; ``target`` may be a ket or a pure density matrix."""
    target = np.asarray(target, dtype=complex)
    if target.ndim == 2:
        if abs(np.trace(target @ target).real - 1) > 1e-9:
            raise ValueError("target state must be pure")
        w, v = np.linalg.eigh(target)
        target = v[:, -1]
    target = target / np.linalg.norm(target)
    return float(np.clip(np.real(target.conj() @ np.asarray(state) @ target), 0.0, 1.0))


# -- serialization -------------------------------------------------------------

def state_to_json(rho) -> str:
    flat = np.asarray(rho, dtype=complex).reshape(-1)
    return json.dumps({"basis": list(BASIS),
                       "entries": [[float(z.real), float(z.imag)] for z in flat]})


def state_from_json(text: str) -> np.ndarray:
    data = json.loads(text)
    if data.get("basis", list(BASIS)) != list(BASIS):
        raise ValueError("unexpected basis ordering")
    flat = np.array([complex(re, im) for re, im in data["entries"]])
    return validate_state(flat.reshape(4, 4))


def state_to_csv(rho) -> str:
    flat = np.asarray(rho, dtype=complex).reshape(-1)
    lines = ["index,row,col,re,im"]
    for k, z in enumerate(flat):
        lines.append(f"{k},{BASIS[k // 4]},{BASIS[k % 4]},{z.real:.17g},{z.imag:.17g}")
    return "\n".join(lines) + "\n"


def state_from_csv(text: str) -> np.ndarray:
    rows = [ln.split(",") for ln in text.strip().splitlines()[1:]]
    flat = np.array([complex(float(r[3]), float(r[4])) for r in rows])
    return validate_state(flat.reshape(4, 4))

