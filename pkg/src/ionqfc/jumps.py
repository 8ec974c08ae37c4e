"""Quantum-jump (Monte Carlo wavefunction) unravelling of the atomic model.

Used as an independent check on the RK4 master-equation integrator.  Between
pulse edges the effective Hamiltonian is constant, so the no-jump evolution is
applied exactly through its eigendecomposition and jump times are located by
bisection on the decaying norm rather than quantized to a time step.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .atomic import N_LEVELS, collapse_operators, hamiltonian


@dataclass
class JumpResult:
    time: np.ndarray
    populations: np.ndarray  # (n_times, 8) trajectory mean
    stderr: np.ndarray       # (n_times, 8) standard error of the mean
    n_trajectories: int
    jump_counts: np.ndarray  # jumps per trajectory


class _Propagator:
    def __init__(self, H, c_ops):
        Heff = H - 0.5j * sum(c.conj().T @ c for c in c_ops)
        self.lam, self.V = np.linalg.eig(Heff)
        self.Vinv = np.linalg.inv(self.V)

    def apply(self, psi, tau):
        # psi: (n, 8), tau: (n,) -> exp(-i Heff tau) psi, row-wise
        c = psi @ self.Vinv.T
        c = c * np.exp(-1j * np.outer(tau, self.lam))
        return c @ self.V.T


def _norm2(psi):
    return np.einsum("ij,ij->i", psi.conj(), psi).real


def run_trajectories(scheme, pulses, initial_level: int, grid, n_traj: int,
                     rng: np.random.Generator, bisect_iter: int = 48) -> JumpResult:
    grid = np.asarray(grid, dtype=float)
    edges = set(grid.tolist())
    for p in pulses:
        for e in (p.start, p.end):
            if grid[0] < e < grid[-1]:
                edges.add(e)
    bounds = np.array(sorted(edges))
    record = set(grid.tolist())

    c_ops = collapse_operators(scheme)
    L = np.array(c_ops)  # (k, 8, 8)

    psi = np.zeros((n_traj, N_LEVELS), dtype=complex)
    psi[:, initial_level] = 1.0
    thresh = rng.random(n_traj)
    jumps = np.zeros(n_traj, dtype=int)

    out_p = [np.zeros(N_LEVELS)]
    out_p[0][initial_level] = 1.0
    out_se = [np.zeros(N_LEVELS)]
    cache = {}

    for a, b in zip(bounds[:-1], bounds[1:]):
        H = hamiltonian(scheme, pulses, 0.5 * (a + b))
        key = H.tobytes()
        if key not in cache:
            cache[key] = _Propagator(H, c_ops)
        prop = cache[key]

        remaining = np.full(n_traj, b - a)
        active = np.arange(n_traj)
        while active.size:
            sub = psi[active]
            end = prop.apply(sub, remaining[active])
            n_end = _norm2(end)
            jumped = n_end < thresh[active]
            psi[active[~jumped]] = end[~jumped]
            if not jumped.any():
                break
            idx = active[jumped]
            start = psi[idx]
            lo = np.zeros(idx.size)
            hi = remaining[idx].copy()
            for _ in range(bisect_iter):
                mid = 0.5 * (lo + hi)
                below = _norm2(prop.apply(start, mid)) < thresh[idx]
                hi = np.where(below, mid, hi)
                lo = np.where(below, lo, mid)
            tau = hi
            at_jump = prop.apply(start, tau)
            # channel weights ||L_k psi||^2
            Lpsi = np.einsum("kab,nb->nka", L, at_jump)
            w = np.einsum("nka,nka->nk", Lpsi.conj(), Lpsi).real
            cw = np.cumsum(w, axis=1)
            u = rng.random(idx.size) * cw[:, -1]
            k = (cw < u[:, None]).sum(axis=1)
            new = Lpsi[np.arange(idx.size), k]
            new /= np.sqrt(_norm2(new))[:, None]
            psi[idx] = new
            thresh[idx] = rng.random(idx.size)
            jumps[idx] += 1
            remaining[idx] -= tau
            active = idx

        if b in record:
            pop = np.abs(psi) ** 2
            pop /= pop.sum(axis=1, keepdims=True)
            out_p.append(pop.mean(axis=0))
            out_se.append(pop.std(axis=0, ddof=1) / np.sqrt(n_traj))

    return JumpResult(grid, np.array(out_p), np.array(out_se), n_traj, jumps)
