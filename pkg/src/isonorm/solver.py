"""Matrix-free block system application and conjugate-gradient solve.

The normal-equation operator is never materialized: every application is a
chain of sparse matrix-vector products with U, A, B, M and their
transposes, as required to keep the cost proportional to the stored
nonzeros.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NumericalError(RuntimeError):
    """CG produced a non-finite iterate or a non-SPD curvature direction."""


@dataclass
class SolutionState:
    """Concatenated unknowns: indicator coefficients over free nodes and
    per-point normal components."""

    x: np.ndarray
    n: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.x, self.n])


@dataclass
class SolverReport:
    iterations: int
    residuals: np.ndarray              # length iterations + 1
    energies: dict
    trace: list | None = field(default=None, repr=False)

    def trace_csv(self) -> str:
        lines = ["iter,residual,e_iso,e_poi,e_loc,r,total"]
        for row in self.trace or []:
            lines.append("%d,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g" % row)
        return "\n".join(lines) + "\n"


def split_state(ops, v: np.ndarray) -> SolutionState:
    return SolutionState(x=v[:ops.dim_x], n=v[ops.dim_x:])


def _apply_blocks(ops, x: np.ndarray, n: np.ndarray):
    # residual of the Poisson block is shared between the two output blocks
    r = ops.A @ x - ops.B @ n
    top = ops._Ut @ (ops.U @ x) + ops.alpha * (ops.A @ r)
    bottom = -ops.alpha * (ops._Bt @ r) + ops.beta * (ops.M @ n) + ops.gamma * n
    return top, bottom


def apply_system(ops, state: SolutionState) -> np.ndarray:
    """Apply the block normal-equation operator to a state."""
    if len(state.x) != ops.dim_x or len(state.n) != ops.dim_n:
        raise ValueError("state dimensions do not match the operators")
    top, bottom = _apply_blocks(ops, state.x, state.n)
    return np.concatenate([top, bottom])


def _apply_vec(ops, v: np.ndarray) -> np.ndarray:
    top, bottom = _apply_blocks(ops, v[:ops.dim_x], v[ops.dim_x:])
    return np.concatenate([top, bottom])


def rhs(ops) -> np.ndarray:
    """Right-hand side: isovalue target through U^T on top, zero below."""
    half = np.full(ops.n_points, 0.5)
    return np.concatenate([ops._Ut @ half, np.zeros(ops.dim_n)])


def total_energy(ops, state: SolutionState) -> dict:
    """All energy terms and the weighted total at a state."""
    iso_res = ops.U @ state.x - 0.5
    poi_res = ops.A @ state.x - ops.B @ state.n
    e_iso = float(iso_res @ iso_res)
    e_poi = float(poi_res @ poi_res)
    e_loc = float(state.n @ (ops.M @ state.n))
    reg = float(state.n @ state.n)
    total = e_iso + ops.alpha * e_poi + ops.beta * e_loc + ops.gamma * reg
    return {"e_iso": e_iso, "e_poi": e_poi, "e_loc": e_loc, "r": reg,
            "total": total}


def conjugate_gradient(apply_fn, b: np.ndarray, max_iters: int,
                       tol: float = 0.0, diag: np.ndarray | None = None,
                       callback=None):
    """Plain (optionally Jacobi-preconditioned) CG from a zero start.

    Returns (solution, residual norms).  Raises NumericalError on NaN/Inf
    iterates or on a significantly negative curvature direction, both of
    which signal a broken operator rather than a hard problem.
    """
    x = np.zeros_like(b)
    r = b.astype(float).copy()
    z = r / diag if diag is not None else r
    p = z.copy()
    rz = float(r @ z)
    residuals = [float(np.linalg.norm(r))]
    if residuals[0] == 0.0:
        return x, np.array(residuals)

    for it in range(1, max_iters + 1):
        ap = apply_fn(p)
        pap = float(p @ ap)
        if not np.isfinite(pap):
            raise NumericalError(f"non-finite curvature at iteration {it}")
        if pap <= 0.0:
            if pap < -1e-12 * float(p @ p):
                raise NumericalError(
                    f"non-positive curvature at iteration {it}: p.Ap = {pap:g}")
            break
        step = rz / pap
        x += step * p
        r -= step * ap
        rn = float(np.linalg.norm(r))
        if not np.isfinite(rn):
            raise NumericalError(f"non-finite residual at iteration {it}")
        residuals.append(rn)
        if callback is not None:
            callback(it, x)
        if tol > 0.0 and rn <= tol * residuals[0]:
            break
        z = r / diag if diag is not None else r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, np.array(residuals)


def _jacobi_diagonal(ops) -> np.ndarray:
    def colsq(mat):
        return np.asarray(mat.multiply(mat).sum(axis=0)).ravel()

    top = colsq(ops.U) + ops.alpha * colsq(ops.A)
    bottom = ops.alpha * colsq(ops.B) + ops.beta * ops.M.diagonal() + ops.gamma
    d = np.concatenate([top, bottom])
    d[d <= 0.0] = 1.0
    return d


def solve_cg(ops, max_iters: int = 300, tol: float = 0.0,
             jacobi: bool = False, trace_energies: bool = False):
    """Solve the reduced block system by CG from a zero initial state.

    tol = 0 runs all max_iters iterations; a positive tol stops at that
    relative residual.  Returns (SolutionState, SolverReport).
    """
    if ops.gamma <= 0.0:
        raise ValueError("gamma must be positive for a definite system")
    b = rhs(ops)
    diag = _jacobi_diagonal(ops) if jacobi else None

    energy_rows = [] if trace_energies else None

    def callback(it, v):
        e = total_energy(ops, split_state(ops, v))
        energy_rows.append((it, e))

    sol, residuals = conjugate_gradient(
        lambda v: _apply_vec(ops, v), b, max_iters=max_iters, tol=tol,
        diag=diag, callback=callback if trace_energies else None)

    trace = None
    if trace_energies:
        e0 = total_energy(ops, split_state(ops, np.zeros_like(b)))
        energy_rows.insert(0, (0, e0))
        trace = [(it, float(residuals[it]), e["e_iso"], e["e_poi"],
                  e["e_loc"], e["r"], e["total"]) for it, e in energy_rows]

    state = split_state(ops, sol)
    report = SolverReport(iterations=len(residuals) - 1, residuals=residuals,
                          energies=total_energy(ops, state), trace=trace)
    return state, report
