"""Variable-coefficient Laplace solver on the voxel grid.

Assembles the 7-point finite-volume operator for div(eps grad phi) = 0 with
Dirichlet conductor potentials and zero-flux outer boundaries, solves it
with preconditioned conjugate gradients, and integrates induced conductor
charges from the converged field.

Face conductance between two dielectric cells is eps0 * eps_face * A / d
with eps_face the distance-weighted harmonic mean of the two relative
permittivities; faces against conductor cells use the dielectric half-cell
conductance (the conductor surface sits on the shared face), which makes
layered 1D stacks exact.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import LinearOperator, cg

from .constants import EPS0_AF_PER_NM

log = logging.getLogger("qdcap.field")


class SolveError(RuntimeError):
    """Raised when a field solve cannot be used (non-convergence, misuse)."""


def drive_vector(conductor_names, values) -> np.ndarray:
    """Build a per-conductor potential vector (volts, registry order).

    ``values`` is a mapping name -> volts covering every conductor, or a
    sequence already in registry order.
    """
    n = len(conductor_names)
    if isinstance(values, dict):
        missing = [c for c in conductor_names if c not in values]
        if missing:
            raise SolveError(f"drive missing conductors: {missing}")
        unknown = [k for k in values if k not in conductor_names]
        if unknown:
            raise SolveError(f"drive names unknown conductors: {unknown}")
        v = np.array([float(values[c]) for c in conductor_names])
    else:
        v = np.asarray(values, dtype=float)
        if v.shape != (n,):
            raise SolveError(f"drive length {v.shape} does not match {n} conductors")
    if not np.all(np.isfinite(v)):
        raise SolveError("drive contains non-finite entries")
    return v


def unit_drive(conductor_names, name) -> np.ndarray:
    v = np.zeros(len(conductor_names))
    v[list(conductor_names).index(name)] = 1.0
    return v


@dataclass
class DiscreteOperator:
    """SPD finite-volume operator on the dielectric unknowns of one grid."""

    A: sp.csr_matrix
    unknown_of_cell: np.ndarray     # flat cell index -> unknown index or -1
    cell_of_unknown: np.ndarray
    cface_u: np.ndarray             # conductor-face: unknown index
    cface_k: np.ndarray             # conductor-face: conductor index (0-based)
    cface_g: np.ndarray             # conductor-face: conductance (aF)
    conductor_names: list
    grid_shape: tuple
    n_floating: int
    floating_cells: np.ndarray
    _precond: dict = field(default_factory=dict, repr=False)

    @property
    def n_unknowns(self):
        return self.A.shape[0]

    def preconditioner(self, kind="amg"):
        if kind is None or kind == "none":
            return None
        if kind not in self._precond:
            if kind == "amg":
                import pyamg

                ml = pyamg.smoothed_aggregation_solver(self.A, max_coarse=500)
                self._precond[kind] = ml.aspreconditioner(cycle="V")
            elif kind == "jacobi":
                inv_d = 1.0 / self.A.diagonal()
                self._precond[kind] = LinearOperator(
                    self.A.shape, matvec=lambda x, d=inv_d: d * x
                )
            else:
                raise SolveError(f"unknown preconditioner {kind!r}")
        return self._precond[kind]


def assemble(grid) -> DiscreteOperator:
    """Build the finite-volume operator for one voxel grid."""
    cond = grid.conductor
    nx, ny, nz = cond.shape
    n_cells = cond.size
    is_cond = (cond > 0).ravel()
    n_cond_cells = int(is_cond.sum())
    if n_cond_cells == 0:
        raise SolveError("grid has no conductor cells")
    if n_cond_cells == n_cells:
        raise SolveError("grid has no dielectric cells")

    eps = grid.eps_cells().ravel()
    dx, dy, dz = grid.widths
    half = [0.5 * dx, 0.5 * dy, 0.5 * dz]
    face_area = [
        np.multiply.outer(np.ones_like(dx[:-1]), np.multiply.outer(dy, dz)),
        np.multiply.outer(dx, np.multiply.outer(np.ones_like(dy[:-1]), dz)),
        np.multiply.outer(dx, np.multiply.outer(dy, np.ones_like(dz[:-1]))),
    ]

    unknown_of_cell = np.full(n_cells, -1, dtype=np.int64)
    unknown_of_cell[~is_cond] = np.arange(n_cells - n_cond_cells)
    n_unk = n_cells - n_cond_cells

    idx = np.arange(n_cells).reshape(nx, ny, nz)
    rows, cols, vals = [], [], []
    diag = np.zeros(n_unk)
    cf_u, cf_k, cf_g = [], [], []

    for ax in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[ax] = slice(None, -1)
        hi[ax] = slice(1, None)
        a = idx[tuple(lo)].ravel()
        b = idx[tuple(hi)].ravel()
        area = face_area[ax].ravel()
        shape_d = [1, 1, 1]
        shape_d[ax] = -1
        d_a = np.broadcast_to(
            half[ax][:-1].reshape(shape_d), idx[tuple(lo)].shape
        ).ravel()
        d_b = np.broadcast_to(
            half[ax][1:].reshape(shape_d), idx[tuple(hi)].shape
        ).ravel()

        ca, cb = is_cond[a], is_cond[b]

        # dielectric-dielectric: distance-weighted harmonic mean of eps
        dd = ~ca & ~cb
        if dd.any():
            g = (
                EPS0_AF_PER_NM
                * eps[a[dd]] * eps[b[dd]] * area[dd]
                / (d_a[dd] * eps[b[dd]] + d_b[dd] * eps[a[dd]])
            )
            ua, ub = unknown_of_cell[a[dd]], unknown_of_cell[b[dd]]
            rows.append(ua); cols.append(ub); vals.append(-g)
            rows.append(ub); cols.append(ua); vals.append(-g)
            diag += np.bincount(ua, weights=g, minlength=n_unk)
            diag += np.bincount(ub, weights=g, minlength=n_unk)

        # dielectric against conductor: half-cell conductance to the face
        for diel, condc, d_diel in ((a, b, d_a), (b, a, d_b)):
            dc = ~is_cond[diel] & is_cond[condc]
            if dc.any():
                g = EPS0_AF_PER_NM * eps[diel[dc]] * area[dc] / d_diel[dc]
                u = unknown_of_cell[diel[dc]]
                k = cond.ravel()[condc[dc]] - 1
                diag += np.bincount(u, weights=g, minlength=n_unk)
                cf_u.append(u)
                cf_k.append(k)
                cf_g.append(g)

    cf_u = np.concatenate(cf_u) if cf_u else np.zeros(0, dtype=np.int64)
    cf_k = np.concatenate(cf_k) if cf_k else np.zeros(0, dtype=np.int64)
    cf_g = np.concatenate(cf_g) if cf_g else np.zeros(0)

    # dielectric regions with no conductor face are pure-Neumann; pin them
    # (phi = 0, their region mean) and report
    adj_r = np.concatenate([r for r in rows]) if rows else np.zeros(0, dtype=np.int64)
    adj_c = np.concatenate([c for c in cols]) if cols else np.zeros(0, dtype=np.int64)
    graph = sp.coo_matrix(
        (np.ones(len(adj_r), dtype=np.int8), (adj_r, adj_c)), shape=(n_unk, n_unk)
    ).tocsr()
    n_comp, labels = connected_components(graph, directed=False)
    has_dirichlet = np.zeros(n_comp, dtype=bool)
    has_dirichlet[np.unique(labels[cf_u])] = True
    keep = has_dirichlet[labels]
    n_floating = int((~keep).sum())
    floating_cells = np.nonzero(~is_cond)[0][~keep]

    if n_floating:
        log.warning(
            "%d dielectric cells in %d floating region(s) touch no conductor; "
            "their potential is pinned to the region mean (0 V)",
            n_floating, int((~has_dirichlet).sum()),
        )
        remap = np.full(n_unk, -1, dtype=np.int64)
        remap[keep] = np.arange(int(keep.sum()))
        new_unknown = np.full(n_cells, -1, dtype=np.int64)
        old = unknown_of_cell[~is_cond]
        new_unknown[~is_cond] = remap[old]
        unknown_of_cell = new_unknown
        sel_f = keep[cf_u]
        cf_u, cf_k, cf_g = remap[cf_u[sel_f]], cf_k[sel_f], cf_g[sel_f]
        diag = diag[keep]
        fr, fc, fv = [], [], []
        for r, c, v in zip(rows, cols, vals):
            s = keep[r] & keep[c]
            fr.append(remap[r[s]]); fc.append(remap[c[s]]); fv.append(v[s])
        rows, cols, vals = fr, fc, fv
        n_unk = int(keep.sum())

    rows.append(np.arange(n_unk))
    cols.append(np.arange(n_unk))
    vals.append(diag)
    A = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_unk, n_unk),
    ).tocsr()
    A.sum_duplicates()

    cell_of_unknown = np.nonzero(unknown_of_cell >= 0)[0]

    return DiscreteOperator(
        A=A,
        unknown_of_cell=unknown_of_cell,
        cell_of_unknown=cell_of_unknown,
        cface_u=cf_u,
        cface_k=cf_k,
        cface_g=cf_g,
        conductor_names=list(grid.conductor_names),
        grid_shape=(nx, ny, nz),
        n_floating=n_floating,
        floating_cells=floating_cells,
    )


@dataclass
class FieldSolution:
    """Potential field for one drive, with solver diagnostics."""

    phi: np.ndarray            # (nx, ny, nz) volts; conductor cells at drive V
    phi_unknowns: np.ndarray
    drive: np.ndarray
    iterations: int
    relative_residual: float
    seconds: float
    converged: bool


def solve(op: DiscreteOperator, drive, tol=1e-8,
          preconditioner="amg", maxiter=None, extra_rhs=None,
          grid=None) -> FieldSolution:
    """Solve the assembled operator for one drive vector.

    ``extra_rhs`` is an optional per-unknown source term in aC (used by the
    self-consistent density solver); capacitance solves leave it None.
    """
    drive = drive_vector(op.conductor_names, drive)
    if not 0 < tol < 1:
        raise SolveError(f"tol must be in (0, 1), got {tol}")

    b = np.bincount(op.cface_u, weights=op.cface_g * drive[op.cface_k],
                    minlength=op.n_unknowns)
    if extra_rhs is not None:
        b = b + extra_rhs

    t0 = time.perf_counter()
    if not np.any(b):
        phi_u = np.zeros(op.n_unknowns)
        iters, relres = 0, 0.0
    else:
        M = op.preconditioner(preconditioner)
        if maxiter is None:
            maxiter = int(50 * math.sqrt(op.n_unknowns)) + 10
        count = [0]

        def _cb(_xk):
            count[0] += 1

        phi_u, _info = cg(op.A, b, rtol=tol, atol=0.0, maxiter=maxiter, M=M, callback=_cb)
        iters = count[0]
        relres = float(np.linalg.norm(b - op.A @ phi_u) / np.linalg.norm(b))
    seconds = time.perf_counter() - t0
    converged = relres <= tol

    nx, ny, nz = op.grid_shape
    phi = np.zeros(nx * ny * nz)
    phi[op.cell_of_unknown] = phi_u
    if grid is not None:
        cellk = grid.conductor.ravel()
        sel = cellk > 0
        phi[sel] = drive[cellk[sel] - 1]
    phi = phi.reshape(nx, ny, nz)

    if not converged:
        log.warning("solve failed to converge: iters=%d resid=%.3e", iters, relres)

    return FieldSolution(
        phi=phi,
        phi_unknowns=phi_u,
        drive=drive,
        iterations=iters,
        relative_residual=relres,
        seconds=seconds,
        converged=converged,
    )


def conductor_charges(op: DiscreteOperator, solution: FieldSolution) -> np.ndarray:
    """Induced charge per conductor (aF*V) from a converged solution.

    Q_k sums eps0 * eps_face * A * (phi_cell - V_k) / d over every face
    between conductor k and a dielectric cell.
    """
    if not solution.converged:
        raise SolveError("conductor_charges requires a converged solution")
    v = solution.drive
    dphi = solution.phi_unknowns[op.cface_u] - v[op.cface_k]
    return np.bincount(op.cface_k, weights=op.cface_g * dphi,
                       minlength=len(op.conductor_names))
