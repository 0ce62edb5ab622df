"""Maxwell capacitance matrix extraction and structural checks.

One unit-potential solve per conductor ([Q] = [C][V] column by column), in
attofarads throughout.  The raw matrix is symmetrized as (C + C^T)/2 and the
pre-symmetrization asymmetry recorded.  The diagonal is the solver's
self-term under the zero-flux closure; it is not the capacitance of the
isolated conductor to infinity, so charging-energy use needs a separate
calculation.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .field import SolveError, assemble, conductor_charges, solve, unit_drive

log = logging.getLogger("qdcap.capmatrix")


@dataclass
class CapacitanceMatrix:
    values: np.ndarray          # (N, N) aF, symmetrized
    names: list
    asymmetry: float            # max |C - C^T| / max |C| before symmetrization
    provenance: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @property
    def n(self):
        return len(self.names)

    def index(self, name):
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown conductor {name!r}") from None

    def entry(self, a, b):
        return float(self.values[self.index(a), self.index(b)])

    def row_sums(self):
        return self.values.sum(axis=1)

    def permuted(self, new_order):
        """Rows and columns reordered to the given conductor-name order."""
        idx = [self.index(n) for n in new_order]
        return CapacitanceMatrix(
            values=self.values[np.ix_(idx, idx)],
            names=list(new_order),
            asymmetry=self.asymmetry,
            provenance=[self.provenance[i] for i in idx] if self.provenance else [],
            metadata=dict(self.metadata),
        )


def _solve_columns(grid, names, tol, preconditioner, workers, op=None):
    if op is None:
        op = assemble(grid)
    present = set(np.unique(grid.conductor))
    for i, cname in enumerate(grid.conductor_names):
        if (i + 1) not in present:
            raise SolveError(f"conductor {cname!r} has no grid cells; refine the grid")
    op.preconditioner(preconditioner)  # build once before any worker starts

    def one(cname):
        sol = solve(op, unit_drive(op.conductor_names, cname), tol=tol,
                    preconditioner=preconditioner)
        log.info(
            "solve conductor=%s iters=%d resid=%.3e seconds=%.3f",
            cname, sol.iterations, sol.relative_residual, sol.seconds,
        )
        if not sol.converged:
            raise SolveError(
                f"solve for conductor {cname!r} did not converge "
                f"(residual {sol.relative_residual:.3e} > tol {tol:g})"
            )
        q = conductor_charges(op, sol)
        prov = {
            "conductor": cname,
            "iterations": sol.iterations,
            "residual": sol.relative_residual,
            "seconds": sol.seconds,
        }
        return q, prov

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, names))
    else:
        results = [one(c) for c in names]
    cols = np.column_stack([q for q, _ in results])
    prov = [p for _, p in results]
    return cols, prov, op


def extract_columns(grid, names, tol=1e-8, preconditioner="amg", workers=1, op=None):
    """Charge columns for a subset of drives: C[:, j] for each named drive.

    By reciprocity a single drive on conductor d yields every coupling
    C(g, d); sweeps over a few target dots use this instead of the full
    N-solve extraction.
    """
    for n in names:
        if n not in grid.conductor_names:
            raise KeyError(f"unknown conductor {n!r}")
    cols, prov, _op = _solve_columns(grid, list(names), tol, preconditioner, workers, op=op)
    return cols, prov


def extract_matrix(grid, tol=1e-8, preconditioner="amg", workers=1) -> CapacitanceMatrix:
    """Full Maxwell matrix: one unit-drive solve per conductor."""
    names = list(grid.conductor_names)
    if len(names) < 2:
        raise SolveError(f"capacitance matrix needs >= 2 conductors, grid has {len(names)}")
    raw, prov, op = _solve_columns(grid, names, tol, preconditioner, workers)
    denom = np.abs(raw).max()
    asym = float(np.abs(raw - raw.T).max() / denom) if denom else 0.0
    sym = 0.5 * (raw + raw.T)
    meta = {
        "grid_cells": grid.n_cells,
        "grid_shape": tuple(int(s) for s in grid.shape),
        "tol": tol,
        "asymmetry": asym,
        "rowsum_max": float(np.abs(sym.sum(axis=1)).max()),
        "n_floating_cells": op.n_floating,
        "self_term_note": "diagonal is the zero-flux self-term, not capacitance to infinity",
    }
    return CapacitanceMatrix(values=sym, names=names, asymmetry=asym,
                             provenance=prov, metadata=meta)


# ---------------------------------------------------------------------------
# Structural checks

@dataclass
class MatrixDiagnostics:
    asymmetry: float
    rowsum_rel_max: float
    positive_offdiag: int
    nonpositive_diag: int
    symmetry_ok: bool
    rowsum_ok: bool
    signs_ok: bool

    @property
    def passed(self):
        return self.symmetry_ok and self.rowsum_ok and self.signs_ok

    def __str__(self):
        def mark(ok):
            return "pass" if ok else "FAIL"
        return "\n".join([
            f"symmetry   {mark(self.symmetry_ok)}  max asymmetry {self.asymmetry:.3e} (relative)",
            f"row sums   {mark(self.rowsum_ok)}  max |row sum| / C_ii {self.rowsum_rel_max:.3e}",
            f"signs      {mark(self.signs_ok)}  positive off-diagonals {self.positive_offdiag}, "
            f"non-positive diagonals {self.nonpositive_diag}",
        ])


def check_matrix(C: CapacitanceMatrix, tol_rel=1e-3) -> MatrixDiagnostics:
    """Verify symmetry, zero row sums and the sign pattern of a matrix."""
    v = C.values
    scale = np.abs(v).max() or 1.0
    asym = float(np.abs(v - v.T).max() / scale)
    # recorded pre-symmetrization asymmetry dominates for solver output
    asym = max(asym, C.asymmetry)
    diag = np.diag(v)
    rowsum_rel = float(np.abs(v.sum(axis=1)).max() / np.abs(diag).min()) if np.abs(diag).min() else np.inf
    off = v - np.diag(diag)
    pos_off = int((off > tol_rel * scale).sum())
    bad_diag = int((diag <= 0).sum())
    return MatrixDiagnostics(
        asymmetry=asym,
        rowsum_rel_max=rowsum_rel,
        positive_offdiag=pos_off,
        nonpositive_diag=bad_diag,
        symmetry_ok=asym <= tol_rel,
        rowsum_ok=rowsum_rel <= tol_rel,
        signs_ok=pos_off == 0 and bad_diag == 0,
    )


@dataclass
class Couplings:
    target: str
    self_af: float
    mutual: list   # [(gate, aF)] positive mutual capacitances, registry order

    def get(self, gate):
        for name, v in self.mutual:
            if name == gate:
                return v
        raise KeyError(f"unknown conductor {gate!r}")


def couplings_to(C: CapacitanceMatrix, target: str) -> Couplings:
    """Positive mutual capacitances -C(g, target) for every other conductor."""
    t = C.index(target)
    mutual = [
        (name, float(-C.values[i, t]))
        for i, name in enumerate(C.names)
        if i != t
    ]
    return Couplings(target=target, self_af=float(C.values[t, t]), mutual=mutual)


def lever_arm(C: CapacitanceMatrix, gate: str, dot: str) -> float:
    """alpha = -C(gate, dot) / C(dot, dot), in (0, 1) for physical matrices."""
    if gate == dot:
        raise KeyError("gate and dot must differ")
    return float(-C.values[C.index(gate), C.index(dot)] / C.values[C.index(dot), C.index(dot)])
