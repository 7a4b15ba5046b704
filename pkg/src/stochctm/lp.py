"""Dense linear-program solver: two-phase simplex with Bland's rule.

Problems are stated as

    maximize c.x  subject to  A x <= b,  lo <= x <= hi

with entries of lo/hi allowed to be -inf/+inf.  Bounds are folded into the
tableau by variable shifts (finite lower bound), reflections (finite upper
bound only) or splits (free variables); finite ranges add one row.  The
solver keeps the dual vector of the row system for the duality-gap audit.

Problem sizes here are tiny (tens of variables), so a dense tableau is the
right tool; no revised simplex, no sparsity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = ["LinearProgram", "LpResult", "LpError", "solve", "feasible"]

PIVOT_TOL = 1e-9


class LpError(ValueError):
    pass


@dataclass(frozen=True)
class LinearProgram:
    """maximize objective @ x subject to rows @ x <= rhs and box bounds."""

    objective: np.ndarray
    rows: np.ndarray
    rhs: np.ndarray
    bounds: tuple[tuple[float, float], ...] | None = None  # default x >= 0

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.objective, dtype=float))
        A = np.asarray(self.rows, dtype=float)
        if A.size == 0:
            A = A.reshape(0, c.size)
        b = np.atleast_1d(np.asarray(self.rhs, dtype=float)) if np.size(self.rhs) else np.zeros(0)
        object.__setattr__(self, "objective", c)
        object.__setattr__(self, "rows", A)
        object.__setattr__(self, "rhs", b)
        if A.ndim != 2 or A.shape[1] != c.size or A.shape[0] != b.size:
            raise LpError(
                f"inconsistent dimensions: c has {c.size} entries, "
                f"rows is {A.shape}, rhs has {b.size}"
            )
        if np.isnan(c).any() or np.isnan(A).any() or np.isnan(b).any():
            raise LpError("NaN entries are not allowed")
        if self.bounds is None:
            object.__setattr__(self, "bounds", tuple((0.0, math.inf) for _ in range(c.size)))
        elif len(self.bounds) != c.size:
            raise LpError("bounds must have one (lo, hi) pair per variable")


@dataclass
class LpResult:
    status: str                       # optimal | infeasible | unbounded
    x: np.ndarray | None
    objective: float | None
    max_violation: float
    dual: np.ndarray | None = None    # multipliers of the <= rows
    duality_gap: float | None = None


class _Tableau:
    """Standard-form tableau over nonnegative transformed variables."""

    def __init__(self, lp: LinearProgram):
        c, A, b = lp.objective, lp.rows, lp.rhs
        n = c.size
        cols = []          # per original var: list of (transformed index, sign)
        shift = np.zeros(n)
        extra_rows = []
        extra_rhs = []
        t = 0
        for j, (lo, hi) in enumerate(lp.bounds):
            if lo > hi:
                raise LpError(f"empty bound interval on variable {j}")
            if math.isfinite(lo):
                cols.append([(t, 1.0)])
                shift[j] = lo
                if math.isfinite(hi):
                    row = np.zeros(n)
                    row[j] = 1.0
                    extra_rows.append(row)
                    extra_rhs.append(hi)
                t += 1
            elif math.isfinite(hi):
                cols.append([(t, -1.0)])
                shift[j] = hi
                t += 1
            else:
                cols.append([(t, 1.0), (t + 1, -1.0)])
                t += 2
        self.n_orig = n
        self.n_trans = t
        self.cols = cols
        self.shift = shift

        A_full = np.vstack([A] + [r[None, :] for r in extra_rows]) if extra_rows else A
        b_full = np.concatenate([b, np.array(extra_rhs)]) if extra_rhs else b
        self.m_rows = A.shape[0]          # duals reported for these only
        m = A_full.shape[0]

        T = np.zeros((m, t))
        for j in range(n):
            for tj, sgn in cols[j]:
                T[:, tj] += sgn * A_full[:, j]
        rhs_t = b_full - A_full @ shift

        c_t = np.zeros(t)
        for j in range(n):
            for tj, sgn in cols[j]:
                c_t[tj] += sgn * c[j]
        self.obj_const = float(c @ shift)
        self.c = c_t

        # slack columns, flipping rows with negative rhs
        self.flip = rhs_t < 0
        sign = np.where(self.flip, -1.0, 1.0)
        self.A = T * sign[:, None]
        self.b = rhs_t * sign
        self.m = m

    def run(self, need_phase2: bool) -> tuple[str, np.ndarray | None, np.ndarray | None]:
        m, t = self.m, self.n_trans
        nslack = m
        art_rows = np.nonzero(self.flip)[0]
        nart = art_rows.size
        width = t + nslack + nart
        tab = np.zeros((m, width + 1))
        tab[:, :t] = self.A
        tab[:, width] = self.b
        basis = np.empty(m, dtype=int)
        ai = 0
        for i in range(m):
            tab[i, t + i] = -1.0 if self.flip[i] else 1.0
            if self.flip[i]:
                tab[i, t + nslack + ai] = 1.0
                basis[i] = t + nslack + ai
                ai += 1
            else:
                basis[i] = t + i

        if nart:
            # phase 1: maximize -(sum of artificials)
            z = np.zeros(width + 1)
            z[t + nslack : width] = 1.0
            for i in range(m):
                if z[basis[i]] != 0.0:
                    z -= z[basis[i]] * tab[i]
            status = self._iterate(tab, basis, z, allow=t + nslack)
            if status == "unbounded" or -z[width] > 1e-7 * (1.0 + abs(self.b).max(initial=0.0)):
                return "infeasible", None, None
            # drive leftover artificials out of the basis where possible
            for i in range(m):
                if basis[i] >= t + nslack:
                    row = tab[i, : t + nslack]
                    j = next((jj for jj in range(t + nslack) if abs(row[jj]) > PIVOT_TOL), None)
                    if j is not None:
                        self._pivot(tab, basis, i, j)
            tab[:, t + nslack : width] = 0.0
        if not need_phase2:
            x = self._extract(tab, basis)
            return "optimal", x, None

        z = np.zeros(width + 1)
        z[:t] = -self.c
        for i in range(m):
            if abs(z[basis[i]]) > 0:
                z -= z[basis[i]] * tab[i]
        status = self._iterate(tab, basis, z, allow=t + nslack)
        if status == "unbounded":
            return "unbounded", None, None
        x = self._extract(tab, basis)
        # reduced cost of slack i is the multiplier of the i-th <= row,
        # for flipped and unflipped rows alike
        dual = z[t : t + nslack].copy()
        return "optimal", x, dual

    def _iterate(self, tab, basis, z, allow: int) -> str:
        max_iter = 200 * (self.m + self.n_trans + 10)
        for _ in range(max_iter):
            enter = -1
            for j in range(allow):  # Bland: first improving column
                if z[j] < -PIVOT_TOL:
                    enter = j
                    break
            if enter < 0:
                return "optimal"
            col = tab[:, enter]
            best = None
            for i in range(self.m):
                if col[i] > PIVOT_TOL:
                    ratio = tab[i, -1] / col[i]
                    if best is None or ratio < best[0] - 1e-12 or (
                        abs(ratio - best[0]) <= 1e-12 and basis[i] < basis[best[1]]
                    ):
                        best = (ratio, i)
            if best is None:
                return "unbounded"
            self._pivot(tab, basis, best[1], enter)
            z -= z[enter] * tab[best[1]]
        raise LpError("simplex iteration limit exceeded")

    @staticmethod
    def _pivot(tab, basis, row, col):
        tab[row] /= tab[row, col]
        piv = tab[row]
        for i in range(tab.shape[0]):
            if i != row and abs(tab[i, col]) > 0:
                tab[i] -= tab[i, col] * piv
        basis[row] = col

    def _extract(self, tab, basis) -> np.ndarray:
        xt = np.zeros(self.n_trans + self.m * 2)
        for i, bi in enumerate(basis):
            if bi < xt.size:
                xt[bi] = tab[i, -1]
        x = self.shift.copy()
        for j in range(self.n_orig):
            for tj, sgn in self.cols[j]:
                x[j] += sgn * xt[tj]
        return x


def _violation(lp: LinearProgram, x: np.ndarray) -> float:
    v = 0.0
    if lp.rows.shape[0]:
        v = float(np.maximum(lp.rows @ x - lp.rhs, 0.0).max(initial=0.0))
    for j, (lo, hi) in enumerate(lp.bounds):
        v = max(v, lo - x[j], x[j] - hi)
    return max(v, 0.0)


def solve(lp: LinearProgram) -> LpResult:
    """Optimize; on success the result carries the row duals and gap."""
    tab = _Tableau(lp)
    status, x, dual = tab.run(need_phase2=True)
    if status != "optimal":
        return LpResult(status=status, x=None, objective=None, max_violation=math.inf)
    obj = float(lp.objective @ x)
    gap = None
    if dual is not None:
        # gap measured on the transformed problem: b'.y vs c'.x'
        primal_t = obj - tab.obj_const
        rhs_t = tab.b * np.where(tab.flip, -1.0, 1.0)
        gap = abs(float(rhs_t @ dual) - primal_t)
        dual = dual[: tab.m_rows]
    return LpResult(
        status="optimal",
        x=x,
        objective=obj,
        max_violation=_violation(lp, x),
        dual=dual,
        duality_gap=gap,
    )


def feasible(lp: LinearProgram) -> tuple[bool, np.ndarray | None]:
    """Phase-one feasibility; the witness satisfies all rows when True."""
    tab = _Tableau(lp)
    status, x, _ = tab.run(need_phase2=False)
    if status != "optimal":
        return False, None
    return True, x
