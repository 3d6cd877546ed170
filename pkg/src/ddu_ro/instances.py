"""Benchmark instance generators, the brute-force exactness oracle, and
instance file I/O.

The oracle defines the ground truth the solvers are tested against: it
enumerates the first stage over its integer lattice (continuous components are
pinned, gridded, or optimized out, see oracle_exact), enumerates the vertices
of U(x) by solving every basis system of the standard form, evaluates the
recourse per vertex, and takes max then min. It shares nothing with the
cutting-plane machinery beyond the LP/MIP primitives.
"""

from __future__ import annotations

import itertools
import json
import math
import os
import tempfile
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import backend
from .backend import GEQ, LEQ, LinearModel
from .model import (
    AffineMatrixMap,
    FirstStageSet,
    Instance,
    RecourseSet,
    UncertaintySet,
    add_first_stage,
    instance_from_dict,
    instance_to_dict,
)


class OracleError(Exception):
    """Raised when an instance exceeds the oracle's enumeration limits or
    violates the assumptions the enumeration relies on."""


# -- canonical tiny fixtures ---------------------------------------------------

def t1() -> Instance:
    """One binary x, one u, one y: U(x) = {0 <= u <= 1 + x}, recourse
    min{y : y >= u}. Worst case is u at its cap, so w(0) = 1, w(1) = 3."""
    return Instance(
        name="T1",
        c1=[1.0],
        X=FirstStageSet(A=np.zeros((0, 1)), b=np.zeros(0), n_int=1,
                        lb=[0.0], ub=[1.0]),
        U=UncertaintySet(F=AffineMatrixMap(base=[[1.0]]), G=[[1.0]], h=[1.0]),
        Y=RecourseSet(B1=[[0.0]], B2=[[1.0]], E=[[-1.0]], d=[0.0], c2=[1.0]),
    )


def t1_infeasible() -> Instance:
    """Recourse rows y >= 1 and y <= 1/2 can never hold together, so the
    deterministic relaxation (and the robust problem) is infeasible."""
    return Instance(
        name="T1-infeasible",
        c1=[1.0],
        X=FirstStageSet(A=np.zeros((0, 1)), b=np.zeros(0), n_int=1,
                        lb=[0.0], ub=[1.0]),
        U=UncertaintySet(F=AffineMatrixMap(base=[[1.0]]), G=[[0.0]], h=[1.0]),
        Y=RecourseSet(B1=np.zeros((2, 1)), B2=[[1.0], [-1.0]], E=np.zeros((2, 1)),
                      d=[1.0, -0.5], c2=[1.0]),
    )


# -- vertex enumeration --------------------------------------------------------

@dataclass
class OracleLimits:
    max_lattice: int = 20000        # integer x assignments
    max_bases: int = 2_000_000      # basis systems per U(x)
    max_vertices: int = 5000        # distinct vertices kept per U(x)
    grid: int = 7                   # grid points per free coupled continuous dim
    dedup_tol: float = 1e-9


def enumerate_vertices(U: UncertaintySet, x: np.ndarray,
                       limits: OracleLimits | None = None) -> np.ndarray:
    """All vertices of U(x) = {u >= 0 : F(x) u <= h + G x} as rows.

    Continuous case: every basis of [F(x) | I] is solved in batch; a basic
    solution with all components nonnegative is a vertex. All-integer case
    (n_int_u == dim): the integer lattice inside the per-coordinate LP bounds
    is enumerated and filtered by membership.
    """
    limits = limits or OracleLimits()
    x = np.asarray(x, dtype=float)
    Fx = U.F.evaluate(x)
    rhs = U.h + U.G @ x
    mu, n = Fx.shape

    if U.n_int_u:
        if U.n_int_u != n:
            raise OracleError("mixed-integer u is outside the oracle's scope")
        return _integer_points(Fx, rhs, limits)

    if mu == 0:
        if n == 0:
            return np.zeros((1, 0))
        raise OracleError("U(x) has no rows: unbounded, violates boundedness")

    n_cols = n + mu
    n_bases = math.comb(n_cols, mu)
    if n_bases > limits.max_bases:
        raise OracleError(f"{n_bases} basis systems exceed the cap {limits.max_bases}")

    A = np.hstack([Fx, np.eye(mu)])
    # row equilibration keeps basis determinants O(1); structural u parts of
    # the basic solutions are unchanged, slack values rescale harmlessly
    row_scale = np.maximum(np.abs(A).max(axis=1), 1e-30)
    A = A / row_scale[:, None]
    rhs_s = rhs / row_scale
    combos = np.array(list(itertools.combinations(range(n_cols), mu)), dtype=int)
    verts: list[np.ndarray] = []
    seen: set[tuple] = set()
    chunk = max(1, int(2e7 // (mu * mu)))
    for lo in range(0, len(combos), chunk):
        sub = combos[lo:lo + chunk]
        mats = A[:, sub].transpose(1, 0, 2)          # (batch, mu, mu)
        dets = np.abs(np.linalg.det(mats))
        ok = dets > 1e-12
        if not np.any(ok):
            continue
        b_batch = np.broadcast_to(rhs_s[:, None], (int(ok.sum()), mu, 1)).copy()
        sols = np.linalg.solve(mats[ok], b_batch)[:, :, 0]
        feas = np.all(sols >= -limits.dedup_tol * np.maximum(1.0, np.abs(rhs_s).max()),
                      axis=1)
        # guard against ill-conditioned near-singular systems
        resid = np.einsum("bij,bj->bi", mats[ok], sols) - rhs_s
        feas &= np.max(np.abs(resid), axis=1) <= 1e-7 * max(1.0, np.abs(rhs_s).max())
        for cols, z in zip(sub[ok][feas], sols[feas]):
            u = np.zeros(n)
            struct = cols < n
            u[cols[struct]] = np.maximum(z[struct], 0.0)
            key = tuple(np.round(u / limits.dedup_tol).astype(np.int64))
            if key not in seen:
                seen.add(key)
                verts.append(u)
                if len(verts) > limits.max_vertices:
                    raise OracleError(f"more than {limits.max_vertices} vertices")
    if not verts:
        raise OracleError("U(x) is empty at the probed x (nonemptiness violated)")
    return np.array(verts)


def _integer_points(Fx: np.ndarray, rhs: np.ndarray,
                    limits: OracleLimits) -> np.ndarray:
    mu, n = Fx.shape
    ubs = []
    for j in range(n):
        lp = LinearModel(name="u_bound")
        u_ids = lp.add_vars(n, lb=0.0, prefix="u")
        if mu:
            lp.add_block(u_ids, Fx, LEQ, rhs)
        lp.set_objective({u_ids[j]: 1.0}, sense="max")
        out = backend.solve_lp(lp)
        if out.status == backend.UNBOUNDED:
            raise OracleError(f"u[{j}] unbounded: integer enumeration impossible")
        if not out.is_optimal:
            raise OracleError("U(x) is empty at the probed x (nonemptiness violated)")
        ubs.append(int(np.floor(out.objective + 1e-9)))
    total = 1
    for b in ubs:
        total *= b + 1
        if total > limits.max_lattice:
            raise OracleError(f"integer u lattice exceeds {limits.max_lattice}")
    pts = []
    for combo in itertools.product(*[range(b + 1) for b in ubs]):
        u = np.array(combo, dtype=float)
        if mu == 0 or np.all(Fx @ u <= rhs + 1e-9):
            pts.append(u)
    if not pts:
        raise OracleError("U(x) has no integer points (nonemptiness violated)")
    return np.array(pts)


# -- recourse evaluation -------------------------------------------------------

def recourse_value(inst: Instance, x: np.ndarray, u: np.ndarray,
                   time_limit: float | None = None) -> tuple[float, np.ndarray | None]:
    """min{c2 y : y in Y(x, u)}; +inf when infeasible, -inf when unbounded."""
    Y = inst.Y
    m = LinearModel(name="recourse")
    y_ids = [m.add_var(0.0, np.inf, integer=j < Y.n_int_y, name=f"y{j}")
             for j in range(Y.dim)]
    rhs = Y.d - Y.B1 @ np.asarray(x, dtype=float) - Y.E @ np.asarray(u, dtype=float)
    if Y.n_rows:
        m.add_block(y_ids, Y.B2, GEQ, rhs)
    m.set_objective({y_ids[j]: Y.c2[j] for j in range(Y.dim) if Y.c2[j] != 0.0},
                    sense="min")
    out = backend.solve(m, time_limit=time_limit)
    if out.is_optimal:
        return float(out.objective), out.x[:Y.dim]
    if out.status == backend.INFEASIBLE:
        return np.inf, None
    if out.status == backend.UNBOUNDED:
        return -np.inf, None
    raise backend.BackendError(f"recourse solve ended {out.status}")


def worst_case_value(inst: Instance, x: np.ndarray,
                     limits: OracleLimits | None = None) -> tuple[float, np.ndarray]:
    """max over vertices of U(x) of the recourse value, with the attaining u."""
    verts = enumerate_vertices(inst.U, x, limits)
    best, best_u = -np.inf, verts[0]
    for u in verts:
        val, _ = recourse_value(inst, x, u)
        if val > best:
            best, best_u = val, u
            if np.isinf(best):
                break
    return best, best_u


# -- the exactness oracle ------------------------------------------------------

@dataclass
class OracleResult:
    value: float
    x: np.ndarray
    worst_u: np.ndarray
    evaluations: list[tuple[np.ndarray, float]] = field(default_factory=list)


def oracle_exact(inst: Instance, limits: OracleLimits | None = None) -> OracleResult:
    """Ground-truth solve by full enumeration; desk-scale only.

    Integer x components are enumerated over their (finite) bound lattice.
    Continuous components that never touch the uncertainty set or the recourse
    rows only matter through c1 and X, so they are optimized out by an LP per
    lattice point; coupled continuous components are pinned when X forces
    their value and gridded (limits.grid points) when at most two stay free.
    """
    limits = limits or OracleLimits()
    X = inst.X
    nx = inst.dim_x
    n_int = X.n_int

    coupled = set()
    for k in range(n_int, nx):
        if np.any(inst.U.G[:, k]) or np.any(inst.Y.B1[:, k]):
            coupled.add(k)
        for t, M in inst.U.F.terms:
            if t == k and np.any(M):
                coupled.add(k)
    sep = [k for k in range(n_int, nx) if k not in coupled]
    coupled = sorted(coupled)

    for k in range(n_int):
        if not np.isfinite(X.ub[k]):
            raise OracleError(f"x[{k}] integer with infinite upper bound")
    ranges = [range(int(np.ceil(X.lb[k] - 1e-9)), int(np.floor(X.ub[k] + 1e-9)) + 1)
              for k in range(n_int)]
    total = 1
    for r in ranges:
        total *= len(r)
        if total > limits.max_lattice:
            raise OracleError(f"integer x lattice exceeds {limits.max_lattice}")

    # rows touching only integer components can prefilter the lattice
    int_rows = [i for i in range(X.A.shape[0]) if not np.any(X.A[i, n_int:])]

    best = OracleResult(value=np.inf, x=np.zeros(nx), worst_u=np.zeros(inst.dim_u))
    evals: list[tuple[np.ndarray, float]] = []
    for combo in itertools.product(*ranges) if ranges else [()]:
        xi = np.array(combo, dtype=float)
        if any(X.A[i, :n_int] @ xi < X.b[i] - 1e-9 for i in int_rows):
            continue
        for x in _complete_continuous(inst, xi, coupled, sep, limits):
            wc, u_wc = worst_case_value(inst, x, limits)
            val = float(inst.c1 @ x) + wc
            evals.append((x, val))
            if val < best.value - 1e-12:
                best = OracleResult(value=val, x=x, worst_u=u_wc)
    if not evals:
        raise OracleError("first stage has no feasible point")
    best.evaluations = evals
    return best


def _complete_continuous(inst: Instance, x_int: np.ndarray, coupled: list[int],
                         sep: list[int], limits: OracleLimits):
    """Yield full x vectors extending an integer assignment, or nothing when
    X admits no extension."""
    X = inst.X
    nx, n_int = inst.dim_x, X.n_int
    if n_int == nx:
        x = x_int.copy()
        if np.all(X.A @ x >= X.b - 1e-9):
            yield x
        return

    def base_model():
        m = LinearModel(name="xfill")
        ids = []
        for k in range(nx):
            if k < n_int:
                ids.append(m.add_var(x_int[k], x_int[k], name=f"x{k}"))
            else:
                ids.append(m.add_var(X.lb[k], X.ub[k], name=f"x{k}"))
        if X.A.shape[0]:
            m.add_block(ids, X.A, GEQ, X.b)
        return m, ids

    m, ids = base_model()
    m.set_objective({}, sense="min")
    if not backend.solve_lp(m).is_optimal:
        return

    pinned: dict[int, float] = {}
    free: list[tuple[int, float, float]] = []
    for k in coupled:
        bounds = []
        for sense in ("min", "max"):
            mm, mids = base_model()
            for kk, v in pinned.items():
                mm.fix_var(mids[kk], v)
            mm.set_objective({mids[k]: 1.0}, sense=sense)
            out = backend.solve_lp(mm)
            if out.status == backend.UNBOUNDED:
                raise OracleError(f"coupled x[{k}] unbounded over X")
            if not out.is_optimal:
                return
            bounds.append(out.objective)
        lo, hi = bounds
        if hi - lo <= 1e-9 * max(1.0, abs(hi)):
            pinned[k] = 0.5 * (lo + hi)
        else:
            free.append((k, lo, hi))
    if len(free) > 2:
        raise OracleError(f"{len(free)} free coupled continuous dims exceed the grid limit")

    grids = [np.linspace(lo, hi, limits.grid) for _, lo, hi in free]
    for combo in itertools.product(*grids) if grids else [()]:
        fixing = dict(pinned)
        for (k, _, _), v in zip(free, combo):
            fixing[k] = float(v)
        mm, mids = base_model()
        for kk, v in fixing.items():
            mm.fix_var(mids[kk], v)
        if sep:
            mm.set_objective({mids[k]: inst.c1[k] for k in sep if inst.c1[k] != 0.0},
                             sense="min")
        else:
            mm.set_objective({}, sense="min")
        out = backend.solve_lp(mm)
        if out.status == backend.UNBOUNDED:
            raise OracleError("separable continuous block unbounded below")
        if not out.is_optimal:
            continue
        yield out.x[:inst.dim_x]


# -- facility-location generators ----------------------------------------------

@dataclass
class FLParams:
    n_sites: int = 6
    n_facilities: int | None = None      # first n_facilities sites host facilities
    seed: int = 0
    demand_range: tuple[float, float] = (50.0, 150.0)
    fixed_cost_range: tuple[float, float] = (1000.0, 2000.0)
    high_fixed: bool = False             # one third larger fixed costs
    capacity_cost_range: tuple[float, float] = (5.0, 10.0)
    profit_range: tuple[float, float] = (100.0, 200.0)
    capacity_upper_frac: float = 1.5     # upper cap = frac * total demand / |J|
    capacity_lower_frac: float = 0.0
    neighborhood_quantile: float = 0.25
    # demand-increase set, RHS kind
    xi_lo: float = 0.05
    xi_hi: float = 0.08
    alpha: float = 0.05
    # demand set, LHS kind
    k1: float = 0.05
    k2: float = 0.05
    gamma: float = 0.1
    # recourse extension with on-demand modules
    temp_capacity_range: tuple[float, float] = (30.0, 80.0)
    temp_cost_mult: float = 5.0
    penalty_mult: float = 1.5
    # explicit data overrides synthesis when given
    coords: np.ndarray | None = None
    costs: np.ndarray | None = None
    demands: np.ndarray | None = None
    fixed_costs: np.ndarray | None = None
    capacity_costs: np.ndarray | None = None
    profits: np.ndarray | None = None


def _fl_data(p: FLParams):
    rng = np.random.default_rng(p.seed)
    nI = p.n_sites
    nJ = p.n_facilities if p.n_facilities is not None else nI
    coords = p.coords if p.coords is not None else rng.uniform(size=(nI, 2))
    if p.costs is not None:
        c = np.asarray(p.costs, dtype=float)
    else:
        diff = coords[:, None, :] - coords[None, :, :]
        c = 100.0 * np.sqrt((diff ** 2).sum(axis=2))
    c = c[:, :nJ]
    dem = (np.asarray(p.demands, dtype=float) if p.demands is not None
           else rng.uniform(*p.demand_range, size=nI))
    f = (np.asarray(p.fixed_costs, dtype=float) if p.fixed_costs is not None
         else rng.uniform(*p.fixed_cost_range, size=nJ))
    if p.high_fixed:
        f = f * (4.0 / 3.0)
    a = (np.asarray(p.capacity_costs, dtype=float) if p.capacity_costs is not None
         else rng.uniform(*p.capacity_cost_range, size=nJ))
    profit = (np.asarray(p.profits, dtype=float) if p.profits is not None
              else rng.uniform(*p.profit_range, size=nI))
    full = c if c.shape[1] == nI else 100.0 * np.sqrt(
        ((coords[:, None, :] - coords[None, :, :]) ** 2).sum(axis=2))
    positive = full[full > 0]
    radius = float(np.quantile(positive, p.neighborhood_quantile)) if positive.size else 0.0
    nbhd = [[j for j in range(nJ) if full[i, j] <= radius + 1e-12] for i in range(nI)]
    return nI, nJ, c, dem, f, a, profit, nbhd, rng


def _fl_first_stage(nJ, f, a, dem, p: FLParams):
    """x = (x_d binary | x_c capacity), rows cap_lo*x_d <= x_c <= cap_hi*x_d."""
    cap_hi = p.capacity_upper_frac * dem.sum() / nJ
    cap_lo = p.capacity_lower_frac * dem.sum() / nJ
    nx = 2 * nJ
    A = np.zeros((2 * nJ, nx))
    b = np.zeros(2 * nJ)
    for j in range(nJ):
        A[j, nJ + j] = 1.0          # x_c - cap_lo x_d >= 0
        A[j, j] = -cap_lo
        A[nJ + j, j] = cap_hi       # cap_hi x_d - x_c >= 0
        A[nJ + j, nJ + j] = -1.0
    ub = np.concatenate([np.ones(nJ), np.full(nJ, np.inf)])
    X = FirstStageSet(A=A, b=b, n_int=nJ, ub=ub)
    c1 = np.concatenate([f, a])
    return X, c1, cap_hi


def _fl_recourse(nI, nJ, c, profit):
    """y_ij flows: serve the realized demand within installed capacity."""
    ny = nI * nJ
    n_rows = nI + nJ
    B2 = np.zeros((n_rows, ny))
    B1 = np.zeros((n_rows, 2 * nJ))
    E = np.zeros((n_rows, 3 * nI))
    d = np.zeros(n_rows)
    for i in range(nI):
        for j in range(nJ):
            B2[i, i * nJ + j] = 1.0
        E[i, i] = -1.0              # sum_j y_ij >= u_i
    for j in range(nJ):
        for i in range(nI):
            B2[nI + j, i * nJ + j] = -1.0
        B1[nI + j, nJ + j] = 1.0    # sum_i y_ij <= x_c_j
    c2 = np.array([c[i, j] - profit[i] for i in range(nI) for j in range(nJ)])
    return B1, B2, E, d, c2


def _fl_uncertainty_rhs(nI, nJ, dem, nbhd, p: FLParams) -> UncertaintySet:
    """Coordinates (u, incr, dev) in R^{3|I|}: u_i = base_i (1 + incr_i),
    incr_i bounded by construction in the neighborhood, dev_i at least the
    distance of incr_i from its midpoint, total deviation capacity-budgeted.
    All dependence sits in the right-hand side."""
    n_u = 3 * nI
    nx = 2 * nJ
    u0 = dem.sum()
    rows_F, rows_G, rows_h = [], [], []

    def row(Fr, Gr, hv):
        rows_F.append(Fr)
        rows_G.append(Gr)
        rows_h.append(hv)

    for i in range(nI):
        # u_i - base_i * incr_i = base_i, split into <= pairs
        Fr = np.zeros(n_u); Fr[i] = 1.0; Fr[nI + i] = -dem[i]
        row(Fr, np.zeros(nx), dem[i])
        row(-Fr, np.zeros(nx), -dem[i])
    for i in range(nI):
        Fr = np.zeros(n_u); Fr[nI + i] = 1.0
        Gr = np.zeros(nx)
        for j in nbhd[i]:
            Gr[j] = p.xi_hi
        row(Fr, Gr, 0.0)
        Gr2 = np.zeros(nx)
        for j in nbhd[i]:
            Gr2[j] = -p.xi_lo
        row(-Fr, Gr2, 0.0)
    for i in range(nI):
        mid = np.zeros(nx)
        for j in nbhd[i]:
            mid[j] = 0.5 * (p.xi_lo + p.xi_hi)
        Fr = np.zeros(n_u); Fr[nI + i] = 1.0; Fr[2 * nI + i] = -1.0
        row(Fr, mid, 0.0)
        Fr2 = np.zeros(n_u); Fr2[nI + i] = -1.0; Fr2[2 * nI + i] = -1.0
        row(Fr2, -mid, 0.0)
    Fr = np.zeros(n_u); Fr[2 * nI:] = 1.0
    Gr = np.zeros(nx); Gr[nJ:] = p.alpha / u0
    row(Fr, Gr, 0.0)

    return UncertaintySet(F=AffineMatrixMap(base=np.array(rows_F)),
                          G=np.array(rows_G), h=np.array(rows_h))


def _fl_uncertainty_lhs(nI, nJ, dem, nbhd, p: FLParams) -> UncertaintySet:
    """Coordinates (u, reg, surge): u_i = reg_i + surge_i, reg_i grows with
    neighborhood capacity (right-hand side), surge_i capped per site, and the
    capacity-weighted surge budget puts x_c into the constraint matrix."""
    n_u = 3 * nI
    nx = 2 * nJ
    mu = 2 * nI + nI + nI + 1
    F0 = np.zeros((mu, n_u))
    G = np.zeros((mu, nx))
    h = np.zeros(mu)
    r = 0
    for i in range(nI):
        F0[r, i] = 1.0; F0[r, nI + i] = -1.0; F0[r, 2 * nI + i] = -1.0
        h[r] = 0.0; r += 1
        F0[r, i] = -1.0; F0[r, nI + i] = 1.0; F0[r, 2 * nI + i] = 1.0
        h[r] = 0.0; r += 1
    for i in range(nI):
        F0[r, nI + i] = 1.0
        for j in nbhd[i]:
            G[r, nJ + j] = p.k1
        h[r] = dem[i]; r += 1
    for i in range(nI):
        F0[r, 2 * nI + i] = 1.0
        h[r] = p.gamma * dem[i]; r += 1
    budget = r
    for i in range(nI):
        F0[budget, 2 * nI + i] = dem[i]
    h[budget] = p.gamma * float(dem @ dem)
    terms = []
    for j in range(nJ):
        M = np.zeros((mu, n_u))
        for i in range(nI):
            if j in nbhd[i]:
                M[budget, 2 * nI + i] = p.k2
        if np.any(M):
            terms.append((nJ + j, M))
    return UncertaintySet(F=AffineMatrixMap(base=F0, terms=tuple(terms)), G=G, h=h)


def gen_robust_fl(params: FLParams, dependence: str = "rhs") -> Instance:
    """Facility location with opening + capacity first stage and profit-netted
    service recourse, under a construction-driven demand set. dependence picks
    where x enters the demand set: "rhs" keeps the constraint matrix constant,
    "lhs" puts capacity into the surge-budget row's coefficients."""
    if dependence not in ("rhs", "lhs"):
        raise ValueError(f"unknown dependence {dependence!r}")
    nI, nJ, c, dem, f, a, profit, nbhd, _ = _fl_data(params)
    X, c1, cap_hi = _fl_first_stage(nJ, f, a, dem, params)
    B1, B2, E, d, c2 = _fl_recourse(nI, nJ, c, profit)
    U = (_fl_uncertainty_rhs if dependence == "rhs" else _fl_uncertainty_lhs)(
        nI, nJ, dem, nbhd, params)
    meta = {
        "family": f"fl-{dependence}",
        "blocks": {
            "x_d": list(range(nJ)), "x_c": list(range(nJ, 2 * nJ)),
            "u": list(range(nI)),
        },
        "seed": params.seed,
    }
    return Instance(name=f"fl_{dependence}_{nI}s_seed{params.seed}", c1=c1,
                    X=X, U=U,
                    Y=RecourseSet(B1=B1, B2=B2, E=E, d=d, c2=c2),
                    metadata=meta)


def gen_mip_recourse_fl(params: FLParams) -> Instance:
    """Same structure with on-demand capacity modules in the recourse: binary
    z_j adds temp capacity at cost, unmet demand is penalized, so the recourse
    is a MIP and always feasible."""
    nI, nJ, c, dem, f, a, profit, nbhd, rng = _fl_data(params)
    X, c1, cap_hi = _fl_first_stage(nJ, f, a, dem, params)
    temp_cap = rng.uniform(*params.temp_capacity_range, size=nJ)
    temp_cost = params.temp_cost_mult * temp_cap * a.max()
    penalty = params.penalty_mult * c.max()

    # y = (z | y1 | y2): modules first (integer block), flows, shortfalls
    ny = nJ + nI * nJ + nI
    n_rows = nI + nJ + nJ
    B2 = np.zeros((n_rows, ny))
    B1 = np.zeros((n_rows, 2 * nJ))
    E = np.zeros((n_rows, 3 * nI))
    d = np.zeros(n_rows)
    y1 = lambda i, j: nJ + i * nJ + j
    y2 = lambda i: nJ + nI * nJ + i
    for i in range(nI):
        for j in range(nJ):
            B2[i, y1(i, j)] = 1.0
        B2[i, y2(i)] = 1.0
        E[i, i] = -1.0                       # sum_j y1_ij + y2_i >= u_i
    for j in range(nJ):
        for i in range(nI):
            B2[nI + j, y1(i, j)] = -1.0
        B2[nI + j, j] = temp_cap[j]
        B1[nI + j, nJ + j] = 1.0             # sum_i y1_ij <= x_c_j + cap_j z_j
    for j in range(nJ):
        B2[nI + nJ + j, j] = -1.0
        d[nI + nJ + j] = -1.0                # z_j <= 1
    c2 = np.concatenate([temp_cost,
                         np.array([c[i, j] - profit[i]
                                   for i in range(nI) for j in range(nJ)]),
                         np.full(nI, penalty)])
    U = _fl_uncertainty_rhs(nI, nJ, dem, nbhd, params)
    meta = {
        "family": "fl-mip",
        "blocks": {"x_d": list(range(nJ)), "x_c": list(range(nJ, 2 * nJ)),
                   "u": list(range(nI)), "z": list(range(nJ))},
        "seed": params.seed,
    }
    return Instance(name=f"fl_mip_{nI}s_seed{params.seed}", c1=c1, X=X, U=U,
                    Y=RecourseSet(B1=B1, B2=B2, E=E, d=d, c2=c2, n_int_y=nJ),
                    metadata=meta)


# -- reliable p-median generator -----------------------------------------------

@dataclass
class PMedianParams:
    n_sites: int = 8
    n_facilities: int | None = None
    seed: int = 0
    p: int = 3
    k: int = 1
    rho: float = 0.2
    theta: float | np.ndarray = 0.0
    capacitated: bool = True
    capacity: float | np.ndarray | None = None   # None: tight-ish default / total demand
    penalty: float | None = None                 # None: 1.5 * max service cost
    q: int = 3                                   # demand-ranked extension sites
    q1: int | None = None                        # None: k + 2
    q2: int | None = None
    demand_range: tuple[float, float] = (50.0, 150.0)
    coords: np.ndarray | None = None
    costs: np.ndarray | None = None
    demands: np.ndarray | None = None


PMEDIAN_KINDS = ("diu_u0", "ddu_uk", "ddu_ukq", "ddu_ur", "ddu_us_pair")


def _pm_data(p: PMedianParams):
    rng = np.random.default_rng(p.seed)
    nI = p.n_sites
    nJ = p.n_facilities if p.n_facilities is not None else nI
    coords = p.coords if p.coords is not None else rng.uniform(size=(nI, 2))
    if p.costs is not None:
        c = np.asarray(p.costs, dtype=float)[:, :nJ]
    else:
        diff = coords[:, None, :] - coords[None, :, :]
        c = (100.0 * np.sqrt((diff ** 2).sum(axis=2)))[:, :nJ]
    dem = (np.asarray(p.demands, dtype=float) if p.demands is not None
           else rng.uniform(*p.demand_range, size=nI))
    if p.capacity is None:
        cap = (np.full(nJ, 1.4 * dem.sum() / p.p) if p.capacitated
               else np.full(nJ, dem.sum()))
    else:
        cap = np.broadcast_to(np.asarray(p.capacity, dtype=float), (nJ,)).copy()
    pen = p.penalty if p.penalty is not None else 1.5 * float(c.max())
    theta = np.broadcast_to(np.asarray(p.theta, dtype=float), (nI,)).copy()
    return nI, nJ, c, dem, cap, pen, theta


def _pm_core(p: PMedianParams, extra_int: int = 0, extra_cont: int = 0):
    """First stage (x_d | extra binaries | x_c | extra continuous), recourse
    (y1 | y2), shared by every uncertainty flavor."""
    nI, nJ, c, dem, cap, pen, theta = _pm_data(p)
    n_int = nJ + extra_int
    n_cont = nI * nJ + extra_cont
    nx = n_int + n_cont
    xc = lambda i, j: n_int + i * nJ + j

    rows = []
    b = []
    r0 = np.zeros(nx); r0[:nJ] = 1.0
    rows.append(r0); b.append(float(p.p))            # sum x_d >= p
    rows.append(-r0); b.append(-float(p.p))          # sum x_d <= p
    for i in range(nI):
        r = np.zeros(nx)
        for j in range(nJ):
            r[xc(i, j)] = 1.0
        rows.append(r); b.append(dem[i])             # allocations cover demand
    for j in range(nJ):
        r = np.zeros(nx)
        r[j] = cap[j]
        for i in range(nI):
            r[xc(i, j)] = -1.0
        rows.append(r); b.append(0.0)                # allocations within capacity

    ub = np.full(nx, np.inf)
    ub[:n_int] = 1.0
    c1 = np.zeros(nx)
    for i in range(nI):
        for j in range(nJ):
            c1[xc(i, j)] = (1.0 - p.rho) * c[i, j]

    ny = nI * nJ + nI
    n_rows = nI + nJ + nJ
    B2 = np.zeros((n_rows, ny))
    B1 = np.zeros((n_rows, nx))
    E = np.zeros((n_rows, nI))
    d_vec = np.zeros(n_rows)
    y1 = lambda i, j: i * nJ + j
    y2 = lambda i: nI * nJ + i
    for i in range(nI):
        for j in range(nJ):
            B2[i, y1(i, j)] = 1.0
        B2[i, y2(i)] = 1.0
        d_vec[i] = dem[i]
        E[i, i] = -theta[i] * dem[i]      # demand grows to (1 + theta_i u_i) d_i
    for j in range(nJ):
        for i in range(nI):
            B2[nI + j, y1(i, j)] = -1.0
        B1[nI + j, j] = cap[j]            # sum_i y1_ij <= cap_j x_d_j
    for j in range(nJ):
        for i in range(nI):
            B2[nI + nJ + j, y1(i, j)] = -1.0
        d_vec[nI + nJ + j] = -cap[j]
        E[nI + nJ + j, j] = -cap[j]       # sum_i y1_ij <= cap_j (1 - u_j)
    c2 = np.concatenate([p.rho * c.flatten(), p.rho * pen * np.ones(nI)])

    return (nI, nJ, c, dem, cap, pen, theta, nx, n_int, np.array(rows),
            np.array(b), ub, c1, B1, B2, E, d_vec, c2)


def gen_reliable_pmedian(params: PMedianParams,
                         uncertainty: str = "ddu_uk") -> Instance:
    """Reliable p-median: weighted nominal + worst-disruption objective.

    uncertainty picks the disruption set: diu_u0 (binary, up to k sites,
    decision-independent), ddu_uk (disruptions only at built facilities),
    ddu_ukq (additionally the q largest-demand sites), ddu_ur (only at the q1
    built facilities with the largest first-stage service cost, via sorting
    binaries), ddu_us_pair (the decision-independent instance carrying both
    sorting sets in metadata for approximation runs).
    """
    if uncertainty not in PMEDIAN_KINDS:
        raise ValueError(f"unknown uncertainty {uncertainty!r}")
    p = params
    if uncertainty != "diu_u0":
        _, _, c_chk, _, _, pen_chk, theta_chk = _pm_data(p)
        if pen_chk < float(c_chk.max()) or np.any(theta_chk > 0):
            warnings.warn(
                "restricting disruptions to built sites only matches the "
                "decision-independent model when the shortfall penalty "
                "dominates every service cost and demand sensitivities are "
                "nonpositive", stacklevel=2)
    if uncertainty == "ddu_ur":
        extra_int, extra_cont = p.n_sites if p.n_facilities is None else p.n_facilities, 1
    elif uncertainty == "ddu_us_pair":
        nJ_ = p.n_sites if p.n_facilities is None else p.n_facilities
        # x_r, x_s binaries; x0_r, x0_s thresholds; pairing + product columns
        extra_int, extra_cont = 2 * nJ_, 2 + 2 * nJ_ * nJ_
    else:
        extra_int, extra_cont = 0, 0

    (nI, nJ, c, dem, cap, pen, theta, nx, n_int, A, b, ub, c1,
     B1, B2, E, d_vec, c2) = _pm_core(p, extra_int, extra_cont)
    xc = lambda i, j: n_int + i * nJ + j

    meta = {"family": f"pmedian-{uncertainty}",
            "blocks": {"x_d": list(range(nJ)),
                       "x_c": [xc(i, j) for i in range(nI) for j in range(nJ)],
                       "u": list(range(nI))},
            "seed": p.seed, "p": p.p, "k": p.k, "rho": p.rho,
            "penalty": pen, "max_cost": float(c.max())}

    if uncertainty == "diu_u0":
        F = np.vstack([np.ones((1, nI)), np.eye(nI)])
        h = np.concatenate([[float(p.k)], np.ones(nI)])
        U = UncertaintySet(F=AffineMatrixMap(base=F), G=np.zeros((nI + 1, nx)),
                           h=h, n_int_u=nI)
    elif uncertainty == "ddu_uk":
        F = np.vstack([np.ones((1, nI)), np.eye(nI)])
        G = np.zeros((nI + 1, nx))
        h = np.concatenate([[float(p.k)], np.zeros(nI)])
        for j in range(nJ):
            G[1 + j, j] = 1.0               # u_j <= x_d_j at facility sites
        U = UncertaintySet(F=AffineMatrixMap(base=F), G=G, h=h)
    elif uncertainty == "ddu_ukq":
        dq = list(np.argsort(-dem)[:p.q])
        F = np.vstack([np.ones((1, nI)), np.eye(nI)])
        G = np.zeros((nI + 1, nx))
        h = np.concatenate([[float(p.k)], np.zeros(nI)])
        for i in range(nI):
            if i in dq:
                h[1 + i] = 1.0              # demand-ranked sites always exposed
            elif i < nJ:
                G[1 + i, i] = 1.0
        U = UncertaintySet(F=AffineMatrixMap(base=F), G=G, h=h)
        meta["d_q"] = [int(i) for i in dq]
    elif uncertainty == "ddu_ur":
        q1 = p.q1 if p.q1 is not None else min(p.p, p.k + 2)
        xr = lambda j: nJ + j
        x0r = nx - 1
        sort_M = 1.1 * float(c.max()) * float(dem.sum())
        extra_rows, extra_b = _sorting_rows(nx, nJ, q1, xr, x0r,
                                            lambda j: [(xc(i, j), c[i, j]) for i in range(nI)],
                                            sort_M)
        A = np.vstack([A, extra_rows]); b = np.concatenate([b, extra_b])
        F = np.vstack([np.ones((1, nI)), np.eye(nI)])
        G = np.zeros((nI + 1, nx))
        h = np.concatenate([[float(p.k)], np.zeros(nI)])
        for j in range(nJ):
            G[1 + j, xr(j)] = 1.0           # u_j <= x_r_j
        U = UncertaintySet(F=AffineMatrixMap(base=F), G=G, h=h)
        meta["blocks"]["x_r"] = [xr(j) for j in range(nJ)]
        meta["q1"] = q1
        meta["sort_big_m"] = sort_M
    else:  # ddu_us_pair: decision-independent instance + two sorting sets
        q1 = p.q1 if p.q1 is not None else min(p.p, p.k + 2)
        q2 = p.q2 if p.q2 is not None else min(p.p, p.k + 2)
        xr = lambda j: nJ + j
        xs = lambda j: 2 * nJ + j
        x0r = n_int + nI * nJ
        x0s = x0r + 1
        w0 = x0s + 1                        # w_jl = x_d_j x_d_l
        z0 = w0 + nJ * nJ                   # z_jl = (sum_i xc_ij) w_jl
        wv = lambda j, l: w0 + j * nJ + l
        zv = lambda j, l: z0 + j * nJ + l
        sort_M = 1.1 * float(c.max()) * float(dem.sum())
        rows_r, b_r = _sorting_rows(nx, nJ, q1, xr, x0r,
                                    lambda j: [(xc(i, j), c[i, j]) for i in range(nI)],
                                    sort_M)
        A = np.vstack([A, rows_r]); b = np.concatenate([b, b_r])
        extra = []
        eb = []
        for j in range(nJ):
            for l in range(nJ):
                # w = x_d_j x_d_l exactly at binary points
                r = np.zeros(nx); r[j] = 1.0; r[wv(j, l)] = -1.0
                extra.append(r); eb.append(0.0)
                r = np.zeros(nx); r[l] = 1.0; r[wv(j, l)] = -1.0
                extra.append(r); eb.append(0.0)
                r = np.zeros(nx); r[wv(j, l)] = 1.0; r[j] = -1.0; r[l] = -1.0
                extra.append(r); eb.append(-1.0)
                # z = (sum_i xc_ij) w, using the capacity bound on the sum
                r = np.zeros(nx); r[wv(j, l)] = cap[j]; r[zv(j, l)] = -1.0
                extra.append(r); eb.append(0.0)
                r = np.zeros(nx)
                for i in range(nI):
                    r[xc(i, j)] = 1.0
                r[zv(j, l)] = -1.0
                extra.append(r); eb.append(0.0)
                r = np.zeros(nx); r[zv(j, l)] = 1.0; r[wv(j, l)] = -cap[j]
                for i in range(nI):
                    r[xc(i, j)] = -1.0
                extra.append(r); eb.append(-cap[j])
        # score of facility j: capacity-weighted distance to the co-built set,
        # sum_l c[site(j), site(l)] z_jl with z linearized above
        rows_s, b_s = _sorting_rows(
            nx, nJ, q2, xs, x0s,
            lambda j: [(zv(j, l), float(c[j, l])) for l in range(nJ)], sort_M)
        A = np.vstack([A, np.array(extra), rows_s])
        b = np.concatenate([b, np.array(eb), b_s])
        F0 = np.vstack([np.ones((1, nI)), np.eye(nI)])
        h0 = np.concatenate([[float(p.k)], np.ones(nI)])
        U = UncertaintySet(F=AffineMatrixMap(base=F0), G=np.zeros((nI + 1, nx)),
                           h=h0, n_int_u=nI)
        G_r = np.zeros((nI + 1, nx)); G_s = np.zeros((nI + 1, nx))
        h_d = np.concatenate([[float(p.k)], np.zeros(nI)])
        for j in range(nJ):
            G_r[1 + j, xr(j)] = 1.0
            G_s[1 + j, xs(j)] = 1.0
        Ur = UncertaintySet(F=AffineMatrixMap(base=F0.copy()), G=G_r, h=h_d.copy())
        Us = UncertaintySet(F=AffineMatrixMap(base=F0.copy()), G=G_s, h=h_d.copy())
        meta["blocks"]["x_r"] = [xr(j) for j in range(nJ)]
        meta["blocks"]["x_s"] = [xs(j) for j in range(nJ)]
        meta["q1"], meta["q2"] = q1, q2
        meta["sort_big_m"] = sort_M
        meta["ddu_sets"] = [uncertainty_set_to_dict(Ur), uncertainty_set_to_dict(Us)]

    X = FirstStageSet(A=A, b=b, n_int=n_int, ub=ub)
    name = f"pm_{uncertainty}_{nI}s_p{p.p}_k{p.k}_seed{p.seed}"
    return Instance(name=name, c1=c1, X=X, U=U,
                    Y=RecourseSet(B1=B1, B2=B2, E=E, d=d_vec, c2=c2),
                    metadata=meta)


def _sorting_rows(nx, nJ, q, marker, threshold, score_cols, M):
    """Big-M rows forcing marker_j = 1 exactly on the q facilities whose score
    is above the threshold variable: score_j >= t - M(1-m_j), score_j <= t + M m_j,
    m_j <= x_d_j, sum m_j = q."""
    rows, b = [], []
    for j in range(nJ):
        r = np.zeros(nx); r[j] = 1.0; r[marker(j)] = -1.0
        rows.append(r); b.append(0.0)                 # m_j <= x_d_j
        r = np.zeros(nx)
        for col, v in score_cols(j):
            r[col] = v
        r[threshold] = -1.0; r[marker(j)] = -M
        rows.append(r); b.append(-M)                  # score >= t - M(1-m)
        r = np.zeros(nx)
        for col, v in score_cols(j):
            r[col] = -v
        r[threshold] = 1.0; r[marker(j)] = M
        rows.append(r); b.append(0.0)                 # score <= t + M m
    r = np.zeros(nx)
    for j in range(nJ):
        r[marker(j)] = 1.0
    rows.append(r); b.append(float(q))
    rows.append(-r); b.append(-float(q))
    return np.array(rows), np.array(b)


def uncertainty_set_to_dict(U: UncertaintySet) -> dict:
    from .model import _mat_to_dict
    return {
        "F": {"base": _mat_to_dict(U.F.base),
              "terms": [{"k": k, "matrix": _mat_to_dict(M)} for k, M in U.F.terms]},
        "G": _mat_to_dict(U.G),
        "h": [float(v) for v in U.h],
        "n_int_u": U.n_int_u,
    }


def uncertainty_set_from_dict(d: dict) -> UncertaintySet:
    from .model import _mat_from_dict
    F = AffineMatrixMap(base=_mat_from_dict(d["F"]["base"]),
                        terms=tuple((int(t["k"]), _mat_from_dict(t["matrix"]))
                                    for t in d["F"].get("terms", [])))
    return UncertaintySet(F=F, G=_mat_from_dict(d["G"]),
                          h=np.array(d["h"], dtype=float),
                          n_int_u=int(d.get("n_int_u", 0)))


# -- instance file I/O ---------------------------------------------------------

class SchemaError(Exception):
    pass


_TOP_KEYS = {"name", "c1", "X", "U", "Y", "metadata"}
_X_KEYS = {"A", "b", "n_int", "bounds"}
_U_KEYS = {"F", "G", "h", "n_int_u"}
_Y_KEYS = {"B1", "B2", "E", "d", "c2", "n_int_y"}
_MAT_KEYS = {"rows", "cols", "triplets"}


def _check_keys(d: dict, allowed: set, where: str):
    for key in d:
        if key not in allowed:
            raise SchemaError(f"unknown key {key!r} at {where}")


def _check_matrix(d: dict, where: str):
    _check_keys(d, _MAT_KEYS, where)
    rows, cols = d.get("rows"), d.get("cols")
    for trip in d.get("triplets", []):
        i, j, _ = trip
        if not (0 <= i < rows and 0 <= j < cols):
            raise SchemaError(f"triplet ({i},{j}) out of bounds at {where} "
                              f"(shape {rows}x{cols})")


def check_schema(d: dict):
    _check_keys(d, _TOP_KEYS, "$")
    for part, keys in (("X", _X_KEYS), ("U", _U_KEYS), ("Y", _Y_KEYS)):
        if part not in d:
            raise SchemaError(f"missing key {part!r} at $")
        _check_keys(d[part], keys, f"$.{part}")
    _check_matrix(d["X"]["A"], "$.X.A")
    _check_keys(d["U"]["F"], {"base", "terms"}, "$.U.F")
    _check_matrix(d["U"]["F"]["base"], "$.U.F.base")
    for t, term in enumerate(d["U"]["F"].get("terms", [])):
        _check_keys(term, {"k", "matrix"}, f"$.U.F.terms[{t}]")
        _check_matrix(term["matrix"], f"$.U.F.terms[{t}].matrix")
    _check_matrix(d["U"]["G"], "$.U.G")
    for key in ("B1", "B2", "E"):
        _check_matrix(d["Y"][key], f"$.Y.{key}")


def io_read(path: str) -> Instance:
    with open(path) as fh:
        d = json.load(fh)
    check_schema(d)
    return instance_from_dict(d)


def io_write(path: str, inst: Instance) -> None:
    """Atomic: write to a temp file in the same directory, then rename."""
    payload = json.dumps(instance_to_dict(inst), indent=2)
    write_atomic(path, payload)


def write_atomic(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp_", suffix=".part")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
