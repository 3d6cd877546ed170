"""Max-min linear programs over a polyhedral outer set and the
optimality-condition blocks the cutting-plane masters embed.

Two reformulation routes are provided and cross-checked: replacing the inner
LP by its KKT system (complementarities linearized with indicator big-Ms) and
dualizing the inner LP into a disjoint bilinear program (linearized exactly
when the outer variables are binary). Blocks built at a fixed first stage are
always purely linear; blocks with a symbolic first stage require any
matrix-coefficient dependence to sit on binary components, since products with
continuous components have no exact linearization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backend
from .backend import EQ, GEQ, LEQ, BackendError, LinearModel
from .model import BasisId, Instance, UncertaintySet

_ZERO_RC_TOL = 1e-9
_MEMBERSHIP_TOL = 1e-6


@dataclass(eq=False)
class MaxMinProblem:
    """max over {z >= 0 : A_out z <= b_out} of min{c_y y : B_y y >= d - B_x z}.

    The common case fixes the first stage and takes z = u over U(x*); the
    generic shape also covers outer sets with integer components.
    """
    A_out: np.ndarray
    b_out: np.ndarray
    c_y: np.ndarray
    B_y: np.ndarray
    B_x: np.ndarray
    d: np.ndarray
    n_int_out: int = 0
    name: str = "maxmin"

    def __post_init__(self):
        self.A_out = np.asarray(self.A_out, dtype=float)
        self.b_out = np.asarray(self.b_out, dtype=float)
        self.c_y = np.asarray(self.c_y, dtype=float)
        self.B_y = np.asarray(self.B_y, dtype=float)
        self.B_x = np.asarray(self.B_x, dtype=float)
        self.d = np.asarray(self.d, dtype=float)

    @property
    def n_out(self) -> int:
        return self.A_out.shape[1]

    @property
    def n_inner(self) -> int:
        return self.B_y.shape[1]


def maxmin_from_instance(inst: Instance, x: np.ndarray) -> MaxMinProblem:
    """The worst-case recourse problem at a fixed first stage: outer set
    U(x), inner LP the recourse with its rhs already shifted by B1 x."""
    x = np.asarray(x, dtype=float)
    return MaxMinProblem(
        A_out=inst.U.F.evaluate(x),
        b_out=inst.U.h + inst.U.G @ x,
        c_y=inst.Y.c2,
        B_y=inst.Y.B2,
        B_x=inst.Y.E,
        d=inst.Y.d - inst.Y.B1 @ x,
        n_int_out=inst.U.n_int_u,
        name=f"{inst.name}_wc",
    )


@dataclass
class MaxMinResult:
    status: str
    value: float | None = None
    outer: np.ndarray | None = None
    dual: np.ndarray | None = None
    ray: np.ndarray | None = None


# -- parametric LP over U(x) ---------------------------------------------------

@dataclass
class ParametricLPResult:
    u: np.ndarray
    lam: np.ndarray
    basis: BasisId
    reduced_costs: np.ndarray     # over standard-form columns (u then slacks)
    value: float
    n_struct: int
    cost_row: np.ndarray          # standard-form objective (u costs, zeros)


def lp_parametric(inst: Instance, x: np.ndarray, beta: np.ndarray) -> ParametricLPResult:
    """max{(-E u)' beta : u in U(x)} with a deterministic basis report.

    The solver supplies an optimal point; the basis is rebuilt here over the
    standard form [F(x) | I] by greedy lowest-index completion of the positive
    support, and duals/reduced costs come from that basis directly, so the
    report does not depend on which backend adapter ran the LP.
    """
    x = np.asarray(x, dtype=float)
    beta = np.asarray(beta, dtype=float)
    U = inst.U
    Fx = U.F.evaluate(x)
    rhs = U.h + U.G @ x
    mu, n = Fx.shape
    c_u = -(inst.Y.E.T @ beta)

    m = LinearModel(name="lp_parametric")
    u_ids = m.add_vars(n, prefix="u")
    if mu:
        m.add_block(u_ids, Fx, LEQ, rhs)
    m.set_objective({u_ids[j]: c_u[j] for j in range(n) if c_u[j] != 0.0},
                    sense="max")
    out = backend.solve_lp(m)
    if out.status == backend.INFEASIBLE:
        raise BackendError("U(x) is empty: nonemptiness assumption violated")
    if out.status == backend.UNBOUNDED:
        raise BackendError("U(x) is unbounded: boundedness assumption violated")
    if not out.is_optimal:
        raise BackendError(f"parametric LP ended {out.status}")

    u_star = out.x[:n]
    slack = rhs - Fx @ u_star
    A = np.hstack([Fx, np.eye(mu)])
    z = np.concatenate([u_star, slack])
    scale = max(1.0, float(np.abs(z).max()))
    support = [j for j in range(n + mu) if z[j] > 1e-9 * scale]
    basis_cols = _complete_basis(A, support)
    c_full = np.concatenate([c_u, np.zeros(mu)])
    basis_cols = _pivot_to_dual_feasible(A, c_full, z, basis_cols)
    lam = np.linalg.solve(A[:, basis_cols].T, c_full[basis_cols]) if mu else np.zeros(0)
    rc = c_full - A.T @ lam
    rc[basis_cols] = 0.0
    return ParametricLPResult(u=u_star, lam=lam, basis=BasisId(tuple(basis_cols)),
                              reduced_costs=rc, value=float(out.objective),
                              n_struct=n, cost_row=c_full)


def _pivot_to_dual_feasible(A: np.ndarray, c: np.ndarray, z: np.ndarray,
                            cols: list[int]) -> list[int]:
    """Lowest-index pivoting from a primal-feasible basis of the optimal
    vertex z to one that also prices out (max sense: nonbasic rc <= 0).

    The greedy completion can land on a dual-infeasible basis of a degenerate
    vertex; since z is optimal, every exchange below has step zero, so the
    point never moves and Bland's rule guarantees termination.
    """
    mu = A.shape[0]
    if mu == 0:
        return cols
    cols = list(cols)
    cscale = max(1.0, float(np.abs(c).max()))
    zscale = max(1.0, float(np.abs(z).max()))
    for _ in range(10000):
        B = A[:, cols]
        lam = np.linalg.solve(B.T, c[cols])
        rc = c - A.T @ lam
        in_basis = set(cols)
        entering = next((j for j in range(A.shape[1])
                         if j not in in_basis and rc[j] > 1e-9 * cscale), None)
        if entering is None:
            return sorted(cols)
        d = np.linalg.solve(B, A[:, entering])
        blockers = [i for i in range(mu) if d[i] > 1e-9]
        if not blockers:
            raise BackendError("improving ray at a vertex the solver called "
                               "optimal; inconsistent basis data")
        ratios = [z[cols[i]] / d[i] for i in blockers]
        best = min(ratios)
        if best > 1e-7 * zscale:
            raise BackendError("improving step at a vertex the solver called "
                               "optimal; inconsistent basis data")
        leave = min((i for i, r in zip(blockers, ratios)
                     if r <= best + 1e-9 * zscale), key=lambda i: cols[i])
        cols[leave] = entering
    raise BackendError("basis cleanup did not terminate")


def _complete_basis(A: np.ndarray, support: list[int]) -> list[int]:
    """Greedy lowest-index completion of a column support to a full basis."""
    mu = A.shape[0]
    if mu == 0:
        return []
    order = sorted(support) + [j for j in range(A.shape[1]) if j not in support]
    cols: list[int] = []
    Q = np.zeros((mu, 0))
    for j in order:
        v = A[:, j].astype(float)
        resid = v - Q @ (Q.T @ v)
        nv = np.linalg.norm(resid)
        if nv > 1e-9 * max(1.0, np.linalg.norm(v)):
            Q = np.hstack([Q, (resid / nv)[:, None]])
            cols.append(j)
            if len(cols) == mu:
                break
    if len(cols) < mu:
        raise BackendError("standard form is row-rank deficient")
    return sorted(cols)


def basis_of_point(U: UncertaintySet, x: np.ndarray, u: np.ndarray) -> BasisId:
    """Deterministic basis identifier for a vertex of U(x)."""
    Fx = U.F.evaluate(np.asarray(x, dtype=float))
    rhs = U.h + U.G @ np.asarray(x, dtype=float)
    mu, n = Fx.shape
    slack = rhs - Fx @ u
    z = np.concatenate([u, slack])
    scale = max(1.0, float(np.abs(z).max()))
    support = [j for j in range(n + mu) if z[j] > 1e-9 * scale]
    A = np.hstack([Fx, np.eye(mu)])
    return BasisId(tuple(_complete_basis(A, support)))


# -- feasibility of the inner LP over the whole outer set -----------------------

def check_inner_feasibility(problem: MaxMinProblem, M: float = 1e4,
                            time_limit: float | None = None
                            ) -> tuple[float, np.ndarray]:
    """Worst-case artificial mass: v_f = max_z min{1'w : B_y y + w >= d - B_x z}.

    Zero means the inner LP is feasible at every outer point; a positive value
    comes with the witness outer point where it is not.
    """
    m_rows, ny = problem.B_y.shape
    ext = MaxMinProblem(
        A_out=problem.A_out, b_out=problem.b_out,
        c_y=np.concatenate([np.zeros(ny), np.ones(m_rows)]),
        B_y=np.hstack([problem.B_y, np.eye(m_rows)]),
        B_x=problem.B_x, d=problem.d,
        n_int_out=problem.n_int_out, name=problem.name + "_feas",
    )
    res = solve_maxmin_kkt(ext, M=M, time_limit=time_limit)
    if res.status != backend.OPTIMAL:
        raise BackendError(f"feasibility reformulation ended {res.status}")
    return max(0.0, float(res.value)), res.outer


# -- KKT route ------------------------------------------------------------------

def solve_maxmin_kkt(problem: MaxMinProblem, M: float = 1e4,
                     time_limit: float | None = None) -> MaxMinResult:
    """Replace the inner LP by primal feasibility, dual feasibility, and the
    two linearized complementarity families; maximize the inner objective."""
    m_rows, ny = problem.B_y.shape
    n_out = problem.n_out

    m = LinearModel(name=problem.name + "_kkt")
    z_ids = [m.add_var(0.0, np.inf, integer=j < problem.n_int_out, name=f"z{j}")
             for j in range(n_out)]
    if problem.A_out.shape[0]:
        m.add_block(z_ids, problem.A_out, LEQ, problem.b_out)
    y_ids = m.add_vars(ny, prefix="y")
    pi_ids = m.add_vars(m_rows, prefix="pi")

    primal_rows = []
    for i in range(m_rows):
        coeffs = {y_ids[j]: problem.B_y[i, j] for j in range(ny)
                  if problem.B_y[i, j] != 0.0}
        for j in range(n_out):
            if problem.B_x[i, j] != 0.0:
                coeffs[z_ids[j]] = coeffs.get(z_ids[j], 0.0) + problem.B_x[i, j]
        primal_rows.append(m.add_constr(coeffs, GEQ, problem.d[i], name=f"pf{i}"))
    for j in range(ny):
        coeffs = {pi_ids[i]: problem.B_y[i, j] for i in range(m_rows)
                  if problem.B_y[i, j] != 0.0}
        m.add_constr(coeffs, LEQ, problem.c_y[j], name=f"df{j}")

    pairs = []
    for i in range(m_rows):
        surplus = {y_ids[j]: problem.B_y[i, j] for j in range(ny)
                   if problem.B_y[i, j] != 0.0}
        for j in range(n_out):
            if problem.B_x[i, j] != 0.0:
                surplus[z_ids[j]] = surplus.get(z_ids[j], 0.0) + problem.B_x[i, j]
        pairs.append((({pi_ids[i]: 1.0}, 0.0), (surplus, -problem.d[i])))
    for j in range(ny):
        margin = {pi_ids[i]: -problem.B_y[i, j] for i in range(m_rows)
                  if problem.B_y[i, j] != 0.0}
        pairs.append((({y_ids[j]: 1.0}, 0.0), (margin, problem.c_y[j])))
    backend.linearize_complementarity(m, pairs, M=M)

    m.set_objective({y_ids[j]: problem.c_y[j] for j in range(ny)
                     if problem.c_y[j] != 0.0}, sense="max")
    out = backend.solve_mip(m, time_limit=time_limit)
    if out.status == backend.INFEASIBLE:
        # distinguish an empty outer set from a too-small M
        probe = LinearModel()
        p_ids = [probe.add_var(0.0, np.inf, integer=j < problem.n_int_out)
                 for j in range(n_out)]
        if problem.A_out.shape[0]:
            probe.add_block(p_ids, problem.A_out, LEQ, problem.b_out)
        probe.set_objective({})
        if backend.solve(probe).is_optimal:
            raise BackendError(
                "optimality system infeasible though the outer set is not: "
                "M too small or inner LP infeasible/unbounded somewhere")
        return MaxMinResult(status=backend.INFEASIBLE)
    if not out.is_optimal:
        return MaxMinResult(status=out.status)
    z = out.x[:n_out]
    pi = out.x[n_out + ny:n_out + ny + m_rows]
    return MaxMinResult(status=backend.OPTIMAL, value=float(out.objective),
                        outer=z, dual=pi)


# -- disjoint bilinear route ----------------------------------------------------

def solve_maxmin_dual(problem: MaxMinProblem, M: float = 1e4,
                      time_limit: float | None = None,
                      check_feasibility: bool = True) -> MaxMinResult:
    """max{(d - B_x z)' pi : z in outer set, pi in Pi}.

    All-binary outer sets get the exact product linearization (pi capped at M,
    which is sound whenever dual vertices stay below it; the audit in the
    calling layer catches violations). Otherwise the KKT route answers.
    Inner infeasibility at some z makes the program unbounded: the result
    then carries a dual ray and the witness z instead of a point.
    """
    if check_feasibility:
        v_f, witness = check_inner_feasibility(problem, M=M, time_limit=time_limit)
        if v_f > 1e-7 * max(1.0, float(np.abs(problem.d).max())):
            ray = _dual_ray_at(problem, witness)
            return MaxMinResult(status=backend.UNBOUNDED, outer=witness, ray=ray)

    binary_outer = (problem.n_int_out == problem.n_out and
                    _outer_is_binary(problem))
    if not binary_outer:
        return solve_maxmin_kkt(problem, M=M, time_limit=time_limit)

    m_rows, ny = problem.B_y.shape
    n_out = problem.n_out
    m = LinearModel(name=problem.name + "_bilin")
    z_ids = [m.add_var(0.0, 1.0, integer=True, name=f"z{j}") for j in range(n_out)]
    if problem.A_out.shape[0]:
        m.add_block(z_ids, problem.A_out, LEQ, problem.b_out)
    pi_ids = m.add_vars(m_rows, ub=M, prefix="pi")
    for j in range(ny):
        coeffs = {pi_ids[i]: problem.B_y[i, j] for i in range(m_rows)
                  if problem.B_y[i, j] != 0.0}
        m.add_constr(coeffs, LEQ, problem.c_y[j], name=f"dual{j}")
    obj = {pi_ids[i]: problem.d[i] for i in range(m_rows) if problem.d[i] != 0.0}
    for i in range(m_rows):
        for j in range(n_out):
            bij = problem.B_x[i, j]
            if bij == 0.0:
                continue
            w = m.add_var(0.0, M, name=f"w{i}_{j}")      # w = pi_i z_j
            m.add_constr({w: 1.0, z_ids[j]: -M}, LEQ, 0.0)
            m.add_constr({w: 1.0, pi_ids[i]: -1.0}, LEQ, 0.0)
            m.add_constr({w: 1.0, pi_ids[i]: -1.0, z_ids[j]: -M}, GEQ, -M)
            obj[w] = obj.get(w, 0.0) - bij
    m.set_objective(obj, sense="max")
    out = backend.solve_mip(m, time_limit=time_limit)
    if not out.is_optimal:
        return MaxMinResult(status=out.status)
    return MaxMinResult(status=backend.OPTIMAL, value=float(out.objective),
                        outer=out.x[:n_out],
                        dual=out.x[n_out:n_out + m_rows])


def _outer_is_binary(problem: MaxMinProblem) -> bool:
    # integer coordinate capped at one by some row with unit coefficient
    for j in range(problem.n_out):
        capped = False
        for i in range(problem.A_out.shape[0]):
            row = problem.A_out[i]
            if row[j] > 0 and problem.b_out[i] / row[j] <= 1.0 + 1e-9 and \
                    np.all(row >= 0):
                capped = True
                break
        if not capped:
            return False
    return True


def _dual_ray_at(problem: MaxMinProblem, z: np.ndarray) -> np.ndarray:
    """Extreme ray of Pi certifying inner infeasibility at the witness z."""
    m_rows, ny = problem.B_y.shape
    lp = LinearModel(name="dual_at_witness")
    pi_ids = lp.add_vars(m_rows, prefix="pi")
    for j in range(ny):
        coeffs = {pi_ids[i]: problem.B_y[i, j] for i in range(m_rows)
                  if problem.B_y[i, j] != 0.0}
        lp.add_constr(coeffs, LEQ, problem.c_y[j])
    rhs_eff = problem.d - problem.B_x @ z
    lp.set_objective({pi_ids[i]: rhs_eff[i] for i in range(m_rows)
                      if rhs_eff[i] != 0.0}, sense="max")
    out = backend.solve_lp(lp)
    if out.status != backend.UNBOUNDED:
        raise BackendError("witness did not make the dual LP unbounded")
    return backend.extract_ray(lp, kind="unbounded")


# -- optimality blocks ----------------------------------------------------------

@dataclass
class OptimalityBlock:
    u_ids: list[int]
    lam_ids: list[int]
    row_ids: list[int] = field(default_factory=list)
    beta: np.ndarray | None = None
    representation: str = "kkt"
    tag: str = ""
    slack_ids: list[int] = field(default_factory=list)


def build_optimality_block(model: LinearModel, inst: Instance,
                           beta: np.ndarray, representation: str = "kkt",
                           M: float = 1e4, unique_data: np.ndarray | None = None,
                           x_ids: list[int] | None = None,
                           x_fixed: np.ndarray | None = None,
                           tag: str = "") -> OptimalityBlock:
    """Append fresh (u, lambda) columns and the rows pinning u to an optimum
    of max{(-E u)' beta : u in U(x)}.

    representation "kkt": primal + dual + linearized complementarities.
    representation "primal-dual": primal + dual + the strong-duality row
    (-E u)' beta >= (h + G x)' lambda; products of x with lambda are
    linearized exactly for binary x and rejected otherwise.
    representation "unique": KKT of the perturbed objective unique_data
    (standard-form cost row), whose optimal set is a single vertex.
    """
    if representation not in ("kkt", "primal-dual", "unique"):
        raise ValueError(f"unknown representation {representation!r}")
    if representation == "unique" and unique_data is None:
        raise ValueError("unique representation needs the perturbed cost row")
    U = inst.U
    mu, n = U.n_rows, U.dim
    beta = np.asarray(beta, dtype=float)
    symbolic = x_fixed is None
    if symbolic and x_ids is None:
        raise ValueError("either x_ids or x_fixed is required")
    if symbolic and not U.F.is_constant:
        binary_ok = all(k < inst.X.n_int and inst.X.ub[k] <= 1.0 + 1e-9
                        for k, _ in U.F.terms)
        if not binary_ok:
            raise ValueError(
                "matrix dependence on non-binary first-stage components has "
                "no exact master linearization")

    x_fixed_arr = None if symbolic else np.asarray(x_fixed, dtype=float)
    Fx = None if symbolic else U.F.evaluate(x_fixed_arr)
    rhs_fx = None if symbolic else U.h + U.G @ x_fixed_arr

    u_ids = model.add_vars(n, prefix=f"u{tag}")
    lam_ids = model.add_vars(mu, prefix=f"lam{tag}")
    blk = OptimalityBlock(u_ids=u_ids, lam_ids=lam_ids, beta=beta,
                          representation=representation, tag=tag)

    prod_cache: dict[tuple[int, int], int] = {}

    def prod(x_id: int, v_id: int, name: str) -> int:
        key = (x_id, v_id)
        if key not in prod_cache:
            prod_cache[key] = _binary_product(model, x_id, v_id, M, name=name)
        return prod_cache[key]

    if representation == "unique":
        c_struct = np.asarray(unique_data, dtype=float)[:n]
        c_slack = np.asarray(unique_data, dtype=float)[n:n + mu]
    else:
        c_struct = -(inst.Y.E.T @ beta)
        c_slack = np.zeros(mu)

    # primal rows, with explicit slack columns so degenerate-row
    # complementarities of the perturbed objective can bind on them
    slack_ids = model.add_vars(mu, prefix=f"s{tag}")
    blk.slack_ids = slack_ids
    primal_exprs = []
    for i in range(mu):
        coeffs: dict[int, float] = {slack_ids[i]: 1.0}
        const = 0.0
        if symbolic:
            for j in range(n):
                if U.F.base[i, j] != 0.0:
                    coeffs[u_ids[j]] = coeffs.get(u_ids[j], 0.0) + U.F.base[i, j]
            for k, Mk in U.F.terms:
                for j in range(n):
                    if Mk[i, j] != 0.0:
                        w = prod(x_ids[k], u_ids[j], f"fu{tag}_{i}_{k}_{j}")
                        coeffs[w] = coeffs.get(w, 0.0) + Mk[i, j]
            for k in range(inst.dim_x):
                if U.G[i, k] != 0.0:
                    coeffs[x_ids[k]] = coeffs.get(x_ids[k], 0.0) - U.G[i, k]
            const = U.h[i]
        else:
            for j in range(n):
                if Fx[i, j] != 0.0:
                    coeffs[u_ids[j]] = Fx[i, j]
            const = rhs_fx[i]
        blk.row_ids.append(model.add_constr(coeffs, EQ, const, name=f"up{tag}_{i}"))
        primal_exprs.append((coeffs, const))

    # dual rows F(x)' lam >= c
    for j in range(n):
        coeffs = {}
        if symbolic:
            for i in range(mu):
                if U.F.base[i, j] != 0.0:
                    coeffs[lam_ids[i]] = coeffs.get(lam_ids[i], 0.0) + U.F.base[i, j]
            for k, Mk in U.F.terms:
                for i in range(mu):
                    if Mk[i, j] != 0.0:
                        w = prod(x_ids[k], lam_ids[i], f"fl{tag}_{i}_{k}_{j}")
                        coeffs[w] = coeffs.get(w, 0.0) + Mk[i, j]
        else:
            for i in range(mu):
                if Fx[i, j] != 0.0:
                    coeffs[lam_ids[i]] = Fx[i, j]
        blk.row_ids.append(model.add_constr(coeffs, GEQ, c_struct[j],
                                            name=f"ud{tag}_{j}"))

    if representation in ("kkt", "unique"):
        pairs = []
        for i in range(mu):
            # lam_i (+ its perturbed slack cost) against the row slack
            pairs.append((({lam_ids[i]: 1.0}, -c_slack[i]),
                          ({slack_ids[i]: 1.0}, 0.0)))
        for j in range(n):
            margin: dict[int, float] = {}
            if symbolic:
                for i in range(mu):
                    if U.F.base[i, j] != 0.0:
                        margin[lam_ids[i]] = margin.get(lam_ids[i], 0.0) + U.F.base[i, j]
                for k, Mk in U.F.terms:
                    for i in range(mu):
                        if Mk[i, j] != 0.0:
                            w = prod(x_ids[k], lam_ids[i], f"fm{tag}_{i}_{k}_{j}")
                            margin[w] = margin.get(w, 0.0) + Mk[i, j]
            else:
                for i in range(mu):
                    if Fx[i, j] != 0.0:
                        margin[lam_ids[i]] = Fx[i, j]
            pairs.append((({u_ids[j]: 1.0}, 0.0), (margin, -c_struct[j])))
        rows = backend.linearize_complementarity(model, pairs, M=M)
        blk.row_ids.extend(rows)
    else:
        # strong duality: (-E u)' beta >= (h + G x)' lambda
        coeffs = {u_ids[j]: c_struct[j] for j in range(n) if c_struct[j] != 0.0}
        for i in range(mu):
            if U.h[i] != 0.0:
                coeffs[lam_ids[i]] = coeffs.get(lam_ids[i], 0.0) - U.h[i]
        if symbolic:
            for i in range(mu):
                for k in range(inst.dim_x):
                    if U.G[i, k] != 0.0:
                        if not (k < inst.X.n_int and inst.X.ub[k] <= 1.0 + 1e-9):
                            raise ValueError(
                                "primal-dual block needs binary first-stage "
                                "components wherever G couples them to the set")
                        w = prod(x_ids[k], lam_ids[i], f"gl{tag}_{i}_{k}")
                        coeffs[w] = coeffs.get(w, 0.0) - U.G[i, k]
        else:
            for i in range(mu):
                extra = rhs_fx[i] - U.h[i]
                if extra != 0.0:
                    coeffs[lam_ids[i]] = coeffs.get(lam_ids[i], 0.0) - extra
        blk.row_ids.append(model.add_constr(coeffs, GEQ, 0.0, name=f"sd{tag}"))
    return blk


def _binary_product(model: LinearModel, x_id: int, v_id: int, M: float,
                    name: str) -> int:
    """w = x * v for binary x and 0 <= v <= M, by the exact envelope."""
    w = model.add_var(0.0, M, name=name)
    model.add_constr({w: 1.0, x_id: -M}, LEQ, 0.0)
    model.add_constr({w: 1.0, v_id: -1.0}, LEQ, 0.0)
    model.add_constr({w: 1.0, v_id: -1.0, x_id: -M}, GEQ, -M)
    return w


def block_membership_gap(inst: Instance, x: np.ndarray, u: np.ndarray) -> float:
    """Largest violation of F(x) u <= h + G x: zero means u in U(x)."""
    x = np.asarray(x, dtype=float)
    resid = inst.U.F.evaluate(x) @ np.asarray(u, dtype=float) \
        - (inst.U.h + inst.U.G @ x)
    return float(np.max(resid)) if resid.size else 0.0


# -- uniqueness perturbation ------------------------------------------

def perturb_for_uniqueness(cost_row: np.ndarray, basis: BasisId,
                           reduced_costs: np.ndarray,
                           epsilon: float | None = None) -> np.ndarray:
    """Lower the cost by epsilon on nonbasic columns whose reduced cost
    vanishes; every alternative optimal vertex then prices out strictly."""
    c = np.asarray(cost_row, dtype=float).copy()
    rc = np.asarray(reduced_costs, dtype=float)
    if epsilon is None:
        epsilon = 1e-4 * max(1.0, float(np.abs(c).max()))
    in_basis = set(basis.indices)
    tol = _ZERO_RC_TOL * max(1.0, float(np.abs(c).max()))
    for j in range(c.size):
        if j not in in_basis and abs(rc[j]) <= tol:
            c[j] -= epsilon
    return c


def ensure_unique_optimum(inst: Instance, x: np.ndarray, beta: np.ndarray,
                          max_halvings: int = 5
                          ) -> tuple[ParametricLPResult, np.ndarray]:
    """Parametric LP solve plus a verified uniqueness perturbation.

    Halves epsilon (up to max_halvings times) until re-solving with the
    perturbed costs keeps the original vertex optimal with strictly negative
    reduced costs on every nonbasic column.
    """
    base = lp_parametric(inst, x, beta)
    eps = 1e-4 * max(1.0, float(np.abs(base.cost_row).max()))
    for _ in range(max_halvings + 1):
        c_hat = perturb_for_uniqueness(base.cost_row, base.basis,
                                       base.reduced_costs, eps)
        if _perturbation_is_clean(inst, x, base, c_hat):
            return base, c_hat
        eps *= 0.5
    raise BackendError("uniqueness perturbation failed to isolate the vertex")


def _perturbation_is_clean(inst: Instance, x: np.ndarray,
                           base: ParametricLPResult, c_hat: np.ndarray) -> bool:
    x = np.asarray(x, dtype=float)
    U = inst.U
    Fx = U.F.evaluate(x)
    rhs = U.h + U.G @ x
    mu, n = Fx.shape
    m = LinearModel(name="perturb_check")
    u_ids = m.add_vars(n, prefix="u")
    if mu:
        m.add_block(u_ids, Fx, LEQ, rhs)
    m.set_objective({u_ids[j]: c_hat[j] for j in range(n) if c_hat[j] != 0.0},
                    sense="max")
    out = backend.solve_lp(m)
    if not out.is_optimal:
        return False
    # same vertex still optimal
    u_new = out.x[:n]
    if np.max(np.abs(u_new - base.u)) > 1e-7 * max(1.0, np.abs(base.u).max()):
        return False
    # and strictly so: every nonbasic column prices out negative
    A = np.hstack([Fx, np.eye(mu)])
    cols = list(base.basis.indices)
    lam = np.linalg.solve(A[:, cols].T, c_hat[cols]) if mu else np.zeros(0)
    rc = c_hat - A.T @ lam
    nonbasic = [j for j in range(n + mu) if j not in set(cols)]
    return all(rc[j] < -1e-12 for j in nonbasic)
