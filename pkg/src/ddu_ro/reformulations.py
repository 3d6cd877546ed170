"""Structural rewrites for special shapes of decision-dependent uncertainty.

Three rewrites, each exact on its shape class:

* ``neutralize``: masked sets {u : F u <= h, u <= caps * x'} with binary
  switch columns x'. Scenarios outside U(x) are projected onto it by
  replacing E u with E (u o x') in the recourse, so the set itself loses
  its x dependence.
* ``normalize``: hypercube sets {x_l <= u <= x_h} whose endpoints are
  first-stage variables. Rescaling to the unit box moves the dependence
  into the recourse rows.
* ``order_switch``: uncertainty that only tilts the recourse objective.
  The inner max-min collapses by minimax duality into one flat model.

The first two return a new standard instance; the third returns a solved
ready single-level model. Hadamard products are linearized exactly, so
values are preserved, not approximated.
"""

from dataclasses import dataclass, replace
import itertools

import numpy as np

from . import backend
from .backend import GEQ, LinearModel
from .maxmin import _binary_product
from .model import (AffineMatrixMap, Instance, RecourseSet, UncertaintySet,
                    add_first_stage, add_recourse_rows, add_recourse_vars)

_TOL = 1e-9


@dataclass(frozen=True)
class ReformulationOutput:
    """A rewritten problem plus the bookkeeping to map solutions back.

    Exactly one of ``instance`` and ``model`` is set: the first two rewrites
    stay two-stage, order switching flattens to a single level. ``mapping``
    names the new columns (masked copies v, multiplier ids, ...) in terms of
    the original (x, x', v) data.
    """

    kind: str
    instance: Instance | None
    model: LinearModel | None
    mapping: dict


# -- downward closedness -------------------------------------------------------

def _closure_counterexample(F: np.ndarray, h: np.ndarray, caps: np.ndarray,
                            n_int: int, n_trials: int = 1000):
    """Search for a feasible u whose shrunken copy leaves {u : F u <= h}.

    All-binary sets of dimension <= 15 are checked exhaustively (closure
    under zeroing one coordinate at a time is equivalent to full downward
    closedness); otherwise randomized masks over sampled feasible points.
    Returns (u, masked) on failure, None when no violation was found.
    """
    mu, dim = F.shape
    if dim == 0 or mu == 0:
        return None
    slack = _TOL * max(1.0, float(np.abs(h).max()))

    def feasible(u: np.ndarray) -> bool:
        return bool(np.all(F @ u <= h + slack))

    if n_int == dim and dim <= 15:
        for bits in itertools.product((0.0, 1.0), repeat=dim):
            u = np.array(bits) * caps
            if not feasible(u):
                continue
            for j in range(dim):
                if u[j] > 0.0:
                    masked = u.copy()
                    masked[j] = 0.0
                    if not feasible(masked):
                        return u, masked
        return None

    rng = np.random.default_rng(0)
    found = 0
    for _ in range(n_trials):
        if found >= 100:
            break
        u = rng.random(dim) * caps
        u[:n_int] = np.round(u[:n_int])
        if not feasible(u):
            continue
        found += 1
        for _ in range(10):
            factor = rng.random(dim)
            factor[rng.random(dim) < 0.3] = 0.0
            factor[:n_int] = np.round(factor[:n_int])
            masked = u * factor
            if not feasible(masked):
                return u, masked
    return None


# -- neutralization ------------------------------------------------------------

def _split_masked_rows(U: UncertaintySet) -> tuple[dict, list[int]]:
    """Partition the rows of a masked set into per-coordinate links u_i <=
    cap * x_k and plain x-free rows; anything else is a shape violation."""
    if not U.F.is_constant:
        raise ValueError("a masked set has a constant left-hand side; "
                         "F depends on x here")
    F0, G, h = U.F.base, U.G, U.h
    links: dict[int, tuple[int, int, float]] = {}
    plain: list[int] = []
    for r in range(U.n_rows):
        grow = np.flatnonzero(G[r])
        if grow.size == 0:
            plain.append(r)
            continue
        frow = np.flatnonzero(F0[r])
        if (grow.size != 1 or frow.size != 1 or h[r] != 0.0
                or F0[r, frow[0]] <= 0.0 or G[r, grow[0]] <= 0.0):
            raise ValueError(f"row {r} is neither x-free nor a single mask "
                             "link u_i <= cap * x_k")
        i, k = int(frow[0]), int(grow[0])
        if i in links:
            raise ValueError(f"u[{i}] has two mask links (rows {links[i][0]} "
                             f"and {r})")
        links[i] = (r, k, float(G[r, k] / F0[r, i]))
    missing = [i for i in range(U.dim) if i not in links]
    if missing:
        raise ValueError(f"coordinates {missing} have no mask link; every "
                         "u_i needs one row u_i <= cap * x_k")
    return links, plain


def neutralize(inst: Instance) -> ReformulationOutput:
    """Rewrite a masked decision-dependent set as a decision-independent one.

    Shape: every coordinate carries one link row u_i <= cap_i * x_k with a
    binary switch column x_k, and the remaining rows F u <= h are x-free and
    downward closed (checked, by exhaustion when all-binary and small,
    sampled otherwise). The output set drops the switches (links become
    u_i <= cap_i) and the recourse sees v = u o x' through the exact
    envelope v <= cap x', v <= u, v >= u - cap (1 - x'), which for binary
    coordinates is the usual v <= x', v <= u, v >= x' + u - 1.

    A scenario outside the original U(x) is thereby projected onto the one
    with its masked coordinates zeroed, which the closure property keeps
    inside the set, so worst cases are unchanged.
    """
    U, Y, X = inst.U, inst.Y, inst.X
    links, plain = _split_masked_rows(U)
    caps = np.array([links[i][2] for i in range(U.dim)])
    for i in range(U.n_int_u):
        if caps[i] != 1.0:
            raise ValueError(f"binary u[{i}] needs a unit mask link, "
                             f"got cap {caps[i]}")
    for i, (r, k, _) in links.items():
        if k >= X.n_int or X.ub[k] != 1.0 or X.lb[k] != 0.0:
            raise ValueError(f"mask column x[{k}] for u[{i}] is not binary "
                             "in the first stage")

    F0 = U.F.base
    bad = _closure_counterexample(F0[plain], U.h[plain], caps, U.n_int_u)
    if bad is not None:
        raise ValueError("the x-free rows are not downward closed: "
                         f"u = {bad[0].tolist()} is feasible but its masked "
                         f"copy {bad[1].tolist()} is not")

    h0 = U.h.copy()
    for i, (r, _, cap) in links.items():
        h0[r] = cap * F0[r, i]
    U0 = UncertaintySet(F=AffineMatrixMap(base=F0), G=np.zeros_like(U.G),
                        h=h0, n_int_u=U.n_int_u)

    ny, nu, nx = Y.dim, U.dim, inst.dim_x
    m = Y.n_rows
    B2 = np.zeros((m + 3 * nu, ny + nu))
    B1 = np.zeros((m + 3 * nu, nx))
    E = np.zeros((m + 3 * nu, nu))
    d = np.zeros(m + 3 * nu)
    B2[:m, :ny] = Y.B2
    B2[:m, ny:] = Y.E                      # B2 y + E v >= d - B1 x
    B1[:m] = Y.B1
    d[:m] = Y.d
    for i in range(nu):
        _, k, cap = links[i]
        ra, rb, rc = m + 3 * i, m + 3 * i + 1, m + 3 * i + 2
        B2[ra, ny + i] = -1.0              # v <= cap x'
        B1[ra, k] = cap
        B2[rb, ny + i] = -1.0              # v <= u
        E[rb, i] = 1.0
        B2[rc, ny + i] = 1.0               # v >= u - cap (1 - x')
        B1[rc, k] = -cap
        E[rc, i] = -1.0
        d[rc] = -cap
    Y0 = RecourseSet(B1=B1, B2=B2, E=E, d=d,
                     c2=np.concatenate([Y.c2, np.zeros(nu)]),
                     n_int_y=Y.n_int_y)

    mapping = {"v_columns": list(range(ny, ny + nu)),
               "mask_column": {i: links[i][1] for i in range(nu)},
               "cap": caps.tolist()}
    out = Instance(name=f"{inst.name}-neutralized", c1=inst.c1, X=X,
                   U=U0, Y=Y0, metadata=dict(inst.metadata))
    return ReformulationOutput("neutralized-diu", out, None, mapping)


# -- normalization -------------------------------------------------------------

def _match_box_rows(U: UncertaintySet, lo: list[int], hi: list[int]) -> None:
    nu = U.dim
    if not U.F.is_constant:
        raise ValueError("a variable hypercube has a constant left-hand side")
    if U.n_rows != 2 * nu:
        raise ValueError(f"expected the 2 * {nu} rows of a two-sided box, "
                         f"got {U.n_rows}")
    F0 = U.F.base
    for i in range(nu):
        up = [r for r in range(U.n_rows)
              if np.array_equal(F0[r], _unit(nu, i))
              and np.array_equal(U.G[r], _unit(U.G.shape[1], hi[i]))
              and U.h[r] == 0.0]
        dn = [r for r in range(U.n_rows)
              if np.array_equal(F0[r], -_unit(nu, i))
              and np.array_equal(U.G[r], -_unit(U.G.shape[1], lo[i]))
              and U.h[r] == 0.0]
        if len(up) != 1 or len(dn) != 1:
            raise ValueError(f"u[{i}] lacks the pair x_l[{i}] <= u_{i} <= "
                             f"x_h[{i}] against columns {lo[i]}, {hi[i]}")


def _unit(n: int, i: int) -> np.ndarray:
    e = np.zeros(n)
    e[i] = 1.0
    return e


def _crossed_interval(X, lo: int, hi: int) -> float:
    mdl = LinearModel(name="crossing")
    ids = [mdl.add_var(X.lb[j], X.ub[j], integer=j < X.n_int, name=f"x{j}")
           for j in range(X.dim)]
    if X.A.shape[0]:
        mdl.add_block(ids, X.A, GEQ, X.b, name="X")
    mdl.set_objective({ids[lo]: 1.0, ids[hi]: -1.0}, sense="max")
    out = backend.solve(mdl)
    if out.status == backend.INFEASIBLE:
        return -np.inf
    if not out.is_optimal:
        raise ValueError(f"could not certify x_l <= x_h over X ({out.status})")
    return float(out.objective)


def normalize(inst: Instance, lo_cols: list[int], hi_cols: list[int],
              binary_vertices: bool = False) -> ReformulationOutput:
    """Rescale a variable hypercube {x_l <= u <= x_h} to the fixed unit box.

    ``lo_cols`` and ``hi_cols`` name the first-stage columns holding the
    endpoints, coordinate by coordinate. The recourse then reads the
    denormalized point v = x_l + u o (x_h - x_l) through an envelope that
    pins v to x_l at u_i = 0 and to x_h at u_i = 1 using the endpoint
    bounds from X. At fractional u the envelope only relaxes the recourse,
    and the inner value is convex in u, so every worst case sits on a
    vertex where the envelope is tight; values are preserved exactly.

    With an LP recourse the box can be restricted to its vertices outright
    (``binary_vertices``), which marks u integer in the output.

    A first stage that admits a crossed interval x_l > x_h is rejected:
    add the ordering rows to X first.
    """
    U, Y, X = inst.U, inst.Y, inst.X
    nu = U.dim
    if len(lo_cols) != nu or len(hi_cols) != nu:
        raise ValueError("need one lo and one hi column per u coordinate")
    if U.n_int_u:
        raise ValueError("a hypercube set has continuous coordinates")
    _match_box_rows(U, lo_cols, hi_cols)
    if binary_vertices and Y.n_int_y:
        raise ValueError("restricting to box vertices needs an LP recourse")

    bounds = []
    for i, (lo, hi) in enumerate(zip(lo_cols, hi_cols)):
        if X.lb[lo] < 0.0 or X.lb[hi] < 0.0:
            raise ValueError(f"endpoint columns {lo}, {hi} must be "
                             "nonnegative")
        B = max(float(X.ub[lo]), float(X.ub[hi]))
        if not np.isfinite(B):
            raise ValueError(f"endpoint columns {lo}, {hi} need finite "
                             "upper bounds")
        gap = _crossed_interval(X, lo, hi)
        if gap > 1e-9 * max(1.0, B):
            raise ValueError(f"X admits x_l > x_h at coordinate {i} "
                             f"(by {gap:.3g}); add x_l <= x_h rows to X")
        bounds.append(B)

    U0 = UncertaintySet(F=AffineMatrixMap(base=np.eye(nu)),
                        G=np.zeros((nu, inst.dim_x)), h=np.ones(nu),
                        n_int_u=nu if binary_vertices else 0)

    ny, nx, m = Y.dim, inst.dim_x, Y.n_rows
    B2 = np.zeros((m + 4 * nu, ny + nu))
    B1 = np.zeros((m + 4 * nu, nx))
    E = np.zeros((m + 4 * nu, nu))
    d = np.zeros(m + 4 * nu)
    B2[:m, :ny] = Y.B2
    B2[:m, ny:] = Y.E                      # B2 y + E v >= d - B1 x
    B1[:m] = Y.B1
    d[:m] = Y.d
    for i in range(nu):
        lo, hi, B = lo_cols[i], hi_cols[i], bounds[i]
        r = m + 4 * i
        B2[r, ny + i] = -1.0               # v <= x_h + B (1 - u)
        B1[r, hi] = 1.0
        E[r, i] = -B
        d[r] = -B
        B2[r + 1, ny + i] = 1.0            # v >= x_h - B (1 - u)
        B1[r + 1, hi] = -1.0
        E[r + 1, i] = -B
        d[r + 1] = -B
        B2[r + 2, ny + i] = -1.0           # v <= x_l + B u
        B1[r + 2, lo] = 1.0
        E[r + 2, i] = B
        B2[r + 3, ny + i] = 1.0            # v >= x_l - B u
        B1[r + 3, lo] = -1.0
        E[r + 3, i] = B
    Y0 = RecourseSet(B1=B1, B2=B2, E=E, d=d,
                     c2=np.concatenate([Y.c2, np.zeros(nu)]),
                     n_int_y=Y.n_int_y)

    mapping = {"v_columns": list(range(ny, ny + nu)),
               "lo_columns": list(lo_cols), "hi_columns": list(hi_cols),
               "box_bound": bounds}
    out = Instance(name=f"{inst.name}-normalized", c1=inst.c1, X=X,
                   U=U0, Y=Y0, metadata=dict(inst.metadata))
    return ReformulationOutput("normalized-diu", out, None, mapping)


# -- order switching -----------------------------------------------------------

def order_switch(inst: Instance, E_hat: np.ndarray, big_M: float = 1e4,
                 force_upper_bound: bool = False) -> ReformulationOutput:
    """Collapse objective-only uncertainty into one flat model.

    Shape: the recourse rows never see u (the instance's E is zero) and the
    random factor tilts the cost to (E_hat u + c2) y. Minimax duality then
    swaps the inner max and min, and dualizing the max over U(x) gives

        min  c1 x + c2 y + (h + G x)' lam
        s.t. x in X,  B2 y >= d - B1 x,  F(x)' lam >= E_hat' y,  lam >= 0.

    Products of lam with x (from G or from x-dependent F terms) are
    linearized exactly for binary columns, with lam capped at ``big_M``;
    any other coupled column is rejected. The swap needs both u and y
    continuous; with integer coordinates the flat value is only an upper
    bound, which ``force_upper_bound`` accepts explicitly.
    """
    U, Y = inst.U, inst.Y
    E_hat = np.atleast_2d(np.asarray(E_hat, dtype=float))
    if E_hat.shape != (Y.dim, U.dim):
        raise ValueError(f"E_hat must be (dim_y, dim_u) = ({Y.dim}, {U.dim}),"
                         f" got {E_hat.shape}")
    if np.any(Y.E):
        raise ValueError("the recourse rows see u through E; order switching "
                         "covers objective uncertainty only")
    if (U.n_int_u or Y.n_int_y) and not force_upper_bound:
        raise ValueError("integer u or y breaks the max-min swap; the flat "
                         "value is only an upper bound "
                         "(force_upper_bound=True to accept)")

    coupled = {k for k in range(inst.dim_x) if np.any(U.G[:, k])}
    for k, M in U.F.terms:
        if np.any(M):
            coupled.add(k)
    for k in sorted(coupled):
        if k >= inst.X.n_int or inst.X.ub[k] != 1.0 or inst.X.lb[k] != 0.0:
            raise ValueError(f"multiplier products need binary x[{k}]; the "
                             "coupled column is not")

    model = LinearModel(name=f"{inst.name}-switched")
    x_ids = add_first_stage(model, inst)
    y_ids = add_recourse_vars(model, Y)
    add_recourse_rows(model, Y, y_ids, x_ids=x_ids)

    # lam rows involved in any x product get the finite cap the envelopes need
    in_product = set()
    for k in coupled:
        in_product.update(np.flatnonzero(U.G[:, k]).tolist())
    for k, M in U.F.terms:
        in_product.update(np.flatnonzero(np.any(M, axis=1)).tolist())
    lam_ids = [model.add_var(0.0, big_M if i in in_product else np.inf,
                             name=f"lam{i}") for i in range(U.n_rows)]

    prods: dict[tuple[int, int], int] = {}
    for k in sorted(coupled):
        rows = set(np.flatnonzero(U.G[:, k]).tolist())
        for t, M in U.F.terms:
            if t == k:
                rows.update(np.flatnonzero(np.any(M, axis=1)).tolist())
        for i in sorted(rows):
            prods[(i, k)] = _binary_product(model, x_ids[k], lam_ids[i],
                                            big_M, f"xl[{i},{k}]")

    F_terms = {k: M for k, M in U.F.terms}
    for j in range(U.dim):
        coeffs: dict[int, float] = {}
        for i in range(U.n_rows):
            if U.F.base[i, j] != 0.0:
                coeffs[lam_ids[i]] = coeffs.get(lam_ids[i], 0.0) + U.F.base[i, j]
        for k, M in F_terms.items():
            for i in range(U.n_rows):
                if M[i, j] != 0.0:
                    w = prods[(i, k)]
                    coeffs[w] = coeffs.get(w, 0.0) + M[i, j]
        for r in range(Y.dim):
            if E_hat[r, j] != 0.0:
                coeffs[y_ids[r]] = coeffs.get(y_ids[r], 0.0) - E_hat[r, j]
        if coeffs:
            model.add_constr(coeffs, GEQ, 0.0, name=f"dual[{j}]")

    obj = {x_ids[k]: float(inst.c1[k]) for k in range(inst.dim_x)}
    for r in range(Y.dim):
        obj[y_ids[r]] = obj.get(y_ids[r], 0.0) + float(Y.c2[r])
    for i in range(U.n_rows):
        if U.h[i] != 0.0:
            obj[lam_ids[i]] = obj.get(lam_ids[i], 0.0) + float(U.h[i])
    for (i, k), w in prods.items():
        if U.G[i, k] != 0.0:
            obj[w] = obj.get(w, 0.0) + float(U.G[i, k])
    model.set_objective(obj, sense="min")

    mapping = {"x": x_ids, "y": y_ids, "lam": lam_ids,
               "upper_bound_only": bool(U.n_int_u or Y.n_int_y)}
    return ReformulationOutput("order-switched-flat", None, model, mapping)
