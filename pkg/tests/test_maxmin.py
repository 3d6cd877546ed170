import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddu_ro import backend, t1
from ddu_ro.backend import GEQ, LEQ, BackendError, LinearModel
from ddu_ro.instances import enumerate_vertices
from ddu_ro.maxmin import (
    MaxMinProblem,
    basis_of_point,
    block_membership_gap,
    build_optimality_block,
    check_inner_feasibility,
    ensure_unique_optimum,
    lp_parametric,
    maxmin_from_instance,
    perturb_for_uniqueness,
    solve_maxmin_dual,
    solve_maxmin_kkt,
)
from ddu_ro.model import AffineMatrixMap, BasisId, Instance, UncertaintySet


def test_lp_parametric_on_t1_box():
    # at x=1 the set is 0 <= u <= 2 and beta=1 maximizes u itself
    r = lp_parametric(t1(), np.array([1.0]), np.array([1.0]))
    assert r.value == pytest.approx(2.0)
    assert r.u[0] == pytest.approx(2.0)
    assert r.basis == BasisId((0,))
    assert r.reduced_costs[1] == pytest.approx(-1.0)  # slack prices at -lambda


def test_lp_parametric_degenerate_box():
    # U(x) = {0 <= u <= 0}: only the origin, any beta
    U = UncertaintySet(F=AffineMatrixMap(base=[[1.0]]), G=[[0.0]], h=[0.0])
    base = t1()
    inst = Instance(name="point", c1=base.c1, X=base.X, U=U, Y=base.Y)
    r = lp_parametric(inst, np.array([0.0]), np.array([5.0]))
    assert r.value == pytest.approx(0.0)
    assert r.u[0] == pytest.approx(0.0)


def test_lp_parametric_two_row_vertex():
    # rows 2u1+u2 <= 3, u1+2u2 <= 5: pushing both coordinates lands on the
    # vertex where both rows bind, the basic solution (1/3, 7/3)
    U = UncertaintySet(F=AffineMatrixMap(base=[[2.0, 1.0], [1.0, 2.0]]),
                       G=np.zeros((2, 1)), h=[3.0, 5.0])
    base = t1()
    Y = type(base.Y)(B1=np.zeros((2, 1)), B2=np.eye(2), E=-np.eye(2),
                     d=np.zeros(2), c2=np.ones(2))
    inst = Instance(name="vertex", c1=base.c1, X=base.X, U=U, Y=Y)
    r = lp_parametric(inst, np.array([0.0]), np.array([1.0, 1.0]))
    assert r.u == pytest.approx([1.0 / 3.0, 7.0 / 3.0])
    assert r.basis == BasisId((0, 1))
    assert r.value == pytest.approx(8.0 / 3.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 9999))
def test_lp_parametric_matches_vertex_enumeration(seed):
    rng = np.random.default_rng(seed)
    n, mu = 2, rng.integers(2, 5)
    F = rng.uniform(0.1, 2.0, size=(mu, n))
    h = rng.uniform(0.5, 3.0, size=mu)
    U = UncertaintySet(F=AffineMatrixMap(base=F), G=np.zeros((mu, 1)), h=h)
    base = t1()
    Y = type(base.Y)(B1=np.zeros((n, 1)), B2=np.eye(n), E=-np.eye(n),
                     d=np.zeros(n), c2=np.ones(n))
    inst = Instance(name="rand", c1=base.c1, X=base.X, U=U, Y=Y)
    beta = rng.uniform(-1.0, 1.0, size=n)
    r = lp_parametric(inst, np.array([0.0]), beta)
    verts = enumerate_vertices(U, np.array([0.0]))
    best = max(float(-(inst.Y.E @ v) @ beta) for v in verts)
    assert r.value == pytest.approx(best, abs=1e-8)


def test_basis_of_point_identifies_vertices():
    inst = t1()
    assert basis_of_point(inst.U, np.array([1.0]), np.array([2.0])) == BasisId((0,))
    assert basis_of_point(inst.U, np.array([1.0]), np.array([0.0])) == BasisId((1,))


def test_check_inner_feasibility_complete_recourse():
    # shortfall variable keeps the inner LP feasible everywhere
    p = MaxMinProblem(A_out=np.array([[1.0]]), b_out=np.array([1.0]),
                      c_y=np.array([1.0, 10.0]), B_y=np.array([[1.0, 1.0]]),
                      B_x=np.array([[-1.0]]), d=np.array([0.0]))
    v_f, _ = check_inner_feasibility(p)
    assert v_f == pytest.approx(0.0, abs=1e-9)


def test_check_inner_feasibility_finds_witness():
    # inner {y : y >= u, y <= 0} fails exactly when u > 0; worst u = 1
    p = MaxMinProblem(A_out=np.array([[1.0]]), b_out=np.array([1.0]),
                      c_y=np.array([1.0]), B_y=np.array([[1.0], [-1.0]]),
                      B_x=np.array([[-1.0], [0.0]]), d=np.array([0.0, 0.0]))
    v_f, witness = check_inner_feasibility(p)
    assert v_f == pytest.approx(1.0, abs=1e-7)
    assert witness[0] == pytest.approx(1.0, abs=1e-7)


def test_kkt_and_dual_routes_agree_on_t1():
    for xv in (0.0, 1.0):
        p = maxmin_from_instance(t1(), np.array([xv]))
        k = solve_maxmin_kkt(p)
        d = solve_maxmin_dual(p)
        assert k.status == d.status == backend.OPTIMAL
        assert k.value == pytest.approx(1.0 + xv)
        assert d.value == pytest.approx(k.value, rel=1e-6)


def test_dual_route_returns_ray_on_inner_infeasibility():
    p = MaxMinProblem(A_out=np.array([[1.0]]), b_out=np.array([1.0]),
                      c_y=np.array([1.0]), B_y=np.array([[1.0], [-1.0]]),
                      B_x=np.array([[-1.0], [0.0]]), d=np.array([0.0, 0.0]))
    res = solve_maxmin_dual(p)
    assert res.status == backend.UNBOUNDED
    assert res.ray is not None
    gain = float((p.d - p.B_x @ res.outer) @ res.ray)
    assert gain > 1e-8


def test_zero_inner_cost_gives_zero_value():
    p = MaxMinProblem(A_out=np.array([[1.0]]), b_out=np.array([1.0]),
                      c_y=np.zeros(1), B_y=np.array([[1.0]]),
                      B_x=np.array([[-1.0]]), d=np.array([0.0]))
    res = solve_maxmin_dual(p)
    assert res.status == backend.OPTIMAL
    assert res.value == pytest.approx(0.0, abs=1e-9)


def test_singleton_outer_set_reduces_to_inner_lp():
    # outer u pinned to 0.7 by a pair of rows
    p = MaxMinProblem(A_out=np.array([[1.0], [-1.0]]),
                      b_out=np.array([0.7, -0.7]),
                      c_y=np.array([2.0]), B_y=np.array([[1.0]]),
                      B_x=np.array([[-1.0]]), d=np.array([0.0]))
    res = solve_maxmin_kkt(p)
    assert res.value == pytest.approx(1.4)


@pytest.mark.parametrize("representation", ["kkt", "primal-dual"])
def test_block_projection_stays_in_the_set(representation):
    inst = t1()
    for M in (10.0, 100.0, 10000.0):
        m = LinearModel()
        blk = build_optimality_block(m, inst, beta=np.array([1.0]),
                                     representation=representation, M=M,
                                     x_fixed=np.array([1.0]))
        for sense in ("min", "max"):
            m.set_objective({blk.u_ids[0]: 1.0}, sense=sense)
            out = backend.solve_mip(m)
            assert out.is_optimal
            u = np.array([out.x[blk.u_ids[0]]])
            assert block_membership_gap(inst, np.array([1.0]), u) <= 1e-6


def test_block_with_zero_beta_admits_every_point():
    inst = t1()
    m = LinearModel()
    blk = build_optimality_block(m, inst, beta=np.array([0.0]),
                                 representation="kkt", M=100.0,
                                 x_fixed=np.array([1.0]))
    m.set_objective({blk.u_ids[0]: 1.0}, sense="max")
    hi = backend.solve_mip(m).objective
    m.set_objective({blk.u_ids[0]: 1.0}, sense="min")
    lo = backend.solve_mip(m).objective
    assert lo == pytest.approx(0.0, abs=1e-7)
    assert hi == pytest.approx(2.0, abs=1e-7)


def test_block_diu_matches_enumerated_argmax():
    # decision-independent set: block must reproduce the enumerated argmax
    F = np.vstack([np.ones((1, 2)), np.eye(2)])
    U = UncertaintySet(F=AffineMatrixMap(base=F), G=np.zeros((3, 1)),
                       h=np.array([1.0, 1.0, 1.0]))
    base = t1()
    Y = type(base.Y)(B1=np.zeros((2, 1)), B2=np.eye(2), E=-np.eye(2),
                     d=np.zeros(2), c2=np.ones(2))
    inst = Instance(name="diu", c1=base.c1, X=base.X, U=U, Y=Y)
    beta = np.array([1.0, 0.25])
    verts = enumerate_vertices(U, np.array([0.0]))
    best_u = max(verts, key=lambda v: float(-(Y.E @ v) @ beta))
    m = LinearModel()
    blk = build_optimality_block(m, inst, beta=beta, representation="kkt",
                                 M=100.0, x_fixed=np.array([0.0]))
    m.set_objective({})
    out = backend.solve_mip(m)
    u = np.array([out.x[j] for j in blk.u_ids])
    assert u == pytest.approx(best_u, abs=1e-7)


def test_block_rejects_continuous_matrix_dependence_in_master():
    base = t1()
    # F depends on a continuous first-stage component
    X = type(base.X)(A=np.zeros((0, 1)), b=np.zeros(0), n_int=0,
                     lb=[0.0], ub=[1.0])
    U = UncertaintySet(F=AffineMatrixMap(base=[[1.0]], terms=((0, np.array([[1.0]])),)),
                       G=[[0.0]], h=[1.0])
    inst = Instance(name="lhs_cont", c1=base.c1, X=X, U=U, Y=base.Y)
    m = LinearModel()
    x_ids = [m.add_var(0.0, 1.0)]
    with pytest.raises(ValueError, match="binary"):
        build_optimality_block(m, inst, beta=np.array([1.0]), M=10.0,
                               x_ids=x_ids)


def test_perturbation_rules():
    c = np.array([3.0, 2.0, 0.0])
    rc = np.array([0.0, -1.0, 0.0])
    c_hat = perturb_for_uniqueness(c, BasisId((0,)), rc, epsilon=0.01)
    # basic stays, negative-rc nonbasic stays, zero-rc nonbasic drops by eps
    assert c_hat == pytest.approx([3.0, 2.0, -0.01])


def test_perturbation_noop_when_already_unique():
    c = np.array([3.0, 2.0])
    rc = np.array([0.0, -0.5])
    c_hat = perturb_for_uniqueness(c, BasisId((0,)), rc)
    assert c_hat == pytest.approx(c)


def test_ensure_unique_optimum_isolates_a_vertex():
    inst = t1()
    base, c_hat = ensure_unique_optimum(inst, np.array([1.0]), np.array([0.0]))
    # beta = 0 leaves every u in [0,2] optimal; the perturbed block collapses
    # to exactly the solver's vertex
    m = LinearModel()
    blk = build_optimality_block(m, inst, beta=np.array([0.0]),
                                 representation="unique", M=100.0,
                                 unique_data=c_hat, x_fixed=np.array([1.0]))
    us = []
    for sense in ("min", "max"):
        m.set_objective({blk.u_ids[0]: 1.0}, sense=sense)
        us.append(backend.solve_mip(m).x[blk.u_ids[0]])
    assert us[0] == pytest.approx(us[1], abs=1e-7)
    assert us[0] == pytest.approx(base.u[0], abs=1e-7)


def test_unique_representation_requires_cost_row():
    m = LinearModel()
    with pytest.raises(ValueError, match="cost row"):
        build_optimality_block(m, t1(), beta=np.array([1.0]),
                               representation="unique", x_fixed=np.array([0.0]))
