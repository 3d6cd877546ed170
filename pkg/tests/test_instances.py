import json
import os

import numpy as np
import pytest

from ddu_ro import (
    FLParams,
    PMedianParams,
    gen_mip_recourse_fl,
    gen_reliable_pmedian,
    gen_robust_fl,
    instance_to_dict,
    io_read,
    io_write,
    oracle_exact,
    t1,
    validate,
)
from ddu_ro.instances import (
    OracleError,
    OracleLimits,
    SchemaError,
    check_schema,
    enumerate_vertices,
    recourse_value,
    t1_infeasible,
    uncertainty_set_from_dict,
    worst_case_value,
)


# expected values below were produced by this module's own enumeration oracle
# and frozen after cross-checking the tiny cases by hand

def test_t1_oracle_and_per_x_values():
    res = oracle_exact(t1())
    assert res.value == pytest.approx(1.0, abs=1e-9)
    assert res.x[0] == pytest.approx(0.0)
    by_x = {round(x[0]): v for x, v in res.evaluations}
    assert by_x[0] == pytest.approx(1.0, abs=1e-9)
    assert by_x[1] == pytest.approx(3.0, abs=1e-9)


def test_t1_vertices_depend_on_x():
    U = t1().U
    v0 = sorted(enumerate_vertices(U, np.array([0.0])).ravel().tolist())
    v1 = sorted(enumerate_vertices(U, np.array([1.0])).ravel().tolist())
    assert v0 == pytest.approx([0.0, 1.0])
    assert v1 == pytest.approx([0.0, 2.0])


def test_recourse_value_infeasible_is_inf():
    inst = t1_infeasible()
    val, y = recourse_value(inst, np.array([0.0]), np.array([0.0]))
    assert val == np.inf and y is None


def test_worst_case_picks_the_cap():
    inst = t1()
    wc, u = worst_case_value(inst, np.array([1.0]))
    assert wc == pytest.approx(2.0)
    assert u[0] == pytest.approx(2.0)


PM4 = dict(n_sites=4, seed=3, p=2, k=1, rho=0.3, theta=0.0)
PM4_VALUE = 9557.670493655241


def test_pmedian_disruption_set_reduction_is_exact():
    # with a dominating penalty and theta <= 0, restricting disruptions to
    # built sites does not change the optimum
    r_diu = oracle_exact(gen_reliable_pmedian(PMedianParams(**PM4), "diu_u0"))
    r_ddu = oracle_exact(gen_reliable_pmedian(PMedianParams(**PM4), "ddu_uk"))
    assert r_diu.value == pytest.approx(PM4_VALUE, abs=1e-6)
    assert r_ddu.value == pytest.approx(PM4_VALUE, abs=1e-6)
    assert abs(r_diu.value - r_ddu.value) <= 1e-6


def test_pmedian_relaxation_chain_orders_values():
    vals = {}
    for kind in ("ddu_uk", "ddu_ukq", "diu_u0"):
        vals[kind] = oracle_exact(
            gen_reliable_pmedian(PMedianParams(**PM4), kind)).value
    assert vals["ddu_uk"] <= vals["ddu_ukq"] + 1e-7
    assert vals["ddu_ukq"] <= vals["diu_u0"] + 1e-7


def test_pmedian_warns_when_penalty_too_small():
    params = PMedianParams(**{**PM4, "penalty": 1.0})
    with pytest.warns(UserWarning):
        gen_reliable_pmedian(params, "ddu_uk")


FL2 = dict(n_sites=2, seed=1, capacity_lower_frac=1.5, capacity_upper_frac=1.5)


def test_fl_generators_validate_and_match_frozen_values():
    fp = FLParams(**FL2)
    expect = {"rhs": -37922.762986387716, "lhs": -37922.762986387716}
    for dep, val in expect.items():
        inst = gen_robust_fl(fp, dep)
        rep = validate(inst)
        assert rep.ok, rep.errors
        assert rep.dependence == dep
        assert oracle_exact(inst).value == pytest.approx(val, rel=1e-9)


def test_fl_zero_profit_exposes_dependence_and_feasibility_cuts():
    fp = FLParams(n_sites=2, seed=5, capacity_lower_frac=1.5,
                  capacity_upper_frac=1.5, profits=np.zeros(2))
    r_rhs = oracle_exact(gen_robust_fl(fp, "rhs"))
    r_lhs = oracle_exact(gen_robust_fl(fp, "lhs"))
    assert r_rhs.value == pytest.approx(4096.546155822063, rel=1e-9)
    assert r_lhs.value == pytest.approx(4105.673310050928, rel=1e-9)
    # under-built first stages cannot serve the worst demand at all
    assert sum(1 for _, v in r_rhs.evaluations if np.isinf(v)) == 3


def test_fl_mip_recourse_validates_and_matches_frozen_value():
    inst = gen_mip_recourse_fl(FLParams(**FL2))
    assert inst.Y.n_int_y == 2
    rep = validate(inst)
    assert rep.ok, rep.errors
    assert oracle_exact(inst).value == pytest.approx(-52261.99993668124, rel=1e-7)


def test_generators_are_deterministic():
    a = gen_reliable_pmedian(PMedianParams(n_sites=3, seed=7, p=1, k=1), "ddu_ur")
    b = gen_reliable_pmedian(PMedianParams(n_sites=3, seed=7, p=1, k=1), "ddu_ur")
    assert json.dumps(instance_to_dict(a), sort_keys=True) == \
        json.dumps(instance_to_dict(b), sort_keys=True)


def test_pairing_mode_carries_both_sets():
    inst = gen_reliable_pmedian(PMedianParams(n_sites=3, seed=7, p=1, k=1),
                                "ddu_us_pair")
    assert validate(inst).ok
    assert inst.U.n_int_u == 3
    sets = [uncertainty_set_from_dict(d) for d in inst.metadata["ddu_sets"]]
    assert len(sets) == 2
    assert all(s.dim == 3 and s.n_int_u == 0 for s in sets)
    # each approximation set keys disruptions to its own marker column
    xr = inst.metadata["blocks"]["x_r"]
    xs = inst.metadata["blocks"]["x_s"]
    assert np.any(sets[0].G[:, xr])
    assert not np.any(sets[0].G[:, xs])
    assert np.any(sets[1].G[:, xs])


def test_io_round_trip(tmp_path):
    inst = gen_robust_fl(FLParams(**FL2), "lhs")
    path = str(tmp_path / "inst.json")
    io_write(path, inst)
    back = io_read(path)
    assert json.dumps(instance_to_dict(back), sort_keys=True) == \
        json.dumps(instance_to_dict(inst), sort_keys=True)
    assert not [f for f in os.listdir(tmp_path) if f.endswith(".part")]


def test_schema_rejects_unknown_keys_with_location():
    d = instance_to_dict(t1())
    d["U"]["Foo"] = 1
    with pytest.raises(SchemaError, match=r"\$\.U"):
        check_schema(d)


def test_schema_rejects_out_of_range_triplets():
    d = instance_to_dict(t1())
    d["Y"]["B2"]["triplets"].append([7, 0, 1.0])
    with pytest.raises(SchemaError, match=r"\$\.Y\.B2"):
        check_schema(d)


def test_oracle_refuses_oversized_enumerations():
    fp = FLParams(n_sites=3, seed=5, capacity_lower_frac=1.5,
                  capacity_upper_frac=1.5)
    with pytest.raises(OracleError, match="basis systems"):
        oracle_exact(gen_robust_fl(fp, "rhs"))


def test_oracle_refuses_too_many_free_coupled_dims():
    from ddu_ro.model import (AffineMatrixMap, FirstStageSet, Instance,
                              RecourseSet, UncertaintySet)
    # three continuous first-stage dims, each free in [0, 1], all pushing the
    # demand cap: more than the two-dim grid allows
    nx = 3
    U = UncertaintySet(F=AffineMatrixMap(base=[[1.0]]), G=np.ones((1, nx)),
                       h=[1.0])
    inst = Instance(
        name="wide", c1=np.ones(nx),
        X=FirstStageSet(A=np.zeros((0, nx)), b=np.zeros(0), n_int=0,
                        ub=np.ones(nx)),
        U=U,
        Y=RecourseSet(B1=np.zeros((1, nx)), B2=[[1.0]], E=[[-1.0]], d=[0.0],
                      c2=[1.0]))
    with pytest.raises(OracleError, match="grid limit"):
        oracle_exact(inst)


def test_oracle_refuses_mixed_integer_uncertainty():
    from ddu_ro.model import AffineMatrixMap, Instance, UncertaintySet
    base = t1()
    U = UncertaintySet(F=AffineMatrixMap(base=np.eye(2)), G=np.zeros((2, 1)),
                       h=np.ones(2), n_int_u=1)
    inst = Instance(name="mixed", c1=base.c1, X=base.X, U=U,
                    Y=type(base.Y)(B1=[[0.0]], B2=[[1.0]], E=[[-1.0, 0.0]],
                                   d=[0.0], c2=[1.0]))
    with pytest.raises(OracleError, match="mixed-integer"):
        enumerate_vertices(U, np.array([0.0]))
