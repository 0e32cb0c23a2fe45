import numpy as np
import pytest
import yaml
from hypothesis import given, settings, strategies as st
from scipy.optimize import linprog

from costwatch.offsets import (
    ComparabilityKB,
    OffsetNetwork,
    UseSignal,
    build_networks,
    combine_treatment_impacts,
    migration_feasible,
    migration_oracle,
    offset_cost_impact,
    solve_migration,
)
from costwatch.records import InputError, ViewpointKey
from costwatch.spc import DetectionResult

capacity = st.floats(0.01, 1e4, allow_nan=False)


def lp_total(net: OffsetNetwork) -> float:
    """Largest total P with every proportional inflow under its capacity, via linprog."""
    o = np.asarray(net.outflow)
    r = np.asarray(net.inflow)
    # inflow_j(P) = P * a_j with a_j the share of one unit routed to j
    a = np.zeros(len(r))
    for i, row in enumerate(net.adjacency):
        idx = list(row)
        a[idx] += (o[i] / o.sum()) * r[idx] / r[idx].sum()
    res = linprog(c=[-1.0], A_ub=a.reshape(-1, 1), b_ub=r, bounds=[(0, o.sum())], method="highs")
    assert res.status == 0
    return float(res.x[0])


@st.composite
def networks(draw):
    I = draw(st.integers(1, 6))
    J = draw(st.integers(1, 6))
    out = draw(st.lists(capacity, min_size=I, max_size=I))
    inn = draw(st.lists(capacity, min_size=J, max_size=J))
    adjacency = []
    for _ in range(I):
        row = draw(st.sets(st.integers(0, J - 1), min_size=1))
        adjacency.append(tuple(sorted(row)))
    return OffsetNetwork(
        "rand",
        tuple(f"O{i}" for i in range(I)),
        tuple(out),
        tuple(f"R{j}" for j in range(J)),
        tuple(inn),
        tuple(adjacency),
    )


def detection(direction, confidence):
    z = np.zeros(3)
    return DetectionResult(None, "use", z, z, direction, confidence, None, "non_restarting", "end_of_window")


def signal(direction, confidence, change, mm=1000.0):
    return UseSignal(detection(direction, confidence), change, mm)


def key(product, condition="ASTHMA"):
    return ViewpointKey("cond", (("condition", condition), ("product_name", product)))


class TestMigration:
    def test_complete_network_closed_form(self):
        res = solve_migration(OffsetNetwork.complete([3.0, 1.0], [2.0, 1.0]))
        assert res.total == 3.0
        res = solve_migration(OffsetNetwork.complete([3.0, 1.0], [3.0, 4.0]))
        assert res.total == 4.0

    def test_sparse_example(self):
        # O1 reaches only R1, O2 reaches both
        net = OffsetNetwork("n", ("O1", "O2"), (5.0, 5.0), ("R1", "R2"), (2.0, 10.0), ((0,), (0, 1)))
        res = solve_migration(net)
        assert res.total == pytest.approx(lp_total(net))
        assert res.inflow[0] == pytest.approx(2.0)
        assert res.inflow.sum() == pytest.approx(res.total)
        assert np.all(res.outflow <= np.asarray(net.outflow) + 1e-12)

    def test_flows_follow_both_proportional_rules(self):
        net = OffsetNetwork("n", ("O1", "O2"), (1.0, 3.0), ("R1", "R2", "R3"), (1.0, 2.0, 5.0), ((0, 1), (1, 2)))
        res = solve_migration(net)
        assert res.outflow / res.total == pytest.approx([0.25, 0.75])
        assert res.flows[0, :2] / res.outflow[0] == pytest.approx([1 / 3, 2 / 3])
        assert res.flows[1, 1:] / res.outflow[1] == pytest.approx([2 / 7, 5 / 7])
        assert res.flows[0, 2] == 0 and res.flows[1, 0] == 0

    @settings(max_examples=200, deadline=None)
    @given(networks())
    def test_matches_lp_and_oracle(self, net):
        res = solve_migration(net)
        assert res.total == pytest.approx(lp_total(net), rel=1e-6)
        assert res.total == pytest.approx(migration_oracle(net).total, rel=1e-9)
        assert migration_feasible(net, res.total, rtol=1e-9)
        assert not migration_feasible(net, res.total * (1 + 1e-6) + 1e-12, rtol=0.0)

    @settings(max_examples=100, deadline=None)
    @given(networks())
    def test_conservation_and_bounds(self, net):
        res = solve_migration(net)
        assert res.flows.sum() == pytest.approx(res.total, rel=1e-9)
        assert res.outflow.sum() == pytest.approx(res.total, rel=1e-9)
        assert np.all(res.flows >= 0)
        assert np.all(res.inflow <= np.asarray(net.inflow) * (1 + 1e-9))
        assert res.total <= sum(net.outflow) * (1 + 1e-12)
        # the binding constraint is either total outflow or some receiver
        tight = np.isclose(res.inflow, net.inflow, rtol=1e-9).any() or np.isclose(res.total, sum(net.outflow))
        assert tight

    @settings(max_examples=100, deadline=None)
    @given(networks(), st.floats(0.01, 100))
    def test_scaling(self, net, lam):
        assert solve_migration(net.scaled(lam)).total == pytest.approx(lam * solve_migration(net).total, rel=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(capacity, min_size=1, max_size=6), st.lists(capacity, min_size=1, max_size=6))
    def test_complete_is_min_of_sums(self, out, inn):
        res = solve_migration(OffsetNetwork.complete(out, inn))
        assert res.total == pytest.approx(min(sum(out), sum(inn)), rel=1e-12)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"outflow": (1.0,), "inflow": (1.0,), "adjacency": ((),)},
            {"outflow": (0.0,), "inflow": (1.0,), "adjacency": ((0,),)},
            {"outflow": (1.0,), "inflow": (1.0,), "adjacency": ((1,),)},
            {"outflow": (1.0, 2.0), "inflow": (1.0,), "adjacency": ((0,),)},
        ],
    )
    def test_validation(self, kwargs):
        net = OffsetNetwork("bad", ("O1",) * len(kwargs["outflow"]), receivers=("R1",), **kwargs)
        with pytest.raises(ValueError):
            solve_migration(net)

    def test_overlapping_nodes_rejected(self):
        with pytest.raises(ValueError, match="overlap"):
            OffsetNetwork("n", ("X",), (1.0,), ("X",), (1.0,), ((0,),)).validate()


class TestCostImpact:
    def test_worked_example(self):
        res = solve_migration(OffsetNetwork("n", ("A",), (100.0,), ("B",), (150.0,), ((0,),)))
        imp = offset_cost_impact(res, {"A": 10.0, "B": 7.0}, member_months=1000.0)
        assert imp.cost_impact == pytest.approx(-0.30)
        assert imp.utilization_delta == {"A": -100.0, "B": 100.0}
        assert imp.treatment_delta["A"] == pytest.approx(-1.0)
        assert imp.treatment_delta["B"] == pytest.approx(0.7)
        assert sum(imp.treatment_delta.values()) == pytest.approx(imp.cost_impact)

    def test_missing_cost_and_bad_exposure(self):
        res = solve_migration(OffsetNetwork.complete([1.0], [1.0]))
        with pytest.raises(KeyError):
            offset_cost_impact(res, {"O1": 1.0}, 10.0)
        with pytest.raises(ValueError):
            offset_cost_impact(res, {"O1": 1.0, "R1": 1.0}, 0.0)

    def test_combine_marks_multi_network_treatments(self):
        a = solve_migration(OffsetNetwork("n1", ("A",), (1.0,), ("B",), (1.0,), ((0,),)))
        b = solve_migration(OffsetNetwork("n2", ("C",), (1.0,), ("B",), (1.0,), ((0,),)))
        costs = {"A": 2.0, "B": 1.0, "C": 3.0}
        combined = combine_treatment_impacts([offset_cost_impact(a, costs, 1.0), offset_cost_impact(b, costs, 1.0)])
        assert combined["B"]["multi_network"] and combined["B"]["cost_delta"] == pytest.approx(2.0)
        assert not combined["A"]["multi_network"]


KB_DOC = {
    "provenance": "test",
    "groups": [{"group_id": "g", "condition": "ASTHMA", "dimension": "product_name", "members": ["A", "B", "C"]}],
}


class TestBuildNetworks:
    def test_confidence_filter(self):
        kb = ComparabilityKB.from_dict(KB_DOC)
        signals = {
            key("A"): signal("down", "S", -0.02),
            key("B"): signal("up", "M", 0.01),
            key("C"): signal("up", "S", 0.015),
        }
        (net,) = build_networks(signals, kb, min_confidence="S")
        assert net.originators == ("A",) and net.receivers == ("C",)
        assert net.outflow == pytest.approx((20.0,)) and net.inflow == pytest.approx((15.0,))
        assert net.network_id == "g@cond:ASTHMA"
        (loose,) = build_networks(signals, kb, min_confidence="M")
        assert loose.receivers == ("B", "C")

    def test_six_members_all_strong(self):
        doc = {"groups": [{"group_id": "six", "members": list("UVWXYZ")}]}
        signals = {
            key("U"): signal("down", "VS", -0.03),
            key("V"): signal("down", "S", -0.01),
            key("W"): signal("down", "S", -0.02),
            key("X"): signal("up", "S", 0.01),
            key("Y"): signal("up", "VS", 0.04),
            key("Z"): signal("up", "S", 0.005),
        }
        (net,) = build_networks(signals, ComparabilityKB.from_dict(doc), min_confidence="S")
        assert net.originators == ("U", "V", "W") and net.receivers == ("X", "Y", "Z")
        res = solve_migration(net)
        assert res.total == pytest.approx(min(60.0, 55.0))

    def test_requires_both_sides_and_same_condition(self):
        kb = ComparabilityKB.from_dict(KB_DOC)
        assert build_networks({key("A"): signal("down", "S", -0.02)}, kb) == []
        other = {key("A"): signal("down", "S", -0.02), key("B", "COPD"): signal("up", "S", 0.02)}
        assert build_networks(other, kb) == []

    def test_direction_must_agree_with_change_sign(self):
        kb = ComparabilityKB.from_dict(KB_DOC)
        signals = {key("A"): signal("down", "S", 0.02), key("B"): signal("up", "S", 0.02)}
        assert build_networks(signals, kb) == []

    def test_exclusions_prune_edges(self):
        doc = {"groups": [dict(KB_DOC["groups"][0], exclusions=[["A", "B"]])]}
        signals = {
            key("A"): signal("down", "S", -0.02),
            key("B"): signal("up", "S", 0.01),
            key("C"): signal("up", "S", 0.01),
        }
        (net,) = build_networks(signals, ComparabilityKB.from_dict(doc))
        assert net.receivers == ("C",)
        doc["groups"][0]["exclusions"] = [["A", "B"], ["A", "C"]]
        assert build_networks(signals, ComparabilityKB.from_dict(doc)) == []


class TestKB:
    def test_round_trip_through_yaml(self, tmp_path):
        path = tmp_path / "kb.yaml"
        path.write_text(yaml.safe_dump(KB_DOC))
        kb = ComparabilityKB.load(path)
        assert ComparabilityKB.from_dict(kb.to_dict()) == kb

    def test_invalid_groups(self):
        with pytest.raises(InputError):
            ComparabilityKB.from_dict({"groups": [{"group_id": "g", "members": ["A"]}]})
        with pytest.raises(InputError):
            ComparabilityKB.from_dict({"groups": [{"group_id": "g", "members": ["A", "B"]}] * 2})
