from itertools import combinations, permutations

import numpy as np
import pytest

from modalseg.modality_graph import (
    MODALITIES,
    Modality,
    ModalityIndicator,
    RelationshipTable,
    donor_for,
    enumerate_scenarios,
    sample_perturbation,
)

T1, TC, T2, FL = Modality.T1, Modality.TC, Modality.T2, Modality.FL

# independent statement of the three pairings, used as the routing oracle
ORACLE_PAIRS = {
    "I": {T1: TC, TC: T1, T2: FL, FL: T2},
    "II": {T1: T2, T2: T1, TC: FL, FL: TC},
    "III": {T1: FL, FL: T1, TC: T2, T2: TC},
}


def brute_force_donor(missing, delta, order):
    for tier in order:
        partner = ORACLE_PAIRS[tier][missing]
        if delta[partner]:
            return partner
    raise AssertionError("no donor found")


def test_enumerate_scenarios_count():
    assert len(enumerate_scenarios()) == 15


def test_enumerate_scenarios_matches_subset_enumeration():
    # independently enumerate all non-empty subsets of the 4 modalities
    expected = set()
    for r in range(1, 5):
        for combo in combinations(range(4), r):
            bits = tuple(1 if i in combo else 0 for i in range(4))
            expected.add(bits)
    got = {tuple(d.bits) for d in enumerate_scenarios()}
    assert got == expected
    assert len(got) == len(enumerate_scenarios())  # no duplicates


def test_enumerate_scenarios_order_and_contents():
    scenarios = enumerate_scenarios()
    values = [d.value for d in scenarios]
    assert values == list(range(1, 16))  # ascending 4-bit value
    assert ModalityIndicator((1, 1, 1, 1)) in scenarios
    for m in MODALITIES:
        assert ModalityIndicator.only(m) in scenarios


def test_indicator_validation():
    with pytest.raises(ValueError):
        ModalityIndicator((0, 0, 0, 0))
    with pytest.raises(ValueError):
        ModalityIndicator((1, 0, 2, 0))
    with pytest.raises(ValueError):
        ModalityIndicator((1, 0, 0))


def test_indicator_available_missing():
    d = ModalityIndicator((1, 0, 1, 0))
    assert d.available == (T1, T2)
    assert d.missing == (TC, FL)
    assert d.value == 0b0101


def test_donor_routing_t1_tc_missing():
    # with only t2 and fl available, t2 stands in for t1 and fl for tc
    delta = ModalityIndicator((0, 0, 1, 1))
    table = RelationshipTable()
    assert donor_for(TC, delta, table) == FL
    assert donor_for(T1, delta, table) == T2


def test_donor_tertiary_fallback():
    # fl missing, only t1 available: primary t2 absent, secondary tc absent
    delta = ModalityIndicator((1, 0, 0, 0))
    assert donor_for(FL, delta, RelationshipTable()) == T1


def test_donor_contract_violations():
    delta = ModalityIndicator((1, 0, 1, 0))
    with pytest.raises(ValueError):
        donor_for(T1, delta)  # t1 is not missing


def test_donor_matches_brute_force_all_deltas_all_orders():
    for order in permutations(("I", "II", "III")):
        table = RelationshipTable(order)
        for delta in enumerate_scenarios():
            for m in delta.missing:
                assert donor_for(m, delta, table) == brute_force_donor(m, delta, order)


def test_donor_totality():
    for delta in enumerate_scenarios():
        for m in delta.missing:
            donor = donor_for(m, delta)
            assert delta[donor] == 1


def test_matching_property_partners_cover_other_three():
    for order in permutations(("I", "II", "III")):
        table = RelationshipTable(order)
        for m in MODALITIES:
            assert set(table.partners(m)) == set(MODALITIES) - {m}


def test_pairing_symmetry():
    table = RelationshipTable()
    for tier in ("I", "II", "III"):
        for m in MODALITIES:
            partner = table.partner(tier, m)
            assert table.partner(tier, partner) == m


def test_relationship_table_validation_and_parsing():
    assert RelationshipTable.from_string("iii,i,ii").order == ("III", "I", "II")
    assert str(RelationshipTable.from_string("I,II,III")) == "I,II,III"
    with pytest.raises(ValueError):
        RelationshipTable(("I", "I", "II"))
    with pytest.raises(ValueError):
        RelationshipTable.from_string("I,II")


def test_sample_perturbation_uniform():
    rng = np.random.default_rng(123)
    counts = {v: 0 for v in range(1, 16)}
    for _ in range(15000):
        d = sample_perturbation(rng)
        counts[d.value] += 1
    assert all(abs(c - 1000) <= 150 for c in counts.values()), counts
    assert 0 not in counts


def test_sample_perturbation_never_empty_and_deterministic():
    rng_a, rng_b = np.random.default_rng(7), np.random.default_rng(7)
    a = [sample_perturbation(rng_a).bits for _ in range(200)]
    b = [sample_perturbation(rng_b).bits for _ in range(200)]
    assert a == b
    assert all(any(bits) for bits in a)
