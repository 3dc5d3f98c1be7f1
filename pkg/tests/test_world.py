import copy

import pytest

from shelfstock.scenarios import build_mock_supermarket
from shelfstock.world import (
    ScenarioError,
    dumps_scenario,
    load_scenario,
    query_planogram,
    save_scenario,
    scenario_from_dict,
)

from conftest import tiny_scenario_dict


def test_minimal_scenario_loads(tiny_scenario):
    assert tiny_scenario.name == "tiny"
    assert len(tiny_scenario.shelves) == 1
    assert len(tiny_scenario.products) == 1
    assert len(tiny_scenario.cart.items) == 1


def test_roundtrip_is_byte_identical(tiny_scenario, tmp_path):
    p1 = tmp_path / "a.json"
    p2 = tmp_path / "b.json"
    save_scenario(tiny_scenario, p1)
    scn2 = load_scenario(p1)
    save_scenario(scn2, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert scn2 == load_scenario(p2)


def test_two_loads_are_equal(tiny_scenario, tmp_path):
    p = tmp_path / "s.json"
    save_scenario(tiny_scenario, p)
    assert load_scenario(p) == load_scenario(p)


def test_overlapping_slots_name_both_gtins():
    d = tiny_scenario_dict()
    d["products"]["00000000000024"] = dict(d["products"]["00000000000017"])
    d["planogram"]["00000000000024"] = {"shelf": "S", "level": 0, "slot": [0.3, 0.8]}
    with pytest.raises(ScenarioError) as exc:
        scenario_from_dict(d)
    msg = str(exc.value)
    assert "00000000000017" in msg and "00000000000024" in msg


def test_disjoint_slots_on_same_level_ok():
    d = tiny_scenario_dict()
    d["products"]["00000000000024"] = dict(d["products"]["00000000000017"])
    d["planogram"]["00000000000024"] = {"shelf": "S", "level": 0, "slot": [0.5, 0.9]}
    scn = scenario_from_dict(d)
    a = query_planogram(scn.planogram, "00000000000017")
    b = query_planogram(scn.planogram, "00000000000024")
    assert (a.x_lo, a.x_hi) == (0.0, 0.5)
    assert (b.x_lo, b.x_hi) == (0.5, 0.9)


def test_query_planogram_unknown_gtin(tiny_scenario):
    with pytest.raises(LookupError):
        query_planogram(tiny_scenario.planogram, "99999999999999")


@pytest.mark.parametrize(
    "mutate, needle",
    [
        (lambda d: d["products"].__setitem__("bad", {"width": 0.1, "depth": 0.1, "height": 0.1, "shape": "box"}), "gtin"),
        (lambda d: d["products"]["00000000000017"].__setitem__("width", -1.0), "dimensions"),
        (lambda d: d["markers"]["1"].__setitem__("quaternion", [0.0, 0.0, 0.0, 0.9]), "unit-norm"),
        (lambda d: d["shelves"][0].__setitem__("level_heights", [0.6, 0.2]), "increasing"),
        (lambda d: d["planogram"]["00000000000017"].__setitem__("slot", [0.0, 1.5]), "width"),
    ],
)
def test_invariant_violations(mutate, needle):
    d = tiny_scenario_dict()
    mutate(d)
    with pytest.raises(ScenarioError) as exc:
        scenario_from_dict(d)
    assert needle in str(exc.value)


def test_overlapping_cart_items_rejected():
    d = tiny_scenario_dict()
    d["cart"]["items"].append({"gtin": "00000000000017", "x": 0.01, "y": -0.2, "yaw": 0.0})
    with pytest.raises(ScenarioError) as exc:
        scenario_from_dict(d)
    assert "overlap" in str(exc.value)


def test_missing_file():
    with pytest.raises(ScenarioError):
        load_scenario("/nonexistent/never.json")


def test_parse_error_reports_location(tmp_path):
    p = tmp_path / "broken.json"
    p.write_text('{"name": "x",}')
    with pytest.raises(ScenarioError) as exc:
        load_scenario(p)
    assert "1:" in str(exc.value)


def test_bundled_mock_supermarket_matches_builder(mock_dict):
    from shelfstock.scenarios import resolve_scenario

    bundled = resolve_scenario("mock_supermarket")
    assert bundled == scenario_from_dict(mock_dict)
    # topology: two aisles of shelving, a cart, a dock
    assert len(bundled.shelves) == 2
    assert bundled.cart.size[0] > 0
    assert bundled.dock.marker_id in bundled.markers
    assert sum(q for _, q in bundled.experiments["reliability"]["tasks"]) == 724


def test_mock_supermarket_roundtrip(tmp_path):
    scn = build_mock_supermarket()
    p = tmp_path / "m.json"
    save_scenario(scn, p)
    assert dumps_scenario(load_scenario(p)) == dumps_scenario(scn)


def test_scenario_dict_mutation_does_not_leak(mock_dict):
    d2 = copy.deepcopy(mock_dict)
    s1 = scenario_from_dict(mock_dict)
    s2 = scenario_from_dict(d2)
    assert s1 == s2
