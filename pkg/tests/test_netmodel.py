import json
from dataclasses import replace

import pytest

from pvhc import netmodel
from pvhc.netmodel import Branch, Network, load_network, parse_matpower_case, validate_network

TWO_BUS = """
function mpc = two
mpc.baseMVA = 1;
mpc.bus = [
1 3 0 0 0 0 1 1 0 4.16 1 1.1 0.9;
2 1 0.1 0.05 0 0 1 1 0 4.16 1 1.1 0.9;
];
mpc.gen = [1 0 0 1 -1 1.03 1 1 1 0];
mpc.branch = [1 2 0 0.1 0 0 0 0 0 0 1 -360 360];
"""


def test_case33_summary():
    net = load_network("case33")
    assert net.n_bus == 33 and len(net.branches) == 32
    assert net.peak_load_mw == pytest.approx(3.715, abs=1e-9)
    assert net.peak_load_mvar == pytest.approx(2.3, abs=1e-9)
    assert validate_network(net) == []


def test_case123_summary():
    net = load_network("case123")
    assert net.peak_load_mw == pytest.approx(3.51, abs=1e-6)
    assert {b.base_kv for b in net.buses} == {4.16}
    assert validate_network(net) == []


def test_two_bus_minimal():
    net = parse_matpower_case(TWO_BUS)
    assert net.n_bus == 2 and len(net.branches) == 1
    assert net.slack_voltage == 1.03


def test_two_slack_buses_diagnosed():
    net = parse_matpower_case(TWO_BUS)
    bad = replace(net, buses=tuple(replace(b, kind="slack", v_set=1.0) for b in net.buses))
    diags = validate_network(bad)
    assert [d.invariant for d in diags] == ["multiple slack buses"]


def test_dangling_branch_names_bus():
    net = parse_matpower_case(TWO_BUS)
    bad = replace(net, branches=net.branches + (Branch(2, 99, 0.01, 0.01),))
    diags = validate_network(bad)
    assert len(diags) == 1 and "99" in str(diags[0])


def test_json_round_trip(tmp_path):
    net = load_network("case33")
    again = netmodel.network_from_dict(json.loads(json.dumps(netmodel.network_to_dict(net))))
    assert again == net
    p = tmp_path / "net.json"
    p.write_text(json.dumps(netmodel.network_to_dict(net)))
    assert load_network(p) == net


def test_per_unit_conversion():
    net = load_network("case33")
    for b, ppu in zip(net.buses, net.p_load_pu):
        assert ppu * net.base_mva == pytest.approx(b.p_load, rel=1e-12, abs=0)


def test_pcc_override():
    assert load_network("case33", pcc_voltage=1.0).slack_voltage == 1.0


def test_syntax_error_location():
    with pytest.raises(netmodel.CaseSyntaxError) as exc:
        parse_matpower_case(TWO_BUS.replace("0.1 0.05", "0.1 abc"))
    assert exc.value.line > 0


def test_invalid_network_rejected():
    with pytest.raises(netmodel.NetworkError):
        parse_matpower_case(TWO_BUS.replace("1 2 0 0.1", "1 7 0 0.1"))
