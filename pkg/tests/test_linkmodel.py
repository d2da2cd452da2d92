import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from wbcluster.flow import Protocol
from wbcluster.linkmodel import (WLAN_BASELINE, LinkRates, RadioParams, aggregate_throughput, configured_phy,
                                 effective_goodput, iperf_generator, mac_rate, window_limited_rate)
from wbcluster.sim_engine import MS, SECOND

fractions = st.floats(0.01, 1.0)


def test_mac_rate_examples():
    assert mac_rate(1000, 0.5, 0.8) == pytest.approx(400.0)
    assert mac_rate(866.7, 1.0, 1.0) == pytest.approx(866.7)
    assert mac_rate(1000, 0.25, 0.5) == pytest.approx(125.0)


@pytest.mark.parametrize("args", [(0, 0.5, 0.8), (1000, 0, 0.8), (1000, 0.5, 1.2), (-5, 0.5, 0.5)])
def test_mac_rate_rejects_out_of_range(args):
    with pytest.raises(ValueError):
        mac_rate(*args)


def test_default_link_goodput():
    link = LinkRates.symmetric()
    assert link.mac_tx == link.mac_rx == pytest.approx(400.0)
    assert effective_goodput(link, RadioParams().per) == pytest.approx(398.0)
    assert effective_goodput(link, 0.0) == pytest.approx(400.0)
    assert effective_goodput(link, 1.0) == 0.0
    with pytest.raises(ValueError):
        effective_goodput(link, 1.5)


def test_radio_defaults():
    r = RadioParams()
    assert (r.channel_width_mhz, r.chains, r.streams, r.mcs_index, r.modulation) == (80, 2, 4, 8, "256QAM")
    assert r.tx_power_dbm == 30.0 and r.snr_db == 36.0 and r.mtu == 1472
    assert WLAN_BASELINE.tx_power_dbm == 20.0
    assert configured_phy(1000.0)(r) == 1000.0
    with pytest.raises(ValueError):
        RadioParams(per=2.0)


def test_window_limit():
    assert window_limited_rate(65536, 10 * MS) == pytest.approx(52.4288)
    assert window_limited_rate(65536, 2 * MS) == pytest.approx(262.144)
    with pytest.raises(ValueError):
        window_limited_rate(65536, 0)


def test_iperf_generator_distinct_tcp_pairs():
    flows = iperf_generator(50, 65536, 60 * SECOND, 15 * SECOND, rng=random.Random(1))
    assert len(flows) == 50
    assert len({(f.key.src_ip, f.key.dst_ip) for f in flows}) == 50
    assert all(f.key.protocol is Protocol.TCP and f.key.dst_port == 5001 for f in flows)
    assert all(f.start == 15 * SECOND and f.stop == 75 * SECOND for f in flows)
    assert flows == iperf_generator(50, 65536, 60 * SECOND, 15 * SECOND, rng=random.Random(1))
    assert iperf_generator(50, duration=0) == []


def test_aggregate_throughput():
    g = {1: 398.0, 2: 398.0, 3: 398.0, 4: 398.0}
    assert aggregate_throughput(g, [1, 2, 3, 4]) == pytest.approx(1592.0)
    assert aggregate_throughput(g, [1, 2, 4]) == pytest.approx(1194.0)
    assert aggregate_throughput(g, [1, 2], {1: 100.0, 2: 1000.0}) == pytest.approx(498.0)
    assert aggregate_throughput(g, []) == 0.0


@given(st.floats(1, 5000), fractions, fractions, st.floats(1, 5000))
def test_mac_rate_monotone_in_phy(phy, cycle, eff, extra):
    assert mac_rate(phy + extra, cycle, eff) >= mac_rate(phy, cycle, eff)
    assert mac_rate(phy, cycle, eff) <= phy


@given(st.floats(0, 1), st.floats(0, 1))
def test_goodput_falls_with_per(a, b):
    link = LinkRates.symmetric()
    lo, hi = sorted((a, b))
    assert effective_goodput(link, hi) <= effective_goodput(link, lo)
