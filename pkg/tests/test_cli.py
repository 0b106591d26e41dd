import csv
import json
import socket
from pathlib import Path

import pytest

from wireimage import cli
from wireimage.cli import CliError, main

FIXTURE = Path(__file__).parent / "fixtures" / "analyze_fixture.jsonl"


def read_jsonl(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def test_list_parsers():
    assert cli.int_list("53, 443") == (53, 443)
    assert cli.int_list([1, "3"]) == (1, 3)
    assert cli.int_list(8) == (8,)
    assert cli.str_list("a, ,b") == ["a", "b"]
    for bad in ("", "1,x"):
        with pytest.raises(CliError):
            cli.int_list(bad)


def test_pair_counts():
    assert cli.pair_counts("5", [1, 3]) == {1: 5, 3: 5}
    assert cli.pair_counts("1:20,300:10", [1, 300]) == {1: 20, 300: 10}
    assert cli.pair_counts({"30": 2}, None) == {30: 2}
    assert cli.pair_counts(None, [1, 1500]) == {1: 20, 1500: 10}
    with pytest.raises(CliError, match="no count"):
        cli.pair_counts("1:20", [1, 3])
    with pytest.raises(CliError):
        cli.pair_counts("1:x", [1])


def test_tunnel_addressing_per_port():
    assert cli.port_subnet(443) == "10.1.187"
    cfgs = cli.tunnel_configs("192.0.2.1", "192.0.2.2", [53, 443], "server", mtu=1400)
    assert [(c.udp_port, c.virtual_if_name, c.tun_addr, c.interface_mtu) for c in cfgs] == \
        [(53, "wi53", "10.0.53.2/24", 1400), (443, "wi443", "10.1.187.2/24", 1400)]
    assert cli.tunnel_configs("192.0.2.1", "192.0.2.2", [443], "client")[0].tun_addr == "10.1.187.1/24"


def test_usage_errors(capsys):
    assert main([]) == cli.EXIT_CONFIG
    assert main(["campaign"]) == cli.EXIT_CONFIG  # --out is required
    assert main(["--version"]) == cli.EXIT_OK


def test_lab_unknown_scenario_lists_available(capsys):
    assert main(["lab", "nope"]) == cli.EXIT_CONFIG
    err = capsys.readouterr().err
    assert "unknown scenario nope" in err and "udp-blackhole" in err


def test_lab_list_and_run(tmp_path, capsys):
    assert main(["lab", "--list"]) == 0
    assert "nat-timeout" in capsys.readouterr().out
    out = tmp_path / "lab.jsonl"
    assert main(["lab", "udp-blackhole", "neutral-probe", "--out", str(out)]) == 0
    assert "[PASS] conn_bias" in capsys.readouterr().out
    recs = read_jsonl(out)
    assert recs[0]["kind"] == "manifest"
    reports = [r for r in recs if r["kind"] == "lab-report"]
    assert [r["scenario"] for r in reports] == ["udp-blackhole", "neutral-probe"]
    assert reports[0]["ground_truth"]["udp_block"] is True
    assert sum(r["kind"] == "pair" for r in recs) == 5
    assert all(r["scenario"] == "neutral-probe" for r in recs if r["kind"] == "probe")


def test_lab_failed_check_exit_code(capsys):
    assert main(["lab", "udp-blackhole", "--param", 'expect="open"']) == cli.EXIT_CHECKS_FAILED
    assert "[FAIL]" in capsys.readouterr().out
    assert main(["lab", "udp-blackhole", "--param", "oops"]) == cli.EXIT_CONFIG


def test_emulated_campaign_then_analyze(tmp_path, capsys):
    out = tmp_path / "run.jsonl"
    rc = main(["campaign", "10.0.1.1", "--emulate", "none", "--ports", "53,443", "--sizes-iw", "1,3",
               "--pairs", "2", "--delay", "0", "--out", str(out), "--source", "lab-client"])
    assert rc == 0
    summary = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert summary["pairs"] == 8 and summary["both_ok"] == 8
    recs = read_jsonl(out)
    assert recs[0]["kind"] == "manifest" and len(recs) == 9
    assert {(r["spec"]["port"], r["spec"]["size_iw"]) for r in recs[1:]} == \
        {(53, 1), (53, 3), (443, 1), (443, 3)}
    assert all(r["source"] == "lab-client" for r in recs[1:])

    adir = tmp_path / "an"
    assert main(["analyze", str(out), "--out-dir", str(adir)]) == 0
    assert "9 lines: 8 records, 8 pairs, 1 manifests, 0 malformed" in capsys.readouterr().err
    rows = list(csv.DictReader((adir / "ports.csv").open()))
    assert [(r["port"], r["tuples"], r["blocked"]) for r in rows] == [("53", "1", "0"), ("443", "1", "0")]


def test_emulated_blocked_campaign(tmp_path, capsys):
    prof = tmp_path / "block.profile"
    prof.write_text("udp_block = true  # drop everything\n")
    out = tmp_path / "run.jsonl"
    assert main(["campaign", "10.0.1.1", "--emulate", str(prof), "--ports", "443", "--sizes-iw", "1",
                 "--pairs", "3", "--delay", "0", "--connect-timeout", "2", "--out", str(out)]) == 0
    pairs = read_jsonl(out)[1:]
    assert all(p["tcp"]["success"] and not p["udp"]["success"] for p in pairs)
    assert {p["udp"]["failure_reason"] for p in pairs} == {"connect-timeout"}
    (tmp_path / "bad.profile").write_text("udp_blok = true\n")
    assert main(["campaign", "x", "--emulate", str(tmp_path / "bad.profile"), "--out", str(out)]) == 2
    assert main(["campaign", "x", "--emulate", str(tmp_path / "missing"), "--out", str(out)]) == 2


def test_live_campaign_needs_a_tunnel(tmp_path, capsys):
    assert main(["campaign", "192.0.2.1", "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    assert "--tunnel" in capsys.readouterr().err
    assert main(["campaign", "192.0.2.1", "192.0.2.2", "--tunnel", "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG


def test_config_file_defaults_and_overrides(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"campaign": {"ports": "53", "sizes-iw": "1", "pairs": 1, "delay": 0,
                                            "emulate": "none"}}))
    out = tmp_path / "o.jsonl"
    assert main(["campaign", "10.0.1.1", "--config", str(cfg), "--out", str(out)]) == 0
    assert len(read_jsonl(out)) == 2
    assert main(["campaign", "10.0.1.1", "--config", str(cfg), "--out", str(out), "--pairs", "3"]) == 0
    assert len(read_jsonl(out)) == 4
    cfg.write_text(json.dumps({"campaing": {}}))
    assert main(["lab", "--list", "--config", str(cfg)]) == cli.EXIT_CONFIG
    cfg.write_text(json.dumps({"lab": {"colour": 1}}))
    assert main(["lab", "--list", "--config", str(cfg)]) == cli.EXIT_CONFIG
    assert "colour" in capsys.readouterr().err


def test_analyze_missing_file(tmp_path, capsys):
    assert main(["analyze", str(tmp_path / "nope.jsonl"), "--out-dir", str(tmp_path)]) == cli.EXIT_CONFIG
    assert "no such result file" in capsys.readouterr().err


def test_analyze_empty_input(tmp_path, capsys):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert main(["analyze", str(empty), "--out-dir", str(tmp_path / "a")]) == 0
    assert (tmp_path / "a" / "matrix.csv").read_text() == ",".join(cli.MATRIX_COLUMNS) + "\n"
    assert json.loads((tmp_path / "a" / "cdf.json").read_text())["rows"] == []
    grouped = json.loads((tmp_path / "a" / "grouped.json").read_text())["rows"]
    assert [g["n_flows"] for g in grouped] == [0, 0, 0, 0]


def test_analyze_counts_malformed_lines(tmp_path, capsys):
    assert main(["analyze", str(FIXTURE), "--out-dir", str(tmp_path)]) == 0
    assert "16 lines: 14 records, 11 pairs, 1 manifests, 1 malformed (skipped)" in capsys.readouterr().err
    probes = list(csv.DictReader((tmp_path / "probes.csv").open()))
    assert [(p["protocol"], p["packet_size"], p["outcome"], p["count"]) for p in probes] == \
        [("icmp", "1454", "timeout", "1"), ("udp", "72", "target-response", "2")]
    assert main(["analyze", str(FIXTURE), "--out-dir", str(tmp_path), "--pcap", "x.pcap"]) == 2


def test_analyze_fills_loss_from_sender_capture(tmp_path, capsys):
    from test_capture import CLI, SRV, _transfer
    from wireimage.capture import read_pcap, write_pcap
    from wireimage.flowpair import FlowResult, FlowSpec, make_pair
    ok = FlowResult.completed(30000, 0.0, 1.0, 20.0)
    pair = make_pair(FlowSpec(SRV, 443, 1), ok, ok, src_port=40000)
    write_pcap(tmp_path / "srv.pcap", _transfer(30, [0, 1, 2]) + _transfer(30, [5], tunneled=True))
    (tmp_path / "run.jsonl").write_text(json.dumps(pair.to_dict()) + "\n")
    assert main(["analyze", str(tmp_path / "run.jsonl"), "--out-dir", str(tmp_path / "a"),
                 "--pcap", str(tmp_path / "srv.pcap"), "--pcap-addr", SRV]) == 0
    filled = cli.fill_loss([pair], read_pcap(tmp_path / "srv.pcap"), SRV)[0]
    assert filled.tcp.loss_pct == 10.0 and filled.udp.loss_pct == 100.0 / 30
    assert cli.fill_loss([pair], read_pcap(tmp_path / "srv.pcap"), CLI)[0].tcp.loss_pct is None


def test_emulated_probe_once(tmp_path, capsys):
    out = tmp_path / "p.jsonl"
    assert main(["probe", "192.0.2.10:8443", "--emulate", "none", "--once", "--out", str(out)]) == 0
    recs = read_jsonl(out)[1:]
    # one record per probe packet, three packets per target and protocol
    assert [(r["protocol"], r["port"], r["initial_ttl"]) for r in recs] == \
        [("udp", 8443, 199)] * 3 + [("tcp", 8443, 199)] * 3 + [("icmp", None, 199)] * 3
    assert {r["outcome"] for r in recs} == {"target-response"}


def test_emulated_probe_sweep_flags_udp_block(tmp_path, capsys):
    prof = tmp_path / "b.profile"
    prof.write_text("udp_block = true\n")
    out = tmp_path / "s.jsonl"
    assert main(["probe", "192.0.2.10", "--emulate", str(prof), "--sizes", "72,572,1454",
                 "--out", str(out)]) == 0
    err = capsys.readouterr().err
    assert err.count("UDP-FAIL/ICMP-PASS") == 3
    sweeps = [r for r in read_jsonl(out) if r["kind"] == "mtu-sweep"]
    assert [(s["size"], s["udp_fail_icmp_pass"]) for s in sweeps] == [(72, True), (572, True), (1454, True)]


def test_serve_reports_port_in_use(capsys):
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        s.listen()
        port = s.getsockname()[1]
        assert main(["serve", "--listen", "127.0.0.1", "--ports", str(port), "--duration", "0.2"]) == \
            cli.EXIT_RUNTIME
    assert str(port) in capsys.readouterr().err


def test_serve_for_a_while(capsys):
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    assert main(["serve", "--listen", "127.0.0.1", "--ports", str(port), "--duration", "0.2"]) == 0
    stats = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert stats["server"]["connections"] == 0
