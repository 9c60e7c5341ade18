import json
import random

import pytest

from teeaccel import adversary as adv
from teeaccel import attestation as att
from teeaccel import cli
from teeaccel import device_sim as ds
from teeaccel import memory_protection as mp
from teeaccel.memory_protection import Mode


def run(capsys, *argv):
    code = cli.main(list(argv))
    return code, capsys.readouterr().out


def run_json(capsys, *argv):
    code, out = run(capsys, *argv, "--json")
    return code, json.loads(out)


def test_handshake_honest(capsys):
    code, out = run(capsys, "handshake", "--seed", "1")
    assert code == 0
    lines = out.splitlines()
    assert lines[0].split()[-1] == lines[1].split()[-1] and lines[2] == "match"


def test_handshake_prints_fingerprints_not_keys(capsys):
    code, doc = run_json(capsys, "handshake", "--seed", "2")
    assert code == 0 and doc["ok"]
    assert doc["host_fingerprint"] == doc["device_fingerprint"]
    result = att.run_handshake(*_seeded_parties(2))
    assert result.host_key.material.hex() not in json.dumps(doc)


def _seeded_parties(seed):
    rng = random.Random(seed)
    registry = att.CaRegistry(rng)
    identity = att.DeviceIdentity.manufacture(b"accel-0001", rng)
    registry.register(identity)
    return identity, registry, rng


def test_handshake_mitm(capsys):
    code, doc = run_json(capsys, "handshake", "--seed", "3", "--inject", "mitm")
    assert code == 1 and doc["error"] == "BadSignature"
    code, out = run(capsys, "handshake", "--inject", "mitm")
    assert code == 1 and "BadSignature" in out


def test_handshake_trace_reverifies_offline(capsys):
    code, doc = run_json(capsys, "handshake", "--seed", "4", "--trace")
    assert code == 0 and doc["transcript_verifies"]
    ca = bytes.fromhex(doc["ca_public_key"])
    assert att.verify_transcript(doc["transcript"], ca)
    tampered = json.loads(json.dumps(doc["transcript"]))
    msg2 = next(m for m in tampered if m["type"] == "Msg2")
    msg2["g_a"] = hex(int(msg2["g_a"], 16) ^ 1)
    assert not att.verify_transcript(tampered, ca)


def test_bench_off_deterministic(capsys):
    _, a = run_json(capsys, "bench", "--benchmark", "conv5", "--mode", "off", "--seed", "9")
    _, b = run_json(capsys, "bench", "--benchmark", "conv5", "--mode", "off", "--seed", "9")
    assert a == b
    assert a["schema_version"] == 1 and a["rows"][0]["full_cycles"] is None


@pytest.mark.parametrize("name,lo,hi", [("fc1", 3.8, 7.0), ("conv4", 1.0, 1.5)])
def test_bench_examples(capsys, name, lo, hi):
    code, doc = run_json(capsys, "bench", "--benchmark", name, "--mode", "all", "--preset", "table1")
    assert code == 0
    row = doc["rows"][0]
    assert lo <= row["full_slowdown"] <= hi
    assert all(row["verified"].values()) and set(row["verified"]) == {"off", "ctr", "full"}


def test_slowdowns_are_ratios_to_three_places(capsys):
    code, doc = run_json(capsys, "bench", "--mode", "all", "--no-verify", "--preset", "fast")
    assert code == 0 and len(doc["rows"]) == 4
    for row in doc["rows"]:
        assert row["full_slowdown"] == round(row["full_cycles"] / row["baseline_cycles"], 3)
        assert row["ctr_slowdown"] == round(row["ctr_cycles"] / row["baseline_cycles"], 3)
        assert row["full_slowdown"] >= row["ctr_slowdown"] >= 1.0


def test_bench_text_table(capsys):
    code, out = run(capsys, "bench", "--benchmark", "fc2", "--mode", "all", "--no-verify")
    assert code == 0 and "fc2" in out and "full x" in out.splitlines()[1]


def test_bench_custom_layer_file(capsys, tmp_path):
    path = tmp_path / "layers.json"
    path.write_text(json.dumps({"layers": {"tiny": {"kind": "fc", "n_in": 64, "n_out": 32}}}))
    code, doc = run_json(capsys, "bench", "--benchmark", str(path), "--mode", "full")
    assert code == 0 and doc["rows"][0]["benchmark"] == "tiny"


def test_bench_preset_env(capsys, tmp_path, monkeypatch):
    doc = ds.load_preset("table1").to_json()
    doc["name"] = "halfdram"
    doc["dram"]["bytes_per_cycle"] = "7/2"
    (tmp_path / "halfdram.json").write_text(json.dumps(doc))
    monkeypatch.setenv(ds.PRESET_ENV, str(tmp_path))
    _, slow = run_json(capsys, "bench", "--benchmark", "fc2", "--mode", "off", "--no-verify", "--preset", "halfdram")
    _, base = run_json(capsys, "bench", "--benchmark", "fc2", "--mode", "off", "--no-verify")
    assert slow["preset"] == "halfdram"
    assert slow["rows"][0]["baseline_cycles"] > base["rows"][0]["baseline_cycles"]


def test_usage_errors_exit_2(capsys):
    for argv in (["bench", "--benchmark", "alexnet"], ["bench", "--preset", "nope"],
                 ["attack", "--scenario", "rowhammer"], ["attack"]):
        with pytest.raises(SystemExit) as exc:
            cli.main(argv)
        assert exc.value.code == 2


@pytest.mark.parametrize("scenario,mode,verdict", [
    ("register_replay", "full", "Detected"),
    ("eavesdrop", "full", "Undetected"),
    ("bitflip_dram", "off", "Undetected"),
])
def test_attack_examples(capsys, scenario, mode, verdict):
    code, doc = run_json(capsys, "attack", "--scenario", scenario, "--mode", mode)
    assert code == 0
    (outcome,) = doc["outcomes"]
    assert outcome["verdict"] == verdict and not (mode == "full" and outcome["leaked"])


def test_attack_all(capsys):
    code, doc = run_json(capsys, "attack", "--scenario", "all", "--mode", "all")
    assert code == 0 and len(doc["outcomes"]) == len(adv.SCENARIOS) * 3


def test_unexpected_verdict_exits_3(capsys, monkeypatch):
    flipped = {**adv.EXPECTED, "bitflip_dram": {**adv.EXPECTED["bitflip_dram"], Mode.FULL: adv.Verdict.UNDETECTED}}
    monkeypatch.setattr(adv, "EXPECTED", flipped)
    code, out = run(capsys, "attack", "--scenario", "bitflip_dram")
    assert code == 3 and "UNEXPECTED" in out


def test_attack_dump(capsys, tmp_path):
    code, _ = run(capsys, "attack", "--scenario", "piece_splice", "--mode", "full", "--dump", str(tmp_path))
    assert code == 0
    doc = json.loads((tmp_path / "piece_splice-full" / "outcome.json").read_text())
    assert doc["verdict"] == "Detected"


def test_bench_integrity_failure_exits_2(capsys, monkeypatch):
    def boom(*a, **k):
        raise mp.IntegrityError(1, 0)
    monkeypatch.setattr(cli, "bench_row", boom)
    assert cli.main(["bench", "--benchmark", "fc2"]) == 2
