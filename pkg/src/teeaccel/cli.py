"""teeaccel command line: handshake demo, protection-mode benchmarks, attack scenarios.

Exit codes: 0 success, 1 protocol failure, 2 integrity failure or output
mismatch in ``bench``, 3 unexpected attack verdict.
"""

from __future__ import annotations

import argparse
import json
import random
import sys
from pathlib import Path

from teeaccel import adversary
from teeaccel import attestation as att
from teeaccel import crypto_core as cc
from teeaccel import memory_protection as mp
from teeaccel.device_sim import load_preset
from teeaccel.memory_protection import Mode
from teeaccel.report import ComparisonTable, bench_row
from teeaccel.workloads import BENCHMARKS, load_suite

SCHEMA_VERSION = 1
EXIT_OK, EXIT_PROTOCOL, EXIT_INTEGRITY, EXIT_VERDICT = 0, 1, 2, 3
MODES = ("off", "ctr", "full")


class UsageError(Exception):
    pass


def _emit(args, doc: dict, text: str) -> None:
    print(json.dumps(doc, indent=2) if args.json else text)


def _modes(value: str) -> list[str]:
    return list(MODES) if value == "all" else [value]


# -- handshake -----------------------------------------------------------------------

def cmd_handshake(args) -> int:
    rng = random.Random(args.seed) if args.seed is not None else cc.system_rng()
    registry = att.CaRegistry(rng)
    identity = att.DeviceIdentity.manufacture(b"accel-0001", rng)
    registry.register(identity)
    tap = adversary.mitm_rewrite(cc.MODP_2048, random.Random(rng.random())) if args.inject == "mitm" else None
    try:
        result = att.run_handshake(identity, registry, rng, channel_tap=tap)
    except att.ProtocolError as exc:
        doc = {"schema_version": SCHEMA_VERSION, "ok": False, "error": type(exc).__name__, "detail": str(exc)}
        _emit(args, doc, f"handshake failed: {type(exc).__name__}: {exc}")
        return EXIT_PROTOCOL

    host_fp, dev_fp = result.host_key.fingerprint(), result.device_key.fingerprint()
    doc = {"schema_version": SCHEMA_VERSION, "ok": host_fp == dev_fp,
           "host_fingerprint": host_fp, "device_fingerprint": dev_fp,
           "ca_public_key": registry.public_key.hex()}
    lines = [f"host   key fingerprint {host_fp}", f"device key fingerprint {dev_fp}",
             "match" if host_fp == dev_fp else "MISMATCH"]
    if args.trace:
        doc["transcript"] = result.transcript.to_json()
        doc["transcript_verifies"] = att.verify_transcript(doc["transcript"], registry.public_key)
        lines.append(json.dumps(doc["transcript"], indent=2))
        lines.append(f"transcript verifies offline: {doc['transcript_verifies']}")
    _emit(args, doc, "\n".join(lines))
    return EXIT_OK if doc["ok"] else EXIT_PROTOCOL


# -- bench ------------------------------------------------------------------------------

def _benchmarks(value: str):
    suite = load_suite()
    if value == "all":
        return [(name, suite[name]) for name in BENCHMARKS]
    if value in suite:
        return [(value, suite[value])]
    path = Path(value)
    if path.is_file():
        return list(load_suite(path).items())
    raise UsageError(f"unknown benchmark {value!r} (choose {', '.join(BENCHMARKS)}, all, or a JSON file)")


def cmd_bench(args) -> int:
    params = load_preset(args.preset)
    table = ComparisonTable(params.name or args.preset, args.seed)
    try:
        for name, layer in _benchmarks(args.benchmark):
            table.rows.append(bench_row(name, layer, params, _modes(args.mode), args.seed,
                                        functional=not args.no_verify))
    except mp.IntegrityError as exc:
        print(f"integrity failure: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    _emit(args, table.to_json(), table.render())
    ok = all(all(r.verified.values()) for r in table.rows)
    if not ok:
        print("output mismatch against the reference execution", file=sys.stderr)
    return EXIT_OK if ok else EXIT_INTEGRITY


# -- attack -------------------------------------------------------------------------------

def cmd_attack(args) -> int:
    names = list(adversary.SCENARIOS) if args.scenario == "all" else [args.scenario]
    if not set(names) <= set(adversary.SCENARIOS):
        raise UsageError(f"unknown scenario {args.scenario!r}")
    outcomes = []
    for name in names:
        for mode in _modes(args.mode):
            dump = Path(args.dump) / f"{name}-{mode}" if args.dump else None
            outcomes.append(adversary.run_scenario(name, adversary.scenario_config(mode, args.seed), dump_dir=dump))
    doc = {"schema_version": SCHEMA_VERSION, "outcomes": [o.to_json() for o in outcomes]}
    text = "\n".join(
        f"{o.scenario:<20} {o.mode:<5} {o.verdict.value:<10} "
        f"{'ok' if o.as_expected else 'UNEXPECTED (want ' + o.expected.value + ')'}  {o.detail}"
        for o in outcomes
    )
    _emit(args, doc, text)
    return EXIT_OK if all(o.as_expected for o in outcomes) else EXIT_VERDICT


# -- parser -------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="teeaccel", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("handshake", help="attest a simulated device and derive a session key")
    p.add_argument("--trace", action="store_true", help="emit the message transcript and re-verify it")
    p.add_argument("--inject", choices=["mitm"], help="substitute the DH offer in flight")
    p.add_argument("--seed", type=int, default=None, help="deterministic run (default: OS randomness)")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_handshake)

    p = sub.add_parser("bench", help="cycle counts and functional check per protection mode")
    p.add_argument("--benchmark", default="all", help=f"{'|'.join(BENCHMARKS)}|all|path to a layer JSON file")
    p.add_argument("--mode", default="all", choices=[*MODES, "all"])
    p.add_argument("--preset", default="table1", help="preset name or JSON path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-verify", action="store_true", help="skip the functional end-to-end check")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("attack", help="run an adversary scenario")
    p.add_argument("--scenario", required=True, help="|".join([*adversary.SCENARIOS, "all"]))
    p.add_argument("--mode", default="full", choices=[*MODES, "all"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dump", metavar="DIR", help="write DRAM image, MMIO trace and outcome per run")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_attack)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, FileNotFoundError) as exc:
        parser.error(str(exc))


if __name__ == "__main__":
    sys.exit(main())
