"""Executable threat model: adversary hooks and named attack scenarios.

The adversary sits on every untrusted channel of a :class:`TrustedPlatform`:
the DRAM bus (read, log, poke any byte), the driver's MMIO writes (observe,
rewrite, reorder, replay) and the attestation links (intercept, substitute).
It never touches device-internal or enclave state; scenarios only use the
objects an untrusted OS, driver or DMA-capable device could reach.

Leak detection is by planted sentinel: a high-entropy 64-byte marker is
placed in the layer input and every adversary-visible byte string is scanned
for it.  Tampering is detected at first consumption of the tampered piece or
register block, which is the point at which the typed error surfaces.
"""

from __future__ import annotations

import enum
import json
import random
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from teeaccel import attestation as att
from teeaccel import crypto_core as cc
from teeaccel import memory_protection as mp
from teeaccel import register_protection as rp
from teeaccel.device_sim import CoreParams, ScheduleError
from teeaccel.memory_protection import Mode
from teeaccel.runtime import KernelError, SystemConfig, TrustedPlatform, reference_execute
from teeaccel.workloads import Fc, choose_tiling, tile_schedule

SCHEMA_VERSION = 1
SENTINEL_BYTES = 64
SCENARIO_PIECE_BYTES = 256
SCENARIO_DRAM_BYTES = 1 << 20
SCENARIO_LAYER = Fc(n_in=512, n_out=64, batch=1, name="victim")

# errors raised by a protection check (as opposed to a device fault on garbage)
DETECTING_ERRORS = (mp.IntegrityError, rp.MacError, rp.ReplayError, att.ProtocolError)


class UnknownScenario(KeyError):
    pass


class Verdict(str, enum.Enum):
    DETECTED = "Detected"
    UNDETECTED = "Undetected"
    LEAKED = "Leaked"


@dataclass
class AttackOutcome:
    scenario: str
    mode: str
    verdict: Verdict
    detail: str
    leaked: bool = False
    output_correct: bool | None = None

    @property
    def expected(self) -> Verdict:
        return EXPECTED[self.scenario][Mode(self.mode)]

    @property
    def as_expected(self) -> bool:
        return self.verdict is self.expected

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "scenario": self.scenario,
            "mode": self.mode,
            "verdict": self.verdict.value,
            "expected": self.expected.value,
            "detail": self.detail,
            "leaked": self.leaked,
            "output_correct": self.output_correct,
        }


# -- hooks ---------------------------------------------------------------------

@dataclass
class AdversaryHooks:
    """Everything the adversary sees or controls, and nothing else.

    ``mmio_rewrite(writes) -> writes`` and ``channel_rewrite(label, msg) -> msg``
    are optional active components; the passive logs are always kept.
    """

    mmio_rewrite: object = None
    channel_rewrite: object = None
    dram_log: list[mp.Transfer] = field(default_factory=list)
    mmio_log: list[list[tuple[int, int]]] = field(default_factory=list)
    channel_log: list[tuple[str, bytes]] = field(default_factory=list)
    snapshots: dict[str, bytes] = field(default_factory=dict)

    def dram_tap(self, transfer: mp.Transfer) -> None:
        self.dram_log.append(transfer)

    def mmio_tap(self, writes: list[tuple[int, int]]) -> list[tuple[int, int]]:
        self.mmio_log.append(list(writes))
        return self.mmio_rewrite(writes) if self.mmio_rewrite else writes

    def channel_tap(self, label: str, msg):
        self.channel_log.append((label, msg.encode()))
        return self.channel_rewrite(label, msg) if self.channel_rewrite else msg

    def attach(self, platform: TrustedPlatform) -> None:
        platform.dram.taps.append(self.dram_tap)
        platform.driver.tap = self.mmio_tap
        platform.channel_tap = self.channel_tap

    # raw DRAM access (a malicious DMA device)
    def snapshot(self, dram: mp.UntrustedDram, label: str, addr: int, n: int) -> bytes:
        self.snapshots[label] = bytes(dram.raw[addr:addr + n])
        return self.snapshots[label]

    def restore(self, dram: mp.UntrustedDram, label: str, addr: int) -> None:
        data = self.snapshots[label]
        dram.raw[addr:addr + len(data)] = data

    def windows(self, dram: mp.UntrustedDram) -> list[bytes]:
        """All adversary-visible byte strings: bus logs, MMIO words, messages, final DRAM."""
        out = [t.data for t in self.dram_log]
        out += [b"".join(v.to_bytes(4, "big") for _, v in writes) for writes in self.mmio_log]
        out += [wire for _, wire in self.channel_log]
        out += list(self.snapshots.values())
        out.append(bytes(dram.raw[:dram.used]))
        return out


def leaks(marker: bytes, windows) -> bool:
    return any(marker in w for w in windows)


# -- victim workload -----------------------------------------------------------------

@dataclass
class Victim:
    layer: Fc
    inputs: np.ndarray
    weights: np.ndarray
    sentinel: bytes
    expected: np.ndarray


def make_victim(payload_seed: int, piece_size: int = SCENARIO_PIECE_BYTES) -> Victim:
    """Random FC operands with a 64-byte sentinel planted in the input vector."""
    layer = SCENARIO_LAYER
    gen = np.random.default_rng(payload_seed)
    sentinel = gen.bytes(SENTINEL_BYTES)
    x = gen.integers(-128, 128, size=(layer.batch, layer.n_in), dtype=np.int8)
    at = int(gen.integers(0, layer.n_in - SENTINEL_BYTES + 1))
    x[0, at:at + SENTINEL_BYTES] = np.frombuffer(sentinel, np.int8)
    w = gen.integers(-128, 128, size=(layer.n_out, layer.n_in), dtype=np.int8)
    core = CoreParams()
    tiling = choose_tiling(layer, core)
    ref = reference_execute(layer, tile_schedule(layer, core, piece_size, tiling), x, w, tiling)
    return Victim(layer, x, w, sentinel, ref)


# -- scenario plumbing -------------------------------------------------------------------

@dataclass
class Run:
    platform: TrustedPlatform
    hooks: AdversaryHooks
    victim: Victim
    rng: random.Random
    payload_seed: int = 0

    @property
    def mode(self) -> Mode:
        return self.platform.config.mode

    @property
    def dram(self) -> mp.UntrustedDram:
        return self.platform.dram

    def establish(self) -> None:
        if self.mode is not Mode.OFF:
            self.platform.establish()

    def stage(self):
        host = self.platform.host
        return host.stage(self.victim.layer, self.victim.inputs, self.victim.weights)

    def check_output(self, out: np.ndarray) -> bool:
        return bool(np.array_equal(out, self.victim.expected))


def _region_bytes(region: mp.ProtectedRegion) -> tuple[int, int]:
    return region.base_addr, region.length


def _meta_addr(region: mp.ProtectedRegion, i: int) -> int:
    return region.meta_addr + i * mp.META_ENTRY_BYTES


def _swap_piece(dram: mp.UntrustedDram, region: mp.ProtectedRegion, src: int, dst: int) -> None:
    """Copy ciphertext (and metadata, when present) of piece ``src`` over ``dst``."""
    slo, shi = region.piece_bounds(src)
    dlo, dhi = region.piece_bounds(dst)
    n = min(shi - slo, dhi - dlo)
    dram.raw[region.base_addr + dlo:region.base_addr + dlo + n] = dram.raw[region.base_addr + slo:region.base_addr + slo + n]
    if region.meta_addr is not None:
        e = mp.META_ENTRY_BYTES
        dram.raw[_meta_addr(region, dst):_meta_addr(region, dst) + e] = dram.raw[_meta_addr(region, src):_meta_addr(region, src) + e]


def _execute(run: Run, record) -> bool:
    host = run.platform.host
    host.launch(record)
    return run.check_output(host.collect(record))


# -- scenarios ---------------------------------------------------------------------------

def _baseline(run: Run) -> tuple[str, bool]:
    run.establish()
    out = run.platform.run_layer(run.victim.layer, run.victim.inputs, run.victim.weights)
    return "honest run", run.check_output(out)


def _eavesdrop(run: Run) -> tuple[str, bool]:
    _, ok = _baseline(run)
    return "passive taps on DRAM bus, MMIO and handshake links", ok


def _bitflip(run: Run) -> tuple[str, bool]:
    run.establish()
    record = run.stage()
    inp = record.regions["inp"]
    byte = inp.base_addr + run.rng.randrange(inp.length)
    run.dram.raw[byte] ^= 0x80
    return f"flipped bit 7 of input byte {byte - inp.base_addr}", _execute(run, record)


def _splice(run: Run) -> tuple[str, bool]:
    run.establish()
    record = run.stage()
    wgt = record.regions["wgt"]
    src, dst = run.rng.sample(range(wgt.m), 2)
    _swap_piece(run.dram, wgt, src, dst)
    return f"copied weight piece {src} over piece {dst}", _execute(run, record)


def _runtime_replay(run: Run) -> tuple[str, bool]:
    """Roll an output piece back to its pre-launch (stale version) contents."""
    run.establish()
    record = run.stage()
    out = record.regions["out"]
    base, n = _region_bytes(out)
    run.hooks.snapshot(run.dram, "out", base, n)
    if out.meta_addr is not None:
        run.hooks.snapshot(run.dram, "out_meta", out.meta_addr, out.meta_bytes)
    host = run.platform.host
    host.launch(record)
    run.hooks.restore(run.dram, "out", base)
    if out.meta_addr is not None:
        run.hooks.restore(run.dram, "out_meta", out.meta_addr)
    return "restored stale output pieces after the kernel wrote them", run.check_output(host.collect(record))


def _register_tamper(run: Run) -> tuple[str, bool]:
    """Redirect the output pointer onto the input buffer."""
    run.establish()
    record = run.stage()
    inp_addr = record.regions["inp"].base_addr

    def rewrite(writes):
        return [(off, inp_addr if off == rp.OFFSETS["out_addr"] else val) for off, val in writes]

    run.hooks.mmio_rewrite = rewrite
    return "rewrote out_addr to point at the input buffer", _execute(run, record)


def _register_replay(run: Run) -> tuple[str, bool]:
    """Replay the first launch's register writes after a second launch."""
    run.establish()
    first = run.stage()
    ok = _execute(run, first)
    second = run.stage()
    ok = _execute(run, second) and ok
    replay = list(run.hooks.mmio_log[0])
    run.platform.driver.tap = None  # the adversary drives MMIO itself
    for off, val in replay:
        run.platform.device.mmio_write(off, val)
    return "replayed the first launch's MMIO writes", ok


def mitm_rewrite(group: cc.DhGroup, rng):
    """Channel rewrite that swaps the device's DH offer for the adversary's own,
    signed with a key the adversary controls (it cannot forge the device's AK)."""
    fake_ak = cc.KeyPair.generate(rng)

    def rewrite(label, msg):
        if isinstance(msg, att.Msg2):
            g_x = cc.dh_public(group, cc.dh_secret(group, rng))
            return att.Msg2(msg.p, msg.g, g_x, cc.sign(fake_ak.private, att.dh_params_encoding(msg.p, msg.g, g_x)))
        return msg

    return rewrite


def _mitm(run: Run) -> tuple[str, bool]:
    run.hooks.channel_rewrite = mitm_rewrite(run.platform.config.group, random.Random(run.rng.random()))
    run.platform.establish()
    return "handshake completed despite substitution", True


@dataclass(frozen=True)
class Scenario:
    name: str
    run: object
    description: str


SCENARIOS: dict[str, Scenario] = {
    s.name: s
    for s in (
        Scenario("baseline_no_attack", _baseline, "no adversary; checks for false positives"),
        Scenario("eavesdrop", _eavesdrop, "log every bus transfer, MMIO write and handshake message"),
        Scenario("bitflip_dram", _bitflip, "flip one bit of protected input in DRAM"),
        Scenario("piece_splice", _splice, "move a protected weight piece to another index"),
        Scenario("runtime_replay", _runtime_replay, "roll output pieces back to a stale version"),
        Scenario("register_tamper", _register_tamper, "modify a register write in flight"),
        Scenario("register_replay", _register_replay, "replay an old register envelope"),
        Scenario("mitm_handshake", _mitm, "substitute the DH offer during attestation"),
    )
}

# adversary capability -> scenarios exercising it
CAPABILITIES: dict[str, tuple[str, ...]] = {
    "eavesdrop on system and PCIe buses": ("eavesdrop",),
    "access main memory via a malicious device": ("eavesdrop", "bitflip_dram"),
    "man-in-the-middle between CPU and accelerator": ("mitm_handshake", "register_tamper"),
    "read and tamper with untrusted device memory": ("bitflip_dram", "piece_splice", "runtime_replay"),
    "privileged software reading main memory": ("eavesdrop", "piece_splice"),
    "send commands to the accelerator via MMIO": ("register_tamper", "register_replay"),
    "compromised driver": ("register_tamper", "register_replay", "mitm_handshake"),
}

_D, _U, _L = Verdict.DETECTED, Verdict.UNDETECTED, Verdict.LEAKED
EXPECTED: dict[str, dict[Mode, Verdict]] = {
    "baseline_no_attack": {Mode.OFF: _U, Mode.CTR: _U, Mode.FULL: _U},
    "eavesdrop": {Mode.OFF: _L, Mode.CTR: _U, Mode.FULL: _U},
    "bitflip_dram": {Mode.OFF: _U, Mode.CTR: _U, Mode.FULL: _D},
    "piece_splice": {Mode.OFF: _U, Mode.CTR: _U, Mode.FULL: _D},
    "runtime_replay": {Mode.OFF: _U, Mode.CTR: _U, Mode.FULL: _D},
    "register_tamper": {Mode.OFF: _U, Mode.CTR: _U, Mode.FULL: _D},
    "register_replay": {Mode.OFF: _U, Mode.CTR: _U, Mode.FULL: _D},
    "mitm_handshake": {Mode.OFF: _D, Mode.CTR: _D, Mode.FULL: _D},
}


def scenario_config(mode="full", seed: int = 0) -> SystemConfig:
    return SystemConfig(mode=mode, seed=seed, piece_size=SCENARIO_PIECE_BYTES, dram_bytes=SCENARIO_DRAM_BYTES)


def run_scenario(name: str, system_config: SystemConfig | None = None, payload_seed: int | None = None,
                 dump_dir=None) -> AttackOutcome:
    """Run one scenario in a fresh platform.

    Verdicts: ``Detected`` iff a protection check raised its typed error;
    ``Leaked`` iff eavesdropping recovered the sentinel; otherwise
    ``Undetected``.  ``leaked`` and ``output_correct`` are reported for every
    undetected run.  With ``dump_dir`` the final DRAM image, the MMIO log and
    the outcome are written there for offline replay.
    """
    try:
        scenario = SCENARIOS[name]
    except KeyError:
        raise UnknownScenario(name) from None
    config = system_config or scenario_config()
    seed = config.seed if config.seed is not None else 0
    payload_seed = seed if payload_seed is None else payload_seed
    victim = make_victim(payload_seed, config.piece_size)
    platform = TrustedPlatform(config)
    hooks = AdversaryHooks()
    if name != "baseline_no_attack":
        hooks.attach(platform)
    run = Run(platform, hooks, victim, random.Random(f"{name}:{seed}:{payload_seed}"), payload_seed)
    mode = config.mode.value

    outcome = _judge(name, mode, scenario, run)
    if dump_dir is not None:
        dump_run(run, outcome, dump_dir)
    return outcome


def _judge(name: str, mode: str, scenario: Scenario, run: Run) -> AttackOutcome:
    try:
        detail, correct = scenario.run(run)
    except DETECTING_ERRORS as exc:
        return AttackOutcome(name, mode, Verdict.DETECTED, f"{type(exc).__name__}: {exc}")
    except (KernelError, ScheduleError, mp.ProtectionError, ValueError, IndexError, struct.error) as exc:
        # the device choked on garbage; no protection check fired
        detail, correct = f"device fault {type(exc).__name__}: {exc}", False

    # every attached adversary also eavesdrops; only the passive scenario is judged on it
    leaked = name != "baseline_no_attack" and leaks(run.victim.sentinel, run.hooks.windows(run.dram))
    if leaked and name == "eavesdrop":
        return AttackOutcome(name, mode, Verdict.LEAKED, "sentinel recovered from adversary-visible data",
                             True, correct)
    return AttackOutcome(name, mode, Verdict.UNDETECTED, detail, leaked, correct)


def dump_run(run: Run, outcome: AttackOutcome, dump_dir) -> Path:
    """``dram.bin``/``dram.json`` image, ``mmio.json`` trace and ``outcome.json``."""
    out = Path(dump_dir)
    out.mkdir(parents=True, exist_ok=True)
    regions = [r for rec in run.platform.host.history for r in rec.regions.values()]
    _, image = mp.dump_image(run.dram, regions, out / "dram")
    (out / "mmio.json").write_text(json.dumps(
        [[{"offset": off, "value": val} for off, val in writes] for writes in run.hooks.mmio_log], indent=1))
    doc = {**outcome.to_json(), "image": image.name, "mmio_trace": "mmio.json",
           "payload_seed": run.payload_seed, "seed": run.platform.config.seed}
    path = out / "outcome.json"
    path.write_text(json.dumps(doc, indent=2))
    return path
