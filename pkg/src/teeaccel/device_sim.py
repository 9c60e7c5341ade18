"""Cycle-cost model of the accelerator behind its security layer.

Three engines run concurrently: a memory port (DRAM channel + staging buffer
+ crypto engine, shared by loads and stores), the GEMM core, and nothing else.
The schedule is grouped into tiles (the loads feeding one compute op, the
compute, and the stores after it) and executed with double-buffered
dependencies:

* loads of tile t may start once compute t-2 has freed its buffer half;
* compute t waits for its loads, compute t-1 and store t-2;
* stores of tile t wait for compute t.

The memory port issues in software-pipelined order (loads of tile t+1 before
stores of tile t).  In steady state a tile therefore costs max(memory,
compute).

Per-transfer memory cost, with ``blocks = ceil(bytes / 16)``:

    off   dram
    ctr   fixed + max(stream, blocks / aes_rate) + aes_latency
    full  ctr + blocks * gfm_cycles            (serial GFM)
          ctr + gfm_cycles, GFM streamed       (pipelined GFM)

where ``dram = fixed + stream`` and ``stream = ceil(bytes / bytes_per_cycle)``.
Keystream generation overlaps the transfer; only the pipeline fill shows.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from importlib import resources
from pathlib import Path

from teeaccel.memory_protection import STAGING_BYTES, Mode

BLOCK_BYTES = 16
SCHEMA_VERSION = 1


class ScheduleError(ValueError):
    pass


class MismatchedRuns(ValueError):
    pass


@dataclass(frozen=True)
class Load:
    nbytes: int
    tensor: str = ""
    offset: int = 0


@dataclass(frozen=True)
class Compute:
    macs: int
    tile: tuple[int, int, int, int] | None = None


@dataclass(frozen=True)
class Store:
    nbytes: int
    tensor: str = "out"
    offset: int = 0


@dataclass(frozen=True)
class CryptoEngineParams:
    aes_latency_cycles: int = 29
    aes_blocks_per_cycle: Fraction = Fraction(1)
    gfm_cycles_per_block: int = 8
    gfm_pipelined: bool = False

    def __post_init__(self):
        object.__setattr__(self, "aes_blocks_per_cycle", Fraction(self.aes_blocks_per_cycle))
        if self.aes_latency_cycles <= 0 or self.aes_blocks_per_cycle <= 0 or self.gfm_cycles_per_block <= 0:
            raise ValueError("crypto engine parameters must be positive")


@dataclass(frozen=True)
class DramParams:
    bytes_per_cycle: Fraction = Fraction(7)
    fixed_latency_cycles: int = 0

    def __post_init__(self):
        object.__setattr__(self, "bytes_per_cycle", Fraction(self.bytes_per_cycle))
        if self.bytes_per_cycle <= 0:
            raise ValueError("DRAM bandwidth must be positive")
        if self.fixed_latency_cycles < 0:
            raise ValueError("DRAM latency cannot be negative")


@dataclass(frozen=True)
class CoreParams:
    macs_per_cycle: int = 256
    inp_buffer_bytes: int = 32 * 1024
    wgt_buffer_bytes: int = 256 * 1024
    acc_buffer_bytes: int = 128 * 1024
    acc_bytes_per_element: int = 4

    def __post_init__(self):
        if min(self.macs_per_cycle, self.inp_buffer_bytes, self.wgt_buffer_bytes, self.acc_buffer_bytes) <= 0:
            raise ValueError("core parameters must be positive")


@dataclass(frozen=True)
class SimParams:
    crypto: CryptoEngineParams = field(default_factory=CryptoEngineParams)
    dram: DramParams = field(default_factory=DramParams)
    core: CoreParams = field(default_factory=CoreParams)
    piece_size: int = STAGING_BYTES
    name: str = "default"

    def to_json(self) -> dict:
        d = asdict(self)
        d["crypto"]["aes_blocks_per_cycle"] = str(self.crypto.aes_blocks_per_cycle)
        d["dram"]["bytes_per_cycle"] = str(self.dram.bytes_per_cycle)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SimParams":
        crypto = dict(d.get("crypto", {}))
        if "aes_blocks_per_cycle" in crypto:
            crypto["aes_blocks_per_cycle"] = Fraction(str(crypto["aes_blocks_per_cycle"]))
        dram = dict(d.get("dram", {}))
        if "bytes_per_cycle" in dram:
            dram["bytes_per_cycle"] = Fraction(str(dram["bytes_per_cycle"]))
        return cls(
            CryptoEngineParams(**crypto),
            DramParams(**dram),
            CoreParams(**d.get("core", {})),
            d.get("piece_size", STAGING_BYTES),
            d.get("name", "custom"),
        )


PRESET_ENV = "TEEACCEL_PRESET_DIR"


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("teeaccel.presets").iterdir() if p.name.endswith(".json"))


def load_preset(name_or_path: str) -> SimParams:
    """Resolve a preset by path, then ``$TEEACCEL_PRESET_DIR``, then the bundled ones."""
    candidates = [Path(name_or_path)]
    stem = name_or_path if name_or_path.endswith(".json") else name_or_path + ".json"
    if os.environ.get(PRESET_ENV):
        candidates.append(Path(os.environ[PRESET_ENV]) / stem)
    for path in candidates:
        if path.is_file():
            return SimParams.from_json(json.loads(path.read_text()))
    bundled = resources.files("teeaccel.presets") / stem
    if bundled.is_file():
        return SimParams.from_json(json.loads(bundled.read_text()))
    raise FileNotFoundError(f"no preset {name_or_path!r}")


# -- per-op costs -----------------------------------------------------------

def _blocks(nbytes: int) -> int:
    return -(-nbytes // BLOCK_BYTES)


def aes_cost(nbytes: int, crypto: CryptoEngineParams) -> int:
    return crypto.aes_latency_cycles + math.ceil(_blocks(nbytes) / crypto.aes_blocks_per_cycle)


def gfm_cost(nbytes: int, crypto: CryptoEngineParams) -> int:
    if crypto.gfm_pipelined:
        return crypto.gfm_cycles_per_block + _blocks(nbytes)
    return _blocks(nbytes) * crypto.gfm_cycles_per_block


def crypto_transfer_cost(nbytes: int, params: CryptoEngineParams | SimParams, mode) -> int:
    """Stand-alone crypto engine time for one transfer, ignoring DRAM overlap."""
    crypto = params.crypto if isinstance(params, SimParams) else params
    mode = Mode.parse(mode)
    if mode is Mode.OFF:
        return 0
    cost = aes_cost(nbytes, crypto)
    if mode is Mode.FULL:
        cost += gfm_cost(nbytes, crypto)
    return cost


def dram_cost(nbytes: int, dram: DramParams) -> int:
    return dram.fixed_latency_cycles + math.ceil(Fraction(nbytes) / dram.bytes_per_cycle)


def transfer_cost(nbytes: int, params: SimParams, mode) -> int:
    """Memory-port occupancy for one protected load or store."""
    mode = Mode.parse(mode)
    dram = dram_cost(nbytes, params.dram)
    if mode is Mode.OFF:
        return dram
    crypto = params.crypto
    stream = dram - params.dram.fixed_latency_cycles
    aes_stream = math.ceil(_blocks(nbytes) / crypto.aes_blocks_per_cycle)
    exposed_tail = crypto.aes_latency_cycles
    if mode is Mode.FULL:
        if crypto.gfm_pipelined:
            aes_stream = max(aes_stream, _blocks(nbytes))
            exposed_tail += crypto.gfm_cycles_per_block
        else:
            exposed_tail += gfm_cost(nbytes, crypto)
    return params.dram.fixed_latency_cycles + max(stream, aes_stream) + exposed_tail


def compute_cost(macs: int, core: CoreParams) -> int:
    return -(-macs // core.macs_per_cycle)


# -- schedule simulation ------------------------------------------------------

@dataclass(frozen=True)
class Breakdown:
    compute: int
    dram: int
    aes: int
    gfm: int
    exposed_crypto: int


@dataclass(frozen=True)
class CycleReport:
    total_cycles: int
    breakdown: Breakdown
    mode: str
    workload: str = ""

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "workload": self.workload,
            "mode": self.mode,
            "total_cycles": self.total_cycles,
            "breakdown": asdict(self.breakdown),
        }


@dataclass
class _Tile:
    loads: list[Load] = field(default_factory=list)
    compute: Compute | None = None
    stores: list[Store] = field(default_factory=list)


def group_tiles(schedule) -> list[_Tile]:
    tiles: list[_Tile] = []
    cur = _Tile()
    for op in schedule:
        if isinstance(op, Load):
            if op.nbytes <= 0:
                raise ScheduleError(f"load of {op.nbytes} bytes")
            if cur.compute is not None:
                tiles.append(cur)
                cur = _Tile()
            cur.loads.append(op)
        elif isinstance(op, Compute):
            if op.macs < 0:
                raise ScheduleError(f"compute of {op.macs} MACs")
            if cur.compute is not None:
                tiles.append(cur)
                cur = _Tile()
            cur.compute = op
        elif isinstance(op, Store):
            if op.nbytes <= 0:
                raise ScheduleError(f"store of {op.nbytes} bytes")
            if cur.compute is None:
                raise ScheduleError("store with no preceding compute")
            cur.stores.append(op)
        else:
            raise ScheduleError(f"unknown op {op!r}")
    if cur.loads or cur.compute is not None:
        tiles.append(cur)
    return tiles


def _run(tiles: list[_Tile], params: SimParams, mode: Mode) -> int:
    n = len(tiles)
    load_end = [0] * n
    comp_end = [0] * n
    store_end = [0] * n
    port = 0

    def loads(t):
        nonlocal port
        if not tiles[t].loads:
            return
        start = max(port, comp_end[t - 2] if t >= 2 else 0)
        for op in tiles[t].loads:
            start += transfer_cost(op.nbytes, params, mode)
        port = start
        load_end[t] = port

    def stores(t):
        nonlocal port
        if not tiles[t].stores:
            store_end[t] = store_end[t - 1] if t else 0
            return
        start = max(port, comp_end[t])
        for op in tiles[t].stores:
            start += transfer_cost(op.nbytes, params, mode)
        port = start
        store_end[t] = port

    def compute(t):
        macs = tiles[t].compute.macs if tiles[t].compute else 0
        start = max(load_end[t] if tiles[t].loads else 0,
                    comp_end[t - 1] if t else 0,
                    store_end[t - 2] if t >= 2 else 0)
        comp_end[t] = start + compute_cost(macs, params.core)

    # memory port order: L0, L1, S0, L2, S1, ... ; compute t only needs L_t and S_{t-2}
    if n:
        loads(0)
    for t in range(n):
        compute(t)
        if t + 1 < n:
            loads(t + 1)
        stores(t)
    return max([port] + comp_end)


def simulate(schedule, params: SimParams, mode, workload: str = "") -> CycleReport:
    mode = Mode.parse(mode)
    schedule = list(schedule)
    if not schedule:
        raise ScheduleError("empty schedule")
    tiles = group_tiles(schedule)
    total = _run(tiles, params, mode)
    baseline = total if mode is Mode.OFF else _run(tiles, params, Mode.OFF)

    transfers = [op.nbytes for op in schedule if isinstance(op, (Load, Store))]
    comp = sum(compute_cost(op.macs, params.core) for op in schedule if isinstance(op, Compute))
    dram = sum(dram_cost(b, params.dram) for b in transfers)
    aes = sum(aes_cost(b, params.crypto) for b in transfers) if mode is not Mode.OFF else 0
    gfm = sum(gfm_cost(b, params.crypto) for b in transfers) if mode is Mode.FULL else 0
    return CycleReport(total, Breakdown(comp, dram, aes, gfm, total - baseline), mode.value, workload)


def slowdown(protected: CycleReport, baseline: CycleReport) -> float:
    if protected.workload != baseline.workload:
        raise MismatchedRuns(f"{protected.workload!r} vs {baseline.workload!r}")
    return protected.total_cycles / baseline.total_cycles


def predicted_gfm_cycles(nbytes: int, crypto: CryptoEngineParams | None = None) -> int:
    """Closed-form serial authentication time: ceil(bits / 128) * gfm cycles."""
    crypto = crypto or CryptoEngineParams()
    return _blocks(nbytes) * crypto.gfm_cycles_per_block
