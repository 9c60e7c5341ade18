"""Comparison tables across protection modes, plus the functional check behind them."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from teeaccel.device_sim import CycleReport, SimParams, simulate
from teeaccel.memory_protection import Mode
from teeaccel.runtime import SystemConfig, TrustedPlatform, full_schedule, random_operands, reference_execute
from teeaccel.workloads import LayerDesc, choose_tiling, tile_schedule

SCHEMA_VERSION = 1
MODE_ORDER = (Mode.OFF, Mode.FULL, Mode.CTR)


def _ratio(cycles: int | None, baseline: int) -> float | None:
    return None if cycles is None else round(cycles / baseline, 3)


@dataclass
class TableRow:
    benchmark: str
    baseline_cycles: int
    full_cycles: int | None = None
    ctr_cycles: int | None = None
    verified: dict[str, bool] = field(default_factory=dict)

    @property
    def full_slowdown(self) -> float | None:
        return _ratio(self.full_cycles, self.baseline_cycles)

    @property
    def ctr_slowdown(self) -> float | None:
        return _ratio(self.ctr_cycles, self.baseline_cycles)

    def to_json(self) -> dict:
        return {
            "benchmark": self.benchmark,
            "baseline_cycles": self.baseline_cycles,
            "full_cycles": self.full_cycles,
            "ctr_cycles": self.ctr_cycles,
            "full_slowdown": self.full_slowdown,
            "ctr_slowdown": self.ctr_slowdown,
            "verified": dict(self.verified),
        }


@dataclass
class ComparisonTable:
    preset: str
    seed: int
    rows: list[TableRow] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "preset": self.preset, "seed": self.seed,
                "rows": [r.to_json() for r in self.rows]}

    def render(self) -> str:
        head = ("benchmark", "baseline", "full", "ctr", "full x", "ctr x", "verified")
        body = []
        for r in self.rows:
            body.append((
                r.benchmark,
                f"{r.baseline_cycles:,}",
                "-" if r.full_cycles is None else f"{r.full_cycles:,}",
                "-" if r.ctr_cycles is None else f"{r.ctr_cycles:,}",
                "-" if r.full_slowdown is None else f"{r.full_slowdown:.3f}",
                "-" if r.ctr_slowdown is None else f"{r.ctr_slowdown:.3f}",
                ",".join(f"{m}:{'ok' if ok else 'FAIL'}" for m, ok in r.verified.items()) or "-",
            ))
        widths = [max(len(row[i]) for row in [head, *body]) for i in range(len(head))]
        lines = [f"preset {self.preset}, seed {self.seed}"]
        for row in [head, *body]:
            lines.append("  ".join(c.ljust(w) if i in (0, 6) else c.rjust(w)
                                   for i, (c, w) in enumerate(zip(row, widths))))
        return "\n".join(lines)


def cycle_reports(layer: LayerDesc, params: SimParams, modes=MODE_ORDER) -> dict[Mode, CycleReport]:
    schedule = full_schedule(layer, params)
    return {Mode.parse(m): simulate(schedule, params, m, layer.name) for m in modes}


def verify_functional(layer: LayerDesc, params: SimParams, mode, seed: int = 0) -> bool:
    """Seal, launch and read back ``layer`` on a fresh platform; compare with the crypto-free run."""
    x, w = random_operands(layer, seed)
    platform = TrustedPlatform(SystemConfig(mode=mode, seed=seed, params=params))
    out = platform.run_layer(layer, x, w)
    tiling = choose_tiling(layer, params.core)
    ref = reference_execute(layer, tile_schedule(layer, params.core, params.piece_size, tiling), x, w, tiling)
    return bool(np.array_equal(out, ref))


def bench_row(name: str, layer: LayerDesc, params: SimParams, modes, seed: int = 0,
              functional: bool = True) -> TableRow:
    modes = [Mode.parse(m) for m in modes]
    reports = cycle_reports(layer, params, set(modes) | {Mode.OFF})
    row = TableRow(name, reports[Mode.OFF].total_cycles)
    if Mode.FULL in modes:
        row.full_cycles = reports[Mode.FULL].total_cycles
    if Mode.CTR in modes:
        row.ctr_cycles = reports[Mode.CTR].total_cycles
    if functional:
        for m in modes:
            row.verified[m.value] = verify_functional(layer, params, m, seed)
    return row
