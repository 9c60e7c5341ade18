"""Benchmark layers, data volumes, access intensity and tile schedules.

Both layer kinds are lowered to one implicit-GEMM view: FC(n_in, n_out) with
batch b is a 1x1 convolution over a b x 1 "image".  Tensors are int8 and laid
out in DRAM in the order the schedule consumes them:

    inp  (c_in, Hp, Wp)                 padded, channel-major
    wgt  tile-major: for each (oc block, ic block): (oc_blk, ic_blk, kh, kw)
    out  (c_out, Ho, Wo)

Tiling is output-stationary: for each output-channel block the accumulators
stay on chip while input-channel blocks stream through.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from fractions import Fraction
from importlib import resources

from teeaccel.device_sim import Compute, CoreParams, Load, Store
from teeaccel.memory_protection import STAGING_BYTES

CHANNEL_QUANTUM = 16  # GEMM core is 1x16x16


class InfeasibleTiling(ValueError):
    pass


@dataclass(frozen=True)
class Conv:
    c_in: int
    c_out: int
    kh: int
    kw: int
    h_in: int
    w_in: int
    stride: int = 1
    pad: int = 0
    batch: int = 1
    name: str = "conv"

    def __post_init__(self):
        dims = (self.c_in, self.c_out, self.kh, self.kw, self.h_in, self.w_in, self.stride, self.batch)
        if min(dims) <= 0 or self.pad < 0:
            raise ValueError(f"{self.name}: dimensions must be positive")
        for size, k in ((self.h_in, self.kh), (self.w_in, self.kw)):
            span = size + 2 * self.pad - k
            if span < 0 or span % self.stride:
                raise ValueError(f"{self.name}: output size not integral")

    @property
    def h_out(self) -> int:
        return (self.h_in + 2 * self.pad - self.kh) // self.stride + 1

    @property
    def w_out(self) -> int:
        return (self.w_in + 2 * self.pad - self.kw) // self.stride + 1


@dataclass(frozen=True)
class Fc:
    n_in: int
    n_out: int
    batch: int = 1
    name: str = "fc"

    def __post_init__(self):
        if min(self.n_in, self.n_out, self.batch) <= 0:
            raise ValueError(f"{self.name}: dimensions must be positive")


LayerDesc = Conv | Fc


@dataclass(frozen=True)
class GemmView:
    c_in: int
    c_out: int
    kh: int
    kw: int
    hp: int  # padded input height
    wp: int
    h_out: int
    w_out: int
    stride: int

    @property
    def spatial_out(self) -> int:
        return self.h_out * self.w_out

    @property
    def in_channel_bytes(self) -> int:
        return self.hp * self.wp


def gemm_view(layer: LayerDesc) -> GemmView:
    if isinstance(layer, Fc):
        return GemmView(layer.n_in, layer.n_out, 1, 1, layer.batch, 1, layer.batch, 1, 1)
    if layer.batch != 1:
        raise InfeasibleTiling(f"{layer.name}: convolution tiling supports batch 1 only")
    return GemmView(layer.c_in, layer.c_out, layer.kh, layer.kw, layer.h_in + 2 * layer.pad,
                    layer.w_in + 2 * layer.pad, layer.h_out, layer.w_out, layer.stride)


def mac_count(layer: LayerDesc) -> int:
    if isinstance(layer, Fc):
        return layer.n_in * layer.n_out * layer.batch
    return layer.kh * layer.kw * layer.c_in * layer.c_out * layer.h_out * layer.w_out * layer.batch


@dataclass(frozen=True)
class DataVolume:
    weight_bytes: int
    input_bytes: int
    output_bytes: int

    @property
    def total(self) -> int:
        return self.weight_bytes + self.input_bytes + self.output_bytes


def data_volume(layer: LayerDesc) -> DataVolume:
    if isinstance(layer, Fc):
        return DataVolume(layer.n_in * layer.n_out, layer.n_in * layer.batch, layer.n_out * layer.batch)
    return DataVolume(
        layer.kh * layer.kw * layer.c_in * layer.c_out,
        layer.c_in * layer.h_in * layer.w_in * layer.batch,
        layer.c_out * layer.h_out * layer.w_out * layer.batch,
    )


def access_intensity(layer: LayerDesc) -> Fraction:
    """Words moved per FLOP, one int8 element per word and 2 FLOPs per MAC."""
    return Fraction(data_volume(layer).total, 2 * mac_count(layer))


def requant_shift(layer: LayerDesc) -> int:
    """Right shift that keeps int8 outputs of random int8 operands mostly unsaturated."""
    v = gemm_view(layer)
    return (v.c_in * v.kh * v.kw).bit_length() // 2 + 8


# -- tiling ------------------------------------------------------------------

@dataclass(frozen=True)
class Tiling:
    view: GemmView
    oc_block: int
    ic_block: int

    def oc_blocks(self) -> list[tuple[int, int]]:
        return [(lo, min(lo + self.oc_block, self.view.c_out)) for lo in range(0, self.view.c_out, self.oc_block)]

    def ic_blocks(self) -> list[tuple[int, int]]:
        return [(lo, min(lo + self.ic_block, self.view.c_in)) for lo in range(0, self.view.c_in, self.ic_block)]

    def tiles(self):
        """(oc_lo, oc_hi, ic_lo, ic_hi, wgt_offset) in execution order."""
        v = self.view
        offset = 0
        for oc_lo, oc_hi in self.oc_blocks():
            for ic_lo, ic_hi in self.ic_blocks():
                yield oc_lo, oc_hi, ic_lo, ic_hi, offset
                offset += (oc_hi - oc_lo) * (ic_hi - ic_lo) * v.kh * v.kw

    @property
    def input_bytes(self) -> int:
        return self.view.c_in * self.view.in_channel_bytes

    @property
    def weight_bytes(self) -> int:
        v = self.view
        return v.c_out * v.c_in * v.kh * v.kw

    @property
    def output_bytes(self) -> int:
        return self.view.c_out * self.view.spatial_out


def _largest_block(total: int, limit: int) -> int:
    if total <= limit:
        return total
    if limit >= CHANNEL_QUANTUM:
        return limit // CHANNEL_QUANTUM * CHANNEL_QUANTUM
    return limit


def choose_tiling(layer: LayerDesc, core: CoreParams) -> Tiling:
    v = gemm_view(layer)
    ic_limit = core.inp_buffer_bytes // v.in_channel_bytes
    acc_elems = core.acc_buffer_bytes // core.acc_bytes_per_element
    oc_limit = acc_elems // v.spatial_out
    if ic_limit < 1 or oc_limit < 1:
        raise InfeasibleTiling(f"one channel of {getattr(layer, 'name', layer)} does not fit on chip")
    ic_block = _largest_block(v.c_in, ic_limit)
    oc_limit = min(oc_limit, core.wgt_buffer_bytes // (ic_block * v.kh * v.kw))
    if oc_limit < 1:
        raise InfeasibleTiling("weight tile for a single output channel exceeds the weight buffer")
    return Tiling(v, _largest_block(v.c_out, oc_limit), ic_block)


def _piece_loads(tensor: str, lo: int, hi: int, total: int, piece_size: int) -> list[Load]:
    first, last = lo // piece_size, (hi - 1) // piece_size
    return [
        Load(min(total, (p + 1) * piece_size) - p * piece_size, tensor, p * piece_size)
        for p in range(first, last + 1)
    ]


def tile_schedule(layer: LayerDesc, core_params: CoreParams | None = None, piece_size: int = STAGING_BYTES,
                  tiling: Tiling | None = None) -> list:
    """Output-stationary schedule of whole-piece Loads, per-tile Computes and Stores.

    Every Load covers exactly one protected piece (the unit the device can
    authenticate).  The input is loaded once when it fits in a single
    input-channel block, otherwise reloaded per output block.  Output pieces
    are stored once complete, so each is written exactly once.
    """
    if not 16 <= piece_size <= STAGING_BYTES:
        raise InfeasibleTiling(f"piece size {piece_size} outside staging buffer")
    core = core_params or CoreParams()
    tiling = tiling or choose_tiling(layer, core)
    v = tiling.view
    schedule: list = []
    inp_resident = len(tiling.ic_blocks()) == 1
    out_done = 0
    n_oc = len(tiling.oc_blocks())
    for oc_lo, oc_hi, ic_lo, ic_hi, w_off in tiling.tiles():
        if not (inp_resident and schedule):
            schedule += _piece_loads("inp", ic_lo * v.in_channel_bytes, ic_hi * v.in_channel_bytes,
                                     tiling.input_bytes, piece_size)
        w_bytes = (oc_hi - oc_lo) * (ic_hi - ic_lo) * v.kh * v.kw
        schedule += _piece_loads("wgt", w_off, w_off + w_bytes, tiling.weight_bytes, piece_size)
        schedule.append(Compute((oc_hi - oc_lo) * (ic_hi - ic_lo) * v.kh * v.kw * v.spatial_out,
                                (oc_lo, oc_hi, ic_lo, ic_hi)))
        if ic_hi == v.c_in:
            ready = oc_hi * v.spatial_out
            last_block = oc_hi == v.c_out
            limit = ready if last_block else ready // piece_size * piece_size
            while out_done < limit:
                n = min(piece_size, tiling.output_bytes - out_done)
                schedule.append(Store(n, "out", out_done))
                out_done += n
    assert out_done == tiling.output_bytes or n_oc == 0
    return schedule


# -- benchmark suite -----------------------------------------------------------

def layer_from_json(d: dict) -> LayerDesc:
    kind = d.get("kind", "conv").lower()
    fields = {k: v for k, v in d.items() if k != "kind"}
    if kind == "fc":
        return Fc(**fields)
    if kind == "conv":
        return Conv(**fields)
    raise ValueError(f"unknown layer kind {kind!r}")


def layer_to_json(layer: LayerDesc) -> dict:
    return {"kind": "fc" if isinstance(layer, Fc) else "conv", **asdict(layer)}


def load_suite(path=None) -> dict[str, LayerDesc]:
    if path is None:
        text = (resources.files("teeaccel.data") / "benchmarks.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    doc = json.loads(text)
    return {name: layer_from_json({**spec, "name": name}) for name, spec in doc["layers"].items()}


BENCHMARKS = ("conv4", "conv5", "fc1", "fc2")
