"""Functional end-to-end model: enclave runtime, accelerator and their channels.

The host packs a layer's code (the tile schedule as 16-byte instructions), a
layer descriptor, inputs and weights into protected regions, commits the
register envelope through the untrusted driver, and reads the output back.
The device reconstructs everything it needs from its (authenticated)
registers and the (authenticated) code, so nothing reaches the GEMM core
without passing the staging buffer checks.

Region ids are derived from the launch number (the register nonce in full
mode), so no (key, nonce) pair is ever reused across kernels.
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass, field

import numpy as np

from teeaccel import attestation as att
from teeaccel import crypto_core as cc
from teeaccel import memory_protection as mp
from teeaccel import register_protection as rp
from teeaccel.device_sim import Compute, CoreParams, Load, ScheduleError, SimParams, Store
from teeaccel.memory_protection import Mode
from teeaccel.workloads import Conv, Fc, LayerDesc, Tiling, choose_tiling, gemm_view, requant_shift, tile_schedule

INSN_BYTES = 16
LAYER_DESC_BYTES = 64
ROLES = ("insn", "uop", "inp", "wgt", "out")
ROLE_CODE = {name: i + 1 for i, name in enumerate(ROLES)}
TENSOR_CODE = {"": 0, "inp": 1, "wgt": 2, "out": 3, "insn": 4}
TENSOR_NAME = {v: k for k, v in TENSOR_CODE.items()}
OP_LOAD, OP_COMPUTE, OP_STORE = 1, 2, 3
DEFAULT_DRAM_BYTES = 64 * 1024 * 1024


def region_id(launch: int, role: str) -> int:
    return ((launch & 0x1FFFFFFF) << 3) | ROLE_CODE[role]


# -- instruction / descriptor encoding --------------------------------------------

def encode_schedule(schedule) -> bytes:
    out = bytearray()
    for op in schedule:
        if isinstance(op, Load):
            out += struct.pack(">BBHIII", OP_LOAD, TENSOR_CODE[op.tensor], 0, op.offset, op.nbytes, 0)
        elif isinstance(op, Store):
            out += struct.pack(">BBHIII", OP_STORE, TENSOR_CODE[op.tensor], 0, op.offset, op.nbytes, 0)
        elif isinstance(op, Compute):
            oc_lo, oc_hi, ic_lo, ic_hi = op.tile or (0, 0, 0, 0)
            out += struct.pack(">BBHIHHHH", OP_COMPUTE, 0, 0, op.macs, oc_lo, oc_hi, ic_lo, ic_hi)
        else:
            raise ScheduleError(f"cannot encode {op!r}")
    return bytes(out)


def decode_schedule(code: bytes) -> list:
    if len(code) % INSN_BYTES:
        raise ScheduleError("instruction stream is not a whole number of instructions")
    ops = []
    for pos in range(0, len(code), INSN_BYTES):
        word = code[pos:pos + INSN_BYTES]
        opcode = word[0]
        if opcode in (OP_LOAD, OP_STORE):
            _, tensor, _, offset, nbytes, _ = struct.unpack(">BBHIII", word)
            cls = Load if opcode == OP_LOAD else Store
            ops.append(cls(nbytes, TENSOR_NAME.get(tensor, "?"), offset))
        elif opcode == OP_COMPUTE:
            _, _, _, macs, oc_lo, oc_hi, ic_lo, ic_hi = struct.unpack(">BBHIHHHH", word)
            ops.append(Compute(macs, (oc_lo, oc_hi, ic_lo, ic_hi)))
        else:
            raise ScheduleError(f"bad opcode {opcode} at instruction {pos // INSN_BYTES}")
    return ops


_DESC = struct.Struct(">B11I")


def encode_layer(layer: LayerDesc, tiling: Tiling) -> bytes:
    if isinstance(layer, Fc):
        fields = (0, layer.n_in, layer.n_out, layer.batch, 0, 0, 0, 0, 0, 0)
    else:
        fields = (1, layer.c_in, layer.c_out, layer.kh, layer.kw, layer.h_in, layer.w_in, layer.stride, layer.pad, layer.batch)
    return _DESC.pack(*fields, tiling.oc_block, tiling.ic_block).ljust(LAYER_DESC_BYTES, b"\0")


def decode_layer(blob: bytes) -> tuple[LayerDesc, Tiling]:
    kind, *vals = _DESC.unpack(blob[:_DESC.size])
    if kind == 0:
        layer = Fc(vals[0], vals[1], vals[2])
    elif kind == 1:
        layer = Conv(*vals[:9])
    else:
        raise ScheduleError(f"bad layer kind {kind}")
    return layer, Tiling(gemm_view(layer), vals[9], vals[10])


# -- tensor packing ---------------------------------------------------------------

def pack_inputs(layer: LayerDesc, x: np.ndarray) -> bytes:
    """(c_in, h, w) for conv or (batch, n_in) for FC -> padded channel-major int8."""
    if isinstance(layer, Fc):
        return np.ascontiguousarray(np.asarray(x, np.int8).reshape(layer.batch, layer.n_in).T).tobytes()
    x = np.asarray(x, np.int8).reshape(layer.c_in, layer.h_in, layer.w_in)
    p = layer.pad
    return np.pad(x, ((0, 0), (p, p), (p, p))).tobytes()


def pack_weights(layer: LayerDesc, w: np.ndarray, tiling: Tiling) -> bytes:
    """(c_out, c_in, kh, kw) for conv or (n_out, n_in) for FC -> tile-major int8."""
    v = tiling.view
    w = np.asarray(w, np.int8).reshape(v.c_out, v.c_in, v.kh, v.kw)
    return b"".join(w[oc_lo:oc_hi, ic_lo:ic_hi].tobytes() for oc_lo, oc_hi, ic_lo, ic_hi, _ in tiling.tiles())


def unpack_output(layer: LayerDesc, blob: bytes) -> np.ndarray:
    v = gemm_view(layer)
    out = np.frombuffer(blob, np.int8).reshape(v.c_out, v.h_out, v.w_out)
    if isinstance(layer, Fc):
        return out.reshape(layer.n_out, layer.batch).T.copy()
    return out.copy()


def random_operands(layer: LayerDesc, seed: int) -> tuple[np.ndarray, np.ndarray]:
    gen = np.random.default_rng(seed)
    if isinstance(layer, Fc):
        x_shape, w_shape = (layer.batch, layer.n_in), (layer.n_out, layer.n_in)
    else:
        x_shape, w_shape = (layer.c_in, layer.h_in, layer.w_in), (layer.c_out, layer.c_in, layer.kh, layer.kw)
    x = gen.integers(-128, 128, size=x_shape, dtype=np.int8)
    w = gen.integers(-128, 128, size=w_shape, dtype=np.int8)
    return x, w


# -- the GEMM core -----------------------------------------------------------------

class TileMachine:
    """On-chip buffers plus the GEMM core; fed byte-for-byte by Load ops."""

    def __init__(self, layer: LayerDesc, tiling: Tiling):
        self.layer = layer
        self.tiling = tiling
        self.view = tiling.view
        self.shift = requant_shift(layer)
        self.buffers = {
            "inp": bytearray(tiling.input_bytes),
            "wgt": bytearray(tiling.weight_bytes),
            "out": bytearray(tiling.output_bytes),
        }
        self.acc = np.zeros((self.view.c_out, self.view.spatial_out), np.int64)
        self._wgt_offsets = {(t[0], t[2]): t[4] for t in tiling.tiles()}

    def load(self, tensor: str, offset: int, data: bytes) -> None:
        buf = self.buffers.get(tensor)
        if buf is None or tensor == "out" or offset + len(data) > len(buf):
            raise ScheduleError(f"load into {tensor!r} at {offset} out of range")
        buf[offset:offset + len(data)] = data

    def compute(self, op: Compute) -> None:
        v = self.view
        oc_lo, oc_hi, ic_lo, ic_hi = op.tile
        if (oc_lo, ic_lo) not in self._wgt_offsets or not (oc_lo < oc_hi <= v.c_out and ic_lo < ic_hi <= v.c_in):
            raise ScheduleError(f"compute tile {op.tile} does not match the tiling")
        n_oc, n_ic = oc_hi - oc_lo, ic_hi - ic_lo
        w_off = self._wgt_offsets[(oc_lo, ic_lo)]
        w = np.frombuffer(self.buffers["wgt"], np.int8, n_oc * n_ic * v.kh * v.kw, w_off)
        x = np.frombuffer(self.buffers["inp"], np.int8, n_ic * v.hp * v.wp, ic_lo * v.hp * v.wp)
        x = x.reshape(n_ic, v.hp, v.wp)
        cols = np.lib.stride_tricks.sliding_window_view(x, (v.kh, v.kw), axis=(1, 2))
        cols = cols[:, ::v.stride, ::v.stride][:, :v.h_out, :v.w_out]
        cols = cols.transpose(0, 3, 4, 1, 2).reshape(n_ic * v.kh * v.kw, v.spatial_out)
        # float64 GEMM is exact here: |partial sums| < 2**53
        part = w.reshape(n_oc, -1).astype(np.float64) @ cols.astype(np.float64)
        self.acc[oc_lo:oc_hi] += part.astype(np.int64)
        if ic_hi == v.c_in:
            q = np.clip(self.acc[oc_lo:oc_hi] >> self.shift, -128, 127).astype(np.int8)
            start = oc_lo * v.spatial_out
            self.buffers["out"][start:start + q.size] = q.tobytes()
            self.acc[oc_lo:oc_hi] = 0

    def store_bytes(self, offset: int, nbytes: int) -> bytes:
        out = self.buffers["out"]
        if offset + nbytes > len(out):
            raise ScheduleError(f"store at {offset} out of range")
        return bytes(out[offset:offset + nbytes])


def reference_execute(layer: LayerDesc, schedule, inputs: np.ndarray, weights: np.ndarray,
                      tiling: Tiling | None = None) -> np.ndarray:
    """Crypto-free execution of the same schedule on plain packed tensors."""
    tiling = tiling or choose_tiling(layer, CoreParams())
    plain = {"inp": pack_inputs(layer, inputs), "wgt": pack_weights(layer, weights, tiling)}
    machine = TileMachine(layer, tiling)
    result = bytearray(tiling.output_bytes)
    for op in schedule:
        if isinstance(op, Load):
            if op.tensor in plain:
                machine.load(op.tensor, op.offset, plain[op.tensor][op.offset:op.offset + op.nbytes])
        elif isinstance(op, Compute):
            machine.compute(op)
        else:
            result[op.offset:op.offset + op.nbytes] = machine.store_bytes(op.offset, op.nbytes)
    return unpack_output(layer, bytes(result))


def full_schedule(layer: LayerDesc, params: SimParams) -> list:
    """Code fetch, descriptor fetch, then the layer's tile schedule."""
    body = tile_schedule(layer, params.core, params.piece_size)
    s = params.piece_size
    code_len = len(body) * INSN_BYTES
    head = [Load(min(s, code_len - off), "insn", off) for off in range(0, code_len, s)]
    head.append(Load(LAYER_DESC_BYTES, "uop", 0))
    return head + body


# -- device ------------------------------------------------------------------------

class KernelError(Exception):
    pass


@dataclass
class KernelStatus:
    launches: int = 0
    completed: int = 0
    errors: list[Exception] = field(default_factory=list)


class Accelerator:
    """The trusted device: attestation endpoint, register port and kernel executor."""

    def __init__(self, identity: att.DeviceIdentity, dram: mp.UntrustedDram, mode=Mode.FULL,
                 core: CoreParams | None = None, rng=None):
        self.identity = identity
        self.dram = dram
        self.mode = Mode.parse(mode)
        self.core = core or CoreParams()
        self._rng = rng
        self._session: att.DeviceSession | None = None
        self._key: cc.SymmetricKey | None = None
        self.port = rp.DeviceRegisterPort(None, protected=self.mode is Mode.FULL)
        self.status = KernelStatus()
        self.staging = mp.StagingBuffer()

    # attestation endpoint
    def begin(self, group=cc.MODP_2048, allow_small_group=False) -> att.Msg1:
        self._session, msg1 = att.device_begin(self.identity, self._rng, group, allow_small_group)
        return msg1

    def offer(self) -> att.Msg2:
        return self._session.offer()

    def complete(self, msg3: att.Msg3) -> str:
        self._key = self._session.complete(msg3)
        self.port.reset(self._key)
        return self._key.fingerprint()

    # MMIO
    def mmio_write(self, offset: int, value: int) -> bool:
        launched = self.port.write(offset, value)
        if launched:
            self.run_kernel()
        return launched

    def _launch_number(self) -> int:
        return self.port.last_nonce if self.port.protected else self.status.launches

    def run_kernel(self) -> None:
        self.status.launches += 1
        try:
            self._execute(dict(self.port.regs), self._launch_number())
        except Exception as exc:
            self.status.errors.append(exc)
            raise
        self.status.completed += 1

    def _region(self, role: str, launch: int, base: int, length: int, mode: Mode, s: int, meta: int | None):
        m = -(-length // s)
        return mp.ProtectedRegion(region_id(launch, role), base, meta if mode is Mode.FULL else None, m, length,
                                  s, mode, role == "out", [0] * m)

    def _execute(self, regs: dict[str, int], launch: int) -> None:
        mode_name, s, _ = rp.decode_control(regs["control"])
        mode = Mode(mode_name)
        if mode is not self.mode:
            raise KernelError(f"control register requests {mode_name}, device is built for {self.mode.value}")
        if mode is not Mode.OFF and self._key is None:
            raise KernelError("no session key established")
        if not 16 <= s <= mp.STAGING_BYTES or s % 16:
            raise KernelError(f"bad piece size {s}")
        key = self._key
        meta = regs["meta_addr"]

        def next_meta(region):
            nonlocal meta
            meta += region.meta_bytes

        insn = self._region("insn", launch, regs["insn_addr"], regs["insn_count"] * INSN_BYTES, mode, s, meta)
        next_meta(insn)
        uop = self._region("uop", launch, regs["uop_addr"], LAYER_DESC_BYTES, mode, s, meta)
        next_meta(uop)
        code = b"".join(mp.device_fetch_piece(self.dram, insn, i, key, self.staging) for i in range(insn.m))
        desc = mp.device_fetch_piece(self.dram, uop, 0, key, self.staging)
        layer, tiling = decode_layer(desc)
        schedule = decode_schedule(code)
        regions = {}
        for role, addr, length in (("inp", regs["inp_addr"], tiling.input_bytes),
                                   ("wgt", regs["wgt_addr"], tiling.weight_bytes),
                                   ("out", regs["out_addr"], tiling.output_bytes)):
            regions[role] = self._region(role, launch, addr, length, mode, s, meta)
            next_meta(regions[role])
        mp.check_version_budget(regions.values())

        machine = TileMachine(layer, tiling)
        for op in schedule:
            if isinstance(op, Load):
                region = regions.get(op.tensor)
                if region is None or op.tensor == "out" or op.offset % s:
                    raise KernelError(f"bad load {op}")
                piece = mp.device_fetch_piece(self.dram, region, op.offset // s, key, self.staging)
                machine.load(op.tensor, op.offset, piece[:op.nbytes])
            elif isinstance(op, Compute):
                machine.compute(op)
            else:
                out = regions["out"]
                if op.offset % s or op.nbytes != out.piece_len(op.offset // s):
                    raise KernelError(f"store {op} is not a whole output piece")
                mp.device_write_piece(self.dram, out, op.offset // s, machine.store_bytes(op.offset, op.nbytes), key)


# -- host enclave runtime ----------------------------------------------------------------

class Driver:
    """Untrusted kernel-mode driver: forwards register writes over MMIO."""

    def __init__(self, device: Accelerator, tap=None):
        self.device = device
        self.tap = tap
        self.trace: list[tuple[int, int]] = []

    def write_registers(self, writes: list[tuple[int, int]]) -> None:
        if self.tap is not None:
            writes = self.tap(list(writes))
        for offset, value in writes:
            self.trace.append((offset, value))
            self.device.mmio_write(offset, value)

    def trace_json(self) -> list[dict]:
        return [{"offset": off, "value": val} for off, val in self.trace]


@dataclass
class LaunchRecord:
    layer: LayerDesc
    regions: dict[str, mp.ProtectedRegion]
    schedule: list
    envelope: rp.RegisterEnvelope


class HostRuntime:
    """User-mode runtime inside the enclave: seals tensors, keeps the register shadow."""

    def __init__(self, key: cc.SymmetricKey | None, dram: mp.UntrustedDram, driver: Driver, mode=Mode.FULL,
                 params: SimParams | None = None):
        self.key = key
        self.dram = dram
        self.driver = driver
        self.mode = Mode.parse(mode)
        self.params = params or SimParams()
        self.shadow = rp.ShadowState()
        self.launches = 0
        self.history: list[LaunchRecord] = []

    def _config(self) -> mp.ProtectionConfig:
        key = self.key or cc.SymmetricKey(bytes(32))
        return mp.ProtectionConfig(key, self.params.piece_size, self.mode)

    def stage(self, layer: LayerDesc, inputs: np.ndarray, weights: np.ndarray) -> LaunchRecord:
        """Seal all regions and build the envelope, without launching."""
        if self.mode is not Mode.OFF and self.key is None:
            raise KernelError("attest the device before offloading")
        tiling = choose_tiling(layer, self.params.core)
        body = tile_schedule(layer, self.params.core, self.params.piece_size, tiling)
        launch = self.shadow.next_nonce if self.mode is Mode.FULL else self.launches + 1
        payloads = {
            "insn": encode_schedule(body),
            "uop": encode_layer(layer, tiling),
            "inp": pack_inputs(layer, inputs),
            "wgt": pack_weights(layer, weights, tiling),
            "out": bytes(tiling.output_bytes),
        }
        cfg = self._config()
        s = cfg.piece_size
        meta_total = sum(-(-len(p) // s) for p in payloads.values()) * mp.META_ENTRY_BYTES
        meta_base = self.dram.alloc(meta_total) if self.mode is Mode.FULL else 0
        regions, meta = {}, meta_base
        for role in ROLES:
            regions[role] = mp.seal_region(self.dram, cfg, region_id(launch, role), payloads[role],
                                           writable=role == "out", meta_addr=meta if self.mode is Mode.FULL else None)
            meta += regions[role].meta_bytes
        writes = [
            ("insn_addr", regions["insn"].base_addr),
            ("insn_count", len(body)),
            ("uop_addr", regions["uop"].base_addr),
            ("inp_addr", regions["inp"].base_addr),
            ("wgt_addr", regions["wgt"].base_addr),
            ("out_addr", regions["out"].base_addr),
            ("meta_addr", meta_base),
            ("control", rp.encode_control(self.mode.value, s)),
        ]
        envelope = rp.host_commit_registers(self.shadow, writes, self.key or cc.SymmetricKey(bytes(32)))
        self.launches += 1
        record = LaunchRecord(layer, regions, body, envelope)
        self.history.append(record)
        return record

    def launch(self, record: LaunchRecord) -> None:
        self.driver.write_registers(record.envelope.mmio_writes())

    def collect(self, record: LaunchRecord) -> np.ndarray:
        out = record.regions["out"]
        # every output piece is written exactly once by the schedule
        out.versions = [1] * out.m
        blob = mp.host_read_region(self.dram, out, self.key or cc.SymmetricKey(bytes(32)))
        return unpack_output(record.layer, blob)

    def run_layer(self, layer: LayerDesc, inputs: np.ndarray, weights: np.ndarray) -> np.ndarray:
        record = self.stage(layer, inputs, weights)
        self.launch(record)
        return self.collect(record)


# -- whole platform ------------------------------------------------------------------

@dataclass
class SystemConfig:
    mode: Mode = Mode.FULL
    seed: int | None = 0
    piece_size: int = mp.STAGING_BYTES
    dram_bytes: int = DEFAULT_DRAM_BYTES
    params: SimParams | None = None
    group: cc.DhGroup = cc.MODP_2048
    allow_small_group: bool = False

    def __post_init__(self):
        self.mode = Mode.parse(self.mode)
        if self.params is None:
            self.params = SimParams(piece_size=self.piece_size)
        elif self.params.piece_size != self.piece_size:
            self.piece_size = self.params.piece_size


class TrustedPlatform:
    """CA + device + enclave runtime wired through untrusted DRAM, MMIO and network.

    ``channel_tap``/``mmio_tap`` are the adversary's hooks on the handshake
    messages and the driver's register writes; DRAM is reachable through
    ``self.dram`` (``raw`` for direct access, ``taps`` for bus snooping).
    """

    def __init__(self, config: SystemConfig | None = None, channel_tap=None, mmio_tap=None):
        self.config = config or SystemConfig()
        self.rng = random.Random(self.config.seed) if self.config.seed is not None else cc.system_rng()
        self.ca = att.CaRegistry(self.rng)
        self.identity = att.DeviceIdentity.manufacture(b"accel-0001", self.rng)
        self.ca.register(self.identity)
        self.dram = mp.UntrustedDram(self.config.dram_bytes)
        self.device = Accelerator(self.identity, self.dram, self.config.mode, self.config.params.core, self.rng)
        self.driver = Driver(self.device, mmio_tap)
        self.channel_tap = channel_tap
        self.host = HostRuntime(None, self.dram, self.driver, self.config.mode, self.config.params)
        self.transcript: att.Transcript | None = None

    def establish(self) -> cc.SymmetricKey:
        """Run the handshake with the accelerator; returns the host's copy of K."""
        cfg = self.config
        tap = self.channel_tap
        transcript = att.Transcript()

        def hop(label, msg):
            msg = tap(label, msg) if tap is not None else msg
            transcript.add(label, msg)
            return msg

        self.transcript = transcript
        session = att.HostSession(self.ca.public_key, self.rng, cfg.allow_small_group)
        msg1 = hop("device->host", self.device.begin(cfg.group, cfg.allow_small_group))
        session.receive_msg1(msg1)
        cert = hop("ca->host", att.ca_certify(self.ca, self.identity.device_id, hop("host->ca", msg1)))
        session.accept_certificate(cert)
        msg3, key = session.respond(hop("device->host", self.device.offer()))
        self.device.complete(hop("host->device", msg3))
        self.host.key = key
        self.host.shadow = rp.ShadowState()
        return key

    def run_layer(self, layer: LayerDesc, inputs: np.ndarray, weights: np.ndarray) -> np.ndarray:
        if self.host.key is None and self.config.mode is not Mode.OFF:
            self.establish()
        return self.host.run_layer(layer, inputs, weights)
