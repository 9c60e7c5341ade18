import os
import random

import pytest
from hypothesis import given, strategies as st

from teeaccel import crypto_core as cc
from teeaccel import memory_protection as mp
from teeaccel.memory_protection import Mode

KEY = cc.SymmetricKey(bytes(range(32)))


def cfg(s=2048, mode=Mode.FULL):
    return mp.ProtectionConfig(KEY, s, mode)


def windows16(data: bytes) -> set[bytes]:
    return {data[i:i + 16] for i in range(len(data) - 15)}


def test_piece_split():
    dram = mp.UntrustedDram(1 << 16)
    r = mp.seal_region(dram, cfg(), 1, bytes(5000))
    assert r.m == 3
    assert [r.piece_len(i) for i in range(3)] == [2048, 2048, 904]
    assert r.meta_bytes == 3 * mp.META_ENTRY_BYTES


def test_off_mode_is_verbatim():
    dram = mp.UntrustedDram(1 << 16)
    pt = os.urandom(3000)
    r = mp.seal_region(dram, cfg(mode=Mode.OFF), 1, pt)
    assert bytes(dram.raw[r.base_addr:r.base_addr + len(pt)]) == pt
    assert r.meta_addr is None


def test_trusted_dram_means_off():
    dram = mp.UntrustedDram(1 << 16, trusted=True)
    pt = os.urandom(100)
    r = mp.seal_region(dram, cfg(), 1, pt)
    assert r.mode is Mode.OFF and bytes(dram.raw[r.base_addr:r.base_addr + 100]) == pt


def test_ctr_writes_no_tags():
    dram = mp.UntrustedDram(1 << 16)
    r = mp.seal_region(dram, cfg(mode=Mode.CTR), 1, os.urandom(300))
    assert r.meta_addr is None and dram.used < 320


def test_full_mode_no_plaintext_window_in_dram():
    dram = mp.UntrustedDram(1 << 16)
    pt = random.Random(3).randbytes(4096)
    mp.seal_region(dram, cfg(), 9, pt)
    image = bytes(dram.raw[:dram.used])
    assert windows16(image).isdisjoint(windows16(pt))


def test_rule1_every_bus_transfer_is_ciphertext():
    dram = mp.UntrustedDram(1 << 16)
    seen = []
    dram.taps.append(seen.append)
    pt = random.Random(4).randbytes(4096)
    r = mp.seal_region(dram, cfg(s=512), 2, pt)
    for i in range(r.m):
        mp.device_fetch_piece(dram, r, i, KEY)
    secret = windows16(pt)
    assert seen and all(windows16(t.data).isdisjoint(secret) for t in seen)


def test_fetch_untampered():
    dram = mp.UntrustedDram(1 << 16)
    pt = os.urandom(5000)
    r = mp.seal_region(dram, cfg(), 1, pt)
    assert mp.device_fetch_piece(dram, r, 2, KEY) == pt[4096:]


def test_fetch_reads_only_piece_and_its_metadata():
    dram = mp.UntrustedDram(1 << 16)
    r = mp.seal_region(dram, cfg(s=256), 1, os.urandom(1024))
    reads = []
    dram.taps.append(lambda t: reads.append((t.addr, len(t.data))) if t.op == "read" else None)
    mp.device_fetch_piece(dram, r, 2, KEY)
    assert reads == [(r.base_addr + 512, 256), (r.meta_addr + 2 * mp.META_ENTRY_BYTES, mp.META_ENTRY_BYTES)]


def swap(dram, r, a, b):
    for base, size in ((r.base_addr, r.piece_size), (r.meta_addr, mp.META_ENTRY_BYTES)):
        pa, pb = base + a * size, base + b * size
        da, db = bytes(dram.raw[pa:pa + size]), bytes(dram.raw[pb:pb + size])
        dram.raw[pa:pa + size], dram.raw[pb:pb + size] = db, da


def test_swapped_pieces_detected():
    dram = mp.UntrustedDram(1 << 16)
    r = mp.seal_region(dram, cfg(s=256), 1, os.urandom(1024))
    swap(dram, r, 0, 1)
    for i in (0, 1):
        with pytest.raises(mp.IntegrityError) as e:
            mp.device_fetch_piece(dram, r, i, KEY)
        assert e.value.index == i
    assert mp.device_fetch_piece(dram, r, 2, KEY)


def test_any_two_pieces_swapped_detected():
    dram = mp.UntrustedDram(1 << 16)
    r = mp.seal_region(dram, cfg(s=64), 1, os.urandom(64 * 6))
    for a in range(6):
        for b in range(a + 1, 6):
            swap(dram, r, a, b)
            for i in (a, b):
                with pytest.raises(mp.IntegrityError):
                    mp.device_fetch_piece(dram, r, i, KEY)
            swap(dram, r, a, b)


def test_piece_moved_between_regions():
    dram = mp.UntrustedDram(1 << 16)
    a = mp.seal_region(dram, cfg(s=128), 1, os.urandom(256))
    b = mp.seal_region(dram, cfg(s=128), 2, os.urandom(256))
    dram.raw[b.base_addr:b.base_addr + 128] = dram.raw[a.base_addr:a.base_addr + 128]
    dram.raw[b.meta_addr:b.meta_addr + 20] = dram.raw[a.meta_addr:a.meta_addr + 20]
    with pytest.raises(mp.IntegrityError):
        mp.device_fetch_piece(dram, b, 0, KEY)


def test_write_then_fetch_roundtrip_and_fresh_nonce():
    dram = mp.UntrustedDram(1 << 16)
    r = mp.seal_region(dram, cfg(s=128), 5, bytes(256), writable=True)
    new = os.urandom(128)
    mp.device_write_piece(dram, r, 1, new, KEY)
    first = bytes(dram.raw[r.base_addr + 128:r.base_addr + 256])
    assert r.versions == [0, 1]
    assert mp.device_fetch_piece(dram, r, 1, KEY) == new
    mp.device_write_piece(dram, r, 1, new, KEY)
    second = bytes(dram.raw[r.base_addr + 128:r.base_addr + 256])
    assert r.versions == [0, 2] and first != second


def test_stale_version_replay_detected():
    dram = mp.UntrustedDram(1 << 16)
    r = mp.seal_region(dram, cfg(s=128), 5, bytes(256), writable=True)
    mp.device_write_piece(dram, r, 0, b"a" * 128, KEY)
    ct0 = bytes(dram.raw[r.base_addr:r.base_addr + 128])
    meta0 = bytes(dram.raw[r.meta_addr:r.meta_addr + 20])
    mp.device_write_piece(dram, r, 0, b"b" * 128, KEY)
    dram.raw[r.base_addr:r.base_addr + 128] = ct0
    dram.raw[r.meta_addr:r.meta_addr + 20] = meta0
    with pytest.raises(mp.IntegrityError):
        mp.device_fetch_piece(dram, r, 0, KEY)
    # a forged version field on top of the stale pair does not help either
    dram.raw[r.meta_addr:r.meta_addr + 4] = (2).to_bytes(4, "big")
    with pytest.raises(mp.IntegrityError):
        mp.device_fetch_piece(dram, r, 0, KEY)


def test_read_only_regions_reject_writes():
    dram = mp.UntrustedDram(1 << 16)
    r = mp.seal_region(dram, cfg(s=128), 5, bytes(128))
    with pytest.raises(mp.ConfigError):
        mp.device_write_piece(dram, r, 0, bytes(128), KEY)


def test_write_length_must_match():
    dram = mp.UntrustedDram(1 << 16)
    r = mp.seal_region(dram, cfg(s=128), 5, bytes(200), writable=True)
    with pytest.raises(ValueError):
        mp.device_write_piece(dram, r, 1, bytes(128), KEY)


def test_version_overflow_aborts():
    dram = mp.UntrustedDram(1 << 16)
    r = mp.seal_region(dram, cfg(s=128), 5, bytes(128), writable=True)
    r.versions[0] = mp.MAX_VERSION
    with pytest.raises(mp.VersionOverflow):
        mp.device_write_piece(dram, r, 0, bytes(128), KEY)


def test_host_read_untouched():
    dram = mp.UntrustedDram(1 << 16)
    pt = os.urandom(777)
    r = mp.seal_region(dram, cfg(s=256), 3, pt)
    assert mp.host_read_region(dram, r, KEY) == pt


def test_exhaustive_bitflip_sweep_256_bytes():
    """Every bit of ciphertext and metadata: IntegrityError before the piece is returned."""
    dram = mp.UntrustedDram(1 << 12)
    pt = random.Random(8).randbytes(256)
    r = mp.seal_region(dram, cfg(s=64), 11, pt)
    spans = [(r.base_addr, 256, lambda off: off // 64), (r.meta_addr, r.meta_bytes, lambda off: off // 20)]
    flips = 0
    for base, n, piece_of in spans:
        for off in range(n):
            for bit in range(8):
                dram.raw[base + off] ^= 1 << bit
                with pytest.raises(mp.IntegrityError) as e:
                    mp.device_fetch_piece(dram, r, piece_of(off), KEY)
                assert e.value.index == piece_of(off)
                with pytest.raises(mp.IntegrityError):
                    mp.host_read_region(dram, r, KEY)
                dram.raw[base + off] ^= 1 << bit
                flips += 1
    assert flips == 8 * (256 + 4 * mp.META_ENTRY_BYTES)
    assert mp.host_read_region(dram, r, KEY) == pt


def test_ctr_mode_tamper_goes_unnoticed():
    dram = mp.UntrustedDram(1 << 12)
    pt = os.urandom(256)
    r = mp.seal_region(dram, cfg(s=64, mode=Mode.CTR), 1, pt)
    dram.raw[r.base_addr + 10] ^= 0x04
    got = mp.host_read_region(dram, r, KEY)
    assert got != pt and got[10] == pt[10] ^ 0x04


@given(st.binary(min_size=1, max_size=3000), st.sampled_from([16, 48, 256, 2048]),
       st.sampled_from(list(Mode)))
def test_roundtrip_and_size_identity(pt, s, mode):
    dram = mp.UntrustedDram(1 << 13)
    r = mp.seal_region(dram, cfg(s=s, mode=mode), 77, pt)
    assert r.m == -(-len(pt) // s)
    assert mp.host_read_region(dram, r, KEY) == pt
    # ciphertext occupies exactly len(pt) bytes at base_addr
    assert r.length == len(pt)


def test_nonce_and_aad_layout():
    nc = mp.piece_nonce(1, 2, 3)
    assert nc.nonce == bytes.fromhex("000000010000000200000003")
    assert mp.piece_aad(1, 2, 3, 64)[-4:] == (64).to_bytes(4, "big")


def test_config_validation():
    for s in (0, 8, 17, 4096):
        with pytest.raises(mp.ConfigError):
            cfg(s=s)
    assert Mode.parse("ctr") is Mode.CTR and Mode.parse("CtrOnly") is Mode.CTR
    with pytest.raises(ValueError):
        Mode.parse("bogus")


def test_out_of_dram_and_empty():
    dram = mp.UntrustedDram(100)
    with pytest.raises(mp.OutOfDram):
        mp.seal_region(dram, cfg(), 1, bytes(200))
    with pytest.raises(ValueError):
        mp.seal_region(dram, cfg(), 1, b"")


def test_version_budget():
    dram = mp.UntrustedDram(1 << 20)
    small = mp.seal_region(dram, cfg(s=16), 1, bytes(1024), writable=True)
    assert mp.check_version_budget([small]) == 64 * 4
    with pytest.raises(mp.ConfigError):
        mp.check_version_budget([small], budget_bytes=100)
    ro = mp.seal_region(dram, cfg(s=16), 2, bytes(1024))
    assert mp.check_version_budget([ro]) == 0


def test_staging_capacity():
    buf = mp.StagingBuffer()
    assert bytes(buf.load(b"x" * 2048)) == b"x" * 2048
    with pytest.raises(mp.ConfigError):
        buf.load(bytes(2049))


def test_dump_and_load_image(tmp_path):
    dram = mp.UntrustedDram(1 << 14)
    pt = os.urandom(1000)
    r = mp.seal_region(dram, cfg(s=256), 4, pt)
    mp.dump_image(dram, [r], tmp_path / "img")
    dram2, (r2,) = mp.load_image(tmp_path / "img.json")
    assert r2.layout() == r.layout()
    assert mp.host_read_region(dram2, r2, KEY) == pt
