import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualmim.errors import FormatError, VersionMismatchError
from dualmim.synthdata import PairedTile, generate_corpus, DEFAULT_PRESETS
from dualmim.tileio import (
    SIGMA_FLOOR,
    NormStats,
    compute_all_stats,
    compute_city_stats,
    decode_tile,
    denormalize,
    encode_tile,
    load_dataset,
    normalize,
    read_manifest,
    read_stats,
    read_tile,
    save_dataset,
    write_stats,
    write_tile,
)


def _same(a: PairedTile, b: PairedTile) -> bool:
    return (
        a.rgb.tobytes() == b.rgb.tobytes()
        and a.dsm.tobytes() == b.dsm.tobytes()
        and a.labels.tobytes() == b.labels.tobytes()
        and a.city == b.city
        and a.tile_id == b.tile_id
    )


def test_tile_roundtrip_bitwise(tmp_path, small_corpus):
    for t in small_corpus:
        path = tmp_path / f"{t.tile_id}.fmt"
        write_tile(t, path)
        assert _same(read_tile(path, tile_id=t.tile_id), t)


def test_header_layout(small_corpus):
    t = small_corpus[0]
    buf = encode_tile(t)
    magic, version, w, h = struct.unpack_from("<4sHII", buf)
    assert (magic, version, w, h) == (b"FMT1", 1, 16, 16)
    assert len(buf) == 14 + 16 * 16 * (12 + 4 + 1) + 4 + len(t.city.encode())


def test_truncated_file_reports_offset(small_corpus):
    buf = encode_tile(small_corpus[0])
    with pytest.raises(FormatError) as info:
        decode_tile(buf[:-1])
    assert info.value.offset is not None
    with pytest.raises(FormatError):
        decode_tile(buf[:10])
    with pytest.raises(FormatError):
        decode_tile(buf + b"\0")


def test_bad_magic_and_version(small_corpus):
    buf = bytearray(encode_tile(small_corpus[0]))
    bad = bytes(b"XXXX" + buf[4:])
    with pytest.raises(FormatError) as info:
        decode_tile(bad)
    assert not isinstance(info.value, VersionMismatchError)
    struct.pack_into("<H", buf, 4, 999)
    with pytest.raises(VersionMismatchError):
        decode_tile(bytes(buf))


@settings(max_examples=25, deadline=None)
@given(
    st.integers(1, 6),
    st.integers(1, 6),
    st.text(min_size=1, max_size=8).filter(lambda s: not any(c.isspace() for c in s)),
    st.integers(0, 2**31),
)
def test_roundtrip_property(h, w, city, seed):
    r = np.random.default_rng(seed)
    t = PairedTile(
        r.random((h, w, 3), dtype=np.float32),
        r.random((h, w, 1), dtype=np.float32) * 30,
        r.integers(0, 3, (h, w), dtype=np.uint8),
        city,
        seed,
    )
    assert _same(decode_tile(encode_tile(t), tile_id=seed), t)


def test_dataset_manifest_roundtrip(tmp_path, small_corpus):
    manifest = save_dataset(small_corpus, tmp_path)
    entries = read_manifest(manifest)
    assert [e.tile_id for e in entries] == [t.tile_id for t in small_corpus]
    assert all("\t" not in e.path for e in entries)
    loaded = load_dataset(manifest)
    assert all(_same(a, b) for a, b in zip(loaded, small_corpus))


def test_manifest_bad_line(tmp_path):
    p = tmp_path / "m.tsv"
    p.write_text("a\tb\n", encoding="utf-8")
    with pytest.raises(FormatError):
        read_manifest(p)


def _const_tile(rgb_value, dsm_values, city="c"):
    dsm = np.asarray(dsm_values, dtype=np.float32).reshape(1, -1, 1)
    w = dsm.shape[1]
    return PairedTile(np.full((1, w, 3), rgb_value, np.float32), dsm, np.zeros((1, w), np.uint8), city, 0)


def test_stats_examples():
    s = compute_city_stats([_const_tile(0.5, [2.0, 4.0])], "c")
    assert s.mu_rgb == (0.5, 0.5, 0.5)
    assert s.sigma_rgb == (SIGMA_FLOOR,) * 3
    assert s.mu_dsm == 3.0 and s.sigma_dsm == 1.0
    n = normalize(_const_tile(0.5, [2.0, 4.0]), s)
    assert np.all(n.rgb == 0.0)


def test_normalize_hand_example():
    s = NormStats("c", (4.0, 4.0, 4.0), (2.0, 2.0, 2.0), 4.0, 2.0)
    n = normalize(_const_tile(2.0, [2.0, 4.0, 6.0]), s)
    assert n.dsm.ravel().tolist() == [-1.0, 0.0, 1.0]
    assert np.all(n.rgb == -1.0)


def test_stats_errors_and_order_invariance(small_corpus):
    with pytest.raises(ValueError):
        compute_city_stats([], "c")
    with pytest.raises(ValueError):
        compute_city_stats(small_corpus, small_corpus[0].city)
    city = small_corpus[0].city
    mine = [t for t in small_corpus if t.city == city]
    a = compute_city_stats(mine, city)
    b = compute_city_stats(mine[::-1], city)
    assert np.allclose(a.mu_rgb, b.mu_rgb, rtol=1e-12) and np.isclose(a.sigma_dsm, b.sigma_dsm, rtol=1e-12)


def test_city_mismatch_rejected(small_corpus):
    stats = compute_all_stats(small_corpus)
    t = small_corpus[0]
    other = next(c for c in stats if c != t.city)
    with pytest.raises(ValueError):
        normalize(t, stats[other])
    with pytest.raises(ValueError):
        denormalize(t, stats[other])


def test_roundtrip_and_pooled_option(small_corpus):
    stats = compute_all_stats(small_corpus, per_channel_rgb=False)
    for t in small_corpus:
        s = stats[t.city]
        assert len(set(s.mu_rgb)) == 1
        back = denormalize(normalize(t, s), s)
        assert np.abs(back.rgb - t.rgb).max() < 1e-5
        assert np.abs(back.dsm - t.dsm).max() < 1e-5


def test_stats_file_roundtrip(tmp_path, small_corpus):
    stats = compute_all_stats(small_corpus)
    p = tmp_path / "stats.txt"
    write_stats(stats.values(), p)
    assert read_stats(p) == stats
    p.write_text("c 1 2 3\n", encoding="utf-8")
    with pytest.raises(FormatError):
        read_stats(p)
