import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mcds.dataset import (Dataset, Demonstration, ModalitySpec, Window, check_partition, labeling_window,
                          make_windows, read_dataset, window_frames, write_dataset)
from mcds.errors import FormatError, ValidationError


def _toy(T=5, seed=0):
    rng = np.random.default_rng(seed)
    mods = [ModalitySpec("a", 2, "L2"), ModalitySpec("b", 1, "L1")]
    demo = Demonstration("task", [rng.random((T, 2), dtype=np.float32), rng.random((T, 1), dtype=np.float32)],
                         rng.random((T, 3), dtype=np.float32), [("x", 1, 3), ("y", 3, T + 1)])
    return Dataset(mods, 3, [demo], seed=7)


def test_round_trip_identity(tmp_path, small_dataset):
    p = tmp_path / "d.mcds"
    write_dataset(small_dataset, p)
    back = read_dataset(p)
    assert back == small_dataset
    assert back.modalities == small_dataset.modalities and back.seed == small_dataset.seed


def test_write_twice_identical_bytes(tmp_path, small_dataset):
    write_dataset(small_dataset, tmp_path / "a")
    write_dataset(small_dataset, tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_wrong_magic_is_format_error(tmp_path):
    p = tmp_path / "d.mcds"
    write_dataset(_toy(), p)
    raw = bytearray(p.read_bytes())
    raw[:4] = b"XXXX"
    p.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        read_dataset(p)


def test_bad_version_and_truncation(tmp_path):
    p = tmp_path / "d.mcds"
    write_dataset(_toy(), p)
    raw = bytearray(p.read_bytes())
    bad = raw.copy()
    bad[4:8] = struct.pack("<I", 99)
    p.write_bytes(bytes(bad))
    with pytest.raises(FormatError):
        read_dataset(p)
    p.write_bytes(bytes(raw[:10]))
    with pytest.raises(FormatError):
        read_dataset(p)


def test_manifest_dim_mismatch_is_validation_error(tmp_path):
    import json

    p = tmp_path / "d.mcds"
    write_dataset(_toy(), p)
    raw = p.read_bytes()
    magic, ver, n = struct.unpack_from("<4sIQ", raw)
    head = json.loads(raw[16:16 + n])
    head["modalities"][0]["dim"] = 5
    new = json.dumps(head, sort_keys=True, separators=(",", ":")).encode()
    p.write_bytes(struct.pack("<4sIQ", magic, ver, len(new)) + new + raw[16 + n:])
    with pytest.raises(ValidationError):
        read_dataset(p)


def test_payload_is_float32_little_endian(tmp_path):
    ds = _toy(T=4)
    p = tmp_path / "d.mcds"
    write_dataset(ds, p)
    raw = p.read_bytes()
    n = struct.unpack_from("<Q", raw, 8)[0]
    payload = raw[16 + n:]
    first = np.frombuffer(payload[:4 * 8], dtype="<f4").reshape(4, 2)
    assert np.array_equal(first, ds.demos[0].obs[0])


def test_demo_validation():
    ds = _toy()
    ds.demos[0].actions = ds.demos[0].actions[:, :2]
    with pytest.raises(ValidationError):
        ds.validate()
    with pytest.raises(ValidationError):
        check_partition([(1, 3), (4, 6)], 5)
    with pytest.raises(ValidationError):
        check_partition([(1, 3), (3, 5)], 5)
    check_partition([(1, 3), (3, 6)], 5)


def test_labeling_window_examples():
    assert labeling_window(100, 60, 10)[0].start == 10
    w, off = labeling_window(100, 60, 50)
    assert (w.start, off) == (41, 9)
    w, off = labeling_window(30, 60, 30)
    assert w.start == 1 and w.padded_tail == 30


def test_short_demo_single_padded_window():
    ds = _toy(T=30)
    ws = make_windows(ds.demos[0], 60)
    assert ws == [Window(0, 1, 60, 30)]
    frames = window_frames(ds.demos[0], ws[0])
    for f, o in zip(frames, ds.demos[0].obs):
        assert f.shape[0] == 60
        assert np.array_equal(f[:30], o)
        assert all(np.array_equal(f[k], o[-1]) for k in range(30, 60))


def test_training_windows_cover_all_starts():
    ws = make_windows(25, 10)
    assert [w.start for w in ws] == list(range(1, 17))
    assert all(w.start + w.length - w.padded_tail - 1 <= 25 for w in ws)


@settings(max_examples=200, deadline=None)
@given(T=st.integers(1, 120), tc=st.integers(1, 70))
def test_each_timestep_has_one_labeling_window(T, tc):
    windows = {w.start: w for w in make_windows(T, tc, mode="label")}
    for t in range(1, T + 1):
        w, off = labeling_window(T, tc, t)
        assert w.start in windows
        assert w.start + off == t
        assert 0 <= off < w.length
        assert w.start >= 1 and w.start + w.length - w.padded_tail - 1 <= T
