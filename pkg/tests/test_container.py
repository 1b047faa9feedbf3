import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from gsmoe import container
from gsmoe.data import VideoRecord, load_container, save_container
from gsmoe.errors import BadMagicError, ContainerError, TruncatedPayloadError, VersionMismatchError

finite32 = st.floats(width=32, allow_nan=False, allow_infinity=False)


def _write(tmp_path, arrays=None):
    path = tmp_path / "c.gsmk"
    arrays = arrays if arrays is not None else [("f4", np.arange(6, dtype=np.float32).reshape(2, 3)),
                                                ("f8", np.linspace(0, 1, 4))]
    container.write(path, arrays, {"kind": "test"})
    return path


def test_round_trip_both_dtypes(tmp_path):
    path = _write(tmp_path)
    head, arrays = container.read(path)
    assert head["kind"] == "test" and head["version"] == 1
    assert arrays[0].dtype == np.float32 and arrays[0].shape == (2, 3)
    np.testing.assert_array_equal(arrays[1], np.linspace(0, 1, 4))


def test_layout_starts_with_magic_and_header_length(tmp_path):
    blob = _write(tmp_path).read_bytes()
    assert blob[:6] == b"GSMK1\n"
    (hlen,) = struct.unpack("<I", blob[6:10])
    assert blob[10:10 + hlen].startswith(b"{")
    assert len(blob) == 10 + hlen + 6 * 4 + 4 * 8


def test_bad_magic(tmp_path):
    path = _write(tmp_path)
    blob = bytearray(path.read_bytes())
    blob[0] = ord("X")
    path.write_bytes(bytes(blob))
    with pytest.raises(BadMagicError, match="bad magic"):
        container.read(path)


def test_version_mismatch(tmp_path):
    path = _write(tmp_path)
    blob = bytearray(path.read_bytes())
    blob[4] = ord("2")
    path.write_bytes(bytes(blob))
    with pytest.raises(VersionMismatchError):
        container.read(path)


@pytest.mark.parametrize("cut", [1, 7, 100])
def test_truncated_payload(tmp_path, cut):
    path = _write(tmp_path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-cut])
    with pytest.raises(TruncatedPayloadError, match="truncated payload"):
        container.read(path)


def test_inconsistent_declared_shape(tmp_path):
    path = _write(tmp_path)
    blob = path.read_bytes()
    (hlen,) = struct.unpack("<I", blob[6:10])
    head = blob[10:10 + hlen].replace(b"[2, 3]", b"[3, 3]")
    path.write_bytes(blob[:6] + struct.pack("<I", len(head)) + head + blob[10 + hlen:])
    with pytest.raises(TruncatedPayloadError, match="truncated payload"):
        container.read(path)


def test_errors_share_a_base_class():
    for e in (BadMagicError, VersionMismatchError, TruncatedPayloadError):
        assert issubclass(e, ContainerError)


records = st.lists(
    st.tuples(arrays(np.float32, array_shapes(min_dims=2, max_dims=2, max_side=12),
                     elements=finite32),
              st.integers(-1, 5), st.booleans()),
    min_size=1, max_size=6)


@settings(max_examples=50)
@given(records)
def test_dataset_round_trip_is_bit_exact(tmp_path_factory, recs):
    path = tmp_path_factory.mktemp("rt") / "d.gsmk"
    built = [VideoRecord(f"v{i}", x, int(c >= 0), c,
                         (np.arange(len(x)) % 2).astype(float) if gt else None)
             for i, (x, c, gt) in enumerate(recs)]
    save_container(path, built)
    back = load_container(path)
    assert len(back) == len(built)
    for r, s in zip(built, back):
        assert s.features.tobytes() == r.features.tobytes()
        assert (s.id, s.video_label, s.class_id) == (r.id, r.video_label, r.class_id)
        assert (s.snippet_gt is None) == (r.snippet_gt is None)
