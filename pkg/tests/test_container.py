import numpy as np
import pytest

from rinq.container import ContainerError, canonical_json, digest, read_container, write_container


def test_roundtrip(tmp_path):
    planes = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([1.5], np.float32)}
    write_container(tmp_path / "x", b"TEST", {"k": [1, 2]}, planes)
    h, back = read_container(tmp_path / "x", b"TEST")
    assert h["k"] == [1, 2] and list(back) == ["a", "b"]
    np.testing.assert_array_equal(back["a"], planes["a"])


def test_layout_bytes(tmp_path):
    write_container(tmp_path / "x", b"TEST", {}, {"p": np.array([1.0], np.float32)})
    raw = (tmp_path / "x").read_bytes()
    header = canonical_json({"planes": [{"name": "p", "shape": [1]}]}).encode()
    assert raw == b"TEST" + len(header).to_bytes(4, "little") + header + b"\x00\x00\x80\x3f"


def test_bad_magic_and_trailing(tmp_path):
    write_container(tmp_path / "x", b"TEST", {}, {"p": np.zeros(2, np.float32)})
    with pytest.raises(ContainerError):
        read_container(tmp_path / "x", b"NOPE")
    (tmp_path / "x").write_bytes((tmp_path / "x").read_bytes() + b"\0")
    with pytest.raises(ContainerError):
        read_container(tmp_path / "x", b"TEST")


def test_digest_ignores_key_order():
    assert digest({"a": 1, "b": 2}) == digest({"b": 2, "a": 1})
    assert len(digest({})) == 16
