import json

import numpy as np
import pytest

from rebalance.checkpoint import (MAGIC, CheckpointError, load_checkpoint, load_tensor, read_checkpoint,
                                  save_checkpoint, save_tensor)
from rebalance.model import build, to_finetune, truncate_layers

from conftest import tiny_config


def _rewrite_manifest(path, edit):
    raw = path.read_bytes()
    rest = raw[len(MAGIC):]
    nl = rest.index(b"\n")
    n = int(rest[:nl])
    manifest = json.loads(rest[nl + 1:nl + 1 + n])
    edit(manifest)
    head = json.dumps(manifest).encode()
    path.write_bytes(MAGIC + f"{len(head)}\n".encode() + head + rest[nl + 1 + n:])


@pytest.fixture
def saved(tmp_path):
    m = build(tiny_config(layers=2), seed=4)
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    return m, path


def test_round_trip_is_bitwise(saved, tmp_path):
    m, path = saved
    back = load_checkpoint(path)
    for name, arr in m.arrays().items():
        assert back.params[name].data.tobytes() == arr.tobytes()
    save_checkpoint(back, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_finetune_stage_round_trip(saved, tmp_path):
    m, _ = saved
    ft = to_finetune(m)
    save_checkpoint(ft, tmp_path / "ft.ckpt")
    back = load_checkpoint(tmp_path / "ft.ckpt")
    assert back.stage == "finetune" and back.num_params() == ft.num_params()


def test_payload_is_little_endian_float32(saved):
    m, path = saved
    raw = path.read_bytes()
    first = m.arrays()["input_embedding"].astype("<f4").tobytes()
    assert first in raw


def test_truncated_payload(saved):
    _, path = saved
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(CheckpointError, match="truncated payload"):
        read_checkpoint(path)


def test_trailing_bytes(saved):
    _, path = saved
    path.write_bytes(path.read_bytes() + b"\0\0\0\0")
    with pytest.raises(CheckpointError, match="trailing bytes"):
        read_checkpoint(path)


def test_bad_magic(saved):
    _, path = saved
    path.write_bytes(b"NOTACKPT\n" + path.read_bytes()[len(MAGIC):])
    with pytest.raises(CheckpointError, match="bad magic"):
        read_checkpoint(path)


def test_version_mismatch(saved):
    _, path = saved
    _rewrite_manifest(path, lambda m: m.update(version=99))
    with pytest.raises(CheckpointError, match="version mismatch"):
        read_checkpoint(path)


def test_manifest_total_mismatch(saved):
    _, path = saved
    _rewrite_manifest(path, lambda m: m.update(total_params=m["total_params"] + 1))
    with pytest.raises(CheckpointError, match="total check"):
        read_checkpoint(path)


def test_budget_mismatch(saved):
    _, path = saved
    _rewrite_manifest(path, lambda m: m["config"].update(vocab_size=m["config"]["vocab_size"] + 1))
    with pytest.raises(CheckpointError, match="budget mismatch"):
        read_checkpoint(path)


def test_non_contiguous_offsets(saved):
    _, path = saved
    _rewrite_manifest(path, lambda m: m["tensors"][1].update(offset=m["tensors"][1]["offset"] + 4))
    with pytest.raises(CheckpointError, match="offset"):
        read_checkpoint(path)


def test_truncate_chain_is_bitwise(saved, tmp_path):
    m, path = saved
    cut = truncate_layers(load_checkpoint(path), 1)
    save_checkpoint(cut, tmp_path / "cut.ckpt")
    again = load_checkpoint(tmp_path / "cut.ckpt")
    save_checkpoint(again, tmp_path / "cut2.ckpt")
    assert (tmp_path / "cut.ckpt").read_bytes() == (tmp_path / "cut2.ckpt").read_bytes()
    for name, t in again.params.items():
        assert t.data.tobytes() == m.params[name].data.tobytes()


def test_single_tensor_file(tmp_path):
    arr = np.arange(12, dtype=np.float32).reshape(3, 4)
    save_tensor(tmp_path / "t.bin", "x", arr)
    back = load_tensor(tmp_path / "t.bin")
    assert back.tobytes() == arr.tobytes() and back.shape == (3, 4)
