"""Checkpoint file layout, fault injection and model reload."""
import struct

import numpy as np
import pytest

from app.data.checkpoint import (
    MAGIC,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    load_checkpoint_config,
    save_checkpoint,
    sidecar_path,
)
from app.exceptions import DataError, FormatError
from app.model.simr import build_model, load_model, model_metadata


@pytest.fixture
def state(rng):
    return {
        "encoder.weight": rng.standard_normal((3, 4)).astype(np.float32),
        "encoder.bias": np.zeros(4, np.float32),
        "scale": np.array(2.5, np.float32),
        "grid": rng.standard_normal((2, 1, 3)).astype(np.float32),
    }


def test_layout_of_a_single_tensor():
    blob = encode_checkpoint({"w": np.array([1.0, -2.0], np.float32)})
    expected = (
        MAGIC
        + struct.pack("<II", 1, 1)
        + struct.pack("<H", 1) + b"w"
        + struct.pack("<B", 1) + struct.pack("<Q", 2)
        + np.array([1.0, -2.0], "<f4").tobytes()
    )
    assert blob == expected


def test_save_then_load_is_bit_identical(tmp_path, state):
    path = save_checkpoint(state, tmp_path / "ckpt" / "model.ckpt", config={"epoch": 3})
    loaded = load_checkpoint(path)
    assert list(loaded) == list(state)
    for name, array in state.items():
        assert loaded[name].shape == array.shape
        assert loaded[name].tobytes() == array.tobytes()
    assert load_checkpoint_config(path) == {"epoch": 3}
    assert sidecar_path(path).name == "model.ckpt.json"


def test_every_truncation_is_a_format_error(state):
    blob = encode_checkpoint(state)
    offsets = sorted(set(np.linspace(0, len(blob) - 1, 40).astype(int).tolist()) | {0, 7, 8, 12, 15})
    assert len(offsets) >= 20
    for cut in offsets:
        with pytest.raises(FormatError) as info:
            decode_checkpoint(blob[:cut])
        assert info.value.offset is not None and info.value.offset <= cut


def test_bad_magic_points_at_offset_zero(state):
    blob = b"NOTACKPT" + encode_checkpoint(state)[8:]
    with pytest.raises(FormatError, match="at byte offset 0"):
        decode_checkpoint(blob)


def test_unsupported_version(state):
    blob = bytearray(encode_checkpoint(state))
    blob[8:12] = struct.pack("<I", 99)
    with pytest.raises(FormatError, match="version 99") as info:
        decode_checkpoint(bytes(blob))
    assert info.value.offset == 8


def test_trailing_bytes_are_rejected(state):
    with pytest.raises(FormatError, match="trailing"):
        decode_checkpoint(encode_checkpoint(state) + b"\x00")


def test_duplicate_names_are_rejected():
    one = encode_checkpoint({"w": np.ones(1, np.float32)})
    entry = one[16:]
    blob = MAGIC + struct.pack("<II", 1, 2) + entry + entry
    with pytest.raises(FormatError, match="duplicate"):
        decode_checkpoint(blob)


def test_missing_files(tmp_path):
    with pytest.raises(DataError, match="not found"):
        load_checkpoint(tmp_path / "absent.ckpt")
    save_checkpoint({"w": np.ones(1)}, tmp_path / "bare.ckpt")
    with pytest.raises(DataError, match="sidecar"):
        load_checkpoint_config(tmp_path / "bare.ckpt")


def test_model_reload_reproduces_outputs(tmp_path, tiny_dataset, tiny_model_config):
    metadata = model_metadata(tiny_dataset)
    model = build_model(tiny_model_config, metadata, seed=5)
    path = save_checkpoint(
        model.state_dict(), tmp_path / "model.ckpt",
        config={"run": {"model": tiny_model_config.model_dump()}, "dataset": metadata},
    )
    reloaded, sidecar = load_model(path)
    assert sidecar["dataset"]["concepts"] == tiny_dataset.concepts

    split = tiny_dataset.split("val")
    ids, pad_mask = tiny_dataset.vocab.encode_batch([r[0] for r in split.reports[:4]], tiny_dataset.max_len)
    before = model(split.patches[:4], ids, pad_mask).s_t2i.numpy()
    after = reloaded(split.patches[:4], ids, pad_mask).s_t2i.numpy()
    np.testing.assert_array_equal(before, after)


def test_state_dict_mismatch_is_a_data_error(tiny_dataset, tiny_model_config):
    model = build_model(tiny_model_config, model_metadata(tiny_dataset))
    state = model.state_dict()
    state.pop(next(iter(state)))
    with pytest.raises(DataError, match="missing"):
        model.load_state_dict(state)
