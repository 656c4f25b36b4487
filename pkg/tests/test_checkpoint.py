import struct

import numpy as np
import pytest
import torch

from genodiff.checkpoint import (
    CheckpointContainer,
    CheckpointError,
    decode,
    encode,
    load_checkpoint,
    module_tensors,
    save_checkpoint,
)
from genodiff.config import RunConfig


def _container():
    rng = np.random.default_rng(0)
    return CheckpointContainer(
        {"kind": "test", "step": 3, "config": {"a": 1.5}},
        {
            "m.w": rng.normal(size=(3, 4)).astype(np.float32),
            "m.b": rng.normal(size=4),
            "n.idx": np.arange(5, dtype=np.int64),
            "n.bytes": np.frombuffer(b"ACGT", dtype=np.uint8),
            "n.scalar": np.array(2, dtype=np.int32),
        },
    )


def test_round_trip_is_byte_identical(tmp_path):
    ckpt = _container()
    data = encode(ckpt)
    back = decode(data)
    assert back.metadata == ckpt.metadata
    assert set(back.tensors) == set(ckpt.tensors)
    for k, v in ckpt.tensors.items():
        assert back.tensors[k].dtype == v.dtype
        np.testing.assert_array_equal(back.tensors[k], v)
    assert encode(back) == data
    save_checkpoint(tmp_path / "c.g2pd", ckpt)
    assert (tmp_path / "c.g2pd").read_bytes() == data
    assert encode(load_checkpoint(tmp_path / "c.g2pd")) == data


def test_insertion_order_does_not_matter():
    ckpt = _container()
    flipped = CheckpointContainer(dict(reversed(ckpt.metadata.items())), dict(reversed(ckpt.tensors.items())))
    assert encode(flipped) == encode(ckpt)


def test_corrupt_payload_names_the_tensor():
    data = bytearray(encode(_container()))
    data[-1] ^= 0xFF  # last payload belongs to the last path in sorted order
    with pytest.raises(CheckpointError, match="n.scalar"):
        decode(bytes(data))


def test_bad_magic_and_version():
    data = encode(_container())
    with pytest.raises(CheckpointError, match="magic"):
        decode(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError, match="version"):
        decode(data[:4] + struct.pack("<I", 99) + data[8:])


@pytest.mark.parametrize("cut", [3, 10, 40, -1])
def test_truncation_is_reported(cut):
    data = encode(_container())
    with pytest.raises(CheckpointError):
        decode(data[:cut])


def test_trailing_bytes_rejected():
    with pytest.raises(CheckpointError, match="trailing"):
        decode(encode(_container()) + b"\0")


def test_unsupported_dtype():
    with pytest.raises(CheckpointError, match="dtype"):
        encode(CheckpointContainer({}, {"x": np.zeros(2, dtype=np.complex64)}))


def test_prefix_load_and_module_round_trip():
    lin, other = torch.nn.Linear(3, 2), torch.nn.Linear(2, 2)
    data = encode(CheckpointContainer({}, module_tensors({"enc": lin, "head": other})))
    part = decode(data, prefix="enc.")
    assert set(part.tensors) == {"enc.weight", "enc.bias"}
    fresh = torch.nn.Linear(3, 2)
    part.load_into(fresh, "enc")
    assert torch.equal(fresh.weight, lin.weight) and torch.equal(fresh.bias, lin.bias)
    with pytest.raises(RuntimeError):
        part.load_into(torch.nn.Linear(4, 2), "enc")


def test_config_validation_and_unknown_keys(tmp_path):
    cfg = RunConfig()
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError, match="unknown config keys"):
        RunConfig.from_dict({"stepz": 1})
    for bad in ({"T": 0}, {"tau": 0.0}, {"msa_depth": 4}, {"schedule": "quadratic"}, {"d": 12}, {"w": -1.0}):
        with pytest.raises(ValueError):
            RunConfig(**bad)
    assert cfg.updated(steps=7, w=None).steps == 7
    path = tmp_path / "c.json"
    path.write_text('{"k": 2}')
    assert RunConfig.load(path).k == 2
