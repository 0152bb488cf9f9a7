import json
import struct
import zlib

import numpy as np
import pytest
import torch

from cqdiff.denoiser import Denoiser, DenoiserConfig, NormStats, denoise
from cqdiff.diffusion import make_schedule
from cqdiff.persistence import (
    MAGIC,
    CheckpointError,
    CheckpointVersionError,
    SchemaError,
    checkpoint_bytes,
    load_checkpoint,
    parse_checkpoint,
    read_checkpoint,
    read_curves,
    read_dataset,
    save_checkpoint,
    write_curves,
    write_dataset,
)
from cqdiff.scenario import ScenarioParams, generate_dataset

CFG = DenoiserConfig(d_model=16, n_heads=2, n_layers=1, step_embed_dim=8)
NORM = NormStats([-80.0, 5.0], [12.0, 7.5], [2.3, 27.0, 9.2, 38.0], [0.4, 7.0, 0.4, 4.5])


@pytest.fixture
def model():
    torch.manual_seed(3)
    return Denoiser(CFG, NORM).eval()


@pytest.fixture(scope="module")
def records():
    return generate_dataset(ScenarioParams(n_users=4, n_steps=6), 11, ["urban", "rural"])


def _rewrite_header(data: bytes, edit) -> bytes:
    (n,) = struct.unpack_from("<I", data, len(MAGIC))
    start = len(MAGIC) + 4
    header = json.loads(data[start : start + n])
    edit(header)
    head = json.dumps(header).encode()
    return MAGIC + struct.pack("<I", len(head)) + head + data[start + n :]


class TestCheckpoint:
    def test_round_trip_is_bitwise(self, model, tmp_path, records):
        sched = make_schedule(20, "linear", 1e-4, 0.05)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, sched, path, train={"lr": 1e-3}, seed=5)
        ck = read_checkpoint(path)
        for (n1, a), (n2, b) in zip(model.state_dict().items(), ck.model.state_dict().items()):
            assert n1 == n2 and torch.equal(a, b)
        assert np.array_equal(ck.schedule.beta, sched.beta)
        assert ck.header["seed"] == 5 and ck.header["train"] == {"lr": 1e-3}
        for k in ("target_mean", "target_std", "cond_mean", "cond_std"):
            assert np.array_equal(getattr(ck.model.norm, k), getattr(NORM, k))
        x = np.random.default_rng(0).standard_normal((6, 2))
        assert np.array_equal(denoise(x, 4, records[0].conditions, model), denoise(x, 4, records[0].conditions, ck.model))

    def test_layout(self, model):
        data = checkpoint_bytes(model, make_schedule())
        assert data[:8] == b"CQDIFFCK"
        (n,) = struct.unpack_from("<I", data, 8)
        header = json.loads(data[12 : 12 + n])
        first = header["blobs"][0]
        w = model.state_dict()[first["name"]].numpy().ravel()
        payload0 = np.frombuffer(data[12 + n : 12 + n + 4 * w.size], dtype="<f4")
        assert np.array_equal(payload0, w)
        assert list(header)[:4] == ["format_version", "config", "schedule", "norm_stats"]

    def test_no_temp_files_left(self, model, tmp_path):
        save_checkpoint(model, make_schedule(), tmp_path / "a.ckpt")
        assert [p.name for p in tmp_path.iterdir()] == ["a.ckpt"]

    def test_truncated(self, model):
        data = checkpoint_bytes(model, make_schedule())
        for cut in (4, 20, len(data) - 3):
            with pytest.raises(CheckpointError):
                parse_checkpoint(data[:cut])

    def test_corrupt_payload(self, model):
        data = bytearray(checkpoint_bytes(model, make_schedule()))
        data[-1] ^= 0xFF
        with pytest.raises(CheckpointError, match="checksum"):
            parse_checkpoint(bytes(data))

    def test_version_mismatch(self, model):
        data = _rewrite_header(checkpoint_bytes(model, make_schedule()), lambda h: h.update(format_version=99))
        with pytest.raises(CheckpointVersionError):
            parse_checkpoint(data)

    def test_shape_mismatch(self, model):
        def edit(h):
            h["blobs"][0]["shape"] = list(reversed(h["blobs"][0]["shape"])) + [1]

        with pytest.raises(CheckpointError, match="shape"):
            parse_checkpoint(_rewrite_header(checkpoint_bytes(model, make_schedule()), edit))

    def test_missing_blob(self, model):
        data = checkpoint_bytes(model, make_schedule())
        (n,) = struct.unpack_from("<I", data, 8)
        header = json.loads(data[12 : 12 + n])
        last = header["blobs"][-1]
        size = 4 * int(np.prod(last["shape"]))
        trimmed = data[:-size]

        def edit(h):
            h["blobs"].pop()
            h["crc32"] = zlib.crc32(trimmed[12 + n :])

        with pytest.raises(CheckpointError, match="missing"):
            parse_checkpoint(_rewrite_header(trimmed, edit))

    def test_extra_blob_warns(self, model):
        data = checkpoint_bytes(model, make_schedule())
        (n,) = struct.unpack_from("<I", data, 8)
        extra = np.arange(3, dtype="<f4").tobytes()
        body = data[12 + n :] + extra

        def edit(h):
            h["blobs"].append({"name": "unused", "shape": [3]})
            h["crc32"] = zlib.crc32(body)

        with pytest.warns(UserWarning, match="unused"):
            ck = parse_checkpoint(_rewrite_header(data + extra, edit))
        assert torch.equal(ck.model.head.weight, model.head.weight)

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError, match="nope.ckpt"):
            load_checkpoint(tmp_path / "nope.ckpt")


class TestDatasetFile:
    def test_round_trip_and_determinism(self, records, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_dataset(records, a, {"seed": 11})
        write_dataset(records, b, {"seed": 11})
        assert a.read_bytes() == b.read_bytes()
        back, header = read_dataset(a)
        assert header == {"seed": 11}
        assert [r.to_dict() for r in back] == [r.to_dict() for r in records]

    def test_missing_key(self, records, tmp_path):
        row = records[0].to_dict()
        del row["sinr_db"]
        p = tmp_path / "bad.jsonl"
        p.write_text(json.dumps(row) + "\n")
        with pytest.raises(SchemaError, match="sinr_db"):
            read_dataset(p)


class TestCurves:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        real = rng.normal(size=(3, 5, 2))
        gen = rng.normal(size=(3, 2, 5, 2))
        write_curves(tmp_path / "c.csv", [7, 2, 9], real, gen, {"n_samples": 2})
        ids, r, g, h = read_curves(tmp_path / "c.csv")
        order = np.argsort([7, 2, 9])
        assert ids.tolist() == [2, 7, 9]
        assert np.array_equal(r, real[order]) and np.array_equal(g, gen[order])
        assert h == {"n_samples": 2}

    def test_missing_column(self, tmp_path):
        p = tmp_path / "c.csv"
        p.write_text("record_id,sample,t,real_rsrp,gen_rsrp,real_sinr\n0,0,0,1,1,1\n")
        with pytest.raises(SchemaError, match="gen_sinr"):
            read_curves(p)
