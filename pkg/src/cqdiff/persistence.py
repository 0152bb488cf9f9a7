"""Checkpoint, dataset and curve-file formats.

Checkpoint layout, all integers little-endian:

    offset 0   8 bytes   magic b"CQDIFFCK"
    offset 8   4 bytes   uint32 header length H
    offset 12  H bytes   UTF-8 JSON header
    offset 12+H          parameter payloads, float32 little-endian, in header blob order

The header holds format_version, denoiser config, schedule params, norm stats,
an optional training echo, the seed, the blob list (name, shape) and the CRC-32
of the payload section.
"""

from __future__ import annotations

import csv
import io
import json
import os
import struct
import tempfile
import warnings
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .denoiser import Denoiser, DenoiserConfig, NormStats
from .diffusion import NoiseSchedule, make_schedule
from .scenario import RECORD_KEYS, DatasetRecord

MAGIC = b"CQDIFFCK"
FORMAT_VERSION = 1
_LEN = struct.Struct("<I")
_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    """Checkpoint file is truncated, corrupt or inconsistent with its header."""


class CheckpointVersionError(CheckpointError):
    pass


class SchemaError(ValueError):
    """A dataset or curve file lacks required fields."""


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as e:
        raise OSError(e.errno, f"cannot write {path}: {e.strerror or e}") from e


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise OSError(e.errno, f"cannot read {path}: {e.strerror or e}") from e


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    model: Denoiser
    schedule: NoiseSchedule
    header: dict


def checkpoint_bytes(model: Denoiser, schedule: NoiseSchedule, train: dict | None = None, seed=None) -> bytes:
    if model.norm is None:
        raise ValueError("model has no normalization statistics to save")
    names, payloads, blobs = [], [], []
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype(_F32)
        blobs.append({"name": name, "shape": list(arr.shape)})
        payloads.append(arr.tobytes(order="C"))
        names.append(name)
    payload = b"".join(payloads)
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "schedule": schedule.params(),
        "norm_stats": model.norm.to_dict(),
        "train": train,
        "seed": seed,
        "blobs": blobs,
        "crc32": zlib.crc32(payload),
    }
    head = json.dumps(header, separators=(",", ":")).encode("utf-8")
    return MAGIC + _LEN.pack(len(head)) + head + payload


def save_checkpoint(model: Denoiser, schedule: NoiseSchedule, path, train: dict | None = None, seed=None) -> None:
    """Write the checkpoint atomically (temporary file, then rename)."""
    _atomic_write(path, checkpoint_bytes(model, schedule, train, seed))


def parse_checkpoint(data: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(data) < len(MAGIC) + _LEN.size or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic or truncated)")
    (n_head,) = _LEN.unpack_from(data, len(MAGIC))
    start = len(MAGIC) + _LEN.size
    if len(data) < start + n_head:
        raise CheckpointError(f"{source}: truncated header")
    try:
        header = json.loads(data[start : start + n_head].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{source}: corrupt header ({e})") from e
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{source}: format_version {version!r}, this reader supports {FORMAT_VERSION}")
    payload = data[start + n_head :]
    expected = sum(int(np.prod(b["shape"], dtype=np.int64)) for b in header["blobs"]) * _F32.itemsize
    if len(payload) != expected:
        raise CheckpointError(f"{source}: payload is {len(payload)} bytes, header describes {expected} (truncated or corrupt)")
    if zlib.crc32(payload) != header["crc32"]:
        raise CheckpointError(f"{source}: payload checksum mismatch")

    sp = header["schedule"]
    schedule = make_schedule(sp["steps"], sp["kind"], sp["beta_min"], sp["beta_max"])
    model = Denoiser(DenoiserConfig(**header["config"]), NormStats.from_dict(header["norm_stats"]))
    target = model.state_dict()
    loaded, offset = {}, 0
    for blob in header["blobs"]:
        shape = tuple(blob["shape"])
        n = int(np.prod(shape, dtype=np.int64)) * _F32.itemsize
        arr = np.frombuffer(payload, dtype=_F32, count=n // _F32.itemsize, offset=offset).reshape(shape)
        offset += n
        name = blob["name"]
        if name not in target:
            warnings.warn(f"{source}: ignoring unknown blob {name!r}", stacklevel=3)
            continue
        if tuple(target[name].shape) != shape:
            raise CheckpointError(f"{source}: blob {name!r} has shape {shape}, model expects {tuple(target[name].shape)}")
        loaded[name] = torch.from_numpy(arr.astype(np.float32))
    missing = [n for n in target if n not in loaded]
    if missing:
        raise CheckpointError(f"{source}: missing blobs {missing}")
    model.load_state_dict(loaded)
    model.eval()
    return Checkpoint(model, schedule, header)


def read_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(_read_bytes(path), str(path))


def load_checkpoint(path) -> tuple[Denoiser, NoiseSchedule]:
    ck = read_checkpoint(path)
    return ck.model, ck.schedule


# ---------------------------------------------------------------- datasets


def _json_line(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def dataset_text(records: list[DatasetRecord], header: dict | None = None) -> str:
    lines = [_json_line({"_header": header or {}})]
    lines += [_json_line(r.to_dict()) for r in records]
    return "\n".join(lines) + "\n"


def write_dataset(records: list[DatasetRecord], path, header: dict | None = None) -> None:
    """JSON lines: a ``{"_header": ...}`` line, then one record per line."""
    _atomic_write(path, dataset_text(records, header).encode("utf-8"))


def read_dataset(path) -> tuple[list[DatasetRecord], dict]:
    """Return (records, header); the header is {} when the file has none."""
    text = _read_bytes(path).decode("utf-8")
    records, header = [], {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as e:
            raise SchemaError(f"{path}:{lineno}: invalid JSON ({e})") from e
        if "_header" in row:
            header = row["_header"]
            continue
        missing = [k for k in RECORD_KEYS if k not in row]
        if missing:
            raise SchemaError(f"{path}:{lineno}: missing keys {missing}")
        records.append(DatasetRecord.from_dict(row))
    return records, header


# ---------------------------------------------------------------- curves

CURVE_COLUMNS = ("record_id", "sample", "t", "real_rsrp", "gen_rsrp", "real_sinr", "gen_sinr")


def curves_text(record_ids, real, generated, header: dict | None = None) -> str:
    """CSV text; the first line is ``# `` followed by the JSON header.

    real: (N, T, 2). generated: (N, K, T, 2).
    """
    real = np.asarray(real, dtype=np.float64)
    generated = np.asarray(generated, dtype=np.float64)
    n, k, length, _ = generated.shape
    buf = io.StringIO()
    buf.write("# " + json.dumps(header or {}, sort_keys=True, separators=(",", ":")) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_COLUMNS)
    for i in range(n):
        for s in range(k):
            for t in range(length):
                r, g = real[i, t], generated[i, s, t]
                w.writerow((int(record_ids[i]), s, t, repr(float(r[0])), repr(float(g[0])), repr(float(r[1])), repr(float(g[1]))))
    return buf.getvalue()


def write_curves(path, record_ids, real, generated, header: dict | None = None) -> None:
    _atomic_write(path, curves_text(record_ids, real, generated, header).encode("utf-8"))


def read_curves(path) -> tuple[np.ndarray, np.ndarray, np.ndarray, dict]:
    """Return (record_ids, real (N, T, 2), generated (N, K, T, 2), header)."""
    lines = _read_bytes(path).decode("utf-8").splitlines()
    header = {}
    if lines and lines[0].startswith("#"):
        header = json.loads(lines[0][1:].strip() or "{}")
        lines = lines[1:]
    reader = csv.DictReader(lines)
    missing = [c for c in CURVE_COLUMNS if c not in (reader.fieldnames or [])]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing}")
    rows = list(reader)
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    try:
        ids = np.array([int(r["record_id"]) for r in rows])
        samp = np.array([int(r["sample"]) for r in rows])
        ts = np.array([int(r["t"]) for r in rows])
        vals = np.array([[float(r[c]) for c in CURVE_COLUMNS[3:]] for r in rows])
    except (TypeError, ValueError) as e:
        raise SchemaError(f"{path}: malformed value ({e})") from e
    uniq = np.unique(ids)
    n, k, length = len(uniq), samp.max() + 1, ts.max() + 1
    if len(rows) != n * k * length:
        raise SchemaError(f"{path}: expected {n}x{k}x{length} rows, found {len(rows)}")
    pos = np.searchsorted(uniq, ids)
    real = np.full((n, length, 2), np.nan)
    gen = np.full((n, k, length, 2), np.nan)
    real[pos, ts] = vals[:, [0, 2]]
    gen[pos, samp, ts] = vals[:, [1, 3]]
    if np.isnan(gen).any() or np.isnan(real).any():
        raise SchemaError(f"{path}: incomplete (record, sample, t) grid")
    return uniq, real, gen, header
