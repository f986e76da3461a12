"""Binary trace files, CSV emitters and flat key=value run reports.

Trace file layout (little-endian, no padding)::

    magic "RSTL" | u16 version | u32 n_traces | u32 n_samples | u8 dtype
    | u8 pt_len | u8 ct_len | f64 sample_rate_hz | 8 reserved zero bytes
    then n_traces records of  pt[16] | ct[16] | samples[n_samples] (f32)
"""
from __future__ import annotations

import csv
import math
import os
import struct
import tempfile
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

from .sca_toolkit import TraceSet

MAGIC = b"RSTL"
VERSION = 1
HEADER = struct.Struct("<4sHIIBBBd8s")
HEADER_SIZE = HEADER.size
DTYPES = {0: np.dtype("<f4")}
BLOCK = 16
U32_MAX = 2**32 - 1


class TraceFormatError(ValueError):
    """Base class for unreadable or unwritable trace data."""


class BadMagicError(TraceFormatError):
    pass


class UnsupportedVersionError(TraceFormatError):
    pass


class UnsupportedDtypeError(TraceFormatError):
    pass


class CorruptFileError(TraceFormatError):
    """Declared sizes disagree with the file length."""


def record_dtype(n_samples: int, code: int = 0) -> np.dtype:
    return np.dtype([("pt", "u1", (BLOCK,)), ("ct", "u1", (BLOCK,)), ("s", DTYPES[code], (n_samples,))])


def pack_header(n_traces: int, n_samples: int, sample_rate_hz: float, dtype_code: int = 0) -> bytes:
    if n_traces > U32_MAX or n_samples > U32_MAX or n_traces * n_samples > U32_MAX:
        raise TraceFormatError(f"{n_traces} x {n_samples} samples exceeds the 32-bit record limit")
    if not math.isfinite(sample_rate_hz) or sample_rate_hz < 0:
        raise TraceFormatError("sample_rate_hz must be finite and >= 0")
    return HEADER.pack(MAGIC, VERSION, n_traces, n_samples, dtype_code, BLOCK, BLOCK,
                       float(sample_rate_hz), bytes(8))


def unpack_header(raw: bytes) -> dict:
    if len(raw) < HEADER_SIZE:
        if len(raw) >= 4 and raw[:4] != MAGIC:
            raise BadMagicError(f"bad magic {raw[:4]!r}")
        raise CorruptFileError(f"file shorter than the {HEADER_SIZE}-byte header")
    magic, version, n_traces, n_samples, code, pt_len, ct_len, fs, _ = HEADER.unpack(raw[:HEADER_SIZE])
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported trace file version {version}")
    if code not in DTYPES:
        raise UnsupportedDtypeError(f"unsupported sample dtype code {code}")
    if pt_len != BLOCK or ct_len != BLOCK:
        raise CorruptFileError(f"unexpected block lengths pt={pt_len} ct={ct_len}")
    return {"n_traces": n_traces, "n_samples": n_samples, "dtype": code, "sample_rate_hz": fs}


def _check_batch(batch: TraceSet, n_samples: int):
    if batch.n_samples != n_samples:
        raise TraceFormatError(f"batch has {batch.n_samples} samples per trace, file has {n_samples}")
    if np.isnan(batch.samples).any():
        raise TraceFormatError("trace samples contain NaN")


class TraceWriter:
    """Streams batches into a trace file; the file appears only on a clean close."""

    def __init__(self, path, n_traces: int, n_samples: int, sample_rate_hz: float = 0.0):
        self.path = Path(path)
        self.n_traces = int(n_traces)
        self.n_samples = int(n_samples)
        self._header = pack_header(self.n_traces, self.n_samples, sample_rate_hz)
        self._dtype = record_dtype(self.n_samples)
        self._written = 0
        fd, tmp = tempfile.mkstemp(prefix=self.path.name + ".", suffix=".part",
                                   dir=self.path.parent if str(self.path.parent) else ".")
        self._tmp = Path(tmp)
        self._fh = os.fdopen(fd, "wb")
        self._fh.write(self._header)

    def write(self, batch: TraceSet):
        _check_batch(batch, self.n_samples)
        if self._written + len(batch) > self.n_traces:
            raise TraceFormatError("more traces written than declared")
        rec = np.empty(len(batch), dtype=self._dtype)
        rec["pt"] = batch.plaintexts
        rec["ct"] = batch.ciphertexts
        rec["s"] = batch.samples
        self._fh.write(rec.tobytes())
        self._written += len(batch)

    def close(self):
        self._fh.close()
        if self._written != self.n_traces:
            self._tmp.unlink(missing_ok=True)
            raise TraceFormatError(f"declared {self.n_traces} traces, wrote {self._written}")
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(self._tmp, 0o666 & ~umask)
        os.replace(self._tmp, self.path)

    def abort(self):
        self._fh.close()
        self._tmp.unlink(missing_ok=True)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.close()
        else:
            self.abort()
        return False


def write_traces(path, traces: TraceSet, sample_rate_hz: float | None = None):
    fs = traces.sample_rate_hz if sample_rate_hz is None else sample_rate_hz
    with TraceWriter(path, len(traces), traces.n_samples, fs) as w:
        if len(traces):
            w.write(traces)


def read_header(path) -> dict:
    path = Path(path)
    with open(path, "rb") as fh:
        info = unpack_header(fh.read(HEADER_SIZE))
    expected = HEADER_SIZE + info["n_traces"] * record_dtype(info["n_samples"], info["dtype"]).itemsize
    actual = path.stat().st_size
    if actual != expected:
        raise CorruptFileError(f"file is {actual} bytes, header implies {expected}")
    return info


def _metadata(info: dict) -> dict:
    return {"sample_rate_hz": info["sample_rate_hz"]}


def read_traces(path) -> TraceSet:
    info = read_header(path)
    dt = record_dtype(info["n_samples"], info["dtype"])
    rec = np.fromfile(path, dtype=dt, offset=HEADER_SIZE, count=info["n_traces"])
    return TraceSet(rec["s"].astype(np.float32, copy=True).reshape(info["n_traces"], info["n_samples"]),
                    rec["pt"].copy().reshape(-1, BLOCK), rec["ct"].copy().reshape(-1, BLOCK), _metadata(info))


def iter_traces(path, batch_size: int = 4096, limit: int | None = None) -> Iterator[TraceSet]:
    """Stream a trace file in batches without loading it whole."""
    info = read_header(path)
    n = info["n_traces"] if limit is None else min(limit, info["n_traces"])
    if n == 0:
        return
    dt = record_dtype(info["n_samples"], info["dtype"])
    mm = np.memmap(path, dtype=dt, mode="r", offset=HEADER_SIZE, shape=(info["n_traces"],))
    meta = _metadata(info)
    for s in range(0, n, batch_size):
        part = mm[s:min(s + batch_size, n)]
        yield TraceSet(np.array(part["s"], dtype=np.float32).reshape(len(part), info["n_samples"]),
                       np.array(part["pt"]).reshape(-1, BLOCK), np.array(part["ct"]).reshape(-1, BLOCK),
                       dict(meta))
    del mm


# -- text outputs -----------------------------------------------------------------

def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, bytes):
        return v.hex()
    if hasattr(v, "value") and isinstance(getattr(v, "value"), str):
        return v.value
    return str(v)


def write_csv(path, header: Iterable[str], rows: Iterable[Iterable]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(header))
        for row in rows:
            w.writerow([format_value(v) for v in row])


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


class RunReport:
    """Ordered flat key=value document."""

    def __init__(self, items: Mapping | None = None):
        self._items: dict[str, str] = {}
        if items:
            self.update(items)

    def __setitem__(self, key: str, value):
        if "=" in key or "\n" in key or not key:
            raise ValueError(f"invalid report key {key!r}")
        text = format_value(value)
        if "\n" in text:
            raise ValueError(f"report value for {key!r} spans lines")
        self._items[key] = text

    def __getitem__(self, key: str) -> str:
        return self._items[key]

    def __contains__(self, key) -> bool:
        return key in self._items

    def update(self, items: Mapping, prefix: str = ""):
        for k, v in items.items():
            self[prefix + k] = v

    def items(self):
        return self._items.items()

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self._items.items())

    def write(self, path):
        Path(path).write_text(self.to_text())

    @classmethod
    def read(cls, path) -> "RunReport":
        rep = cls()
        for line in Path(path).read_text().splitlines():
            if line.strip():
                k, _, v = line.partition("=")
                rep._items[k] = v
        return rep
