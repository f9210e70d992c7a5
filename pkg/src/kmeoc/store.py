"""Persistence of datasets, models, value solutions, and reports.

Every artifact shares one framing: a 16-byte header (8-byte magic tag,
little-endian u32 version, little-endian u32 kind), an 8-byte BLAKE2b
checksum of the payload, then the payload itself.  Numeric payloads are
little-endian float64 streams in row-major order, so files transfer
between machines unchanged; reports are UTF-8 JSON.  Writes go to a
temporary file in the destination directory and are renamed into place,
so readers never observe a half-written artifact.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
import tempfile
from typing import Union

import numpy as np

from .bench import BenchReport
from .errors import (
    ChecksumError,
    HeaderError,
    InputError,
    InvariantError,
    StorageError,
    VersionError,
)
from .estimator import EstimatedOperators
from .hjb import ValueSolution
from .kernel import DIFFUSED_MODES, KernelConfig
from .systems import Dataset

__all__ = ["save", "load", "MAGIC", "VERSION"]

MAGIC = b"KMEOCART"
VERSION = 1

_KIND_DATASET = 1
_KIND_MODEL = 2
_KIND_VALUE_SOLUTION = 3
_KIND_REPORT = 4

Persistable = Union[Dataset, EstimatedOperators, ValueSolution, BenchReport]


def _f64(*vals) -> bytes:
    return np.asarray(vals, dtype="<f8").tobytes()


def _arr(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


class _Reader:
    """Sequential cursor over a float64 payload."""

    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def floats(self, n: int) -> np.ndarray:
        out = np.frombuffer(self.buf, dtype="<f8", count=n, offset=self.off)
        self.off += 8 * n
        return out.copy()

    def scalar(self) -> float:
        return float(self.floats(1)[0])

    def intval(self) -> int:
        return int(round(self.scalar()))


def _encode_dataset(ds: Dataset) -> bytes:
    name = ds.system.encode("utf-8")
    head = struct.pack(
        "<QQQddqQ", ds.n_x, ds.n_u, ds.N, ds.dt, ds.epsilon, ds.seed,
        len(name),
    )
    return head + name + _arr(ds.X) + _arr(ds.U) + _arr(ds.Y) + _arr(ds.cost)


def _decode_dataset(buf: bytes) -> Dataset:
    head_size = struct.calcsize("<QQQddqQ")
    n_x, n_u, N, dt, epsilon, seed, name_len = struct.unpack(
        "<QQQddqQ", buf[:head_size]
    )
    off = head_size
    name = buf[off : off + name_len].decode("utf-8")
    off += name_len
    r = _Reader(buf)
    r.off = off
    X = r.floats(n_x * N).reshape(n_x, N)
    U = r.floats(n_u * N).reshape(n_u, N)
    Y = r.floats(n_x * N).reshape(n_x, N)
    cost = r.floats(N)
    return Dataset(
        X=X, U=U, Y=Y, cost=cost, dt=dt, epsilon=epsilon, seed=seed,
        system=name,
    )


def _encode_model(ops: EstimatedOperators) -> bytes:
    ds = ops.dataset_ref
    cfg = ops.kernel_cfg
    mode_code = DIFFUSED_MODES.index(cfg.diffused_mode)
    parts = [
        _f64(
            ops.N, ds.n_x, ds.n_u,
            cfg.sigma, cfg.epsilon, cfg.dt, cfg.gamma, mode_code,
            ops.jitter, ds.dt, ds.epsilon, ds.seed,
        ),
        _arr(ds.X),
        _arr(ds.U),
        _arr(ds.cost),
        _arr(ops.A_hat),
    ]
    parts.extend(_arr(Bm) for Bm in ops.B_hat_blocks)
    return b"".join(parts)


def _decode_model(buf: bytes) -> EstimatedOperators:
    r = _Reader(buf)
    N, n_x, n_u = r.intval(), r.intval(), r.intval()
    sigma, epsilon, dt, gamma = (r.scalar() for _ in range(4))
    mode_code = r.intval()
    jitter = r.scalar()
    ds_dt, ds_epsilon = r.scalar(), r.scalar()
    ds_seed = r.intval()
    if not 0 <= mode_code < len(DIFFUSED_MODES):
        raise InvariantError(
            f"unknown diffused-mode code {mode_code}",
            invariant="valid kernel config",
        )
    X = r.floats(n_x * N).reshape(n_x, N)
    U = r.floats(n_u * N).reshape(n_u, N)
    cost = r.floats(N)
    A = r.floats(N * N).reshape(N, N)
    blocks = [r.floats(N * N).reshape(N, N) for _ in range(n_u)]
    if not (np.all(np.isfinite(A)) and all(np.all(np.isfinite(B)) for B in blocks)):
        raise InvariantError(
            "operator matrices contain non-finite entries",
            invariant="finite operators",
        )
    # The successor snapshots are not persisted; the placeholder keeps
    # shapes honest while making any accidental use loudly non-finite.
    ds = Dataset(
        X=X,
        U=U,
        Y=np.full_like(X, np.nan),
        cost=cost,
        dt=ds_dt,
        epsilon=ds_epsilon,
        seed=ds_seed,
    )
    cfg = KernelConfig(
        sigma=sigma,
        epsilon=epsilon,
        dt=dt,
        gamma=gamma,
        diffused_mode=DIFFUSED_MODES[mode_code],
    )
    return EstimatedOperators(
        A_hat=A,
        B_hat_blocks=blocks,
        gram_factor=None,
        dataset_ref=ds,
        kernel_cfg=cfg,
        jitter=jitter,
    )


def _encode_value_solution(sol: ValueSolution) -> bytes:
    H = sol.horizon
    n_u = sol.policy.shape[1]
    N = sol.values.shape[1]
    conv = -1 if sol.converged_at is None else sol.converged_at
    parts = [
        _f64(H, N, n_u, sol.dt, conv, 0 if sol.box is None else 1),
    ]
    if sol.box is not None:
        lo, hi = sol.box
        parts.append(_arr(lo))
        parts.append(_arr(hi))
    parts.append(_arr(sol.values))
    parts.append(_arr(sol.policy))
    return b"".join(parts)


def _decode_value_solution(buf: bytes) -> ValueSolution:
    r = _Reader(buf)
    H, N, n_u = r.intval(), r.intval(), r.intval()
    dt = r.scalar()
    conv = r.intval()
    has_box = r.intval()
    box = None
    if has_box:
        lo = r.floats(n_u)
        hi = r.floats(n_u)
        box = (lo, hi)
    values = r.floats((H + 1) * N).reshape(H + 1, N)
    policy = r.floats(H * n_u * N).reshape(H, n_u, N)
    if not np.all(values[H] == 0.0):
        raise InvariantError(
            "terminal value row is not zero", invariant="zero terminal value"
        )
    return ValueSolution(
        values=values,
        policy=policy,
        horizon=H,
        dt=dt,
        converged_at=None if conv < 0 else conv,
        box=box,
    )


def _encode_report(report: BenchReport) -> bytes:
    def safe(v):
        if isinstance(v, float) and math.isnan(v):
            return None
        if isinstance(v, list):
            return [safe(x) for x in v]
        return v

    payload = {k: safe(v) for k, v in vars(report).items()}
    return json.dumps(payload, sort_keys=True).encode("utf-8")


def _decode_report(buf: bytes) -> BenchReport:
    raw = json.loads(buf.decode("utf-8"))

    def unsafe(v):
        return math.nan if v is None else v

    raw["rmse_mean"] = unsafe(raw["rmse_mean"])
    raw["rmse_std"] = unsafe(raw["rmse_std"])
    raw["per_rep_rmse"] = [unsafe(v) for v in raw["per_rep_rmse"]]
    return BenchReport(**raw)


_ENCODERS = {
    Dataset: (_KIND_DATASET, _encode_dataset),
    EstimatedOperators: (_KIND_MODEL, _encode_model),
    ValueSolution: (_KIND_VALUE_SOLUTION, _encode_value_solution),
    BenchReport: (_KIND_REPORT, _encode_report),
}

_DECODERS = {
    _KIND_DATASET: _decode_dataset,
    _KIND_MODEL: _decode_model,
    _KIND_VALUE_SOLUTION: _decode_value_solution,
    _KIND_REPORT: _decode_report,
}


def save(artifact: Persistable, path) -> None:
    """Atomically write an artifact file (temp file + rename).

    Raises
    ------
    InputError
        Unsupported artifact type.
    StorageError
        Filesystem failure; carries the path.
    """
    try:
        kind, encode = _ENCODERS[type(artifact)]
    except KeyError:
        raise InputError(
            f"cannot persist objects of type {type(artifact).__name__}"
        ) from None
    payload = encode(artifact)
    checksum = hashlib.blake2b(payload, digest_size=8).digest()
    header = MAGIC + struct.pack("<II", VERSION, kind)
    path = os.fspath(path)
    dest_dir = os.path.dirname(os.path.abspath(path))
    try:
        fd, tmp = tempfile.mkstemp(dir=dest_dir, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(header)
                fh.write(checksum)
                fh.write(payload)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, path)
        except BaseException:
            os.unlink(tmp)
            raise
    except OSError as exc:
        raise StorageError(f"cannot write artifact to {path!r}: {exc}") from exc


def load(path) -> Persistable:
    """Read and validate an artifact file.

    Raises
    ------
    HeaderError
        Truncated file, wrong magic, or unknown kind.
    VersionError
        Version other than the one this code writes.
    ChecksumError
        Payload bytes do not match the recorded checksum.
    InvariantError
        Structurally valid payload describing an invalid object.
    StorageError
        Filesystem failure.
    """
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise StorageError(f"cannot read artifact {path!r}: {exc}") from exc
    if len(blob) < 24:
        raise HeaderError(
            f"{path!r}: file too short to hold an artifact header"
        )
    if blob[:8] != MAGIC:
        raise HeaderError(f"{path!r}: bad magic tag {blob[:8]!r}")
    version, kind = struct.unpack("<II", blob[8:16])
    if version != VERSION:
        raise VersionError(
            f"{path!r}: version {version} not supported (expected {VERSION})"
        )
    if kind not in _DECODERS:
        raise HeaderError(f"{path!r}: unknown artifact kind {kind}")
    checksum, payload = blob[16:24], blob[24:]
    if hashlib.blake2b(payload, digest_size=8).digest() != checksum:
        raise ChecksumError(f"{path!r}: payload checksum mismatch")
    try:
        return _DECODERS[kind](payload)
    except InvariantError:
        raise
    except InputError as exc:
        raise InvariantError(str(exc), invariant=str(exc)) from exc
    except (ValueError, struct.error) as exc:
        raise InvariantError(
            f"{path!r}: malformed payload: {exc}",
            invariant="well-formed payload",
        ) from exc
