"""Little-endian binary containers for joint problems and dense tensors.

Problem file (``TDTP``)::

    magic "TDTP" | version u32 | T u32 | U u32 | V u32 | N_d u32
    | N_d durations u32 | U targets u32 | T*(U+1)*(V+1+N_d) f32, row-major (t, u, k)

Tensor file (``TDTT``)::

    magic "TDTT" | version u32 | rank u32 | rank dims u32 | prod(dims) f64, row-major

Joints are stored as f32 and widened to f64 on load.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .lattice import DurationSet, JointProblem

PROBLEM_MAGIC = b"TDTP"
TENSOR_MAGIC = b"TDTT"
FORMAT_VERSION = 1


class FormatError(ValueError):
    code = 10


class BadMagicError(FormatError):
    code = 11


class SizeMismatchError(FormatError):
    code = 12


class InvalidProblemError(FormatError):
    code = 13


class UnsupportedVersionError(FormatError):
    code = 14


def _u32(buf: bytes, offset: int, count: int, what: str) -> tuple[np.ndarray, int]:
    end = offset + 4 * count
    if end > len(buf):
        raise SizeMismatchError(f"file truncated while reading {what}")
    return np.frombuffer(buf, dtype="<u4", count=count, offset=offset), end


def problem_to_bytes(problem: JointProblem) -> bytes:
    header = struct.pack(
        "<4s5I", PROBLEM_MAGIC, FORMAT_VERSION, problem.T, problem.U, problem.V, problem.n_durations
    )
    durations = np.asarray(list(problem.durations), dtype="<u4").tobytes()
    targets = problem.targets.astype("<u4").tobytes()
    payload = np.ascontiguousarray(problem.logits, dtype="<f4").tobytes()
    return header + durations + targets + payload


def problem_from_bytes(buf: bytes) -> JointProblem:
    if len(buf) < 4 or buf[:4] != PROBLEM_MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {PROBLEM_MAGIC!r}")
    (version, T, U, V, nd), off = _u32(buf, 4, 5, "header")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported format version {version}")
    T, U, V, nd = int(T), int(U), int(V), int(nd)
    durations, off = _u32(buf, off, nd, "durations")
    targets, off = _u32(buf, off, U, "targets")
    n = T * (U + 1) * (V + 1 + nd)
    expected = off + 4 * n
    if len(buf) != expected:
        raise SizeMismatchError(f"payload is {len(buf) - off} bytes, header implies {4 * n}")
    logits = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(T, U + 1, V + 1 + nd)
    try:
        return JointProblem(logits.astype(np.float64), targets.astype(np.int64), V, DurationSet(durations.tolist()))
    except ValueError as e:
        raise InvalidProblemError(str(e)) from e


def write_problem(problem: JointProblem, path: str | os.PathLike) -> None:
    with open(path, "wb") as f:
        f.write(problem_to_bytes(problem))


def read_problem(path: str | os.PathLike) -> JointProblem:
    with open(path, "rb") as f:
        return problem_from_bytes(f.read())


def tensor_to_bytes(array: np.ndarray) -> bytes:
    array = np.ascontiguousarray(array, dtype="<f8")
    header = struct.pack("<4s2I", TENSOR_MAGIC, FORMAT_VERSION, array.ndim)
    dims = np.asarray(array.shape, dtype="<u4").tobytes()
    return header + dims + array.tobytes()


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 4 or buf[:4] != TENSOR_MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {TENSOR_MAGIC!r}")
    (version, rank), off = _u32(buf, 4, 2, "header")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported format version {version}")
    dims, off = _u32(buf, off, int(rank), "dims")
    shape = tuple(int(d) for d in dims)
    n = int(np.prod(shape, dtype=np.int64))
    if len(buf) != off + 8 * n:
        raise SizeMismatchError(f"payload is {len(buf) - off} bytes, header implies {8 * n}")
    return np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)


def write_tensor(array: np.ndarray, path: str | os.PathLike) -> None:
    with open(path, "wb") as f:
        f.write(tensor_to_bytes(array))


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        return tensor_from_bytes(f.read())
