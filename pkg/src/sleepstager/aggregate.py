"""Decision ensembles: scatter per-input slot posteriors onto target epochs and
fuse them by additive or multiplicative voting.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError
from .signal_io import STAGE_NAMES, StageLabel

LOG_FLOOR = 1e-12
SCHEMES = ("additive", "multiplicative")


@dataclass
class PosteriorGrid:
    """``probs[n, j]`` is P(y_n | X_{n + j - tau}) when ``present[n, j]``."""

    probs: np.ndarray  # (N, 2*tau + 1, Y)
    present: np.ndarray  # (N, 2*tau + 1) bool
    tau: int

    @property
    def n_epochs(self) -> int:
        return self.probs.shape[0]

    def entries(self, n: int) -> np.ndarray:
        return self.probs[n][self.present[n]]

    def offsets(self, n: int) -> list[int]:
        return [j - self.tau for j in np.flatnonzero(self.present[n])]


def scatter_decisions(outputs, tau: int, epoch_count: int) -> PosteriorGrid:
    """Place slot k of input epoch i at target epoch i + k.

    ``outputs`` is (N, 2*tau + 1, Y) with slots ordered k = -tau..tau.
    """
    out = np.asarray(outputs, dtype=np.float64)
    s = 2 * tau + 1
    if out.ndim != 3 or out.shape[1] != s:
        raise ShapeError(f"expected {s} slots per epoch, got shape {out.shape}")
    if out.shape[0] != epoch_count:
        raise ShapeError(f"{out.shape[0]} outputs for {epoch_count} epochs")
    n, _, y = out.shape
    probs = np.zeros((n, s, y))
    present = np.zeros((n, s), dtype=bool)
    for j in range(s):
        o = j - tau  # source epoch = target + o; source slot = tau - o
        lo, hi = max(0, -o), min(n, n - o)
        if lo >= hi:
            continue
        probs[lo:hi, j] = out[lo + o:hi + o, tau - o]
        present[lo:hi, j] = True
    return PosteriorGrid(probs, present, tau)


def _entries(entries) -> np.ndarray:
    e = np.asarray(entries, dtype=np.float64)
    if e.ndim == 1:
        e = e[None]
    if e.shape[0] == 0:
        raise ValueError("no decisions to fuse")
    return e


def vote_additive(entries) -> np.ndarray:
    """Mean of the available posteriors."""
    return _entries(entries).mean(axis=0)


def vote_multiplicative(entries, log: bool = False) -> np.ndarray:
    """Product of the available posteriors divided by their count.

    Computed in log space with each factor floored at 1e-12. With
    ``log=True`` the log of the fused value is returned, which is what
    decisions should use for large ensembles.
    """
    e = _entries(entries)
    score = np.sum(np.log(np.maximum(e, LOG_FLOOR)), axis=0) - np.log(e.shape[0])
    return score if log else np.exp(score)


def fuse(grid: PosteriorGrid, scheme: str) -> np.ndarray:
    """Fused scores (N, Y) whose argmax is the decision.

    Additive scores are the averaged posteriors; multiplicative scores are
    log-likelihoods.
    """
    count = grid.present.sum(axis=1)
    if np.any(count == 0):
        raise ValueError("epoch without any decision")
    mask = grid.present[..., None]
    if scheme == "additive":
        return np.sum(grid.probs * mask, axis=1) / count[:, None]
    if scheme == "multiplicative":
        logs = np.where(mask, np.log(np.maximum(grid.probs, LOG_FLOOR)), 0.0)
        return logs.sum(axis=1) - np.log(count)[:, None]
    raise ValueError(f"unknown voting scheme {scheme!r}")


@dataclass
class Hypnogram:
    labels: np.ndarray
    likelihoods: np.ndarray | None = None

    def __len__(self):
        return len(self.labels)


def decide(fused) -> Hypnogram:
    """Argmax per epoch; ties go to the lowest class index."""
    f = np.asarray(fused, dtype=np.float64)
    return Hypnogram(np.argmax(f, axis=1).astype(np.int64), f)


def normalized(scores: np.ndarray, scheme: str) -> np.ndarray:
    """Turn fused scores into per-epoch distributions (argmax preserved)."""
    if scheme == "multiplicative":
        z = scores - scores.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)
    return scores / scores.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# files

GRID_MAGIC = b"SSPG"
GRID_VERSION = 1


def write_posterior_grid(path, grid: PosteriorGrid) -> None:
    """Layout: magic, u16 version, u16 tau, u16 Y, u16 reserved, u32 N; then per
    epoch a presence bitmap (bit j = offset j - tau, LSB first) followed by
    the present posteriors as float32.
    """
    n, s, y = grid.probs.shape
    nbytes = (s + 7) // 8
    parts = [GRID_MAGIC, struct.pack("<HHHHI", GRID_VERSION, grid.tau, y, 0, n)]
    for i in range(n):
        bits = np.packbits(grid.present[i], bitorder="little")
        parts.append(bits.tobytes().ljust(nbytes, b"\0"))
        parts.append(np.ascontiguousarray(grid.probs[i][grid.present[i]], dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_posterior_grid(path) -> PosteriorGrid:
    """Read a grid back, renormalizing each float32 posterior to unit sum."""
    raw = Path(path).read_bytes()
    if raw[:4] != GRID_MAGIC:
        raise FormatError(f"{path}: not a posterior grid")
    version, tau, y, _, n = struct.unpack_from("<HHHHI", raw, 4)
    if version != GRID_VERSION:
        raise FormatError(f"{path}: unsupported grid version {version}")
    s = 2 * tau + 1
    nbytes = (s + 7) // 8
    probs = np.zeros((n, s, y))
    present = np.zeros((n, s), dtype=bool)
    off = 16
    for i in range(n):
        if off + nbytes > len(raw):
            raise FormatError(f"{path}: truncated at epoch {i}")
        bits = np.unpackbits(np.frombuffer(raw, np.uint8, nbytes, off), bitorder="little")[:s]
        off += nbytes
        present[i] = bits.astype(bool)
        k = int(bits.sum())
        vals = np.frombuffer(raw, "<f4", k * y, off).reshape(k, y).astype(np.float64)
        off += 4 * k * y
        probs[i][present[i]] = vals / vals.sum(axis=1, keepdims=True)
    if off != len(raw):
        raise FormatError(f"{path}: trailing bytes")
    return PosteriorGrid(probs, present, tau)


def write_hypnogram(path, labels) -> None:
    Path(path).write_text("".join(STAGE_NAMES[int(v)] + "\n" for v in labels))


def read_hypnogram(path) -> np.ndarray:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    return np.array([int(StageLabel.parse(ln)) for ln in lines], dtype=np.int64)
