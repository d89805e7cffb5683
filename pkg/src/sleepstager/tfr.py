"""Time-frequency representation: log-power STFT, frequency filter banks and
the stacked multichannel image fed to the networks.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import BundleError, FormatError, ShapeError
from .signal_io import RecordingBundle

POWER_FLOOR = 1e-10
WIN_S = 2.0
OVERLAP = 0.5
NFFT = 256


def hamming(n: int) -> np.ndarray:
    """Symmetric Hamming window 0.54 - 0.46 cos(2 pi k / (n - 1))."""
    if n == 1:
        return np.ones(1)
    k = np.arange(n)
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * k / (n - 1))


def frame_count(length: int, win: int, hop: int) -> int:
    return (length - win) // hop + 1


def stft_log_power(samples, sample_rate_hz: int = 100, win_s: float = WIN_S,
                   overlap: float = OVERLAP, nfft: int = NFFT,
                   power_floor: float = POWER_FLOOR) -> np.ndarray:
    """Log-power spectrogram of one epoch, shape (nfft // 2 + 1, T).

    Frame t covers samples [t * hop, t * hop + win), is Hamming weighted and
    zero-padded to ``nfft`` points. Works on a batch too: leading axes of
    ``samples`` are preserved, e.g. (N, L) -> (N, F, T).
    """
    x = np.asarray(samples, dtype=np.float64)
    win = int(round(win_s * sample_rate_hz))
    hop = int(round(win * (1.0 - overlap)))
    if win > nfft:
        raise ShapeError(f"window of {win} samples exceeds nfft={nfft}")
    if hop < 1:
        raise ShapeError("overlap leaves a hop of zero samples")
    if x.shape[-1] < win:
        raise ShapeError(f"epoch too short: {x.shape[-1]} samples < window {win}")
    frames = np.lib.stride_tricks.sliding_window_view(x, win, axis=-1)[..., ::hop, :]
    spec = np.fft.rfft(frames * hamming(win), n=nfft, axis=-1)
    power = spec.real ** 2 + spec.imag ** 2
    out = np.log(np.maximum(power, power_floor))
    return np.swapaxes(out, -1, -2)


@dataclass(frozen=True)
class FilterBank:
    weights: np.ndarray  # (M, F)
    kind: str = "triangular"

    @property
    def M(self) -> int:
        return self.weights.shape[0]

    @property
    def F(self) -> int:
        return self.weights.shape[1]

    def digest(self) -> bytes:
        h = hashlib.sha256(self.kind.encode())
        h.update(np.ascontiguousarray(self.weights, dtype="<f8").tobytes())
        return h.digest()


def make_triangular_filterbank(M: int, F: int, sample_rate_hz: int = 100) -> FilterBank:
    """M unit-sum triangles with peaks evenly spaced over [0, Nyquist].

    Each triangle falls to zero at its neighbours' peaks, so adjacent
    filters cross at half height.
    """
    if not 2 <= M <= F:
        raise ShapeError(f"filter count M={M} must lie in [2, F={F}]")
    freqs = np.linspace(0.0, sample_rate_hz / 2.0, F)
    peaks = np.linspace(0.0, sample_rate_hz / 2.0, M)
    spacing = peaks[1] - peaks[0]
    w = np.maximum(0.0, 1.0 - np.abs(freqs[None, :] - peaks[:, None]) / spacing)
    # guard against round-off producing tiny negative or missing peaks
    w[w < 1e-12] = 0.0
    w /= w.sum(axis=1, keepdims=True)
    return FilterBank(w, "triangular")


def apply_filterbank(spec: np.ndarray, fb) -> np.ndarray:
    """output[m, t] = sum_f weights[m, f] * spec[f, t] (batched over leading axes)."""
    weights = fb.weights if isinstance(fb, FilterBank) else np.asarray(fb)
    spec = np.asarray(spec, dtype=np.float64)
    if spec.shape[-2] != weights.shape[1]:
        raise ShapeError(
            f"filter bank expects F={weights.shape[1]}, spectrogram has F={spec.shape[-2]}")
    return np.matmul(weights, spec)


@dataclass
class TFImage:
    values: np.ndarray  # (P, M, T)
    channel_names: tuple[str, ...]

    @property
    def shape(self):
        return self.values.shape


def build_tf_image(bundle: RecordingBundle, epoch_index: int,
                   channel_selection: Sequence[str],
                   fb_per_channel: Sequence[FilterBank | None],
                   standardizer: "Standardizer | None" = None) -> TFImage:
    """Stack per-channel filtered log-power planes for one epoch.

    A ``None`` filter bank keeps the raw F-bin spectrogram for that channel.
    """
    if len(fb_per_channel) != len(channel_selection):
        raise ShapeError("need one filter bank per selected channel")
    if not 0 <= epoch_index < bundle.n_epochs:
        raise BundleError(f"invalid epoch index {epoch_index}")
    planes = []
    for name, fb in zip(channel_selection, fb_per_channel):
        spec = stft_log_power(bundle.epoch(name, epoch_index), bundle.sample_rate_hz)
        planes.append(spec if fb is None else apply_filterbank(spec, fb))
    values = np.stack(planes)
    if standardizer is not None:
        values = standardizer.apply(values)
    return TFImage(values, tuple(channel_selection))


def recording_images(bundle: RecordingBundle, channel_selection: Sequence[str],
                     fb_per_channel: Sequence[FilterBank | None]) -> np.ndarray:
    """All epochs of a recording at once, shape (N, P, M, T)."""
    if len(fb_per_channel) != len(channel_selection):
        raise ShapeError("need one filter bank per selected channel")
    n, per = bundle.n_epochs, bundle.epoch_samples
    planes = []
    for name, fb in zip(channel_selection, fb_per_channel):
        x = np.asarray(bundle.channel(name).samples).reshape(n, per)
        spec = stft_log_power(x, bundle.sample_rate_hz)
        planes.append(spec if fb is None else apply_filterbank(spec, fb))
    return np.stack(planes, axis=1)


@dataclass
class Standardizer:
    """Per-channel zero-mean, unit-variance scaling with training-split statistics."""

    mean: np.ndarray  # (P,)
    std: np.ndarray  # (P,)

    @classmethod
    def fit(cls, images: Sequence[np.ndarray]) -> "Standardizer":
        stacked = np.concatenate([np.asarray(a) for a in images], axis=0)
        p = stacked.shape[1]
        flat = np.moveaxis(stacked, 1, 0).reshape(p, -1)
        mean = flat.mean(axis=1)
        std = flat.std(axis=1)
        std[std == 0] = 1.0
        return cls(mean, std)

    @classmethod
    def identity(cls, p: int) -> "Standardizer":
        return cls(np.zeros(p), np.ones(p))

    def apply(self, values: np.ndarray) -> np.ndarray:
        # channel axis is -3 for both (P, M, T) and (N, P, M, T)
        shape = (-1, 1, 1)
        return (values - self.mean.reshape(shape)) / self.std.reshape(shape)


# ---------------------------------------------------------------------------
# TF-image cache file

CACHE_MAGIC = b"SSTF"
CACHE_VERSION = 1


def bundle_digest(bundle: RecordingBundle) -> bytes:
    h = hashlib.sha256()
    h.update(bundle.subject_id.encode())
    h.update(struct.pack("<II", bundle.sample_rate_hz, bundle.epoch_len_s))
    for c in bundle.channels:
        h.update(c.name.encode())
        h.update(np.asarray(c.samples, dtype="<f4").tobytes())
    h.update(np.asarray(bundle.labels, dtype=np.int8).tobytes())
    return h.digest()


def filterbank_digest(fbs: Sequence[FilterBank | None]) -> bytes:
    h = hashlib.sha256()
    for fb in fbs:
        h.update(b"none" if fb is None else fb.digest())
    return h.digest()


@dataclass
class TFCache:
    images: np.ndarray  # (N, P, M, T) float64 read back from float32
    channel_names: tuple[str, ...]
    fb_digest: bytes
    source_digest: bytes


def write_tf_cache(path, images: np.ndarray, channel_names: Sequence[str],
                   fb_digest: bytes, source_digest: bytes) -> None:
    images = np.asarray(images)
    n, p, m, t = images.shape
    if p != len(channel_names):
        raise ShapeError("channel name count does not match image planes")
    header = bytearray(CACHE_MAGIC)
    header += struct.pack("<HHHHI", CACHE_VERSION, p, m, t, n)
    for name in channel_names:
        raw = name.encode()
        header += struct.pack("<H", len(raw)) + raw
    header += fb_digest + source_digest
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(bytes(header))
        fh.write(np.ascontiguousarray(images, dtype="<f4").tobytes())
    tmp.replace(path)


def read_tf_cache(path) -> TFCache:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != CACHE_MAGIC:
        raise FormatError(f"{path}: not a TF-image cache")
    version, p, m, t, n = struct.unpack_from("<HHHHI", raw, 4)
    if version != CACHE_VERSION:
        raise FormatError(f"{path}: unsupported cache version {version}")
    off = 16
    names = []
    for _ in range(p):
        (ln,) = struct.unpack_from("<H", raw, off)
        names.append(raw[off + 2:off + 2 + ln].decode())
        off += 2 + ln
    fb_digest, source_digest = raw[off:off + 32], raw[off + 32:off + 64]
    off += 64
    count = n * p * m * t
    if len(raw) - off != 4 * count:
        raise FormatError(f"{path}: payload size mismatch")
    images = np.frombuffer(raw, dtype="<f4", count=count, offset=off)
    return TFCache(images.reshape(n, p, m, t).astype(np.float64), tuple(names),
                   fb_digest, source_digest)
