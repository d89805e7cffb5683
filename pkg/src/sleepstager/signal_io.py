"""Recording bundles: on-disk format, validation, label harmonization,
epoch-grid conversion, resampling and cross-validation splits.

A bundle is a directory::

    manifest.txt        key = value lines (see MANIFEST_KEYS)
    <channel>.f32le     little-endian float32 samples, one file per channel
    labels.lab          one raw label byte per epoch

The manifest ``label_map`` maps raw label bytes to stage mnemonics, e.g.
``0:W,1:N1,2:N2,3:N3,4:REM``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import signal as sps

from .errors import BundleError, LabelError, SplitError

MANIFEST_NAME = "manifest.txt"
LABEL_FILE = "labels.lab"
BUNDLE_FORMAT = "sleepstager-bundle"
BUNDLE_VERSION = 1
TARGET_RATE_HZ = 100


class StageLabel(enum.IntEnum):
    W = 0
    N1 = 1
    N2 = 2
    N3 = 3
    REM = 4

    @classmethod
    def parse(cls, text: str) -> "StageLabel":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise LabelError(f"unknown stage mnemonic {text!r}") from None


N_STAGES = len(StageLabel)
STAGE_NAMES = tuple(s.name for s in StageLabel)


@dataclass
class Channel:
    name: str
    sample_rate_hz: int
    samples: np.ndarray


@dataclass
class RecordingBundle:
    subject_id: str
    channels: list[Channel]
    epoch_len_s: int
    labels: np.ndarray  # int8 stage indices, one per epoch
    in_bed_range: tuple[int, int] | None = None
    label_map: dict[int, StageLabel] = field(
        default_factory=lambda: {int(s): s for s in StageLabel}
    )
    zero_padded: bool = False

    @property
    def sample_rate_hz(self) -> int:
        return self.channels[0].sample_rate_hz

    @property
    def epoch_samples(self) -> int:
        return self.epoch_len_s * self.sample_rate_hz

    @property
    def n_epochs(self) -> int:
        return len(self.labels)

    @property
    def channel_names(self) -> list[str]:
        return [c.name for c in self.channels]

    def channel(self, name: str) -> Channel:
        for c in self.channels:
            if c.name == name:
                return c
        raise BundleError(f"missing channel {name!r}")

    def epoch(self, name: str, index: int) -> np.ndarray:
        if not 0 <= index < self.n_epochs:
            raise BundleError(f"epoch index {index} outside [0, {self.n_epochs})")
        n = self.epoch_samples
        return self.channel(name).samples[index * n:(index + 1) * n]

    def validate(self) -> "RecordingBundle":
        if not self.channels:
            raise BundleError("bundle has no channels")
        rate = self.channels[0].sample_rate_hz
        if rate <= 0:
            raise BundleError(f"sample rate must be positive, got {rate}")
        length = len(self.channels[0].samples)
        for c in self.channels[1:]:
            if c.sample_rate_hz != rate:
                raise BundleError(
                    f"channel {c.name!r} rate {c.sample_rate_hz} != {rate}")
            if len(c.samples) != length:
                raise BundleError(
                    f"channel length mismatch: {c.name!r} has {len(c.samples)} "
                    f"samples, {self.channels[0].name!r} has {length}")
        if self.epoch_len_s <= 0:
            raise BundleError(f"epoch_len_s must be positive, got {self.epoch_len_s}")
        per_epoch = self.epoch_len_s * rate
        if length % per_epoch:
            raise BundleError(
                f"duration {length} samples is not a multiple of the epoch "
                f"length ({per_epoch} samples)")
        if length // per_epoch != len(self.labels):
            raise BundleError(
                f"label count {len(self.labels)} != epoch count {length // per_epoch}")
        labels = np.asarray(self.labels)
        if labels.size and (labels.min() < 0 or labels.max() >= N_STAGES):
            raise LabelError("labels outside the 5-stage set")
        if self.in_bed_range is not None:
            a, b = self.in_bed_range
            if not (0 <= a <= b < len(self.labels)):
                raise BundleError(
                    f"in_bed_range {self.in_bed_range} outside [0, {len(self.labels)})")
        return self


# ---------------------------------------------------------------------------
# on-disk format

def _parse_label_map(text: str, path) -> dict[int, StageLabel]:
    out = {}
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        code, _, name = item.partition(":")
        try:
            code_i = int(code)
        except ValueError:
            raise BundleError(f"bad label_map entry {item!r}", path) from None
        if not 0 <= code_i <= 255:
            raise BundleError(f"label code {code_i} does not fit one byte", path)
        try:
            out[code_i] = StageLabel.parse(name)
        except LabelError as exc:
            raise BundleError(str(exc), path) from None
    if not out:
        raise BundleError("empty label_map", path)
    return out


def _read_manifest(path: Path) -> dict[str, str]:
    if not path.is_file():
        raise BundleError("missing file", path)
    entries = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        if not sep:
            raise BundleError(f"malformed manifest line {line!r}", path, f"line {lineno}")
        key = key.strip()
        if key in entries:
            raise BundleError(f"duplicate key {key!r}", path, f"line {lineno}")
        entries[key] = value.strip()
    return entries


def _require(entries, key, path):
    try:
        return entries[key]
    except KeyError:
        raise BundleError(f"malformed manifest: missing key {key!r}", path) from None


def _int(entries, key, path):
    try:
        return int(_require(entries, key, path))
    except ValueError:
        raise BundleError(f"malformed manifest: {key} is not an integer", path) from None


def load_bundle(path) -> RecordingBundle:
    root = Path(path)
    mpath = root / MANIFEST_NAME
    entries = _read_manifest(mpath)
    if entries.get("format", BUNDLE_FORMAT) != BUNDLE_FORMAT:
        raise BundleError(f"unexpected format {entries['format']!r}", mpath)
    subject = _require(entries, "subject_id", mpath)
    rate = _int(entries, "sample_rate_hz", mpath)
    epoch_len = _int(entries, "epoch_len_s", mpath)
    if rate <= 0 or epoch_len <= 0:
        raise BundleError("malformed manifest: rates and lengths must be positive", mpath)
    names = [n.strip() for n in _require(entries, "channels", mpath).split(",") if n.strip()]
    if not names:
        raise BundleError("malformed manifest: no channels", mpath)
    label_map = _parse_label_map(_require(entries, "label_map", mpath), mpath)
    in_bed = None
    if entries.get("in_bed_range"):
        parts = entries["in_bed_range"].split(",")
        try:
            in_bed = (int(parts[0]), int(parts[1]))
        except (ValueError, IndexError):
            raise BundleError("malformed manifest: in_bed_range must be 'start,end'",
                              mpath) from None
    zero_padded = entries.get("zero_padded", "false").lower() == "true"

    channels = []
    for name in names:
        cpath = root / f"{name}.f32le"
        if not cpath.is_file():
            raise BundleError("missing file", cpath)
        raw = cpath.read_bytes()
        if len(raw) % 4:
            raise BundleError("truncated float32 stream", cpath, len(raw) - len(raw) % 4)
        data = np.frombuffer(raw, dtype="<f4").astype(np.float64)
        if channels and len(data) != len(channels[0].samples):
            raise BundleError(
                f"channel length mismatch: {len(data)} samples vs "
                f"{len(channels[0].samples)} in {channels[0].name}.f32le", cpath, len(raw))
        channels.append(Channel(name, rate, data))

    lpath = root / LABEL_FILE
    if not lpath.is_file():
        raise BundleError("missing file", lpath)
    raw_labels = np.frombuffer(lpath.read_bytes(), dtype=np.uint8)
    labels = np.empty(len(raw_labels), dtype=np.int8)
    for offset, code in enumerate(raw_labels):
        try:
            labels[offset] = label_map[int(code)]
        except KeyError:
            raise BundleError(f"unknown label code {int(code)}", lpath, offset) from None

    bundle = RecordingBundle(subject, channels, epoch_len, labels, in_bed,
                             label_map, zero_padded)
    try:
        return bundle.validate()
    except BundleError as exc:
        raise BundleError(str(exc), root) from None


def _format_manifest(bundle: RecordingBundle) -> str:
    lines = [
        f"format = {BUNDLE_FORMAT}",
        f"version = {BUNDLE_VERSION}",
        f"subject_id = {bundle.subject_id}",
        f"sample_rate_hz = {bundle.sample_rate_hz}",
        f"epoch_len_s = {bundle.epoch_len_s}",
        f"channels = {','.join(bundle.channel_names)}",
        "label_map = " + ",".join(
            f"{code}:{stage.name}" for code, stage in sorted(bundle.label_map.items())),
    ]
    if bundle.in_bed_range is not None:
        lines.append(f"in_bed_range = {bundle.in_bed_range[0]},{bundle.in_bed_range[1]}")
    lines.append(f"zero_padded = {'true' if bundle.zero_padded else 'false'}")
    return "\n".join(lines) + "\n"


def write_bundle(bundle: RecordingBundle, path) -> Path:
    bundle.validate()
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    reverse = {}
    for code, stage in sorted(bundle.label_map.items()):
        reverse.setdefault(int(stage), code)
    missing = {int(s) for s in np.unique(bundle.labels)} - set(reverse)
    if missing:
        raise BundleError(f"label_map has no code for stages {sorted(missing)}", root)
    (root / MANIFEST_NAME).write_text(_format_manifest(bundle), encoding="utf-8")
    for c in bundle.channels:
        (root / f"{c.name}.f32le").write_bytes(
            np.asarray(c.samples, dtype="<f4").tobytes())
    codes = np.array([reverse[int(v)] for v in bundle.labels], dtype=np.uint8)
    (root / LABEL_FILE).write_bytes(codes.tobytes())
    return root


def find_bundles(root) -> list[Path]:
    """Bundle directories directly under ``root``, sorted by name."""
    root = Path(root)
    if (root / MANIFEST_NAME).is_file():
        return [root]
    return sorted(p for p in root.iterdir() if (p / MANIFEST_NAME).is_file())


# ---------------------------------------------------------------------------
# label harmonization

RK_CODES = ("W", "N1", "N2", "N3", "N4", "REM", "MOVEMENT", "UNKNOWN")
AASM_CODES = ("W", "N1", "N2", "N3", "REM")
_EXCLUDED = {"MOVEMENT", "UNKNOWN"}


def harmonize_labels(raw_labels: Iterable[str], scheme: str):
    """Map raw stage codes onto the 5-stage set.

    Returns ``(labels, kept_mask)``. Excluded epochs (MOVEMENT, UNKNOWN) get
    ``None`` in ``labels`` and ``False`` in the mask.
    """
    scheme = scheme.upper()
    if scheme == "RK":
        valid = RK_CODES
    elif scheme == "AASM":
        valid = AASM_CODES
    else:
        raise LabelError(f"unknown scoring scheme {scheme!r}")
    labels, kept = [], []
    for i, code in enumerate(raw_labels):
        c = str(code).strip().upper()
        if c not in valid:
            raise LabelError(f"code {code!r} at index {i} not in the {scheme} code set")
        if c in _EXCLUDED:
            labels.append(None)
            kept.append(False)
            continue
        if c == "N4":
            c = "N3"
        labels.append(StageLabel[c])
        kept.append(True)
    return labels, kept


# ---------------------------------------------------------------------------
# epoch grid and sampling-rate conversion

def convert_epoch_grid_20_to_30(bundle: RecordingBundle) -> RecordingBundle:
    """Re-cut 20 s epochs into 30 s epochs centred on the originals.

    Output epoch n covers original samples [n*20s - 5s, n*20s + 25s); samples
    before the start or past the end of the recording are zeros.
    """
    if bundle.epoch_len_s != 20:
        raise BundleError(f"expected 20 s epochs, got {bundle.epoch_len_s} s")
    rate = bundle.sample_rate_hz
    pad, old, new = 5 * rate, 20 * rate, 30 * rate
    n = bundle.n_epochs
    idx = (np.arange(n)[:, None] * old - pad + np.arange(new)[None, :]).ravel()
    inside = (idx >= 0) & (idx < n * old)
    channels = []
    for c in bundle.channels:
        out = np.zeros(n * new, dtype=np.float64)
        out[inside] = np.asarray(c.samples)[idx[inside]]
        channels.append(Channel(c.name, rate, out))
    return replace(bundle, channels=channels, epoch_len_s=30,
                   labels=np.array(bundle.labels, copy=True), zero_padded=True).validate()


MAX_RESAMPLE_FACTOR = 1000


def _lowpass_taps(up: int, down: int, src_rate_hz: int) -> np.ndarray:
    half_len = 10 * max(up, down)
    # cutoff 0.45 x target rate, expressed against the upsampled Nyquist
    cutoff = 0.45 * TARGET_RATE_HZ / (0.5 * src_rate_hz * up)
    return sps.firwin(2 * half_len + 1, cutoff, window=("kaiser", 5.0))


def resample_to_100hz(samples, src_rate_hz: int) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    if isinstance(src_rate_hz, bool) or int(src_rate_hz) != src_rate_hz or src_rate_hz <= 0:
        raise BundleError(f"unsupported rate ratio: source rate {src_rate_hz!r}")
    src = int(src_rate_hz)
    if src == TARGET_RATE_HZ:
        return x.copy()
    if src < TARGET_RATE_HZ:
        raise BundleError(f"unsupported rate ratio: upsampling from {src} Hz")
    g = math.gcd(src, TARGET_RATE_HZ)
    up, down = TARGET_RATE_HZ // g, src // g
    if max(up, down) > MAX_RESAMPLE_FACTOR:
        raise BundleError(f"unsupported rate ratio {up}/{down}")
    return sps.resample_poly(x, up, down, window=_lowpass_taps(up, down, src))


def resample_bundle(bundle: RecordingBundle) -> RecordingBundle:
    if bundle.sample_rate_hz == TARGET_RATE_HZ:
        return bundle
    channels = []
    n_out = bundle.n_epochs * bundle.epoch_len_s * TARGET_RATE_HZ
    for c in bundle.channels:
        y = resample_to_100hz(c.samples, c.sample_rate_hz)
        if len(y) < n_out:
            y = np.pad(y, (0, n_out - len(y)))
        channels.append(Channel(c.name, TARGET_RATE_HZ, y[:n_out]))
    return replace(bundle, channels=channels).validate()


def trim_in_bed(bundle: RecordingBundle) -> RecordingBundle:
    if bundle.in_bed_range is None:
        raise BundleError(f"{bundle.subject_id}: no in_bed_range to trim to")
    a, b = bundle.in_bed_range
    n = bundle.epoch_samples
    channels = [Channel(c.name, c.sample_rate_hz, np.asarray(c.samples)[a * n:(b + 1) * n].copy())
                for c in bundle.channels]
    return replace(bundle, channels=channels,
                   labels=np.array(bundle.labels[a:b + 1], copy=True),
                   in_bed_range=(0, b - a)).validate()


# ---------------------------------------------------------------------------
# cross-validation splits

@dataclass(frozen=True)
class Fold:
    train: tuple[str, ...]
    validation: tuple[str, ...]
    test: tuple[str, ...]


@dataclass(frozen=True)
class SplitPlan:
    folds: tuple[Fold, ...]

    def __len__(self):
        return len(self.folds)

    def __getitem__(self, i) -> Fold:
        return self.folds[i]


def make_split_plan(subject_ids: Sequence[str], protocol: str, seed: int,
                    n_validation: int, k: int | None = None) -> SplitPlan:
    """Subject-wise cross-validation folds.

    ``protocol`` is ``"loso"`` (leave one subject out) or ``"kfold"``. In
    both cases validation subjects are drawn at random from the non-test
    subjects of each fold.
    """
    subjects = list(subject_ids)
    if len(set(subjects)) != len(subjects):
        raise SplitError("duplicate subject ids")
    rng = np.random.default_rng(seed)
    if protocol == "loso":
        if len(subjects) < n_validation + 2:
            raise SplitError(
                f"too few subjects: {len(subjects)} for 1 test + {n_validation} "
                "validation + >=1 training")
        test_groups = [[s] for s in subjects]
    elif protocol == "kfold":
        if k is None or k < 2:
            raise SplitError("kfold needs k >= 2")
        if len(subjects) < k:
            raise SplitError(f"too few subjects: {len(subjects)} for {k} folds")
        order = [subjects[i] for i in rng.permutation(len(subjects))]
        test_groups = [list(g) for g in np.array_split(np.array(order, dtype=object), k)]
        if len(subjects) - max(len(g) for g in test_groups) < n_validation + 1:
            raise SplitError(
                f"too few subjects: {len(subjects)} for {k} folds with "
                f"{n_validation} validation subjects")
    else:
        raise SplitError(f"unknown protocol {protocol!r}")

    folds = []
    for test in test_groups:
        rest = [s for s in subjects if s not in test]
        picked = rng.permutation(len(rest))
        val = sorted(rest[i] for i in picked[:n_validation])
        train = sorted(rest[i] for i in picked[n_validation:])
        folds.append(Fold(tuple(train), tuple(val), tuple(sorted(test))))
    return SplitPlan(tuple(folds))
