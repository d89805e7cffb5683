"""Synthetic multichannel sleep recordings.

Stage sequences come from a first-order Markov chain calibrated to target
same-label ratios at lag 1 and lag 2. Each stage has a spectral signature per
channel; epoch signals are Gaussian noise shaped in the frequency domain.
Stage changes are gradual: around every label change the two stages'
signals are cross-faded over a short ramp, so an epoch next to a transition
carries a trace of its neighbour.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq, least_squares

from .errors import CalibrationError
from .signal_io import N_STAGES, Channel, RecordingBundle, StageLabel

SAMPLE_RATE = 100
EPOCH_S = 30
DEFAULT_CHANNELS = ("EEG", "EOG", "EMG")

# W, N1, N2, N3, REM
DEFAULT_STATIONARY = np.array([0.10, 0.07, 0.48, 0.14, 0.21])

# relative propensity of each transition (symmetric, zero diagonal)
TRANSITION_AFFINITY = np.array([
    [0.00, 1.00, 0.50, 0.05, 0.50],
    [1.00, 0.00, 1.00, 0.05, 0.50],
    [0.50, 1.00, 0.00, 1.00, 0.50],
    [0.05, 0.05, 1.00, 0.00, 0.02],
    [0.50, 0.50, 0.50, 0.02, 0.00],
])
# relative leave rate per stage before the heterogeneity exponent is applied
LEAVE_PROFILE = np.array([1.5, 4.0, 0.6, 0.8, 0.5])


@dataclass
class MarkovStageModel:
    initial: np.ndarray
    transition: np.ndarray

    def __post_init__(self):
        self.initial = np.asarray(self.initial, dtype=np.float64)
        self.transition = np.asarray(self.transition, dtype=np.float64)
        if self.transition.shape != (N_STAGES, N_STAGES) or self.initial.shape != (N_STAGES,):
            raise CalibrationError("Markov model must be over 5 stages")
        if np.any(self.transition < 0) or np.any(np.abs(self.transition.sum(axis=1) - 1) > 1e-12):
            raise CalibrationError("transition rows must be probability distributions")
        if np.any(self.initial < 0) or abs(self.initial.sum() - 1) > 1e-12:
            raise CalibrationError("initial distribution must sum to 1")

    def stationary(self) -> np.ndarray:
        vals, vecs = np.linalg.eig(self.transition.T)
        v = np.real(vecs[:, np.argmin(np.abs(vals - 1))])
        return v / v.sum()

    def same_label_ratio(self, lag: int) -> float:
        """Stationary probability that epochs ``lag`` apart share a label."""
        pk = np.linalg.matrix_power(self.transition, lag)
        return float(np.sum(self.stationary() * np.diag(pk)))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        cum = np.cumsum(self.transition, axis=1)
        cum[:, -1] = 1.0
        u = rng.random(n)
        out = np.empty(n, dtype=np.int64)
        state = int(np.searchsorted(np.cumsum(self.initial), u[0], side="right"))
        state = min(state, N_STAGES - 1)
        out[0] = state
        rows = cum.tolist()
        for i in range(1, n):
            row = rows[state]
            x = u[i]
            state = 0
            while row[state] <= x:
                state += 1
            out[i] = state
        return out


def _symmetric_flows(out_mass: np.ndarray, affinity: np.ndarray) -> np.ndarray:
    """Symmetric F = affinity * x x^T with row sums ``out_mass``."""
    target = np.maximum(out_mass, 1e-300)

    def resid(u):
        x = np.exp(u)
        return (x * (affinity @ x) - target) / target

    sol = least_squares(resid, 0.5 * np.log(target), xtol=1e-15, ftol=1e-15, gtol=1e-15)
    if np.max(np.abs(sol.fun)) > 1e-9:
        raise CalibrationError("no symmetric flow matches the requested leave rates")
    x = np.exp(sol.x)
    return affinity * np.outer(x, x)


def _chain(lag1: float, gamma: float, stationary: np.ndarray) -> np.ndarray:
    weights = LEAVE_PROFILE ** gamma
    leave_total = 1.0 - lag1

    def excess(c):
        return np.sum(stationary * np.minimum(1.0, c * weights)) - leave_total

    c = brentq(excess, 0.0, 1.0 / weights.min() + 1.0, xtol=1e-15, rtol=1e-15)
    rates = np.minimum(1.0, c * weights)
    flows = _symmetric_flows(stationary * rates, TRANSITION_AFFINITY)
    p = flows / stationary[:, None]
    np.fill_diagonal(p, 1.0 - rates)
    p /= p.sum(axis=1, keepdims=True)
    return p


def calibrate_transition_matrix(target_lag1: float = 0.833, target_lag2: float = 0.793,
                                stationary=None, seed: int = 0) -> MarkovStageModel:
    """Fit a chain with the given stationary distribution and same-label ratios.

    Family: stage i stays with probability 1 - r_i, r_i = min(1, c * g_i ** gamma)
    for a fixed leave profile g. ``c`` fixes the lag-1 ratio in closed form
    (given gamma); leaving mass is spread over a symmetric flow network so
    the stationary distribution is exact. ``gamma`` is scanned on [0, 8] and
    refined by root finding to hit the lag-2 ratio. The search is
    deterministic; ``seed`` is accepted for interface stability only.
    """
    del seed
    pi = DEFAULT_STATIONARY if stationary is None else np.asarray(stationary, dtype=np.float64)
    if pi.shape != (N_STAGES,) or np.any(pi <= 0) or abs(pi.sum() - 1) > 1e-9:
        raise CalibrationError("stationary distribution must be positive over 5 stages")
    pi = pi / pi.sum()
    if not (0 < target_lag1 < 1 and 0 < target_lag2 < 1):
        raise CalibrationError(f"infeasible targets ({target_lag1}, {target_lag2}): "
                               "ratios must lie strictly inside (0, 1)")
    if target_lag2 > target_lag1:
        raise CalibrationError("lag-2 ratio above lag-1 ratio is outside the supported regime")
    if target_lag1 <= float(np.sum(pi * pi)):
        raise CalibrationError("lag-1 target at or below the independent-sampling level")

    def lag2_gap(gamma):
        p = _chain(target_lag1, gamma, pi)
        return float(np.sum(pi * np.diag(p @ p))) - target_lag2

    grid = np.linspace(0.0, 8.0, 161)
    prev_g, prev_v = None, None
    for g in grid:
        try:
            v = lag2_gap(g)
        except CalibrationError:
            prev_g = None
            continue
        if v == 0.0:
            return MarkovStageModel(pi.copy(), _chain(target_lag1, g, pi))
        if prev_g is not None and np.sign(v) != np.sign(prev_v):
            gamma = brentq(lag2_gap, prev_g, g, xtol=1e-12)
            model = MarkovStageModel(pi.copy(), _chain(target_lag1, gamma, pi))
            if (abs(model.same_label_ratio(1) - target_lag1) > 0.005
                    or abs(model.same_label_ratio(2) - target_lag2) > 0.01):
                break
            return model
        prev_g, prev_v = g, v
    raise CalibrationError(
        f"infeasible targets ({target_lag1}, {target_lag2}) for this chain family")


# ---------------------------------------------------------------------------
# spectral signatures

@dataclass(frozen=True)
class Band:
    center_hz: float
    bandwidth_hz: float
    power: float


@dataclass(frozen=True)
class StageSignature:
    bands: tuple[Band, ...]
    floor: float


def _sig(floor, *bands):
    return StageSignature(tuple(Band(*b) for b in bands), floor)


def default_signatures() -> dict[str, dict[int, StageSignature]]:
    """Per channel, per stage spectral signatures (power densities, arbitrary units)."""
    W, N1, N2, N3, REM = (int(s) for s in StageLabel)
    return {
        "EEG": {
            W: _sig(0.02, (10.0, 3.0, 4.0), (20.0, 8.0, 0.6)),
            N1: _sig(0.02, (5.5, 3.0, 4.0), (10.0, 3.0, 0.8)),
            N2: _sig(0.02, (13.5, 3.0, 3.0), (5.5, 3.0, 2.5), (1.5, 1.5, 2.0)),
            N3: _sig(0.02, (1.25, 1.5, 60.0), (5.5, 3.0, 1.5)),
            REM: _sig(0.02, (5.5, 3.0, 3.0), (9.0, 3.0, 1.0), (20.0, 8.0, 0.4)),
        },
        "EOG": {
            W: _sig(0.02, (1.0, 1.5, 2.0), (10.0, 3.0, 0.5)),
            N1: _sig(0.02, (0.7, 1.0, 2.0), (5.5, 3.0, 0.8)),
            N2: _sig(0.02, (1.0, 1.5, 0.5), (13.5, 3.0, 0.4)),
            N3: _sig(0.02, (1.25, 1.5, 15.0)),
            REM: _sig(0.02, (2.0, 2.0, 6.0), (5.5, 3.0, 0.8)),
        },
        "EMG": {
            W: _sig(0.3, (30.0, 30.0, 4.0)),
            N1: _sig(0.2, (30.0, 30.0, 1.5)),
            N2: _sig(0.15, (30.0, 30.0, 1.0)),
            N3: _sig(0.15, (30.0, 30.0, 0.8)),
            REM: _sig(0.05, (30.0, 30.0, 0.15)),
        },
    }


@dataclass(frozen=True)
class SynthConfig:
    n_epochs: int = 500
    channels: tuple[str, ...] = DEFAULT_CHANNELS
    gain_sigma: float = 0.8  # per-epoch lognormal jitter of each band's power
    ramp_s: float = 30.0  # cross-fade length around a stage change
    jitter_s: float = 1.0  # random shift of the cross-fade centre
    ambiguous_rate: float = 0.08  # share of epochs blended with another stage
    ambiguous_mix: tuple[float, float] = (0.35, 0.65)  # blend weight range of the other stage
    target_lag1: float = 0.833
    target_lag2: float = 0.793
    signatures: dict = field(default_factory=default_signatures, compare=False)


def _band_shapes(sig: StageSignature, freqs: np.ndarray) -> list[np.ndarray]:
    return [np.exp(-0.5 * ((freqs - b.center_hz) / (b.bandwidth_hz / 2.0)) ** 2)
            for b in sig.bands]


def _density(sig: StageSignature, freqs: np.ndarray, gains: np.ndarray,
             shapes: list[np.ndarray] | None = None) -> np.ndarray:
    if shapes is None:
        shapes = _band_shapes(sig, freqs)
    d = np.full_like(freqs, sig.floor * gains[0])
    for band, g, shape in zip(sig.bands, gains[1:], shapes):
        d += g * band.power * shape
    return d


def _shaped_noise(densities: np.ndarray, white: np.ndarray) -> np.ndarray:
    """Rows of ``white`` coloured by the matching rows of ``densities``."""
    n = white.shape[-1]
    return np.fft.irfft(np.fft.rfft(white, axis=-1) * np.sqrt(densities), n=n, axis=-1)


def stage_weights(labels: np.ndarray, per_epoch: int, rate: int, ramp_s: float,
                  jitter_s: float, rng: np.random.Generator) -> np.ndarray:
    """(N_STAGES, N * per_epoch) mixing weights that sum to 1 at every sample."""
    n = len(labels)
    total = n * per_epoch
    w = np.zeros((N_STAGES, total))
    w[np.repeat(labels, per_epoch), np.arange(total)] = 1.0
    half = ramp_s * rate / 2.0
    change = np.flatnonzero(labels[1:] != labels[:-1])
    shifts = rng.uniform(-jitter_s, jitter_s, size=len(change)) * rate
    for i, shift in zip(change, shifts):
        centre = (i + 1) * per_epoch + shift
        lo, hi = int(np.floor(centre - half)), int(np.ceil(centre + half))
        lo, hi = max(lo, 0), min(hi, total)
        t = np.arange(lo, hi)
        frac = np.clip((t - (centre - half)) / (2 * half), 0.0, 1.0)
        a, b = labels[i], labels[i + 1]
        w[:, lo:hi] = 0.0
        w[a, lo:hi] = 1.0 - frac
        w[b, lo:hi] = frac
    return w


def blend_with_other_stages(weights: np.ndarray, labels: np.ndarray, per_epoch: int,
                            rate: float, mix: tuple[float, float],
                            rng: np.random.Generator) -> None:
    """Turn a random share of epochs into ambiguous ones, in place.

    An ambiguous epoch keeps its label but its signal is blended with a
    different, randomly chosen stage. These epochs are what neighbouring
    decisions can correct.
    """
    n = len(labels)
    picked = rng.random(n) < rate
    others = rng.integers(1, N_STAGES, size=n)
    amounts = rng.uniform(mix[0], mix[1], size=n)
    for e in np.flatnonzero(picked):
        other = (int(labels[e]) + int(others[e])) % N_STAGES
        seg = slice(e * per_epoch, (e + 1) * per_epoch)
        weights[:, seg] *= 1.0 - amounts[e]
        weights[other, seg] += amounts[e]


def generate_recording(model: MarkovStageModel, signatures: dict | None, n_epochs: int,
                       channels=None, seed: int = 0, config: SynthConfig | None = None,
                       subject_id: str | None = None) -> RecordingBundle:
    """Deterministic synthetic recording at 100 Hz with 30 s epochs.

    ``signatures`` defaults to ``config.signatures``; ``channels`` to
    ``config.channels``.
    """
    if n_epochs < 1:
        raise ValueError("n_epochs must be >= 1")
    cfg = config or SynthConfig()
    chans = tuple(channels or cfg.channels)
    sigs = signatures if signatures is not None else cfg.signatures
    for c in chans:
        if c not in sigs:
            raise ValueError(f"no signature for channel {c!r}")
    rng = np.random.default_rng(seed)
    labels = model.sample(n_epochs, rng)  # first draws; corpus_labels depends on this
    per = SAMPLE_RATE * EPOCH_S
    weights = stage_weights(labels, per, SAMPLE_RATE, cfg.ramp_s, cfg.jitter_s, rng)
    blend_with_other_stages(weights, labels, per, cfg.ambiguous_rate, cfg.ambiguous_mix, rng)
    freqs = np.fft.rfftfreq(per, 1.0 / SAMPLE_RATE)
    # Mixed segments are loudness matched: each stage enters at unit nominal
    # power and the blend is rescaled to the geometric mean of the stage
    # powers, so a quiet stage stays visible next to a loud one.
    log_power, shapes = {}, {}
    for c in chans:
        shapes[c] = [_band_shapes(sigs[c][s], freqs) for s in range(N_STAGES)]
        nominal = [_density(sigs[c][s], freqs, np.ones(len(sigs[c][s].bands) + 1), shapes[c][s])
                   for s in range(N_STAGES)]
        log_power[c] = np.log([d.sum() for d in nominal])
    out = {c: np.zeros(n_epochs * per) for c in chans}
    for e in range(n_epochs):
        seg = slice(e * per, (e + 1) * per)
        w = weights[:, seg]
        active = np.flatnonzero(w.max(axis=1) > 0)
        for c in chans:
            x = out[c][seg]
            level = np.exp(0.5 * (log_power[c] @ w))
            dens, white = [], []
            for s in active:
                sig = sigs[c][int(s)]
                gains = np.exp(cfg.gain_sigma * rng.standard_normal(len(sig.bands) + 1))
                dens.append(_density(sig, freqs, gains, shapes[c][int(s)]))
                white.append(rng.standard_normal(per))
            noise = _shaped_noise(np.stack(dens), np.stack(white))
            for s, z in zip(active, noise):
                x += np.sqrt(w[s]) * level * np.exp(-0.5 * log_power[c][s]) * z
    bundle = RecordingBundle(
        subject_id=subject_id or f"synth{seed}",
        channels=[Channel(c, SAMPLE_RATE, out[c]) for c in chans],
        epoch_len_s=EPOCH_S,
        labels=labels.astype(np.int8),
    )
    return bundle.validate()


def _subject_seeds(n_subjects: int, seed: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n_subjects)]


def generate_corpus(n_subjects: int, n_epochs: int, seed: int,
                    config: SynthConfig | None = None) -> list[RecordingBundle]:
    cfg = config or SynthConfig()
    model = calibrate_transition_matrix(cfg.target_lag1, cfg.target_lag2)
    return [generate_recording(model, None, n_epochs, seed=s, config=cfg,
                               subject_id=f"S{i:03d}")
            for i, s in enumerate(_subject_seeds(n_subjects, seed))]


def corpus_labels(n_subjects: int, n_epochs: int, seed: int,
                  config: SynthConfig | None = None) -> list[np.ndarray]:
    """The label sequences ``generate_corpus`` would attach, without the signals.

    Labels are the first draws of each recording's generator, so this is
    exact and costs a tiny fraction of full generation.
    """
    cfg = config or SynthConfig()
    model = calibrate_transition_matrix(cfg.target_lag1, cfg.target_lag2)
    return [model.sample(n_epochs, np.random.default_rng(s))
            for s in _subject_seeds(n_subjects, seed)]


BANDS_HZ = ((0.5, 2.0), (2.0, 4.0), (4.0, 7.0), (8.0, 12.0), (11.0, 16.0), (16.0, 30.0),
            (30.0, 50.0))


def band_power_features(bundle: RecordingBundle) -> np.ndarray:
    """(N, channels * bands) mean log-power per band, from the log-power STFT."""
    from .tfr import NFFT, stft_log_power

    freqs = np.fft.rfftfreq(NFFT, 1.0 / bundle.sample_rate_hz)
    feats = []
    for c in bundle.channels:
        spec = stft_log_power(np.asarray(c.samples).reshape(bundle.n_epochs, -1),
                              bundle.sample_rate_hz)
        for lo, hi in BANDS_HZ:
            sel = (freqs >= lo) & (freqs <= hi)
            feats.append(spec[:, sel, :].mean(axis=(1, 2)))
    return np.stack(feats, axis=1)
