import numpy as np
import pytest

from sleepstager.signal_io import Channel, RecordingBundle


def make_bundle(n_epochs=3, channels=("EEG", "EOG"), rate=100, epoch_len_s=30, seed=0,
                labels=None, subject_id="T01", in_bed_range=None):
    rng = np.random.default_rng(seed)
    n = n_epochs * epoch_len_s * rate
    # float32-representable samples so on-disk round trips are exact
    chans = [Channel(c, rate, rng.standard_normal(n).astype(np.float32).astype(np.float64))
             for c in channels]
    if labels is None:
        labels = rng.integers(0, 5, n_epochs)
    return RecordingBundle(subject_id, chans, epoch_len_s, np.asarray(labels, dtype=np.int8),
                           in_bed_range)


@pytest.fixture
def bundle():
    return make_bundle()


# acceptance verdicts, collected and printed as one block at the end of the run
VERDICTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[VERDICTS] = {}


@pytest.fixture
def verdict(request):
    """record(number, title, ok, detail): keep one pass/fail line, then assert ``ok``."""
    def record(number: int, title: str, ok: bool, detail: str):
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} | {detail}"
        request.config.stash[VERDICTS][number] = line
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter, config):
    verdicts = config.stash[VERDICTS]
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for number in sorted(verdicts):
            terminalreporter.write_line(verdicts[number])
