import numpy as np
import pytest

from stresslrp.corpus import Alignment, AudioClip, Phone, Sample


def make_alignment(stress="initial", word_start=0.0, v1=(0.05, 0.15), v2=(0.25, 0.35), boundary=0.2,
                   word_end=0.4, label="word"):
    first = stress == "initial"
    phones = (
        Phone("K", word_start, v1[0]),
        Phone("A", v1[0], v1[1], True, first),
        Phone("T", v1[1], boundary),
        Phone("S", boundary, v2[0]),
        Phone("O", v2[0], v2[1], True, not first),
        Phone("N", v2[1], word_end),
    )
    return Alignment(label, word_start, word_end, phones, boundary, stress)


@pytest.fixture
def alignment():
    return make_alignment()


def tone(freq, seconds=0.5, sr=16000, amp=0.5):
    t = np.arange(int(round(seconds * sr))) / sr
    return AudioClip(amp * np.sin(2 * np.pi * freq * t), sr)


def sample_from(clip, alignment, word_type="word", source_id="s0"):
    return Sample(clip, alignment, word_type, source_id)


# -- acceptance summary ------------------------------------------------------

_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def acceptance_log(request):
    """Record one ``(number, title, passed, detail)`` line for the summary."""
    lines = request.config.stash[_ACCEPTANCE]

    def log(number, title, passed, detail=""):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        lines.append((number, line))
        print(line)

    return log


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines):
        terminalreporter.write_line(line)
