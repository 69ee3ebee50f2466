import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from semicap.vocab import Vocabulary

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=30, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def toy_vocab():
    # 4 reserved ids, then words; concepts are 'cat', 'dog', 'red', 'ball'
    tokens = ["<pad>", "<bos>", "<eos>", "<unk>", "a", "cat", "dog", "red", "ball", "the", "on"]
    return Vocabulary(tokens, [5, 6, 7, 8])


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# acceptance criteria report: one line per criterion in the terminal summary
_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def acceptance():
    def record(number: int, title: str, passed: bool, detail: str = "") -> bool:
        line = f"AC{number:<2} {'PASS' if passed else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        _ACCEPTANCE[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
