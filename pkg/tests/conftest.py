import numpy as np
import pytest

from fasterknn.decode import build_resources
from fasterknn.synth import SynthEncoder, VocabSpec, gen_corpus

# criterion number -> [label, outcome, details]; filled by tests marked ``acceptance``
ACCEPTANCE_RESULTS: dict[int, list] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("acceptance")
        if mark is not None:
            item.user_properties.append(("criterion", mark.kwargs["criterion"]))
            item.user_properties.append(("label", mark.kwargs.get("label", "")))


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    crit = props.get("criterion")
    if crit is None or (report.when != "call" and not report.failed):
        return
    entry = ACCEPTANCE_RESULTS.setdefault(crit, [props.get("label", ""), "PASS", []])
    if report.failed:
        entry[1] = "FAIL"
    elif report.skipped and entry[1] == "PASS":
        entry[1] = "SKIP"
    entry[2].extend(v for k, v in report.user_properties if k == "detail")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(ACCEPTANCE_RESULTS):
        label, outcome, details = ACCEPTANCE_RESULTS[crit]
        suffix = f" ({'; '.join(details)})" if details else ""
        terminalreporter.write_line(f"{outcome} criterion {crit:>2}: {label}{suffix}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_spec():
    return VocabSpec.random(30, seed=3)


@pytest.fixture(scope="session")
def small_corpus(small_spec):
    return gen_corpus(small_spec, 400, 9, seed=4)


@pytest.fixture(scope="session")
def small_encoder():
    return SynthEncoder(16, seed=5)


@pytest.fixture(scope="session")
def small_resources(small_spec, small_corpus, small_encoder):
    return build_resources(
        small_corpus,
        small_encoder,
        dictionary=small_spec.dictionary,
        target_size=small_spec.target_size,
        c=8,
        m=16,
        freq_threshold=300,
        seed=6,
    )
