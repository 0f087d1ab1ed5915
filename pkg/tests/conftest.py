import numpy as np
import pytest
import torch

from sleepssl.corpus import CohortSpec, CorpusSpec, synth_corpus
from sleepssl.shards import build_shards

torch.set_num_threads(1)

NO_ECG = [True] * 8 + [False] + [True] * 3


def tiny_spec(seed: int = 3) -> CorpusSpec:
    return CorpusSpec(
        cohorts=[CohortSpec("X", 4), CohortSpec("Y", 3, noise_scale=1.3, channel_available=NO_ECG)],
        night_duration_range=(12, 16),
        seed=seed,
    )


@pytest.fixture(scope="session")
def corpus():
    return synth_corpus(tiny_spec())


@pytest.fixture(scope="session")
def shard_dir(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("shards")
    build_shards(corpus, out, (0.5, 0.25, 0.25), seed=0)
    return out


@pytest.fixture(scope="session")
def epochs(corpus):
    from sleepssl.preprocess import EpochSet, preprocess_night

    return EpochSet.concat([preprocess_night(r) for r in corpus])


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# --- acceptance summary --------------------------------------------------------

_ACCEPTANCE: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or rep.when != "call" and not (rep.when == "setup" and rep.outcome != "passed"):
        return
    detail = dict(item.user_properties).get("detail", "")
    verdict = "XFAIL" if hasattr(rep, "wasxfail") else {"passed": "PASS"}.get(rep.outcome, "FAIL")
    _ACCEPTANCE[(mark.args[0], item.nodeid)] = (mark.args[1], verdict, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, nodeid in sorted(_ACCEPTANCE, key=lambda k: k[0]):
        title, verdict, detail = _ACCEPTANCE[(n, nodeid)]
        terminalreporter.write_line(f"criterion {n} {verdict}: {title}" + (f" | {detail}" if detail else ""))
