import numpy as np
import pytest

from exrec.datamodel import partition_students, split_train_test
from exrec.synthetic import generate_synthetic


def micro_synthetic(seed=1, n_students=4, n_concepts=3, n_exercises=6, min_length=3, max_length=8):
    return generate_synthetic(
        n_students=n_students,
        n_concepts=n_concepts,
        n_exercises=n_exercises,
        min_length=min_length,
        max_length=max_length,
        seed=seed,
    )


@pytest.fixture(scope="session")
def small_synth():
    """A 40-student population; quick to train on."""
    return generate_synthetic(n_students=40, seed=3)


@pytest.fixture(scope="session")
def small_split(small_synth):
    ds = small_synth.dataset
    res = split_train_test(ds)
    return ds, res, partition_students(res.train)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def default_kcmp():
    """Mastery predictor trained with the default protocol on the default population (seed 0)."""
    from exrec.enhancer import EnhancerConfig
    from exrec.kcmp import KcmpConfig, train_kcmp

    sd = generate_synthetic(seed=0)
    res = split_train_test(sd.dataset)
    part = partition_students(res.train)
    model, log = train_kcmp(res.train, part, EnhancerConfig(), KcmpConfig(seed=0))
    return sd, res, part, model, log


@pytest.fixture(scope="session")
def default_reranker(default_kcmp):
    """Re-ranker trained with default settings on top of ``default_kcmp``."""
    from exrec.config import RunConfig
    from exrec.pipeline import Prepared, fit

    sd, res, part, model, log = default_kcmp
    cfg = RunConfig().with_seed(0)
    prep = Prepared(sd.dataset, res.train, res.test, part, res.skipped)
    tp = fit(prep, cfg, kcmp_model=(model, log))
    return sd, cfg, tp


ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
