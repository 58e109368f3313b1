import numpy as np
import pytest

from coe.datagen import emit_dataset, load_dataset


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("ds")
    emit_dataset(60, 12, seed=5, out_path=path, n_eval=20)
    return path, load_dataset(path)


def random_attention_instance(rng, n, d_v, k, d_l=3, m=2, scale=1.0):
    from coe.egm import EgmParams, FrameFeatures, QuestionEmbedding

    v = FrameFeatures(rng.normal(size=(n, d_v)))
    q = QuestionEmbedding(rng.normal(size=(int(rng.integers(1, 5)), d_l)))
    p = EgmParams(rng.normal(size=(k, d_v)) * scale, rng.normal(size=(d_l, d_v)) * scale, m)
    return v, q, p


@pytest.fixture
def nprng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
