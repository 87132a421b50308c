import numpy as np
import pytest

from prodsearch import tensor as T
from prodsearch.catalog import gen_catalog, gen_clicklog
from prodsearch.graphs import build_pp_graph, build_qp_graph, classify_all


@pytest.fixture(autouse=True)
def fresh_tape():
    T.reset_tape()
    yield
    T.reset_tape()


@pytest.fixture(scope="session")
def small_world():
    """A 400-product catalog with its click graphs, shared across tests."""
    catalog = gen_catalog(n_products=400, seed=3)
    queries, log = gen_clicklog(catalog, n_queries=400, n_sessions=3000, seed=3)
    qp = build_qp_graph(log, queries)
    pp = build_pp_graph(log, catalog)
    classes = classify_all(qp, catalog)
    return {"catalog": catalog, "queries": queries, "log": log, "qp": qp, "pp": pp, "classes": classes,
            "text": {q.query_id: q.text for q in queries}}


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# acceptance verdicts, echoed once more in the terminal summary
VERDICTS: list[str] = []


@pytest.fixture
def verdict(capsys):
    def record(label: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
        VERDICTS.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
