import pytest

from sqlrefine.demo import build_demo, corpus_rows
from sqlrefine.execution import DatabasePool
from sqlrefine.schema import build_qss, introspect_schema


@pytest.fixture(scope="session")
def demo_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("demo")
    build_demo(root)
    return root


@pytest.fixture(scope="session")
def pool(demo_root):
    return DatabasePool(demo_root / "databases")


@pytest.fixture(scope="session")
def rows():
    return corpus_rows()


@pytest.fixture(scope="session")
def schemas(pool, rows):
    out = {}
    for r in rows:
        if r["db_id"] not in out:
            out[r["db_id"]] = introspect_schema(pool.get(r["db_id"]))
    return out


@pytest.fixture(scope="session")
def school(pool):
    return pool.get("school")


@pytest.fixture(scope="session")
def school_schema(school):
    return introspect_schema(school)


@pytest.fixture(scope="session")
def running(rows):
    """The value-error running example: 'Complete' predicted for 'Completed'."""
    return rows[0]


@pytest.fixture
def running_qss(running, school_schema):
    return build_qss(running["question"], school_schema)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
