import contextlib

import pytest
import torch

from revdistill.backbone import BackboneSpec, load_teacher
from revdistill.distill import build_model

_CRITERIA: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion():
    """Record an acceptance criterion outcome; summarised at the end of the session."""

    @contextlib.contextmanager
    def _run(cid: str, text: str):
        try:
            yield
        except BaseException:
            _CRITERIA.append((cid, False, text))
            raise
        _CRITERIA.append((cid, True, text))

    return _run


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for cid, ok, text in sorted(_CRITERIA, key=lambda c: int(c[0].lstrip("C"))):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {cid}: {text}")


@pytest.fixture(scope="session")
def r18_spec_64():
    return BackboneSpec("resnet18", 64, weights_source="random")


@pytest.fixture(scope="session")
def r18_teacher_64(r18_spec_64):
    return load_teacher(r18_spec_64)


@pytest.fixture
def small_model(r18_spec_64, r18_teacher_64):
    torch.manual_seed(0)
    return build_model(r18_spec_64, teacher=r18_teacher_64)
