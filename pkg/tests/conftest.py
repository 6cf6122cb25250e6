from __future__ import annotations

import pytest

from expertloop.prompts import load_questions, load_templates


@pytest.fixture(scope="session")
def templates():
    return load_templates("v1")


@pytest.fixture(scope="session")
def questions():
    return load_questions("v1")
