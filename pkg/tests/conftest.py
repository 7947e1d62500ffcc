import os
import sys

import pytest

from silverloop.rules import RuleSet, load_rules

sys.path.insert(0, os.path.dirname(__file__))

RULES_DIR = os.path.join(os.path.dirname(__file__), "..", "rules")


@pytest.fixture(scope="session")
def fixture_rules() -> RuleSet:
    return load_rules(os.path.join(RULES_DIR, "fixture.json"))


@pytest.fixture(scope="session")
def default_rules() -> RuleSet:
    return load_rules(os.path.join(RULES_DIR, "default.json"))


@pytest.fixture(scope="session")
def rules_dir() -> str:
    return os.path.abspath(RULES_DIR)
