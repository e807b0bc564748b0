"""Shared fixtures and the acceptance-criteria reporting hook."""

import pytest

from avlabel.parsing import DetectionParser, Rulebook, load_token_list
from avlabel.pipeline import PipelineConfig
from avlabel.votes import AVClusterMap

# One line per acceptance criterion, printed in the terminal summary so the
# pass/fail status is visible regardless of output capture.
ACCEPTANCE_RESULTS = []


def record_acceptance(name: str, passed: bool, detail: str = ""):
    status = "PASS" if passed else "FAIL"
    suffix = f" ({detail})" if detail else ""
    ACCEPTANCE_RESULTS.append(f"ACCEPTANCE {name}: {status}{suffix}")
    assert passed, f"{name}: {detail}"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def default_config():
    return PipelineConfig()


@pytest.fixture(scope="session")
def demo_rulebook(default_config):
    return Rulebook.load(default_config.resolved_rules_path())


@pytest.fixture(scope="session")
def demo_parser(default_config, demo_rulebook):
    return DetectionParser(
        demo_rulebook,
        load_token_list(default_config.resolved_groups_path()),
        load_token_list(default_config.resolved_placeholders_path()),
    )


@pytest.fixture(scope="session")
def demo_clusters(default_config):
    return AVClusterMap.load(default_config.resolved_clusters_path())
