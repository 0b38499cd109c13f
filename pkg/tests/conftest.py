"""Acceptance bookkeeping: one PASS/FAIL line per criterion in the terminal summary."""

from collections import OrderedDict

import pytest

CRITERIA = OrderedDict([
    ("benchmark", "Benchmark reproduction: median MSPE bands and ABTCK < ABCK on 4/5 seeds"),
    ("xi-recovery", "Scalar-discrepancy recovery: ABCK constant near 0.525, ABTCK range > 0.2"),
    ("likelihood-oracle", "Augmented log-likelihood equals the joint Gaussian density (1e-8)"),
    ("conjugacy-oracle", "Marginal level density equals numerical quadrature (1e-5)"),
    ("missing-oracle", "Missing-data conditional equals dense Gaussian conditioning (1e-8)"),
    ("geweke", "Geweke joint-distribution test, |z| < 4 over 1e4 sweeps"),
    ("rj-reversibility", "Grow/prune reciprocity (1e-10) and stationary tree frequencies (3 MCSE)"),
    ("emulator-equivalence", "STP matches universal kriging (1e-8) and interpolates (1e-4)"),
])

_outcomes: dict[str, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion this test belongs to")
    config.abtck_details = []


def pytest_collection_modifyitems(items):
    for item in items:
        if item.get_closest_marker("criterion") is not None:
            item.add_marker(pytest.mark.acceptance)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    name = mark.args[0]
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        _outcomes.setdefault(name, []).append(rep.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for name, text in CRITERIA.items():
        res = _outcomes.get(name)
        if res is None:
            status = "NOT RUN"
        elif all(r == "passed" for r in res):
            status = "PASS"
        elif any(r == "failed" for r in res):
            status = "FAIL"
        else:
            status = "SKIP"
        tr.write_line(f"{status:8s} {name:22s} {text}")
    for line in getattr(tr.config, "abtck_details", []):
        tr.write_line(line)
