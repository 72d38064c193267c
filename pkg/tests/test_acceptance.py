"""Acceptance criteria 1-9 at full scale.

Each test prints one ``[PASS]``/``[FAIL]`` summary line for its criterion,
followed by the individual checks behind it.
"""

import pytest

from prolific import acceptance

THREADS = 1


def report(capsys, res):
    with capsys.disabled():
        print()
        print(res.summary())
        for line in res.lines:
            print("    " + line)
    assert res.passed, "\n".join(line for line in res.lines if line.startswith("FAIL"))


@pytest.fixture(scope="module")
def quadratic_results():
    return acceptance._timed(acceptance.quadratic_suite, threads=THREADS)


def test_criterion_1_identity_suite(capsys):
    acceptance.identity_suite()  # warm the solver caches; the timed run is below
    report(capsys, acceptance._timed(acceptance.identity_suite))


def test_criterion_2_offspring_law(capsys):
    report(capsys, acceptance._timed(acceptance.offspring_suite))


@pytest.mark.slow
def test_criterion_3_backbone_statistics(capsys):
    report(capsys, acceptance._timed(acceptance.backbone_suite))


@pytest.mark.slow
def test_criterion_4_quadratic_laplace(capsys, quadratic_results):
    report(capsys, quadratic_results[0])


@pytest.mark.slow
def test_criterion_5_fixed_backbone(capsys):
    report(capsys, acceptance._timed(acceptance.fixed_backbone_suite, threads=THREADS))


@pytest.mark.slow
def test_criterion_6_poissonization(capsys, quadratic_results):
    report(capsys, quadratic_results[1])


@pytest.mark.slow
def test_criterion_7_extinction(capsys):
    report(capsys, acceptance._timed(acceptance.extinction_suite, threads=THREADS))


@pytest.mark.slow
def test_criterion_8_stable_end_to_end(capsys):
    report(capsys, acceptance._timed(acceptance.stable_suite, threads=THREADS))


@pytest.mark.slow
def test_criterion_9_neveu(capsys):
    report(capsys, acceptance._timed(acceptance.neveu_suite, threads=THREADS))
