import numpy as np
import pytest


def perturb(module, rng, scale=0.3):
    """Move every parameter off its (identity) initialisation."""
    for name, p in module.named_parameters():
        step = scale / np.sqrt(max(1, p.shape[0]))
        if name.endswith(("lower", "upper")):
            # mix factors are stored multiplied by sqrt(dim)
            step *= np.sqrt(p.shape[0])
        p.data = p.data + rng.normal(scale=step, size=p.shape)


def dense_log_det(fn, x, eps=1e-6):
    """log|det J| of a map R^d -> R^d at each row of ``x``, by central differences."""
    out = []
    for row in x:
        d = row.size
        jac = np.zeros((d, d))
        for i in range(d):
            e = np.zeros(d)
            e[i] = eps
            jac[:, i] = (fn(row + e) - fn(row - e)) / (2 * eps)
        out.append(np.linalg.slogdet(jac)[1])
    return np.array(out)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


CRITERIA = {}


def record_criterion(number, ok, detail):
    """Keep one pass/fail line per acceptance criterion for the run summary."""
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    CRITERIA[number] = line
    print(line, flush=True)
    return line


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[number])
