import os

# one BLAS thread keeps reductions, and so every artifact, bit-reproducible
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest


def naive_conv2d(x, k, b, padding, stride):
    """Six-nested-loop cross-correlation; the reference for conv2d."""
    c_in, h, w = x.shape
    c_out, _, kh, kw = k.shape
    xp = np.zeros((c_in, h + 2 * padding, w + 2 * padding))
    xp[:, padding : padding + h, padding : padding + w] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for r in range(ho):
            for s in range(wo):
                acc = b[o]
                for c in range(c_in):
                    for i in range(kh):
                        for j in range(kw):
                            acc += xp[c, r * stride + i, s * stride + j] * k[o, c, i, j]
                out[o, r, s] = acc
    return out


def naive_dft(x):
    n = len(x)
    out = np.zeros(n, dtype=complex)
    for k in range(n):
        out[k] = sum(x[m] * np.exp(-2j * np.pi * k * m / n) for m in range(n))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
