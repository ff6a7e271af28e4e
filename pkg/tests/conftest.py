import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def brute_full_conv(a, b):
    ha, wa = a.shape
    hb, wb = b.shape
    out = np.zeros((ha + hb - 1, wa + wb - 1))
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            for m in range(ha):
                for n in range(wa):
                    if 0 <= i - m < hb and 0 <= j - n < wb:
                        out[i, j] += a[m, n] * b[i - m, j - n]
    return out


def brute_conv_same(x, w):
    """Zero-padded multi-channel 3x3 true convolution, one pixel at a time."""
    c, h, wd = x.shape
    o = w.shape[0]
    out = np.zeros((o, h, wd))
    for oc in range(o):
        for i in range(h):
            for j in range(wd):
                acc = 0.0
                for ic in range(c):
                    for u in range(3):
                        for v in range(3):
                            si, sj = i - (u - 1), j - (v - 1)
                            if 0 <= si < h and 0 <= sj < wd:
                                acc += w[oc, ic, u, v] * x[ic, si, sj]
                out[oc, i, j] = acc
    return out


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


@pytest.fixture
def criterion():
    def check(number, passed, detail):
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        assert passed, line
    return check


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
