import numpy as np
import pytest

from cfnet.harness.data import write_fixture_set


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("fixtures")
    write_fixture_set(d, 6, seed=7, size=48)
    return d


def naive_conv(x, w, b, pad, stride=1):
    """Six nested loops of zero-padded cross-correlation."""
    bsz, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.zeros((bsz, cin, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((bsz, cout, ho, wo))
    for n in range(bsz):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    s = 0.0 if b is None else b[o]
                    for c in range(cin):
                        for u in range(k):
                            for v in range(k):
                                s += w[o, c, u, v] * xp[n, c, i * stride + u, j * stride + v]
                    out[n, o, i, j] = s
    return out


def naive_conditional_conv(x, tau, g, k):
    """Direct evaluation: one k*k kernel per (sample, group, position)."""
    bsz, c, h, w = x.shape
    r = c // g
    p = k // 2
    out = np.zeros_like(x)
    for n in range(bsz):
        for ch in range(c):
            for i in range(h):
                for j in range(w):
                    s = 0.0
                    for u in range(k):
                        for v in range(k):
                            y, xx = i + u - p, j + v - p
                            if 0 <= y < h and 0 <= xx < w:
                                s += tau[n, ch // r, u * k + v, i, j] * x[n, ch, y, xx]
                    out[n, ch, i, j] = s
    return out
