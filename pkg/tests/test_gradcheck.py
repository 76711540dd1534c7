import numpy as np
import pytest

import cfnet.tensor_core as tc
from cfnet.cond_filter import ConditionalFilterBlock
from cfnet.harness.gradcheck import (
    TOLERANCES,
    GradcheckReport,
    Probe,
    check_arrays,
    gradcheck,
    kink_recorder,
    rel_error,
)


@pytest.mark.parametrize("scope", ["primitive", "cfb", "nem", "cdm"])
def test_scopes_pass(scope):
    rep = gradcheck(scope, samples=20)
    assert rep.passed, rep.to_text()
    assert rep.tol == TOLERANCES[scope]


def test_corrupted_backward_names_parameter(monkeypatch):
    orig = ConditionalFilterBlock.backward

    def corrupted(self, ctx, g):
        out = orig(self, ctx, g)
        self.tail.layers[-1].w.grad *= 1.5
        return out

    monkeypatch.setattr(ConditionalFilterBlock, "backward", corrupted)
    rep = gradcheck("cfb", samples=200)
    assert not rep.passed
    text = rep.to_text()
    assert "FAIL" in text and "failed: cfb.tail1.weight" in text
    assert {p.name for p in rep.failures()} == {"cfb.tail1.weight"}


def test_rel_error_floor():
    assert rel_error(1.0, 1.0) == 0.0
    assert rel_error(1e-9, 0.0) == pytest.approx(1e-3)
    assert rel_error(2.0, 1.0) == 0.5


def test_kink_probe_is_flagged_not_scored(rng):
    # |x| through PReLU(slope -1) with x sitting exactly on the kink
    x = np.zeros((1, 1, 1, 1))
    slope = np.array([-1.0])

    def f():
        return float(tc.prelu(x, slope).sum())  # module lookup, as the layers do

    probes = check_arrays(f, [("x", x, np.array([[[[1.0]]]]))], None, rng)
    assert probes[0].at_kink and probes[0].rel == 0.0


def test_kink_recorder_restores():
    before = tc.prelu
    with kink_recorder():
        assert tc.prelu is not before
    assert tc.prelu is before


def test_report_text():
    rep = GradcheckReport("cfb", 1e-4, [Probe("a", (0,), 1.0, 1.0), Probe("b", (2, 1), 1.0, 2.0)])
    text = rep.to_text(verbose=True)
    assert "worst=b[2, 1] FAIL" in text and "  failed: b[2, 1]" in text
    assert text.count("analytic=") == 3


def test_unknown_scope():
    with pytest.raises(ValueError):
        gradcheck("everything")
