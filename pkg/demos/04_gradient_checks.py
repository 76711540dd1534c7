#!/usr/bin/env python3
# Every backward pass in the package is hand written, so every one is checked
# against central differences.  This runs the same suite as
# `python3 -m cfnet gradcheck` for each scope.
#
# python3 demos/04_gradient_checks.py

import time

from cfnet.harness.gradcheck import SCOPES, gradcheck

for scope in SCOPES:
    t = time.perf_counter()
    rep = gradcheck(scope, samples=30)
    print(rep.to_text(), f"({time.perf_counter() - t:.1f}s)")

# %% a probe sitting exactly on a PReLU kink has no derivative; such probes are
# retried with smaller steps and, if still ambiguous, reported as at_kink
# instead of being scored.
