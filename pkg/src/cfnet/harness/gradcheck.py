"""Central-difference gradient checks for primitives, blocks and the full net.

Every check contracts the output with a fixed random tensor ``R`` so the
scalar objective is ``sum(out * R)`` and the analytic gradient is the
backward pass seeded with ``R``. Relative error is
``|a - n| / max(|a|, |n|, 1e-6)``.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .. import tensor_core

from ..cond_filter import (
    CfbConfig,
    ConditionalFilterBlock,
    conditional_conv,
    conditional_conv_backward,
    hadamard_backward,
    hadamard_kernels,
)
from ..network import ArchConfig, CFNet, ConditionalDenoisingModule
from ..noise_estimation import AffineTransformBlock, NemCore, NoiseEstimationStage
from ..tensor_core import (
    ConvSpec,
    ParamStore,
    avg_pool2,
    avg_pool2_backward,
    conv2d_backward,
    conv2d_forward,
    mul,
    mul_backward,
    prelu,
    prelu_backward,
    sigmoid,
    sigmoid_backward,
    softplus,
    softplus_backward,
)

TOLERANCES = {"primitive": 1e-5, "cfb": 1e-4, "nem": 1e-4, "cdm": 1e-4, "full": 1e-3}
SCOPES = tuple(TOLERANCES)


def rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-6)


@dataclass
class Probe:
    name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    at_kink: bool = False

    @property
    def rel(self) -> float:
        return 0.0 if self.at_kink else rel_error(self.analytic, self.numeric)


@dataclass
class GradcheckReport:
    scope: str
    tol: float
    probes: list[Probe] = field(default_factory=list)

    @property
    def worst(self) -> Probe | None:
        return max(self.probes, key=lambda p: p.rel, default=None)

    @property
    def max_rel(self) -> float:
        w = self.worst
        return 0.0 if w is None else w.rel

    @property
    def passed(self) -> bool:
        return self.max_rel < self.tol

    def failures(self) -> list[Probe]:
        return [p for p in self.probes if p.rel >= self.tol]

    def to_text(self, verbose: bool = False) -> str:
        lines = []
        if verbose:
            for p in self.probes:
                lines.append(f"{p.name}{list(p.index)}\tanalytic={p.analytic:.10e}\tnumeric={p.numeric:.10e}\trel={p.rel:.3e}")
        w = self.worst
        where = f"{w.name}{list(w.index)}" if w else "-"
        verdict = "PASS" if self.passed else "FAIL"
        kinks = sum(p.at_kink for p in self.probes)
        lines.append(f"scope={self.scope} probes={len(self.probes) - kinks} at_kink={kinks} max_rel={self.max_rel:.3e} tol={self.tol:.0e} worst={where} {verdict}")
        for p in self.failures():
            lines.append(f"  failed: {p.name}{list(p.index)} analytic={p.analytic:.6e} numeric={p.numeric:.6e}")
        return "\n".join(lines)


def _probe_indices(shape, count, rng) -> list[tuple[int, ...]]:
    size = int(np.prod(shape))
    if count is None or count >= size:
        return [np.unravel_index(i, shape) for i in range(size)]
    return [np.unravel_index(int(i), shape) for i in rng.choice(size, count, replace=False)]


@contextlib.contextmanager
def kink_recorder():
    """Record the sign pattern of every PReLU input evaluated inside the block."""
    signs: list[np.ndarray] = []
    orig = tensor_core.prelu

    def recording(x, slope):
        signs.append(x > 0)
        return orig(x, slope)

    tensor_core.prelu = recording
    try:
        yield signs
    finally:
        tensor_core.prelu = orig


def _pattern(objective) -> tuple[float, list[np.ndarray]]:
    with kink_recorder() as signs:
        f = objective()
    return f, signs


def _same_pattern(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _central(objective, arr, idx, eps, base):
    """Central difference; ``None`` if the step crosses a PReLU kink."""
    old = arr[idx]
    try:
        arr[idx] = old + eps
        fp, sp = _pattern(objective)
        arr[idx] = old - eps
        fm, sm = _pattern(objective)
    finally:
        arr[idx] = old
    if base is not None and not (_same_pattern(base, sp) and _same_pattern(base, sm)):
        return None
    return (fp - fm) / (2 * eps)


def check_arrays(
    objective: Callable[[], float],
    targets: list[tuple[str, np.ndarray, np.ndarray]],
    per_target: int | None,
    rng: np.random.Generator,
    eps: float = 1e-4,
) -> list[Probe]:
    """Perturb entries of each ``(name, array, analytic_grad)`` in place.

    The derivative does not exist at a PReLU kink, so a step that flips any
    activation sign is retried with a 10x smaller step; a probe still
    straddling a kink at ``eps / 100`` is flagged ``at_kink`` and not scored.
    """
    out = []
    _, base = _pattern(objective)
    for name, arr, grad in targets:
        for idx in _probe_indices(arr.shape, per_target, rng):
            idx = tuple(int(i) for i in idx)
            num = None
            for e in (eps, eps / 10, eps / 100):
                num = _central(objective, arr, idx, e, base)
                if num is not None:
                    break
            if num is None:
                out.append(Probe(name, idx, float(grad[idx]), float("nan"), at_kink=True))
            else:
                out.append(Probe(name, idx, float(grad[idx]), num))
    return out


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def _conv_case(rng, k, stride, transposed, name):
    cin, cout = 3, 2
    hw = 4 if transposed else 6
    spec = ConvSpec(cin, cout, k, stride, transposed=transposed)
    x = rng.standard_normal((2, cin, hw, hw))
    w = rng.standard_normal(spec.weight_shape)
    b = rng.standard_normal(cout)
    r = rng.standard_normal(conv2d_forward(x, w, b, spec).shape)
    gx, gw, gb = conv2d_backward(r, x, w, spec)
    f = lambda: float(np.sum(conv2d_forward(x, w, b, spec) * r))
    return f, [(f"{name}.input", x, gx), (f"{name}.weight", w, gw), (f"{name}.bias", b, gb)]


def _unary_case(rng, name, fwd, bwd):
    x = rng.standard_normal((2, 3, 4, 4))
    x[np.abs(x) < 0.05] += 0.2  # keep clear of any kink
    r = rng.standard_normal(fwd(x).shape)
    g = bwd(r, x)
    return (lambda: float(np.sum(fwd(x) * r))), [(f"{name}.input", x, g)]


def primitive_cases(rng) -> list[tuple[Callable[[], float], list]]:
    cases = [
        _conv_case(rng, 3, 1, False, "conv3x3"),
        _conv_case(rng, 1, 1, False, "conv1x1"),
        _conv_case(rng, 3, 2, False, "conv3x3_s2"),
        _conv_case(rng, 3, 2, True, "convT3x3_s2"),
        _unary_case(rng, "avg_pool2", avg_pool2, lambda g, x: avg_pool2_backward(g)),
        _unary_case(rng, "sigmoid", sigmoid, lambda g, x: sigmoid_backward(g, sigmoid(x))),
        _unary_case(rng, "softplus", softplus, softplus_backward),
    ]
    # prelu: input and slope
    x = rng.standard_normal((2, 3, 4, 4))
    x[np.abs(x) < 0.05] += 0.2
    a = rng.uniform(0.1, 0.4, 3)
    r = rng.standard_normal(x.shape)
    gx, ga = prelu_backward(r, x, a)
    cases.append((lambda: float(np.sum(prelu(x, a) * r)), [("prelu.input", x, gx), ("prelu.slope", a, ga)]))
    # elementwise product
    p, q = rng.standard_normal((2, 2, 3, 3)), rng.standard_normal((2, 2, 3, 3))
    r2 = rng.standard_normal(p.shape)
    gp, gq = mul_backward(r2, p, q)
    cases.append((lambda: float(np.sum(mul(p, q) * r2)), [("mul.a", p, gp), ("mul.b", q, gq)]))
    # conditional convolution and the Hadamard kernel product
    cfg = CfbConfig(4, 3, 2)
    feat = rng.standard_normal((2, 4, 4, 4))
    tau = rng.standard_normal((2, 2, 9, 4, 4))
    r3 = rng.standard_normal(feat.shape)
    gf, gt = conditional_conv_backward(r3, feat, tau, cfg)
    cases.append((lambda: float(np.sum(conditional_conv(feat, tau, cfg) * r3)),
                  [("conditional_conv.features", feat, gf), ("conditional_conv.tau", tau, gt)]))
    mu, gam = rng.standard_normal((1, 2, 9, 3, 3)), rng.standard_normal((1, 2, 9, 3, 3))
    r4 = rng.standard_normal(mu.shape)
    gm, gg = hadamard_backward(r4, mu, gam)
    cases.append((lambda: float(np.sum(hadamard_kernels(mu, gam) * r4)), [("hadamard.mu", mu, gm), ("hadamard.gamma", gam, gg)]))
    return cases


# ---------------------------------------------------------------------------
# parametrised blocks
# ---------------------------------------------------------------------------


def randomize(store: ParamStore, rng: np.random.Generator, scale: float = 1.4, zeros_only: bool = False) -> None:
    """Overwrite distinct parameters with random values.

    Zero-initialised tails would otherwise hide every gradient upstream of
    them; PReLU slopes stay in (0.05, 0.45). With ``zeros_only`` only
    all-zero tensors are touched, keeping the trained-from-scratch init.
    """
    for name, p in store.unique():
        if zeros_only and np.any(p.value):
            continue
        if name.endswith(".slope"):
            p.value[...] = rng.uniform(0.05, 0.45, p.value.shape)
        elif name.endswith(".bias"):
            p.value[...] = 0.1 * rng.standard_normal(p.value.shape)
        else:
            fan_in = max(1, int(np.prod(p.value.shape[1:])))
            p.value[...] = rng.standard_normal(p.value.shape) * scale / np.sqrt(fan_in)


def _store_targets(store: ParamStore):
    return [(n, p.value, p.grad) for n, p in store.unique()]


def _sample_store(store, objective, samples, rng, eps):
    """``samples`` probes, each on a random element of a random distinct tensor."""
    targets = _store_targets(store)
    picks = rng.integers(len(targets), size=samples)
    probes = []
    for t in picks:
        name, arr, grad = targets[int(t)]
        probes += check_arrays(objective, [(name, arr, grad)], 1, rng, eps)
    return probes


def _block_check(store, run, backward, inputs, samples, rng, eps):
    """``run()`` -> (outputs, ctx); ``backward(ctx, seeds)`` -> input grads."""
    outs, ctx = run()
    seeds = [rng.standard_normal(o.shape) for o in outs]
    store.zero_grad()
    gin = backward(ctx, seeds)

    def objective():
        o, _ = run()
        return float(sum(np.sum(a * s) for a, s in zip(o, seeds)))

    probes = _sample_store(store, objective, samples, rng, eps)
    for (name, arr), g in zip(inputs, gin):
        probes += check_arrays(objective, [(name, arr, g)], max(2, samples // 4), rng, eps)
    return probes


def cfb_probes(rng, samples, eps=1e-4):
    store = ParamStore(np.float64)
    cfg = CfbConfig(8, 3, 4)
    blk = ConditionalFilterBlock(store, "cfb", cfg, 8, rng)
    randomize(store, rng)
    img, noise = rng.standard_normal((1, 8, 6, 6)), rng.standard_normal((1, 8, 6, 6))

    def run():
        y, c = blk(img, noise)
        return [y], c

    return _block_check(store, run, lambda c, s: blk.backward(c, s[0]), [("cfb.input", img), ("cfb.noise", noise)], samples, rng, eps)


def atb_probes(rng, samples, eps=1e-4, width=8):
    store = ParamStore(np.float64)
    atb = AffineTransformBlock(store, "atb", rng, width)
    randomize(store, rng)
    x = rng.standard_normal((1, width, 5, 5))

    def run():
        y, c = atb(x)
        return [y], c

    return _block_check(store, run, lambda c, s: [atb.backward(c, s[0])], [("atb.input", x)], samples, rng, eps)


def nem_probes(rng, samples, eps=1e-4, width=8):
    store = ParamStore(np.float64)
    core = NemCore(store, "nem1.core", rng, width)
    stage = NoiseEstimationStage(store, "nem1", 2, 6, core, rng, sigma_channels=2)
    randomize(store, rng)
    x = rng.standard_normal((1, 2, 5, 5))

    def run():
        nf, sig, c = stage(x)
        return [nf, sig], c

    return _block_check(store, run, lambda c, s: [stage.backward(c, s[0], s[1])], [("nem.input", x)], samples, rng, eps)


def cdm_probes(rng, samples, eps=1e-4):
    store = ParamStore(np.float64)
    arch = ArchConfig(width_plan=(8, 8, 8, 8, 8, 8), g=4, t=2)
    cdm = ConditionalDenoisingModule(store, "cdm", 8, arch, rng)
    randomize(store, rng)
    x, noise, skip = (rng.standard_normal((1, 8, 6, 6)) for _ in range(3))

    def run():
        y, f, c = cdm(x, noise, skip)
        return [y, f], c

    def back(c, s):
        gx, gn = cdm.backward(c, s[0], s[1])
        return [gx, gn, gx]  # the skip is summed into the input

    ins = [("cdm.input", x), ("cdm.noise", noise), ("cdm.skip", skip)]
    return _block_check(store, run, back, ins, samples, rng, eps)


def full_probes(rng, samples, arch: ArchConfig | None = None, size: int = 8, eps=1e-4):
    arch = arch or ArchConfig()
    net = CFNet(arch, dtype=np.float64)
    randomize(net.store, rng, scale=0.5, zeros_only=True)
    x = rng.uniform(0, 1, (1, arch.input_channels, size, size))

    def run():
        y, s, c = net.forward(x)
        return [y, s], c

    return _block_check(net.store, run, lambda c, s: [net.backward(c, s[0], s[1])], [("net.input", x)], samples, rng, eps)


def gradcheck(scope: str, samples: int = 50, seed: int = 0, arch: ArchConfig | None = None) -> GradcheckReport:
    """Run the named check; failures are report content, never exceptions."""
    if scope not in TOLERANCES:
        raise ValueError(f"unknown scope {scope!r}; choose from {', '.join(SCOPES)}")
    rng = np.random.default_rng(seed)
    rep = GradcheckReport(scope, TOLERANCES[scope])
    if scope == "primitive":
        for f, targets in primitive_cases(rng):
            rep.probes += check_arrays(f, targets, None, rng)
    elif scope == "cfb":
        rep.probes = cfb_probes(rng, samples)
    elif scope == "nem":
        rep.probes = atb_probes(rng, samples) + nem_probes(rng, samples)
    elif scope == "cdm":
        rep.probes = cdm_probes(rng, samples)
    else:
        rep.probes = full_probes(rng, samples, arch, size=16)
    return rep
