import numpy as np
import pytest

from cfnet.harness.gradcheck import atb_probes, nem_probes, randomize
from cfnet.network import ArchConfig, CFNet
from cfnet.noise_estimation import (
    CORE_GROUP,
    AffineTransformBlock,
    NemCore,
    NoiseEstimationStage,
    atb_forward,
    nem_forward,
    share_core,
)
from cfnet.tensor_core import ParamStore, ShapeError


def _store_with_atb(rng, width=8):
    store = ParamStore()
    return store, AffineTransformBlock(store, "atb", rng, width)


def test_atb_suppressed_limit(rng):
    store, atb = _store_with_atb(rng)
    for n, p in store.items():
        p.value[...] = 0.0
    store["atb.scale.conv1.bias"].value[...] = -50.0
    x = rng.standard_normal((1, 8, 4, 4))
    assert np.max(np.abs(atb_forward(x, atb))) < 1e-20


def test_atb_constant_input_constant_output(rng):
    store, atb = _store_with_atb(rng)
    randomize(store, rng)
    x = np.broadcast_to(rng.standard_normal((1, 8, 1, 1)), (1, 8, 5, 6)).copy()
    y = atb_forward(x, atb)
    np.testing.assert_allclose(y, np.broadcast_to(y[:, :, :1, :1], y.shape), atol=1e-14)


def test_atb_scale_in_open_unit_interval(rng):
    store, atb = _store_with_atb(rng)
    randomize(store, rng)
    _, (_, s, _, _) = atb(rng.standard_normal((1, 8, 4, 4)))
    assert np.all((s > 0) & (s < 1))


def test_atb_wrong_width(rng):
    _, atb = _store_with_atb(rng)
    with pytest.raises(ShapeError):
        atb(np.zeros((1, 4, 3, 3)))


@pytest.mark.parametrize("builder", [atb_probes, nem_probes])
def test_block_gradients(builder, rng):
    probes = builder(rng, 25)
    scored = [p for p in probes if not p.at_kink]
    assert scored and max(p.rel for p in scored) < 1e-4


def test_stage_shapes_and_port_mismatch(rng):
    store = ParamStore()
    core = NemCore(store, "core", rng, 8)
    stage = NoiseEstimationStage(store, "nem", 1, 4, core, rng, sigma_channels=1)
    nf, sigma = nem_forward(rng.uniform(0, 1, (2, 1, 6, 6)), stage)
    assert nf.shape == (2, 4, 6, 6) and sigma.shape == (2, 1, 6, 6)
    assert np.all(sigma >= 0)
    with pytest.raises(ShapeError):
        stage(np.zeros((1, 3, 6, 6)))


def test_share_core_aliases_every_core_entry(rng):
    store = ParamStore()
    NemCore(store, "a.core", rng, 8)
    before = store.count()
    share_core(store, "a.core.", "b.core.")
    assert store.count() == before
    for n in [n for n in store.names() if n.startswith("b.core.")]:
        src = "a.core." + n[len("b.core.") :]
        assert store[n] is store[src]
        assert store[n].group == CORE_GROUP


def _small_net():
    return CFNet(ArchConfig(width_plan=(8, 16, 16, 16, 16, 8), g=4, nem_width=8, seed=3))


def test_nem_parameter_count_invariant():
    net = _small_net()
    s = net.store
    core = s.count("nem1.core.")
    ports = sum(s.count(f"nem{i}.in_port") + s.count(f"nem{i}.out_port") for i in range(1, 7))
    head = s.count("nem1.sigma_head")
    assert s.count("nem") == core + ports + head
    for i in range(2, 7):
        assert all(p.group == CORE_GROUP for _, p in s.unique_under(f"nem{i}.core."))
        assert s.count(f"nem{i}.core.") == core


def test_mutating_stage1_core_changes_stage4(rng):
    net = _small_net()
    randomize(net.store, rng, zeros_only=True, scale=0.5)
    x = rng.uniform(0, 1, (1, 1, 8, 8))
    _, _, ctx = net.forward(x)
    before = ctx["nf"][3].copy()
    net.store["nem1.core.atb1.shift.conv0.weight"].value[...] += 0.3
    _, _, ctx = net.forward(x)
    assert not np.allclose(ctx["nf"][3], before)


def test_asymm_reaches_core_only_through_stage1(rng):
    net = _small_net()
    randomize(net.store, rng, zeros_only=True, scale=0.5)
    x = rng.uniform(0, 1, (1, 1, 8, 8))
    den, sig, ctx = net.forward(x)
    core_names = [n for n, _ in net.store.unique() if n.startswith("nem1.core.")]

    # sigma-only backward: only stage 1 contributes, so stage ports 2..6 stay at zero
    net.store.zero_grad()
    net.backward(ctx, np.zeros_like(den), np.ones_like(sig))
    assert any(net.store[n].grad.any() for n in core_names)
    for i in range(2, 7):
        assert not net.store[f"nem{i}.in_port.weight"].grad.any()
        assert not net.store[f"nem{i}.out_port.weight"].grad.any()

    # reconstruction backward: every stage's ports receive gradient
    net.store.zero_grad()
    net.backward(ctx, np.ones_like(den), None)
    for i in range(2, 7):
        assert net.store[f"nem{i}.in_port.weight"].grad.any()
