"""Model/optimizer checkpoints on top of the CFN1 tensor container.

Besides the parameters, a checkpoint carries ``meta.*`` entries describing
the architecture and training position, and ``adam.*`` entries holding the
optimizer moments, so a run can resume bit-exactly.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from ..network import ArchConfig, CFNet, Variant
from ..tensor_core import CheckpointError, load_into_store, read_tensors, write_tensors
from .optim import AdamState

_ARCH_INTS = ("t", "k", "g", "input_channels", "nem_width", "seed")


def arch_entries(arch: ArchConfig) -> list[tuple[str, np.ndarray]]:
    out = [("meta.arch.width_plan", np.array(arch.width_plan, dtype=np.float64))]
    out += [(f"meta.arch.{k}", np.array([getattr(arch, k)], dtype=np.float64)) for k in _ARCH_INTS]
    v = arch.variant
    out += [
        ("meta.arch.zero_residual", np.array([float(arch.zero_residual)])),
        ("meta.arch.variant", np.array([float(v.atb), float(v.cfb), float(v.dne)])),
    ]
    return out


def arch_from_tensors(t: dict[str, np.ndarray]) -> ArchConfig:
    try:
        wp = tuple(int(x) for x in t["meta.arch.width_plan"].ravel())
        ints = {k: int(t[f"meta.arch.{k}"].ravel()[0]) for k in _ARCH_INTS}
        flags = t["meta.arch.variant"].ravel()
        zr = bool(t["meta.arch.zero_residual"].ravel()[0])
    except KeyError as exc:
        raise CheckpointError(f"checkpoint lacks architecture entry {exc}") from None
    return ArchConfig(width_plan=wp, variant=Variant(*(bool(f) for f in flags)), zero_residual=zr, **ints)


@dataclass
class Checkpoint:
    arch: ArchConfig
    tensors: dict[str, np.ndarray]

    @property
    def iteration(self) -> int:
        it = self.tensors.get("meta.train.iter")
        return int(it.ravel()[0]) if it is not None else 0

    def build(self, dtype=np.float64) -> CFNet:
        net = CFNet(self.arch, dtype=dtype)
        load_into_store(self.tensors, net.store)
        return net

    def adam_state(self, net: CFNet) -> AdamState:
        st = AdamState()
        if "adam.step" not in self.tensors:
            return st
        st.step = int(self.tensors["adam.step"].ravel()[0])
        for name, p in net.store.unique():
            m = self.tensors.get(f"adam.m.{name}")
            v = self.tensors.get(f"adam.v.{name}")
            if m is not None and v is not None:
                st.m[name] = m.reshape(p.value.shape).astype(p.value.dtype)
                st.v[name] = v.reshape(p.value.shape).astype(p.value.dtype)
        return st


def save_checkpoint(path: str | os.PathLike, net: CFNet, adam: AdamState | None = None, iteration: int = 0) -> None:
    entries = [(name, p.value) for name, p in net.store.unique()]
    entries += arch_entries(net.cfg)
    entries.append(("meta.train.iter", np.array([float(iteration)])))
    if adam is not None:
        entries.append(("adam.step", np.array([float(adam.step)])))
        for name, _ in net.store.unique():
            if name in adam.m:
                entries.append((f"adam.m.{name}", adam.m[name]))
                entries.append((f"adam.v.{name}", adam.v[name]))
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        write_tensors(fh, entries)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        t = read_tensors(fh)
    return Checkpoint(arch_from_tensors(t), t)


def check_arch(ckpt: Checkpoint, arch: ArchConfig) -> None:
    if ckpt.arch != arch:
        raise CheckpointError(
            f"architecture mismatch: checkpoint width_plan={ckpt.arch.width_plan} t={ckpt.arch.t} "
            f"g={ckpt.arch.g} k={ckpt.arch.k} channels={ckpt.arch.input_channels}; requested "
            f"width_plan={arch.width_plan} t={arch.t} g={arch.g} k={arch.k} channels={arch.input_channels}"
        )
