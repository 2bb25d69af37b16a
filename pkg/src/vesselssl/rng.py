"""Seed management: one run seed fans out into named, independent substreams.

Streams are derived with ``numpy.random.SeedSequence`` spawn keys, so adding a
stream or consuming one never perturbs the others, and per-image streams do
not depend on generation order.
"""

from __future__ import annotations

import zlib

import numpy as np
import torch

# Fixed stream ids; string names hash through crc32 so derivation is stable
# across runs and interpreter versions.
_KNOWN = ("data", "noise", "dropout", "mc", "init", "synth", "augment", "fusion")


def _stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def seed_sequence(seed: int, name: str, *extra: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=seed, spawn_key=(_stream_key(name), *extra))


def numpy_stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Numpy generator for stream `name` (extra ints subdivide, e.g. per image)."""
    return np.random.default_rng(seed_sequence(seed, name, *extra))


def torch_stream(seed: int, name: str, *extra: int) -> torch.Generator:
    """Torch CPU generator for stream `name`."""
    g = torch.Generator(device="cpu")
    g.manual_seed(int(seed_sequence(seed, name, *extra).generate_state(1, np.uint64)[0]))
    return g


class RngHub:
    """All generators a training run needs, derived from one seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.data = numpy_stream(seed, "data")
        self.augment = numpy_stream(seed, "augment")
        self.noise = torch_stream(seed, "noise")
        self.dropout = torch_stream(seed, "dropout")
        self.mc = torch_stream(seed, "mc")
        self.mc_augment = numpy_stream(seed, "mc", 1)
        self.init = torch_stream(seed, "init")

    def state_dict(self) -> dict:
        return {
            "seed": self.seed,
            "data": self.data.bit_generator.state,
            "augment": self.augment.bit_generator.state,
            "noise": self.noise.get_state(),
            "dropout": self.dropout.get_state(),
            "mc": self.mc.get_state(),
            "mc_augment": self.mc_augment.bit_generator.state,
            "init": self.init.get_state(),
        }

    def load_state_dict(self, state: dict) -> None:
        self.seed = int(state["seed"])
        self.data.bit_generator.state = state["data"]
        self.augment.bit_generator.state = state["augment"]
        self.noise.set_state(state["noise"])
        self.dropout.set_state(state["dropout"])
        self.mc.set_state(state["mc"])
        self.mc_augment.bit_generator.state = state["mc_augment"]
        self.init.set_state(state["init"])
