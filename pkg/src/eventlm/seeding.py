"""Named random sub-streams derived from one run seed."""

from __future__ import annotations

import zlib

import numpy as np
import torch


def _key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def seed_sequence(seed: int, name: str, *extra: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF, _key(name), *[int(x) & 0xFFFFFFFF for x in extra]])


def derived_seed(seed: int, name: str, *extra: int) -> int:
    return int(seed_sequence(seed, name, *extra).generate_state(1)[0] & 0x7FFFFFFF)


def numpy_rng(seed: int, name: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(seed, name, *extra))


def torch_generator(seed: int, name: str, *extra: int) -> torch.Generator:
    return torch.Generator().manual_seed(derived_seed(seed, name, *extra))
