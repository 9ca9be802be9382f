"""Deterministic seed derivation shared by every stochastic component.

All randomness in the project flows from a single integer root seed through
named sub-streams, so any artifact can be reproduced bit-exactly from its
config. Hashing uses sha256 (stable across platforms and Python processes,
unlike the builtin ``hash``).
"""

from __future__ import annotations

import contextlib
import hashlib

import numpy as np
import torch


def derive_seed(root: int, *names: object) -> int:
    """Derive a 63-bit child seed from a root seed and a path of names."""
    h = hashlib.sha256()
    h.update(str(int(root)).encode())
    for name in names:
        h.update(b"/")
        h.update(str(name).encode())
    return int.from_bytes(h.digest()[:8], "big") >> 1


def rng(root: int, *names: object) -> np.random.Generator:
    """A numpy Generator on an isolated, named sub-stream."""
    return np.random.default_rng(derive_seed(root, *names))


def torch_generator(root: int, *names: object) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(root, *names))
    return g


@contextlib.contextmanager
def seeded_init(root: int, *names: object):
    """Fork torch's global RNG so module construction is reproducible.

    Parameter init in ``torch.nn`` draws from the global RNG; wrapping
    construction keeps it isolated from everything else.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(root, *names))
        yield
