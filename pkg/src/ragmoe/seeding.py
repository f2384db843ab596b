"""Deterministic randomness: one root seed, per-component streams.

Every random draw in the package comes from a generator created here. A
component asks for its stream by a stable string label, so adding or
reordering components never perturbs another component's draws.
"""

import hashlib

import numpy as np
import torch


def derive_seed(root_seed: int, label: str) -> int:
    """Stable 63-bit seed for the component stream named ``label``."""
    digest = hashlib.blake2b(
        f"{root_seed}:{label}".encode("utf-8"), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little") & 0x7FFF_FFFF_FFFF_FFFF


def numpy_rng(root_seed: int, label: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(root_seed, label)))


def torch_generator(root_seed: int, label: str) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(root_seed, label))
    return gen
