"""Seed streams derived from one root seed.

Each consumer asks for a stream by name path, e.g. ``("train", "points")``;
the stream seed is a hash of the root seed and the path, so adding a new
consumer never shifts the numbers another one sees.
"""
from __future__ import annotations

import hashlib

import numpy as np
import torch


def derive_seed(root: int, *path: str | int) -> int:
    key = "/".join([str(int(root))] + [str(p) for p in path]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") & ((1 << 63) - 1)


def numpy_rng(root: int, *path: str | int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *path))


def torch_gen(root: int, *path: str | int) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(root, *path))
