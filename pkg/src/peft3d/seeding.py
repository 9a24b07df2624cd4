"""Deterministic seed derivation.

A single global seed fans out to per-stage seeds through a counter scheme:
``derive_seed(root, "stage", index)`` hashes the root seed together with the
stage label and an optional integer counter, so adding a new stage never
shifts the seeds of existing ones.
"""

from __future__ import annotations

import hashlib
import random

import numpy as np
import torch


def derive_seed(root_seed: int, *labels: object) -> int:
    """Derive a 63-bit stage seed from a root seed and a label path."""
    key = ":".join([str(int(root_seed))] + [str(l) for l in labels])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


_DETERMINISM_SET = False


def configure_determinism() -> None:
    """Force bit-deterministic torch execution.

    Multithreaded CPU backward kernels (grid_sample in particular) accumulate
    in nondeterministic order at the ulp level, which optimization loops
    amplify; single-threaded execution with deterministic algorithms makes
    every training stage exactly reproducible."""
    global _DETERMINISM_SET
    if not _DETERMINISM_SET:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
        _DETERMINISM_SET = True


def seed_all(seed: int) -> None:
    """Seed torch and the stdlib RNG (numpy code uses explicit Generators)."""
    configure_determinism()
    torch.manual_seed(seed & 0xFFFF_FFFF)
    random.seed(seed)


def rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)
