"""Deterministic seed derivation.

Every pipeline stage (data generation, weight init, batch shuffling,
pretraining, consent sampling) draws from its own generator, seeded by a
stable label hash of the master seed. Changing one stage's seed therefore
never perturbs another stage's stream.
"""

from __future__ import annotations

import hashlib

STAGE_DATA = "data"
STAGE_STRUCTURE = "structure"
STAGE_INIT = "init"
STAGE_BATCH = "batch"
STAGE_PRETRAIN = "pretrain"


def stage_seed(master_seed: int, label: str) -> int:
    """Derive a 64-bit stage seed from a master seed and a stage label.

    Uses a keyed blake2b digest rather than Python's ``hash`` so the
    derivation is stable across processes and platforms.
    """
    digest = hashlib.blake2b(f"{master_seed}:{label}".encode("utf-8"), digest_size=8)
    return int.from_bytes(digest.digest(), "big")
