"""Deterministic named random substreams.

All randomness in the pipeline flows from one root seed. Each consumer asks
for a substream by name (e.g. ``substream(seed, "dataset", "shape", 17)``), so
changing one stage's draws never perturbs another stage.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_to_words(*names):
    h = hashlib.sha256("/".join(str(n) for n in names).encode("utf-8")).digest()
    return [int.from_bytes(h[i:i + 4], "little") for i in range(0, 16, 4)]


def substream(root_seed: int, *names) -> np.random.Generator:
    """Generator for the named substream of ``root_seed``."""
    seq = np.random.SeedSequence([int(root_seed) & 0xFFFFFFFF, *_name_to_words(*names)])
    return np.random.Generator(np.random.PCG64(seq))
