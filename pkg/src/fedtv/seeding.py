"""Master-seed fan-out.

Every random stream is ``SeedSequence([master, tag, *path])``:

========  ====  ==============================
stream    tag   path
========  ====  ==============================
data      0     (none) -> federation seed
pretrain  1     (none) -> init + pooled SGD
local     2     (client_id, round)
========  ====  ==============================

Streams are independent of one another and of execution order.
"""

from __future__ import annotations

import numpy as np

DATA, PRETRAIN, LOCAL = 0, 1, 2


def stream(master: int, tag: int, *path: int) -> np.random.SeedSequence:
    if master < 0:
        raise ValueError(f"master seed must be nonnegative, got {master}")
    return np.random.SeedSequence([int(master), int(tag), *(int(p) for p in path)])


def data_seed(master: int) -> int:
    return int(stream(master, DATA).generate_state(1)[0])


def as_seed_sequence(seed: int | np.random.SeedSequence) -> np.random.SeedSequence:
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
