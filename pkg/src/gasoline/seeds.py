import os

import numpy as np


def derive_seed(*keys: int) -> int:
    """Deterministic 32-bit seed from a tuple of non-negative integers."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def worker_count() -> int:
    raw = os.environ.get("GASOLINE_THREADS", "").strip()
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        return 1
