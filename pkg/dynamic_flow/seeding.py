"""Named, independent random streams derived from one top-level seed."""
from __future__ import annotations

from typing import Dict, Tuple

import numpy as np

STREAMS: Dict[str, int] = {
    "data": 0,
    "init": 1,
    "gumbel": 2,
    "r-sampling": 3,
    "batching": 4,
}


def stream(seed: int, name: str, *key: int) -> np.random.Generator:
    """Return the generator for substream ``name`` (optionally keyed further).

    Streams never share state: drawing from ``gumbel`` does not move ``init``,
    and ``stream(seed, "gumbel", sample_seed, step)`` gives each sample its own
    noise independent of the batch it lands in.
    """

    if name not in STREAMS:
        raise KeyError(f"Unknown random stream {name!r}; expected one of {sorted(STREAMS)}")
    spawn_key: Tuple[int, ...] = (STREAMS[name], *(int(k) for k in key))
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=spawn_key))


__all__ = ["STREAMS", "stream"]
