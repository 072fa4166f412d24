"""Named random sub-streams derived from one experiment seed."""

import numpy as np

STREAMS = {"data": 0, "init": 1, "training": 2, "inference": 3}


def substream_seed(seed, stream):
    """Deterministic 32-bit seed for ``stream`` ('data', 'init', ...)."""
    if stream not in STREAMS:
        raise ValueError(f"unknown random stream {stream!r}; expected one of {sorted(STREAMS)}")
    return int(np.random.SeedSequence([int(seed), STREAMS[stream]]).generate_state(1)[0])
