"""Counter-based random streams.

Every random decision in a run is addressed by a key tuple such as
``(seed, STREAM_ALLOC, step)``. The generator for a key is Philox seeded from
that tuple, so the draws for step 900 do not depend on whether steps 0..899
were ever executed.
"""

from __future__ import annotations

import numpy as np

STREAM_INIT = 1
STREAM_DATA = 2
STREAM_ALLOC = 3
STREAM_COMBINER = 4
STREAM_REVISIT = 5


def stream(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))
