"""Deterministic RNG substreams.

Every stochastic event in a run (measurement noise at step t, feedback
noise for user j, Gibbs chains, synthetic traces) draws from its own
generator keyed by the master seed plus integer stream ids.  Replaying a
run with the same seed therefore reproduces every draw bit for bit, and
consuming draws in one stream never shifts another.
"""

import numpy as np

# stream ids, one per noise source
MEASUREMENT = 0
FEEDBACK = 1
PRIOR_DATA = 2
GIBBS = 3
TRACE = 4
ORACLE = 5


def substream(*ids):
    """Generator for the substream keyed by the given integers."""
    key = []
    for part in ids:
        if isinstance(part, (tuple, list)):
            key.extend(int(v) for v in part)
        else:
            key.append(int(part))
    return np.random.default_rng(key)
