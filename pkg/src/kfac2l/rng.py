"""Seeded random streams.

Every random draw comes from a Philox counter-based generator keyed by the
root seed and a fixed stream number, so runs are reproducible and streams
never overlap:

====  ===============================================
 0    parameter initialization
 1    targets sampled from the model (Fisher estimates)
 2    mini-batch shuffling
 3    synthetic dataset generation
====  ===============================================
"""
import numpy as np

STREAM_INIT = 0
STREAM_TARGETS = 1
STREAM_SHUFFLE = 2
STREAM_DATA = 3


def generator(seed: int, stream: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream),))
    return np.random.Generator(np.random.Philox(ss))
