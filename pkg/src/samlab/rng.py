"""Seeded, splittable random streams.

All randomness goes through numpy's counter-based Philox generator keyed by
``SeedSequence(seed, spawn_key=stream)``, so independent streams (init,
shuffling, masks, dataset generation) never share state and a generator's
full state round-trips through JSON.
"""

import numpy as np

STREAM_INIT = 1
STREAM_DATA = 2
STREAM_SHUFFLE = 3
STREAM_MASK = 4
STREAM_SHARPNESS = 5
STREAM_NOISE = 6


def make_rng(seed, *stream):
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


def rng_state(rng):
    st = rng.bit_generator.state
    return {
        "bit_generator": st["bit_generator"],
        "state": {"counter": [int(v) for v in st["state"]["counter"]],
                  "key": [int(v) for v in st["state"]["key"]]},
        "buffer": [int(v) for v in st["buffer"]],
        "buffer_pos": int(st["buffer_pos"]),
        "has_uint32": int(st["has_uint32"]),
        "uinteger": int(st["uinteger"]),
    }


def rng_from_state(state):
    bg = np.random.Philox()
    bg.state = {
        "bit_generator": state["bit_generator"],
        "state": {"counter": np.array(state["state"]["counter"], dtype=np.uint64),
                  "key": np.array(state["state"]["key"], dtype=np.uint64)},
        "buffer": np.array(state["buffer"], dtype=np.uint64),
        "buffer_pos": state["buffer_pos"],
        "has_uint32": state["has_uint32"],
        "uinteger": state["uinteger"],
    }
    return np.random.Generator(bg)
