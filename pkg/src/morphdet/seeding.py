"""Deterministic hierarchical RNG derivation.

All randomness flows from one root seed. Independent streams are derived by
combining the root seed with fixed integer stream tags, so adding a new
consumer never perturbs existing streams. Tag values are arbitrary but
frozen: changing one changes every artifact generated under it.
"""

import numpy as np

IDENTITY_STREAM = 101
RENDER_STREAM = 102
SPLIT_STREAM = 201
MORPH_PAIR_STREAM = 202
BALANCE_STREAM = 203
BATCH_STREAM = 204
HOLDOUT_STREAM = 205
MORPH_JOB_STREAM = 206
FR_BATCH_STREAM = 207
INIT_STREAM = 301
PROTOCOL_STREAM = 401
STYLE_BASIS_STREAM = 501


def derive_rng(root_seed, *stream) -> np.random.Generator:
    """Return the PCG64 generator for the (root_seed, *stream) lineage."""
    return np.random.default_rng([int(root_seed)] + [int(s) for s in stream])
