"""Seed derivation: every randomized procedure gets its own stream.

A child seed is a SplitMix64 mix of the master seed and a hash of a role
tag, so new consumers never shift the draws of existing ones.
"""

import zlib

import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(x):
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def derive_seed(master, tag):
    return splitmix64((int(master) & _MASK) ^ splitmix64(zlib.crc32(str(tag).encode())))


def make_rng(master, tag):
    return np.random.default_rng(derive_seed(master, tag))
