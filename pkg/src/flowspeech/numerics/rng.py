"""Seeded, splittable random streams.

Streams are Philox (counter-based) generators keyed by a root seed plus a
path of string labels, so ``stream(7, "decoder", "init")`` is the same
sequence on every machine and independent of every other label path.
"""
import hashlib

import numpy as np


def _label_words(labels):
    words = []
    for label in labels:
        digest = hashlib.sha256(str(label).encode("utf-8")).digest()
        words.append(int.from_bytes(digest[:4], "little"))
    return tuple(words)


def stream(seed, *labels):
    ss = np.random.SeedSequence(int(seed), spawn_key=_label_words(labels))
    return np.random.Generator(np.random.Philox(ss))


def split(rng, n):
    """Derive ``n`` child generators from ``rng`` without sharing state."""
    return [np.random.Generator(np.random.Philox(s)) for s in rng.bit_generator.seed_seq.spawn(n)]
