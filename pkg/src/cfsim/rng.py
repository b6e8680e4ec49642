"""Counter-based random streams.

A stream is identified by a master seed plus a path of labels (stage names,
column names, round numbers).  The key is derived with ``SeedSequence`` and
drives numpy's Philox counter generator, so the value at row ``i`` of a
stream is a pure function of ``(seed, labels, i)``: it does not depend on how
many other columns were drawn before, nor on thread count.
"""
import hashlib

import numpy as np

_INV53 = 2.0**-53


def _label_int(label):
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError("integer stream labels must be nonnegative")
        return int(label)
    digest = hashlib.blake2b(str(label).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def as_seed(seed):
    """Normalize an int or an existing label path into a tuple seed."""
    if seed is None:
        return (0,)
    if isinstance(seed, tuple):
        return seed
    return (int(seed),)


def child(seed, *labels):
    """Seed for a sub-stage; children of distinct labels are independent."""
    return as_seed(seed) + tuple(_label_int(l) for l in labels)


def _bitgen(seed, labels):
    s = child(seed, *labels)
    ss = np.random.SeedSequence(entropy=s[0], spawn_key=s[1:])
    return np.random.Philox(key=ss.generate_state(2, dtype=np.uint64))


def uniforms(seed, n, *labels):
    """``n`` draws from the open interval (0, 1); draw ``i`` depends only on ``i``."""
    raw = _bitgen(seed, labels).random_raw(n)
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * _INV53


def generator(seed, *labels):
    """A ``numpy.random.Generator`` on the same key derivation."""
    return np.random.Generator(_bitgen(seed, labels))
