"""Counter-based keyed uniforms (splitmix64 finaliser).

Every random number used by the update realizations is a pure function of
``(seed, site, epoch, counter)``; nothing is drawn from a stateful stream.
This is what lets a realization be extended backwards in time without
touching the events it already holds.
"""
import numpy as np

from ._accel import USE_NUMBA, njit

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_INV53 = 1.0 / 9007199254740992.0

if USE_NUMBA:
    _G = np.uint64(_GOLDEN)

    @njit
    def mix64(x):
        x = np.uint64(x)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(_M1)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(_M2)
        return x ^ (x >> np.uint64(31))

    @njit
    def child_key(key, index):
        return mix64(np.uint64(key) ^ (np.uint64(index) * _G + _G))

    @njit
    def keyed_uniform(key, counter):
        x = mix64(np.uint64(key) + np.uint64(counter + 1) * _G)
        return float(x >> np.uint64(11)) * _INV53

    @njit
    def as_key(seed):
        return mix64(np.uint64(seed) + _G)

else:

    def mix64(x):
        x = int(x) & MASK64
        x = ((x ^ (x >> 30)) * _M1) & MASK64
        x = ((x ^ (x >> 27)) * _M2) & MASK64
        return x ^ (x >> 31)

    def child_key(key, index):
        return mix64(int(key) ^ ((int(index) * _GOLDEN + _GOLDEN) & MASK64))

    def keyed_uniform(key, counter):
        x = mix64((int(key) + (int(counter) + 1) * _GOLDEN) & MASK64)
        return float(x >> 11) * _INV53

    def as_key(seed):
        return mix64((int(seed) + _GOLDEN) & MASK64)


def _box(key):
    # numba hands uint64 back as a Python int, which it cannot re-type above 2**63
    return np.uint64(key) if USE_NUMBA else int(key)


def master_key(seed):
    """Stream key of a master ``seed`` (any non-negative int)."""
    return _box(as_key(np.uint64(int(seed) & MASK64) if USE_NUMBA else int(seed) & MASK64))


def replica_key(seed, replica):
    """Key of replica ``replica`` under master ``seed`` (both non-negative ints)."""
    return _box(child_key(master_key(seed), int(replica)))
