"""Counter-based SplitMix64 random streams.

Every random draw in the package goes through :class:`Stream` so that data
sets, shuffles and initial weights are a pure function of the seed and can be
reproduced by any implementation of the same algorithm:

* word ``i`` (``i = 1, 2, ...``) of a stream with state ``s`` is
  ``mix64(s + i * 0x9E3779B97F4A7C15)`` (mod 2**64), where ``mix64`` is the
  SplitMix64 finalizer;
* a uniform double is ``(word >> 11) * 2**-53``, in ``[0, 1)``;
* a standard normal pair comes from Box-Muller on two uniforms
  ``u1, u2``: ``sqrt(-2 ln(1 - u1)) * (cos, sin)(2 pi u2)``;
* an integer in ``[0, n)`` is ``floor(uniform * n)``;
* permutations are Fisher-Yates, swapping ``i`` with ``integer(i + 1)``
  for ``i = n-1 .. 1``;
* a child stream keyed by ``k`` has state ``mix64(state ^ mix64(k + 1))``.
"""
import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def mix64(z):
    """SplitMix64 finalizer on a uint64 array (wrapping arithmetic)."""
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _mix_int(value: int) -> int:
    return int(mix64(np.uint64(value & _MASK)))


class Stream:
    """Sequential stream of SplitMix64 words."""

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK
        self.counter = 0

    def child(self, *keys: int) -> "Stream":
        state = self.state
        for key in keys:
            state = _mix_int(state ^ _mix_int(int(key) + 1))
        return Stream(state)

    def words(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return mix64(np.uint64(self.state) + idx * GOLDEN)

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        u = (self.words(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
        return low + (high - low) * u

    def normal(self, n: int) -> np.ndarray:
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        r = np.sqrt(-2.0 * np.log1p(-u[0::2]))
        theta = 2.0 * np.pi * u[1::2]
        return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).reshape(-1)[:n]

    def integers(self, n: int, high: int) -> np.ndarray:
        return np.floor(self.uniform(n) * high).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.uniform(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(u[k] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm
