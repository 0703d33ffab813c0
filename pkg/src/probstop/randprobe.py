"""Counter-based probe vectors for Monte Carlo trace and misfit estimators.

Every entry of every probe is a pure function of ``(master_seed, j, i)``
where ``j`` is the probe index and ``i`` the component.  Bits come from a
splitmix64-style mixer, so any subset of probes can be generated in any
order (or in parallel) and still match a sequential draw bit-for-bit.

Rademacher entries take the top bit of the mixed word.  Gaussian entries
use the cosine branch of Box-Muller on two 53-bit uniforms drawn from
lanes 0 and 1 of the same ``(j, i)`` counter.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Distribution",
    "ProbeStream",
    "derive_seed",
    "draw_probe",
    "draw_probes",
    "second_moment_check",
]

_MASK64 = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_PROBE_MULT = np.uint64(0xD1B54A32D192ED03)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_INV_2_53 = 1.0 / (1 << 53)


class Distribution(str, enum.Enum):
    """Probe distributions with identity second moment."""

    GAUSSIAN = "gaussian"
    RADEMACHER = "rademacher"

    @classmethod
    def parse(cls, value: str | Distribution) -> Distribution:
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(
                f"unknown probe distribution {value!r}; "
                f"expected one of {[d.value for d in cls]}"
            ) from None


def _mix(z: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer; uint64 array arithmetic wraps modulo 2**64
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _as_u64(value: int) -> np.ndarray:
    return np.array([int(value) & _MASK64], dtype=np.uint64)


def derive_seed(master_seed: int, *labels: int) -> int:
    """Derive an independent 64-bit seed from a master seed and integer labels.

    Used to carve disjoint seed subspaces (e.g. per phase and per iteration).
    """
    z = _mix(_as_u64(master_seed) + _GOLDEN)
    for label in labels:
        z = _mix(z ^ _mix(_as_u64(label) + _GOLDEN))
    return int(z[0])


@dataclass(frozen=True)
class ProbeStream:
    """Immutable description of an indexable probe sequence.

    ``first_index`` shifts the counter, so ``draw_probe(stream, j)`` returns
    global probe ``first_index + j``.
    """

    distribution: Distribution
    dimension: int
    master_seed: int = 0
    first_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "distribution", Distribution.parse(self.distribution))
        if self.dimension < 1:
            raise ValueError(f"probe dimension must be >= 1, got {self.dimension}")
        if self.first_index < 0:
            raise ValueError("first_index must be non-negative")


def _words(seed: int, j: np.ndarray, i: np.ndarray, lane: int) -> np.ndarray:
    key = _mix(_as_u64(seed) + _GOLDEN)
    pkey = _mix(key ^ (j.astype(np.uint64) * _PROBE_MULT))
    ctr = (i.astype(np.uint64) << np.uint64(1)) + np.uint64(lane + 1)
    return _mix(pkey + ctr * _GOLDEN)


def draw_probes(stream: ProbeStream, start: int, count: int) -> np.ndarray:
    """Return probes ``start .. start+count-1`` as the columns of an (s, count) array."""
    if count < 0 or start < 0:
        raise ValueError("start and count must be non-negative")
    s = stream.dimension
    j = np.arange(stream.first_index + start, stream.first_index + start + count, dtype=np.uint64)
    i = np.arange(s, dtype=np.uint64)
    jj, ii = j[None, :], i[:, None]
    w0 = _words(stream.master_seed, jj, ii, 0)
    if stream.distribution is Distribution.RADEMACHER:
        return np.where((w0 >> np.uint64(63)) == 0, 1.0, -1.0)
    w1 = _words(stream.master_seed, jj, ii, 1)
    u1 = ((w0 >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53  # (0, 1]
    u2 = (w1 >> np.uint64(11)).astype(np.float64) * _INV_2_53  # [0, 1)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def draw_probe(stream: ProbeStream, j: int) -> np.ndarray:
    """Return probe ``j`` of the stream as a length-s vector."""
    return draw_probes(stream, j, 1)[:, 0]


def second_moment_check(
    distribution: Distribution | str,
    s: int,
    n_samples: int,
    seed: int = 0,
    chunk: int = 65536,
) -> float:
    """Max entrywise deviation of the empirical ``(1/n) sum w w^T`` from the identity."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    stream = ProbeStream(Distribution.parse(distribution), s, seed)
    acc = np.zeros((s, s))
    for start in range(0, n_samples, chunk):
        W = draw_probes(stream, start, min(chunk, n_samples - start))
        acc += W @ W.T
    return float(np.max(np.abs(acc / n_samples - np.eye(s))))
