"""Uplink system model: channels, real-valued representation, QAM and noise.

Conventions
-----------
* Channel entries are i.i.d. circularly-symmetric complex Gaussian with total
  variance ``1/N`` (each real part ``1/(2N)``), so every user column has unit
  expected energy.  No extra ``1/sqrt(N)`` prefactor is applied.
* Complex vectors map to real ones as ``[Re(v); Im(v)]`` and complex matrices
  to the block form ``[[Re, -Im], [Im, Re]]``.
* Batches of vectors are stored as columns, e.g. a ``(2K, T)`` array holds
  ``T`` real symbol vectors.
* SNR is ``E_x / N_0`` in dB.

Gray table
----------
Each QAM point carries ``b = log2(order)`` bits.  The first ``b/2`` bits pick
the in-phase level and the last ``b/2`` the quadrature level.  On one axis,
with ``L = sqrt(order)`` levels ordered from most positive to most negative,
level ``i`` carries the reflected Gray code ``i ^ (i >> 1)``.  For 16-QAM and
each axis::

    bits   00   01   11   10
    level  +3   +1   -1   -3      (times 1/sqrt(10) when E_x = 1)

so ``0000`` is ``(3 + 3j)/sqrt(10)`` and, for 4-QAM, ``00`` is
``(1 + 1j)/sqrt(2)``.  The constellation index of a point is the integer
whose binary digits are its bit pattern (most significant bit first).
"""

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np


@dataclass(frozen=True)
class SystemDims:
    """Antenna and user counts of the uplink.

    Parameters
    ----------
    N : int
        Number of base-station receive antennas.
    K : int
        Number of single-antenna users.
    """

    N: int
    K: int

    def __post_init__(self):
        if int(self.K) != self.K or int(self.N) != self.N:
            raise ValueError("N and K must be integers")
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if self.N < self.K:
            raise ValueError(f"need N >= K, got N={self.N}, K={self.K}")

    @property
    def beta(self) -> float:
        """Loading factor K/N."""
        return self.K / self.N


@dataclass(frozen=True)
class ChannelSample:
    """One channel realization in complex (N x K) and real (2N x 2K) form."""

    h_complex: np.ndarray
    h_real: np.ndarray
    seed_tag: tuple = ()

    @property
    def dims(self) -> SystemDims:
        n, k = self.h_complex.shape
        return SystemDims(n, k)

    @classmethod
    def from_complex(cls, hc, seed_tag=()):
        hc = np.asarray(hc, dtype=complex)
        return cls(hc, realify(hc), tuple(seed_tag))


def realify(hc):
    """Real block representation ``[[Re, -Im], [Im, Re]]`` of a complex matrix."""
    hc = np.asarray(hc)
    if hc.ndim != 2:
        raise ValueError("realify expects a 2-D matrix")
    if not np.all(np.isfinite(hc)):
        raise ValueError("matrix has non-finite entries")
    re, im = hc.real, hc.imag
    return np.block([[re, -im], [im, re]]).astype(float)


def realvec(v):
    """Stack real and imaginary parts along the first axis."""
    v = np.asarray(v)
    return np.concatenate([v.real, v.imag], axis=0).astype(float)


def complexvec(x):
    """Inverse of :func:`realvec`."""
    x = np.asarray(x, dtype=float)
    half = x.shape[0] // 2
    if 2 * half != x.shape[0]:
        raise ValueError("real representation must have even length")
    return x[:half] + 1j * x[half:]


def sample_channel(dims: SystemDims, rng: np.random.Generator, seed_tag=()) -> ChannelSample:
    """Draw an i.i.d. Rayleigh channel with entry variance ``1/N``."""
    scale = 1.0 / math.sqrt(2 * dims.N)
    re = rng.standard_normal((dims.N, dims.K))
    im = rng.standard_normal((dims.N, dims.K))
    return ChannelSample.from_complex(scale * (re + 1j * im), seed_tag)


def _gray(i: int) -> int:
    return i ^ (i >> 1)


@dataclass(frozen=True)
class Constellation:
    """Square Gray-mapped QAM constellation.

    Parameters
    ----------
    order : int
        4, 16 or 64 (any even power of two works).
    symbol_energy : float
        Mean energy ``E_x`` per complex symbol.
    """

    order: int = 16
    symbol_energy: float = 1.0
    points: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        b = int(round(math.log2(self.order))) if self.order > 1 else 0
        if self.order < 4 or 2 ** b != self.order or b % 2:
            raise ValueError(f"QAM order must be an even power of two >= 4, got {self.order}")
        if self.symbol_energy <= 0:
            raise ValueError("symbol_energy must be positive")
        object.__setattr__(self, "points", self.unit_levels()[0] * self.scale)

    @property
    def bits_per_symbol(self) -> int:
        return int(round(math.log2(self.order)))

    @property
    def levels_per_axis(self) -> int:
        return int(round(math.sqrt(self.order)))

    @property
    def scale(self) -> float:
        # mean |s|^2 of the odd-integer grid is 2(M-1)/3
        return math.sqrt(3.0 * self.symbol_energy / (2.0 * (self.order - 1)))

    def axis_levels(self) -> list:
        """Odd-integer amplitude carried by each per-axis Gray code, indexed by code."""
        L = self.levels_per_axis
        amps = [0] * L
        for i in range(L):
            amps[_gray(i)] = (L - 1) - 2 * i
        return amps

    def unit_levels(self):
        """Integer-grid points (before scaling) indexed by constellation index.

        Returns ``(points, re, im)`` where ``re``/``im`` are integer lists.
        """
        half = self.bits_per_symbol // 2
        amps = self.axis_levels()
        re, im = [], []
        for idx in range(self.order):
            re.append(amps[idx >> half])
            im.append(amps[idx & ((1 << half) - 1)])
        pts = np.array(re, dtype=float) + 1j * np.array(im, dtype=float)
        return pts, re, im

    def exact_mean_energy(self) -> Fraction:
        """Mean symbol energy in exact rational arithmetic, in units of E_x."""
        _, re, im = self.unit_levels()
        total = sum(Fraction(a * a + b * b) for a, b in zip(re, im))
        return total / self.order * Fraction(3, 2 * (self.order - 1))

    def bit_table(self) -> np.ndarray:
        """``(order, bits_per_symbol)`` array of bit patterns, MSB first."""
        b = self.bits_per_symbol
        idx = np.arange(self.order)[:, None]
        return (idx >> np.arange(b - 1, -1, -1)[None, :]) & 1

    def export_csv(self, path):
        """Write the mapping table as ``index,bits,re,im``."""
        table = self.bit_table()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "bits", "re", "im"])
            for i, p in enumerate(self.points):
                w.writerow([i, "".join(map(str, table[i])), repr(float(p.real)), repr(float(p.imag))])


@dataclass(frozen=True)
class NoiseSpec:
    """Complex noise variance ``N_0`` per receive antenna."""

    n0: float
    symbol_energy: float = 1.0

    def __post_init__(self):
        if not self.n0 >= 0:
            raise ValueError("n0 must be non-negative")

    @classmethod
    def from_snr_db(cls, snr_db: float, symbol_energy: float = 1.0):
        return cls(symbol_energy / 10.0 ** (snr_db / 10.0), symbol_energy)

    @property
    def snr_db(self) -> float:
        return 10.0 * math.log10(self.symbol_energy / self.n0)

    @property
    def mu(self) -> float:
        """MMSE regularizer ``N_0 / E_x``."""
        return self.n0 / self.symbol_energy


def modulate(bits, spec: Constellation, K: int):
    """Map ``K * log2(order)`` bits (per column) onto ``K`` complex symbols.

    ``bits`` may be 1-D or a ``(K * b, T)`` batch; user ``k`` takes bits
    ``k*b`` to ``(k+1)*b - 1``.
    """
    bits = np.asarray(bits)
    b = spec.bits_per_symbol
    if bits.shape[0] != K * b:
        raise ValueError(f"expected {K * b} bits per vector, got {bits.shape[0]}")
    if np.any((bits != 0) & (bits != 1)):
        raise ValueError("bits must be 0 or 1")
    grouped = bits.reshape((K, b) + bits.shape[1:]).astype(np.int64)
    weights = (1 << np.arange(b - 1, -1, -1)).reshape((1, b) + (1,) * (bits.ndim - 1))
    idx = np.sum(grouped * weights, axis=1)
    return spec.points[idx]


def demodulate(xhat, spec: Constellation):
    """Hard-decide a real estimate ``[Re; Im]`` (length 2K, or 2K x T) to bits.

    Each user's recombined complex value goes to the nearest constellation
    point; exact ties go to the smaller constellation index.
    """
    xhat = np.asarray(xhat, dtype=float)
    if not np.all(np.isfinite(xhat)):
        raise ValueError("estimate has non-finite entries")
    z = complexvec(xhat)
    dist = np.abs(z[..., None] - spec.points) ** 2
    idx = np.argmin(dist, axis=-1)  # first minimum = smallest index
    bits = spec.bit_table()[idx]  # (K, [T,] b)
    if bits.ndim == 3:
        bits = np.moveaxis(bits, 2, 1)  # (K, b, T)
    return bits.reshape((-1,) + z.shape[1:])


def transmit(sample: ChannelSample, x_real, noise: NoiseSpec, rng: np.random.Generator):
    """Return ``H x + n`` with real noise components of variance ``N_0 / 2``."""
    x_real = np.asarray(x_real, dtype=float)
    H = sample.h_real
    if x_real.shape[0] != H.shape[1]:
        raise ValueError(f"x has {x_real.shape[0]} rows, channel expects {H.shape[1]}")
    y = H @ x_real
    if noise.n0 > 0:
        y = y + math.sqrt(noise.n0 / 2.0) * rng.standard_normal(y.shape)
    return y
