"""Linear detectors for the real-valued uplink model.

The exact ZF/MMSE filters solve against the Gram matrix ``G = H^T H``.  The
TPE detector replaces ``G^{-1}`` by a degree ``J-1`` polynomial in ``G``::

    W_TPE = sum_l w_l G^l H^T

and applies it with ``2J - 1`` matrix-vector products, never forming ``G``.
"""

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from .model import ChannelSample, SystemDims

MAX_ORDER = 64
RCOND_MIN = 1e-12
SCHEMA_VERSION = 1


class DegenerateChannelError(ValueError):
    """The Gram matrix is numerically singular."""


class AlphaRangeError(ValueError):
    """Normalization factor outside ``(0, 2 / lambda_max)``."""


class CoefficientFileError(ValueError):
    """A coefficient/checkpoint file is malformed or does not match the request."""


def gram(sample) -> np.ndarray:
    """``H^T H`` of the real channel (symmetrized to kill rounding asymmetry)."""
    H = _real(sample)
    G = H.T @ H
    return 0.5 * (G + G.T)


def _real(sample) -> np.ndarray:
    if isinstance(sample, ChannelSample):
        return sample.h_real
    return np.asarray(sample, dtype=float)


def _as_gram(sample_or_gram) -> np.ndarray:
    if isinstance(sample_or_gram, ChannelSample):
        return gram(sample_or_gram)
    return np.asarray(sample_or_gram, dtype=float)


def zf_matrix(sample) -> np.ndarray:
    """``(H^T H)^{-1} H^T``; raises :class:`DegenerateChannelError` if singular."""
    H = _real(sample)
    G = gram(H)
    if 1.0 / np.linalg.cond(G) < RCOND_MIN:
        raise DegenerateChannelError("Gram matrix is numerically singular")
    return np.linalg.solve(G, H.T)


def mmse_matrix(sample, mu: float) -> np.ndarray:
    """``(H^T H + mu I)^{-1} H^T`` with ``mu = N_0 / E_x``."""
    if mu < 0:
        raise ValueError("mu must be non-negative")
    if mu == 0:
        return zf_matrix(sample)
    H = _real(sample)
    G = gram(H)
    return np.linalg.solve(G + mu * np.eye(G.shape[0]), H.T)


def extreme_eigenvalues(sample_or_gram):
    lam = np.linalg.eigvalsh(_as_gram(sample_or_gram))
    return float(lam[0]), float(lam[-1])


def alpha_opt(sample_or_gram) -> float:
    """``2 / (lambda_min + lambda_max)`` of the Gram matrix (exact eigenvalues)."""
    lo, hi = extreme_eigenvalues(sample_or_gram)
    if not lo + hi > 0:
        raise ArithmeticError("Gram matrix is not positive definite")
    return 2.0 / (lo + hi)


def alpha_constant(dims: SystemDims) -> float:
    """Channel-independent factor from the Marchenko-Pastur edges ``(1 -+ sqrt(beta))^2``.

    ``2 / ((1 - sqrt(b))^2 + (1 + sqrt(b))^2)`` simplifies to ``1 / (1 + b)``.
    """
    beta = dims.beta if isinstance(dims, SystemDims) else float(dims)
    if not 0 <= beta <= 1:
        raise ValueError("loading factor must lie in [0, 1]")
    return 1.0 / (1.0 + beta)


def power_iteration(apply, dim: int, iterations: int, rng: np.random.Generator) -> float:
    """Rayleigh-quotient estimate of the largest eigenvalue of a PSD operator.

    ``apply(v)`` must return ``G v``.  The estimate is non-decreasing in
    ``iterations`` for a fixed start vector.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    v = rng.standard_normal(dim)
    while not np.any(v):  # pragma: no cover - measure-zero event
        v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    for _ in range(iterations):
        u = apply(v)
        nrm = np.linalg.norm(u)
        if nrm == 0:
            return 0.0
        v = u / nrm
    return float(v @ apply(v))


def alpha_power(sample: ChannelSample, iterations: int = 20, rng: Optional[np.random.Generator] = None) -> float:
    """Power-method ``lambda_max`` with the Marchenko-Pastur lower edge for ``lambda_min``."""
    if rng is None:
        rng = np.random.default_rng(0)
    H = sample.h_real
    lam_max = power_iteration(lambda v: H.T @ (H @ v), H.shape[1], iterations, rng)
    lam_min = (1.0 - math.sqrt(sample.dims.beta)) ** 2
    return 2.0 / (lam_max + lam_min)


@dataclass(frozen=True)
class TpeCoefficients:
    """Coefficients ``w_0 .. w_{J-1}`` of a TPE detector.

    ``origin`` is ``"alpha"`` when the vector was synthesized from a
    normalization factor (then ``alpha`` is set) and ``"learned"`` or
    ``"closed_form"`` when fitted to data.
    """

    w: tuple
    origin: str = "learned"
    alpha: Optional[float] = None
    source: Optional[str] = field(default=None, compare=False)

    def __post_init__(self):
        w = tuple(float(v) for v in np.ravel(self.w))
        if not w:
            raise ValueError("need at least one coefficient")
        if not all(math.isfinite(v) for v in w):
            raise ValueError("coefficients must be finite")
        object.__setattr__(self, "w", w)

    @property
    def order_j(self) -> int:
        return len(self.w)

    def as_array(self) -> np.ndarray:
        return np.array(self.w)


def neumann_coefficients(alpha, order_j: int) -> list:
    """``w_l = alpha (-alpha)^l sum_{n=l}^{J-1} C(n, l)`` in the arithmetic of ``alpha``.

    Binomials are exact integers, so a :class:`fractions.Fraction` ``alpha``
    gives exact coefficients.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if order_j < 1:
        raise ValueError("order_j must be >= 1")
    if order_j > MAX_ORDER:
        raise OverflowError(f"TPE order above {MAX_ORDER} is not supported")
    w = []
    for l in range(order_j):
        s = sum(math.comb(n, l) for n in range(l, order_j))
        w.append(alpha * (-alpha) ** l * s)
    return w


def coeffs_from_alpha(alpha: float, order_j: int) -> TpeCoefficients:
    """TPE coefficients of the ``J``-term Neumann series with factor ``alpha``.

    The monomial form cancels heavily for large ``J``: with ``alpha *
    lambda_max`` near 1 the terms grow like ``2^J``, so float64 evaluation of
    ``W_TPE`` degrades beyond roughly ``J = 25``.
    """
    w = neumann_coefficients(alpha, order_j)
    return TpeCoefficients(tuple(w), origin="alpha", alpha=float(alpha))


def neumann_partial_sum(x, alpha: float, order_j: int, check: bool = True) -> np.ndarray:
    """``alpha * sum_{l<J} (I - alpha X)^l`` for a symmetric/Hermitian PD ``X``."""
    x = np.asarray(x)
    if check:
        lam_max = float(np.linalg.eigvalsh(x)[-1])
        if not 0 < alpha < 2.0 / lam_max:
            raise AlphaRangeError(f"alpha={alpha} outside (0, {2.0 / lam_max})")
    eye = np.eye(x.shape[0], dtype=x.dtype)
    step = eye - alpha * x
    term = eye.copy()
    total = eye.copy()
    for _ in range(order_j - 1):
        term = term @ step
        total = total + term
    return alpha * total


def tpe_detect(sample: ChannelSample, y, coeffs: TpeCoefficients, counter: Optional[Counter] = None):
    """Matrix-free TPE estimate ``sum_l w_l xhat_l``.

    ``xhat_0 = H^T y`` and ``xhat_l = H^T (H xhat_{l-1})``.  ``y`` may hold
    several received vectors as columns.  If ``counter`` is given, the
    products by ``H`` and ``H^T`` are tallied under ``"H"`` and ``"HT"``.
    """
    H = sample.h_real
    y = np.asarray(y, dtype=float)
    w = coeffs.w
    xl = H.T @ y
    if counter is not None:
        counter["HT"] += 1
    out = w[0] * xl
    for wl in w[1:]:
        z = H @ xl
        xl = H.T @ z
        if counter is not None:
            counter["H"] += 1
            counter["HT"] += 1
        out = out + wl * xl
    return out


def tpe_matrix(sample, coeffs: TpeCoefficients) -> np.ndarray:
    """Dense ``sum_l w_l G^l H^T`` (reference path, Horner form)."""
    H = _real(sample)
    G = gram(H)
    w = coeffs.w
    W = w[-1] * H.T
    for wl in reversed(w[:-1]):
        W = G @ W + wl * H.T
    return W


# -- operation counts ---------------------------------------------------------

DETECTOR_KINDS = ("zf", "mmse", "tpe_constant", "tpe_power", "learned")
_ALIASES = {"proposed": "learned", "tpe_learned": "learned", "constant": "tpe_constant", "power": "tpe_power"}


@dataclass(frozen=True)
class OpCount:
    complex_mults: int
    formula_tag: str


def count_ops(kind: str, dims: SystemDims, order_j: Optional[int] = None) -> OpCount:
    """Complex multiplications per detected vector, by exact integer formulas.

    =================  ===============================================
    kind               complex multiplications
    =================  ===============================================
    zf, mmse           NK^2/2 + K^3/2 + 3NK/2 + 5K^2/2
    tpe_constant       2JNK - NK + JK
    learned            2JNK - NK + JK
    tpe_power          2JNK - NK + JK + KJ(J-1)/2 + 2(K+J)
    =================  ===============================================
    """
    kind = _ALIASES.get(kind, kind)
    N, K = dims.N, dims.K
    if kind in ("zf", "mmse"):
        twice = N * K * K + K ** 3 + 3 * N * K + 5 * K * K
        assert twice % 2 == 0
        return OpCount(twice // 2, "zf_mmse")
    if kind not in DETECTOR_KINDS:
        raise ValueError(f"unknown detector kind {kind!r}; choose from {DETECTOR_KINDS}")
    if order_j is None or order_j < 1:
        raise ValueError("TPE detectors need order_j >= 1")
    J = order_j
    base = 2 * J * N * K - N * K + J * K
    if kind == "tpe_power":
        return OpCount(base + K * J * (J - 1) // 2 + 2 * (K + J), "tpe_power")
    return OpCount(base, kind)


def savings(proposed: OpCount, reference: OpCount) -> Fraction:
    """Exact fractional saving ``1 - proposed / reference``."""
    return 1 - Fraction(proposed.complex_mults, reference.complex_mults)


def format_percent(frac: Fraction, places: int = 2) -> str:
    return f"{float(frac) * 100:.{places}f}%"


# -- coefficient files --------------------------------------------------------

_REQUIRED = ("schema_version", "N", "K", "J", "w", "origin")
_OPTIONAL = ("alpha", "train_seed", "loss_final", "training")


def coefficients_document(coeffs: TpeCoefficients, dims: SystemDims, **meta) -> dict:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "N": dims.N,
        "K": dims.K,
        "J": coeffs.order_j,
        "w": list(coeffs.w),
        "origin": coeffs.origin,
    }
    if coeffs.alpha is not None:
        doc["alpha"] = coeffs.alpha
    for key, val in meta.items():
        if key not in _OPTIONAL:
            raise ValueError(f"unsupported coefficient-file field {key!r}")
        if val is not None:
            doc[key] = val
    return doc


def write_coefficients(path, coeffs: TpeCoefficients, dims: SystemDims, **meta):
    doc = coefficients_document(coeffs, dims, **meta)
    with open(path, "w") as fh:
        fh.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_coefficients(path, dims: Optional[SystemDims] = None, order_j: Optional[int] = None):
    """Load a coefficient file; returns ``(TpeCoefficients, document)``.

    Raises :class:`CoefficientFileError` on malformed JSON (with the byte
    offset), unknown schema versions, or a mismatch with ``dims``/``order_j``.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        doc = json.loads(raw.decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise CoefficientFileError(f"{path}: invalid JSON at byte offset {exc.pos}: {exc.msg}") from exc
    except UnicodeDecodeError as exc:
        raise CoefficientFileError(f"{path}: not UTF-8 at byte offset {exc.start}") from exc
    if not isinstance(doc, dict):
        raise CoefficientFileError(f"{path}: top-level value must be an object")
    missing = [k for k in _REQUIRED if k not in doc]
    if missing:
        raise CoefficientFileError(f"{path}: missing fields {missing}")
    if doc["schema_version"] != SCHEMA_VERSION:
        raise CoefficientFileError(f"{path}: unknown schema_version {doc['schema_version']!r}")
    if len(doc["w"]) != doc["J"]:
        raise CoefficientFileError(f"{path}: J={doc['J']} but {len(doc['w'])} coefficients")
    if dims is not None and (doc["N"], doc["K"]) != (dims.N, dims.K):
        raise CoefficientFileError(
            f"{path}: trained for N={doc['N']}, K={doc['K']}, requested N={dims.N}, K={dims.K}")
    if order_j is not None and doc["J"] != order_j:
        raise CoefficientFileError(f"{path}: file has J={doc['J']}, requested J={order_j}")
    coeffs = TpeCoefficients(tuple(doc["w"]), origin=doc["origin"], alpha=doc.get("alpha"), source=str(path))
    return coeffs, doc
