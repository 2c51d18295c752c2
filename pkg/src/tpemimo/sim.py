"""Monte-Carlo bit-error-rate sweeps.

A trial is one channel realization carrying ``vectors_per_trial`` uncoded
payload vectors.  All detectors in a sweep see the same trials (same
channel, bits and noise), so differences between curves come from the
detectors and not from sampling.  Trial ``t`` at SNR index ``s`` draws from
the substream ``(master_seed, "trial", s, t)``.
"""

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import detect
from .detect import TpeCoefficients
from .model import Constellation, NoiseSpec, SystemDims, demodulate, modulate, realvec, sample_channel, transmit
from .rng import substream

CSV_HEADER = ["detector", "J", "snr_db", "bits", "errors", "ber", "censored"]
TPE_SOURCES = ("alpha_opt", "alpha_constant", "alpha_power", "learned", "closed_form", "fixed")
MAX_RESAMPLES = 16


@dataclass(frozen=True)
class DetectorSpec:
    """``kind`` is ``zf``, ``mmse`` or ``tpe``; TPE detectors also need
    ``source`` (one of :data:`TPE_SOURCES`) and ``order_j``.  Fixed-coefficient
    sources carry ``coeffs``."""

    kind: str
    source: Optional[str] = None
    order_j: Optional[int] = None
    coeffs: Optional[TpeCoefficients] = None
    checkpoint: Optional[str] = None

    def __post_init__(self):
        if self.kind not in ("zf", "mmse", "tpe"):
            raise ValueError(f"unknown detector kind {self.kind!r}")
        if self.kind != "tpe":
            return
        if self.source not in TPE_SOURCES:
            raise ValueError(f"TPE source must be one of {TPE_SOURCES}, got {self.source!r}")
        if self.order_j is None or self.order_j < 1:
            raise ValueError("TPE detectors need order_j >= 1")
        if self.source in ("learned", "closed_form", "fixed"):
            if self.coeffs is None:
                raise ValueError(f"TPE source {self.source!r} needs coefficients")
            if self.coeffs.order_j != self.order_j:
                raise ValueError(f"coefficients have J={self.coeffs.order_j}, detector entry says J={self.order_j}")

    @property
    def label(self) -> str:
        return self.kind if self.kind != "tpe" else f"tpe_{self.source}"

    @property
    def key(self) -> str:
        return self.label if self.kind != "tpe" else f"{self.label}_J{self.order_j}"


@dataclass(frozen=True)
class SweepConfig:
    N: int
    K: int
    detectors: tuple
    snr_grid_db: tuple = tuple(range(0, 25, 2))
    qam_order: int = 16
    symbol_energy: float = 1.0
    min_bits: int = 10 ** 6
    min_errors: int = 100
    max_bits: int = 10 ** 8
    vectors_per_trial: int = 64
    trials_per_round: int = 32
    power_iterations: int = 20
    master_seed: int = 0

    def __post_init__(self):
        SystemDims(self.N, self.K)
        object.__setattr__(self, "detectors", tuple(self.detectors))
        object.__setattr__(self, "snr_grid_db", tuple(float(s) for s in self.snr_grid_db))
        if not self.detectors:
            raise ValueError("detector list is empty")
        keys = [d.key for d in self.detectors]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate detector entries")
        if not self.snr_grid_db:
            raise ValueError("SNR grid is empty")
        if any(b <= a for a, b in zip(self.snr_grid_db, self.snr_grid_db[1:])):
            raise ValueError("SNR grid must be strictly increasing")
        if self.min_bits < 1 or self.min_errors < 0 or self.max_bits < self.min_bits:
            raise ValueError("need 1 <= min_bits <= max_bits and min_errors >= 0")
        if self.vectors_per_trial < 1 or self.trials_per_round < 1 or self.power_iterations < 1:
            raise ValueError("vectors_per_trial, trials_per_round and power_iterations must be >= 1")
        Constellation(self.qam_order, self.symbol_energy)

    @property
    def dims(self) -> SystemDims:
        return SystemDims(self.N, self.K)

    @property
    def constellation(self) -> Constellation:
        return Constellation(self.qam_order, self.symbol_energy)

    @property
    def bits_per_trial(self) -> int:
        return self.K * self.constellation.bits_per_symbol * self.vectors_per_trial


@dataclass(frozen=True)
class BerPoint:
    snr_db: float
    bits_sent: int
    bit_errors: int
    censored: bool = False

    @property
    def ber(self) -> float:
        return self.bit_errors / self.bits_sent

    @property
    def std_error(self) -> float:
        p = self.ber
        return math.sqrt(p * (1 - p) / self.bits_sent)


@dataclass
class BerCurve:
    detector: str
    order_j: Optional[int]
    points: list = field(default_factory=list)

    @property
    def key(self) -> str:
        return self.detector if self.order_j is None else f"{self.detector}_J{self.order_j}"

    def snr(self):
        return np.array([p.snr_db for p in self.points])

    def ber(self):
        return np.array([p.ber for p in self.points])


def _estimate(spec: DetectorSpec, sample, y, noise: NoiseSpec, cache: dict, rng_power):
    if spec.kind == "zf":
        if "zf" not in cache:
            cache["zf"] = detect.zf_matrix(sample)
        return cache["zf"] @ y
    if spec.kind == "mmse":
        return detect.mmse_matrix(sample, noise.mu) @ y
    if spec.source == "alpha_opt":
        if "alpha_opt" not in cache:
            cache["alpha_opt"] = detect.alpha_opt(sample)
        coeffs = detect.coeffs_from_alpha(cache["alpha_opt"], spec.order_j)
    elif spec.source == "alpha_constant":
        coeffs = detect.coeffs_from_alpha(detect.alpha_constant(sample.dims), spec.order_j)
    elif spec.source == "alpha_power":
        if "alpha_power" not in cache:
            cache["alpha_power"] = detect.alpha_power(sample, cache["power_iterations"], rng_power)
        coeffs = detect.coeffs_from_alpha(cache["alpha_power"], spec.order_j)
    else:
        coeffs = spec.coeffs
    return detect.tpe_detect(sample, y, coeffs)


def ber_trial(config: SweepConfig, snr_index: int, trial_index: int, detectors=None):
    """Run one trial and return ``({detector key: (bits, errors)}, resamples)``.

    Degenerate channels are redrawn from a fresh attempt substream.
    """
    detectors = config.detectors if detectors is None else detectors
    dims, const = config.dims, config.constellation
    noise = NoiseSpec.from_snr_db(config.snr_grid_db[snr_index], config.symbol_energy)
    for attempt in range(MAX_RESAMPLES):
        rng = substream(config.master_seed, "trial", snr_index, trial_index, attempt)
        sample = sample_channel(dims, rng, seed_tag=(config.master_seed, "trial", snr_index, trial_index, attempt))
        bits = rng.integers(0, 2, size=(dims.K * const.bits_per_symbol, config.vectors_per_trial))
        x = realvec(modulate(bits, const, dims.K))
        y = transmit(sample, x, noise, rng)
        cache = {"power_iterations": config.power_iterations}
        rng_power = substream(config.master_seed, "power", snr_index, trial_index, attempt)
        try:
            out = {}
            for spec in detectors:
                xhat = _estimate(spec, sample, y, noise, cache, rng_power)
                errors = int(np.count_nonzero(demodulate(xhat, const) != bits))
                out[spec.key] = (int(bits.size), errors)
            return out, attempt
        except detect.DegenerateChannelError:
            continue
    raise detect.DegenerateChannelError(f"{MAX_RESAMPLES} consecutive degenerate channels")


def _run_trials(args):
    config, snr_index, trials = args
    totals = {d.key: [0, 0] for d in config.detectors}
    resamples = 0
    for t in trials:
        out, extra = ber_trial(config, snr_index, t)
        resamples += extra
        for key, (b, e) in out.items():
            totals[key][0] += b
            totals[key][1] += e
    return totals, resamples


def ber_sweep(config: SweepConfig, workers: int = 1, progress=None):
    """Accumulate trials per SNR point until every detector has ``min_bits``
    bits and ``min_errors`` errors, or ``max_bits`` is reached.

    Trials are scheduled in rounds of ``trials_per_round`` so the stopping
    point, and hence every tally, is independent of ``workers``.  Returns
    ``(curves, diagnostics)``.
    """
    curves = {d.key: BerCurve(d.label, d.order_j if d.kind == "tpe" else None) for d in config.detectors}
    diagnostics = {"resampled_channels": 0, "trials": []}
    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for s, snr in enumerate(config.snr_grid_db):
            totals = {d.key: [0, 0] for d in config.detectors}
            next_trial = 0
            while True:
                done = all(b >= config.min_bits and e >= config.min_errors for b, e in totals.values())
                capped = all(b >= config.max_bits for b, _ in totals.values())
                if done or capped:
                    break
                trials = list(range(next_trial, next_trial + config.trials_per_round))
                next_trial += config.trials_per_round
                if pool is None:
                    parts = [_run_trials((config, s, trials))]
                else:
                    chunks = [c.tolist() for c in np.array_split(trials, workers) if len(c)]
                    parts = list(pool.map(_run_trials, [(config, s, c) for c in chunks]))
                for part, resamples in parts:
                    diagnostics["resampled_channels"] += resamples
                    for key, (b, e) in part.items():
                        totals[key][0] += b
                        totals[key][1] += e
            diagnostics["trials"].append(next_trial)
            for key, (b, e) in totals.items():
                curves[key].points.append(BerPoint(snr, b, e, censored=e < config.min_errors))
            if progress is not None:
                progress(snr, totals)
    finally:
        if pool is not None:
            pool.shutdown()
    return [curves[d.key] for d in config.detectors], diagnostics


def export_csv(curves, path):
    """Write curves as ``detector,J,snr_db,bits,errors,ber,censored`` rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for curve in curves:
            for p in curve.points:
                w.writerow([curve.detector, "" if curve.order_j is None else curve.order_j,
                            repr(float(p.snr_db)), p.bits_sent, p.bit_errors, repr(p.ber), int(p.censored)])


def read_csv(path):
    curves = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        for det, j, snr, bits, errors, _ber, cens in reader:
            order_j = int(j) if j else None
            key = (det, order_j)
            if key not in curves:
                curves[key] = BerCurve(det, order_j)
            curves[key].points.append(BerPoint(float(snr), int(bits), int(errors), bool(int(cens))))
    return list(curves.values())


def snr_at_ber(curve: BerCurve, target: float = 1e-3) -> Optional[float]:
    """First SNR where the curve falls to ``target``, interpolating log10(BER) linearly.

    Returns ``None`` if the curve never reaches ``target`` (or starts below it).
    """
    snr, ber = curve.snr(), curve.ber()
    for i in range(1, len(snr)):
        hi, lo = ber[i - 1], ber[i]
        if hi >= target > lo or (hi > target >= lo):
            if lo <= 0:
                return float(snr[i])
            a, b = math.log10(hi), math.log10(lo)
            return float(snr[i - 1] + (math.log10(target) - a) / (b - a) * (snr[i] - snr[i - 1]))
    return None


def summary(curves, scenario: str, target: float = 1e-3) -> list:
    """Per-detector SNR at ``target`` BER and the gap to the ZF curve (dB)."""
    ref = next((c for c in curves if c.detector == "zf"), None)
    ref_snr = None if ref is None else snr_at_ber(ref, target)
    rows = []
    for c in curves:
        at = snr_at_ber(c, target)
        gap = None if at is None or ref_snr is None else at - ref_snr
        rows.append({"scenario": scenario, "detector": c.key, "snr_at_ber_1e-3": at, "gap_to_zf_db": gap})
    return rows
