"""Offline fitting of TPE coefficients.

The matching loss between the exact filter and the TPE filter,

    L(w) = mean_m || W_target^(m) - sum_l w_l G_m^l H_m^T ||_F^2,

is a convex quadratic in ``w``.  With ``G = U diag(lam) U^T`` every term
reduces to the eigenvalues of ``G``::

    || W_target - W_TPE ||_F^2 = sum_i lam_i (p(lam_i) - t(lam_i))^2

where ``p`` is the TPE polynomial and ``t(lam) = 1 / (lam + mu)`` (``mu = 0``
for the ZF target).  Training and the closed-form fit work on these spectra;
:func:`loss` keeps the dense matrix definition as the reference.
"""

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import detect
from .detect import TpeCoefficients
from .model import ChannelSample, SystemDims, sample_channel
from .rng import substream

DATASET_TAG = "dataset"
SHUFFLE_TAG = "shuffle"
FIT_RCOND_MIN = 1e-14


class TrainingDivergedError(ArithmeticError):
    def __init__(self, epoch: int, value: float):
        super().__init__(f"loss became non-finite ({value}) at epoch {epoch}")
        self.epoch = epoch


class IllPosedFitError(ArithmeticError):
    """Normal equations of the closed-form fit are numerically singular."""


@dataclass(frozen=True)
class AdamHyper:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


@dataclass(frozen=True)
class TrainingConfig:
    """Training setup.  Defaults follow the published training table.

    ``decay_epochs`` is the length, in epochs, of one learning-rate decay
    period: the rate during epoch ``e`` is ``lr0 * decay ** (e // decay_epochs)``.
    ``target_mu`` switches the target from ZF to MMSE with that fixed
    regularizer.
    """

    N: int = 128
    K: int = 16
    order_j: int = 4
    dataset_size: int = 10_000
    batch_size: int = 200
    epochs: int = 2_000
    lr0: float = 1e-3
    decay: float = 0.9
    decay_epochs: int = 1
    adam: AdamHyper = field(default_factory=AdamHyper)
    master_seed: int = 0
    target_mu: float = 0.0

    def __post_init__(self):
        if isinstance(self.adam, dict):
            object.__setattr__(self, "adam", AdamHyper(**self.adam))
        SystemDims(self.N, self.K)
        checks = [
            (self.order_j >= 1, "order_j must be >= 1"),
            (self.order_j <= detect.MAX_ORDER, f"order_j must be <= {detect.MAX_ORDER}"),
            (self.dataset_size >= 1, "dataset_size must be >= 1"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.epochs >= 1, "epochs must be >= 1"),
            (self.lr0 > 0, "lr0 must be positive"),
            (0 < self.decay <= 1, "decay must lie in (0, 1]"),
            (self.decay_epochs >= 1, "decay_epochs must be >= 1"),
            (self.master_seed >= 0, "master_seed must be non-negative"),
            (self.target_mu >= 0, "target_mu must be non-negative"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)

    @property
    def dims(self) -> SystemDims:
        return SystemDims(self.N, self.K)

    def to_dict(self) -> dict:
        return asdict(self)


def dataset_sample(dims: SystemDims, master_seed: int, index: int) -> ChannelSample:
    """Channel ``index`` of the training set for ``master_seed``."""
    rng = substream(master_seed, DATASET_TAG, index)
    return sample_channel(dims, rng, seed_tag=(master_seed, DATASET_TAG, index))


def _spectra_chunk(args):
    dims, seed, start, stop = args
    out = np.empty((stop - start, 2 * dims.K))
    for row, i in enumerate(range(start, stop)):
        out[row] = np.linalg.eigvalsh(detect.gram(dataset_sample(dims, seed, i)))
    return out


class Dataset:
    """Training channels, regenerated on demand from ``(master_seed, index)``.

    Only the Gram spectra are held in memory; :meth:`__getitem__` rebuilds
    the full :class:`ChannelSample`.
    """

    def __init__(self, dims: SystemDims, master_seed: int, indices, eigenvalues, zf_targets=None):
        self.dims = dims
        self.master_seed = master_seed
        self.indices = np.asarray(indices, dtype=np.int64)
        self.eigenvalues = np.asarray(eigenvalues, dtype=float)
        self.zf_targets = zf_targets

    def __len__(self):
        return len(self.indices)

    def __getitem__(self, pos) -> ChannelSample:
        return dataset_sample(self.dims, self.master_seed, int(self.indices[pos]))

    def __iter__(self):
        return (self[p] for p in range(len(self)))

    def subset(self, positions) -> "Dataset":
        positions = np.asarray(positions, dtype=np.int64)
        targets = None if self.zf_targets is None else [self.zf_targets[p] for p in positions]
        return Dataset(self.dims, self.master_seed, self.indices[positions], self.eigenvalues[positions], targets)


def generate_dataset(config: TrainingConfig, workers: int = 1, cache_targets: bool = False) -> Dataset:
    """Draw ``config.dataset_size`` channels and their Gram spectra.

    Results do not depend on ``workers``: each sample has its own substream.
    """
    dims, M = config.dims, config.dataset_size
    if workers <= 1 or M < 64:
        eig = _spectra_chunk((dims, config.master_seed, 0, M))
    else:
        edges = np.linspace(0, M, workers * 4 + 1).astype(int)
        jobs = [(dims, config.master_seed, int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            eig = np.concatenate(list(pool.map(_spectra_chunk, jobs)))
    targets = None
    if cache_targets:
        targets = [detect.zf_matrix(dataset_sample(dims, config.master_seed, i)) for i in range(M)]
    return Dataset(dims, config.master_seed, np.arange(M), eig, targets)


def _target_matrix(sample: ChannelSample, mu: float) -> np.ndarray:
    return detect.mmse_matrix(sample, mu) if mu > 0 else detect.zf_matrix(sample)


def loss(theta: TpeCoefficients, batch, mu: float = 0.0) -> float:
    """Mean squared Frobenius distance between the target filter and ``W_TPE``.

    Dense reference path: materializes both matrices for every sample.
    """
    total, count = 0.0, 0
    for sample in batch:
        diff = _target_matrix(sample, mu) - detect.tpe_matrix(sample, theta)
        total += float(np.sum(diff * diff))
        count += 1
    if count == 0:
        raise ValueError("empty batch")
    return total / count


def _spectra(batch) -> np.ndarray:
    if isinstance(batch, Dataset):
        return batch.eigenvalues
    return np.array([np.linalg.eigvalsh(detect.gram(s)) for s in batch])


def _powers(lam: np.ndarray, order_j: int) -> np.ndarray:
    return lam[..., None] ** np.arange(order_j)


def _residual(w, lam, mu):
    return _powers(lam, len(w)) @ w - 1.0 / (lam + mu)


def spectral_loss(w, lam: np.ndarray, mu: float = 0.0) -> float:
    """Loss from Gram spectra ``lam`` of shape ``(M, 2K)``."""
    r = _residual(np.asarray(w, dtype=float), lam, mu)
    return float(np.mean(np.sum(lam * r * r, axis=1)))


def spectral_grad(w, lam: np.ndarray, mu: float = 0.0) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    P = _powers(lam, len(w))
    r = P @ w - 1.0 / (lam + mu)
    return 2.0 * np.einsum("mi,mik->k", lam * r, P) / lam.shape[0]


def grad(theta: TpeCoefficients, batch, mu: float = 0.0) -> np.ndarray:
    """Gradient of :func:`loss` with respect to ``w``.

    ``dL/dw_k = (2/|batch|) sum_m <G^k H^T, W_TPE - W_target>_F``, evaluated
    on the Gram spectra.
    """
    return spectral_grad(theta.as_array(), _spectra(batch), mu)


def normal_equations(lam: np.ndarray, order_j: int, mu: float = 0.0):
    """``B_kl = sum <A_k, A_l>`` and ``c_k = sum <A_k, W_target>`` with ``A_k = G^k H^T``."""
    P = _powers(lam, order_j)
    B = np.einsum("mik,mi,mil->kl", P, lam, P)
    c = np.einsum("mik,mi->k", P, lam / (lam + mu))
    return B, c


def closed_form_fit(dataset, order_j: int, mu: float = 0.0) -> TpeCoefficients:
    """Exact minimizer of the dataset loss via the normal equations.

    Raises :class:`IllPosedFitError` when the reciprocal condition number of
    ``B`` drops below ``1e-14``.
    """
    lam = _spectra(dataset)
    B, c = normal_equations(lam, order_j, mu)
    rcond = 1.0 / np.linalg.cond(B)
    if not rcond >= FIT_RCOND_MIN:
        raise IllPosedFitError(
            f"normal equations are ill-conditioned (rcond={rcond:.3g}); try a smaller J than {order_j}")
    w = np.linalg.solve(B, c)
    # one refinement step with the residual-form gradient
    w = w + np.linalg.solve(B, -0.5 * lam.shape[0] * spectral_grad(w, lam, mu))
    return TpeCoefficients(tuple(w), origin="closed_form")


@dataclass(frozen=True)
class OptimizerState:
    m1: np.ndarray
    m2: np.ndarray
    step_count: int = 0
    lr_current: float = 1e-3

    @classmethod
    def zeros(cls, order_j: int, lr: float):
        return cls(np.zeros(order_j), np.zeros(order_j), 0, lr)


def adam_step(state: OptimizerState, theta, gradient, hyper: AdamHyper = AdamHyper()):
    """One bias-corrected Adam update at ``state.lr_current``."""
    g = np.asarray(gradient, dtype=float)
    t = state.step_count + 1
    m1 = hyper.beta1 * state.m1 + (1 - hyper.beta1) * g
    m2 = hyper.beta2 * state.m2 + (1 - hyper.beta2) * g * g
    m_hat = m1 / (1 - hyper.beta1 ** t)
    v_hat = m2 / (1 - hyper.beta2 ** t)
    new_theta = np.asarray(theta, dtype=float) - state.lr_current * m_hat / (np.sqrt(v_hat) + hyper.epsilon)
    return OptimizerState(m1, m2, t, state.lr_current), new_theta


def lr_schedule(lr0: float, epoch: int, decay: float, decay_epochs: int = 1) -> float:
    """``lr0 * decay ** (epoch // decay_epochs)``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return lr0 * decay ** (epoch // decay_epochs)


@dataclass
class LossHistory:
    epochs: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    losses: list = field(default_factory=list)

    def append(self, epoch, lr, mean_loss):
        if self.epochs and epoch <= self.epochs[-1]:
            raise ValueError("epochs must be strictly increasing")
        self.epochs.append(int(epoch))
        self.lrs.append(float(lr))
        self.losses.append(float(mean_loss))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "lr", "mean_loss"])
            for row in zip(self.epochs, self.lrs, self.losses):
                w.writerow([row[0], repr(row[1]), repr(row[2])])

    @classmethod
    def read_csv(cls, path):
        hist = cls()
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                hist.append(int(rec["epoch"]), float(rec["lr"]), float(rec["mean_loss"]))
        return hist


def initial_coefficients(config: TrainingConfig) -> TpeCoefficients:
    return detect.coeffs_from_alpha(detect.alpha_constant(config.dims), config.order_j)


def train(config: TrainingConfig, dataset: Optional[Dataset] = None, workers: int = 1, progress=None):
    """Fit TPE coefficients with mini-batch Adam.

    Starts from the constant-factor coefficients, reshuffles every epoch
    from the master seed, and records the full-dataset loss after each
    epoch.  Returns ``(TpeCoefficients, LossHistory)``.
    """
    if dataset is None:
        dataset = generate_dataset(config, workers=workers)
    lam = dataset.eigenvalues
    M, J, mu = len(dataset), config.order_j, config.target_mu
    P = _powers(lam, J)
    target = 1.0 / (lam + mu)
    theta = initial_coefficients(config).as_array()
    state = OptimizerState.zeros(J, config.lr0)
    history = LossHistory()
    for epoch in range(config.epochs):
        lr = lr_schedule(config.lr0, epoch, config.decay, config.decay_epochs)
        state = OptimizerState(state.m1, state.m2, state.step_count, lr)
        perm = substream(config.master_seed, SHUFFLE_TAG, epoch).permutation(M)
        for start in range(0, M, config.batch_size):
            idx = perm[start:start + config.batch_size]
            Pb, lb = P[idx], lam[idx]
            r = Pb @ theta - target[idx]
            g = 2.0 * np.einsum("mi,mik->k", lb * r, Pb) / len(idx)
            state, theta = adam_step(state, theta, g, config.adam)
        r = P @ theta - target
        epoch_loss = float(np.mean(np.sum(lam * r * r, axis=1)))
        if not math.isfinite(epoch_loss):
            raise TrainingDivergedError(epoch, epoch_loss)
        history.append(epoch, lr, epoch_loss)
        if progress is not None:
            progress(epoch, lr, epoch_loss)
    return TpeCoefficients(tuple(theta), origin="learned"), history


def save_checkpoint(path, theta: TpeCoefficients, config: TrainingConfig, loss_final: Optional[float] = None):
    detect.write_coefficients(
        path, theta, config.dims,
        train_seed=config.master_seed, loss_final=loss_final, training=config.to_dict())


def load_checkpoint(path, dims: Optional[SystemDims] = None, order_j: Optional[int] = None) -> TpeCoefficients:
    coeffs, _ = detect.read_coefficients(path, dims, order_j)
    return coeffs
