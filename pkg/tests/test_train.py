import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tpemimo import detect, train
from tpemimo.detect import TpeCoefficients
from tpemimo.model import ChannelSample, SystemDims, sample_channel
from tpemimo.rng import substream
from tpemimo.train import AdamHyper, OptimizerState, TrainingConfig


def small_config(**kw):
    base = dict(N=8, K=2, order_j=3, dataset_size=20, batch_size=5, epochs=5)
    base.update(kw)
    return TrainingConfig(**base)


def dense_loss(w, samples):
    """Independent reference: explicit inverse and explicit matrix powers."""
    total = 0.0
    for s in samples:
        H = s.h_real
        G = H.T @ H
        zf = np.linalg.inv(G) @ H.T
        tpe = sum(wl * np.linalg.matrix_power(G, l) @ H.T for l, wl in enumerate(w))
        total += np.sum((zf - tpe) ** 2)
    return total / len(samples)


# -- config / schedule --------------------------------------------------------

def test_config_defaults_follow_training_table():
    c = TrainingConfig()
    assert (c.dataset_size, c.batch_size, c.epochs, c.lr0, c.decay) == (10_000, 200, 2_000, 1e-3, 0.9)
    assert c.adam == AdamHyper(0.9, 0.999, 1e-8)


@pytest.mark.parametrize("kw", [dict(order_j=0), dict(epochs=0), dict(decay=0.0), dict(decay=1.5),
                                dict(batch_size=0), dict(N=2, K=4), dict(order_j=65)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        small_config(**kw)


def test_lr_schedule():
    assert train.lr_schedule(0.001, 0, 0.9) == 0.001
    assert train.lr_schedule(0.001, 1, 0.9) == pytest.approx(0.0009, rel=1e-12)
    assert train.lr_schedule(0.001, 5, 0.9) == pytest.approx(5.9049e-4, rel=1e-12)
    for t in range(0, 2000, 37):
        assert train.lr_schedule(0.001, t, 0.9) == pytest.approx(0.001 * 0.9 ** t, rel=1e-12)
    assert train.lr_schedule(0.001, 250, 0.9, decay_epochs=100) == pytest.approx(0.001 * 0.81)
    with pytest.raises(ValueError):
        train.lr_schedule(0.001, -1, 0.9)


# -- dataset ------------------------------------------------------------------

def test_dataset_single_sample_matches_substream():
    cfg = small_config(dataset_size=1, master_seed=4)
    ds = train.generate_dataset(cfg)
    ref = sample_channel(SystemDims(8, 2), substream(4, train.DATASET_TAG, 0))
    np.testing.assert_array_equal(ds[0].h_complex, ref.h_complex)


def test_dataset_independent_of_workers():
    cfg = small_config(dataset_size=200, master_seed=9)
    a = train.generate_dataset(cfg, workers=1)
    b = train.generate_dataset(cfg, workers=3)
    assert a.eigenvalues.tobytes() == b.eigenvalues.tobytes()
    assert a[150].h_complex.tobytes() == b[150].h_complex.tobytes()


def test_dataset_cached_targets_audit():
    cfg = small_config(N=16, K=4, dataset_size=30)
    ds = train.generate_dataset(cfg, cache_targets=True)
    for i in np.random.default_rng(0).choice(30, 10, replace=False):
        np.testing.assert_allclose(ds.zf_targets[i], detect.zf_matrix(ds[i]), atol=1e-10)
    sub = ds.subset([3, 5])
    assert len(sub) == 2 and sub[1].seed_tag == ds[5].seed_tag


# -- loss and gradient --------------------------------------------------------

def test_loss_zero_theta():
    ds = train.generate_dataset(small_config())
    samples = list(ds)
    ref = np.mean([np.sum(detect.zf_matrix(s) ** 2) for s in samples])
    assert train.loss(TpeCoefficients((0.0, 0.0, 0.0)), samples) == pytest.approx(ref, rel=1e-12)


def test_loss_matches_independent_dense_reference():
    ds = train.generate_dataset(small_config(N=12, K=3))
    w = (1.2, -0.4, 0.05)
    samples = list(ds)
    ref = dense_loss(w, samples)
    assert train.loss(TpeCoefficients(w), samples) == pytest.approx(ref, rel=1e-9)
    assert train.spectral_loss(w, ds.eigenvalues) == pytest.approx(ref, rel=1e-9)


def test_loss_with_alpha_opt_equals_neumann_oracle():
    s = sample_channel(SystemDims(16, 4), substream(1, "x", 0))
    a = detect.alpha_opt(s)
    J = 5
    W_neu = detect.neumann_partial_sum(detect.gram(s), a, J) @ s.h_real.T
    ref = np.sum((detect.zf_matrix(s) - W_neu) ** 2)
    assert train.loss(detect.coeffs_from_alpha(a, J), [s]) == pytest.approx(ref, rel=1e-9)


def test_loss_is_twice_complex_domain_loss():
    s = sample_channel(SystemDims(10, 3), substream(2, "x", 0))
    w = (0.9, -0.2)
    hc = s.h_complex
    Gc = hc.conj().T @ hc
    zf_c = np.linalg.inv(Gc) @ hc.conj().T
    tpe_c = w[0] * hc.conj().T + w[1] * Gc @ hc.conj().T
    assert train.loss(TpeCoefficients(w), [s]) == pytest.approx(2 * np.sum(np.abs(zf_c - tpe_c) ** 2), rel=1e-10)


def test_mmse_target_loss():
    s = sample_channel(SystemDims(10, 3), substream(2, "x", 1))
    w = (0.9, -0.2, 0.01)
    ref = np.sum((detect.mmse_matrix(s, 0.3) - detect.tpe_matrix(s, TpeCoefficients(w))) ** 2)
    assert train.loss(TpeCoefficients(w), [s], mu=0.3) == pytest.approx(ref, rel=1e-10)
    lam = np.linalg.eigvalsh(detect.gram(s))[None]
    assert train.spectral_loss(w, lam, 0.3) == pytest.approx(ref, rel=1e-10)


def central_difference(w, samples, h=1e-6):
    g = np.zeros(len(w))
    for k in range(len(w)):
        up, dn = np.array(w, float), np.array(w, float)
        up[k] += h
        dn[k] -= h
        g[k] = (train.loss(TpeCoefficients(up), samples) - train.loss(TpeCoefficients(dn), samples)) / (2 * h)
    return g


def test_grad_matches_finite_differences():
    for i in range(5):
        rng = substream(17, "gradcheck", i)
        J = int(rng.integers(1, 5))
        samples = [sample_channel(SystemDims(8, 2), rng) for _ in range(int(rng.integers(1, 4)))]
        w = rng.normal(0, 1, J)
        g = train.grad(TpeCoefficients(w), samples)
        np.testing.assert_allclose(g, central_difference(w, samples), rtol=1e-6)


def test_grad_orthonormal_j1():
    rng = np.random.default_rng(0)
    q, _ = np.linalg.qr(rng.standard_normal((6, 2)) + 1j * rng.standard_normal((6, 2)))
    s = ChannelSample.from_complex(q)
    norm2 = np.sum(s.h_real ** 2)
    for w0 in (0.3, 1.0, 1.7):
        g = train.grad(TpeCoefficients((w0,)), [s])
        assert g[0] == pytest.approx(-2 * (1 - w0) * norm2, abs=1e-12)
    assert train.grad(TpeCoefficients((1.0,)), [s])[0] == pytest.approx(0.0, abs=1e-12)


def test_grad_vanishes_at_fit():
    ds = train.generate_dataset(small_config(N=32, K=8, order_j=4, dataset_size=50))
    fit = train.closed_form_fit(ds, 4)
    g = train.grad(fit, ds)
    scale = np.max(np.abs(train.grad(TpeCoefficients((0.0,) * 4), ds)))
    assert np.max(np.abs(g)) <= 1e-9 * scale


# -- closed-form fit ----------------------------------------------------------

def test_fit_j1_scalar_least_squares():
    s = sample_channel(SystemDims(8, 2), substream(0, "x", 3))
    A0, W = s.h_real.T, detect.zf_matrix(s)
    expect = np.sum(A0 * W) / np.sum(A0 * A0)
    ds = train.Dataset(SystemDims(8, 2), 0, [0], np.linalg.eigvalsh(detect.gram(s))[None])
    assert train.closed_form_fit(ds, 1).w[0] == pytest.approx(expect, rel=1e-12)


def test_fit_cayley_hamilton_exact():
    # the real Gram matrix of a K-user channel has K distinct eigenvalues,
    # so K terms reproduce its inverse exactly
    cfg = small_config(N=4, K=2, order_j=2, dataset_size=1)
    ds = train.generate_dataset(cfg)
    fit = train.closed_form_fit(ds, 2)
    assert train.loss(fit, list(ds)) <= 1e-18


def test_fit_rejects_singular_normal_equations():
    ds = train.generate_dataset(small_config(N=4, K=2, dataset_size=1))
    with pytest.raises(train.IllPosedFitError, match="smaller J"):
        train.closed_form_fit(ds, 4)  # J = 2K exceeds the K distinct eigenvalues


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), J=st.integers(1, 3), M=st.integers(1, 20))
def test_fit_beats_any_fixed_alpha(seed, J, M):
    ds = train.generate_dataset(small_config(N=12, K=3, dataset_size=M, master_seed=seed))
    lam = ds.eigenvalues
    best = train.spectral_loss(train.closed_form_fit(ds, J).w, lam)
    for row in lam[:3]:
        a = 2 / (row[0] + row[-1])
        assert best <= train.spectral_loss(detect.coeffs_from_alpha(a, J).w, lam) * (1 + 1e-10)
    a = detect.alpha_constant(ds.dims)
    assert best <= train.spectral_loss(detect.coeffs_from_alpha(a, J).w, lam) * (1 + 1e-10)
    # perturbing the fit never helps
    rng = np.random.default_rng(seed)
    w = train.closed_form_fit(ds, J).as_array()
    assert best <= train.spectral_loss(w + 1e-3 * rng.standard_normal(J), lam)


# -- Adam ---------------------------------------------------------------------

def test_adam_zero_gradient():
    state, theta = train.adam_step(OptimizerState.zeros(2, 1e-3), np.array([1.0, 2.0]), np.zeros(2))
    np.testing.assert_array_equal(theta, [1.0, 2.0])
    assert state.step_count == 1
    # with history, moments decay toward zero
    state = OptimizerState(np.array([0.5, -0.2]), np.array([0.1, 0.3]), 3, 1e-3)
    new, _ = train.adam_step(state, np.array([1.0, 2.0]), np.zeros(2))
    np.testing.assert_allclose(new.m1, 0.9 * state.m1)
    np.testing.assert_allclose(new.m2, 0.999 * state.m2)
    assert new.step_count == 4


def test_adam_constant_gradient_step_size():
    state = OptimizerState.zeros(3, 1e-3)
    theta = np.zeros(3)
    g = np.array([2.0, -0.01, 300.0])
    for _ in range(2000):
        prev = theta
        state, theta = train.adam_step(state, theta, g)
    np.testing.assert_allclose(prev - theta, 1e-3 * np.sign(g), rtol=1e-4)
    assert state.step_count == 2000


def test_adam_first_step():
    # bias correction makes the first step exactly lr * sign(g) (up to epsilon)
    state, theta = train.adam_step(OptimizerState.zeros(2, 0.01), np.zeros(2), np.array([4.0, -1.0]))
    np.testing.assert_allclose(theta, [-0.01, 0.01], rtol=1e-7)


# -- training -----------------------------------------------------------------

def test_train_starts_from_constant_alpha():
    cfg = small_config(epochs=1, lr0=1e-12)
    theta, hist = train.train(cfg)
    init = detect.coeffs_from_alpha(detect.alpha_constant(cfg.dims), cfg.order_j)
    np.testing.assert_allclose(theta.w, init.w, atol=1e-9)
    assert hist.epochs == [0]


def test_train_deterministic(tmp_path):
    cfg = small_config(epochs=20, master_seed=3)
    a, ha = train.train(cfg)
    b, hb = train.train(cfg)
    assert a == b and ha.losses == hb.losses
    train.save_checkpoint(tmp_path / "a.json", a, cfg, ha.losses[-1])
    train.save_checkpoint(tmp_path / "b.json", b, cfg, hb.losses[-1])
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_train_history_records_schedule(tmp_path):
    cfg = small_config(epochs=12)
    _, hist = train.train(cfg)
    assert hist.epochs == list(range(12))
    for e, lr in zip(hist.epochs, hist.lrs):
        assert lr == pytest.approx(cfg.lr0 * cfg.decay ** e, rel=1e-12)
    assert all(l >= 0 for l in hist.losses)
    p = tmp_path / "h.csv"
    hist.write_csv(p)
    assert p.read_text().splitlines()[0] == "epoch,lr,mean_loss"
    back = train.LossHistory.read_csv(p)
    assert back.losses == hist.losses and back.lrs == hist.lrs


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_reports_epoch():
    cfg = small_config(lr0=1e200, epochs=5)
    with pytest.raises(train.TrainingDivergedError) as info:
        train.train(cfg)
    assert info.value.epoch == 0


def test_train_loss_trend():
    cfg = TrainingConfig(N=32, K=8, order_j=4, dataset_size=1000, epochs=200, lr0=0.02, decay=0.9, decay_epochs=20)
    _, hist = train.train(cfg)
    losses = np.array(hist.losses[10:])
    upticks = losses[1:] > losses[:-1] * 1.05
    assert not upticks.any()
    assert losses[-1] < losses[0]


def test_adam_reaches_closed_form_with_tuned_schedule():
    # optimizer correctness on the convex objective, with a step size large
    # enough to cross the distance from the constant-alpha initialization
    cfg = TrainingConfig(N=32, K=8, order_j=4, dataset_size=1000, lr0=0.1, decay=0.7, decay_epochs=200)
    ds = train.generate_dataset(cfg)
    fit = train.closed_form_fit(ds, 4)
    theta, hist = train.train(cfg, ds)
    l_fit = train.spectral_loss(fit.w, ds.eigenvalues)
    assert (hist.losses[-1] - l_fit) / l_fit <= 1e-3
    assert np.linalg.norm(theta.as_array() - fit.as_array()) / np.linalg.norm(fit.as_array()) <= 1e-2


def test_training_touches_no_modulation_state():
    names = {f for f in TrainingConfig.__dataclass_fields__}
    assert not names & {"qam_order", "symbol_energy", "snr_db", "n0"}


# -- checkpoints --------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    cfg = small_config()
    theta = TpeCoefficients((1.5, -0.7, 0.1), origin="learned")
    p = tmp_path / "ck.json"
    train.save_checkpoint(p, theta, cfg, loss_final=0.125)
    assert train.load_checkpoint(p) == theta
    _, doc = detect.read_coefficients(p)
    assert doc["training"]["adam"] == {"beta1": 0.9, "beta2": 0.999, "epsilon": 1e-8}
    assert doc["train_seed"] == cfg.master_seed
    with pytest.raises(detect.CoefficientFileError):
        train.load_checkpoint(p, order_j=4)
    p.write_bytes(p.read_bytes()[:40])
    with pytest.raises(detect.CoefficientFileError, match="byte offset"):
        train.load_checkpoint(p)
