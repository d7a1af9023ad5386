"""Splits, batch construction, loss anchors, and the training loop."""

import math

import numpy as np
import pytest

from polesig import encoder_net as en
from polesig.errors import ContractError, DatasetError
from polesig.pole_image import PoleImage, PoleImageParams
from polesig.rng import Stream
from polesig.training import (
    Observation,
    ObservationSet,
    SlCalibration,
    TrainConfig,
    build_cl_batch,
    build_sl_pairs,
    nt_xent_loss,
    read_history,
    sl_bce_loss,
    split_by_pole,
    train,
    train_config_from_dict,
    write_history,
)

SMALL = PoleImageParams(rows=16, cols=24)


def _obs(pole_id, session_id, seed=None):
    st = Stream(seed if seed is not None else pole_id * 101 + session_id, "obsimg")
    grid = (st.uniform((SMALL.rows, SMALL.cols)) < 0.2).astype(np.uint8)
    return Observation(pole_id, session_id, PoleImage(grid=grid, session_id=session_id, params=SMALL, pole_id=pole_id))


def _toy_set(n_poles=10, sessions=(0, 1)):
    return ObservationSet([_obs(p, s) for p in range(n_poles) for s in sessions])


# -- observation sets ----------------------------------------------------------


def test_duplicate_observation_rejected():
    with pytest.raises(ValueError, match="duplicate"):
        ObservationSet([_obs(1, 0), _obs(1, 0)])


def test_mixed_shapes_rejected():
    other = PoleImageParams(rows=8, cols=12)
    st = Stream(0, "x")
    bad = Observation(2, 0, PoleImage(grid=np.zeros((8, 12), np.uint8), session_id=0, params=other))
    with pytest.raises(ValueError, match="shape"):
        ObservationSet([_obs(1, 0), bad])


# -- split ----------------------------------------------------------------------


def test_split_counts_and_disjointness():
    obs = _toy_set(10)
    train_set, val_set = split_by_pole(obs, 0.8, seed=3)
    train_ids = set(o.pole_id for o in train_set.observations)
    val_ids = set(o.pole_id for o in val_set.observations)
    assert len(train_ids) == 8 and len(val_ids) == 2
    assert not train_ids & val_ids


def test_split_deterministic():
    obs = _toy_set(12)
    a = split_by_pole(obs, 0.75, seed=9)
    b = split_by_pole(obs, 0.75, seed=9)
    assert [o.pole_id for o in a[0].observations] == [o.pole_id for o in b[0].observations]
    assert [o.pole_id for o in a[1].observations] == [o.pole_id for o in b[1].observations]


def test_split_every_observation_follows_its_pole():
    obs = _toy_set(9, sessions=(0, 1, 2))
    train_set, val_set = split_by_pole(obs, 0.6, seed=1)
    val_ids = set(o.pole_id for o in val_set.observations)
    for o in train_set.observations:
        assert o.pole_id not in val_ids
    assert len(train_set) + len(val_set) == len(obs)


def test_split_needs_two_ids():
    with pytest.raises(DatasetError):
        split_by_pole(ObservationSet([_obs(1, 0), _obs(1, 1)]), 0.8, seed=0)


# -- contrastive batches ---------------------------------------------------------


def test_cl_batch_layout():
    obs = _toy_set(4)
    batch = build_cl_batch(obs, [0, 2], seed=5)
    assert batch.images.shape == (4, SMALL.rows, SMALL.cols)
    assert batch.pairs == [(0, 2), (1, 3)]
    assert batch.pole_ids == [0, 2]


def test_cl_batch_two_observations_forced():
    obs = _toy_set(3)
    batch = build_cl_batch(obs, [1], seed=0)
    want = {(1, 0), (1, 1)}
    got = set()
    for img in batch.images:
        for o in obs.observations:
            if np.array_equal(o.image.grid, img):
                got.add((o.pole_id, o.session_id))
    assert got == want


def test_cl_batch_prefers_distinct_sessions():
    obs = ObservationSet([_obs(5, 0), _obs(5, 1), _obs(5, 2), _obs(6, 0), _obs(6, 1)])
    for seed in range(20):
        batch = build_cl_batch(obs, [5, 6], seed=seed)
        # recover the sessions backing pole 5's two views
        views = (batch.images[0], batch.images[2])
        s5 = [
            o.session_id
            for o in obs.observations
            if o.pole_id == 5 and any(np.array_equal(o.image.grid, v) for v in views)
        ]
        assert len(set(s5)) == 2, f"seed {seed} reused a session for the positive pair"


def test_cl_batch_deterministic():
    obs = _toy_set(6)
    a = build_cl_batch(obs, [0, 3, 5], seed=7)
    b = build_cl_batch(obs, [0, 3, 5], seed=7)
    assert np.array_equal(a.images, b.images)


def test_cl_batch_insufficient_observations():
    obs = ObservationSet([_obs(0, 0), _obs(0, 1), _obs(1, 0)])
    with pytest.raises(DatasetError, match="pole id 1"):
        build_cl_batch(obs, [0, 1], seed=0)


def test_cl_batch_augment_shift_rolls_columns():
    obs = _toy_set(4)
    plain = build_cl_batch(obs, [0, 1], seed=3, augment_shift=False)
    shifted = build_cl_batch(obs, [0, 1], seed=3, augment_shift=True)
    for row in range(4):
        sums_match = plain.images[row].sum() == shifted.images[row].sum()
        assert sums_match  # a circular shift preserves mass
        assert any(
            np.array_equal(np.roll(plain.images[row], s, axis=1), shifted.images[row])
            for s in range(SMALL.cols)
        )


# -- NT-Xent ---------------------------------------------------------------------


def _unit_rows(stream, n, d):
    z = stream.normal((n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def test_nt_xent_collapse_law():
    for n in (2, 8):
        z = np.tile(np.eye(1, 16, 0), (2 * n, 1))
        loss, _ = nt_xent_loss(z, 0.07)
        assert abs(loss - math.log(2 * n - 1)) < 1e-9


def test_nt_xent_perfect_separation_anchor():
    # positives identical, negatives orthogonal, tau = 0.07
    z = np.zeros((4, 8))
    z[0, 0] = z[2, 0] = 1.0
    z[1, 1] = z[3, 1] = 1.0
    loss, _ = nt_xent_loss(z, 0.07)
    expected = math.log(1.0 + 2.0 * math.exp(-1.0 / 0.07))
    assert abs(loss - expected) < 1e-12
    assert loss == pytest.approx(1.25e-6, rel=0.01)


def test_nt_xent_gradient_matches_finite_differences():
    st = Stream(17, "ntx")
    z = _unit_rows(st, 6, 10)
    loss, grad = nt_xent_loss(z, 0.07)
    step = 1e-6
    for i, j in [(0, 3), (2, 7), (5, 0), (4, 9), (1, 1)]:
        zp = z.copy()
        zp[i, j] += step
        lp, _ = nt_xent_loss(zp, 0.07)
        zp[i, j] -= 2 * step
        lm, _ = nt_xent_loss(zp, 0.07)
        numeric = (lp - lm) / (2 * step)
        rel = abs(grad[i, j] - numeric) / max(abs(grad[i, j]), abs(numeric), 1e-8)
        assert rel < 1e-6, (i, j)


def test_nt_xent_positive_and_symmetric():
    st = Stream(18, "sym")
    z = _unit_rows(st, 8, 12)
    loss, _ = nt_xent_loss(z, 0.07)
    assert loss > 0
    perm = [2, 0, 3, 1]
    z_perm = np.vstack([z[:4][perm], z[4:][perm]])
    loss_perm, _ = nt_xent_loss(z_perm, 0.07)
    assert loss_perm == pytest.approx(loss, abs=1e-12)


def test_nt_xent_rejects_non_unit():
    z = np.ones((4, 4))
    with pytest.raises(ContractError):
        nt_xent_loss(z, 0.07)


def test_nt_xent_needs_two_pairs():
    z = np.eye(2, 4)
    with pytest.raises(ContractError):
        nt_xent_loss(z, 0.07)


# -- supervised pairs and loss ----------------------------------------------------


def test_sl_pairs_balanced_and_labeled():
    obs = _toy_set(40)  # 40 distinct positive pairs available
    pairs = build_sl_pairs(obs, 64, seed=2)
    labels = [l for _, _, l in pairs]
    assert len(pairs) == 64
    assert sum(labels) == 32
    for i, j, label in pairs:
        same = obs[i].pole_id == obs[j].pole_id
        assert same == bool(label)
        assert i != j


def test_sl_pairs_odd_count_rounds_positives_up():
    pairs = build_sl_pairs(_toy_set(6), 7, seed=0)
    assert sum(l for _, _, l in pairs) == 4


def test_sl_pairs_no_repeats():
    obs = _toy_set(5)  # 5 distinct positives: request exactly all of them
    pairs = build_sl_pairs(obs, 10, seed=4)
    keys = {(min(i, j), max(i, j)) for i, j, _ in pairs}
    assert len(keys) == len(pairs)
    assert sum(l for _, _, l in pairs) == 5


def test_sl_pairs_deterministic():
    obs = _toy_set(12)
    assert build_sl_pairs(obs, 20, seed=6) == build_sl_pairs(obs, 20, seed=6)


def test_sl_pairs_rejects_oversized_positive_request():
    with pytest.raises(DatasetError, match="positive"):
        build_sl_pairs(_toy_set(5), 12, seed=0)  # 6 positives > 5 distinct


def test_sl_pairs_impossible_positive():
    obs = ObservationSet([_obs(0, 0), _obs(1, 0), _obs(2, 0)])
    with pytest.raises(DatasetError, match="positive"):
        build_sl_pairs(obs, 4, seed=0)


def test_sl_bce_anchors():
    calib = SlCalibration()
    e1 = np.eye(1, 6, 0)[0]
    e2 = np.eye(1, 6, 1)[0]
    loss, *_ = sl_bce_loss(e1, e2, 1, calib)  # cosine 0 -> p = 1/2
    assert loss == pytest.approx(math.log(2), abs=1e-12)
    loss1, *_ = sl_bce_loss(e1, e1, 1, calib)  # cosine 1
    assert loss1 == pytest.approx(math.log(1 + math.exp(-10)), rel=1e-9)


def test_sl_bce_gradients_match_finite_differences():
    st = Stream(19, "bce")
    di = st.normal(8)
    di /= np.linalg.norm(di)
    dj = st.normal(8)
    dj /= np.linalg.norm(dj)
    calib = SlCalibration(alpha=4.0, beta=0.3)
    for label in (0, 1):
        loss, gi, gj, ga, gb = sl_bce_loss(di, dj, label, calib)
        step = 1e-7
        for k in (0, 3, 7):
            dp = di.copy()
            dp[k] += step
            lp, *_ = sl_bce_loss(dp, dj, label, calib)
            dp[k] -= 2 * step
            lm, *_ = sl_bce_loss(dp, dj, label, calib)
            numeric = (lp - lm) / (2 * step)
            assert abs(gi[k] - numeric) / max(abs(gi[k]), abs(numeric), 1e-8) < 1e-6
        for attr, grad in (("alpha", ga), ("beta", gb)):
            cp = SlCalibration(alpha=calib.alpha, beta=calib.beta)
            setattr(cp, attr, getattr(calib, attr) + step)
            lp, *_ = sl_bce_loss(di, dj, label, cp)
            setattr(cp, attr, getattr(calib, attr) - step)
            lm, *_ = sl_bce_loss(di, dj, label, cp)
            numeric = (lp - lm) / (2 * step)
            assert abs(grad - numeric) / max(abs(grad), abs(numeric), 1e-8) < 1e-6


def test_sl_bce_monotonicity_in_cosine():
    calib = SlCalibration()
    d = np.eye(1, 4, 0)[0]
    losses_pos, losses_neg = [], []
    for angle in np.linspace(0, math.pi, 9):
        other = np.array([math.cos(angle), math.sin(angle), 0.0, 0.0])
        losses_pos.append(sl_bce_loss(d, other, 1, calib)[0])
        losses_neg.append(sl_bce_loss(d, other, 0, calib)[0])
    # cosine decreases along the sweep: label-1 loss grows, label-0 shrinks
    assert all(a < b for a, b in zip(losses_pos, losses_pos[1:]))
    assert all(a > b for a, b in zip(losses_neg, losses_neg[1:]))


def test_sl_bce_rejects_bad_label():
    d = np.eye(1, 4, 0)[0]
    with pytest.raises(ValueError):
        sl_bce_loss(d, d, 2, SlCalibration())


# -- train loop -------------------------------------------------------------------


def _train_config(**kw):
    base = dict(regime="cl", epochs=2, batch_pole_ids=2, sl_batch_pairs=8, seed=0, emb_dim=16)
    base.update(kw)
    return TrainConfig(**base)


def test_train_zero_epochs_is_initialization(tmp_path):
    obs = _toy_set(6)
    cfg = _train_config(epochs=0)
    result = train(obs, cfg, out_checkpoint=tmp_path / "init.ckpt")
    init = en.init_params(cfg.seed, emb_dim=cfg.emb_dim, input_shape=obs.image_shape)
    assert result.history == []
    for name, t in init.tensors().items():
        assert np.array_equal(t, result.params.tensors()[name]), name
    back = en.read_checkpoint(tmp_path / "init.ckpt", input_shape=obs.image_shape)
    assert np.array_equal(back.params.fc_w, init.fc_w)


def test_train_deterministic():
    obs = _toy_set(8)
    cfg = _train_config(epochs=2)
    a = train(obs, cfg)
    b = train(obs, cfg)
    for name, t in a.params.tensors().items():
        assert np.array_equal(t, b.params.tensors()[name]), name
    assert a.history == b.history


def test_train_cl_loss_decreases(small_corpus):
    cfg = TrainConfig(regime="cl", epochs=3, batch_pole_ids=4, seed=1, emb_dim=32)
    result = train(small_corpus, cfg)
    assert result.history[-1][1] < result.history[0][1]


def test_train_sl_runs_and_updates_calibration(small_corpus):
    cfg = TrainConfig(regime="sl", epochs=1, sl_batch_pairs=12, seed=2, emb_dim=16)
    result = train(small_corpus, cfg)
    assert result.calib is not None
    assert (result.calib.alpha, result.calib.beta) != (10.0, 0.0)
    assert len(result.history) == 1


def test_train_writes_history(tmp_path):
    obs = _toy_set(8)
    cfg = _train_config(epochs=2)
    result = train(obs, cfg, out_history=tmp_path / "h.tsv")
    back = read_history(tmp_path / "h.tsv")
    assert [e for e, _, _ in back] == [1, 2]
    for (e1, l1, r1), (e2, l2, r2) in zip(result.history, back):
        assert l1 == pytest.approx(l2) and (math.isnan(r1) and math.isnan(r2) or r1 == pytest.approx(r2))


def test_history_roundtrip(tmp_path):
    hist = [(1, 2.5, 0.25), (2, 1.25, 0.5)]
    write_history(hist, tmp_path / "h.tsv")
    assert read_history(tmp_path / "h.tsv") == hist


def test_train_config_rejects_unknown_keys():
    with pytest.raises(Exception, match="unknown"):
        train_config_from_dict({"regime": "cl", "bogus": 1})
