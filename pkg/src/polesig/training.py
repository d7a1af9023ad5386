"""Descriptor training: contrastive (in-batch negatives) and siamese BCE.

The dataset is split by pole identity so no landmark appears in both the
train and validation sets.  Contrastive batches hold two views of each of
N poles laid out as (view_a_1..N, view_b_1..N); the normalized
temperature-scaled cross entropy treats the other 2N-2 views as
negatives.  The supervised regime scores balanced same/different pairs
with a learnable affine-logistic squash of cosine similarity under binary
cross entropy.  Both regimes share the Adam loop and per-epoch
cross-session validation recall.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DatasetError, TrainingError
from .pole_image import PoleImage, read_manifest, read_pgm
from .rng import Stream, derive_state
from . import encoder_net
from .encoder_net import AdamState, EncoderParams


# ---------------------------------------------------------------------------
# Observations
# ---------------------------------------------------------------------------


@dataclass
class Observation:
    pole_id: int
    session_id: int
    image: PoleImage


class ObservationSet:
    """Pole-image observations with unique (pole_id, session_id) pairs."""

    def __init__(self, observations: list[Observation]):
        seen = set()
        shape = None
        for ob in observations:
            key = (ob.pole_id, ob.session_id)
            if key in seen:
                raise ValueError(f"duplicate observation for pole {ob.pole_id}, session {ob.session_id}")
            seen.add(key)
            if shape is None:
                shape = ob.image.grid.shape
            elif ob.image.grid.shape != shape:
                raise ValueError("all observations must share one image shape")
        self.observations = list(observations)

    def __len__(self) -> int:
        return len(self.observations)

    def __getitem__(self, i: int) -> Observation:
        return self.observations[i]

    @property
    def image_shape(self) -> tuple[int, int]:
        if not self.observations:
            raise ValueError("empty observation set has no image shape")
        return self.observations[0].image.grid.shape

    def pole_ids(self) -> list[int]:
        return sorted({ob.pole_id for ob in self.observations})

    def by_pole(self) -> dict[int, list[int]]:
        groups: dict[int, list[int]] = {}
        for i, ob in enumerate(self.observations):
            groups.setdefault(ob.pole_id, []).append(i)
        return groups

    def subset(self, indices) -> "ObservationSet":
        return ObservationSet([self.observations[i] for i in indices])

    def images_array(self) -> np.ndarray:
        return np.stack([ob.image.grid for ob in self.observations])

    def sessions_of(self, pole_id: int) -> set[int]:
        return {ob.session_id for ob in self.observations if ob.pole_id == pole_id}


def load_observations(manifest_path) -> ObservationSet:
    """Read a manifest TSV and its referenced PGM images."""
    base = os.path.dirname(os.fspath(manifest_path))
    obs = []
    for pole_id, session_id, rel in read_manifest(manifest_path):
        img_path = rel if os.path.isabs(rel) else os.path.join(base, rel)
        obs.append(Observation(pole_id=pole_id, session_id=session_id, image=read_pgm(img_path)))
    return ObservationSet(obs)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    regime: str = "cl"  # "cl" or "sl"
    epochs: int = 30
    lr: float = 1e-3
    temperature: float = 0.07
    batch_pole_ids: int = 32
    sl_batch_pairs: int = 64
    split_ratio: float = 0.8
    augment_shift: bool = False
    seed: int = 0
    emb_dim: int = 128

    def validate(self) -> None:
        if self.regime not in ("cl", "sl"):
            raise ConfigError(f"regime must be 'cl' or 'sl', got {self.regime!r}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.batch_pole_ids < 2:
            raise ConfigError("batch_pole_ids must be >= 2")
        if self.sl_batch_pairs < 1:
            raise ConfigError("sl_batch_pairs must be >= 1")
        if not (0.0 < self.split_ratio < 1.0):
            raise ConfigError("split_ratio must lie strictly between 0 and 1")
        if self.emb_dim < 1:
            raise ConfigError("emb_dim must be >= 1")


def train_config_from_dict(d: dict) -> TrainConfig:
    known = set(TrainConfig.__dataclass_fields__)
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown train config key(s): {sorted(unknown)}")
    cfg = TrainConfig(**d)
    cfg.validate()
    return cfg


@dataclass
class SlCalibration:
    """Learnable affine-logistic map from cosine similarity to probability."""

    alpha: float = 10.0
    beta: float = 0.0


# ---------------------------------------------------------------------------
# Splitting and batch construction
# ---------------------------------------------------------------------------


def split_by_pole(obs: ObservationSet, ratio: float, seed: int) -> tuple[ObservationSet, ObservationSet]:
    """Partition pole IDs (not observations) into disjoint train/val sets."""
    ids = obs.pole_ids()
    if len(ids) < 2:
        raise DatasetError(f"need at least 2 distinct pole ids to split, got {len(ids)}")
    if not (0.0 < ratio < 1.0):
        raise DatasetError("split ratio must lie strictly between 0 and 1")
    perm = Stream(seed, "split").permutation(len(ids))
    n_train = min(max(int(round(ratio * len(ids))), 1), len(ids) - 1)
    train_ids = {ids[i] for i in perm[:n_train]}
    groups = obs.by_pole()
    train_idx = [i for pid in sorted(train_ids) for i in groups[pid]]
    val_idx = [i for pid in sorted(set(ids) - train_ids) for i in groups[pid]]
    return obs.subset(train_idx), obs.subset(val_idx)


@dataclass
class ClBatch:
    images: np.ndarray  # (2N, rows, cols) uint8, a-block then b-block
    pole_ids: list[int]
    pairs: list[tuple[int, int]]  # (anchor index, positive index)


def build_cl_batch(
    train: ObservationSet,
    chosen_ids: list[int],
    seed: int,
    augment_shift: bool = False,
) -> ClBatch:
    """Two views per chosen pole, distinct sessions preferred."""
    groups = train.by_pole()
    picker = Stream(seed, "cl_views")
    view_a, view_b = [], []
    for pid in chosen_ids:
        indices = groups.get(pid, [])
        if len(indices) < 2:
            raise DatasetError(f"pole id {pid} has {len(indices)} observation(s); need >= 2 for a positive pair")
        by_session: dict[int, list[int]] = {}
        for i in indices:
            by_session.setdefault(train[i].session_id, []).append(i)
        sessions = sorted(by_session)
        if len(sessions) >= 2:
            pick = picker.choice(len(sessions), 2)
            sa, sb = sessions[pick[0]], sessions[pick[1]]
            ia = by_session[sa][picker.integers(0, len(by_session[sa]))]
            ib = by_session[sb][picker.integers(0, len(by_session[sb]))]
        else:
            pick = picker.choice(len(indices), 2)
            ia, ib = indices[pick[0]], indices[pick[1]]
        view_a.append(ia)
        view_b.append(ib)

    images = np.stack([train[i].image.grid for i in view_a + view_b])
    if augment_shift:
        shifter = Stream(seed, "cl_shift")
        cols = images.shape[2]
        for row in range(images.shape[0]):
            images[row] = np.roll(images[row], shifter.integers(0, cols), axis=1)
    n = len(chosen_ids)
    return ClBatch(images=images, pole_ids=list(chosen_ids), pairs=[(i, i + n) for i in range(n)])


def build_sl_pairs(train: ObservationSet, count: int, seed: int) -> list[tuple[int, int, int]]:
    """Balanced (ceil/floor) positive and negative observation-index pairs.

    No identical unordered pair appears twice within one call.
    """
    if count < 1:
        raise DatasetError("pair count must be >= 1")
    groups = train.by_pole()
    pos_ids = sorted(pid for pid, idx in groups.items() if len(idx) >= 2)
    if not pos_ids:
        raise DatasetError("no pole id has >= 2 observations; cannot form a positive pair")
    if len(groups) < 2:
        raise DatasetError("need >= 2 distinct pole ids for negative pairs")

    n_pos = (count + 1) // 2
    n_neg = count // 2
    max_pos = sum(len(groups[pid]) * (len(groups[pid]) - 1) // 2 for pid in pos_ids)
    n_obs = len(train)
    max_neg = n_obs * (n_obs - 1) // 2 - sum(len(idx) * (len(idx) - 1) // 2 for idx in groups.values())
    if n_pos > max_pos:
        raise DatasetError(f"requested {n_pos} positive pairs but only {max_pos} distinct ones exist")
    if n_neg > max_neg:
        raise DatasetError(f"requested {n_neg} negative pairs but only {max_neg} distinct ones exist")

    stream = Stream(seed, "sl_pairs")
    used: set[tuple[int, int]] = set()
    pairs: list[tuple[int, int, int]] = []

    budget = 1000 * count
    while len(pairs) < n_pos:
        if budget == 0:
            raise DatasetError("exhausted sampling budget for positive pairs")
        budget -= 1
        pid = pos_ids[stream.integers(0, len(pos_ids))]
        idx = groups[pid]
        pick = stream.choice(len(idx), 2)
        key = (min(idx[pick[0]], idx[pick[1]]), max(idx[pick[0]], idx[pick[1]]))
        if key in used:
            continue
        used.add(key)
        pairs.append((key[0], key[1], 1))

    budget = 1000 * count
    while len(pairs) < n_pos + n_neg:
        if budget == 0:
            raise DatasetError("exhausted sampling budget for negative pairs")
        budget -= 1
        i = stream.integers(0, n_obs)
        j = stream.integers(0, n_obs)
        if i == j or train[i].pole_id == train[j].pole_id:
            continue
        key = (min(i, j), max(i, j))
        if key in used:
            continue
        used.add(key)
        pairs.append((key[0], key[1], 0))

    order = stream.permutation(len(pairs))
    return [pairs[i] for i in order]


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _check_unit(embeddings: np.ndarray, what: str) -> None:
    norms = np.linalg.norm(embeddings, axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-3):
        raise ContractError(f"{what} must be unit-norm (worst |n-1| = {np.abs(norms - 1).max():.3g})")


def nt_xent_loss(embeddings: np.ndarray, temperature: float) -> tuple[float, np.ndarray]:
    """Contrastive loss over a 2N batch; returns (loss, d(loss)/d(embeddings)).

    Row i's positive sits at (i + N) mod 2N; all other rows are
    negatives.  Similarities are dot products (inputs are unit-norm),
    and the log-sum-exp uses max subtraction.
    """
    z = np.asarray(embeddings, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 4 or z.shape[0] % 2 != 0:
        raise ContractError(f"embeddings must be (2N, D) with N >= 2, got {z.shape}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    _check_unit(z, "embeddings")

    two_n = z.shape[0]
    n = two_n // 2
    logits = (z @ z.T) / temperature
    np.fill_diagonal(logits, -np.inf)
    row_max = logits.max(axis=1, keepdims=True)
    lse = row_max[:, 0] + np.log(np.exp(logits - row_max).sum(axis=1))
    pos = (np.arange(two_n) + n) % two_n
    loss = float(np.mean(lse - logits[np.arange(two_n), pos]))

    probs = np.exp(logits - lse[:, None])  # diagonal is exp(-inf) = 0
    probs[np.arange(two_n), pos] -= 1.0
    g = probs / (two_n * temperature)
    grad = (g + g.T) @ z
    return loss, grad


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def sl_bce_loss(
    desc_i: np.ndarray,
    desc_j: np.ndarray,
    label: int,
    calib: SlCalibration,
) -> tuple[float, np.ndarray, np.ndarray, float, float]:
    """BCE on logistic(alpha * cosine + beta).

    Returns (loss, grad_i, grad_j, grad_alpha, grad_beta).  The
    probability is clamped to [1e-12, 1 - 1e-12] for the loss value;
    gradients use the standard (p - label) form.
    """
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label!r}")
    di = np.asarray(desc_i, dtype=np.float64)
    dj = np.asarray(desc_j, dtype=np.float64)
    if di.shape != dj.shape or di.ndim != 1:
        raise ContractError(f"descriptor shapes differ: {di.shape} vs {dj.shape}")
    _check_unit(di, "descriptors")
    _check_unit(dj, "descriptors")

    c = float(np.dot(di, dj))
    s = calib.alpha * c + calib.beta
    p = _sigmoid(s)
    pc = min(max(p, 1e-12), 1.0 - 1e-12)
    loss = -(label * math.log(pc) + (1 - label) * math.log(1.0 - pc))

    dl_ds = p - label
    grad_alpha = dl_ds * c
    grad_beta = dl_ds
    dl_dc = dl_ds * calib.alpha
    return loss, dl_dc * dj, dl_dc * di, grad_alpha, grad_beta


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: EncoderParams
    calib: SlCalibration | None
    history: list[tuple[int, float, float]]  # (epoch, train_loss, val_recall_at_1)
    initial_val_recall: float
    adam_state: AdamState


def _val_recall_at_1(params: EncoderParams, val: ObservationSet) -> float:
    """Pooled cross-session Recall@1 over validation poles seen in >= 2 sessions.

    Returns nan when no validation query has an eligible correct match.
    """
    from . import retrieval_eval  # deferred: retrieval_eval builds on this module

    eligible_ids = [pid for pid in val.pole_ids() if len(val.sessions_of(pid)) >= 2]
    if not eligible_ids:
        return float("nan")
    keep = [i for i, ob in enumerate(val.observations) if ob.pole_id in set(eligible_ids)]
    subset = val.subset(keep)
    db = retrieval_eval.embed_all(params, subset)
    matcher = retrieval_eval.make_descriptor_matcher(params, db)
    report = retrieval_eval.evaluate(subset, db, matcher)
    return report.recall_at[1]


def _forward_descriptors(params: EncoderParams, images: np.ndarray) -> np.ndarray:
    return encoder_net.forward(params, images.astype(np.float64))


def train(
    obs: ObservationSet,
    config: TrainConfig,
    out_checkpoint=None,
    out_history=None,
) -> TrainResult:
    """Run the configured regime and return final parameters plus history.

    History has one row per completed epoch; the pre-training validation
    recall is reported separately (initial_val_recall).
    """
    config.validate()
    train_set, val_set = split_by_pole(obs, config.split_ratio, config.seed)
    assert not set(o.pole_id for o in train_set.observations) & set(
        o.pole_id for o in val_set.observations
    ), "train/val pole ids overlap"

    params = encoder_net.init_params(config.seed, emb_dim=config.emb_dim, input_shape=obs.image_shape)
    calib = SlCalibration() if config.regime == "sl" else None

    tensors = params.tensors()
    if calib is not None:
        tensors = dict(tensors)
        tensors["calib.alpha"] = np.array(calib.alpha)
        tensors["calib.beta"] = np.array(calib.beta)
    adam = encoder_net.init_adam(tensors, lr=config.lr)

    history: list[tuple[int, float, float]] = []
    initial_recall = float("nan")
    if config.epochs > 0:
        initial_recall = _val_recall_at_1(params, val_set)

    for epoch in range(1, config.epochs + 1):
        try:
            if config.regime == "cl":
                epoch_loss, params, calib, adam = _cl_epoch(params, calib, adam, train_set, config, epoch)
            else:
                epoch_loss, params, calib, adam = _sl_epoch(params, calib, adam, train_set, config, epoch)
        except (DatasetError, ContractError, TrainingError) as exc:
            raise TrainingError(f"epoch {epoch}: {exc}") from exc
        val_recall = _val_recall_at_1(params, val_set)
        history.append((epoch, epoch_loss, val_recall))

    if out_checkpoint is not None:
        extra = {}
        if calib is not None:
            extra = {"calib.alpha": np.array(calib.alpha), "calib.beta": np.array(calib.beta)}
        encoder_net.write_checkpoint(out_checkpoint, params, extra=extra)
    if out_history is not None:
        write_history(history, out_history)
    return TrainResult(
        params=params,
        calib=calib,
        history=history,
        initial_val_recall=initial_recall,
        adam_state=adam,
    )


def _cl_epoch(params, calib, adam, train_set, config, epoch):
    groups = train_set.by_pole()
    ids = sorted(pid for pid, idx in groups.items() if len(idx) >= 2)
    n_batches = len(ids) // config.batch_pole_ids
    if n_batches < 1:
        raise DatasetError(
            f"{len(ids)} pole ids with >= 2 observations cannot fill one batch of {config.batch_pole_ids}"
        )
    perm = Stream(config.seed, "cl_epoch", epoch).permutation(len(ids))
    losses = []
    for b in range(n_batches):
        chosen = [ids[i] for i in perm[b * config.batch_pole_ids : (b + 1) * config.batch_pole_ids]]
        step_seed = int(derive_state(config.seed, "cl_step", epoch, b))
        batch = build_cl_batch(train_set, chosen, step_seed, augment_shift=config.augment_shift)
        try:
            desc, cache = encoder_net.forward(params, batch.images.astype(np.float64), want_cache=True)
            loss, grad_emb = nt_xent_loss(desc, config.temperature)
            grads = encoder_net.backward(params, cache, grad_emb)
            params, adam = _apply_step(params, calib, adam, grads, {})
        except (ContractError, TrainingError) as exc:
            raise TrainingError(f"step {b}: {exc}") from exc
        losses.append(loss)
    return float(np.mean(losses)), params, calib, adam


def _sl_epoch(params, calib, adam, train_set, config, epoch):
    n_steps = max(1, len(train_set) // config.sl_batch_pairs)
    losses = []
    for step in range(n_steps):
        step_seed = int(derive_state(config.seed, "sl_step", epoch, step))
        pairs = build_sl_pairs(train_set, config.sl_batch_pairs, step_seed)
        involved = sorted({i for i, j, _ in pairs} | {j for i, j, _ in pairs})
        pos_of = {obs_idx: k for k, obs_idx in enumerate(involved)}
        images = np.stack([train_set[i].image.grid for i in involved]).astype(np.float64)
        try:
            desc, cache = encoder_net.forward(params, images, want_cache=True)
            grad_desc = np.zeros_like(desc)
            total_loss = 0.0
            g_alpha = 0.0
            g_beta = 0.0
            for i, j, label in pairs:
                loss, gi, gj, ga, gb = sl_bce_loss(desc[pos_of[i]], desc[pos_of[j]], label, calib)
                total_loss += loss
                grad_desc[pos_of[i]] += gi
                grad_desc[pos_of[j]] += gj
                g_alpha += ga
                g_beta += gb
            n_pairs = len(pairs)
            grads = encoder_net.backward(params, cache, grad_desc / n_pairs)
            calib_grads = {
                "calib.alpha": np.array(g_alpha / n_pairs),
                "calib.beta": np.array(g_beta / n_pairs),
            }
            params, adam = _apply_step(params, calib, adam, grads, calib_grads)
            losses.append(total_loss / n_pairs)
        except (ContractError, TrainingError) as exc:
            raise TrainingError(f"step {step}: {exc}") from exc
    return float(np.mean(losses)), params, calib, adam


def _apply_step(params, calib, adam, grads, calib_grads):
    tensors = params.tensors()
    all_grads = dict(grads)
    if calib is not None:
        tensors = dict(tensors)
        tensors["calib.alpha"] = np.array(calib.alpha)
        tensors["calib.beta"] = np.array(calib.beta)
        all_grads.update(calib_grads)
    updated, adam = encoder_net.adam_step(adam, tensors, all_grads)
    new_params = params.with_tensors(updated)
    if calib is not None:
        calib.alpha = float(updated["calib.alpha"])
        calib.beta = float(updated["calib.beta"])
    return new_params, adam


# ---------------------------------------------------------------------------
# History I/O
# ---------------------------------------------------------------------------


def write_history(history: list[tuple[int, float, float]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch\ttrain_loss\tval_recall_at_1\n")
        for epoch, loss, recall in history:
            fh.write(f"{epoch}\t{loss!r}\t{recall!r}\n")


def read_history(path) -> list[tuple[int, float, float]]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if header.strip() != "epoch\ttrain_loss\tval_recall_at_1":
            raise ValueError(f"{path}: unexpected history header {header!r}")
        for line in fh:
            if not line.strip():
                continue
            e, l, r = line.rstrip("\n").split("\t")
            out.append((int(e), float(l), float(r)))
    return out


def write_train_config(config: TrainConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config.__dict__, fh, indent=2)
        fh.write("\n")


def read_train_config(path) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return train_config_from_dict(json.load(fh))
