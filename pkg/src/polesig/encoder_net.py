"""Convolutional descriptor encoder with explicit forward/backward passes.

Four 3x3 stride-2 zero-padded conv stages (1 -> 16 -> 32 -> 64 -> 128
channels, each rectified), global average pooling, one fully connected
layer to the embedding size, and L2 normalization.  Everything runs in
float64 with hand-written gradients so analytic derivatives can be
verified against central finite differences, and all computation is
bit-reproducible for fixed inputs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, FormatError, ShapeError, TrainingError
from .rng import Stream

CHANNELS = (1, 16, 32, 64, 128)
KERNEL = 3
STRIDE = 2
PAD = 1
NORM_GUARD = 1e-12

CHECKPOINT_MAGIC = b"PICK"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass
class EncoderParams:
    conv_w: list[np.ndarray]
    conv_b: list[np.ndarray]
    fc_w: np.ndarray
    fc_b: np.ndarray
    emb_dim: int
    input_shape: tuple[int, int] = (80, 360)

    def tensors(self) -> dict[str, np.ndarray]:
        """Canonical name -> tensor mapping (fixed order)."""
        out: dict[str, np.ndarray] = {}
        for i, (w, b) in enumerate(zip(self.conv_w, self.conv_b), start=1):
            out[f"conv{i}.w"] = w
            out[f"conv{i}.b"] = b
        out["fc.w"] = self.fc_w
        out["fc.b"] = self.fc_b
        return out

    def with_tensors(self, tensors: dict[str, np.ndarray]) -> "EncoderParams":
        n = len(self.conv_w)
        return EncoderParams(
            conv_w=[tensors[f"conv{i}.w"] for i in range(1, n + 1)],
            conv_b=[tensors[f"conv{i}.b"] for i in range(1, n + 1)],
            fc_w=tensors["fc.w"],
            fc_b=tensors["fc.b"],
            emb_dim=self.emb_dim,
            input_shape=self.input_shape,
        )

    def copy(self) -> "EncoderParams":
        return self.with_tensors({k: v.copy() for k, v in self.tensors().items()})


def init_params(seed: int, emb_dim: int = 128, input_shape: tuple[int, int] = (80, 360)) -> EncoderParams:
    """He-normal weights (std sqrt(2 / fan_in)), zero biases, keyed by seed."""
    conv_w, conv_b = [], []
    for i in range(len(CHANNELS) - 1):
        c_in, c_out = CHANNELS[i], CHANNELS[i + 1]
        std = np.sqrt(2.0 / (c_in * KERNEL * KERNEL))
        stream = Stream(seed, "init", f"conv{i + 1}.w")
        conv_w.append(stream.normal((c_out, c_in, KERNEL, KERNEL)) * std)
        conv_b.append(np.zeros(c_out))
    fc_in = CHANNELS[-1]
    stream = Stream(seed, "init", "fc.w")
    fc_w = stream.normal((emb_dim, fc_in)) * np.sqrt(2.0 / fc_in)
    return EncoderParams(
        conv_w=conv_w,
        conv_b=conv_b,
        fc_w=fc_w,
        fc_b=np.zeros(emb_dim),
        emb_dim=emb_dim,
        input_shape=tuple(input_shape),
    )


# ---------------------------------------------------------------------------
# Layer primitives (stride-2 3x3 conv, relu, global average pool, fc, l2)
# ---------------------------------------------------------------------------


def _out_size(n: int) -> int:
    return (n + 2 * PAD - KERNEL) // STRIDE + 1


def _pad(x: np.ndarray) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (PAD, PAD), (PAD, PAD)))


def _gather_cols(xp: np.ndarray, oh: int, ow: int) -> np.ndarray:
    """(B, C, 9, oh*ow) patch matrix from the padded input."""
    b, c = xp.shape[:2]
    cols = np.empty((b, c, KERNEL * KERNEL, oh, ow))
    for kh in range(KERNEL):
        for kw in range(KERNEL):
            cols[:, :, kh * KERNEL + kw] = xp[
                :, :, kh : kh + STRIDE * (oh - 1) + 1 : STRIDE, kw : kw + STRIDE * (ow - 1) + 1 : STRIDE
            ]
    return cols.reshape(b, c, KERNEL * KERNEL, oh * ow)


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, tuple]:
    bsz, c_in, h, win = x.shape
    oh, ow = _out_size(h), _out_size(win)
    cols = _gather_cols(_pad(x), oh, ow).reshape(bsz, c_in * KERNEL * KERNEL, oh * ow)
    w2 = w.reshape(w.shape[0], -1)
    # per-item matmuls keep each item's result independent of batch size
    y = np.empty((bsz, w.shape[0], oh * ow))
    for i in range(bsz):
        y[i] = w2 @ cols[i]
    y += b[:, None]
    return y.reshape(bsz, w.shape[0], oh, ow), (x, w)


def conv_backward(gout: np.ndarray, cache: tuple) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x, w = cache
    bsz, c_in, h, win = x.shape
    c_out = w.shape[0]
    oh, ow = gout.shape[2], gout.shape[3]
    g2 = gout.reshape(bsz, c_out, oh * ow)

    cols = _gather_cols(_pad(x), oh, ow).reshape(bsz, c_in * KERNEL * KERNEL, oh * ow)
    gb = g2.sum(axis=(0, 2))
    gw2 = np.zeros((c_out, c_in * KERNEL * KERNEL))
    gcols = np.empty_like(cols)
    w2 = w.reshape(c_out, -1)
    for i in range(bsz):  # accumulate in fixed batch-index order
        gw2 += g2[i] @ cols[i].T
        gcols[i] = w2.T @ g2[i]
    gw = gw2.reshape(w.shape)

    gcols = gcols.reshape(bsz, c_in, KERNEL, KERNEL, oh, ow)
    gxp = np.zeros((bsz, c_in, h + 2 * PAD, win + 2 * PAD))
    for kh in range(KERNEL):
        for kw in range(KERNEL):
            gxp[
                :, :, kh : kh + STRIDE * (oh - 1) + 1 : STRIDE, kw : kw + STRIDE * (ow - 1) + 1 : STRIDE
            ] += gcols[:, :, kh, kw]
    gx = gxp[:, :, PAD : PAD + h, PAD : PAD + win]
    return gx, gw, gb


def relu_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mask = x > 0
    return x * mask, mask


def relu_backward(gout: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return gout * mask


def gap_forward(x: np.ndarray) -> tuple[np.ndarray, tuple[int, int]]:
    return x.mean(axis=(2, 3)), x.shape[2:]


def gap_backward(gout: np.ndarray, spatial: tuple[int, int]) -> np.ndarray:
    h, w = spatial
    return np.broadcast_to(gout[:, :, None, None], gout.shape + (h, w)).copy() / (h * w)


def fc_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    y = np.empty((x.shape[0], w.shape[0]))
    for i in range(x.shape[0]):  # batch-size-independent per-item products
        y[i] = w @ x[i]
    return y + b, x


def fc_backward(gout: np.ndarray, x: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    gx = np.empty_like(x)
    gw = np.zeros_like(w)
    for i in range(x.shape[0]):  # accumulate in fixed batch-index order
        gx[i] = gout[i] @ w
        gw += np.outer(gout[i], x[i])
    return gx, gw, gout.sum(axis=0)


def l2norm_forward(x: np.ndarray) -> tuple[np.ndarray, tuple]:
    raw = np.linalg.norm(x, axis=1, keepdims=True)
    n = np.maximum(raw, NORM_GUARD)
    y = x / n
    return y, (y, n, raw > NORM_GUARD)


def l2norm_backward(gout: np.ndarray, cache: tuple) -> np.ndarray:
    y, n, active = cache
    # where the guard is active the norm is a constant, so the Jacobian
    # is just 1/guard on the diagonal
    proj = np.where(active, (gout * y).sum(axis=1, keepdims=True), 0.0)
    return (gout - proj * y) / n


# ---------------------------------------------------------------------------
# Whole-network forward / backward
# ---------------------------------------------------------------------------


@dataclass
class ForwardCache:
    params: EncoderParams
    conv_caches: list
    relu_masks: list
    gap_spatial: tuple[int, int]
    fc_x: np.ndarray
    l2_cache: tuple
    batch: int = 0


def _as_batch(params: EncoderParams, images: np.ndarray) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != params.input_shape:
        raise ShapeError(
            f"expected images of shape {params.input_shape}, got {x.shape[1:] if x.ndim == 3 else x.shape}"
        )
    return x[:, None]


def forward(params: EncoderParams, images: np.ndarray, want_cache: bool = False):
    """Batch of images (B, rows, cols) in {0, 1} -> unit descriptors (B, emb_dim).

    An all-zero pre-normalization vector stays all-zero (the norm guard
    divides by 1e-12); use `degenerate_mask` to detect that case.
    """
    x = _as_batch(params, images)
    conv_caches, relu_masks = [], []
    for w, b in zip(params.conv_w, params.conv_b):
        x, ccache = conv_forward(x, w, b)
        conv_caches.append(ccache)
        x, mask = relu_forward(x)
        relu_masks.append(mask)
    pooled, spatial = gap_forward(x)
    pre_fc, fc_x = fc_forward(pooled, params.fc_w, params.fc_b)
    desc, l2_cache = l2norm_forward(pre_fc)
    if not want_cache:
        return desc
    cache = ForwardCache(
        params=params,
        conv_caches=conv_caches,
        relu_masks=relu_masks,
        gap_spatial=spatial,
        fc_x=fc_x,
        l2_cache=l2_cache,
        batch=desc.shape[0],
    )
    return desc, cache


def degenerate_mask(descriptors: np.ndarray) -> np.ndarray:
    """True for rows whose descriptor collapsed to (near) zero norm."""
    return np.linalg.norm(descriptors, axis=1) < 0.5


def backward(params: EncoderParams, cache: ForwardCache, grad_desc: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of every parameter tensor given d(loss)/d(descriptors)."""
    if cache.params is not params:
        raise ContractError("cache was produced by a different parameter set")
    grad_desc = np.asarray(grad_desc, dtype=np.float64)
    if grad_desc.shape != (cache.batch, params.emb_dim):
        raise ContractError(
            f"upstream gradient shape {grad_desc.shape} does not match "
            f"({cache.batch}, {params.emb_dim})"
        )

    grads: dict[str, np.ndarray] = {}
    g = l2norm_backward(grad_desc, cache.l2_cache)
    g, grads["fc.w"], grads["fc.b"] = fc_backward(g, cache.fc_x, params.fc_w)
    g = gap_backward(g, cache.gap_spatial)
    for i in range(len(params.conv_w) - 1, -1, -1):
        g = relu_backward(g, cache.relu_masks[i])
        g, gw, gb = conv_backward(g, cache.conv_caches[i])
        grads[f"conv{i + 1}.w"] = gw
        grads[f"conv{i + 1}.b"] = gb
    return grads


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def copy(self) -> "AdamState":
        return AdamState(
            m={k: x.copy() for k, x in self.m.items()},
            v={k: x.copy() for k, x in self.v.items()},
            step=self.step,
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            epsilon=self.epsilon,
        )


def init_adam(tensors: dict[str, np.ndarray] | EncoderParams, lr: float = 1e-3) -> AdamState:
    if isinstance(tensors, EncoderParams):
        tensors = tensors.tensors()
    return AdamState(
        m={k: np.zeros_like(x) for k, x in tensors.items()},
        v={k: np.zeros_like(x) for k, x in tensors.items()},
        lr=lr,
    )


def adam_step(state: AdamState, params, grads: dict[str, np.ndarray]):
    """One bias-corrected Adam update; returns (updated params, new state)."""
    is_params = isinstance(params, EncoderParams)
    tensors = params.tensors() if is_params else params
    if set(tensors) != set(state.m):
        raise ContractError("optimizer state does not match the parameter set")
    for name in tensors:
        if name not in grads:
            raise ContractError(f"missing gradient for tensor {name!r}")
        if not np.all(np.isfinite(grads[name])):
            raise TrainingError(f"non-finite gradient in tensor {name!r}")

    new_state = state.copy()
    new_state.step = state.step + 1
    t = new_state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    updated: dict[str, np.ndarray] = {}
    for name, x in tensors.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = state.beta1 * state.m[name] + (1 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1 - state.beta2) * g * g
        new_state.m[name] = m
        new_state.v[name] = v
        updated[name] = x - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    if is_params:
        return params.with_tensors(updated), new_state
    return updated, new_state


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------


# A coordinate probe is only a valid derivative oracle if the loss is
# smooth across the probe interval; a rectifier boundary inside it makes
# the central difference estimate something other than the derivative.
# Halving the step moves the estimate a lot in that case and (almost)
# not at all in the smooth case, which is how we detect and skip it.
KINK_CONSISTENCY_TOL = 1e-4


def grad_check(params: EncoderParams, loss_fn, n_samples: int = 50, step: float = 1e-4, seed: int = 0) -> float:
    """Max relative error of analytic vs central-difference gradients.

    loss_fn(params) must deterministically return (loss, grads-dict).
    Coordinates are sampled (seeded) across all tensors until n_samples
    smooth probes have been checked; coordinates whose probe interval
    straddles a rectifier boundary (detected by step-halving
    inconsistency) are skipped and replaced.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    _, grads = loss_fn(params)
    names = list(params.tensors().keys())
    sizes = [params.tensors()[n].size for n in names]
    total = sum(sizes)
    offsets = np.cumsum([0] + sizes)

    stream = Stream(seed, "grad_check")
    checked: set[int] = set()
    worst = 0.0
    budget = 20 * n_samples
    done = 0
    while done < n_samples:
        if budget == 0:
            raise ValueError("exhausted coordinate budget; loss is nowhere locally smooth at this step")
        budget -= 1
        flat = int(stream.integers(0, total))
        if flat in checked:
            continue
        checked.add(flat)
        ti = int(np.searchsorted(offsets, flat, side="right")) - 1
        name, local = names[ti], flat - offsets[ti]
        base = params.copy()
        tensor = base.tensors()[name]
        orig = tensor.flat[local]

        evals = {}
        for delta in (step, -step, step / 2, -step / 2):
            tensor.flat[local] = orig + delta
            evals[delta], _ = loss_fn(base)
        tensor.flat[local] = orig

        numeric = (evals[step] - evals[-step]) / (2 * step)
        numeric_half = (evals[step / 2] - evals[-step / 2]) / step
        if abs(numeric - numeric_half) > KINK_CONSISTENCY_TOL * max(abs(numeric), abs(numeric_half), 1e-8):
            continue  # probe interval crosses a rectifier boundary

        analytic = grads[name].flat[local]
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, rel)
        done += 1
    return worst


# ---------------------------------------------------------------------------
# Checkpoint I/O
# ---------------------------------------------------------------------------


def _write_tensor(fh, name: str, value: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    arr = np.ascontiguousarray(value, dtype="<f8")
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
    fh.write(arr.tobytes())


def write_checkpoint(path, params: EncoderParams, extra: dict[str, np.ndarray] | None = None,
                     adam_state: AdamState | None = None) -> None:
    """Binary checkpoint: magic, version, emb_dim, then named float64 tensors.

    Optimizer state, when given, is appended under reserved 'opt.*' names;
    any other extra tensors (e.g. calibration scalars) are written as-is.
    """
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, params.emb_dim))
        for name, value in params.tensors().items():
            _write_tensor(fh, name, value)
        for name in sorted(extra or {}):
            _write_tensor(fh, name, np.asarray((extra or {})[name], dtype=np.float64))
        if adam_state is not None:
            _write_tensor(fh, "opt.step", np.array(float(adam_state.step)))
            _write_tensor(fh, "opt.hyper", np.array([adam_state.lr, adam_state.beta1, adam_state.beta2, adam_state.epsilon]))
            for name in sorted(adam_state.m):
                _write_tensor(fh, f"opt.m.{name}", adam_state.m[name])
            for name in sorted(adam_state.v):
                _write_tensor(fh, f"opt.v.{name}", adam_state.v[name])


@dataclass
class Checkpoint:
    params: EncoderParams
    extra: dict[str, np.ndarray] = field(default_factory=dict)
    adam_state: AdamState | None = None


def read_checkpoint(path, input_shape: tuple[int, int] = (80, 360)) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r} (expected {CHECKPOINT_MAGIC!r})")
    if len(data) < 12:
        raise FormatError(f"{path}: truncated header ({len(data)} bytes)")
    version, emb_dim = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")

    tensors: dict[str, np.ndarray] = {}
    offset = 12
    while offset < len(data):
        try:
            (name_len,) = struct.unpack_from("<I", data, offset)
            offset += 4
            name = data[offset : offset + name_len].decode("utf-8")
            if len(data[offset : offset + name_len]) != name_len:
                raise struct.error
            offset += name_len
            (rank,) = struct.unpack_from("<I", data, offset)
            offset += 4
            dims = struct.unpack_from(f"<{rank}I", data, offset) if rank else ()
            offset += 4 * rank
            count = int(np.prod(dims)) if dims else 1
            nbytes = count * 8
            if offset + nbytes > len(data):
                raise FormatError(
                    f"{path}: tensor {name!r} needs {nbytes} bytes, only "
                    f"{len(data) - offset} remain"
                )
            values = np.frombuffer(data[offset : offset + nbytes], dtype="<f8").reshape(dims)
            offset += nbytes
            tensors[name] = values.astype(np.float64)
        except struct.error:
            raise FormatError(f"{path}: truncated tensor record at byte {offset}") from None

    n_stages = len(CHANNELS) - 1
    expected = [f"conv{i}.{t}" for i in range(1, n_stages + 1) for t in ("w", "b")] + ["fc.w", "fc.b"]
    missing = [n for n in expected if n not in tensors]
    if missing:
        raise FormatError(f"{path}: missing parameter tensor(s) {missing}")
    if tensors["fc.w"].shape[0] != emb_dim or tensors["fc.b"].shape != (emb_dim,):
        raise FormatError(
            f"{path}: header emb_dim {emb_dim} disagrees with fc tensor shape "
            f"{tensors['fc.w'].shape}"
        )
    for i in range(1, n_stages + 1):
        want = (CHANNELS[i], CHANNELS[i - 1], KERNEL, KERNEL)
        if tensors[f"conv{i}.w"].shape != want:
            raise FormatError(f"{path}: conv{i}.w has shape {tensors[f'conv{i}.w'].shape}, expected {want}")

    params = EncoderParams(
        conv_w=[tensors[f"conv{i}.w"] for i in range(1, n_stages + 1)],
        conv_b=[tensors[f"conv{i}.b"] for i in range(1, n_stages + 1)],
        fc_w=tensors["fc.w"],
        fc_b=tensors["fc.b"],
        emb_dim=emb_dim,
        input_shape=tuple(input_shape),
    )

    extra = {k: v for k, v in tensors.items() if k not in expected and not k.startswith("opt.")}
    adam_state = None
    if any(k.startswith("opt.") for k in tensors):
        try:
            hyper = tensors["opt.hyper"].reshape(-1)
            adam_state = AdamState(
                m={n: tensors[f"opt.m.{n}"] for n in expected + sorted(extra) if f"opt.m.{n}" in tensors},
                v={n: tensors[f"opt.v.{n}"] for n in expected + sorted(extra) if f"opt.v.{n}" in tensors},
                step=int(tensors["opt.step"].reshape(-1)[0]),
                lr=float(hyper[0]),
                beta1=float(hyper[1]),
                beta2=float(hyper[2]),
                epsilon=float(hyper[3]),
            )
        except KeyError as exc:
            raise FormatError(f"{path}: incomplete optimizer state ({exc})") from None
    return Checkpoint(params=params, extra=extra, adam_state=adam_state)
