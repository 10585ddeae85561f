"""Hand-derived backpropagation through time, AdamW, and the training loop.

Gradients are computed in reverse mode directly from the recurrence
definitions (no autodiff): the shared non-gated step is differentiated
through its forget/update conductances and elastance, each gated
baseline through its gate algebra, and the conv head through its im2col
matmuls.  Central finite differences serve as the verification oracle.

Training minimizes plain MSE over fixed-length open-loop windows with
zero initial state, AdamW with decoupled weight decay on connection
matrices, global-norm gradient clipping, and best-validation-epoch
checkpointing without early stopping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cells import (
    CellKind,
    CellParameters,
    DimensionMismatchError,
    GatedParameters,
    NumericOverflowError,
    family,
    forward_step_batch,
    gated_forward_batch,
    init_parameters,
    is_gated,
)
from .perception import conv_backward_batch, conv_forward_batch
from .policy import PolicyModel, init_policy


@dataclass
class TrainingConfig:
    epochs: int = 100
    batch_size: int = 32
    sequence_length: int = 32
    learning_rate: float = 5e-4
    weight_decay: float = 1e-6
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    clip_norm: float = 10.0
    compute_dtype: str = "float64"  # conv-head arithmetic; cells always float64

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.compute_dtype not in ("float32", "float64"):
            raise ValueError(f"unknown compute_dtype {self.compute_dtype!r}")

    @property
    def dtype(self):
        return np.float32 if self.compute_dtype == "float32" else np.float64


class TrainingDivergedError(RuntimeError):
    """Raised when the loss becomes non-finite; carries partial results."""

    def __init__(self, message: str, model=None, history=None, best_epoch=None):
        super().__init__(message)
        self.model = model
        self.history = history or []
        self.best_epoch = best_epoch


# --- losses ---------------------------------------------------------------


def mse_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean squared error over all timesteps (and sequences, if batched)."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise DimensionMismatchError(f"shapes differ: {pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise DimensionMismatchError("empty sequences")
    diff = pred - target
    return float((diff * diff).mean())


def _turn_weights(target: np.ndarray) -> np.ndarray:
    """Per-timestep weights |target| normalized to sum 1 per sequence;
    all-zero targets fall back to uniform weights (plain MSE)."""
    weights = np.abs(target)
    if target.ndim == 1:
        total = weights.sum()
        if total <= 0:
            return np.full_like(weights, 1.0 / weights.shape[0])
        return weights / total
    totals = weights.sum(axis=1, keepdims=True)
    uniform = np.full_like(weights, 1.0 / weights.shape[1])
    safe = np.where(totals > 0, totals, 1.0)
    return np.where(totals > 0, weights / safe, uniform)


def weighted_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Turn-weighted squared error: weights proportional to |target|,
    normalized per sequence; batched input averages over sequences."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise DimensionMismatchError(f"shapes differ: {pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise DimensionMismatchError("empty sequences")
    weights = _turn_weights(target)
    diff = pred - target
    if pred.ndim == 1:
        return float((weights * diff * diff).sum())
    return float((weights * diff * diff).sum(axis=1).mean())


# --- forward/backward over sequences ---------------------------------------


def forward_sequences(
    model: PolicyModel, inputs: np.ndarray, dtype=np.float64, state_dtype=np.float64
) -> tuple[np.ndarray, dict]:
    """Predictions (B, T) for frame stacks (B, T, H, W) or feature
    stacks (B, T, n); returns the cache used by the backward pass.

    state_dtype widens the recurrent state (the parameters stay as
    stored); the finite-difference oracle uses extended precision here
    so the difference quotient is not dominated by rounding noise.
    """
    inputs = np.asarray(inputs)
    b, t = inputs.shape[:2]
    cache: dict = {"conv": None}
    if model.head is not None:
        flat_frames = inputs.reshape((b * t,) + inputs.shape[2:]).astype(dtype)
        feats, conv_cache = conv_forward_batch(model.head, flat_frames)
        cache["conv"] = conv_cache
        cache["frames_shape"] = flat_frames.shape
        features = feats.reshape(b, t, -1).astype(float)
    else:
        features = inputs.astype(float)
    if features.shape[-1] != model.cell.n:
        raise DimensionMismatchError(
            f"feature length {features.shape[-1]} != n={model.cell.n}"
        )
    m = model.cell.m
    h = np.zeros((b, m), dtype=state_dtype)
    c = np.zeros((b, m), dtype=state_dtype) if model.cell.kind is CellKind.LSTM else None
    steps = []
    hs = np.empty((b, t, m), dtype=state_dtype)
    for ti in range(t):
        x = features[:, ti]
        if is_gated(model.cell.kind):
            h, c, step_cache = gated_forward_batch(model.cell, h, c, x)
        else:
            h, step_cache = forward_step_batch(model.cell, h, x)
        steps.append(step_cache)
        hs[:, ti] = h
    preds = hs @ model.w_out + model.b_out[0]
    cache.update({"steps": steps, "hs": hs, "features": features})
    return preds, cache


def _zero_grads(model: PolicyModel) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in model.arrays().items()}


def _backward_nongated_step(
    cell: CellParameters, cache: dict, dh_new: np.ndarray, grads: dict
) -> tuple[np.ndarray, np.ndarray]:
    y = cache["y"]
    h_prev = cache["h_prev"]
    s = cache["s"]
    tu = cache["tu"]
    eps = cache["eps"]
    phi = cache["phi"]
    dt = cell.dt
    synapse, activation, _ = family(cell.kind)
    df = dh_new * (-(eps * dt) * h_prev) * (s * (1.0 - s))
    du = dh_new * ((eps * dt) * cell.e_l) * (1.0 - tu * tu)
    grads["cell.e_l"] += (dh_new * tu * eps * dt).sum(axis=0)
    grads["cell.g_l"] += (df + du).sum(axis=0)
    dh_prev = dh_new * (1.0 - s * eps * dt)
    dy = np.zeros_like(y)
    if cache["w"] is not None:
        deps = dh_new * dt * (tu * cell.e_l - s * h_prev)
        dw = deps * (cache["sp"] - cache["sm"])
        dk_eff = deps * (cache["sp"] + cache["sm"])
        grads["cell.o"] += y.T @ dw
        grads["cell.p"] += dw.sum(axis=0)
        grads["cell.kappa_raw"] += dk_eff.sum(axis=0) * np.sign(cell.kappa_raw)
        dy += dw @ cell.o.T
    if synapse == "electrical":
        grads["cell.g"] += df.sum(axis=0)  # f has unit sensitivity to every g_ji
        if activation == "neural":
            grads["cell.k"] += y.T @ du
            dy += du @ cell.k.T
        else:
            grads["cell.k"] += np.einsum("bqm,bm->qm", phi, du)
            dpre = (cell.k[None, :, :] * du[:, None, :]) * (phi * (1.0 - phi))
            grads["cell.a"] += np.einsum("bqm,bq->qm", dpre, y)
            grads["cell.b"] += dpre.sum(axis=0)
            dy += np.einsum("bqm,qm->bq", dpre, cell.a)
    elif activation == "neural":
        grads["cell.g"] += phi.T @ df
        grads["cell.k"] += phi.T @ du
        dphi = df @ cell.g.T + du @ cell.k.T
        dpre = dphi * (phi * (1.0 - phi))
        grads["cell.a"] += (dpre * y).sum(axis=0)
        grads["cell.b"] += dpre.sum(axis=0)
        dy += dpre * cell.a
    else:
        grads["cell.g"] += np.einsum("bqm,bm->qm", phi, df)
        grads["cell.k"] += np.einsum("bqm,bm->qm", phi, du)
        dphi = cell.g[None, :, :] * df[:, None, :] + cell.k[None, :, :] * du[:, None, :]
        dpre = dphi * (phi * (1.0 - phi))
        grads["cell.a"] += np.einsum("bqm,bq->qm", dpre, y)
        grads["cell.b"] += dpre.sum(axis=0)
        dy += np.einsum("bqm,qm->bq", dpre, cell.a)
    m = cell.m
    return dh_prev + dy[:, :m], dy[:, m:]


def _backward_gated_step(
    cell: GatedParameters,
    cache: dict,
    dh_new: np.ndarray,
    dc_new: np.ndarray | None,
    grads: dict,
):
    w = cell.weights
    m = cell.m
    y = cache["y"]
    if cell.kind is CellKind.LSTM:
        tc = cache["tc"]
        gi, gf, go, gg = cache["i"], cache["f"], cache["o"], cache["g"]
        do = dh_new * tc
        dc = dc_new + dh_new * go * (1.0 - tc * tc)
        dc_prev = dc * gf
        pre_grads = (
            ("i", dc * gg * gi * (1.0 - gi)),
            ("f", dc * cache["c_prev"] * gf * (1.0 - gf)),
            ("o", do * go * (1.0 - go)),
            ("g", dc * gi * (1.0 - gg * gg)),
        )
        dy = np.zeros_like(y)
        for gate, dz in pre_grads:
            grads[f"cell.w_{gate}"] += y.T @ dz
            grads[f"cell.b_{gate}"] += dz.sum(axis=0)
            dy += dz @ w[f"w_{gate}"].T
        return dy[:, :m], dc_prev, dy[:, m:]
    if cell.kind is CellKind.GRU:
        r, z, nn = cache["r"], cache["z"], cache["nn"]
        h_prev = cache["h_prev"]
        dz = dh_new * (h_prev - nn)
        dnn = dh_new * (1.0 - z)
        dh_prev = dh_new * z
        dzn = dnn * (1.0 - nn * nn)
        grads["cell.w_n"] += cache["yn"].T @ dzn
        grads["cell.b_n"] += dzn.sum(axis=0)
        dyn = dzn @ w["w_n"].T
        dr = dyn[:, :m] * h_prev
        dh_prev = dh_prev + dyn[:, :m] * r
        dx = dyn[:, m:].copy()
        dzr = dr * r * (1.0 - r)
        dzz = dz * z * (1.0 - z)
        grads["cell.w_r"] += y.T @ dzr
        grads["cell.b_r"] += dzr.sum(axis=0)
        grads["cell.w_z"] += y.T @ dzz
        grads["cell.b_z"] += dzz.sum(axis=0)
        dy = dzr @ w["w_r"].T + dzz @ w["w_z"].T
        return dh_prev + dy[:, :m], None, dx + dy[:, m:]
    fg, hh = cache["f"], cache["hh"]
    h_prev = cache["h_prev"]
    dfg = dh_new * (hh - h_prev)
    dhh = dh_new * fg
    dh_prev = dh_new * (1.0 - fg)
    dzh = dhh * (1.0 - hh * hh)
    grads["cell.w_h"] += cache["yh"].T @ dzh
    grads["cell.b_h"] += dzh.sum(axis=0)
    dyh = dzh @ w["w_h"].T
    dfg = dfg + dyh[:, :m] * h_prev
    dh_prev = dh_prev + dyh[:, :m] * fg
    dx = dyh[:, m:].copy()
    dzf = dfg * fg * (1.0 - fg)
    grads["cell.w_f"] += y.T @ dzf
    grads["cell.b_f"] += dzf.sum(axis=0)
    dy = dzf @ w["w_f"].T
    return dh_prev + dy[:, :m], None, dx + dy[:, m:]


def backward_sequences(
    model: PolicyModel, cache: dict, dpred: np.ndarray, dtype=np.float64
) -> dict[str, np.ndarray]:
    """Parameter gradients given d(loss)/d(predictions) of shape (B, T)."""
    grads = _zero_grads(model)
    hs = cache["hs"]
    b, t, m = hs.shape
    grads["readout.w"] += np.einsum("btm,bt->m", hs, dpred)
    grads["readout.b"] += np.array([dpred.sum()])
    gated = is_gated(model.cell.kind)
    dh = np.zeros((b, m))
    dc = np.zeros((b, m)) if model.cell.kind is CellKind.LSTM else None
    dx_all = np.empty((b, t, model.cell.n))
    for ti in range(t - 1, -1, -1):
        dh = dh + dpred[:, ti][:, None] * model.w_out[None, :]
        if gated:
            dh, dc, dx = _backward_gated_step(model.cell, cache["steps"][ti], dh, dc, grads)
        else:
            dh, dx = _backward_nongated_step(model.cell, cache["steps"][ti], dh, grads)
        dx_all[:, ti] = dx
    if model.head is not None:
        dfeat = dx_all.reshape(b * t, -1).astype(dtype)
        head_grads, _ = conv_backward_batch(model.head, cache["conv"], dfeat)
        for name, grad in head_grads.items():
            grads[f"head.{name}"] += grad.astype(float)
    return grads


_LOSSES = ("mse", "weighted")


def _loss_value(preds: np.ndarray, targets: np.ndarray, loss: str):
    """Loss in the dtype of preds (no float64 truncation)."""
    if loss not in _LOSSES:
        raise ValueError(f"unknown loss {loss!r}")
    diff = preds - targets
    if loss == "mse":
        return (diff * diff).mean()
    weights = _turn_weights(targets)
    if diff.ndim == 1:
        return (weights * diff * diff).sum()
    return (weights * diff * diff).sum(axis=1).mean()


def _loss_and_dpred(preds: np.ndarray, targets: np.ndarray, loss: str):
    value = float(_loss_value(preds, targets, loss))
    diff = preds - targets
    if loss == "mse":
        return value, 2.0 * diff / diff.size
    weights = _turn_weights(targets)
    return value, 2.0 * weights * diff / preds.shape[0]


def sequence_loss(
    model: PolicyModel, inputs: np.ndarray, targets: np.ndarray, loss: str = "mse",
    dtype=np.float64,
) -> float:
    preds, _ = forward_sequences(model, inputs, dtype=dtype)
    return _loss_and_dpred(preds, np.asarray(targets, dtype=float), loss)[0]


def bptt_gradients(
    model: PolicyModel,
    batch: tuple[np.ndarray, np.ndarray],
    loss: str = "mse",
    dtype=np.float64,
) -> dict[str, np.ndarray]:
    """Gradients of the mean batch loss for every parameter array."""
    inputs, targets = batch
    targets = np.asarray(targets, dtype=float)
    if len(inputs) == 0:
        raise ValueError("empty batch")
    preds, cache = forward_sequences(model, inputs, dtype=dtype)
    if preds.shape != targets.shape:
        raise DimensionMismatchError(
            f"prediction shape {preds.shape} != target shape {targets.shape}"
        )
    _, dpred = _loss_and_dpred(preds, targets, loss)
    grads = backward_sequences(model, cache, dpred, dtype=dtype)
    for name, grad in grads.items():
        if not np.isfinite(grad).all():
            raise NumericOverflowError(f"non-finite gradient in {name}")
    return grads


def finite_difference_gradients(
    model: PolicyModel,
    batch: tuple[np.ndarray, np.ndarray],
    loss: str = "mse",
    step: float = 1e-5,
) -> dict[str, np.ndarray]:
    """Central-difference gradient estimate, one coordinate at a time.

    The recurrence and the loss are evaluated in extended precision so
    the difference quotient at small steps is not swamped by float64
    rounding of the loss value.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    inputs, targets = batch
    targets = np.asarray(targets, dtype=float)
    wide = np.longdouble

    def loss_at() -> np.longdouble:
        preds, _ = forward_sequences(model, inputs, state_dtype=wide)
        return _loss_value(preds, targets, loss)

    grads = {}
    for name, arr in model.arrays().items():
        grad = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for idx in range(flat.size):
            original = flat[idx]
            flat[idx] = original + step
            hi = loss_at()
            flat[idx] = original - step
            lo = loss_at()
            flat[idx] = original
            gflat[idx] = float((hi - lo) / wide(2.0 * step))
        grads[name] = grad
    return grads


# --- gradient checking ------------------------------------------------------


@dataclass
class GradCheckReport:
    kind: CellKind
    tolerance: float
    worst_by_array: dict[str, float]
    max_rel_error: float
    passed: bool

    def lines(self) -> list[str]:
        out = [
            f"{self.kind.value}: max relative error "
            f"{self.max_rel_error:.3e} (tolerance {self.tolerance:.0e}) "
            f"{'PASS' if self.passed else 'FAIL'}"
        ]
        for name in sorted(self.worst_by_array):
            out.append(f"  {name}: {self.worst_by_array[name]:.3e}")
        return out


def _relative_errors(
    analytic: dict[str, np.ndarray],
    numeric: dict[str, np.ndarray],
    tolerance: float = 1e-5,
    absolute_floor: float = 1e-8,
) -> dict[str, float]:
    """Worst error per array: |a-b| / max(|a|, |b|, floor/tolerance).

    With the scale floored at absolute_floor/tolerance, err <= tolerance
    means plain relative agreement for healthy coordinates and absolute
    agreement within absolute_floor for near-zero ones, with no cliff in
    between (a pure relative test around 1e-8 would demand more
    precision than any finite-difference evaluation carries).
    """
    scale_floor = absolute_floor / tolerance
    worst = {}
    for name in analytic:
        a = analytic[name].reshape(-1)
        b = numeric[name].reshape(-1)
        scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), scale_floor)
        err = np.abs(a - b) / scale
        worst[name] = float(err.max()) if err.size else 0.0
    return worst


def gradient_check(
    kind: CellKind,
    seed: int = 0,
    instances: int = 10,
    m: int = 4,
    n: int = 3,
    t: int = 7,
    batch: int = 2,
    step: float = 1e-5,
    tolerance: float = 1e-5,
    loss: str = "mse",
    corrupt: tuple[str, float] | None = None,
) -> GradCheckReport:
    """BPTT vs central finite differences on random small instances.

    Liquid kinds draw |kappa_raw| in [0.2, 0.7] to stay clear of the
    absolute-value kink.  ``corrupt`` injects an offset into one BPTT
    gradient array (negative control for the harness itself).
    """
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for _ in range(instances):
        model = init_policy(kind, rng, m=m, n=n, with_head=False)
        if isinstance(model.cell, CellParameters) and model.cell.kappa_raw is not None:
            model.cell.kappa_raw = rng.uniform(0.2, 0.7, size=m) * rng.choice([-1.0, 1.0], m)
        inputs = rng.uniform(-1.0, 1.0, size=(batch, t, n))
        targets = rng.uniform(-1.0, 1.0, size=(batch, t))
        analytic = bptt_gradients(model, (inputs, targets), loss=loss)
        if corrupt is not None:
            name, delta = corrupt
            analytic[name].reshape(-1)[0] += delta
        numeric = finite_difference_gradients(model, (inputs, targets), loss=loss, step=step)
        for name, err in _relative_errors(analytic, numeric, tolerance).items():
            worst[name] = max(worst.get(name, 0.0), err)
    max_err = max(worst.values()) if worst else 0.0
    return GradCheckReport(
        kind=kind,
        tolerance=tolerance,
        worst_by_array=worst,
        max_rel_error=max_err,
        passed=max_err <= tolerance,
    )


# --- optimizer --------------------------------------------------------------


def init_moments(model: PolicyModel) -> dict:
    return {
        "t": 0,
        "m": {k: np.zeros_like(v) for k, v in model.arrays().items()},
        "v": {k: np.zeros_like(v) for k, v in model.arrays().items()},
    }


def decay_parameter_keys(model: PolicyModel) -> set[str]:
    """Arrays subject to weight decay: connection/weight matrices only
    (no biases, reversal potentials, activation params, or elastance
    scalars)."""
    keys = set()
    for name, arr in model.arrays().items():
        if name in ("cell.g", "cell.k", "cell.o", "readout.w"):
            keys.add(name)
        elif name.startswith("cell.w_"):
            keys.add(name)
        elif name.startswith("head.") and name.endswith(".w"):
            keys.add(name)
    return keys


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so the global L2 norm is <= max_norm;
    returns the pre-clip norm."""
    total = 0.0
    for grad in grads.values():
        total += float((grad * grad).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for grad in grads.values():
            grad *= scale
    return norm


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    moments: dict,
    config: TrainingConfig,
    decay_keys: set[str] = frozenset(),
) -> None:
    """One decoupled-weight-decay Adam update, in place."""
    moments["t"] += 1
    t = moments["t"]
    b1, b2 = config.adam_beta1, config.adam_beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, theta in params.items():
        g = grads[name]
        m = moments["m"][name]
        v = moments["v"][name]
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        update = (m / bc1) / (np.sqrt(v / bc2) + config.adam_eps)
        if name in decay_keys and config.weight_decay > 0:
            update = update + config.weight_decay * theta
        theta -= config.learning_rate * update
        if not np.isfinite(theta).all():
            raise NumericOverflowError(f"non-finite parameter after update: {name}")


# --- training loop ----------------------------------------------------------


@dataclass
class TrainResult:
    model: PolicyModel  # parameters of the best validation epoch
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    moments: dict | None = None  # optimizer state at the end of training

    @property
    def best_val_mse(self) -> float:
        return self.history[self.best_epoch]["val_mse"]


def evaluate_split(
    model: PolicyModel, dataset, windows, batch_size: int, dtype=np.float64
) -> tuple[float, float]:
    """(MSE, turn-weighted loss) over a list of dataset windows."""
    preds_all = []
    targets_all = []
    for lo in range(0, len(windows), batch_size):
        frames, targets = dataset.batch(windows[lo : lo + batch_size])
        preds, _ = forward_sequences(model, frames, dtype=dtype)
        preds_all.append(preds)
        targets_all.append(targets)
    preds = np.concatenate(preds_all)
    targets = np.concatenate(targets_all).astype(float)
    return mse_loss(preds, targets), weighted_loss(preds, targets)


def train(
    model: PolicyModel,
    dataset,
    config: TrainingConfig,
    trainable_prefixes: tuple[str, ...] | None = None,
    log=None,
) -> TrainResult:
    """Imitation training with best-validation-epoch checkpointing.

    ``trainable_prefixes`` restricts updates to arrays whose name starts
    with one of the prefixes (e.g. ("readout.",)); others stay frozen.
    Raises TrainingDivergedError with the last finite checkpoint when a
    loss turns non-finite.
    """
    config.validate()
    if not dataset.train or not dataset.val:
        raise ValueError("training requires non-empty train and val splits")
    rng = np.random.default_rng(config.seed)
    moments = init_moments(model)
    decay_keys = decay_parameter_keys(model)
    params = model.arrays()
    if trainable_prefixes is not None:
        trainable = {
            name: arr
            for name, arr in params.items()
            if name.startswith(tuple(trainable_prefixes))
        }
    else:
        trainable = params
    history: list[dict] = []
    best_epoch = -1
    best_val = math.inf
    best_model = model.copy()
    dtype = config.dtype
    windows = list(dataset.train)
    for epoch in range(config.epochs):
        order = rng.permutation(len(windows))
        total_loss = 0.0
        total_count = 0
        for lo in range(0, len(order), config.batch_size):
            chunk = [windows[i] for i in order[lo : lo + config.batch_size]]
            frames, targets = dataset.batch(chunk)
            preds, cache = forward_sequences(model, frames, dtype=dtype)
            loss_value, dpred = _loss_and_dpred(preds, targets.astype(float), "mse")
            if not math.isfinite(loss_value):
                raise TrainingDivergedError(
                    f"training loss became non-finite at epoch {epoch}",
                    model=best_model,
                    history=history,
                    best_epoch=best_epoch,
                )
            grads = backward_sequences(model, cache, dpred, dtype=dtype)
            sub = {name: grads[name] for name in trainable}
            clip_gradients(sub, config.clip_norm)
            adamw_step(trainable, sub, moments, config, decay_keys)
            total_loss += loss_value * len(chunk)
            total_count += len(chunk)
        val_mse, val_weighted = evaluate_split(
            model, dataset, dataset.val, config.batch_size, dtype=dtype
        )
        if not math.isfinite(val_mse):
            raise TrainingDivergedError(
                f"validation loss became non-finite at epoch {epoch}",
                model=best_model,
                history=history,
                best_epoch=best_epoch,
            )
        row = {
            "epoch": epoch,
            "train_mse": total_loss / total_count,
            "val_mse": val_mse,
            "val_weighted": val_weighted,
        }
        history.append(row)
        if val_mse < best_val:
            best_val = val_mse
            best_epoch = epoch
            best_model = model.copy()
        if log is not None:
            log(row)
    return TrainResult(
        model=best_model, history=history, best_epoch=best_epoch, moments=moments
    )


def write_history_csv(history: list[dict], best_epoch: int, path) -> None:
    """History CSV: epoch,train_mse,val_mse,val_weighted plus an is_best
    marker column flagging the checkpointed epoch."""
    lines = ["epoch,train_mse,val_mse,val_weighted,is_best"]
    for row in history:
        lines.append(
            "{},{},{},{},{}".format(
                row["epoch"],
                format(row["train_mse"], ".17g"),
                format(row["val_mse"], ".17g"),
                format(row["val_weighted"], ".17g"),
                1 if row["epoch"] == best_epoch else 0,
            )
        )
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def read_history_csv(path) -> tuple[list[dict], int]:
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().strip().split("\n")
    if lines[0] != "epoch,train_mse,val_mse,val_weighted,is_best":
        raise ValueError(f"unexpected history header {lines[0]!r}")
    history = []
    best_epoch = -1
    for line in lines[1:]:
        epoch, train_mse, val_mse, val_weighted, is_best = line.split(",")
        history.append(
            {
                "epoch": int(epoch),
                "train_mse": float(train_mse),
                "val_mse": float(val_mse),
                "val_weighted": float(val_weighted),
            }
        )
        if is_best == "1":
            best_epoch = int(epoch)
    return history, best_epoch
