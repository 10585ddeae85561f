"""Unified family of bio-inspired recurrent cells.

Six non-gated kinds share one membrane-potential recurrence

    h_t = (1 - sigmoid(f) * eps * dt) * h_{t-1} + tanh(u) * eps * e_l * dt

and differ only in how the forget conductance f, the update conductance u
and the elastance eps are assembled from the concatenated drive
y = [h_{t-1}, x]:

    kind    synapse     activation  capacitance
    CTRNN   electrical  neural      fixed   (eps == 1)
    LC_NA   electrical  neural      liquid
    LC_SA   electrical  synaptic    liquid
    LTC     chemical    synaptic    fixed   (eps == 1)
    LRC_NA  chemical    neural      liquid
    LRC_SA  chemical    synaptic    liquid

Electrical synapses keep f constant (f_i = g_li + sum_j g_ji) and drive u
linearly (LC_NA) or through per-synapse sigmoids (LC_SA).  Chemical
synapses gate both f and u with sigmoids, either shared per source neuron
(neural activation, parameters a_j, b_j) or distinct per synapse
(synaptic activation, parameters a_ji, b_ji).  Liquid capacitance is the
symmetric sigmoid difference

    eps_i = sigmoid(w_i + |kappa_i|) - sigmoid(w_i - |kappa_i|),
    w_i   = sum_j o_ji * y_j + p_i

which lies in [0, 1) and vanishes exactly when kappa_i == 0.

LSTM, GRU and MGU are carried as gated baselines with their standard
definitions; they do not participate in the shared recurrence.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np


class CellKind(str, Enum):
    LSTM = "LSTM"
    GRU = "GRU"
    MGU = "MGU"
    CTRNN = "CTRNN"
    LTC = "LTC"
    LC_NA = "LC_NA"
    LC_SA = "LC_SA"
    LRC_NA = "LRC_NA"
    LRC_SA = "LRC_SA"


# (synapse, activation, capacitance) triple per non-gated kind.
_FAMILY = {
    CellKind.CTRNN: ("electrical", "neural", "fixed"),
    CellKind.LC_NA: ("electrical", "neural", "liquid"),
    CellKind.LC_SA: ("electrical", "synaptic", "liquid"),
    CellKind.LTC: ("chemical", "synaptic", "fixed"),
    CellKind.LRC_NA: ("chemical", "neural", "liquid"),
    CellKind.LRC_SA: ("chemical", "synaptic", "liquid"),
}

GATED_KINDS = (CellKind.LSTM, CellKind.GRU, CellKind.MGU)
NONGATED_KINDS = tuple(_FAMILY)


def is_gated(kind: CellKind) -> bool:
    return kind in GATED_KINDS


def family(kind: CellKind) -> tuple[str, str, str]:
    """(synapse, activation, capacitance) triple of a non-gated kind."""
    if is_gated(kind):
        raise UnsupportedKindError(f"{kind.value} is a gated kind")
    return _FAMILY[kind]


class DimensionMismatchError(ValueError):
    """An input does not match the dimensions declared by the parameters."""


class UnsupportedKindError(ValueError):
    """Operation called with a cell kind outside its supported set."""


class NumericOverflowError(FloatingPointError):
    """A state or gradient became non-finite."""


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Logistic function, overflow-safe for large |z|."""
    z = np.asarray(z, dtype=float)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


@dataclass
class HiddenState:
    """Membrane potentials h plus the LSTM memory cell in ``aux``."""

    h: np.ndarray
    aux: np.ndarray | None = None

    def copy(self) -> "HiddenState":
        return HiddenState(self.h.copy(), None if self.aux is None else self.aux.copy())


@dataclass
class CellParameters:
    """All learnable symbols of one non-gated cell instance.

    Shapes use q = m + n source slots (m recurrent, n input).  ``a``/``b``
    are (q, m) for synaptic activation, (q,) for neural activation and
    absent for kinds without activation sigmoids (CTRNN, LC_NA).  The
    elastance arrays ``o`` (q, m), ``p`` (m,) and ``kappa_raw`` (m,) exist
    only for liquid-capacitance kinds; the effective spread is
    |kappa_raw|, the stored value stays unconstrained for the optimizer.
    """

    kind: CellKind
    m: int
    n: int
    g_l: np.ndarray
    e_l: np.ndarray
    g: np.ndarray
    k: np.ndarray
    a: np.ndarray | None = None
    b: np.ndarray | None = None
    o: np.ndarray | None = None
    p: np.ndarray | None = None
    kappa_raw: np.ndarray | None = None
    dt: float = 1.0

    def arrays(self) -> dict[str, np.ndarray]:
        """Live name -> array view of every stored parameter array."""
        out = {"g_l": self.g_l, "e_l": self.e_l, "g": self.g, "k": self.k}
        for name in ("a", "b", "o", "p", "kappa_raw"):
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        return out

    def copy(self) -> "CellParameters":
        kw = {name: arr.copy() for name, arr in self.arrays().items()}
        return CellParameters(kind=self.kind, m=self.m, n=self.n, dt=self.dt, **kw)

    def validate(self) -> None:
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        expected = parameter_shapes(self.kind, self.m, self.n)
        have = self.arrays()
        if set(have) != set(expected):
            raise DimensionMismatchError(
                f"{self.kind.value} expects arrays {sorted(expected)}, got {sorted(have)}"
            )
        for name, arr in have.items():
            if arr.shape != expected[name]:
                raise DimensionMismatchError(
                    f"{self.kind.value}.{name}: expected shape {expected[name]}, got {arr.shape}"
                )
            if not np.isfinite(arr).all():
                raise ValueError(f"{self.kind.value}.{name} contains non-finite entries")


@dataclass
class GatedParameters:
    """Weight blocks of a gated baseline (LSTM/GRU/MGU).

    Gate matrices are (m+n, m) acting on y = [h, x]; biases are (m,).
    The GRU candidate matrix acts on [r*h, x] and the MGU candidate on
    [f*h, x], i.e. the gate masks the state before the matrix.
    """

    kind: CellKind
    m: int
    n: int
    weights: dict[str, np.ndarray] = field(default_factory=dict)
    dt: float = 1.0  # unused by the recurrence, kept for a uniform file format

    def arrays(self) -> dict[str, np.ndarray]:
        return dict(self.weights)

    def copy(self) -> "GatedParameters":
        return GatedParameters(
            kind=self.kind,
            m=self.m,
            n=self.n,
            weights={k: v.copy() for k, v in self.weights.items()},
            dt=self.dt,
        )

    def validate(self) -> None:
        expected = parameter_shapes(self.kind, self.m, self.n)
        if set(self.weights) != set(expected):
            raise DimensionMismatchError(
                f"{self.kind.value} expects arrays {sorted(expected)}, got {sorted(self.weights)}"
            )
        for name, arr in self.weights.items():
            if arr.shape != expected[name]:
                raise DimensionMismatchError(
                    f"{self.kind.value}.{name}: expected shape {expected[name]}, got {arr.shape}"
                )
            if not np.isfinite(arr).all():
                raise ValueError(f"{self.kind.value}.{name} contains non-finite entries")


AnyParameters = CellParameters | GatedParameters

_GATE_BLOCKS = {
    CellKind.LSTM: ("i", "f", "o", "g"),
    CellKind.GRU: ("r", "z", "n"),
    CellKind.MGU: ("f", "h"),
}


def parameter_shapes(kind: CellKind, m: int, n: int) -> dict[str, tuple[int, ...]]:
    """Expected array name -> shape map for a cell kind."""
    q = m + n
    if is_gated(kind):
        shapes: dict[str, tuple[int, ...]] = {}
        for gate in _GATE_BLOCKS[kind]:
            shapes[f"w_{gate}"] = (q, m)
            shapes[f"b_{gate}"] = (m,)
        return shapes
    synapse, activation, capacitance = _FAMILY[kind]
    shapes = {"g_l": (m,), "e_l": (m,), "g": (q, m), "k": (q, m)}
    if not (synapse == "electrical" and activation == "neural"):
        ab_shape = (q, m) if activation == "synaptic" else (q,)
        shapes["a"] = ab_shape
        shapes["b"] = ab_shape
    if capacitance == "liquid":
        shapes.update({"o": (q, m), "p": (m,), "kappa_raw": (m,)})
    return shapes


def init_parameters(
    kind: CellKind, m: int, n: int, rng: np.random.Generator, dt: float = 1.0
) -> AnyParameters:
    """Draw fresh parameters.

    Non-gated ranges: e_l ~ U[-1,1], g_l ~ U[0,1], g/k/o ~ U[-s,s] with
    s = (m+n)^-1/2, a ~ U[0.5,1.5], b/p/kappa_raw ~ U[-0.5,0.5].  Gated
    kinds use U[-s,s] matrices and zero biases.
    """
    q = m + n
    s = q ** -0.5 if q > 0 else 1.0
    shapes = parameter_shapes(kind, m, n)
    if is_gated(kind):
        weights = {}
        for name, shape in shapes.items():
            if name.startswith("w_"):
                weights[name] = rng.uniform(-s, s, size=shape)
            else:
                weights[name] = np.zeros(shape)
        return GatedParameters(kind=kind, m=m, n=n, weights=weights)
    ranges = {
        "g_l": (0.0, 1.0),
        "e_l": (-1.0, 1.0),
        "g": (-s, s),
        "k": (-s, s),
        "o": (-s, s),
        "a": (0.5, 1.5),
        "b": (-0.5, 0.5),
        "p": (-0.5, 0.5),
        "kappa_raw": (-0.5, 0.5),
    }
    kw = {name: rng.uniform(*ranges[name], size=shape) for name, shape in shapes.items()}
    return CellParameters(kind=kind, m=m, n=n, dt=dt, **kw)


def zero_state(params: AnyParameters, batch: int | None = None) -> HiddenState:
    shape = (params.m,) if batch is None else (batch, params.m)
    aux = np.zeros(shape) if params.kind is CellKind.LSTM else None
    return HiddenState(np.zeros(shape), aux)


def concat_inputs(state: HiddenState, x: np.ndarray) -> np.ndarray:
    """y = [h, x] along the last axis."""
    h = np.asarray(state.h, dtype=float)
    x = np.asarray(x, dtype=float)
    if h.ndim != x.ndim:
        raise DimensionMismatchError(
            f"state has {h.ndim} dims but input has {x.ndim}"
        )
    return np.concatenate([h, x], axis=-1)


def _check_drive(params: AnyParameters, h: np.ndarray, x: np.ndarray) -> None:
    if h.shape[-1] != params.m:
        raise DimensionMismatchError(
            f"state length {h.shape[-1]} != m={params.m}"
        )
    if x.shape[-1] != params.n:
        raise DimensionMismatchError(
            f"input length {x.shape[-1]} != n={params.n}"
        )


def elastance(params: CellParameters, i: int, y: np.ndarray) -> float:
    """Elastance eps_i = sigmoid(w_i + k_i) - sigmoid(w_i - k_i) of neuron i.

    w_i = sum_j o_ji y_j + p_i and k_i = |kappa_raw_i|.  Fixed-capacitance
    kinds (CTRNN, LTC) have eps == 1 by definition.
    """
    if not 0 <= i < params.m:
        raise DimensionMismatchError(f"neuron index {i} out of range for m={params.m}")
    y = np.asarray(y, dtype=float)
    if y.shape[-1] != params.m + params.n:
        raise DimensionMismatchError(
            f"drive length {y.shape[-1]} != m+n={params.m + params.n}"
        )
    if _FAMILY[params.kind][2] == "fixed":
        return 1.0
    w = float(y @ params.o[:, i] + params.p[i])
    kk = abs(float(params.kappa_raw[i]))
    return float(sigmoid(w + kk) - sigmoid(w - kk))


def forget_update(params: CellParameters, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Forget and update conductances (f, u) for a drive y = [h, x].

    Accepts a single drive (q,) or a batch (B, q); the result matches.
    """
    if isinstance(params, GatedParameters) or is_gated(params.kind):
        raise UnsupportedKindError(f"{params.kind.value} has no forget/update conductances")
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    y2 = y[None, :] if single else y
    if y2.shape[-1] != params.m + params.n:
        raise DimensionMismatchError(
            f"drive length {y2.shape[-1]} != m+n={params.m + params.n}"
        )
    f, u, _ = _conductances(params, y2)
    return (f[0], u[0]) if single else (f, u)


def _conductances(params: CellParameters, y: np.ndarray):
    """Batched (f, u, activation cache) for a (B, q) drive."""
    synapse, activation, _ = _FAMILY[params.kind]
    g_l = params.g_l
    if synapse == "electrical":
        f = g_l + params.g.sum(axis=0)
        f = np.broadcast_to(f, (y.shape[0], params.m)).copy()
        if activation == "neural":  # LC_NA / CTRNN: linear update drive
            u = g_l + y @ params.k
            return f, u, None
        phi = sigmoid(y[:, :, None] * params.a + params.b)  # (B, q, m)
        u = g_l + np.einsum("bqm,qm->bm", phi, params.k)
        return f, u, phi
    if activation == "neural":  # LRC_NA: one sigmoid per source neuron
        phi = sigmoid(y * params.a + params.b)  # (B, q)
        f = g_l + phi @ params.g
        u = g_l + phi @ params.k
        return f, u, phi
    phi = sigmoid(y[:, :, None] * params.a + params.b)  # LRC_SA / LTC
    f = g_l + np.einsum("bqm,qm->bm", phi, params.g)
    u = g_l + np.einsum("bqm,qm->bm", phi, params.k)
    return f, u, phi


def forward_step_batch(
    params: CellParameters,
    h: np.ndarray,
    x: np.ndarray,
    elastance_override: float | None = None,
) -> tuple[np.ndarray, dict]:
    """One batched recurrence step; returns (h_new, cache for backward).

    h is (B, m), x is (B, n).  ``elastance_override`` replaces eps with a
    constant (diagnostic path, e.g. forcing eps == 1 to recover the
    fixed-capacitance dynamics).  The new state is computed as
    h + dt * ode_rhs so the explicit-Euler identity is exact.
    """
    if isinstance(params, GatedParameters) or is_gated(params.kind):
        raise UnsupportedKindError(f"{params.kind.value} does not use the shared recurrence")
    _check_drive(params, h, x)
    y = np.concatenate([h, x], axis=-1)
    f, u, phi = _conductances(params, y)
    s = sigmoid(f)
    tu = np.tanh(u)
    cache = {"y": y, "h_prev": h, "s": s, "tu": tu, "phi": phi}
    if elastance_override is not None:
        eps = np.full_like(s, float(elastance_override))
        cache.update({"w": None, "sp": None, "sm": None})
    elif _FAMILY[params.kind][2] == "fixed":
        eps = np.ones_like(s)
        cache.update({"w": None, "sp": None, "sm": None})
    else:
        w = y @ params.o + params.p
        kk = np.abs(params.kappa_raw)
        hi = sigmoid(w + kk)
        lo = sigmoid(w - kk)
        eps = hi - lo
        cache.update({"w": w, "sp": hi * (1.0 - hi), "sm": lo * (1.0 - lo)})
    cache["eps"] = eps
    rhs = -s * eps * h + tu * eps * params.e_l
    cache["rhs"] = rhs
    return h + params.dt * rhs, cache


def _as_batch(v: np.ndarray) -> tuple[np.ndarray, bool]:
    v = np.asarray(v, dtype=float)
    return (v[None, :], True) if v.ndim == 1 else (v, False)


def step(
    params: CellParameters,
    state: HiddenState,
    x: np.ndarray,
    elastance_override: float | None = None,
) -> HiddenState:
    """Advance the membrane potentials by one discrete step of size dt."""
    h2, single = _as_batch(state.h)
    x2, _ = _as_batch(x)
    h_new, _ = forward_step_batch(params, h2, x2, elastance_override)
    bad = ~np.isfinite(h_new)
    if bad.any():
        i = int(np.argwhere(bad.any(axis=0))[0][0])
        raise NumericOverflowError(f"non-finite membrane potential at neuron {i}")
    return HiddenState(h_new[0] if single else h_new)


def ode_rhs(
    params: CellParameters,
    state: HiddenState,
    x: np.ndarray,
    elastance_override: float | None = None,
) -> np.ndarray:
    """Continuous-time right-hand side -sigmoid(f)*eps*h + tanh(u)*eps*e_l."""
    h2, single = _as_batch(state.h)
    x2, _ = _as_batch(x)
    _, cache = forward_step_batch(params, h2, x2, elastance_override)
    rhs = cache["rhs"]
    bad = ~np.isfinite(rhs)
    if bad.any():
        i = int(np.argwhere(bad.any(axis=0))[0][0])
        raise NumericOverflowError(f"non-finite derivative at neuron {i}")
    return rhs[0] if single else rhs


def gated_forward_batch(
    params: GatedParameters, h: np.ndarray, c: np.ndarray | None, x: np.ndarray
) -> tuple[np.ndarray, np.ndarray | None, dict]:
    """One batched gated step; returns (h_new, c_new, cache)."""
    if not is_gated(params.kind):
        raise UnsupportedKindError(f"{params.kind.value} is not a gated kind")
    _check_drive(params, h, x)
    w = params.weights
    y = np.concatenate([h, x], axis=-1)
    if params.kind is CellKind.LSTM:
        gi = sigmoid(y @ w["w_i"] + w["b_i"])
        gf = sigmoid(y @ w["w_f"] + w["b_f"])
        go = sigmoid(y @ w["w_o"] + w["b_o"])
        gg = np.tanh(y @ w["w_g"] + w["b_g"])
        c_new = gf * c + gi * gg
        tc = np.tanh(c_new)
        h_new = go * tc
        return h_new, c_new, {"y": y, "i": gi, "f": gf, "o": go, "g": gg,
                              "c_prev": c, "tc": tc}
    if params.kind is CellKind.GRU:
        r = sigmoid(y @ w["w_r"] + w["b_r"])
        z = sigmoid(y @ w["w_z"] + w["b_z"])
        yn = np.concatenate([r * h, x], axis=-1)
        nn = np.tanh(yn @ w["w_n"] + w["b_n"])
        h_new = (1.0 - z) * nn + z * h
        return h_new, None, {"y": y, "r": r, "z": z, "nn": nn, "yn": yn, "h_prev": h}
    fg = sigmoid(y @ w["w_f"] + w["b_f"])
    yh = np.concatenate([fg * h, x], axis=-1)
    hh = np.tanh(yh @ w["w_h"] + w["b_h"])
    h_new = (1.0 - fg) * h + fg * hh
    return h_new, None, {"y": y, "f": fg, "hh": hh, "yh": yh, "h_prev": h}


def step_gated(params: GatedParameters, state: HiddenState, x: np.ndarray) -> HiddenState:
    """Advance a gated baseline by one step."""
    h2, single = _as_batch(state.h)
    x2, _ = _as_batch(x)
    c2 = None
    if params.kind is CellKind.LSTM:
        if state.aux is None:
            raise DimensionMismatchError("LSTM state requires the aux memory cell")
        c2, _ = _as_batch(state.aux)
    h_new, c_new, _ = gated_forward_batch(params, h2, c2, x2)
    if not np.isfinite(h_new).all():
        i = int(np.argwhere((~np.isfinite(h_new)).any(axis=0))[0][0])
        raise NumericOverflowError(f"non-finite gated state at neuron {i}")
    if single:
        return HiddenState(h_new[0], None if c_new is None else c_new[0])
    return HiddenState(h_new, c_new)


def unroll(
    params: AnyParameters, h0: HiddenState, inputs: Sequence[np.ndarray]
) -> list[HiddenState]:
    """Apply step T times; element t is the state after t+1 steps."""
    states: list[HiddenState] = []
    state = h0
    for t, x in enumerate(inputs):
        try:
            if is_gated(params.kind):
                state = step_gated(params, state, x)
            else:
                state = step(params, state, x)
        except NumericOverflowError as err:
            raise NumericOverflowError(f"timestep {t}: {err}") from err
        states.append(state)
    return states


# --- serialization -------------------------------------------------------

FORMAT_VERSION = 1


def _fmt_float(x: float) -> str:
    return format(float(x), ".17g")


def _fmt_array(arr: np.ndarray) -> str:
    return "[" + ", ".join(_fmt_float(v) for v in np.asarray(arr).ravel(order="C")) + "]"


def cell_to_json(params: AnyParameters) -> str:
    """Serialize to the single-document JSON format (floats at 17 sig digits)."""
    params.validate()
    lines = [
        "{",
        f'  "format_version": {FORMAT_VERSION},',
        f'  "kind": "{params.kind.value}",',
        f'  "m": {params.m},',
        f'  "n": {params.n},',
        f'  "dt": {_fmt_float(params.dt)},',
    ]
    arrays = params.arrays()
    for idx, (name, arr) in enumerate(arrays.items()):
        comma = "," if idx + 1 < len(arrays) else ""
        lines.append(f'  "{name}": {_fmt_array(arr)}{comma}')
    lines.append("}")
    return "\n".join(lines) + "\n"


def cell_from_json(text: str) -> AnyParameters:
    """Inverse of :func:`cell_to_json`; bit-exact at double precision."""
    doc = json.loads(text)
    version = doc.pop("format_version", None)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported format_version {version!r}")
    kind = CellKind(doc.pop("kind"))
    m = int(doc.pop("m"))
    n = int(doc.pop("n"))
    dt = float(doc.pop("dt"))
    shapes = parameter_shapes(kind, m, n)
    arrays: dict[str, np.ndarray] = {}
    for name, shape in shapes.items():
        if name not in doc:
            raise ValueError(f"missing array {name!r} for kind {kind.value}")
        flat = np.asarray(doc.pop(name), dtype=float)
        expected = int(np.prod(shape)) if shape else 1
        if flat.size != expected:
            raise DimensionMismatchError(
                f"{name}: expected {expected} values, got {flat.size}"
            )
        arrays[name] = flat.reshape(shape)
    if doc:
        raise ValueError(f"unknown keys in cell document: {sorted(doc)}")
    if is_gated(kind):
        out: AnyParameters = GatedParameters(kind=kind, m=m, n=n, weights=arrays, dt=dt)
    else:
        out = CellParameters(kind=kind, m=m, n=n, dt=dt, **arrays)
    out.validate()
    return out


def save_cell(params: AnyParameters, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(cell_to_json(params))


def load_cell(path) -> AnyParameters:
    with open(path, "r", encoding="ascii") as fh:
        return cell_from_json(fh.read())
