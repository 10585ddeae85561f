"""Steering policy: conv feature head, recurrent cell, affine readout.

The policy consumes one frame per control step, updates the cell state
with the extracted feature vector, and reads a scalar steering value
from the membrane potentials.  It exposes the rollout controller
interface (reset/act) used by the simulator as well as saliency maps
derived from its own conv activations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .cells import (
    AnyParameters,
    CellKind,
    CellParameters,
    DimensionMismatchError,
    GatedParameters,
    HiddenState,
    cell_from_json,
    cell_to_json,
    init_parameters,
    is_gated,
    step,
    step_gated,
    zero_state,
)
from .perception import (
    FRAME_HEIGHT,
    FRAME_WIDTH,
    ConvHead,
    ConvLayer,
    conv_forward,
    init_conv_head,
    visual_backprop,
)

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class PolicyModel:
    """Conv head (optional) + recurrent cell + scalar affine readout.

    With ``head`` set to None the policy consumes precomputed feature
    vectors of length cell.n directly; this is the configuration used by
    the gradient-check suites.
    """

    head: ConvHead | None
    cell: AnyParameters
    w_out: np.ndarray  # (m,)
    b_out: np.ndarray  # (1,)
    _state: HiddenState | None = field(default=None, repr=False, compare=False)

    @property
    def kind(self) -> CellKind:
        return self.cell.kind

    @property
    def m(self) -> int:
        return self.cell.m

    @property
    def n(self) -> int:
        return self.cell.n

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"cell.{k}": v for k, v in self.cell.arrays().items()}
        if self.head is not None:
            out.update({f"head.{k}": v for k, v in self.head.arrays().items()})
        out["readout.w"] = self.w_out
        out["readout.b"] = self.b_out
        return out

    def copy(self) -> "PolicyModel":
        return PolicyModel(
            head=None if self.head is None else self.head.copy(),
            cell=self.cell.copy(),
            w_out=self.w_out.copy(),
            b_out=self.b_out.copy(),
        )

    def validate(self) -> None:
        self.cell.validate()
        if self.head is not None and self.head.feature_size != self.cell.n:
            raise DimensionMismatchError(
                f"head produces {self.head.feature_size} features but cell expects {self.cell.n}"
            )
        if self.w_out.shape != (self.cell.m,) or self.b_out.shape != (1,):
            raise DimensionMismatchError("readout shapes must be (m,) and (1,)")

    def readout(self, h: np.ndarray) -> np.ndarray:
        return h @ self.w_out + self.b_out[0]

    # --- rollout controller interface ---

    def reset(self) -> None:
        self._state = zero_state(self.cell)

    def act(self, frame: np.ndarray, state=None):
        """One closed-loop control step: frame -> (steering, h, features).

        ``state`` (the vehicle state) is accepted for interface parity
        with the scripted expert and ignored.
        """
        if self._state is None:
            self.reset()
        if self.head is not None:
            features = conv_forward(self.head, np.asarray(frame, dtype=float))
        else:
            features = np.asarray(frame, dtype=float)
        if is_gated(self.cell.kind):
            self._state = step_gated(self.cell, self._state, features)
        else:
            self._state = step(self.cell, self._state, features)
        h = self._state.h
        return float(self.readout(h)), h.copy(), features

    def saliency(self, frame: np.ndarray) -> np.ndarray:
        """Input-resolution relevance map of the conv head for one frame."""
        if self.head is None:
            raise ValueError("saliency requires a conv head")
        _, maps = conv_forward(self.head, np.asarray(frame, dtype=float), keep_maps=True)
        return visual_backprop(maps, (self.head.in_height, self.head.in_width))


def init_policy(
    kind: CellKind,
    rng: np.random.Generator,
    m: int = 19,
    n: int = 64,
    dt: float = 1.0,
    with_head: bool = True,
    in_height: int = FRAME_HEIGHT,
    in_width: int = FRAME_WIDTH,
) -> PolicyModel:
    head = None
    if with_head:
        head = init_conv_head(rng, in_height=in_height, in_width=in_width, feature_size=n)
    cell = init_parameters(kind, m, n, rng, dt=dt)
    s = m ** -0.5
    return PolicyModel(
        head=head,
        cell=cell,
        w_out=rng.uniform(-s, s, size=m),
        b_out=np.zeros(1),
    )


# --- checkpoints ----------------------------------------------------------


def _head_to_doc(head: ConvHead) -> dict:
    return {
        "in_height": head.in_height,
        "in_width": head.in_width,
        "specs": [[l.w.shape[-1], l.w.shape[0], l.stride] for l in head.layers],
        "arrays": {k: v.ravel(order="C").tolist() for k, v in head.arrays().items()},
    }


def _head_from_doc(doc: dict) -> ConvHead:
    layers = []
    arrays = doc["arrays"]
    in_ch = 1
    for idx, (out_ch, kernel, stride) in enumerate(doc["specs"]):
        w = np.asarray(arrays[f"conv{idx}.w"], dtype=float).reshape(
            kernel, kernel, in_ch, out_ch
        )
        b = np.asarray(arrays[f"conv{idx}.b"], dtype=float)
        layers.append(ConvLayer(w=w, b=b, stride=stride))
        in_ch = out_ch
    w_out = np.asarray(arrays["out.w"], dtype=float)
    b_out = np.asarray(arrays["out.b"], dtype=float)
    return ConvHead(
        layers=layers,
        w_out=w_out.reshape(-1, b_out.shape[0]),
        b_out=b_out,
        in_height=doc["in_height"],
        in_width=doc["in_width"],
    )


def checkpoint_to_json(model: PolicyModel, moments: dict | None = None) -> str:
    """Checkpoint document: the cell's own serialization embedded next to
    head, readout, and optional optimizer moments."""
    model.validate()
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "cell": json.loads(cell_to_json(model.cell)),
        "head": None if model.head is None else _head_to_doc(model.head),
        "readout": {
            "w": model.w_out.tolist(),
            "b": model.b_out.tolist(),
        },
        "moments": None,
    }
    if moments is not None:
        doc["moments"] = {
            "t": moments["t"],
            "m": {k: v.ravel(order="C").tolist() for k, v in moments["m"].items()},
            "v": {k: v.ravel(order="C").tolist() for k, v in moments["v"].items()},
        }
    return json.dumps(doc, sort_keys=True) + "\n"


def checkpoint_from_json(text: str) -> tuple[PolicyModel, dict | None]:
    doc = json.loads(text)
    if doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('format_version')!r}")
    cell = cell_from_json(json.dumps(doc["cell"]))
    head = None if doc["head"] is None else _head_from_doc(doc["head"])
    model = PolicyModel(
        head=head,
        cell=cell,
        w_out=np.asarray(doc["readout"]["w"], dtype=float),
        b_out=np.asarray(doc["readout"]["b"], dtype=float),
    )
    model.validate()
    moments = None
    if doc["moments"] is not None:
        shapes = {k: v.shape for k, v in model.arrays().items()}
        moments = {
            "t": int(doc["moments"]["t"]),
            "m": {
                k: np.asarray(v, dtype=float).reshape(shapes[k])
                for k, v in doc["moments"]["m"].items()
            },
            "v": {
                k: np.asarray(v, dtype=float).reshape(shapes[k])
                for k, v in doc["moments"]["v"].items()
            },
        }
    return model, moments


def save_checkpoint(model: PolicyModel, path, moments: dict | None = None) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(checkpoint_to_json(model, moments))


def load_checkpoint(path) -> tuple[PolicyModel, dict | None]:
    with open(path, "r", encoding="ascii") as fh:
        return checkpoint_from_json(fh.read())
