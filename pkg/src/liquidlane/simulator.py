"""Procedural lane-keeping environment.

A road is a 1 m-spaced curvature profile built from seeded raised-cosine
bumps.  The vehicle is a constant-speed kinematic point with lateral
offset d and heading error psi relative to the road centerline; the
camera renders a 48x160 strip image whose rows are log-spaced lookahead
slices of the road ahead.  Sign conventions are ISO-style: positive d is
left of the centerline, positive psi heads left, positive curvature
turns left.

A scripted lookahead-PD controller provides expert demonstrations, and
open-loop imitation windows are cut from its rollouts.  Closed-loop
evaluation feeds the policy's own steering back into the kinematics.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .io_utils import load_array_gz, save_array_gz
from .perception import (
    FRAME_HEIGHT,
    FRAME_WIDTH,
    add_gaussian_noise,
    save_image_png,
)

LANE_HALF_WIDTH = 2.0  # meters; |d| >= this is a crash
SPEED = 10.0  # m/s, constant
SIM_DT = 0.1  # seconds per control step
U_MAX = 0.5  # rad/s yaw authority at |steering| = 1
KAPPA_MAX = 0.05  # 1/m default curvature bound
MAX_DKAPPA = 0.005  # curvature continuity bound per 1 m sample
# Steady steering for kappa = U_MAX / v saturates the command; accepted
# roads keep 15% authority in reserve so the PD expert can still correct.
ROAD_SATURATION_HEADROOM = 0.85
# PD tracking error grows with the curvature ramp rate (d_ss ~ 200 * slope
# at v = 10); this keeps the expert within 0.5 m of the centerline.
ROAD_SLOPE_LIMIT = 0.0015

EXPERT_LOOKAHEAD = 8.0  # meters
EXPERT_K_D = 0.4
EXPERT_K_PSI = 1.5

FOCAL = 60.0  # pixels; column scale of the strip projection
LOOKAHEAD_NEAR = 2.0  # meters, bottom image row
LOOKAHEAD_FAR = 50.0  # meters, top image row
CENTER_COL = (FRAME_WIDTH - 1) / 2.0

SEASONS = ("summer", "winter")
# (background, road, boundary-edge) intensities per season.
_PALETTE = {"summer": (0.35, 0.60, 0.05), "winter": (0.85, 0.75, 0.30)}
_WINTER_SPECKLE = 0.05


@dataclass
class RoadProfile:
    """Curvature profile kappa(s) on a 1 m arc-length grid."""

    s: np.ndarray
    kappa: np.ndarray
    season: str = "summer"

    @property
    def length(self) -> float:
        return float(self.s[-1])

    def curvature(self, s_query):
        return np.interp(s_query, self.s, self.kappa)


@dataclass
class VehicleState:
    s: float = 0.0
    d: float = 0.0
    psi: float = 0.0
    v: float = SPEED


def generate_road(
    seed: int,
    length: float = 1000.0,
    kappa_max: float = KAPPA_MAX,
    smoothness: float = 1.0,
    season: str = "summer",
) -> RoadProfile:
    """Seeded road with 8-20 raised-cosine curvature bumps.

    Bump amplitude scales with 1/smoothness; smoothness = inf gives the
    exact straight road.  Finite-smoothness roads are rejection-sampled
    until the continuity bound holds and both turn directions reach
    |kappa| >= 0.5 * kappa_max; infeasible settings raise ValueError.
    """
    if length < 10.0:
        raise ValueError(f"road length must be >= 10 m, got {length}")
    if season not in SEASONS:
        raise ValueError(f"unknown season {season!r}")
    if not smoothness > 0:
        raise ValueError(f"smoothness must be positive, got {smoothness}")
    s = np.arange(int(math.floor(length)) + 1, dtype=float)
    if math.isinf(smoothness):
        return RoadProfile(s=s, kappa=np.zeros_like(s), season=season)
    rng = np.random.default_rng(seed)
    width_lo = max(60.0, 0.08 * length)
    width_hi = width_lo + max(40.0, 0.10 * length)
    cap = min(kappa_max, ROAD_SATURATION_HEADROOM * U_MAX / SPEED)
    slope = min(MAX_DKAPPA, ROAD_SLOPE_LIMIT)
    for _ in range(200):
        count = int(rng.integers(8, 21))
        centers = rng.uniform(0.0, length, count)
        widths = rng.uniform(width_lo, width_hi, count)
        signs = rng.choice([-1.0, 1.0], count)
        amps = rng.uniform(0.5, 1.0, count) * kappa_max / smoothness
        target = rng.uniform(0.8, 1.0) * cap
        kappa = np.zeros_like(s)
        for c, w, sign, amp in zip(centers, widths, signs, amps):
            mask = np.abs(s - c) < w
            kappa[mask] += sign * amp * 0.5 * (1.0 + np.cos(np.pi * (s[mask] - c) / w))
        peak = np.abs(kappa).max()
        if peak > target:  # scale down only, so high smoothness stays gentle
            kappa *= target / peak
        kappa = np.clip(kappa, -kappa_max, kappa_max)
        if np.abs(np.diff(kappa)).max() > slope:
            continue
        if kappa.max() < 0.5 * kappa_max or kappa.min() > -0.5 * kappa_max:
            continue
        return RoadProfile(s=s, kappa=kappa, season=season)
    raise ValueError(
        f"no road satisfying curvature bounds for kappa_max={kappa_max}, "
        f"smoothness={smoothness}"
    )


def centerline_points(road: RoadProfile) -> np.ndarray:
    """Polyline reconstruction (K, 2) of the road centerline; segment k
    has heading sum(kappa[:k]) * 1 m exactly."""
    headings = np.concatenate([[0.0], np.cumsum(road.kappa[:-1])])
    x = np.concatenate([[0.0], np.cumsum(np.cos(headings))])
    y = np.concatenate([[0.0], np.cumsum(np.sin(headings))])
    return np.stack([x, y], axis=1)


def vehicle_step(
    state: VehicleState, steering: float, road: RoadProfile, dt: float = SIM_DT
) -> VehicleState:
    """Kinematic update; steering is normalized and clamped to [-1, 1]."""
    steer = float(np.clip(steering, -1.0, 1.0))
    kappa = float(road.curvature(state.s))
    return VehicleState(
        s=state.s + state.v * math.cos(state.psi) * dt,
        d=state.d + state.v * math.sin(state.psi) * dt,
        psi=state.psi + (steer * U_MAX - kappa * state.v) * dt,
        v=state.v,
    )


def in_lane(state: VehicleState) -> bool:
    return abs(state.d) < LANE_HALF_WIDTH


def expert_steer(road: RoadProfile, state: VehicleState) -> float:
    """Lookahead-PD controller: feedforward on curvature 8 m ahead plus
    proportional corrections on offset and heading error."""
    kappa_ahead = float(road.curvature(state.s + EXPERT_LOOKAHEAD))
    raw = (
        kappa_ahead * state.v - EXPERT_K_D * state.d - EXPERT_K_PSI * state.psi
    ) / U_MAX
    return float(np.clip(raw, -1.0, 1.0))


def _row_lookaheads() -> np.ndarray:
    # top row = far, bottom row = near
    return np.geomspace(LOOKAHEAD_FAR, LOOKAHEAD_NEAR, FRAME_HEIGHT)


def boundary_columns(
    road: RoadProfile, state: VehicleState
) -> tuple[np.ndarray, np.ndarray]:
    """Float image columns of the (left, right) lane boundary per row.

    Row r looks L_r meters ahead; the centerline's lateral offset there
    is integrated from the curvature profile, and boundaries at +-W are
    projected with column = center - focal * lateral / L_r.
    """
    lookaheads = _row_lookaheads()
    u = np.arange(int(math.ceil(LOOKAHEAD_FAR)) + 1, dtype=float)
    kappa_ahead = road.curvature(state.s + u)
    headings = np.concatenate([[0.0], np.cumsum(kappa_ahead[:-1])])
    offsets = np.concatenate([[0.0], np.cumsum(np.sin(headings[:-1]))])
    center = np.interp(lookaheads, u, offsets)
    cos_psi = math.cos(state.psi)
    sin_psi = math.sin(state.psi)
    lat_left = (center + LANE_HALF_WIDTH - state.d) * cos_psi - lookaheads * sin_psi
    lat_right = (center - LANE_HALF_WIDTH - state.d) * cos_psi - lookaheads * sin_psi
    col_left = CENTER_COL - FOCAL * lat_left / lookaheads
    col_right = CENTER_COL - FOCAL * lat_right / lookaheads
    return col_left, col_right


def render_camera(
    road: RoadProfile, state: VehicleState, season: str | None = None, seed=0
) -> np.ndarray:
    """Strip-camera frame (48, 160) in [0, 1]; deterministic per (state, seed)."""
    season = season or road.season
    if season not in SEASONS:
        raise ValueError(f"unknown season {season!r}")
    background, road_value, edge_value = _PALETTE[season]
    col_left, col_right = boundary_columns(road, state)
    grid = np.arange(FRAME_WIDTH, dtype=float)[None, :]
    img = np.full((FRAME_HEIGHT, FRAME_WIDTH), background)
    road_mask = (grid >= col_left[:, None]) & (grid <= col_right[:, None])
    img[road_mask] = road_value
    edge_mask = (np.abs(grid - col_left[:, None]) <= 1.0) | (
        np.abs(grid - col_right[:, None]) <= 1.0
    )
    img[edge_mask] = edge_value
    if season == "winter":
        rng = np.random.default_rng(seed)
        img = img + _WINTER_SPECKLE * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


class ExpertController:
    """Rollout controller that ignores the frame and steers from the
    true vehicle state; hidden-state length 0."""

    m = 0

    def __init__(self, road: RoadProfile):
        self.road = road

    def reset(self) -> None:
        pass

    def act(self, frame: np.ndarray, state: VehicleState):
        steering = expert_steer(self.road, state)
        return steering, np.empty(0), None


@dataclass
class EpisodeTrace:
    """Time-indexed record of one rollout (arrays share length T)."""

    t: np.ndarray
    s: np.ndarray
    d: np.ndarray
    psi: np.ndarray
    pred: np.ndarray
    expert: np.ndarray
    kappa: np.ndarray
    h: np.ndarray  # (T, m)
    season: str
    road_length: float
    completed: bool
    crash_step: int | None = None
    frames: np.ndarray | None = None  # (T, 48, 160) float32
    features: np.ndarray | None = None  # (T, n)

    def __len__(self) -> int:
        return self.t.shape[0]

    @property
    def fraction_completed(self) -> float:
        if len(self) == 0:
            return 0.0
        reached = self.s[-1] + SPEED * math.cos(self.psi[-1]) * SIM_DT
        return min(1.0, float(reached) / self.road_length)


def rollout_closed_loop(
    policy,
    road: RoadProfile,
    noise_variance: float = 0.0,
    seed: int = 0,
    season: str | None = None,
    start_d: float = 0.0,
    keep_frames: bool = False,
    keep_features: bool = False,
) -> EpisodeTrace:
    """Drive the road under a controller; stops at the road end or when
    the lane is left (recorded as a crash, not an error).

    The controller sees the rendered (optionally noisy) frame; the
    scripted expert wrapper additionally reads the true state.
    """
    season = season or road.season
    policy.reset()
    state = VehicleState(s=0.0, d=float(start_d), psi=0.0)
    max_steps = int(math.ceil(road.length / (SPEED * SIM_DT) * 1.5)) + 10
    rows = {k: [] for k in ("t", "s", "d", "psi", "pred", "expert", "kappa")}
    hs = []
    frames = [] if keep_frames else None
    feats = [] if keep_features else None
    completed = False
    crash_step = None
    for t in range(max_steps):
        if state.s >= road.length:
            completed = True
            break
        if not in_lane(state):
            crash_step = t
            break
        frame = render_camera(road, state, season, seed=np.random.SeedSequence((seed, 2, t)))
        if noise_variance > 0:
            frame = add_gaussian_noise(
                frame, noise_variance, np.random.SeedSequence((seed, 3, t))
            )
        steering, h_vec, features = policy.act(frame, state)
        rows["t"].append(t)
        rows["s"].append(state.s)
        rows["d"].append(state.d)
        rows["psi"].append(state.psi)
        rows["pred"].append(float(steering))
        rows["expert"].append(expert_steer(road, state))
        rows["kappa"].append(float(road.curvature(state.s + EXPERT_LOOKAHEAD)))
        hs.append(np.asarray(h_vec, dtype=float))
        if keep_frames:
            frames.append(frame.astype(np.float32))
        if keep_features and features is not None:
            feats.append(np.asarray(features, dtype=float))
        state = vehicle_step(state, steering, road)
    m = hs[0].shape[0] if hs else 0
    return EpisodeTrace(
        t=np.asarray(rows["t"], dtype=int),
        s=np.asarray(rows["s"]),
        d=np.asarray(rows["d"]),
        psi=np.asarray(rows["psi"]),
        pred=np.asarray(rows["pred"]),
        expert=np.asarray(rows["expert"]),
        kappa=np.asarray(rows["kappa"]),
        h=np.asarray(hs).reshape(len(hs), m),
        season=season,
        road_length=road.length,
        completed=completed,
        crash_step=crash_step,
        frames=np.asarray(frames, dtype=np.float32) if keep_frames else None,
        features=np.asarray(feats) if (keep_features and feats) else None,
    )


def rollout_expert(
    road: RoadProfile,
    season: str | None = None,
    seed: int = 0,
    start_d: float = 0.0,
    keep_frames: bool = True,
) -> EpisodeTrace:
    return rollout_closed_loop(
        ExpertController(road),
        road,
        noise_variance=0.0,
        seed=seed,
        season=season,
        start_d=start_d,
        keep_frames=keep_frames,
    )


# --- dataset -------------------------------------------------------------


@dataclass
class LaneDataset:
    """Sliding-window imitation dataset over expert traces.

    Windows are (trace index, start step) pairs; frames stay stored once
    per trace.  Splits are contiguous 70/15/15 segments of each trace
    and windows crossing a boundary are dropped, so the splits share no
    frame index.
    """

    traces: list[EpisodeTrace]
    window: int
    train: list[tuple[int, int]] = field(default_factory=list)
    val: list[tuple[int, int]] = field(default_factory=list)
    test: list[tuple[int, int]] = field(default_factory=list)

    def split(self, name: str) -> list[tuple[int, int]]:
        return {"train": self.train, "val": self.val, "test": self.test}[name]

    def batch(self, windows) -> tuple[np.ndarray, np.ndarray]:
        """(frames (B, T, H, W) float32, expert targets (B, T))."""
        frames = np.stack(
            [self.traces[ti].frames[start : start + self.window] for ti, start in windows]
        )
        targets = np.stack(
            [self.traces[ti].expert[start : start + self.window] for ti, start in windows]
        )
        return frames, targets


def build_dataset(
    traces: list[EpisodeTrace],
    window: int = 32,
    stride: int = 16,
    split_fractions: tuple[float, float] = (0.7, 0.85),
) -> LaneDataset:
    """Cut stride-spaced windows from each trace and split them 70/15/15
    by contiguous segments (boundary-crossing windows dropped)."""
    dataset = LaneDataset(traces=traces, window=window)
    for ti, trace in enumerate(traces):
        steps = len(trace)
        if steps < window:
            raise ValueError(f"trace {ti} has {steps} steps, shorter than window {window}")
        if trace.frames is None:
            raise ValueError(f"trace {ti} was recorded without frames")
        b1 = int(math.floor(split_fractions[0] * steps))
        b2 = int(math.floor(split_fractions[1] * steps))
        # windows slide within each contiguous segment so short val/test
        # segments still yield samples; none crosses a boundary
        segments = ((0, b1, dataset.train), (b1, b2, dataset.val), (b2, steps, dataset.test))
        for lo, hi, windows in segments:
            for start in range(lo, hi - window + 1, stride):
                windows.append((ti, start))
    return dataset


def window_count(steps: int, window: int = 32, stride: int = 16) -> int:
    """Number of stride-spaced windows over a trace, before splitting."""
    if steps < window:
        return 0
    return (steps - window) // stride + 1


# --- persistence ---------------------------------------------------------

_TRACE_CSV_BASE = ("t", "s", "d", "psi", "pred", "expert", "kappa")


def save_road(road: RoadProfile, path) -> None:
    doc = {
        "format_version": 1,
        "season": road.season,
        "spacing": 1.0,
        "kappa": [float(v) for v in road.kappa],
    }
    with open(path, "w", encoding="ascii") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_road(path) -> RoadProfile:
    with open(path, "r", encoding="ascii") as fh:
        doc = json.load(fh)
    if doc.get("format_version") != 1:
        raise ValueError(f"unsupported road format {doc.get('format_version')!r}")
    kappa = np.asarray(doc["kappa"], dtype=float)
    spacing = float(doc["spacing"])
    s = np.arange(kappa.shape[0], dtype=float) * spacing
    return RoadProfile(s=s, kappa=kappa, season=doc["season"])


def save_trace(
    trace: EpisodeTrace, directory, png_samples: int = 0, save_frames: bool = True
) -> None:
    """Persist a trace directory: scalars.csv (+h columns), meta.json,
    a compressed frame stack when frames were kept, optional sample PNGs."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    m = trace.h.shape[1]
    header = list(_TRACE_CSV_BASE) + [f"h_{i}" for i in range(m)]
    with open(directory / "scalars.csv", "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for idx in range(len(trace)):
            row = [int(trace.t[idx])] + [
                format(getattr(trace, name)[idx], ".17g")
                for name in _TRACE_CSV_BASE[1:]
            ]
            row += [format(v, ".17g") for v in trace.h[idx]]
            writer.writerow(row)
    meta = {
        "format_version": 1,
        "season": trace.season,
        "road_length": trace.road_length,
        "completed": trace.completed,
        "crash_step": trace.crash_step,
        "m": m,
    }
    with open(directory / "meta.json", "w", encoding="ascii") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if trace.frames is not None:
        if save_frames:
            save_array_gz(directory / "frames.npy.gz", trace.frames)
        for k in range(min(png_samples, len(trace))):
            idx = k * max(1, len(trace) // max(1, png_samples))
            save_image_png(trace.frames[idx], directory / f"frame_{idx:05d}.png")


def load_trace(directory, load_frames: bool = False) -> EpisodeTrace:
    directory = Path(directory)
    with open(directory / "meta.json", "r", encoding="ascii") as fh:
        meta = json.load(fh)
    with open(directory / "scalars.csv", "r", newline="", encoding="ascii") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        data = np.asarray([[float(v) for v in row] for row in reader])
    m = int(meta["m"])
    expected = list(_TRACE_CSV_BASE) + [f"h_{i}" for i in range(m)]
    if header != expected:
        raise ValueError(f"unexpected trace header {header}")
    if data.size == 0:
        data = data.reshape(0, len(expected))
    cols = {name: data[:, i] for i, name in enumerate(_TRACE_CSV_BASE)}
    frames = None
    if load_frames and (directory / "frames.npy.gz").exists():
        frames = load_array_gz(directory / "frames.npy.gz")
    return EpisodeTrace(
        t=cols["t"].astype(int),
        s=cols["s"],
        d=cols["d"],
        psi=cols["psi"],
        pred=cols["pred"],
        expert=cols["expert"],
        kappa=cols["kappa"],
        h=data[:, len(_TRACE_CSV_BASE) :],
        season=meta["season"],
        road_length=float(meta["road_length"]),
        completed=bool(meta["completed"]),
        crash_step=meta["crash_step"],
        frames=frames,
    )
