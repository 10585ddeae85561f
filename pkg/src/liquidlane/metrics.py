"""Interpretability measurements: correlation tables, SSIM, robustness.

Neuron activity is compared to a reference sequence (the policy's own
steering predictions by default, road curvature optionally) through the
absolute lag-0 Pearson correlation.  Saliency robustness is measured as
the SSIM between the saliency of a clean frame and the saliency of the
same frame under additive Gaussian pixel noise.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .cells import DimensionMismatchError
from .perception import add_gaussian_noise

# Correlation benchmarks measured on real driving footage (mean, std per
# season and cell kind).  Desk-scale results are reported next to these
# for directional comparison only; the synthetic task need not match.
REAL_ROAD_REFERENCE = {
    "summer": {
        "LSTM": (0.450, 0.282),
        "GRU": (0.395, 0.269),
        "MGU": (0.383, 0.253),
        "CTRNN": (0.390, 0.267),
        "LTC": (0.666, 0.296),
        "LC_NA": (0.477, 0.243),
        "LC_SA": (0.462, 0.273),
        "LRC_NA": (0.652, 0.293),
        "LRC_SA": (0.645, 0.321),
    },
    "winter": {
        "LSTM": (0.434, 0.285),
        "GRU": (0.368, 0.274),
        "MGU": (0.411, 0.269),
        "CTRNN": (0.315, 0.243),
        "LTC": (0.662, 0.274),
        "LC_NA": (0.428, 0.254),
        "LC_SA": (0.533, 0.246),
        "LRC_NA": (0.693, 0.292),
        "LRC_SA": (0.766, 0.243),
    },
}

_DEGENERATE_VAR = 0.0


def _pearson_abs(x: np.ndarray, y: np.ndarray) -> tuple[float, bool]:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise DimensionMismatchError(f"sequence shapes differ: {x.shape} vs {y.shape}")
    if x.size < 2:
        raise DimensionMismatchError("correlation needs at least 2 samples")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = float(dx @ dx)
    sy = float(dy @ dy)
    if sx <= _DEGENERATE_VAR or sy <= _DEGENERATE_VAR:
        return 0.0, True
    r = abs(float(dx @ dy)) / np.sqrt(sx * sy)
    return min(r, 1.0), False


def abs_correlation(x: np.ndarray, y: np.ndarray) -> float:
    """|Pearson correlation at lag 0| in [0, 1]; 0 for constant input."""
    return _pearson_abs(x, y)[0]


@dataclass
class CorrelationTable:
    """Per-neuron |correlation| values for a set of rollouts."""

    reference: str
    per_run: list[np.ndarray]  # each (m,)
    degenerate: list[np.ndarray]  # each (m,) bool

    @property
    def values(self) -> np.ndarray:
        return np.concatenate(self.per_run) if self.per_run else np.empty(0)

    @property
    def mean(self) -> float:
        return float(self.values.mean()) if self.values.size else 0.0

    @property
    def std(self) -> float:
        return float(self.values.std()) if self.values.size else 0.0

    def to_dict(self) -> dict:
        return {
            "reference": self.reference,
            "per_run": [run.tolist() for run in self.per_run],
            "degenerate": [d.astype(int).tolist() for d in self.degenerate],
            "mean": self.mean,
            "std": self.std,
        }


def correlation_table(traces, reference: str = "prediction") -> CorrelationTable:
    """Per-neuron |corr| of hidden activity against a reference sequence.

    ``traces`` is a non-empty iterable of EpisodeTrace-like objects with
    ``h`` (T, m), ``pred`` (T,) and ``kappa`` (T,) fields.
    """
    if reference not in ("prediction", "curvature"):
        raise ValueError(f"unknown reference {reference!r}")
    traces = list(traces)
    if not traces:
        raise ValueError("correlation_table requires at least one trace")
    per_run = []
    degenerate = []
    for trace in traces:
        ref = trace.pred if reference == "prediction" else trace.kappa
        m = trace.h.shape[1]
        vals = np.empty(m)
        flags = np.empty(m, dtype=bool)
        for i in range(m):
            vals[i], flags[i] = _pearson_abs(trace.h[:, i], ref)
        per_run.append(vals)
        degenerate.append(flags)
    return CorrelationTable(reference=reference, per_run=per_run, degenerate=degenerate)


# --- SSIM ----------------------------------------------------------------

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01) ** 2  # (0.01 * L)^2 with dynamic range L = 1
SSIM_C2 = (0.03) ** 2


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    offsets = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(offsets ** 2) / (2.0 * sigma ** 2))
    window = np.outer(g, g)
    return window / window.sum()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    kh, kw = kernel.shape
    ho = img.shape[0] - kh + 1
    wo = img.shape[1] - kw + 1
    out = np.zeros((ho, wo))
    for i in range(kh):
        for j in range(kw):
            out += kernel[i, j] * img[i : i + ho, j : j + wo]
    return out


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity over 11x11 Gaussian windows (sigma 1.5).

    Images smaller than the window fall back to one uniform global
    window.  Result is in [-1, 1]; identical images give exactly 1.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 2:
        raise DimensionMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape) < SSIM_WINDOW:
        window = np.full(a.shape, 1.0 / a.size)
    else:
        window = _gaussian_window()
    mu_a = _filter_valid(a, window)
    mu_b = _filter_valid(b, window)
    aa = _filter_valid(a * a, window)
    bb = _filter_valid(b * b, window)
    ab = _filter_valid(a * b, window)
    var_a = aa - mu_a * mu_a
    var_b = bb - mu_b * mu_b
    cov = ab - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float((num / den).mean())


def ssim_robustness(
    policy,
    frames,
    variances=(0.1, 0.2),
    seed: int = 0,
) -> dict[float, np.ndarray]:
    """SSIM(saliency(frame), saliency(noisy frame)) samples per variance.

    ``policy`` is either a callable frame -> saliency map or an object
    with a ``saliency`` method.  For each frame the same standard-normal
    draw is scaled per variance, so degradation is monotone in variance
    by construction of the noise.
    """
    saliency = policy if callable(policy) else policy.saliency
    frames = list(frames)
    out = {float(v): np.empty(len(frames)) for v in variances}
    for idx, frame in enumerate(frames):
        clean = saliency(frame)
        for v in variances:
            noisy = add_gaussian_noise(frame, float(v), np.random.SeedSequence((seed, idx)))
            out[float(v)][idx] = ssim(clean, saliency(noisy))
    return out


# --- report --------------------------------------------------------------

REPORT_FORMAT_VERSION = 1


@dataclass
class MetricsReport:
    """Aggregated interpretability results for a set of evaluated models.

    ``correlations`` maps "KIND/season" to a CorrelationTable dict;
    ``ssim_samples`` holds one row per (model, season, variance, frame);
    ``losses`` maps "KIND" to history-derived loss values.
    """

    correlations: dict[str, dict] = field(default_factory=dict)
    ssim_samples: list[dict] = field(default_factory=list)
    losses: dict[str, dict] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def add_correlations(self, model: str, season: str, table: CorrelationTable) -> None:
        self.correlations[f"{model}/{season}"] = table.to_dict()

    def add_ssim_samples(
        self, model: str, season: str, samples: dict[float, np.ndarray]
    ) -> None:
        for variance in sorted(samples):
            for frame_index, value in enumerate(samples[variance]):
                self.ssim_samples.append(
                    {
                        "model": model,
                        "season": season,
                        "variance": float(variance),
                        "frame_index": int(frame_index),
                        "ssim": float(value),
                    }
                )

    def ssim_values(self, model: str, season: str, variance: float) -> np.ndarray:
        picked = [
            row["ssim"]
            for row in self.ssim_samples
            if row["model"] == model
            and row["season"] == season
            and row["variance"] == variance
        ]
        return np.asarray(picked)

    def to_dict(self) -> dict:
        return {
            "format_version": REPORT_FORMAT_VERSION,
            "correlations": self.correlations,
            "ssim_samples": self.ssim_samples,
            "losses": self.losses,
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        doc = json.loads(text)
        if doc.get("format_version") != REPORT_FORMAT_VERSION:
            raise ValueError(f"unsupported report version {doc.get('format_version')!r}")
        return cls(
            correlations=doc["correlations"],
            ssim_samples=doc["ssim_samples"],
            losses=doc["losses"],
            metadata=doc["metadata"],
        )

    def write_ssim_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="ascii") as fh:
            writer = csv.writer(fh)
            writer.writerow(["model", "season", "variance", "frame_index", "ssim"])
            for row in self.ssim_samples:
                writer.writerow(
                    [
                        row["model"],
                        row["season"],
                        repr(row["variance"]),  # shortest exact form
                        row["frame_index"],
                        format(row["ssim"], ".17g"),
                    ]
                )
