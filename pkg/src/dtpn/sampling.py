"""Multi-rate snippet sampling and pyramid assembly.

An arbitrary-length frame sequence is divided, per scale s, into
K_s = 2^(s-1) * K_1 equal-duration segments; w frames are sampled
uniformly inside each segment and embedded by a backbone into one
d-vector, giving a fixed-size feature pyramid regardless of input length.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dtpn.errors import ConfigError, ValidationError
from dtpn.io_formats import GroundTruthSegment, PyramidFeature


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class SamplingConfig:
    """Pyramid geometry: scale count S, base segment count K_1, window w."""

    scales: int = 5
    base_segments: int = 16
    window: int = 8

    def __post_init__(self):
        if self.scales < 1:
            raise ConfigError("scales must be >= 1")
        if not _is_power_of_two(self.base_segments):
            raise ConfigError(
                f"base_segments must be a power of two, got {self.base_segments}"
            )
        if self.window < 1:
            raise ConfigError("window must be >= 1")

    def segments_at(self, scale: int) -> int:
        if not 1 <= scale <= self.scales:
            raise ConfigError(f"scale {scale} outside [1, {self.scales}]")
        return self.base_segments << (scale - 1)

    @property
    def total_snippets(self) -> int:
        return self.base_segments * ((1 << self.scales) - 1)


@dataclass(frozen=True)
class SnippetPlan:
    """Which w frames feed the backbone for (scale, segment)."""

    scale: int  # 1-based
    segment: int  # 1-based within the scale
    frame_indices: tuple[int, ...]


def segment_bounds(num_frames: int, segments: int) -> list[tuple[int, int]]:
    """Half-open frame ranges [floor((i-1)F/K), floor(iF/K)) tiling [0, F)."""
    return [
        (i * num_frames // segments, (i + 1) * num_frames // segments)
        for i in range(segments)
    ]


def _uniform_indices(first: int, length: int, window: int) -> tuple[int, ...]:
    # Endpoint-inclusive rounded linear spacing; round-half-up in exact
    # integer arithmetic so results never depend on float rounding.
    if length <= 1 or window == 1:
        return (first,) * window
    span = length - 1
    denom = window - 1
    return tuple(first + (2 * j * span + denom) // (2 * denom) for j in range(window))


def plan_snippets(num_frames: int, cfg: SamplingConfig) -> list[SnippetPlan]:
    """All snippet plans, scale-major then segment order.

    Segments shorter than the window repeat frame indices; a segment left
    empty by the floor arithmetic (possible when F < K_s) samples the
    nearest preceding frame so every plan stays valid for any F >= 1.
    """
    if num_frames < 1:
        raise ValidationError("need at least one frame")
    plans = []
    for scale in range(1, cfg.scales + 1):
        for seg, (start, end) in enumerate(
            segment_bounds(num_frames, cfg.segments_at(scale)), start=1
        ):
            if end > start:
                indices = _uniform_indices(start, end - start, cfg.window)
            else:
                indices = (min(start, num_frames - 1),) * cfg.window
            plans.append(SnippetPlan(scale=scale, segment=seg, frame_indices=indices))
    return plans


def feature_rate(fps: float, segments: int, num_frames: int) -> float:
    """Equivalent feature-level sampling rate for one scale."""
    if num_frames <= 0:
        raise ValidationError("num_frames must be > 0")
    return fps * segments / num_frames


class Backbone:
    """Embeds a (window x frame_dim) snippet into a d-vector.

    Implementations must be deterministic: identical snippets map to
    identical vectors.
    """

    dim: int

    def embed(self, snippet: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class SyntheticBackbone(Backbone):
    """Deterministic stand-in for a pretrained video network.

    A seeded fixed random projection of the snippet's mean frame record,
    squashed by tanh.  Same seed, same mapping; different seeds give
    different projections.
    """

    def __init__(self, seed: int, frame_dim: int, dim: int = 32):
        rng = np.random.default_rng(seed)
        self.dim = dim
        self.frame_dim = frame_dim
        self._projection = (
            rng.standard_normal((dim, frame_dim)) / np.sqrt(frame_dim)
        ).astype(np.float32)
        self._bias = (0.1 * rng.standard_normal(dim)).astype(np.float32)

    def embed(self, snippet: np.ndarray) -> np.ndarray:
        snippet = np.asarray(snippet, dtype=np.float32)
        if snippet.ndim != 2 or snippet.shape[1] != self.frame_dim:
            raise ValidationError(
                f"snippet must be (w, {self.frame_dim}), got {snippet.shape}"
            )
        mean = snippet.mean(axis=0)
        return np.tanh(self._projection @ mean + self._bias)


def extract_pyramid(
    source, cfg: SamplingConfig, backbone: Backbone | None = None
) -> PyramidFeature:
    """Assemble the multi-scale input feature.

    source is either a (F x frame_dim) array of frame records (embedded
    snippet by snippet through the backbone) or an already-extracted
    PyramidFeature, which is validated against cfg and passed through
    unchanged.
    """
    if isinstance(source, PyramidFeature):
        if source.num_scales != cfg.scales or source.base_segments != cfg.base_segments:
            raise ConfigError(
                f"feature header (S={source.num_scales}, K1={source.base_segments}) "
                f"does not match config (S={cfg.scales}, K1={cfg.base_segments})"
            )
        return source

    if backbone is None:
        raise ValidationError("a backbone is required to embed raw frames")
    frames = np.asarray(source, dtype=np.float32)
    if frames.ndim != 2:
        raise ValidationError(f"frame source must be (F, frame_dim), got {frames.shape}")

    plans = plan_snippets(frames.shape[0], cfg)
    levels = []
    cursor = 0
    for scale in range(1, cfg.scales + 1):
        count = cfg.segments_at(scale)
        rows = [
            backbone.embed(frames[list(plan.frame_indices)])
            for plan in plans[cursor : cursor + count]
        ]
        cursor += count
        levels.append(np.stack(rows))
    return PyramidFeature(levels)


def temporal_flip(
    pyramid: PyramidFeature, gts: list[GroundTruthSegment]
) -> tuple[PyramidFeature, list[GroundTruthSegment]]:
    """Reverse time: rows of every level, and each segment [a,b] -> [1-b, 1-a].

    Supervision co-transforms with the features; applying the flip twice is
    the identity on both.
    """
    flipped = PyramidFeature([lv[::-1].copy() for lv in pyramid.levels])
    flipped_gts = [
        GroundTruthSegment(
            label_index=gt.label_index, start=1.0 - gt.end, end=1.0 - gt.start
        )
        for gt in gts
    ]
    return flipped, flipped_gts


def load_frames(path, frame_dim: int) -> np.ndarray:
    """Read a raw binary frame source: F rows of frame_dim float32 LE.

    A directory is also accepted: every file in it, in sorted name order,
    is one frame record of frame_dim float32 values.
    """
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"frame source {path} does not exist")
    if path.is_dir():
        rows = []
        for child in sorted(path.iterdir()):
            rec = np.frombuffer(child.read_bytes(), dtype="<f4")
            if rec.size != frame_dim:
                raise ValidationError(
                    f"{child}: frame record has {rec.size} values, expected {frame_dim}"
                )
            rows.append(rec)
        if not rows:
            raise ValidationError(f"frame directory {path} is empty")
        return np.stack(rows)
    raw = path.read_bytes()
    if len(raw) == 0 or len(raw) % (4 * frame_dim) != 0:
        raise ValidationError(
            f"{path}: {len(raw)} bytes is not a whole number of "
            f"{frame_dim}-float frame records"
        )
    return np.frombuffer(raw, dtype="<f4").reshape(-1, frame_dim).copy()


def write_frames(path, frames: np.ndarray) -> None:
    Path(path).write_bytes(np.ascontiguousarray(frames, dtype="<f4").tobytes())
