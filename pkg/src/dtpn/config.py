"""Run configuration: library defaults, plain-text config files, overrides.

Config files are line-oriented ``section.key = value`` with ``#`` comments.
Every recognized key mirrors one field of the dataclasses below; unknown
keys are rejected with their line number.  The shipped configs/default.conf
spells out the same defaults these dataclasses carry.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

from dtpn.errors import ConfigError
from dtpn.model import ModelConfig
from dtpn.sampling import SamplingConfig
from dtpn.train import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    sampling: SamplingConfig
    train: TrainConfig
    frame_dim: int = 16
    feature_dim: int = 32
    branch_filters: int = 64
    head_kernel: int = 3
    branch: str = "both"
    nms_threshold: float = 0.5
    top_k: int = 100
    score_floor: float = 0.005

    def model_config(self, num_classes: int) -> ModelConfig:
        return ModelConfig(
            num_classes=num_classes,
            scales=self.sampling.scales,
            base_segments=self.sampling.base_segments,
            feature_dim=self.feature_dim,
            branch_filters=self.branch_filters,
            head_kernel=self.head_kernel,
            branch=self.branch,
        )


def default_run_config() -> RunConfig:
    return RunConfig(sampling=SamplingConfig(), train=TrainConfig())


# key -> (owner, field, type); owner "sampling"/"train" live on sub-configs
_KEYS = {
    "sampling.scales": ("sampling", "scales", int),
    "sampling.base_segments": ("sampling", "base_segments", int),
    "sampling.window": ("sampling", "window", int),
    "sampling.frame_dim": ("run", "frame_dim", int),
    "model.feature_dim": ("run", "feature_dim", int),
    "model.branch_filters": ("run", "branch_filters", int),
    "model.head_kernel": ("run", "head_kernel", int),
    "model.branch": ("run", "branch", str),
    "train.epochs_hi": ("train", "epochs_hi", int),
    "train.epochs_lo": ("train", "epochs_lo", int),
    "train.lr_hi": ("train", "lr_hi", float),
    "train.lr_lo": ("train", "lr_lo", float),
    "train.match_threshold": ("train", "match_threshold", float),
    "train.neg_pos_ratio": ("train", "neg_pos_ratio", int),
    "train.weight_cls": ("train", "weight_cls", float),
    "train.weight_loc": ("train", "weight_loc", float),
    "train.weight_act": ("train", "weight_act", float),
    "train.batch_size": ("train", "batch_size", int),
    "train.seed": ("train", "seed", int),
    "train.flip_prob": ("train", "flip_prob", float),
    "detect.nms_threshold": ("run", "nms_threshold", float),
    "detect.top_k": ("run", "top_k", int),
    "detect.score_floor": ("run", "score_floor", float),
}


def parse_run_config(text: str, where: str = "<config>") -> RunConfig:
    """Parse config text on top of the library defaults."""
    groups: dict[str, dict[str, object]] = {"sampling": {}, "train": {}, "run": {}}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{where}:{lineno}: expected 'section.key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"{where}:{lineno}: unknown config key {key!r}")
        owner, field_name, typ = _KEYS[key]
        try:
            groups[owner][field_name] = typ(value)
        except ValueError as e:
            raise ConfigError(
                f"{where}:{lineno}: bad value {value!r} for {key}: {e}"
            ) from e

    base = default_run_config()
    sampling = replace(base.sampling, **groups["sampling"])
    train = replace(base.train, **groups["train"])
    return replace(base, sampling=sampling, train=train, **groups["run"])


def load_run_config(path=None) -> RunConfig:
    """Load a config file, or the defaults when no path is given."""
    if path is None:
        return default_run_config()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return parse_run_config(path.read_text(), where=str(path))
