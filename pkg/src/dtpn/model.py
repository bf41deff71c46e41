"""The detection network: two-branch multi-scale hierarchy, context
enhancement, anchor layout and prediction heads.

Data flow per forward pass, all on (time x channel) Grad2 buffers:

  pyramid (S levels, K_s x d)
    conv branch: per-scale Conv1D+ReLU to (L_1 x filters), channel concat,
                 then stacked k=3 s=2 Conv1D+ReLU halving time to 1
    pool branch: per-scale max pool to (L_1 x d), channel concat, then
                 window-2 max pools halving time to 1
  fuse: channel concat per level  ->  N maps, L_i halving, L_N = 1
  enhance: each level gains a local block (next level, cells duplicated)
           and a global block (the last map, tiled); the last level uses
           itself for both so every level has the same 3-block layout
  heads: one Conv1D per level, (1 + M + 2) channels: activity logit,
         class logits, center offset, log-length offset

The backward pass walks the same graph in reverse by hand; gradients
accumulate into Grad2.grad and layer parameter buffers.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dtpn.errors import ConfigError, FormatError, ValidationError
from dtpn.io_formats import PyramidFeature
from dtpn.tensor import (
    DEFAULT_DTYPE,
    Conv1D,
    Grad2,
    concat_channels,
    concat_channels_backward,
    maxpool1d,
    maxpool1d_backward,
    relu,
    relu_backward,
)

CHECKPOINT_MAGIC = b"DTPM"
CHECKPOINT_VERSION = 1
BRANCH_MODES = ("both", "conv", "pool")
HEAD_EXTRA = 3  # activity logit + (center, log-length) offsets


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    scales: int = 5
    base_segments: int = 16
    feature_dim: int = 32
    branch_filters: int = 64
    head_kernel: int = 3
    branch: str = "both"

    def __post_init__(self):
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.scales < 1:
            raise ConfigError("scales must be >= 1")
        if self.base_segments < 1 or self.base_segments & (self.base_segments - 1):
            raise ConfigError("base_segments must be a power of two")
        if self.feature_dim < 1 or self.branch_filters < 1 or self.head_kernel < 1:
            raise ConfigError("feature_dim, branch_filters, head_kernel must be >= 1")
        if self.branch not in BRANCH_MODES:
            raise ConfigError(f"branch must be one of {BRANCH_MODES}")

    @property
    def depth(self) -> int:
        """Hierarchy depth N: time dims halve from base_segments down to 1."""
        return self.base_segments.bit_length()

    def level_lengths(self) -> list[int]:
        return [self.base_segments >> i for i in range(self.depth)]

    @property
    def conv_width(self) -> int:
        return self.scales * self.branch_filters

    @property
    def pool_width(self) -> int:
        return self.scales * self.feature_dim

    @property
    def fused_width(self) -> int:
        if self.branch == "conv":
            return self.conv_width
        if self.branch == "pool":
            return self.pool_width
        return self.conv_width + self.pool_width

    @property
    def head_in_width(self) -> int:
        # own features + local context block + global context block
        return 3 * self.fused_width

    @property
    def head_out_width(self) -> int:
        return self.num_classes + HEAD_EXTRA

    @property
    def num_anchors(self) -> int:
        return 2 * self.base_segments - 1


@dataclass(frozen=True)
class Anchor:
    """Default temporal span: cell j at level i spans [j, j+1] / L_i."""

    level: int  # 1-based
    cell: int  # 0-based
    center: float
    length: float

    @property
    def interval(self) -> tuple[float, float]:
        half = 0.5 * self.length
        return self.center - half, self.center + half


def layout_anchors(cfg: ModelConfig) -> list[Anchor]:
    """Anchors ordered by (level, cell); at each level they tile [0, 1]."""
    anchors = []
    for level, length in enumerate(cfg.level_lengths(), start=1):
        for cell in range(length):
            anchors.append(
                Anchor(
                    level=level,
                    cell=cell,
                    center=(cell + 0.5) / length,
                    length=1.0 / length,
                )
            )
    return anchors


@dataclass(frozen=True)
class AnchorPrediction:
    """Raw head outputs for one anchor."""

    act_logit: float
    class_logits: np.ndarray
    d_center: float
    d_length: float


@dataclass
class ForwardPass:
    """Every intermediate of one forward pass, kept for the backward walk."""

    pyramid: list[Grad2]
    scale_pre: list[Grad2] = field(default_factory=list)
    scale_act: list[Grad2] = field(default_factory=list)
    conv_pre: list = field(default_factory=list)
    conv_maps: list[Grad2] = field(default_factory=list)
    pool_scale: list[Grad2] = field(default_factory=list)
    pool_scale_arg: list[np.ndarray] = field(default_factory=list)
    pool_args: list = field(default_factory=list)
    pool_maps: list[Grad2] = field(default_factory=list)
    fused: list[Grad2] = field(default_factory=list)
    enhanced: list[Grad2] = field(default_factory=list)
    heads: list[Grad2] = field(default_factory=list)


class PyramidDetector:
    """Full network with per-layer parameters and a hand-wired backward."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=DEFAULT_DTYPE):
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.default_rng(seed)

        self.scale_convs: list[Conv1D] = []
        self.down_convs: list[Conv1D] = []
        if cfg.branch in ("both", "conv"):
            for s in range(1, cfg.scales + 1):
                step = 1 << (s - 1)  # K_s / L_1; 1 at the base scale
                self.scale_convs.append(
                    Conv1D(
                        kernel=step + 1,
                        in_channels=cfg.feature_dim,
                        out_channels=cfg.branch_filters,
                        stride=step,
                        padding="same",
                        rng=rng,
                        dtype=dtype,
                    )
                )
            for _ in range(cfg.depth - 1):
                self.down_convs.append(
                    Conv1D(3, cfg.conv_width, cfg.conv_width, stride=2,
                           padding="same", rng=rng, dtype=dtype)
                )
        self.heads: list[Conv1D] = [
            Conv1D(cfg.head_kernel, cfg.head_in_width, cfg.head_out_width,
                   stride=1, padding="same", rng=rng, dtype=dtype)
            for _ in range(cfg.depth)
        ]

    # -- parameter plumbing -------------------------------------------------

    def parameters(self) -> list[tuple[str, Conv1D]]:
        """Layers in the fixed topological order used by checkpoints."""
        named = [(f"scale_conv_{s + 1}", c) for s, c in enumerate(self.scale_convs)]
        named += [(f"down_conv_{i + 2}", c) for i, c in enumerate(self.down_convs)]
        named += [(f"head_{i + 1}", c) for i, c in enumerate(self.heads)]
        return named

    def zero_grad(self) -> None:
        for _, layer in self.parameters():
            layer.zero_grad()

    def num_parameters(self) -> int:
        return sum(l.w.size + l.b.size for _, l in self.parameters())

    # -- forward ------------------------------------------------------------

    def _check_input(self, pyramid: PyramidFeature) -> None:
        cfg = self.cfg
        if (
            pyramid.num_scales != cfg.scales
            or pyramid.base_segments != cfg.base_segments
            or pyramid.dim != cfg.feature_dim
        ):
            raise ValidationError(
                f"pyramid (S={pyramid.num_scales}, K1={pyramid.base_segments}, "
                f"d={pyramid.dim}) does not match model config (S={cfg.scales}, "
                f"K1={cfg.base_segments}, d={cfg.feature_dim})"
            )

    def forward(self, pyramid: PyramidFeature) -> ForwardPass:
        self._check_input(pyramid)
        fp = ForwardPass(
            pyramid=[Grad2(lv.astype(self.dtype)) for lv in pyramid.levels]
        )
        if self.cfg.branch in ("both", "conv"):
            self._conv_branch(fp)
        if self.cfg.branch in ("both", "pool"):
            self._pool_branch(fp)
        self._fuse(fp)
        self._enhance(fp)
        fp.heads = [head.forward(e) for head, e in zip(self.heads, fp.enhanced)]
        return fp

    def _conv_branch(self, fp: ForwardPass) -> None:
        for conv, level in zip(self.scale_convs, fp.pyramid):
            z = conv.forward(level)
            fp.scale_pre.append(z)
            fp.scale_act.append(relu(z))
        fp.conv_pre.append(None)
        fp.conv_maps.append(concat_channels(fp.scale_act))
        for conv in self.down_convs:
            z = conv.forward(fp.conv_maps[-1])
            fp.conv_pre.append(z)
            fp.conv_maps.append(relu(z))

    def _pool_branch(self, fp: ForwardPass) -> None:
        for s, level in enumerate(fp.pyramid):
            window = 1 << s  # identity at the base scale
            y, argmax = maxpool1d(level, window, window)
            fp.pool_scale.append(y)
            fp.pool_scale_arg.append(argmax)
        fp.pool_args.append(None)
        fp.pool_maps.append(concat_channels(fp.pool_scale))
        for _ in range(self.cfg.depth - 1):
            y, argmax = maxpool1d(fp.pool_maps[-1], 2, 2)
            fp.pool_args.append(argmax)
            fp.pool_maps.append(y)

    def _fuse(self, fp: ForwardPass) -> None:
        if self.cfg.branch == "conv":
            fp.fused = fp.conv_maps
        elif self.cfg.branch == "pool":
            fp.fused = fp.pool_maps
        else:
            fp.fused = [
                concat_channels([ct, cp])
                for ct, cp in zip(fp.conv_maps, fp.pool_maps)
            ]

    def _enhance(self, fp: ForwardPass) -> None:
        depth = self.cfg.depth
        last = fp.fused[-1]
        for i, fused in enumerate(fp.fused):
            if i < depth - 1:
                local = np.repeat(fp.fused[i + 1].values, 2, axis=0)
                tiled = np.repeat(last.values, fused.shape[0], axis=0)
                values = np.concatenate([fused.values, local, tiled], axis=1)
            else:
                values = np.concatenate([last.values] * 3, axis=1)
            fp.enhanced.append(Grad2(values))

    # -- backward -----------------------------------------------------------

    def backward(self, fp: ForwardPass) -> None:
        """Propagate fp.heads[i].grad back to parameters and inputs."""
        for head, enhanced, out in zip(self.heads, fp.enhanced, fp.heads):
            head.backward(enhanced, out)
        self._enhance_backward(fp)
        if self.cfg.branch == "both":
            width = self.cfg.conv_width
            for ct, cp, fused in zip(fp.conv_maps, fp.pool_maps, fp.fused):
                ct.grad += fused.grad[:, :width]
                cp.grad += fused.grad[:, width:]
        if self.cfg.branch in ("both", "conv"):
            self._conv_branch_backward(fp)
        if self.cfg.branch in ("both", "pool"):
            self._pool_branch_backward(fp)

    def _enhance_backward(self, fp: ForwardPass) -> None:
        depth = self.cfg.depth
        width = self.cfg.fused_width
        last = fp.fused[-1]
        for i, (fused, enhanced) in enumerate(zip(fp.fused, fp.enhanced)):
            g = enhanced.grad
            if i < depth - 1:
                fused.grad += g[:, :width]
                local = g[:, width : 2 * width]
                fp.fused[i + 1].grad += local[0::2] + local[1::2]
                last.grad += g[:, 2 * width :].sum(axis=0, keepdims=True)
            else:
                last.grad += g[:, :width] + g[:, width : 2 * width] + g[:, 2 * width :]

    def _conv_branch_backward(self, fp: ForwardPass) -> None:
        for i in range(self.cfg.depth - 1, 0, -1):
            relu_backward(fp.conv_pre[i], fp.conv_maps[i])
            self.down_convs[i - 1].backward(fp.conv_maps[i - 1], fp.conv_pre[i])
        concat_channels_backward(fp.scale_act, fp.conv_maps[0])
        for conv, level, pre, act in zip(
            self.scale_convs, fp.pyramid, fp.scale_pre, fp.scale_act
        ):
            relu_backward(pre, act)
            conv.backward(level, pre)

    def _pool_branch_backward(self, fp: ForwardPass) -> None:
        for i in range(self.cfg.depth - 1, 0, -1):
            maxpool1d_backward(fp.pool_maps[i - 1], fp.pool_maps[i], fp.pool_args[i])
        concat_channels_backward(fp.pool_scale, fp.pool_maps[0])
        for level, pooled, argmax in zip(
            fp.pyramid, fp.pool_scale, fp.pool_scale_arg
        ):
            maxpool1d_backward(level, pooled, argmax)

    # -- prediction views ---------------------------------------------------

    def prediction_matrix(self, fp: ForwardPass) -> np.ndarray:
        """All head outputs stacked to (num_anchors, 1 + M + 2), aligned
        with layout_anchors order: [act | class logits | d_center | d_length].
        """
        return np.concatenate([h.values for h in fp.heads], axis=0)

    def predictions(self, fp: ForwardPass) -> list[AnchorPrediction]:
        m = self.cfg.num_classes
        out = []
        for row in self.prediction_matrix(fp):
            out.append(
                AnchorPrediction(
                    act_logit=float(row[0]),
                    class_logits=row[1 : 1 + m].copy(),
                    d_center=float(row[1 + m]),
                    d_length=float(row[2 + m]),
                )
            )
        return out

    def set_head_gradients(self, fp: ForwardPass, grad_matrix: np.ndarray) -> None:
        """Load a (num_anchors, 1 + M + 2) gradient into the head buffers."""
        offset = 0
        for head_out in fp.heads:
            rows = head_out.shape[0]
            head_out.grad[:] = grad_matrix[offset : offset + rows]
            offset += rows
        if offset != grad_matrix.shape[0]:
            raise ValidationError(
                f"gradient rows {grad_matrix.shape[0]} != anchor count {offset}"
            )

    # -- checkpoint ---------------------------------------------------------

    def save(self, path) -> None:
        cfg = self.cfg
        blob = [
            struct.pack(
                "<4sI7I",
                CHECKPOINT_MAGIC,
                CHECKPOINT_VERSION,
                cfg.num_classes,
                cfg.scales,
                cfg.base_segments,
                cfg.feature_dim,
                cfg.branch_filters,
                cfg.head_kernel,
                BRANCH_MODES.index(cfg.branch),
            )
        ]
        named = self.parameters()
        blocks = [(f"{name}.{p}", getattr(layer, p)) for name, layer in named
                  for p in ("w", "b")]
        blob.append(struct.pack("<I", len(blocks)))
        for name, arr in blocks:
            encoded = name.encode()
            blob.append(struct.pack("<H", len(encoded)))
            blob.append(encoded)
            blob.append(struct.pack("<I", arr.ndim))
            blob.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            blob.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        Path(path).write_bytes(b"".join(blob))

    @classmethod
    def load(cls, path) -> "PyramidDetector":
        path = Path(path)
        raw = path.read_bytes()
        view = memoryview(raw)

        def take(fmt):
            nonlocal view
            size = struct.calcsize(fmt)
            if len(view) < size:
                raise FormatError(f"{path}: truncated checkpoint")
            vals = struct.unpack_from(fmt, view)
            view = view[size:]
            return vals

        magic, version = take("<4sI")
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        m, scales, base, dim, filters, head_kernel, branch_code = take("<7I")
        if branch_code >= len(BRANCH_MODES):
            raise FormatError(f"{path}: unknown branch mode code {branch_code}")
        cfg = ModelConfig(
            num_classes=m,
            scales=scales,
            base_segments=base,
            feature_dim=dim,
            branch_filters=filters,
            head_kernel=head_kernel,
            branch=BRANCH_MODES[branch_code],
        )
        model = cls(cfg)

        (n_blocks,) = take("<I")
        expected = [(f"{name}.{p}", layer, p) for name, layer in model.parameters()
                    for p in ("w", "b")]
        if n_blocks != len(expected):
            raise FormatError(
                f"{path}: {n_blocks} parameter blocks, expected {len(expected)}"
            )
        for want_name, layer, attr in expected:
            (name_len,) = take("<H")
            name = bytes(view[:name_len]).decode()
            view = view[name_len:]
            if name != want_name:
                raise FormatError(
                    f"{path}: parameter {name!r} out of order, expected {want_name!r}"
                )
            (ndim,) = take("<I")
            shape = take(f"<{ndim}I")
            target = getattr(layer, attr)
            if tuple(shape) != target.shape:
                raise FormatError(
                    f"{path}: {name} has shape {tuple(shape)}, expected {target.shape}"
                )
            count = int(np.prod(shape, dtype=np.int64))
            payload = np.frombuffer(view[: 4 * count], dtype="<f4")
            if payload.size != count:
                raise FormatError(f"{path}: truncated payload for {name}")
            view = view[4 * count :]
            target[:] = payload.reshape(target.shape)
        if len(view):
            raise FormatError(f"{path}: {len(view)} trailing bytes")
        return model

    def astype(self, dtype) -> "PyramidDetector":
        """Copy with parameters cast to dtype (64-bit gradient-check mode)."""
        out = PyramidDetector(self.cfg, seed=0, dtype=dtype)
        for (_, src), (_, dst) in zip(self.parameters(), out.parameters()):
            dst.w = src.w.astype(dtype)
            dst.b = src.b.astype(dtype)
            dst.w_grad = np.zeros_like(dst.w)
            dst.b_grad = np.zeros_like(dst.b)
        return out
