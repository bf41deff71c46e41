"""Central-difference gradient verification for every kernel and for the
end-to-end training loss.

All checks run in float64 so finite-difference noise stays far below the
1e-3 acceptance bound.  Inputs are nudged away from non-smooth points
(pool ties, the ReLU corner, the smooth-L1 kink) since the analytic
gradient is only defined away from them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dtpn.io_formats import GroundTruthSegment, PyramidFeature
from dtpn.model import ModelConfig, PyramidDetector, layout_anchors
from dtpn.tensor import (
    Conv1D,
    Grad2,
    binary_cross_entropy,
    concat_channels,
    concat_channels_backward,
    cross_entropy_rows,
    grad_check,
    maxpool1d,
    maxpool1d_backward,
    relu,
    relu_backward,
    smooth_l1,
)
from dtpn.train import TrainConfig, match_anchors, multitask_loss

TOLERANCE = 1e-3
EPSILON = 1e-3


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _conv_check(name, t, kernel, stride, padding, cin, cout, seed):
    rng = np.random.default_rng(seed)
    layer = Conv1D(kernel, cin, cout, stride, padding, rng=rng, dtype=np.float64)
    t_out = layer.out_length(t)
    projection = rng.standard_normal((t_out, cout))
    x0 = rng.standard_normal((t, cin))
    theta0 = np.concatenate([x0.ravel(), layer.w.ravel(), layer.b.ravel()])
    n_x, n_w = x0.size, layer.w.size

    def f(theta):
        x = Grad2(theta[:n_x].reshape(t, cin).copy())
        layer.w = theta[n_x : n_x + n_w].reshape(kernel, cin, cout).copy()
        layer.b = theta[n_x + n_w :].copy()
        layer.w_grad = np.zeros_like(layer.w)
        layer.b_grad = np.zeros_like(layer.b)
        y = layer.forward(x)
        y.grad[:] = projection
        layer.backward(x, y)
        value = float((projection * y.values).sum())
        return value, np.concatenate(
            [x.grad.ravel(), layer.w_grad.ravel(), layer.b_grad.ravel()]
        )

    return CheckResult(name, grad_check(f, theta0, eps=EPSILON))


def _maxpool_check(name, t, channels, window, stride, seed):
    rng = np.random.default_rng(seed)
    # Spacing of 0.1 between any two values keeps every window's argmax
    # stable under the +/- epsilon probes.
    x0 = 0.1 * rng.permutation(t * channels).astype(np.float64).reshape(t, channels)
    t_out = -(-t // stride)
    projection = rng.standard_normal((t_out, channels))

    def f(theta):
        x = Grad2(theta.reshape(t, channels).copy())
        y, argmax = maxpool1d(x, window, stride)
        y.grad[:] = projection
        maxpool1d_backward(x, y, argmax)
        return float((projection * y.values).sum()), x.grad.ravel()

    return CheckResult(name, grad_check(f, x0.ravel(), eps=EPSILON))


def _concat_check(seed):
    rng = np.random.default_rng(seed)
    shapes = [(6, 3), (6, 5), (6, 2)]
    parts0 = [rng.standard_normal(s) for s in shapes]
    projection = rng.standard_normal((6, 10))
    sizes = [p.size for p in parts0]

    def f(theta):
        parts = []
        offset = 0
        for shape, size in zip(shapes, sizes):
            parts.append(Grad2(theta[offset : offset + size].reshape(shape).copy()))
            offset += size
        y = concat_channels(parts)
        y.grad[:] = projection
        concat_channels_backward(parts, y)
        value = float((projection * y.values).sum())
        return value, np.concatenate([p.grad.ravel() for p in parts])

    theta0 = np.concatenate([p.ravel() for p in parts0])
    return CheckResult("concat_channels", grad_check(f, theta0, eps=EPSILON))


def _relu_check(seed):
    rng = np.random.default_rng(seed)
    # Magnitudes >= 0.1 keep every activation away from the corner.
    x0 = rng.uniform(0.1, 1.0, size=(7, 4)) * rng.choice([-1.0, 1.0], size=(7, 4))
    projection = rng.standard_normal((7, 4))

    def f(theta):
        x = Grad2(theta.reshape(7, 4).copy())
        y = relu(x)
        y.grad[:] = projection
        relu_backward(x, y)
        return float((projection * y.values).sum()), x.grad.ravel()

    return CheckResult("relu", grad_check(f, x0.ravel(), eps=EPSILON))


def _cross_entropy_check(seed):
    rng = np.random.default_rng(seed)
    logits0 = rng.standard_normal((9, 4))
    targets = rng.integers(0, 4, size=9)

    def f(theta):
        losses, grad = cross_entropy_rows(theta.reshape(9, 4), targets)
        return float(losses.sum()), grad.ravel()

    return CheckResult("softmax_cross_entropy", grad_check(f, logits0.ravel(), eps=EPSILON))


def _bce_check(seed):
    rng = np.random.default_rng(seed)
    logits0 = rng.standard_normal(12)
    targets = rng.integers(0, 2, size=12).astype(np.float64)

    def f(theta):
        losses, grad = binary_cross_entropy(theta, targets)
        return float(losses.sum()), grad

    return CheckResult("binary_cross_entropy", grad_check(f, logits0, eps=EPSILON))


def _smooth_l1_check(seed):
    rng = np.random.default_rng(seed)
    target = rng.standard_normal((6, 2))
    # Residuals away from the |u| = 1 kink, covering both regimes.
    residual = np.where(
        rng.random((6, 2)) < 0.5,
        rng.uniform(-0.8, 0.8, size=(6, 2)),
        rng.uniform(1.2, 2.0, size=(6, 2)) * rng.choice([-1.0, 1.0], size=(6, 2)),
    )
    pred0 = target + residual

    def f(theta):
        value, grad = smooth_l1(theta.reshape(6, 2), target)
        return value, grad.ravel()

    return CheckResult("smooth_l1", grad_check(f, pred0.ravel(), eps=EPSILON))


def tiny_model_config() -> ModelConfig:
    return ModelConfig(
        num_classes=2, scales=3, base_segments=4, feature_dim=6, branch_filters=4
    )


# The end-to-end loss is only piecewise smooth: ReLU corners, pool ties and
# the smooth-L1 kink all break central differences when a probe of size
# epsilon steps across one.  Per the non-differentiable-point policy the
# fixture is nudged away from every such boundary before checking, with a
# margin of 10 epsilon.
_SMOOTH_MARGIN = 10 * EPSILON


def _spaced_pyramid(cfg: ModelConfig, rng) -> PyramidFeature:
    # Every (level, channel) column is a shuffled arithmetic grid with step
    # 0.05 > margin, so the top-2 gap of any pooling window stays safe.
    levels = []
    for s in range(cfg.scales):
        rows = cfg.base_segments << s
        cols = []
        for _ in range(cfg.feature_dim):
            grid = 0.05 * (rng.permutation(rows) - rows / 2.0)
            cols.append(grid + rng.uniform(-0.02, 0.02))
        levels.append(np.stack(cols, axis=1).astype(np.float32))
    return PyramidFeature(levels)


def _clearing_shift(values: np.ndarray, margin: float) -> float:
    """Smallest bias shift putting every value at least margin from zero."""
    if np.abs(values).min() >= margin:
        return 0.0
    candidates = np.concatenate([margin - values, -margin - values])
    candidates = candidates[np.argsort(np.abs(candidates), kind="stable")]
    for delta in candidates:
        if np.abs(values + delta).min() >= margin * (1 - 1e-9):
            return float(delta)
    raise AssertionError("no clearing shift found; widen the value spread")


def _nudge_relu_layers(model: PyramidDetector, pyramid: PyramidFeature) -> None:
    # Walk the conv branch in topological order; each layer's biases are
    # shifted channel-wise so no pre-activation sits near the ReLU corner,
    # then the running forward is rebuilt on the adjusted parameters.
    inputs = [Grad2(lv.astype(np.float64)) for lv in pyramid.levels]
    acts = []
    for conv, level in zip(model.scale_convs, inputs):
        z = conv.forward(level)
        for c in range(z.shape[1]):
            conv.b[c] += _clearing_shift(z.values[:, c], _SMOOTH_MARGIN)
        z = conv.forward(level)
        acts.append(relu(z))
    current = concat_channels(acts)
    for conv in model.down_convs:
        z = conv.forward(current)
        for c in range(z.shape[1]):
            conv.b[c] += _clearing_shift(z.values[:, c], _SMOOTH_MARGIN)
        current = relu(conv.forward(current))


def _end_to_end_fixture(seed: int):
    cfg = tiny_model_config()
    gts = [
        GroundTruthSegment(label_index=0, start=0.1, end=0.35),
        GroundTruthSegment(label_index=1, start=0.6, end=0.9),
    ]
    match = match_anchors(layout_anchors(cfg), gts)
    train_cfg = TrainConfig()
    for attempt in range(64):
        rng = np.random.default_rng(seed + 1000 * attempt)
        model = PyramidDetector(cfg, seed=seed + 1000 * attempt).astype(np.float64)
        pyramid = _spaced_pyramid(cfg, rng)
        _nudge_relu_layers(model, pyramid)
        # Accept only if the offset residuals also clear the smooth-L1 kink.
        fp = model.forward(pyramid)
        pred = model.prediction_matrix(fp)
        pos = match.positive_indices
        residuals = pred[pos, -2:] - match.target_offsets[pos]
        if np.abs(np.abs(residuals) - 1.0).min() >= _SMOOTH_MARGIN:
            return cfg, model, pyramid, match, train_cfg
    raise AssertionError("could not build a smooth end-to-end fixture")


def _end_to_end_check(seed, sample=300):
    cfg, model, pyramid, match, train_cfg = _end_to_end_fixture(seed)
    layers = [layer for _, layer in model.parameters()]
    theta0 = np.concatenate(
        [np.concatenate([l.w.ravel(), l.b.ravel()]) for l in layers]
    )

    def f(theta):
        offset = 0
        for layer in layers:
            layer.w[:] = theta[offset : offset + layer.w.size].reshape(layer.w.shape)
            offset += layer.w.size
            layer.b[:] = theta[offset : offset + layer.b.size]
            offset += layer.b.size
        model.zero_grad()
        fp = model.forward(pyramid)
        loss, grad_matrix = multitask_loss(
            model.prediction_matrix(fp), match, train_cfg, cfg.num_classes
        )
        model.set_head_gradients(fp, grad_matrix)
        model.backward(fp)
        grad = np.concatenate(
            [np.concatenate([l.w_grad.ravel(), l.b_grad.ravel()]) for l in layers]
        )
        return loss, grad

    err = grad_check(
        f, theta0, eps=EPSILON, sample=sample, rng=np.random.default_rng(seed)
    )
    return CheckResult("end_to_end_loss", err)


def run_gradient_checks(seed: int = 0, e2e_sample: int = 300) -> list[CheckResult]:
    """The full verification suite; every result must pass below 1e-3."""
    return [
        _conv_check("conv1d_k1_identity_geometry", 5, 1, 1, "same", 3, 3, seed),
        _conv_check("conv1d_k3_s1_same", 10, 3, 1, "same", 4, 6, seed + 1),
        _conv_check("conv1d_k3_s2_same", 16, 3, 2, "same", 5, 4, seed + 2),
        _conv_check("conv1d_k2_s1_same_even_kernel", 8, 2, 1, "same", 3, 5, seed + 3),
        _conv_check("conv1d_k5_s4_same_scale_conv", 16, 5, 4, "same", 4, 3, seed + 4),
        _conv_check("conv1d_k3_s1_valid", 9, 3, 1, "valid", 3, 4, seed + 5),
        _maxpool_check("maxpool_w2_s2", 8, 3, 2, 2, seed + 6),
        _maxpool_check("maxpool_w3_s3_truncated", 8, 2, 3, 3, seed + 7),
        _maxpool_check("maxpool_w1_identity", 5, 4, 1, 1, seed + 8),
        _concat_check(seed + 9),
        _relu_check(seed + 10),
        _cross_entropy_check(seed + 11),
        _bce_check(seed + 12),
        _smooth_l1_check(seed + 13),
        _end_to_end_check(seed + 14, sample=e2e_sample),
    ]
