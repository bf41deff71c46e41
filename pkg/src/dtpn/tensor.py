"""Rank-2 (time x channel) numeric building blocks with hand-derived
reverse-mode gradients.

Everything the network needs is expressible on (T, C) float arrays:
temporal convolution, temporal max pooling, channel concatenation, ReLU,
and the loss primitives.  Each forward op has an explicit backward that
accumulates into the gradient buffers of its arguments; there is no tape.

Production arrays are float32.  Gradient checks run the same ops in
float64 (``dtype=np.float64``) because finite-difference noise at 32 bits
masks real errors.
"""

from __future__ import annotations

import numpy as np

from dtpn import kernels
from dtpn.errors import ValidationError

DEFAULT_DTYPE = np.float32


class Grad2:
    """A (T, C) value matrix paired with a same-shape gradient buffer."""

    __slots__ = ("values", "grad")

    def __init__(self, values: np.ndarray, grad: np.ndarray | None = None):
        values = np.ascontiguousarray(values)
        if values.ndim != 2:
            raise ValidationError(f"Grad2 requires a rank-2 array, got {values.ndim}")
        self.values = values
        self.grad = np.zeros_like(values) if grad is None else grad
        if self.grad.shape != values.shape:
            raise ValidationError("values and grad must share a shape")

    @classmethod
    def zeros(cls, t: int, c: int, dtype=DEFAULT_DTYPE) -> "Grad2":
        return cls(np.zeros((t, c), dtype=dtype))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def zero_grad(self) -> None:
        self.grad[:] = 0


def _pad_same(t_in: int, kernel: int, stride: int) -> tuple[int, int]:
    # Output length ceil(t_in / stride); any odd padding goes on the right,
    # which even kernels (the scale-1 branch uses kernel 2) rely on.
    t_out = -(-t_in // stride)
    total = max(0, (t_out - 1) * stride + kernel - t_in)
    return total // 2, total - total // 2


class Conv1D:
    """Temporal cross-correlation layer with weights, bias and their grads.

    padding "same" keeps ceil(T / stride) output steps (zeros, extra on the
    right); "valid" uses no padding.  Weights are (kernel, in, out) drawn
    from a centered uniform distribution scaled by 1/sqrt(kernel * in),
    biases start at zero.
    """

    def __init__(
        self,
        kernel: int,
        in_channels: int,
        out_channels: int,
        stride: int = 1,
        padding: str = "same",
        rng: np.random.Generator | None = None,
        dtype=DEFAULT_DTYPE,
    ):
        if kernel < 1 or stride < 1:
            raise ValidationError("kernel and stride must be >= 1")
        if padding not in ("same", "valid"):
            raise ValidationError(f"unknown padding mode {padding!r}")
        self.kernel = kernel
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.padding = padding

        if rng is None:
            rng = np.random.default_rng(0)
        bound = 1.0 / np.sqrt(kernel * in_channels)
        self.w = rng.uniform(-bound, bound, size=(kernel, in_channels, out_channels)).astype(dtype)
        self.b = np.zeros(out_channels, dtype=dtype)
        self.w_grad = np.zeros_like(self.w)
        self.b_grad = np.zeros_like(self.b)

    def pad_amounts(self, t_in: int) -> tuple[int, int]:
        if self.padding == "same":
            return _pad_same(t_in, self.kernel, self.stride)
        return 0, 0

    def out_length(self, t_in: int) -> int:
        pl, pr = self.pad_amounts(t_in)
        return (t_in + pl + pr - self.kernel) // self.stride + 1

    def forward(self, x: Grad2) -> Grad2:
        if x.shape[1] != self.in_channels:
            raise ValidationError(
                f"conv expects {self.in_channels} input channels, got {x.shape[1]}"
            )
        pl, pr = self.pad_amounts(x.shape[0])
        y = kernels.conv1d_forward(x.values, self.w, self.b, self.stride, pl, pr)
        return Grad2(y)

    def backward(self, x: Grad2, y: Grad2) -> None:
        """Accumulate grads of the op that produced y from x."""
        pl, pr = self.pad_amounts(x.shape[0])
        gx, gw, gb = kernels.conv1d_backward(
            x.values, self.w, self.stride, pl, pr, y.grad
        )
        x.grad += gx
        self.w_grad += gw
        self.b_grad += gb

    def zero_grad(self) -> None:
        self.w_grad[:] = 0
        self.b_grad[:] = 0

    def astype(self, dtype) -> "Conv1D":
        """Copy of this layer with weights cast to dtype (for check mode)."""
        out = Conv1D.__new__(Conv1D)
        out.kernel = self.kernel
        out.in_channels = self.in_channels
        out.out_channels = self.out_channels
        out.stride = self.stride
        out.padding = self.padding
        out.w = self.w.astype(dtype)
        out.b = self.b.astype(dtype)
        out.w_grad = np.zeros_like(out.w)
        out.b_grad = np.zeros_like(out.b)
        return out


def maxpool1d(x: Grad2, window: int, stride: int) -> tuple[Grad2, np.ndarray]:
    """Temporal max pool; a non-divisible final window truncates.

    Returns the pooled Grad2 plus the argmax routing table consumed by
    maxpool1d_backward (ties go to the earliest index).
    """
    if window < 1 or stride < 1:
        raise ValidationError("window and stride must be >= 1")
    y, argmax = kernels.maxpool1d_forward(x.values, window, stride)
    return Grad2(y), argmax


def maxpool1d_backward(x: Grad2, y: Grad2, argmax: np.ndarray) -> None:
    x.grad += kernels.maxpool1d_backward(argmax, x.shape[0], y.grad)


def concat_channels(xs: list[Grad2]) -> Grad2:
    t = xs[0].shape[0]
    if any(x.shape[0] != t for x in xs):
        raise ValidationError(
            f"concat requires equal time steps, got {[x.shape[0] for x in xs]}"
        )
    return Grad2(np.concatenate([x.values for x in xs], axis=1))


def concat_channels_backward(xs: list[Grad2], y: Grad2) -> None:
    offset = 0
    for x in xs:
        width = x.shape[1]
        x.grad += y.grad[:, offset : offset + width]
        offset += width


def relu(x: Grad2) -> Grad2:
    return Grad2(np.maximum(x.values, 0))


def relu_backward(x: Grad2, y: Grad2) -> None:
    x.grad += y.grad * (y.values > 0)


# ---------------------------------------------------------------------------
# pointwise / loss primitives (plain arrays in, value + input-gradient out)
# ---------------------------------------------------------------------------


def sigmoid(z):
    z = np.asarray(z)
    out = np.empty_like(z, dtype=z.dtype if z.dtype.kind == "f" else np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stabilized by max subtraction."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def smooth_l1(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Huber-style loss summed over all coordinates; returns (value, dpred)."""
    u = pred - target
    a = np.abs(u)
    quadratic = a < 1.0
    value = np.where(quadratic, 0.5 * u * u, a - 0.5).sum()
    grad = np.where(quadratic, u, np.sign(u))
    return float(value), grad


def cross_entropy_rows(
    logits: np.ndarray, target_index: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Softmax cross-entropy per row; returns (losses (n,), dlogits (n, M))."""
    logits = np.atleast_2d(logits)
    target_index = np.atleast_1d(target_index)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(logits.shape[0])
    losses = log_z - shifted[rows, target_index]
    grad = softmax_rows(logits)
    grad[rows, target_index] -= 1.0
    return losses, grad


def binary_cross_entropy(logit, target) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise BCE on logits; returns (losses, dlogits).

    Computed as max(z, 0) - z * t + log(1 + exp(-|z|)), stable for any z.
    """
    z = np.asarray(logit, dtype=np.result_type(logit, np.float32))
    t = np.asarray(target, dtype=z.dtype)
    losses = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    grad = sigmoid(z) - t
    return losses, grad


def grad_check(
    f,
    theta: np.ndarray,
    eps: float = 1e-3,
    sample: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    f maps a flat float64 parameter vector to (scalar value, gradient
    vector).  Coordinates are all checked unless `sample` limits them to a
    seeded random subset.  Relative error uses max(1, |analytic| + |numeric|)
    in the denominator, so tiny gradients are compared absolutely.
    """
    theta = np.asarray(theta, dtype=np.float64)
    _, analytic = f(theta)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != theta.shape:
        raise ValidationError(
            f"gradient shape {analytic.shape} != parameter shape {theta.shape}"
        )

    indices = np.arange(theta.size)
    if sample is not None and sample < theta.size:
        if rng is None:
            rng = np.random.default_rng(0)
        indices = rng.choice(theta.size, size=sample, replace=False)

    worst = 0.0
    for j in indices:
        step = np.zeros_like(theta)
        step[j] = eps
        hi, _ = f(theta + step)
        lo, _ = f(theta - step)
        numeric = (hi - lo) / (2.0 * eps)
        err = abs(analytic[j] - numeric) / max(1.0, abs(analytic[j]) + abs(numeric))
        worst = max(worst, err)
    return worst
