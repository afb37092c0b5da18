"""Layer vocabulary: convolution, pooling, batch norm, dropout, FC, losses.

Functional ops build autodiff graph nodes; the layer classes own parameters
and call the ops.  Weights are initialized from a centered uniform
distribution scaled by 1/sqrt(fan_in); biases start at zero.
"""

import numpy as np

from . import kernels
from .tensor import ShapeError, Tensor, graph_node


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-d cross-correlation over [N, C, H, W] input.

    Output spatial extent is floor((H + 2*padding - KH) / stride) + 1,
    likewise for width.  The kernel must fit inside the padded input.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects [N, C, H, W] input, got shape {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d expects [OC, IC, KH, KW] weights, got {weight.shape}")
    n, ic, h, w = x.shape
    oc, wic, kh, kw = weight.shape
    if wic != ic:
        raise ShapeError(f"conv2d channel mismatch: input has {ic}, weights expect {wic}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    stride = int(stride)
    padding = int(padding)

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    out_data = kernels.conv2d_forward(xp, weight.data, stride)
    if bias is not None:
        if bias.shape != (oc,):
            raise ShapeError(f"conv2d bias must have shape ({oc},), got {bias.shape}")
        out_data = out_data + bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            gxp = kernels.conv2d_backward_input(weight.data, g, stride,
                                                xp.shape[2], xp.shape[3])
            if padding:
                gxp = gxp[:, :, padding:padding + h, padding:padding + w]
            x.accumulate_grad(gxp)
        if weight.requires_grad:
            weight.accumulate_grad(kernels.conv2d_backward_weight(xp, g, stride, kh, kw))
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)))

    return graph_node(out_data, parents, backward, "conv2d")


def global_avg_pool(x):
    """Collapse each channel's spatial plane to its mean: [N,C,H,W] -> [N,C]."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [N, C, H, W], got shape {x.shape}")
    n, c, h, w = x.shape
    plane = h * w
    out_data = x.data.mean(axis=(2, 3))

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(np.broadcast_to(g[:, :, None, None] / plane, x.shape))

    return graph_node(out_data, (x,), backward, "global_avg_pool")


def max_pool2d(x, kernel_size, stride=None):
    """Spatial max pooling; ties resolve to the first index in row-major order."""
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d expects [N, C, H, W], got shape {x.shape}")
    kh = kw = int(kernel_size)
    stride = kh if stride is None else int(stride)
    n, c, h, w = x.shape
    if kh > h or kw > w:
        raise ShapeError(f"pool window {kh}x{kw} larger than input {h}x{w}")
    from numpy.lib.stride_tricks import sliding_window_view
    win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, oh, ow, kh * kw)
    arg = flat.argmax(axis=-1)
    out_data = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        if not x.requires_grad:
            return
        gx = np.zeros_like(x.data)
        ib, ic_, io, jo = np.meshgrid(np.arange(n), np.arange(c),
                                      np.arange(oh), np.arange(ow), indexing="ij")
        ih = io * stride + arg // kw
        iw = jo * stride + arg % kw
        np.add.at(gx, (ib, ic_, ih, iw), g)
        x.accumulate_grad(gx)

    return graph_node(np.ascontiguousarray(out_data), (x,), backward, "max_pool2d")


def dropout(x, p, train, rng):
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p).

    Eval mode (and p == 0) returns the input tensor unchanged.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    mask = rng.random(x.shape) >= p
    scale = 1.0 / (1.0 - p)
    out_data = x.data * mask * scale

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * mask * scale)

    return graph_node(out_data, (x,), backward, "dropout")


def softmax_cross_entropy(logits, labels):
    """Mean over the batch of -log softmax(logits)[label].

    Stabilized by subtracting the row max before exponentiation.  The
    gradient with respect to the logits is (softmax - onehot) / N.
    """
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects [N, C] logits, got {logits.shape}")
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=-1) >= c:
        raise ValueError(f"labels must lie in [0, {c}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    labels = labels.astype(np.int64)

    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    softmax = expz / expz.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(expz.sum(axis=1, keepdims=True))
    losses = -log_probs[np.arange(n), labels]
    out_data = np.asarray(losses.mean())

    def backward(g):
        if logits.requires_grad:
            grad = softmax.copy()
            grad[np.arange(n), labels] -= 1.0
            logits.accumulate_grad(grad * (float(g) / n))

    return graph_node(out_data, (logits,), backward, "softmax_cross_entropy")


def _uniform_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d:
    def __init__(self, in_channels, out_channels, kernel_size, stride=1,
                 padding=0, rng=None):
        kh = kw = int(kernel_size)
        fan_in = in_channels * kh * kw
        rng = rng if rng is not None else np.random.default_rng()
        self.stride = int(stride)
        self.padding = int(padding)
        self.weight = Tensor(_uniform_init(rng, (out_channels, in_channels, kh, kw), fan_in),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)

    def __call__(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


class Linear:
    """Fully connected layer: y = x @ W^T + b with W of shape [OUT, IN]."""

    def __init__(self, in_features, out_features, rng=None):
        rng = rng if rng is not None else np.random.default_rng()
        self.weight = Tensor(_uniform_init(rng, (out_features, in_features), in_features),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def __call__(self, x):
        if x.ndim != 2 or x.shape[1] != self.weight.shape[1]:
            raise ShapeError(
                f"linear expects [N, {self.weight.shape[1]}] input, got shape {x.shape}"
            )
        return x @ self.weight.T + self.bias

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


class BatchNorm1d:
    """Per-feature batch normalization over [N, F] activations.

    Train mode normalizes with biased batch statistics and updates the
    running estimates as ``running <- (1 - momentum) * running + momentum *
    batch`` (the running variance gets the unbiased batch estimate).  Eval
    mode is a fixed affine map built from the running statistics, so each
    sample's output is independent of the rest of the batch.
    """

    def __init__(self, num_features, eps=1e-5, momentum=0.1):
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.gamma = Tensor(np.ones(num_features), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features), requires_grad=True)
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)

    def __call__(self, x, train):
        if x.ndim != 2 or x.shape[1] != self.gamma.shape[0]:
            raise ShapeError(
                f"batchnorm expects [N, {self.gamma.shape[0]}] input, got shape {x.shape}"
            )
        if train:
            n = x.shape[0]
            if n < 2:
                raise ShapeError("batchnorm train mode needs a batch of at least 2")
            mu = x.mean(axis=0)
            centered = x - mu
            var = (centered * centered).mean(axis=0)
            out = centered / (var + self.eps).sqrt() * self.gamma + self.beta
            m = self.momentum
            self.running_mean = (1.0 - m) * self.running_mean + m * mu.data
            self.running_var = (1.0 - m) * self.running_var + m * var.data * (n / (n - 1.0))
            return out
        mean = Tensor(self.running_mean)
        denom = Tensor(np.sqrt(self.running_var + self.eps))
        return (x - mean) / denom * self.gamma + self.beta

    def parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def state_buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def load_buffers(self, running_mean, running_var):
        if running_mean.shape != self.running_mean.shape:
            raise ShapeError("running_mean shape mismatch")
        if running_var.shape != self.running_var.shape:
            raise ShapeError("running_var shape mismatch")
        if np.any(running_var < 0):
            raise ValueError("running_var must be nonnegative")
        self.running_mean = running_mean.copy()
        self.running_var = running_var.copy()


class Dropout:
    def __init__(self, p):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.p = float(p)

    def __call__(self, x, train, rng):
        return dropout(x, self.p, train, rng)

    def parameters(self):
        return []
