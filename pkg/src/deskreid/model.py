"""Embedding model: small conv backbone plus a configurable classifier neck.

Four neck variants share one backbone:

    good_practices : pool -> batchnorm -> classifier FC
    no_bn          : pool -> classifier FC
    dropout_neck   : pool -> dropout -> classifier FC
    bottleneck     : pool -> FC(bottleneck_dim) -> batchnorm -> classifier FC

The retrieval embedding is tapped after the batch norm where one exists
(good_practices, bottleneck) and straight after pooling otherwise.
"""

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .layers import BatchNorm1d, Conv2d, Dropout, Linear, global_avg_pool
from .layers import softmax_cross_entropy
from .tensor import ShapeError, Tensor

VARIANTS = ("good_practices", "no_bn", "dropout_neck", "bottleneck")


@dataclass
class ModelSpec:
    variant: str
    num_classes: int
    in_channels: int = 3
    channels: tuple = (16, 32, 64, 128)
    input_hw: tuple = (64, 32)
    bottleneck_dim: int = 512
    dropout_p: float = 0.5

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        self.channels = tuple(int(c) for c in self.channels)
        self.input_hw = tuple(int(v) for v in self.input_hw)
        if not self.channels or any(c < 1 for c in self.channels):
            raise ValueError("channels must be a non-empty list of positive widths")
        if self.in_channels < 1:
            raise ValueError("in_channels must be positive")
        if len(self.input_hw) != 2 or any(v < 1 for v in self.input_hw):
            raise ValueError("input_hw must be two positive extents")
        if self.bottleneck_dim < 1:
            raise ValueError("bottleneck_dim must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")

    @property
    def feature_dim(self):
        return self.channels[-1]

    @property
    def embedding_dim(self):
        return self.bottleneck_dim if self.variant == "bottleneck" else self.feature_dim


class Model:
    """Backbone + neck with explicit train/eval paths.

    ``forward_train`` returns (loss, logits); ``embed`` returns the eval-mode
    retrieval embedding as a plain array.  All parameters live on named
    tensors so state round-trips through the archive format.
    """

    def __init__(self, spec, rng):
        self.spec = spec
        self.training = True
        self.convs = []
        prev = spec.in_channels
        for ch in spec.channels:
            self.convs.append(Conv2d(prev, ch, kernel_size=3, stride=2,
                                     padding=1, rng=rng))
            prev = ch

        self.neck_fc = None
        self.bn = None
        self.drop = None
        embed_dim = spec.feature_dim
        if spec.variant == "bottleneck":
            self.neck_fc = Linear(spec.feature_dim, spec.bottleneck_dim, rng=rng)
            embed_dim = spec.bottleneck_dim
        if spec.variant in ("good_practices", "bottleneck"):
            self.bn = BatchNorm1d(embed_dim)
        if spec.variant == "dropout_neck":
            self.drop = Dropout(spec.dropout_p)
        self.classifier = Linear(embed_dim, spec.num_classes, rng=rng)

    def _check_input(self, x):
        expected = (self.spec.in_channels, *self.spec.input_hw)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ShapeError(f"expected images shaped [N, {expected[0]}, "
                             f"{expected[1]}, {expected[2]}], got {x.shape}")

    def _features(self, x):
        h = x
        for conv in self.convs:
            h = conv(h).relu()
        return global_avg_pool(h)

    def _neck(self, pooled, train, dropout_rng=None):
        """Returns (embedding tensor, classifier input tensor)."""
        h = pooled
        if self.neck_fc is not None:
            h = self.neck_fc(h)
        if self.bn is not None:
            h = self.bn(h, train=train)
            return h, h
        if self.drop is not None:
            emb = h
            h = self.drop(h, train=train, rng=dropout_rng)
            return emb, h
        return h, h

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def forward_train(self, x, labels, dropout_rng=None):
        if not self.training:
            raise RuntimeError("forward_train called on a model in eval mode")
        if self.drop is not None and dropout_rng is None:
            raise ValueError("dropout_neck variant needs a dropout rng in train mode")
        if isinstance(x, np.ndarray):
            x = Tensor(x)
        self._check_input(x)
        pooled = self._features(x)
        _, h = self._neck(pooled, train=True, dropout_rng=dropout_rng)
        logits = self.classifier(h)
        loss = softmax_cross_entropy(logits, labels)
        return loss, logits

    def embed(self, x):
        """Eval-mode embeddings for a batch of images, as an [N, D] array."""
        if isinstance(x, np.ndarray):
            x = Tensor(x)
        self._check_input(x)
        pooled = self._features(x)
        emb, _ = self._neck(pooled, train=False)
        return emb.data.copy()

    def logits_eval(self, x):
        """Eval-mode class scores, for accuracy bookkeeping."""
        if isinstance(x, np.ndarray):
            x = Tensor(x)
        self._check_input(x)
        pooled = self._features(x)
        _, h = self._neck(pooled, train=False)
        return self.classifier(h).data.copy()

    def named_parameters(self):
        out = []
        for i, conv in enumerate(self.convs):
            for name, p in conv.parameters():
                out.append((f"conv{i}.{name}", p))
        if self.neck_fc is not None:
            for name, p in self.neck_fc.parameters():
                out.append((f"neck_fc.{name}", p))
        if self.bn is not None:
            for name, p in self.bn.parameters():
                out.append((f"bn.{name}", p))
        for name, p in self.classifier.parameters():
            out.append((f"classifier.{name}", p))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_arrays(self):
        """All learned parameters plus batch-norm running statistics."""
        out = OrderedDict((name, p.data) for name, p in self.named_parameters())
        if self.bn is not None:
            for name, buf in self.bn.state_buffers():
                out[f"bn.{name}"] = buf
        return out

    def load_state_arrays(self, arrays):
        expected = set(self.state_arrays())
        got = set(arrays)
        if expected != got:
            missing = sorted(expected - got)
            extra = sorted(got - expected)
            raise ValueError(f"model state mismatch: missing {missing}, unexpected {extra}")
        for name, p in self.named_parameters():
            arr = arrays[name]
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: "
                                 f"{arr.shape} vs {p.data.shape}")
            p.data = arr.astype(p.data.dtype).copy()
        if self.bn is not None:
            self.bn.load_buffers(arrays["bn.running_mean"], arrays["bn.running_var"])


def build_model(spec, rng):
    """Construct a model, drawing all weight initializations from ``rng``."""
    return Model(spec, rng)


def extract_embedding(model, images, flip_fusion=False):
    """Retrieval embeddings for a batch, optionally fused with the mirror view.

    Flip fusion averages each image's embedding with that of its left-right
    mirror.  Refused while the model is in train mode: batch-norm statistics
    would drift and results would stop being reproducible.
    """
    if model.training:
        raise RuntimeError("embedding extraction requires eval mode; call model.eval()")
    data = images.data if isinstance(images, Tensor) else np.asarray(images)
    emb = model.embed(data)
    if flip_fusion:
        emb = 0.5 * (emb + model.embed(np.ascontiguousarray(data[:, :, :, ::-1])))
    return emb
