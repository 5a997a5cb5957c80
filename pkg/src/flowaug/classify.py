"""Classifier models and the cross-entropy loss."""
from __future__ import annotations

import math

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


class ClassifierError(ValueError):
    pass


def cross_entropy(logits, labels, reduction: str = "mean") -> Tensor:
    """``-log softmax(logits)[label]`` via a log-sum-exp normalizer.

    ``logits`` is ``(K,)`` with an int label, or ``(N, K)`` with N labels.
    ``reduction`` is one of ``mean``, ``sum``, ``none``.
    """
    logits = dc.as_tensor(logits)
    single = logits.ndim == 1
    if single:
        logits = dc.reshape(logits, (1, logits.shape[0]))
    n, k = logits.shape
    labels = np.atleast_1d(np.asarray(labels)).astype(np.int64)
    if labels.shape != (n,):
        raise ClassifierError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ClassifierError(f"label out of range [0, {k})")
    picked = logits[np.arange(n), labels]
    losses = dc.logsumexp(logits, axis=1) - picked
    if reduction == "none":
        return dc.reshape(losses, ()) if single else losses
    if reduction == "sum":
        return dc.sum(losses)
    if reduction == "mean":
        return dc.mean(losses)
    raise ClassifierError(f"unknown reduction {reduction!r}")


def _truncated_normal(rng, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2
    return out * std


class Classifier:
    n_classes: int
    in_dim: int

    def params(self) -> list[Tensor]:
        raise NotImplementedError

    def features(self, x) -> Tensor:
        raise NotImplementedError

    def logits(self, x) -> Tensor:
        raise NotImplementedError

    def describe(self) -> dict:
        raise NotImplementedError

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.logits(x).data, axis=1)

    def __call__(self, x) -> Tensor:
        return self.logits(x)


def _batch(x, dtype) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))
    if t.ndim == 1:
        t = dc.reshape(t, (1, t.shape[0]))
    return t


class MLP(Classifier):
    """Fully connected ReLU network; ``hidden=()`` gives a linear classifier.

    Weights use Kaiming-uniform initialization, biases start at zero.
    """

    def __init__(self, in_dim: int, n_classes: int, hidden=(64, 64), seed: int = 0,
                 dtype=np.float64):
        rng = np.random.default_rng(seed)
        self.in_dim, self.n_classes, self.hidden = in_dim, n_classes, tuple(hidden)
        self.dtype = dtype
        widths = [in_dim, *self.hidden, n_classes]
        self.weights, self.biases = [], []
        for a, b in zip(widths[:-1], widths[1:]):
            bound = math.sqrt(6.0 / a)
            self.weights.append(Tensor(rng.uniform(-bound, bound, (a, b)), dtype=dtype))
            self.biases.append(Tensor(np.zeros((1, b)), dtype=dtype))

    def params(self):
        return [p for wb in zip(self.weights, self.biases) for p in wb]

    def features(self, x):
        h = _batch(x, self.dtype)
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = dc.relu(h @ w + b)
        return h

    def logits(self, x):
        return self.features(x) @ self.weights[-1] + self.biases[-1]

    def describe(self):
        return {"arch": "mlp", "in_dim": self.in_dim, "n_classes": self.n_classes,
                "hidden": list(self.hidden)}


def linear_classifier(weight, bias=None) -> MLP:
    """Logits ``x @ weight + bias`` with ``weight`` of shape (C, K)."""
    weight = np.asarray(weight, dtype=np.float64)
    clf = MLP(weight.shape[0], weight.shape[1], hidden=())
    clf.weights[0].data[...] = weight
    if bias is not None:
        clf.biases[0].data[...] = np.asarray(bias, dtype=np.float64).reshape(1, -1)
    return clf


def _patch_index(size: int, k: int, stride: int = 1) -> tuple[np.ndarray, np.ndarray]:
    out = (size - k) // stride + 1
    base = np.arange(out) * stride
    rows = (base[:, None, None, None] + np.arange(k)[None, None, :, None])
    cols = (base[None, :, None, None] + np.arange(k)[None, None, None, :])
    rows, cols = np.broadcast_arrays(rows, cols)
    return rows.reshape(out * out, k * k), cols.reshape(out * out, k * k)


def conv2d(x: Tensor, w: Tensor, b: Tensor, k: int, pad: int = 0) -> Tensor:
    """Square-kernel stride-1 convolution by patch gathering.

    ``x`` is (N, Cin, H, H), ``w`` is (Cin*k*k, Cout), ``b`` is (1, Cout).
    """
    n, cin, h, _ = x.shape
    if pad:
        zc = Tensor(np.zeros((n, cin, h, pad), dtype=x.dtype))
        x = dc.concat([zc, x, zc], axis=3)
        zr = Tensor(np.zeros((n, cin, pad, h + 2 * pad), dtype=x.dtype))
        x = dc.concat([zr, x, zr], axis=2)
        h += 2 * pad
    rows, cols = _patch_index(h, k)
    out = h - k + 1
    patches = x[:, :, rows, cols]                       # (N, Cin, P, k*k)
    patches = dc.transpose(patches, (0, 2, 1, 3))       # (N, P, Cin, k*k)
    flat = dc.reshape(patches, (n * out * out, cin * k * k))
    y = flat @ w + b                                    # (N*P, Cout)
    y = dc.reshape(y, (n, out, out, w.shape[1]))
    return dc.transpose(y, (0, 3, 1, 2))


def avg_pool2(x: Tensor) -> Tensor:
    n, c, h, _ = x.shape
    if h % 2:
        raise ClassifierError(f"avg_pool2 needs even spatial size, got {h}")
    r = dc.reshape(x, (n, c, h // 2, 2, h // 2, 2))
    return dc.mean(r, axis=(3, 5))


class LeNet(Classifier):
    """conv5(pad 2)-ReLU-pool-conv5-ReLU-pool-fc-ReLU-fc-ReLU-fc on square images.

    Channel and fully connected widths are configurable; weights follow a
    truncated normal with std 0.1.
    """

    def __init__(self, image_shape=(1, 28, 28), n_classes: int = 10, channels=(6, 16),
                 fc=(120, 84), seed: int = 0, dtype=np.float64):
        cin, h, w = image_shape
        if h != w:
            raise ClassifierError("LeNet expects square images")
        s1 = h // 2
        s2 = s1 - 4
        if h % 2 or s2 < 2 or s2 % 2:
            raise ClassifierError(f"image size {h} incompatible with two conv/pool stages")
        rng = np.random.default_rng(seed)
        self.image_shape, self.n_classes = tuple(image_shape), n_classes
        self.channels, self.fc, self.dtype = tuple(channels), tuple(fc), dtype
        self.in_dim = cin * h * w
        c1, c2 = channels
        self.flat_dim = c2 * (s2 // 2) ** 2

        def tn(*shape):
            return Tensor(_truncated_normal(rng, shape, 0.1), dtype=dtype)

        self.conv_w = [tn(cin * 25, c1), tn(c1 * 25, c2)]
        self.conv_b = [Tensor(np.zeros((1, c1)), dtype=dtype), Tensor(np.zeros((1, c2)), dtype=dtype)]
        widths = [self.flat_dim, *fc, n_classes]
        self.fc_w = [tn(a, b) for a, b in zip(widths[:-1], widths[1:])]
        self.fc_b = [Tensor(np.zeros((1, b)), dtype=dtype) for b in widths[1:]]

    def params(self):
        return [*self.conv_w, *self.conv_b, *self.fc_w, *self.fc_b]

    def features(self, x):
        h = _batch(x, self.dtype)
        n = h.shape[0]
        h = dc.reshape(h, (n, *self.image_shape))
        h = avg_pool2(dc.relu(conv2d(h, self.conv_w[0], self.conv_b[0], 5, pad=2)))
        h = avg_pool2(dc.relu(conv2d(h, self.conv_w[1], self.conv_b[1], 5)))
        h = dc.reshape(h, (n, self.flat_dim))
        for w, b in zip(self.fc_w[:-1], self.fc_b[:-1]):
            h = dc.relu(h @ w + b)
        return h

    def logits(self, x):
        return self.features(x) @ self.fc_w[-1] + self.fc_b[-1]

    def describe(self):
        return {"arch": "lenet", "image_shape": list(self.image_shape), "n_classes": self.n_classes,
                "channels": list(self.channels), "fc": list(self.fc)}


def build_classifier(desc: dict, seed: int = 0, dtype=np.float64) -> Classifier:
    arch = desc.get("arch", "mlp")
    if arch == "mlp":
        return MLP(desc["in_dim"], desc["n_classes"], hidden=desc.get("hidden", (64, 64)),
                   seed=seed, dtype=dtype)
    if arch == "lenet":
        return LeNet(tuple(desc["image_shape"]), desc["n_classes"],
                     channels=desc.get("channels", (6, 16)), fc=desc.get("fc", (120, 84)),
                     seed=seed, dtype=dtype)
    raise ClassifierError(f"unknown classifier architecture {arch!r}")
