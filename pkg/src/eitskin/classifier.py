"""Touch / bend / idle classification over 96x96 pre-reconstructed images.

A small encoder-decoder convolutional network implemented from scratch on
numpy: conv(16-32-64) with batch norm and max pooling, a mirrored decoder
with upsampling and transposed convolutions down to a single 96x96 feature
map, and a dense head ending in a 3-way softmax. Training is plain
mini-batch SGD with momentum; everything is deterministic given a seed.

Tensors are laid out channels-last (N, H, W, C) and convolutions run as
im2col GEMMs; elementwise steps are written to minimize memory traffic,
which dominates on narrow-bandwidth machines.

A rule-based baseline classifier over the same binarized images serves as
an independent sanity oracle for the learned model.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np
import scipy.ndimage

from . import _kernels
from .reconstruction import FOUR_CONNECTED, normalize_and_binarize

INPUT_SIZE = 96
N_CLASSES = 3
LABELS = {"idle": 0, "touch": 1, "bend": 2}
LABEL_NAMES = {v: k for k, v in LABELS.items()}

BN_EPS = 1e-5
BN_MOMENTUM = 0.9      # running = m*running + (1-m)*batch
DROPOUT_RATE = 0.1
WEIGHTS_MAGIC = b"EITNN1"


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, epoch: int):
        super().__init__(f"training diverged (non-finite loss) at epoch {epoch}")
        self.epoch = epoch


# --- stride-1 convolution via im2col / GEMM, channels-last ---

def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, pad: int):
    """Stride-1 2-D convolution (cross-correlation).

    x: (N, H, W, C_in); weight: (k, k, C_in, C_out); returns NHWC output
    and the im2col patch matrix for reuse in the backward pass.
    """
    n, h, w, _ = x.shape
    k, _, c_in, c_out = weight.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = _kernels.im2col(x, k)
    out = cols @ weight.reshape(-1, c_out)
    out += bias
    h_out = h + 2 * pad - k + 1
    w_out = w + 2 * pad - k + 1
    return out.reshape(n, h_out, w_out, c_out), cols


def conv2d_backward(dout: np.ndarray, cols: np.ndarray, weight: np.ndarray,
                    pad: int, in_shape, need_dx: bool = True):
    """Gradients of conv2d; dx is computed as a full convolution (GEMM again)."""
    k, _, c_in, c_out = weight.shape
    dflat = dout.reshape(-1, c_out)
    dw = (cols.T @ dflat).reshape(weight.shape)
    db = dflat.sum(axis=0)
    if not need_dx:
        return None, dw, db
    # dx: convolve dout with the spatially flipped, in/out-swapped kernel
    w_back = np.ascontiguousarray(weight[::-1, ::-1].transpose(0, 1, 3, 2))
    dx_full, _ = conv2d(dout, w_back, np.zeros(c_in, dtype=dout.dtype),
                        pad=k - 1 - pad)
    n, h, w, c = in_shape
    return dx_full[:, :h, :w, :], dw, db


class Layer:
    """Minimal layer interface; params/grads are parallel lists of arrays."""

    params: list
    grads: list

    def __init__(self):
        self.params = []
        self.grads = []

    def forward(self, x, training):
        raise NotImplementedError

    def backward(self, dout, need_dx=True):
        raise NotImplementedError

    def state_tensors(self):
        """Tensors to serialize: trainable params plus persistent state."""
        return self.params


class Conv2D(Layer):
    def __init__(self, c_in, c_out, k, rng, dtype):
        super().__init__()
        limit = np.sqrt(6.0 / (c_in * k * k))
        w = rng.uniform(-limit, limit, (k, k, c_in, c_out)).astype(dtype)
        b = np.zeros(c_out, dtype=dtype)
        self.params = [w, b]
        self.grads = [np.zeros_like(w), np.zeros_like(b)]
        self.k = k
        self.pad = k // 2

    def forward(self, x, training):
        out, cols = conv2d(x, self.params[0], self.params[1], self.pad)
        self._cache = (cols, x.shape)
        return out

    def backward(self, dout, need_dx=True):
        cols, in_shape = self._cache
        dx, dw, db = conv2d_backward(dout, cols, self.params[0], self.pad,
                                     in_shape, need_dx)
        self.grads[0][...] = dw
        self.grads[1][...] = db
        return dx


class ConvTranspose2D(Layer):
    """Transposed convolution; stride 1 keeps size, stride 2 doubles it.

    Stride 1 runs as a stride-1 convolution with the flipped kernel. Stride
    2 (output_padding 1, exact 2x upsizing) runs in scatter form: one GEMM
    mapping each input pixel to its k*k output stamp, then strided adds of
    the k*k phase grids, avoiding a zero-stuffed patch matrix.
    """

    def __init__(self, c_in, c_out, k, rng, dtype, stride=1):
        super().__init__()
        limit = np.sqrt(6.0 / (c_in * k * k))
        w = rng.uniform(-limit, limit, (k, k, c_in, c_out)).astype(dtype)
        b = np.zeros(c_out, dtype=dtype)
        self.params = [w, b]
        self.grads = [np.zeros_like(w), np.zeros_like(b)]
        self.k = k
        self.stride = stride
        self.pad = k // 2

    def _conv_kernel(self):
        # flipped spatially, acting C_in -> C_out on the stuffed input
        return np.ascontiguousarray(self.params[0][::-1, ::-1])

    def forward(self, x, training):
        if self.stride == 1:
            out, cols = conv2d(x, self._conv_kernel(), self.params[1], pad=self.pad)
            self._cache = (cols, x.shape)
            return out
        return self._forward_scatter(x)

    def _forward_scatter(self, x):
        s, k, p = self.stride, self.k, self.pad
        n, h, w, c_in = x.shape
        c_out = self.params[0].shape[3]
        # stamp[n,i,j, di,dj,co] = sum_c x[n,i,j,c] * W[di,dj,c,co]
        wmat = self.params[0].transpose(2, 0, 1, 3).reshape(c_in, k * k * c_out)
        stamps = (x.reshape(-1, c_in) @ wmat).reshape(n, h, w, k, k, c_out)
        ho, wo = s * h, s * w
        # input pixel (i, j) lands its stamp at output rows s*i - p + di
        outp = np.zeros((n, ho + k - 1, wo + k - 1, c_out), dtype=x.dtype)
        for di in range(k):
            for dj in range(k):
                outp[:, di:di + s * h:s, dj:dj + s * w:s, :] += stamps[:, :, :, di, dj, :]
        out = outp[:, p:p + ho, p:p + wo, :]
        out += self.params[1]
        self._cache = (x, (n, h, w, c_in))
        return np.ascontiguousarray(out)

    def backward(self, dout, need_dx=True):
        if self.stride == 1:
            cols, in_shape = self._cache
            dx, dw_conv, db = conv2d_backward(dout, cols, self._conv_kernel(),
                                              self.pad, in_shape, need_dx)
            self.grads[0][...] = dw_conv[::-1, ::-1]
            self.grads[1][...] = db
            return dx
        return self._backward_scatter(dout, need_dx)

    def _backward_scatter(self, dout, need_dx=True):
        s, k, p = self.stride, self.k, self.pad
        x, (n, h, w, c_in) = self._cache
        c_out = self.params[0].shape[3]
        doutp = np.pad(dout, ((0, 0), (p, k - 1 - p), (p, k - 1 - p), (0, 0)))
        dstamps = np.empty((n, h, w, k, k, c_out), dtype=dout.dtype)
        for di in range(k):
            for dj in range(k):
                dstamps[:, :, :, di, dj, :] = doutp[:, di:di + s * h:s, dj:dj + s * w:s, :]
        dflat = dstamps.reshape(-1, k * k * c_out)
        xflat = x.reshape(-1, c_in)
        dwmat = xflat.T @ dflat  # (c_in, k*k*c_out)
        self.grads[0][...] = dwmat.reshape(c_in, k, k, c_out).transpose(1, 2, 0, 3)
        self.grads[1][...] = dout.reshape(-1, c_out).sum(axis=0)
        if not need_dx:
            return None
        wmat = self.params[0].transpose(2, 0, 1, 3).reshape(c_in, k * k * c_out)
        return (dflat @ wmat.T).reshape(n, h, w, c_in)


class BatchNorm2D(Layer):
    """Per-channel normalization over (N, H, W), channels-last."""

    def __init__(self, channels, dtype):
        super().__init__()
        gamma = np.ones(channels, dtype=dtype)
        beta = np.zeros(channels, dtype=dtype)
        self.params = [gamma, beta]
        self.grads = [np.zeros_like(gamma), np.zeros_like(beta)]
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x, training):
        gamma, beta = self.params
        if training:
            mean, var = _kernels.bn_channel_stats(x)
            self.running_mean = (BN_MOMENTUM * self.running_mean
                                 + (1.0 - BN_MOMENTUM) * mean).astype(x.dtype)
            self.running_var = (BN_MOMENTUM * self.running_var
                                + (1.0 - BN_MOMENTUM) * var).astype(x.dtype)
        else:
            mean, var = self.running_mean, self.running_var
        inv = (1.0 / np.sqrt(var + BN_EPS)).astype(x.dtype)
        scale = gamma * inv
        shift = beta - gamma * mean * inv
        out = _kernels.bn_apply(x, scale, shift)
        self._cache = (x, mean.astype(x.dtype), inv, training)
        return out

    def backward(self, dout, need_dx=True):
        gamma, _ = self.params
        x, mean, inv, training = self._cache
        if not training:
            xhat = (x - mean) * inv
            self.grads[0][...] = (dout * xhat).sum(axis=(0, 1, 2))
            self.grads[1][...] = dout.sum(axis=(0, 1, 2))
            return dout * (gamma * inv)
        dx, dgamma, dbeta = _kernels.bn_backward_training(x, dout, mean, inv, gamma)
        self.grads[0][...] = dgamma
        self.grads[1][...] = dbeta
        return dx

    def state_tensors(self):
        return self.params + [self.running_mean, self.running_var]


class ReLU(Layer):
    def forward(self, x, training):
        self._mask = x > 0
        np.multiply(x, self._mask, out=x)  # x is this layer's to consume
        return x

    def backward(self, dout):
        np.multiply(dout, self._mask, out=dout)
        return dout


class MaxPool2x2(Layer):
    """2x2, stride 2; winners cached as booleans (ties keep the earlier cell)."""

    def forward(self, x, training):
        out, self._row_win, self._col_win = _kernels.maxpool_forward(x)
        self._in_shape = x.shape
        return out

    def backward(self, dout, need_dx=True):
        return _kernels.maxpool_backward(dout, self._row_win, self._col_win,
                                         self._in_shape)


class Upsample2x(Layer):
    """Nearest-neighbor 2x upsampling."""

    def forward(self, x, training):
        return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)

    def backward(self, dout):
        n, h, w, c = dout.shape
        return dout.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


class Flatten(Layer):
    def forward(self, x, training):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class Dense(Layer):
    def __init__(self, d_in, d_out, rng, dtype):
        super().__init__()
        limit = np.sqrt(6.0 / d_in)
        w = rng.uniform(-limit, limit, (d_in, d_out)).astype(dtype)
        b = np.zeros(d_out, dtype=dtype)
        self.params = [w, b]
        self.grads = [np.zeros_like(w), np.zeros_like(b)]

    def forward(self, x, training):
        self._x = x
        return x @ self.params[0] + self.params[1]

    def backward(self, dout):
        self.grads[0][...] = self._x.T @ dout
        self.grads[1][...] = dout.sum(axis=0)
        return dout @ self.params[0].T


class Dropout(Layer):
    def __init__(self, rate, rng):
        super().__init__()
        self.rate = rate
        self.rng = rng

    def forward(self, x, training):
        if not training or self.rate == 0.0:
            self._mask = None
            return x
        keep = 1.0 - self.rate
        self._mask = (self.rng.random(x.shape) < keep).astype(x.dtype) / keep
        return x * self._mask

    def backward(self, dout):
        return dout if self._mask is None else dout * self._mask


class Network:
    """The fixed classification architecture as an ordered layer list."""

    def __init__(self, layers, seed, dtype):
        self.layers = layers
        self.seed = seed
        self.dtype = dtype

    def forward(self, x, training=False):
        """x: (N, 96, 96) or (N, 96, 96, 1) -> logits (N, 3)."""
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 3:
            x = x[..., None]
        x = x.copy()  # first ReLU-free layer may not mutate caller data
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def backward(self, dlogits):
        d = dlogits
        for i in range(len(self.layers) - 1, 0, -1):
            d = self.layers[i].backward(d)
        first = self.layers[0]
        if isinstance(first, (Conv2D, ConvTranspose2D)):
            # input gradients are never consumed below the first layer
            return first.backward(d, need_dx=False)
        return first.backward(d)

    def param_arrays(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params)
        return out

    def grad_arrays(self):
        out = []
        for layer in self.layers:
            out.extend(layer.grads)
        return out

    def state_arrays(self):
        out = []
        for layer in self.layers:
            out.extend(layer.state_tensors())
        return out

    @property
    def n_parameters(self) -> int:
        return sum(p.size for p in self.param_arrays())


def init_network(seed: int = 0, dtype=np.float32) -> Network:
    """Build and initialize the full encoder-decoder classifier."""
    rng = np.random.default_rng([seed, 0xE17])
    drop_rng = np.random.default_rng([seed, 0xD60])
    layers = [
        Conv2D(1, 16, 3, rng, dtype), BatchNorm2D(16, dtype), ReLU(), MaxPool2x2(),
        Conv2D(16, 32, 3, rng, dtype), BatchNorm2D(32, dtype), ReLU(), MaxPool2x2(),
        Conv2D(32, 64, 3, rng, dtype), BatchNorm2D(64, dtype), ReLU(), MaxPool2x2(),
        Upsample2x(), ConvTranspose2D(64, 32, 3, rng, dtype), ReLU(),
        Upsample2x(), ConvTranspose2D(32, 16, 3, rng, dtype), ReLU(),
        ConvTranspose2D(16, 1, 3, rng, dtype, stride=2),
        Flatten(),
        Dense(INPUT_SIZE * INPUT_SIZE, 256, rng, dtype), ReLU(), Dropout(DROPOUT_RATE, drop_rng),
        Dense(256, 128, rng, dtype), ReLU(), Dropout(DROPOUT_RATE, drop_rng),
        Dense(128, 16, rng, dtype), ReLU(),
        Dense(16, N_CLASSES, rng, dtype),
    ]
    return Network(layers, seed, dtype)


def init_dense_head_network(seed: int = 0, dtype=np.float64) -> Network:
    """Head-only reduced network (flatten + dense stack), for tight
    gradient-check tolerances without conv roundoff."""
    rng = np.random.default_rng([seed, 0xE17])
    drop_rng = np.random.default_rng([seed, 0xD60])
    layers = [
        Flatten(),
        Dense(INPUT_SIZE * INPUT_SIZE, 256, rng, dtype), ReLU(), Dropout(DROPOUT_RATE, drop_rng),
        Dense(256, 128, rng, dtype), ReLU(), Dropout(DROPOUT_RATE, drop_rng),
        Dense(128, 16, rng, dtype), ReLU(),
        Dense(16, N_CLASSES, rng, dtype),
    ]
    return Network(layers, seed, dtype)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean sparse categorical cross-entropy and its logits gradient."""
    p = softmax(logits.astype(np.float64))
    n = len(labels)
    loss = float(-np.log(np.maximum(p[np.arange(n), labels], 1e-300)).mean())
    dlogits = p.copy()
    dlogits[np.arange(n), labels] -= 1.0
    return loss, (dlogits / n).astype(logits.dtype)


def forward_pass(net: Network, raster: np.ndarray, training: bool = False) -> np.ndarray:
    """Class probabilities for a single 96x96 raster."""
    logits = net.forward(raster[None, ...], training=training)
    return softmax(logits.astype(np.float64))[0]


def predict(net: Network, images: np.ndarray, batch: int = 128) -> np.ndarray:
    """Argmax labels for a stack of rasters, inference mode."""
    out = np.empty(len(images), dtype=np.int64)
    for i in range(0, len(images), batch):
        logits = net.forward(images[i:i + batch], training=False)
        out[i:i + batch] = logits.argmax(axis=1)
    return out


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 100
    learning_rate: float = 0.01
    momentum: float = 0.9
    lr_halve_every: int = 30
    test_fraction: float = 0.2
    seed: int = 0


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float


def stratified_split(labels: np.ndarray, test_fraction: float, seed: int):
    """Per-class shuffled split; returns (train_idx, test_idx)."""
    rng = np.random.default_rng([seed, 0x5B117])
    train, test = [], []
    for cls in np.unique(labels):
        idx = np.nonzero(labels == cls)[0]
        idx = rng.permutation(idx)
        n_test = int(round(test_fraction * len(idx)))
        test.extend(idx[:n_test])
        train.extend(idx[n_test:])
    return np.sort(np.array(train, dtype=np.int64)), np.sort(np.array(test, dtype=np.int64))


def train(net: Network, images: np.ndarray, labels: np.ndarray,
          cfg: TrainConfig = TrainConfig()):
    """Mini-batch SGD with momentum over a stratified 80/20 split.

    Returns (history, train_idx, test_idx); history is one EpochStats per
    epoch. Raises TrainingDivergedError if the loss goes non-finite.
    """
    if len(images) == 0:
        raise ValueError("empty dataset")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= N_CLASSES:
        raise ValueError("labels must be in {0, 1, 2}")
    images = np.asarray(images, dtype=net.dtype)

    train_idx, test_idx = stratified_split(labels, cfg.test_fraction, cfg.seed)
    x_train, y_train = images[train_idx], labels[train_idx]
    x_test, y_test = images[test_idx], labels[test_idx]

    rng = np.random.default_rng([cfg.seed, 0x7121])
    params = net.param_arrays()
    grads = net.grad_arrays()
    velocity = [np.zeros_like(p) for p in params]

    history = []
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate * (0.5 ** (epoch // cfg.lr_halve_every))
        order = rng.permutation(len(x_train))
        losses = []
        correct = 0
        for start in range(0, len(order), cfg.batch_size):
            sel = order[start:start + cfg.batch_size]
            logits = net.forward(x_train[sel], training=True)
            loss, dlogits = cross_entropy(logits, y_train[sel])
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch)
            losses.append(loss * len(sel))
            correct += int((logits.argmax(axis=1) == y_train[sel]).sum())
            net.backward(dlogits)
            for p, g, v in zip(params, grads, velocity):
                _kernels.sgd_update(p, g, v, lr, cfg.momentum)
        train_loss = float(np.sum(losses) / len(x_train))
        train_acc = correct / len(x_train)
        test_acc = (float((predict(net, x_test) == y_test).mean())
                    if len(x_test) else float("nan"))
        history.append(EpochStats(epoch, train_loss, train_acc, test_acc))
    return history, train_idx, test_idx


def history_to_csv(history) -> str:
    lines = ["epoch,train_loss,train_acc,test_acc"]
    for h in history:
        lines.append(f"{h.epoch},{h.train_loss!r},{h.train_acc!r},{h.test_acc!r}")
    return "\n".join(lines) + "\n"


def gradient_check(net: Network, sample: np.ndarray, label: int,
                   epsilon: float = 1e-4, n_params: int = 200,
                   seed: int = 0) -> float:
    """Max relative error between backprop and central finite differences.

    Runs in inference mode (dropout off, batch norm on running statistics)
    over >= n_params randomly sampled parameters across all tensors.
    """
    x = sample[None, ...]
    y = np.array([label])

    def loss_at():
        logits = net.forward(x, training=False)
        return cross_entropy(logits, y)[0]

    logits = net.forward(x, training=False)
    loss, dlogits = cross_entropy(logits, y)
    net.backward(dlogits)
    params = net.param_arrays()
    grads = net.grad_arrays()

    rng = np.random.default_rng([seed, 0x6C])
    sizes = np.array([p.size for p in params])
    total = sizes.sum()
    flat_choices = rng.choice(total, size=min(n_params, total), replace=False)
    bounds = np.cumsum(sizes)

    worst = 0.0
    for flat in flat_choices:
        t = int(np.searchsorted(bounds, flat, side="right"))
        j = int(flat - (bounds[t - 1] if t else 0))
        p = params[t].reshape(-1)
        orig = p[j]
        p[j] = orig + epsilon
        up = loss_at()
        p[j] = orig - epsilon
        down = loss_at()
        p[j] = orig
        numeric = (up - down) / (2.0 * epsilon)
        analytic = float(grads[t].reshape(-1)[j])
        denom = max(abs(numeric), abs(analytic), 1e-12)
        worst = max(worst, abs(numeric - analytic) / denom)
    return worst


# --- rule-based baseline (independent oracle for the learned model) ---

BASELINE_MIN_ACTIVE = 10
BASELINE_BAND_MM = (55.0, 95.0)
BASELINE_BAND_MARGIN_PX = 10  # reconstruction spreads the band past its edges
BASELINE_HEIGHT_FRACTION = 0.8


def baseline_classify(raster: np.ndarray, band_mm=BASELINE_BAND_MM,
                      domain_width_mm: float = 150.0) -> int:
    """Hand rule over a binarized raster: sparse -> idle; a full-height
    component confined to the bend band -> bend; anything else -> touch."""
    active = int((raster > 0.5).sum())
    if active < BASELINE_MIN_ACTIVE:
        return LABELS["idle"]
    labels, n = scipy.ndimage.label(raster > 0.5, structure=FOUR_CONNECTED)
    sizes = scipy.ndimage.sum_labels(np.ones_like(raster), labels, range(1, n + 1))
    largest = int(np.argmax(sizes)) + 1
    rr, cc = np.nonzero(labels == largest)
    height = rr.max() - rr.min() + 1
    size_r, size_c = raster.shape
    c_lo = band_mm[0] / domain_width_mm * size_c - BASELINE_BAND_MARGIN_PX
    c_hi = band_mm[1] / domain_width_mm * size_c + BASELINE_BAND_MARGIN_PX
    in_band = cc.min() >= c_lo and cc.max() <= c_hi
    if height >= BASELINE_HEIGHT_FRACTION * size_r and in_band:
        return LABELS["bend"]
    return LABELS["touch"]


def preprocess(img) -> np.ndarray:
    """Classifier input: min-max normalized, binarized at 0.5."""
    return normalize_and_binarize(img, threshold=0.5)


def dataset_from_log(log, reconstructor, reference):
    """Pre-reconstruct and binarize every frame of a labeled log.

    Returns (images (n, 96, 96) in {0,1}, labels (n,)). Frames labeled with
    the composite touch+bend class are rejected: the classifier is 3-way.
    """
    from .reconstruction import reconstruct
    images, labels = [], []
    for e in log:
        if e.label not in LABELS:
            raise ValueError(f"frame {e.frame.frame_id}: label {e.label!r} "
                             "is not a classifier class")
        img = reconstruct(reconstructor, e.frame, reference)
        images.append(preprocess(img))
        labels.append(LABELS[e.label])
    return np.array(images), np.array(labels, dtype=np.int64)


# --- weights container ---

_DTYPE_CODES = {4: np.float32, 8: np.float64}


def save_weights(net: Network) -> bytes:
    """EITNN1 container: magic, dtype code, tensor count, then per tensor a
    name header, shape header, and raw little-endian data, in layer order."""
    buf = io.BytesIO()
    buf.write(WEIGHTS_MAGIC)
    itemsize = np.dtype(net.dtype).itemsize
    tensors = net.state_arrays()
    buf.write(struct.pack("<BI", itemsize, len(tensors)))
    for i, t in enumerate(tensors):
        name = f"tensor_{i}".encode("ascii")
        buf.write(struct.pack("<I", len(name)))
        buf.write(name)
        buf.write(struct.pack("<I", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(np.ascontiguousarray(t, dtype=f"<f{itemsize}").tobytes())
    return buf.getvalue()


def load_weights(data: bytes, net: Network | None = None) -> Network:
    """Parse an EITNN1 container into a freshly initialized network."""
    buf = io.BytesIO(data)
    if buf.read(len(WEIGHTS_MAGIC)) != WEIGHTS_MAGIC:
        raise ValueError("not an EITNN1 weights container")
    itemsize, count = struct.unpack("<BI", buf.read(5))
    dtype = _DTYPE_CODES.get(itemsize)
    if dtype is None:
        raise ValueError(f"unsupported dtype size {itemsize}")
    if net is None:
        net = init_network(seed=0, dtype=dtype)
    targets = net.state_arrays()
    if len(targets) != count:
        raise ValueError(f"tensor count mismatch: file {count}, network {len(targets)}")
    for t in targets:
        name_len, = struct.unpack("<I", buf.read(4))
        buf.read(name_len)
        ndim, = struct.unpack("<I", buf.read(4))
        shape = struct.unpack(f"<{ndim}I", buf.read(4 * ndim))
        if tuple(shape) != t.shape:
            raise ValueError(f"tensor shape mismatch: file {shape}, network {t.shape}")
        raw = buf.read(int(np.prod(shape)) * itemsize)
        t[...] = np.frombuffer(raw, dtype=f"<f{itemsize}").reshape(shape)
    return net
