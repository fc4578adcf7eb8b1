"""Minimal deterministic neural-network training engine.

Dense and small valid-convolution layers on float64 numpy arrays, trained
with mini-batch SGD (momentum + coupled L2 weight decay) on softmax
cross-entropy, under a cosine-annealed learning rate with warm restarts.
Layers are counted in *parameterized* layers from the input side;
activations attach to the parameterized layer before them.  Everything is
a pure function of its inputs and seeds: same call, same bits.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, TrainingError

DTYPE = np.float64


# --------------------------------------------------------------------
# layers


class Dense:
    kind = "dense"
    has_params = True

    def __init__(self, in_dim, out_dim):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.w = np.zeros((in_dim, out_dim), dtype=DTYPE)
        self.b = np.zeros(out_dim, dtype=DTYPE)

    @property
    def fan_in(self):
        return self.in_dim

    def params(self):
        return [self.w, self.b]

    def set_params(self, arrays):
        self.w, self.b = arrays

    def copy(self):
        new = Dense.__new__(Dense)
        new.in_dim, new.out_dim = self.in_dim, self.out_dim
        new.w, new.b = self.w.copy(), self.b.copy()
        return new

    def out_shape(self, in_shape):
        if len(in_shape) != 1 or in_shape[0] != self.in_dim:
            raise ConfigurationError(
                f"dense:{self.out_dim} expects a flat input of {self.in_dim} "
                f"features, got shape {in_shape}"
            )
        return (self.out_dim,)

    def forward(self, x):
        return x @ self.w + self.b, x

    def backward(self, grad, cache):
        x = cache
        return grad @ self.w.T, [x.T @ grad, grad.sum(axis=0)]

    def spec_fields(self):
        return {"in": self.in_dim, "out": self.out_dim}


class Relu:
    kind = "relu"
    has_params = False

    def copy(self):
        return Relu()

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x):
        return np.maximum(x, 0.0), x > 0

    def backward(self, grad, cache):
        return grad * cache, []

    def spec_fields(self):
        return {}


class Flatten:
    kind = "flatten"
    has_params = False

    def copy(self):
        return Flatten()

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, grad, cache):
        return grad.reshape(cache), []

    def spec_fields(self):
        return {}


class Conv2d:
    """Valid convolution, stride 1, square kernel, via im2col."""

    kind = "conv"
    has_params = True

    def __init__(self, in_ch, out_ch, ksize):
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.ksize = ksize
        self.w = np.zeros((out_ch, in_ch, ksize, ksize), dtype=DTYPE)
        self.b = np.zeros(out_ch, dtype=DTYPE)

    @property
    def fan_in(self):
        return self.in_ch * self.ksize * self.ksize

    def params(self):
        return [self.w, self.b]

    def set_params(self, arrays):
        self.w, self.b = arrays

    def copy(self):
        new = Conv2d.__new__(Conv2d)
        new.in_ch, new.out_ch, new.ksize = self.in_ch, self.out_ch, self.ksize
        new.w, new.b = self.w.copy(), self.b.copy()
        return new

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_ch:
            raise ConfigurationError(
                f"conv:{self.out_ch}:{self.ksize} expects (channels={self.in_ch}"
                f", h, w) input, got shape {in_shape}"
            )
        h, w = in_shape[1], in_shape[2]
        if h < self.ksize or w < self.ksize:
            raise ConfigurationError(
                f"conv kernel {self.ksize} larger than input {h}x{w}"
            )
        return (self.out_ch, h - self.ksize + 1, w - self.ksize + 1)

    def _im2col(self, x):
        n, c, h, w = x.shape
        k = self.ksize
        oh, ow = h - k + 1, w - k + 1
        s0, s1, s2, s3 = x.strides
        cols = np.lib.stride_tricks.as_strided(
            x, (n, oh, ow, c, k, k), (s0, s2, s3, s1, s2, s3)
        )
        return cols.reshape(n * oh * ow, c * k * k), (n, oh, ow)

    def forward(self, x):
        cols, (n, oh, ow) = self._im2col(x)
        wmat = self.w.reshape(self.out_ch, -1).T
        out = cols @ wmat + self.b
        out = out.reshape(n, oh, ow, self.out_ch).transpose(0, 3, 1, 2)
        return out, (cols, x.shape, (n, oh, ow))

    def backward(self, grad, cache):
        cols, x_shape, (n, oh, ow) = cache
        k = self.ksize
        g = grad.transpose(0, 2, 3, 1).reshape(n * oh * ow, self.out_ch)
        dw = (cols.T @ g).T.reshape(self.w.shape)
        db = g.sum(axis=0)
        dcols = g @ self.w.reshape(self.out_ch, -1)
        dx = np.zeros(x_shape, dtype=DTYPE)
        dcols = dcols.reshape(n, oh, ow, self.in_ch, k, k)
        for di in range(k):
            for dj in range(k):
                dx[:, :, di : di + oh, dj : dj + ow] += dcols[
                    :, :, :, :, di, dj
                ].transpose(0, 3, 1, 2)
        return dx, [dw, db]

    def spec_fields(self):
        return {"in_ch": self.in_ch, "out_ch": self.out_ch, "k": self.ksize}


# --------------------------------------------------------------------
# architecture + model


@dataclass(frozen=True)
class ArchSpec:
    """Declarative architecture: comma-separated layer tokens
    (dense:<out>, relu, flatten, conv:<out_ch>:<k>), the input shape,
    and the number of classes the final layer must emit."""

    layers: str
    input_shape: tuple
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if not self.layers.strip():
            raise ConfigurationError("architecture has no layers")
        if any(d < 1 for d in self.input_shape) or len(self.input_shape) not in (1, 3):
            raise ConfigurationError(
                f"input shape must be (features,) or (c, h, w), got {self.input_shape}"
            )
        if self.num_classes < 2:
            raise ConfigurationError("need at least two classes")
        _build_layers(self)  # shape-chain check at construction time

    @property
    def arch_id(self):
        shape = "x".join(str(d) for d in self.input_shape)
        return f"{shape}->{self.layers}->{self.num_classes}"


def _build_layers(spec):
    layers = []
    shape = spec.input_shape
    for token in spec.layers.split(","):
        token = token.strip()
        parts = token.split(":")
        name = parts[0]
        try:
            if name == "dense":
                (out,) = (int(p) for p in parts[1:])
                if len(shape) != 1:
                    raise ConfigurationError(
                        f"dense layer after non-flat shape {shape}; add flatten"
                    )
                layer = Dense(shape[0], out)
            elif name == "relu":
                if len(parts) != 1:
                    raise ConfigurationError(f"relu takes no sizes: {token!r}")
                layer = Relu()
            elif name == "flatten":
                if len(parts) != 1:
                    raise ConfigurationError(f"flatten takes no sizes: {token!r}")
                layer = Flatten()
            elif name == "conv":
                out_ch, k = (int(p) for p in parts[1:])
                if len(shape) != 3:
                    raise ConfigurationError(
                        f"conv layer needs (c, h, w) input, have shape {shape}"
                    )
                layer = Conv2d(shape[0], out_ch, k)
            else:
                raise ConfigurationError(f"unknown layer token {token!r}")
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"bad layer token {token!r}") from exc
        shape = layer.out_shape(shape)
        layers.append(layer)
    if len(shape) != 1 or shape[0] != spec.num_classes:
        raise ConfigurationError(
            f"final layer emits shape {shape}, expected ({spec.num_classes},)"
        )
    return layers


class Model:
    """Ordered layer list with an immutable-by-convention contract:
    training and re-initialization return new models."""

    def __init__(self, spec, layers):
        self.spec = spec
        self.layers = layers

    @property
    def arch_id(self):
        return self.spec.arch_id

    @property
    def num_classes(self):
        return self.spec.num_classes

    @property
    def param_layer_count(self):
        return sum(1 for lay in self.layers if lay.has_params)

    def param_layer_indices(self):
        return [i for i, lay in enumerate(self.layers) if lay.has_params]

    def copy(self):
        return Model(self.spec, [lay.copy() for lay in self.layers])

    def _shape_input(self, features):
        x = np.ascontiguousarray(features, dtype=DTYPE)
        if x.ndim != 2 or x.shape[1] != int(np.prod(self.spec.input_shape)):
            raise ConfigurationError(
                f"expected (batch, {int(np.prod(self.spec.input_shape))}) features, "
                f"got {x.shape}"
            )
        if len(self.spec.input_shape) > 1:
            x = x.reshape((x.shape[0],) + self.spec.input_shape)
        return x

    def logits(self, features):
        x = self._shape_input(features)
        for lay in self.layers:
            x, _ = lay.forward(x)
        return x


def init_model(spec, seed):
    """Build a model with Kaiming-normal weights (fan-in, ReLU gain) and
    zero biases.  Each parameterized layer draws from its own seed stream,
    so re-initializing a suffix reproduces exactly the draws a fresh
    init_model would give those layers."""
    layers = _build_layers(spec)
    model = Model(spec, layers)
    param_layers = [lay for lay in layers if lay.has_params]
    streams = np.random.SeedSequence(seed).spawn(len(param_layers))
    for lay, stream in zip(param_layers, streams):
        _kaiming_init(lay, stream)
    return model


def _kaiming_init(layer, seed_seq):
    rng = np.random.default_rng(seed_seq)
    w = layer.params()[0]
    std = math.sqrt(2.0 / layer.fan_in)
    new_w = rng.normal(0.0, std, size=w.shape).astype(DTYPE)
    layer.set_params([new_w, np.zeros_like(layer.params()[1])])


def reinit_suffix(model, k, seed):
    """Redraw the last k parameterized layers from the init scheme;
    earlier layers are copied bit-for-bit.  k=0 is the identity,
    k=param_layer_count reproduces init_model(spec, seed)."""
    total = model.param_layer_count
    if not 0 <= k <= total:
        raise ConfigurationError(f"k={k} outside [0, {total}]")
    new = model.copy()
    streams = np.random.SeedSequence(seed).spawn(total)
    param_layers = [lay for lay in new.layers if lay.has_params]
    for j in range(total - k, total):
        _kaiming_init(param_layers[j], streams[j])
    return new


# --------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 5e-5
    min_lr: float = 5e-3
    max_lr: float = 1e-2
    t0: int = 1
    t_mult: int = 2
    init: str = "kaiming_normal"
    seed: int = 0
    warm_restarts: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("momentum must be in [0, 1)")
        if self.weight_decay < 0.0:
            raise ConfigurationError("weight_decay must be >= 0")
        if not 0.0 < self.min_lr <= self.max_lr:
            raise ConfigurationError("need 0 < min_lr <= max_lr")
        if self.t0 < 1 or self.t_mult < 1:
            raise ConfigurationError("t0 and t_mult must be >= 1")
        if self.init != "kaiming_normal":
            raise ConfigurationError(f"unknown init scheme {self.init!r}")
        if not 0 <= self.seed < 2**64:
            raise ConfigurationError("seed must fit in 64 unsigned bits")


def lr_at(config, epoch):
    """Cosine-annealed learning rate at the start of `epoch`.  With warm
    restarts the cycle length starts at t0 epochs and multiplies by t_mult
    after each restart; otherwise one cycle spans all epochs."""
    if not 0 <= epoch < config.epochs:
        raise ConfigurationError(f"epoch {epoch} outside [0, {config.epochs})")
    if config.warm_restarts:
        t_i, start = config.t0, 0
        while start + t_i <= epoch:
            start += t_i
            t_i *= config.t_mult
        t_cur = epoch - start
    else:
        t_i, t_cur = config.epochs, epoch
    if t_cur == 0:
        return config.max_lr
    return config.min_lr + 0.5 * (config.max_lr - config.min_lr) * (
        1.0 + math.cos(math.pi * t_cur / t_i)
    )


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _loss_and_grad(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    n = logits.shape[0]
    loss = float((lse - z[np.arange(n), labels]).mean())
    probs = np.exp(z - lse[:, None])
    probs[np.arange(n), labels] -= 1.0
    return loss, probs / n


def _read_data(data, num_classes, input_size):
    features = np.ascontiguousarray(data.features, dtype=DTYPE)
    labels = np.asarray(data.labels, dtype=np.int64)
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise ConfigurationError(
            f"features {features.shape} and labels {labels.shape} do not align"
        )
    if features.shape[0] == 0:
        raise ConfigurationError("training data is empty")
    if features.shape[1] != input_size:
        raise ConfigurationError(
            f"model expects {input_size} features, data has {features.shape[1]}"
        )
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ConfigurationError("labels outside [0, num_classes)")
    return features, labels


def train(model, data, config, frozen_prefix=0):
    """Run config.epochs of mini-batch SGD with momentum and coupled L2
    weight decay on softmax cross-entropy.  The first `frozen_prefix`
    parameterized layers come back bit-identical; the input model is
    never mutated.  Raises TrainingError with the epoch index if the
    loss goes non-finite."""
    total = model.param_layer_count
    if not 0 <= frozen_prefix <= total:
        raise ConfigurationError(f"frozen_prefix={frozen_prefix} outside [0, {total}]")
    features, labels = _read_data(
        data, model.num_classes, int(np.prod(model.spec.input_shape))
    )
    model = model.copy()
    if frozen_prefix == total:
        return model  # nothing trainable

    live_indices = model.param_layer_indices()[frozen_prefix:]
    first_live = live_indices[0]
    velocity = {
        i: [np.zeros_like(p) for p in model.layers[i].params()]
        for i in live_indices
    }

    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    n = features.shape[0]
    mu, wd = config.momentum, config.weight_decay
    for epoch in range(config.epochs):
        lr = lr_at(config, epoch)
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            x = model._shape_input(features[idx])
            y = labels[idx]
            caches = []
            for lay in model.layers:
                x, cache = lay.forward(x)
                caches.append(cache)
            loss, grad = _loss_and_grad(x, y)
            if not math.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}", epoch=epoch
                )
            grads = {}
            for i in range(len(model.layers) - 1, first_live - 1, -1):
                lay = model.layers[i]
                grad, pgrads = lay.backward(grad, caches[i])
                if lay.has_params:
                    grads[i] = pgrads
            for i in live_indices:
                for p, v, g in zip(model.layers[i].params(), velocity[i], grads[i]):
                    g = g + wd * p
                    v *= mu
                    v += g
                    p -= lr * v
    return model


def predict_probs(model, features):
    """Softmax class probabilities, one row per sample."""
    logits = model.logits(features)
    return softmax(logits)


# --------------------------------------------------------------------
# prefix caching


def _boundary_index(model, frozen_prefix):
    total = model.param_layer_count
    if frozen_prefix < 1:
        raise ConfigurationError("frozen_prefix must be >= 1 to cache features")
    if frozen_prefix > total:
        raise ConfigurationError(f"frozen_prefix={frozen_prefix} > {total}")
    if frozen_prefix == total:
        return len(model.layers)
    return model.param_layer_indices()[frozen_prefix]


def precompute_prefix_features(model, frozen_prefix, data):
    """Activations at the freeze boundary (after the frozen_prefix-th
    parameterized layer and its attached activations), flattened to a
    (samples, features) matrix.  Training the suffix on these features
    reproduces full-network frozen-prefix training bit for bit."""
    boundary = _boundary_index(model, frozen_prefix)
    features = np.ascontiguousarray(data.features, dtype=DTYPE)
    x = model._shape_input(features)
    for lay in model.layers[:boundary]:
        x, _ = lay.forward(x)
    return x.reshape(x.shape[0], -1)


def boundary_shape(model, frozen_prefix):
    boundary = _boundary_index(model, frozen_prefix)
    shape = model.spec.input_shape
    for lay in model.layers[:boundary]:
        shape = lay.out_shape(shape)
    return shape


def suffix_model(model, frozen_prefix):
    """The trailing sub-network that consumes freeze-boundary features."""
    boundary = _boundary_index(model, frozen_prefix)
    shape = boundary_shape(model, frozen_prefix)
    tail = ",".join(
        _layer_token(lay) for lay in model.layers[boundary:]
    )
    spec = ArchSpec(tail, shape, model.num_classes)
    return Model(spec, [lay.copy() for lay in model.layers[boundary:]])


def replace_suffix(model, frozen_prefix, trained_suffix):
    """Splice a trained suffix back under the original frozen prefix."""
    boundary = _boundary_index(model, frozen_prefix)
    if len(trained_suffix.layers) != len(model.layers) - boundary:
        raise ConfigurationError("suffix layer count does not match the split")
    layers = [lay.copy() for lay in model.layers[:boundary]]
    layers += [lay.copy() for lay in trained_suffix.layers]
    return Model(model.spec, layers)


def _layer_token(layer):
    if layer.kind == "dense":
        return f"dense:{layer.out_dim}"
    if layer.kind == "conv":
        return f"conv:{layer.out_ch}:{layer.ksize}"
    return layer.kind


# --------------------------------------------------------------------
# checkpoints


def params_equal(a, b):
    """Bit-exact parameter comparison between two models."""
    la = [lay for lay in a.layers if lay.has_params]
    lb = [lay for lay in b.layers if lay.has_params]
    if len(la) != len(lb):
        return False
    for x, y in zip(la, lb):
        for p, q in zip(x.params(), y.params()):
            if p.shape != q.shape or not np.array_equal(p, q):
                return False
    return True


def _encode(arr):
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode(
        "ascii"
    )


def _decode(text, shape):
    arr = np.frombuffer(base64.b64decode(text), dtype="<f8").astype(DTYPE)
    return arr.reshape(shape)


def checkpoint_bytes(model):
    blob = {
        "format": "unlearn-bench-checkpoint",
        "version": 1,
        "arch_id": model.arch_id,
        "arch_layers": model.spec.layers,
        "input_shape": list(model.spec.input_shape),
        "num_classes": model.spec.num_classes,
        "layers": [],
    }
    for lay in model.layers:
        entry = {"kind": lay.kind, **lay.spec_fields()}
        if lay.has_params:
            w, b = lay.params()
            entry["w"] = _encode(w)
            entry["b"] = _encode(b)
        blob["layers"].append(entry)
    return json.dumps(blob, sort_keys=True, separators=(",", ":")).encode("ascii")


def model_from_bytes(raw):
    blob = json.loads(raw.decode("ascii"))
    if blob.get("format") != "unlearn-bench-checkpoint":
        raise ConfigurationError("not a model checkpoint")
    spec = ArchSpec(
        blob["arch_layers"], tuple(blob["input_shape"]), blob["num_classes"]
    )
    model = Model(spec, _build_layers(spec))
    entries = blob["layers"]
    if len(entries) != len(model.layers):
        raise ConfigurationError("checkpoint layer count mismatch")
    for lay, entry in zip(model.layers, entries):
        if entry["kind"] != lay.kind:
            raise ConfigurationError("checkpoint layer kind mismatch")
        if lay.has_params:
            w, b = lay.params()
            lay.set_params([_decode(entry["w"], w.shape), _decode(entry["b"], b.shape)])
    return model


def save_checkpoint(model, path):
    data = checkpoint_bytes(model)
    with open(path, "wb") as fh:
        fh.write(data)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
