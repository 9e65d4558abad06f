"""Small classifiers with an explicit embedding / logit split.

Every model maps a batch to ``(embedding, logits)``: the embedding is the
input of the final linear layer and the logits are that layer's output.
Parameters live in one flat float64 vector described by a ParamLayout.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import prod

import numpy as np

from .numerics import ParamLayout, Tensor, as_tensor, avg_pool2d, conv2d, log_softmax, relu, softplus

KINDS = ("logistic-1d", "mlp", "convnet-lite")


@dataclass(frozen=True)
class Architecture:
    """Model descriptor.

    ``widths`` is the full MLP layer list including input and output size,
    e.g. ``(784, 128, 10)``. ``channels`` lists the conv widths of the three
    (or more) convnet-lite blocks.
    """

    kind: str
    input_shape: tuple[int, ...]
    num_classes: int
    widths: tuple[int, ...] = ()
    channels: tuple[int, ...] = ()
    kernel: int = 3

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown architecture {self.kind!r}; expected one of {KINDS}")
        if self.kind == "mlp":
            if len(self.widths) < 2:
                raise ValueError("mlp needs at least input and output widths")
            if self.widths[0] != prod(self.input_shape):
                raise ValueError(f"mlp input width {self.widths[0]} != input size {prod(self.input_shape)}")
            if self.widths[-1] != self.num_classes:
                raise ValueError(f"mlp output width {self.widths[-1]} != num_classes {self.num_classes}")
        if self.kind == "convnet-lite":
            if len(self.input_shape) != 3:
                raise ValueError(f"convnet-lite needs (C, H, W) inputs, got {self.input_shape}")
            if not self.channels:
                raise ValueError("convnet-lite needs at least one channel width")
        if self.kind == "logistic-1d" and (self.input_shape != (1,) or self.num_classes != 2):
            raise ValueError("logistic-1d takes 1-D inputs and has 2 classes")

    @classmethod
    def logistic_1d(cls):
        return cls("logistic-1d", (1,), 2)

    @classmethod
    def mlp(cls, widths, input_shape=None):
        widths = tuple(int(v) for v in widths)
        return cls("mlp", tuple(input_shape) if input_shape else (widths[0],), widths[-1], widths=widths)

    @classmethod
    def convnet_lite(cls, input_shape, num_classes, channels=(8, 16, 32)):
        return cls("convnet-lite", tuple(input_shape), int(num_classes), channels=tuple(channels))

    @property
    def logit_dim(self) -> int:
        # The 1-D logistic model has a single binary logit.
        return 1 if self.kind == "logistic-1d" else self.num_classes

    @property
    def embed_dim(self) -> int:
        if self.kind == "logistic-1d":
            return 1
        if self.kind == "mlp":
            return self.widths[-2]
        _, h, w = self.input_shape
        for _ in self.channels:
            h, w = h // 2, w // 2
        return self.channels[-1] * h * w

    def layout(self) -> ParamLayout:
        if self.kind == "logistic-1d":
            return ParamLayout((("w", (1,)),))
        entries = []
        if self.kind == "mlp":
            for i, (a, b) in enumerate(zip(self.widths[:-2], self.widths[1:-1])):
                entries += [(f"W{i}", (a, b)), (f"b{i}", (b,))]
        else:
            c_in = self.input_shape[0]
            for i, c_out in enumerate(self.channels):
                entries += [(f"K{i}", (c_out, c_in, self.kernel, self.kernel)), (f"c{i}", (c_out,))]
                c_in = c_out
        entries += [("W_head", (self.embed_dim, self.num_classes)), ("b_head", (self.num_classes,))]
        return ParamLayout(tuple(entries))


def param_count(model_or_arch) -> int:
    arch = getattr(model_or_arch, "arch", model_or_arch)
    return arch.layout().size


def init_params(arch: Architecture, seed) -> np.ndarray:
    """He-uniform weights, zero biases. The logistic model starts at w = 0."""
    rng = np.random.default_rng(seed)
    layout = arch.layout()
    blocks = {}
    for name, shape in layout.entries:
        if arch.kind == "logistic-1d" or name[0] in "bc":
            blocks[name] = np.zeros(shape)
            continue
        fan_in = prod(shape[1:]) if len(shape) == 4 else shape[0]
        bound = np.sqrt(6.0 / fan_in)
        blocks[name] = rng.uniform(-bound, bound, size=shape)
    return layout.flatten(blocks)


@dataclass
class Model:
    arch: Architecture
    params: np.ndarray
    layout: ParamLayout = field(init=False, repr=False)

    def __post_init__(self):
        self.layout = self.arch.layout()
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.layout.size,):
            raise ValueError(f"{self.arch.kind} expects {self.layout.size} params, got shape {self.params.shape}")

    @classmethod
    def create(cls, arch: Architecture, seed=0):
        return cls(arch, init_params(arch, seed))

    def with_params(self, params):
        return Model(self.arch, params)

    @property
    def num_params(self) -> int:
        return self.layout.size

    # forward ---------------------------------------------------------------
    def _check_batch(self, x):
        shape = tuple(x.shape[1:])
        if x.ndim < 2 or shape != self.arch.input_shape:
            raise ValueError(f"batch shape {tuple(x.shape)} does not match input shape "
                             f"(N, {', '.join(map(str, self.arch.input_shape))})")

    def forward(self, x, params=None):
        """Return ``(embedding, logits)`` tensors for a batch.

        ``params`` may be a Tensor on the tape (to differentiate with respect
        to weights); by default the model's own weights are used as constants.
        ``x`` may likewise be a Tensor that requires grad.
        """
        x = as_tensor(x)
        self._check_batch(x)
        p = self.layout.unflatten(as_tensor(self.params if params is None else params))
        n = x.shape[0]
        if self.arch.kind == "logistic-1d":
            return x, x * p["w"]
        if self.arch.kind == "mlp":
            h = x.reshape(n, -1)
            for i in range(len(self.arch.widths) - 2):
                h = relu(h @ p[f"W{i}"] + p[f"b{i}"])
        else:
            h = x
            for i in range(len(self.arch.channels)):
                h = avg_pool2d(relu(conv2d(h, p[f"K{i}"], p[f"c{i}"], pad=self.arch.kernel // 2)))
            h = h.reshape(n, -1)
        return h, self.head(h, p)

    def head(self, embedding, blocks):
        """The final linear layer: logits as a function of the embedding."""
        if self.arch.kind == "logistic-1d":
            return embedding * blocks["w"]
        return embedding @ blocks["W_head"] + blocks["b_head"]

    def forward_embed(self, x, params=None) -> Tensor:
        return self.forward(x, params)[0]

    def forward_logits(self, x, params=None) -> Tensor:
        return self.forward(x, params)[1]

    # losses / predictions --------------------------------------------------
    def loss(self, x, y, weights=None, params=None) -> Tensor:
        """Cross-entropy (binary for the logistic model).

        Without ``weights`` this is the mean per-example loss; with weights it
        is ``sum(weights * per_example)``.
        """
        per_example = self.per_example_loss(x, y, params)
        if weights is None:
            return per_example.mean()
        return (per_example * np.asarray(weights, dtype=np.float64)).sum()

    def per_example_loss(self, x, y, params=None) -> Tensor:
        logits = self.forward_logits(x, params)
        y = np.asarray(y)
        if self.arch.kind == "logistic-1d":
            z = logits.reshape(-1)
            # BCE with logits: softplus(z) - y*z
            return softplus(z) - z * y.astype(np.float64)
        onehot = np.zeros(logits.shape)
        onehot[np.arange(len(y)), y] = 1.0
        return -(log_softmax(logits) * onehot).sum(axis=1)

    def predict(self, x) -> np.ndarray:
        logits = self.forward_logits(x).data
        if self.arch.kind == "logistic-1d":
            # logit exactly 0 ties toward class 0
            return (logits.reshape(-1) > 0).astype(np.int64)
        return np.argmax(logits, axis=1)


def forward_embed(model: Model, batch) -> Tensor:
    return model.forward_embed(batch)


def forward_logits(model: Model, batch) -> Tensor:
    return model.forward_logits(batch)


def accuracy(model: Model, dataset, batch_size: int = 4096) -> float:
    """Fraction of argmax-correct predictions (ties go to the lowest class)."""
    n = len(dataset)
    if n == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    hits = 0
    for start in range(0, n, batch_size):
        pred = model.predict(dataset.x[start:start + batch_size])
        hits += int(np.sum(pred == dataset.y[start:start + batch_size]))
    return hits / n
