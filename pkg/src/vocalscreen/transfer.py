"""Deep architectures, 4-class pre-training and transfer learning.

A backbone is a pre-trained network cut after its 512-unit dense relu layer.
Fine-tuning appends ``dense(32) -> relu -> dense(2) -> softmax`` and trains
only those layers.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .balance import balance_classes
from .nn_core import (
    LSTM,
    BatchNorm,
    Conv2D,
    Dense,
    DimensionError,
    Dropout,
    Flatten,
    GlobalAvgPool,
    MaxPool2D,
    Network,
    ReLU,
    ResidualBlock,
    Softmax,
    Standardize,
    ToImage,
    ToSequence,
    TrainConfig,
    read_container,
    train,
    truncate,
    write_container,
)

BOTTLENECK_DIM = 512
PRETRAIN_HEAD = (512, 64, 4)
FINETUNE_HIDDEN = 32
PRETRAIN_CLASSES = ("cough", "sneeze", "speech", "noise")

# (block type, blocks per stage) for the supported residual depths
RESNET_LAYOUTS = {
    10: (False, (1, 1, 1, 1)),
    18: (False, (2, 2, 2, 2)),
    34: (False, (3, 4, 6, 3)),
    50: (True, (3, 4, 6, 3)),
}


class ArchitectureKind(str, enum.Enum):
    CNN = "cnn"
    LSTM = "lstm"
    RESNET = "resnet"


@dataclass(frozen=True)
class ArchitectureOptions:
    """Size knobs; the defaults are the full-size networks."""

    conv_filters: tuple = (256, 128, 64)
    conv_kernel: int = 2
    dropout: float = 0.2
    lstm_units: tuple = (512, 256, 128)
    resnet_depth: int = 50
    resnet_width: int = 64
    head: tuple = PRETRAIN_HEAD

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def _dense_tail(head, n_out_init="glorot"):
    layers = []
    for units in head[:-1]:
        layers += [Dense(units), ReLU()]
    layers += [Dense(head[-1], init=n_out_init), Softmax(head[-1])]
    return layers


def cnn_layers(opts: ArchitectureOptions):
    layers = [Standardize(), ToImage()]
    for f in opts.conv_filters:
        layers += [Conv2D(f, opts.conv_kernel), ReLU(), MaxPool2D()]
    layers += [Dropout(opts.dropout), Flatten()]
    return layers + _dense_tail(opts.head)


def lstm_layers(opts: ArchitectureOptions):
    layers = [Standardize(), ToSequence()]
    n = len(opts.lstm_units)
    for i, units in enumerate(opts.lstm_units):
        layers += [LSTM(units, return_sequences=i < n - 1), Dropout(opts.dropout)]
    return layers + _dense_tail(opts.head)


def resnet_layers(opts: ArchitectureOptions):
    if opts.resnet_depth not in RESNET_LAYOUTS:
        raise ValueError(f"resnet depth must be one of {sorted(RESNET_LAYOUTS)}")
    bottleneck, stages = RESNET_LAYOUTS[opts.resnet_depth]
    w = opts.resnet_width
    layers = [Standardize(), ToImage(), Conv2D(w, 7, 2, 3, use_bias=False), BatchNorm(), ReLU(),
              MaxPool2D()]
    for s, n_blocks in enumerate(stages):
        for b in range(n_blocks):
            stride = 2 if (s > 0 and b == 0) else 1
            layers.append(ResidualBlock(w * 2 ** s, stride, bottleneck))
    layers.append(GlobalAvgPool())
    return layers + _dense_tail(opts.head)


def build_architecture(kind, input_shape=(119, 150), opts: ArchitectureOptions | None = None,
                       seed: int = 0, dtype=np.float32) -> Network:
    """Build a CNN, LSTM or residual network ending in the 4-class head."""
    kind = ArchitectureKind(kind)
    opts = opts or ArchitectureOptions()
    builder = {ArchitectureKind.CNN: cnn_layers, ArchitectureKind.LSTM: lstm_layers,
               ArchitectureKind.RESNET: resnet_layers}[kind]
    if len(input_shape) != 2:
        raise DimensionError(f"input_shape must be (rows, segments), got {input_shape}")
    return Network(builder(opts), input_shape, seed=seed, dtype=dtype)


def fit_input_scaling(net: Network, X) -> Network:
    """Fit the leading standardisation layer (if any) on training inputs."""
    if net.layers and isinstance(net.layers[0], Standardize):
        net.layers[0].fit(X)
        net.touch()
    return net


def lstm_hidden_sizes(net: Network) -> list[int]:
    return [layer.units for layer in net.layers if isinstance(layer, LSTM)]


def dense_sizes(net: Network) -> list[int]:
    return [layer.units for layer in net.layers if isinstance(layer, Dense)]


def _bottleneck_cut(net: Network) -> int:
    """Index just past the relu that follows the first dense(512) of the head."""
    for i, layer in enumerate(net.layers):
        if isinstance(layer, Dense) and layer.units == BOTTLENECK_DIM:
            if i + 1 < len(net.layers) and isinstance(net.layers[i + 1], ReLU):
                return i + 2
    raise ValueError("network has no dense(512) + relu layer to cut at")


@dataclass
class PretrainedBackbone:
    network: Network
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.network.output_shape != (BOTTLENECK_DIM,):
            raise DimensionError(f"backbone output must be ({BOTTLENECK_DIM},), "
                                 f"got {self.network.output_shape}")
        self.network.set_frozen_prefix(len(self.network.layers))

    @property
    def input_shape(self):
        return self.network.input_shape

    def save(self, path):
        desc = json.dumps({"network": json.loads(self.network.describe()),
                           "provenance": self.provenance}, sort_keys=True)
        write_container(path, desc, self.network.state_arrays())

    @classmethod
    def load(cls, path) -> "PretrainedBackbone":
        desc, tensors = read_container(path)
        doc = json.loads(desc)
        net = Network.from_description(json.dumps(doc["network"]))
        for key, a in net.state_arrays():
            a[...] = tensors[key]
        net.touch()
        return cls(net, doc.get("provenance", {}))


def data_fingerprint(X, y) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(X, dtype=np.float32).tobytes())
    h.update(np.ascontiguousarray(y, dtype=np.int64).tobytes())
    return h.hexdigest()[:16]


def pretrain(kind, X, y, train_cfg: TrainConfig, opts: ArchitectureOptions | None = None,
             smote_seed: int = 0, log=None):
    """Train the 4-class network, then cut it back to a frozen backbone.

    ``X`` is ``(n, rows, S)``, ``y`` integer labels in ``0..3`` in the order
    cough, sneeze, speech, noise. Smaller classes are SMOTE-augmented up to
    the largest before training. Returns ``(backbone, full_network, history)``.
    """
    X = np.asarray(X)
    y = np.asarray(y, dtype=np.int64)
    missing = [PRETRAIN_CLASSES[c] for c in range(4) if not np.any(y == c)]
    if missing:
        raise ValueError(f"pre-training data lacks class(es): {', '.join(missing)}")
    opts = opts or ArchitectureOptions()
    net = build_architecture(kind, X.shape[1:], opts, seed=train_cfg.seed)
    fit_input_scaling(net, X)
    Xb, yb = balance_classes(X.astype(np.float32), y, seed=smote_seed)
    net, history = train(net, Xb, yb, train_cfg, log=log)
    backbone_net = truncate(net, _bottleneck_cut(net))
    provenance = {"kind": ArchitectureKind(kind).value, "options": opts.to_dict(),
                  "train": train_cfg.__dict__, "data": data_fingerprint(X, y),
                  "final_loss": history[-1]}
    return PretrainedBackbone(backbone_net, provenance), net, history


def attach_finetune_head(backbone: PretrainedBackbone, hidden: int = FINETUNE_HIDDEN,
                         seed: int = 0) -> Network:
    """Backbone (frozen) + ``dense(hidden) -> relu -> dense(2) -> softmax``."""
    base = backbone.network
    doc = json.loads(base.describe())
    n_base = len(doc["layers"])
    doc["layers"] += [Dense(hidden).spec(), ReLU().spec(), Dense(2, init="glorot").spec(),
                      Softmax(2).spec()]
    doc["frozen_prefix"] = n_base
    doc["seed"] = seed
    net = Network.from_description(json.dumps(doc))
    src = dict(base.state_arrays())
    for key, a in net.state_arrays():
        if key in src:
            a[...] = src[key]
    net.touch()
    return net


def head_network(headed: Network) -> Network:
    """The trainable head alone, taking 512-d bottleneck vectors as input."""
    doc = json.loads(headed.describe())
    n = headed.frozen_prefix
    head_doc = {"input_shape": [BOTTLENECK_DIM], "frozen_prefix": 0, "dtype": doc["dtype"],
                "seed": doc["seed"], "layers": doc["layers"][n:]}
    head = Network.from_description(json.dumps(head_doc))
    arrays = dict(headed.state_arrays())
    for key, a in head.state_arrays():
        i, name = key.split(".", 1)
        a[...] = arrays[f"{int(i) + n}.{name}"]
    head.touch()
    return head


def _write_head_back(headed: Network, head: Network):
    n = headed.frozen_prefix
    arrays = dict(headed.state_arrays())
    for key, a in head.state_arrays():
        i, name = key.split(".", 1)
        arrays[f"{int(i) + n}.{name}"][...] = a
    headed.touch()


def finetune(headed: Network, X, y, train_cfg: TrainConfig, smote_seed: int = 0,
             bottleneck_inputs: bool = False, log=None):
    """Train only the head on binary labels (1 = positive).

    The frozen backbone runs in inference mode, so its outputs are computed
    once and the head is trained on them directly; this is equivalent to
    training the full network with the backbone frozen. Pass
    ``bottleneck_inputs=True`` when ``X`` already holds 512-d vectors.
    SMOTE balances the classes on the bottleneck vectors.
    """
    y = np.asarray(y, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise ValueError("fine-tuning needs both classes in the training data")
    if bottleneck_inputs:
        Z = np.asarray(X, dtype=headed.dtype)
    else:
        Z = _backbone_outputs(headed, X)
    Zb, yb = balance_classes(Z, y, seed=smote_seed)
    head = head_network(headed)
    head, history = train(head, Zb, yb, train_cfg, log=log)
    _write_head_back(headed, head)
    return headed, history


def _backbone_outputs(headed: Network, X, batch_size: int = 64):
    X = np.asarray(X, dtype=headed.dtype)
    n = headed.frozen_prefix
    outs = []
    for lo in range(0, len(X), batch_size):
        h = X[lo:lo + batch_size]
        for layer in headed.layers[:n]:
            h, _ = layer.forward(h, training=False)
        outs.append(h)
    return np.concatenate(outs)


def extract_bottleneck(backbone: PretrainedBackbone, features) -> np.ndarray:
    """512-d bottleneck vector(s) for one ``(rows, S)`` matrix or a stack."""
    X = np.asarray(getattr(features, "values", features))
    single = X.ndim == 2
    if single:
        X = X[None]
    if tuple(X.shape[1:]) != backbone.input_shape:
        raise DimensionError(f"features of shape {tuple(X.shape[1:])} do not match the "
                             f"backbone input {backbone.input_shape}")
    out = backbone.network.predict(X).astype(np.float64)
    return out[0] if single else out


def positive_probability(net: Network, X) -> np.ndarray:
    """P(Y=1 | X) from a 2-way softmax network (column 1 = positive)."""
    return net.predict(X)[:, 1].astype(np.float64)
