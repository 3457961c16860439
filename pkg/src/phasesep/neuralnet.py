"""Small dense networks in NumPy with hand-written backpropagation.

A `Network` is either a single chain of layers, or two parallel branches
(amplitude, phase) whose outputs meet in a `BranchConcat` layer at the head
of a shared trunk. Everything runs in float64.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import DatasetStats
from .phase_features import PhaseFeatureConfig
from .stft import StftConfig

__all__ = [
    "Layer",
    "Dense",
    "ReLU",
    "Bias",
    "Scale",
    "BranchConcat",
    "Network",
    "TrainConfig",
    "TrainResult",
    "TrainingDivergedError",
    "ModelBundle",
    "BundleError",
    "CorruptBundleError",
    "BundleVersionError",
    "build_phase_net",
    "build_amp_net",
    "build_joint_net",
    "build_concat_net",
    "input_weight_ratio",
    "forward",
    "backward",
    "mse",
    "train",
    "save_bundle",
    "load_bundle",
]

HIDDEN = 500
MAX_INPUT_DIM = 1 << 24
ARCHITECTURES = ("phase_only", "amp_only", "joint", "concat")


class TrainingDivergedError(RuntimeError):
    """Loss became NaN or infinite."""


# ---------------------------------------------------------------------------
# layers

class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._x = None

    def _cached(self):
        if self._x is None:
            raise RuntimeError(f"{self.kind}: backward called before forward")
        x, self._x = self._x, None
        return x

    @property
    def in_dim(self) -> int | None:
        return None

    @property
    def out_dim(self) -> int | None:
        return None

    def __repr__(self):
        shapes = ", ".join(f"{k}={v.shape}" for k, v in self.params.items())
        return f"{type(self).__name__}({shapes})"


class Dense(Layer):
    """``y = x @ W + b`` with ``W`` of shape ``(in, out)``."""

    kind = "dense"

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None):
        super().__init__()
        limit = np.sqrt(6.0 / (n_in + n_out))
        if rng is None:
            W = np.zeros((n_in, n_out))
        else:
            W = rng.uniform(-limit, limit, size=(n_in, n_out))
        self.params = {"W": W, "b": np.zeros(n_out)}

    @property
    def in_dim(self):
        return self.params["W"].shape[0]

    @property
    def out_dim(self):
        return self.params["W"].shape[1]

    def forward(self, x):
        self._x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dy, need_dx=True):
        x = self._cached()
        self.grads["W"] = x.T @ dy
        self.grads["b"] = dy.sum(axis=0)
        return dy @ self.params["W"].T if need_dx else None


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        self._x = x
        return np.maximum(x, 0.0)

    def backward(self, dy, need_dx=True):
        x = self._cached()
        # derivative at exactly 0 is taken as 0
        return dy * (x > 0) if need_dx else None


class Bias(Layer):
    """``y = x + b``."""

    kind = "bias"

    def __init__(self, init):
        super().__init__()
        self.params = {"b": np.array(init, dtype=np.float64).ravel()}

    @property
    def in_dim(self):
        return self.params["b"].size

    out_dim = in_dim

    def forward(self, x):
        self._x = True
        return x + self.params["b"]

    def backward(self, dy, need_dx=True):
        self._cached()
        self.grads["b"] = dy.sum(axis=0)
        return dy if need_dx else None


class Scale(Layer):
    """``y = x * s`` elementwise; entries of ``s`` must be non-zero."""

    kind = "scale"

    def __init__(self, init):
        super().__init__()
        s = np.array(init, dtype=np.float64).ravel()
        if np.any(s == 0):
            raise ValueError("scale layer entries must be non-zero")
        self.params = {"s": s}

    @property
    def in_dim(self):
        return self.params["s"].size

    out_dim = in_dim

    def forward(self, x):
        self._x = x
        return x * self.params["s"]

    def backward(self, dy, need_dx=True):
        x = self._cached()
        self.grads["s"] = (dy * x).sum(axis=0)
        return dy * self.params["s"] if need_dx else None


class BranchConcat(Layer):
    """Concatenate branch outputs along the feature axis."""

    kind = "branch_concat"

    def __init__(self, sizes: Sequence[int] = ()):
        super().__init__()
        self.sizes = [int(s) for s in sizes]

    @property
    def out_dim(self):
        return sum(self.sizes)

    def forward(self, xs):
        self.sizes = [x.shape[1] for x in xs]
        self._x = True
        return np.concatenate(xs, axis=1)

    def backward(self, dy, need_dx=True):
        self._cached()
        return np.split(dy, np.cumsum(self.sizes)[:-1], axis=1)


_LAYER_CODES = {"dense": 1, "relu": 2, "bias": 3, "scale": 4, "branch_concat": 5}


def _run_chain(layers, x):
    for layer in layers:
        x = layer.forward(x)
    return x


def _back_chain(layers, dy, need_input_grad):
    for i in range(len(layers) - 1, -1, -1):
        last = i == 0 and not need_input_grad
        dy = layers[i].backward(dy, need_dx=not last)
    return dy


class Network:
    """Chain of layers, optionally fed by two parallel branches.

    Parameters
    ----------
    trunk : list of Layer
        Layers after the branches (or the whole network for a chain). When
        ``branches`` is given the trunk must start with `BranchConcat`.
    branches : list of list of Layer, optional
        Parallel input branches; inputs are then passed as a tuple in the
        same order.
    """

    def __init__(self, trunk: list[Layer], branches: list[list[Layer]] | None = None):
        self.trunk = list(trunk)
        self.branches = [list(b) for b in branches] if branches else []
        if self.branches:
            if not self.trunk or not isinstance(self.trunk[0], BranchConcat):
                raise ValueError("a branched network needs a BranchConcat at the head of the trunk")
            self.trunk[0].sizes = [self._chain_out(b) for b in self.branches]
        self._check_dims()
        self._forwarded = False

    @staticmethod
    def _chain_out(layers):
        d = None
        for layer in layers:
            if layer.out_dim is not None:
                d = layer.out_dim
        return d

    def _check_dims(self):
        def walk(layers, d):
            for layer in layers:
                if layer.in_dim is not None and d is not None and layer.in_dim != d:
                    raise ValueError(f"{layer!r} expects input {layer.in_dim}, gets {d}")
                if layer.out_dim is not None:
                    d = layer.out_dim
            return d

        if self.branches:
            outs = [walk(b, None) for b in self.branches]
            walk(self.trunk[1:], sum(outs))
        else:
            walk(self.trunk, None)

    @property
    def layers(self) -> list[Layer]:
        return [l for b in self.branches for l in b] + self.trunk

    @property
    def input_dims(self) -> list[int]:
        chains = self.branches or [self.trunk]
        return [next(l.in_dim for l in c if l.in_dim is not None) for c in chains]

    @property
    def output_dim(self) -> int:
        return self._chain_out(self.trunk)

    @property
    def n_params(self) -> int:
        return sum(p.size for l in self.layers for p in l.params.values())

    def parameters(self):
        """Yield ``(layer, name)`` pairs in a fixed order."""
        for layer in self.layers:
            for name in layer.params:
                yield layer, name

    def forward(self, inputs):
        if self.branches:
            if not isinstance(inputs, (tuple, list)) or len(inputs) != len(self.branches):
                raise ValueError(f"expected {len(self.branches)} inputs for a branched network")
            outs = [_run_chain(b, np.asarray(x, dtype=np.float64)) for b, x in zip(self.branches, inputs)]
            y = _run_chain(self.trunk, outs)
        else:
            y = _run_chain(self.trunk, np.asarray(inputs, dtype=np.float64))
        self._forwarded = True
        return y

    def backward(self, d_out, need_input_grad=True):
        """Backpropagate ``d_out``; fills ``layer.grads`` and returns input gradient(s)."""
        if not self._forwarded:
            raise RuntimeError("backward called before forward")
        self._forwarded = False
        if not self.branches:
            return _back_chain(self.trunk, d_out, need_input_grad)
        parts = _back_chain(self.trunk, d_out, True)
        return tuple(_back_chain(b, d, need_input_grad) for b, d in zip(self.branches, parts))

    def predict(self, inputs, batch_size: int = 1024) -> np.ndarray:
        """Forward pass in chunks, without keeping state for backward."""
        n = (inputs[0] if isinstance(inputs, (tuple, list)) else inputs).shape[0]
        out = np.empty((n, self.output_dim))
        for s in range(0, n, batch_size):
            out[s:s + batch_size] = self.forward(_take(inputs, slice(s, s + batch_size)))
        for layer in self.layers:
            layer._x = None
        self._forwarded = False
        return out

    def get_state(self) -> list[np.ndarray]:
        return [layer.params[name].copy() for layer, name in self.parameters()]

    def set_state(self, state: list[np.ndarray]):
        for (layer, name), value in zip(self.parameters(), state):
            layer.params[name][...] = value


def forward(net: Network, inputs) -> np.ndarray:
    return net.forward(inputs)


def backward(net: Network, d_out, need_input_grad=True):
    return net.backward(d_out, need_input_grad)


def _take(inputs, idx):
    if isinstance(inputs, (tuple, list)):
        return tuple(x[idx] for x in inputs)
    return inputs[idx]


# ---------------------------------------------------------------------------
# architectures

def _check_stats(stats: DatasetStats, n_bins: int, channels: int, instrument: str):
    if stats.mean.shape != (channels, n_bins):
        raise ValueError(f"stats are for {stats.mean.shape}, network for {(channels, n_bins)}")
    if instrument not in stats.instrument_mean:
        raise KeyError(f"no average amplitude for instrument {instrument!r} in stats")


def _input_dim(channels, context, n_bins, n_features=1):
    d = channels * (2 * context + 1) * n_bins * n_features
    if d > MAX_INPUT_DIM:
        raise ValueError(f"input dimension {d} exceeds the {MAX_INPUT_DIM} guard")
    return d


def _output_head(n_in, stats, instrument, rng):
    avg = stats.instrument_mean[instrument].ravel()
    return [Dense(n_in, avg.size, rng), Bias(avg), ReLU()]


def _amp_front(stats, context, rng, hidden):
    reps = 2 * context + 1
    # tile (I, K) statistics over the context axis -> (I, 2C+1, K) flattened
    mean = np.repeat(stats.mean[:, np.newaxis, :], reps, axis=1).ravel()
    std = np.repeat(stats.std[:, np.newaxis, :], reps, axis=1).ravel()
    return [Bias(-mean), Scale(1.0 / std),
            Dense(mean.size, hidden, rng), ReLU(), Dense(hidden, hidden, rng), ReLU()]


def build_phase_net(n_bins: int, channels: int, context: int, stats: DatasetStats,
                    instrument: str, n_features: int = 2, hidden: int = HIDDEN,
                    seed: int = 0) -> Network:
    """dense-relu-dense-relu-dense, then a bias set to the average instrument amplitude, then relu."""
    _check_stats(stats, n_bins, channels, instrument)
    rng = np.random.default_rng(seed)
    d = _input_dim(channels, context, n_bins, n_features)
    layers = [Dense(d, hidden, rng), ReLU(), Dense(hidden, hidden, rng), ReLU()]
    return Network(layers + _output_head(hidden, stats, instrument, rng))


def build_amp_net(n_bins: int, channels: int, context: int, stats: DatasetStats,
                  instrument: str, hidden: int = HIDDEN, seed: int = 0) -> Network:
    """Amplitude-only network: trainable bias/scale normalisation, then the same body and head."""
    _check_stats(stats, n_bins, channels, instrument)
    _input_dim(channels, context, n_bins)
    rng = np.random.default_rng(seed)
    return Network(_amp_front(stats, context, rng, hidden)
                   + _output_head(hidden, stats, instrument, rng))


def build_joint_net(n_bins: int, channels: int, context: int, stats: DatasetStats,
                    instrument: str, n_features: int = 2, hidden: int = HIDDEN,
                    seed: int = 0) -> Network:
    """Amplitude and phase branches of two dense layers each, fused by one dense layer.

    The amplitude branch is drawn from the same seed stream as `build_amp_net`,
    so for equal seeds both networks start from identical amplitude weights.
    """
    _check_stats(stats, n_bins, channels, instrument)
    rng = np.random.default_rng(seed)
    amp_branch = _amp_front(stats, context, rng, hidden)
    d_phi = _input_dim(channels, context, n_bins, n_features)
    phase_rng = np.random.default_rng([seed, 1])
    phase_branch = [Dense(d_phi, hidden, phase_rng), ReLU(),
                    Dense(hidden, hidden, phase_rng), ReLU()]
    trunk = [BranchConcat()] + _output_head(2 * hidden, stats, instrument, rng)
    return Network(trunk, branches=[amp_branch, phase_branch])


def build_concat_net(n_bins: int, channels: int, context: int, stats: DatasetStats,
                     instrument: str, n_features: int = 2, hidden: int = HIDDEN,
                     seed: int = 0) -> Network:
    """Naive baseline: amplitude and phase features concatenated at the input.

    Input is ``[amplitude block | phase block]``. Amplitudes are normalised
    with the dataset statistics; phase features pass through unscaled.
    """
    _check_stats(stats, n_bins, channels, instrument)
    rng = np.random.default_rng(seed)
    reps = 2 * context + 1
    mean = np.repeat(stats.mean[:, np.newaxis, :], reps, axis=1).ravel()
    std = np.repeat(stats.std[:, np.newaxis, :], reps, axis=1).ravel()
    d_phi = _input_dim(channels, context, n_bins, n_features)
    shift = np.concatenate([-mean, np.zeros(d_phi)])
    scale = np.concatenate([1.0 / std, np.ones(d_phi)])
    layers = [Bias(shift), Scale(scale), Dense(shift.size, hidden, rng), ReLU(),
              Dense(hidden, hidden, rng), ReLU()]
    return Network(layers + _output_head(hidden, stats, instrument, rng))


def input_weight_ratio(net: Network, n_amp_inputs: int) -> float:
    """Mean |W| over phase input columns divided by mean |W| over amplitude columns.

    Applies to the first dense layer of a `build_concat_net` network.
    """
    first = next(l for l in net.trunk if isinstance(l, Dense))
    W = np.abs(first.params["W"])
    return float(W[n_amp_inputs:].mean() / W[:n_amp_inputs].mean())


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 128
    epochs: int = 100
    seed: int = 0
    validation_fraction: float = 0.1
    patience: int = 10

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1 or self.epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, epochs and patience must be >= 1")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in [0, 1)")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError("invalid adam hyperparameters")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class TrainResult:
    net: Network
    curve: list[tuple[int, float, float]] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def final_train_mse(self) -> float:
        return self.curve[-1][1]


def mse(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.mean((pred - target) ** 2))


class _Adam:
    def __init__(self, cfg: TrainConfig, net: Network):
        self.cfg = cfg
        self.t = 0
        self.m = [np.zeros_like(l.params[n]) for l, n in net.parameters()]
        self.v = [np.zeros_like(l.params[n]) for l, n in net.parameters()]

    def step(self, net: Network):
        c = self.cfg
        self.t += 1
        a = c.learning_rate * np.sqrt(1 - c.beta2 ** self.t) / (1 - c.beta1 ** self.t)
        for (layer, name), m, v in zip(net.parameters(), self.m, self.v):
            g = layer.grads[name]
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            layer.params[name] -= a * m / (np.sqrt(v) + c.eps)


class _SGD:
    def __init__(self, cfg: TrainConfig, net: Network):
        self.lr = cfg.learning_rate

    def step(self, net: Network):
        for layer, name in net.parameters():
            layer.params[name] -= self.lr * layer.grads[name]


def _layer_norms(net: Network) -> str:
    return ", ".join(
        f"{i}:{layer.kind}:{name}={np.linalg.norm(layer.params[name]):.3g}"
        for i, layer in enumerate(net.layers) for name in layer.params
    )


def train(net: Network, inputs, targets: np.ndarray, cfg: TrainConfig) -> TrainResult:
    """Minimise the mean squared error with mini-batches.

    A seeded ``validation_fraction`` of examples is held out; training stops
    after ``patience`` epochs without validation improvement and the best
    parameters are restored. Returns the per-epoch ``(epoch, train_mse,
    val_mse)`` curve; ``val_mse`` is NaN when nothing is held out.

    Raises
    ------
    TrainingDivergedError
        The loss turned NaN/Inf; the message carries epoch, batch and
        parameter norms.
    """
    targets = np.asarray(targets, dtype=np.float64)
    n = targets.shape[0]
    if n == 0:
        raise ValueError("no training examples")
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(n)
    n_val = int(round(cfg.validation_fraction * n))
    if n_val >= n:
        n_val = n - 1
    val_idx = np.sort(order[:n_val])
    train_idx = order[n_val:]
    x_val = _take(inputs, val_idx) if n_val else None
    y_val = targets[val_idx] if n_val else None

    opt = _Adam(cfg, net) if cfg.optimizer == "adam" else _SGD(cfg, net)
    curve = []
    best, best_epoch, best_state, stale = np.inf, 0, None, 0
    for epoch in range(1, cfg.epochs + 1):
        perm = train_idx[rng.permutation(train_idx.size)]
        total = 0.0
        for b, s in enumerate(range(0, perm.size, cfg.batch_size)):
            idx = np.sort(perm[s:s + cfg.batch_size])
            y = targets[idx]
            pred = net.forward(_take(inputs, idx))
            diff = pred - y
            loss = float(np.mean(diff * diff))
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"loss {loss} at epoch {epoch}, batch {b}; parameter norms: {_layer_norms(net)}"
                )
            total += loss * idx.size
            net.backward(2.0 * diff / diff.size, need_input_grad=False)
            opt.step(net)
        train_mse = total / perm.size
        val_mse = mse(net.predict(x_val), y_val) if n_val else float("nan")
        curve.append((epoch, train_mse, val_mse))
        if not n_val:
            continue
        if val_mse < best:
            best, best_epoch, best_state, stale = val_mse, epoch, net.get_state(), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    if best_state is not None:
        net.set_state(best_state)
    else:
        best_epoch = curve[-1][0]
    return TrainResult(net, curve, best_epoch)


# ---------------------------------------------------------------------------
# bundles

BUNDLE_MAGIC = b"PSNN"
BUNDLE_VERSION = 1


class BundleError(Exception):
    pass


class CorruptBundleError(BundleError):
    """File truncated, wrong magic, or inconsistent contents."""


class BundleVersionError(BundleError):
    """Bundle written by an incompatible format version."""


@dataclass
class ModelBundle:
    """Per-instrument networks with the configuration they were trained under."""

    networks: dict[str, Network]
    stats: DatasetStats
    stft_config: StftConfig
    phase_config: PhaseFeatureConfig | None
    architecture: str
    context: int = 5
    curves: dict[str, list] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.architecture != "amp_only" and self.phase_config is None:
            raise ValueError(f"{self.architecture} bundle needs a phase config")
        expected_out = self.stats.channels * self.stats.n_bins
        for inst, net in self.networks.items():
            if net.output_dim != expected_out:
                raise ValueError(f"{inst}: output {net.output_dim} != channels*bins {expected_out}")
            branched = bool(net.branches)
            if branched != (self.architecture == "joint"):
                raise ValueError(f"{inst}: network shape inconsistent with tag {self.architecture}")

    @property
    def instruments(self) -> list[str]:
        return list(self.networks)

    @property
    def uses_amplitude(self) -> bool:
        return self.architecture in ("amp_only", "joint", "concat")

    @property
    def uses_phase(self) -> bool:
        return self.architecture in ("phase_only", "joint", "concat")


def _write_array(buf, name: str, a: np.ndarray):
    a = np.ascontiguousarray(a, dtype="<f8")
    nb = name.encode()
    buf.write(struct.pack("<B", len(nb)) + nb)
    buf.write(struct.pack("<I", a.ndim))
    buf.write(struct.pack(f"<{a.ndim}Q", *a.shape))
    buf.write(a.tobytes())


def _write_chain(buf, layers):
    buf.write(struct.pack("<I", len(layers)))
    for layer in layers:
        buf.write(struct.pack("<BI", _LAYER_CODES[layer.kind], len(layer.params)))
        for name, value in layer.params.items():
            _write_array(buf, name, value)


def save_bundle(bundle: ModelBundle, path) -> None:
    """Write ``bundle`` in the PSNN binary layout.

    ``magic | u32 version | u32 json_len | json | networks | stats``, all
    little-endian. Each network is ``u32 n_branches``, each branch and then
    the trunk a layer table (``u32 n_layers``; per layer ``u8 kind, u32
    n_params``; per parameter ``u8 name_len, name, u32 ndim, u64 dims, f64
    data``).
    """
    header = {
        "architecture": bundle.architecture,
        "instruments": bundle.instruments,
        "context": bundle.context,
        "stft": bundle.stft_config.to_dict(),
        "phase": bundle.phase_config.to_dict() if bundle.phase_config else None,
        "stats_instruments": list(bundle.stats.instrument_mean),
        "stats_frames": bundle.stats.n_frames,
        "curves": {k: [list(map(float, row)) for row in v] for k, v in bundle.curves.items()},
        "metadata": bundle.metadata,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(BUNDLE_MAGIC + struct.pack("<II", BUNDLE_VERSION, len(blob)) + blob)
    for inst in bundle.instruments:
        net = bundle.networks[inst]
        buf.write(struct.pack("<I", len(net.branches)))
        for branch in net.branches:
            _write_chain(buf, branch)
        _write_chain(buf, net.trunk)
    _write_array(buf, "mean", bundle.stats.mean)
    _write_array(buf, "std", bundle.stats.std)
    for inst, value in bundle.stats.instrument_mean.items():
        _write_array(buf, inst, value)
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptBundleError(f"{self.path}: truncated at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self):
        (ln,) = self.unpack("<B")
        name = self.take(ln).decode()
        (ndim,) = self.unpack("<I")
        shape = self.unpack(f"<{ndim}Q") if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        a = np.frombuffer(self.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
        return name, a


def _read_chain(r: _Reader):
    kinds = {v: k for k, v in _LAYER_CODES.items()}
    (n_layers,) = r.unpack("<I")
    layers = []
    for _ in range(n_layers):
        code, n_params = r.unpack("<BI")
        if code not in kinds:
            raise CorruptBundleError(f"{r.path}: unknown layer code {code}")
        params = dict(r.array() for _ in range(n_params))
        kind = kinds[code]
        try:
            if kind == "dense":
                layer = Dense(*params["W"].shape)
                layer.params = {"W": params["W"], "b": params["b"]}
            elif kind == "relu":
                layer = ReLU()
            elif kind == "bias":
                layer = Bias(params["b"])
            elif kind == "scale":
                layer = Scale(params["s"])
            else:
                layer = BranchConcat()
        except (KeyError, ValueError) as exc:
            raise CorruptBundleError(f"{r.path}: bad {kind} layer: {exc}") from exc
        layers.append(layer)
    return layers


def load_bundle(path) -> ModelBundle:
    """Read a bundle written by `save_bundle`.

    Raises
    ------
    CorruptBundleError
        Wrong magic, truncated data or trailing garbage.
    BundleVersionError
        Written with a different format version.
    """
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise BundleError(f"cannot read bundle {path}: {exc}") from exc
    r = _Reader(data, path)
    if r.take(4) != BUNDLE_MAGIC:
        raise CorruptBundleError(f"{path}: not a PSNN bundle")
    version, n_json = r.unpack("<II")
    if version != BUNDLE_VERSION:
        raise BundleVersionError(f"{path}: bundle version {version}, expected {BUNDLE_VERSION}")
    try:
        header = json.loads(r.take(n_json).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptBundleError(f"{path}: bad header: {exc}") from exc

    networks = {}
    for inst in header["instruments"]:
        (n_branches,) = r.unpack("<I")
        branches = [_read_chain(r) for _ in range(n_branches)]
        trunk = _read_chain(r)
        try:
            networks[inst] = Network(trunk, branches or None)
        except ValueError as exc:
            raise CorruptBundleError(f"{path}: inconsistent network {inst}: {exc}") from exc
    _, mean = r.array()
    _, std = r.array()
    inst_mean = dict(r.array() for _ in header["stats_instruments"])
    if r.pos != len(data):
        raise CorruptBundleError(f"{path}: {len(data) - r.pos} trailing bytes")

    stats = DatasetStats(mean, std, inst_mean, header["stats_frames"])
    phase_cfg = PhaseFeatureConfig.from_dict(header["phase"]) if header["phase"] else None
    curves = {k: [(int(row[0]), row[1], row[2]) for row in v] for k, v in header["curves"].items()}
    return ModelBundle(networks, stats, StftConfig.from_dict(header["stft"]), phase_cfg,
                       header["architecture"], header["context"], curves, header["metadata"])
