"""Fully-connected approximators with analytic gradients, Adam, Polyak.

Everything is float64 numpy. backward() returns exact reverse-mode
gradients of sum(output * upstream) with respect to every parameter and
the input; the input path is what lets the actor loss differentiate a
critic with respect to the action. Checkpoints are a versioned binary
blob with deterministic bytes.
"""

from dataclasses import dataclass
import struct

import numpy as np

HEADS = ("linear", "tanh")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class NonFiniteGradientError(Exception):
    """A gradient tensor contains NaN/Inf; message names the tensor."""


class CheckpointFormatError(Exception):
    pass


@dataclass
class Mlp:
    """Affine stack with relu hidden layers and a linear or tanh head."""

    layer_sizes: list
    weights: list   # weights[i]: (layer_sizes[i], layer_sizes[i+1])
    biases: list    # biases[i]: (layer_sizes[i+1],)
    head: str = "linear"

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def copy(self) -> "Mlp":
        return Mlp(
            layer_sizes=list(self.layer_sizes),
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            head=self.head,
        )

    def params(self) -> list:
        """Flat parameter list: W0, b0, W1, b1, ... (shared references)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def param_names(self) -> list:
        out = []
        for i in range(len(self.weights)):
            out.append(f"W{i}")
            out.append(f"b{i}")
        return out


def init_mlp(layer_sizes, head: str, rng: np.random.Generator,
             final_scale: float = 1.0) -> Mlp:
    """Uniform fan-in init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights
    and biases. final_scale shrinks the last layer (actors use 0.1 so
    initial actions sit near zero)."""
    if head not in HEADS:
        raise ValueError(f"head must be one of {HEADS}")
    if len(layer_sizes) < 2:
        raise ValueError("need at least input and output sizes")
    weights, biases = [], []
    last = len(layer_sizes) - 2
    for i in range(len(layer_sizes) - 1):
        fan_in = layer_sizes[i]
        bound = 1.0 / np.sqrt(fan_in)
        if i == last:
            bound *= final_scale
        weights.append(rng.uniform(-bound, bound, size=(layer_sizes[i], layer_sizes[i + 1])))
        biases.append(rng.uniform(-bound, bound, size=layer_sizes[i + 1]))
    return Mlp(layer_sizes=list(layer_sizes), weights=weights, biases=biases, head=head)


def _as_batch(x: np.ndarray, in_dim: int):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        if x.shape[0] != in_dim:
            raise ValueError(f"input length {x.shape[0]} != {in_dim}")
        return x.reshape(1, -1), True
    if x.ndim != 2 or x.shape[1] != in_dim:
        raise ValueError(f"input shape {x.shape} incompatible with in_dim {in_dim}")
    return x, False


def _forward_cached(net: Mlp, x: np.ndarray):
    """Returns (output, pre_activations, post_activations). post[0] is x."""
    post = [x]
    pre = []
    h = x
    n_layers = len(net.weights)
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w + b
        pre.append(z)
        if i < n_layers - 1:
            h = np.maximum(z, 0.0)
        elif net.head == "tanh":
            h = np.tanh(z)
        else:
            h = z
        post.append(h)
    return h, pre, post


def forward(net: Mlp, x) -> np.ndarray:
    """Evaluate the network on a vector (d,) or a batch (n, d)."""
    batch, squeeze = _as_batch(x, net.in_dim)
    out, _, _ = _forward_cached(net, batch)
    return out[0] if squeeze else out


@dataclass
class MlpGrads:
    """Parameter gradients matching an Mlp's weights/biases lists."""

    d_weights: list
    d_biases: list

    def params(self) -> list:
        out = []
        for dw, db in zip(self.d_weights, self.d_biases):
            out.append(dw)
            out.append(db)
        return out


def backward(net: Mlp, x, upstream):
    """Gradients of sum(output * upstream) over the batch.

    Returns (MlpGrads, input_gradient) where input_gradient has the shape
    of x. upstream must match the output shape.
    """
    batch, squeeze = _as_batch(x, net.in_dim)
    out, pre, post = _forward_cached(net, batch)
    up = np.asarray(upstream, dtype=np.float64)
    if squeeze:
        up = up.reshape(1, -1)
    if up.shape != out.shape:
        raise ValueError(f"upstream shape {up.shape} != output shape {out.shape}")

    n_layers = len(net.weights)
    d_weights = [None] * n_layers
    d_biases = [None] * n_layers
    if net.head == "tanh":
        delta = up * (1.0 - out ** 2)
    else:
        delta = up
    for i in range(n_layers - 1, -1, -1):
        d_weights[i] = post[i].T @ delta
        d_biases[i] = delta.sum(axis=0)
        delta = delta @ net.weights[i].T
        if i > 0:
            delta = delta * (pre[i - 1] > 0.0)
    input_grad = delta[0] if squeeze else delta
    return MlpGrads(d_weights=d_weights, d_biases=d_biases), input_grad


@dataclass
class AdamState:
    """First/second moments shaped like the parameters, plus step counter."""

    learning_rate: float
    m: list
    v: list
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS


def init_adam(net: Mlp, learning_rate: float) -> AdamState:
    params = net.params()
    return AdamState(
        learning_rate=float(learning_rate),
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
    )


def adam_step(net: Mlp, grads: MlpGrads, opt: AdamState) -> None:
    """One bias-corrected Adam update, in place."""
    params = net.params()
    glist = grads.params()
    names = net.param_names()
    for name, g in zip(names, glist):
        if not np.isfinite(g).all():
            raise NonFiniteGradientError(f"non-finite gradient in {name}")
    opt.step += 1
    t = opt.step
    lr_t = opt.learning_rate * np.sqrt(1.0 - opt.beta2 ** t) / (1.0 - opt.beta1 ** t)
    for p, g, m, v in zip(params, glist, opt.m, opt.v):
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        p -= lr_t * m / (np.sqrt(v) + opt.eps)


def polyak_update(target: Mlp, online: Mlp, rho: float) -> None:
    """target <- rho * target + (1 - rho) * online, componentwise."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    for tp, op in zip(target.params(), online.params()):
        tp *= rho
        tp += (1.0 - rho) * op


# ---------------------------------------------------------------------------
# Checkpoint blob: magic, version, named sections of (Mlp, optional Adam),
# then named float64 arrays. Byte layout is fixed little-endian so identical
# state always serializes to identical bytes.

CKPT_MAGIC = b"ORLC"
CKPT_VERSION = 1


def _write_array(f, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    f.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<I", d))
    f.write(arr.tobytes())


def _read_array(f) -> np.ndarray:
    (ndim,) = struct.unpack("<B", f.read(1))
    shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(f.read(8 * count), dtype="<f8")
    return data.reshape(shape).astype(np.float64)


def _write_name(f, name: str) -> None:
    raw = name.encode("utf-8")
    f.write(struct.pack("<H", len(raw)))
    f.write(raw)


def _read_name(f) -> str:
    (n,) = struct.unpack("<H", f.read(2))
    return f.read(n).decode("utf-8")


def _write_mlp(f, net: Mlp) -> None:
    f.write(struct.pack("<B", HEADS.index(net.head)))
    f.write(struct.pack("<I", len(net.layer_sizes)))
    for s in net.layer_sizes:
        f.write(struct.pack("<I", s))
    for p in net.params():
        _write_array(f, p)


def _read_mlp(f) -> Mlp:
    (head_idx,) = struct.unpack("<B", f.read(1))
    (n_sizes,) = struct.unpack("<I", f.read(4))
    sizes = [struct.unpack("<I", f.read(4))[0] for _ in range(n_sizes)]
    weights, biases = [], []
    for _ in range(n_sizes - 1):
        weights.append(_read_array(f))
        biases.append(_read_array(f))
    return Mlp(layer_sizes=sizes, weights=weights, biases=biases, head=HEADS[head_idx])


def save_checkpoint(path, nets: dict, adams: dict | None = None,
                    arrays: dict | None = None) -> None:
    """Write named networks (with optional optimizer state) and extra arrays."""
    adams = adams or {}
    arrays = arrays or {}
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(struct.pack("<I", len(nets)))
        for name in sorted(nets):
            _write_name(f, name)
            _write_mlp(f, nets[name])
            opt = adams.get(name)
            f.write(struct.pack("<B", 1 if opt is not None else 0))
            if opt is not None:
                f.write(struct.pack("<Q", opt.step))
                f.write(struct.pack("<d", opt.learning_rate))
                for m in opt.m:
                    _write_array(f, m)
                for v in opt.v:
                    _write_array(f, v)
        f.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            _write_name(f, name)
            _write_array(f, np.asarray(arrays[name], dtype=np.float64))


def load_checkpoint(path):
    """Read a checkpoint; returns (nets, adams, arrays) dicts."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CKPT_MAGIC:
            raise CheckpointFormatError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CKPT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        nets, adams, arrays = {}, {}, {}
        (n_nets,) = struct.unpack("<I", f.read(4))
        for _ in range(n_nets):
            name = _read_name(f)
            net = _read_mlp(f)
            nets[name] = net
            (has_adam,) = struct.unpack("<B", f.read(1))
            if has_adam:
                (step,) = struct.unpack("<Q", f.read(8))
                (lr,) = struct.unpack("<d", f.read(8))
                n_params = 2 * len(net.weights)
                m = [_read_array(f) for _ in range(n_params)]
                v = [_read_array(f) for _ in range(n_params)]
                adams[name] = AdamState(learning_rate=lr, m=m, v=v, step=step)
        (n_arrays,) = struct.unpack("<I", f.read(4))
        for _ in range(n_arrays):
            name = _read_name(f)
            arrays[name] = _read_array(f)
    return nets, adams, arrays
