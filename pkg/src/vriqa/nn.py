"""A small trainable network substrate with analytic backprop.

Batches are leading-axis; convolutional tensors are channels-last (B, H, W, C).
Only what the quality models need is provided: dense layers, 3x3 stride-2
valid convolutions, ReLU / sigmoid / softplus and global average pooling.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import expit

FORMAT_MAGIC = b"VRIQA-NN"
FORMAT_VERSION = 1
GRADCHECK_MAX_PARAMS = 5000


class ShapeError(ValueError):
    pass


# ------------------------------------------------------------------------ layers


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: list[np.ndarray] = []

    @property
    def hyper(self) -> dict:
        return {}

    def forward(self, x):
        """Return (output, cache)."""
        raise NotImplementedError

    def backward(self, cache, dy, guided=False):
        """Return (input gradient, list of parameter gradients)."""
        raise NotImplementedError

    def init_params(self, rng, relu_follows: bool, dtype):
        pass

    def __repr__(self):
        return f"{type(self).__name__}({', '.join(f'{k}={v}' for k, v in self.hyper.items())})"


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in: int, n_out: int, dtype=np.float32):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.params = [np.zeros((n_in, n_out), dtype), np.zeros(n_out, dtype)]

    @property
    def hyper(self):
        return {"in": self.n_in, "out": self.n_out}

    def init_params(self, rng, relu_follows, dtype):
        if relu_follows:
            limit = math.sqrt(6.0 / self.n_in)
        else:
            limit = math.sqrt(6.0 / (self.n_in + self.n_out))
        self.params[0] = rng.uniform(-limit, limit, size=(self.n_in, self.n_out)).astype(dtype)
        self.params[1] = np.zeros(self.n_out, dtype)

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"dense expects (B, {self.n_in}), got {x.shape}")
        w, b = self.params
        return x @ w + b, x

    def backward(self, cache, dy, guided=False):
        x = cache
        w = self.params[0]
        return dy @ w.T, [x.T @ dy, dy.sum(axis=0)]


class Conv2d(Layer):
    """3x3 (default) valid convolution with stride 2; weights stored as (k, k, C_in, C_out)."""

    kind = "conv2d"

    def __init__(self, c_in: int, c_out: int, kernel: int = 3, stride: int = 2, dtype=np.float32):
        super().__init__()
        self.c_in, self.c_out, self.kernel, self.stride = c_in, c_out, kernel, stride
        self.params = [np.zeros((kernel, kernel, c_in, c_out), dtype), np.zeros(c_out, dtype)]

    @property
    def hyper(self):
        return {"in": self.c_in, "out": self.c_out, "kernel": self.kernel, "stride": self.stride}

    def out_size(self, n: int) -> int:
        return (n - self.kernel) // self.stride + 1

    def init_params(self, rng, relu_follows, dtype):
        k2 = self.kernel * self.kernel
        fan_in, fan_out = k2 * self.c_in, k2 * self.c_out
        limit = math.sqrt(6.0 / fan_in) if relu_follows else math.sqrt(6.0 / (fan_in + fan_out))
        self.params[0] = rng.uniform(-limit, limit, size=self.params[0].shape).astype(dtype)
        self.params[1] = np.zeros(self.c_out, dtype)

    def _columns(self, x):
        k, s = self.kernel, self.stride
        bsz, h, w, c = x.shape
        ho, wo = self.out_size(h), self.out_size(w)
        x = np.ascontiguousarray(x)
        st = x.strides
        view = as_strided(x, (bsz, ho, wo, k, k, c), (st[0], s * st[1], s * st[2], st[1], st[2], st[3]),
                          writeable=False)
        return view.reshape(bsz * ho * wo, k * k * c), ho, wo

    def forward(self, x):
        if x.ndim != 4 or x.shape[3] != self.c_in:
            raise ShapeError(f"conv2d expects (B, H, W, {self.c_in}), got {x.shape}")
        if min(x.shape[1], x.shape[2]) < self.kernel:
            raise ShapeError(f"input {x.shape[1:3]} smaller than kernel {self.kernel}")
        flat, ho, wo = self._columns(x)
        bsz = x.shape[0]
        w, b = self.params
        y = flat @ w.reshape(-1, self.c_out) + b
        return y.reshape(bsz, ho, wo, self.c_out), (flat, x.shape)

    def backward(self, cache, dy, guided=False, need_input=True):
        flat, xshape = cache
        _, ho, wo, _ = dy.shape
        w = self.params[0]
        dflat = dy.reshape(-1, self.c_out)
        dw = (flat.T @ dflat).reshape(w.shape)
        db = dflat.sum(axis=0)
        if not need_input:
            return None, [dw, db]
        return self._col2im(dflat, xshape, ho, wo), [dw, db]

    def _col2im(self, dflat, xshape, ho, wo):
        """Scatter per-tap input gradients through stride-parity planes, then interleave once."""
        k, s = self.kernel, self.stride
        bsz, _, _, c = xshape
        w = self.params[0]
        nr = min(s, k)
        planes = [[np.zeros((bsz, ho + (k - 1 - r) // s, wo + (k - 1 - q) // s, c), dflat.dtype)
                   for q in range(nr)] for r in range(nr)]
        for i in range(k):
            for j in range(k):
                oi, oj = i // s, j // s
                planes[i % s][j % s][:, oi:oi + ho, oj:oj + wo, :] += (dflat @ w[i, j].T).reshape(bsz, ho, wo, c)
        dx = np.zeros(xshape, dtype=dflat.dtype)
        for r in range(nr):
            for q in range(nr):
                plane = planes[r][q]
                dx[:, r:r + s * (plane.shape[1] - 1) + 1:s, q:q + s * (plane.shape[2] - 1) + 1:s, :] = plane
        return dx


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        return np.maximum(x, 0), x

    def backward(self, cache, dy, guided=False):
        mask = cache > 0
        if guided:
            mask = mask & (dy > 0)
        return np.where(mask, dy, 0).astype(dy.dtype, copy=False), []


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x):
        y = expit(x)
        return y, y

    def backward(self, cache, dy, guided=False):
        y = cache
        return dy * y * (1 - y), []


class Softplus(Layer):
    kind = "softplus"

    def forward(self, x):
        return np.logaddexp(0, x), x

    def backward(self, cache, dy, guided=False):
        return dy * expit(cache), []


class GlobalAvgPool(Layer):
    kind = "global_avg_pool"

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"global_avg_pool expects (B, H, W, C), got {x.shape}")
        return x.mean(axis=(1, 2)), x.shape

    def backward(self, cache, dy, guided=False):
        shape = cache
        scale = 1.0 / (shape[1] * shape[2])
        return np.broadcast_to((dy * scale)[:, None, None, :], shape).astype(dy.dtype), []


LAYER_KINDS = {cls.kind: cls for cls in (Dense, Conv2d, ReLU, Sigmoid, Softplus, GlobalAvgPool)}


# ----------------------------------------------------------------------- network


@dataclass
class Trace:
    """Per-layer inputs and caches recorded by :func:`forward`."""

    inputs: list
    caches: list
    output: np.ndarray
    kinds: list = field(default_factory=list)

    @property
    def outputs(self) -> list:
        return self.inputs[1:] + [self.output]


class Network:
    def __init__(self, layers: list[Layer]):
        self.layers = list(layers)

    @property
    def dtype(self):
        for p in self.params():
            return p.dtype
        return np.dtype(np.float32)

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    @property
    def param_count(self) -> int:
        return int(sum(p.size for p in self.params()))

    def set_params(self, values) -> None:
        values = list(values)
        i = 0
        for layer in self.layers:
            for j in range(len(layer.params)):
                if values[i].shape != layer.params[j].shape:
                    raise ShapeError(f"parameter {i}: expected {layer.params[j].shape}, got {values[i].shape}")
                layer.params[j] = values[i]
                i += 1
        if i != len(values):
            raise ShapeError(f"expected {i} parameter arrays, got {len(values)}")

    def initialize(self, rng: np.random.Generator, dtype=np.float32) -> "Network":
        """He-uniform for layers feeding a ReLU, Xavier-uniform otherwise; zero biases."""
        for idx, layer in enumerate(self.layers):
            relu_follows = idx + 1 < len(self.layers) and isinstance(self.layers[idx + 1], ReLU)
            layer.init_params(rng, relu_follows, dtype)
        return self

    def astype(self, dtype) -> "Network":
        net = self.copy()
        net.set_params([p.astype(dtype) for p in net.params()])
        return net

    def copy(self) -> "Network":
        layers = []
        for layer in self.layers:
            clone = LAYER_KINDS[layer.kind](**_ctor_args(layer))
            clone.params = [p.copy() for p in layer.params]
            layers.append(clone)
        return Network(layers)

    def __repr__(self):
        return f"Network({self.layers!r}, params={self.param_count})"


def _ctor_args(layer: Layer) -> dict:
    if isinstance(layer, Dense):
        return {"n_in": layer.n_in, "n_out": layer.n_out}
    if isinstance(layer, Conv2d):
        return {"c_in": layer.c_in, "c_out": layer.c_out, "kernel": layer.kernel, "stride": layer.stride}
    return {}


def forward(net: Network, x: np.ndarray) -> Trace:
    inputs, caches = [], []
    for layer in net.layers:
        inputs.append(x)
        x, cache = layer.forward(x)
        caches.append(cache)
    return Trace(inputs, caches, x, [layer.kind for layer in net.layers])


def _backward(net: Network, trace: Trace, out_grad, guided: bool, input_grad: bool = True):
    if len(trace.caches) != len(net.layers):
        raise ShapeError("trace does not belong to this network")
    if np.shape(out_grad) != trace.output.shape:
        raise ShapeError(f"output gradient {np.shape(out_grad)} does not match output {trace.output.shape}")
    dy = np.asarray(out_grad, dtype=trace.output.dtype)
    grads: list[list[np.ndarray]] = []
    last = len(net.layers) - 1
    for i, (layer, cache) in enumerate(zip(reversed(net.layers), reversed(trace.caches))):
        if i == last and not input_grad and isinstance(layer, Conv2d):
            dy, g = layer.backward(cache, dy, guided, need_input=False)
        else:
            dy, g = layer.backward(cache, dy, guided)
        grads.append(g)
    flat = [g for layer_grads in reversed(grads) for g in layer_grads]
    return flat, dy


def backward(net: Network, trace: Trace, out_grad, input_grad: bool = True):
    """Return (parameter gradients aligned with ``net.params()``, input gradient).

    With ``input_grad=False`` a leading convolution skips its input gradient and None may be returned.
    """
    return _backward(net, trace, out_grad, guided=False, input_grad=input_grad)


def guided_backward(net: Network, trace: Trace, out_grad) -> np.ndarray:
    """Input gradient with the guided-backprop rule: ReLUs pass only positive signal on positive input."""
    return _backward(net, trace, out_grad, guided=True)[1]


def relu_pattern(*traces: Trace) -> np.ndarray:
    """Concatenated on/off state of every ReLU input in the given traces."""
    parts = [
        (inp > 0).ravel()
        for tr in traces
        for inp, kind in zip(tr.inputs, tr.kinds)
        if kind == "relu"
    ]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=bool)


def build_network(spec: list, dtype=np.float32) -> Network:
    """Build from ``[("dense", {"in":..,"out":..}), ("relu", {}), ...]``."""
    layers = []
    for kind, hyper in spec:
        cls = LAYER_KINDS[kind]
        if cls is Dense:
            layers.append(Dense(hyper["in"], hyper["out"], dtype))
        elif cls is Conv2d:
            layers.append(Conv2d(hyper["in"], hyper["out"], hyper.get("kernel", 3), hyper.get("stride", 2), dtype))
        else:
            layers.append(cls())
    net = Network(layers)
    _check_composition(net)
    return net


def _check_composition(net: Network) -> None:
    width = None
    for layer in net.layers:
        if isinstance(layer, (Dense, Conv2d)):
            if width is not None and width != layer.hyper["in"]:
                raise ShapeError(f"{layer!r} expects {layer.hyper['in']} inputs but receives {width}")
            width = layer.hyper["out"]


# ------------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState, lr: float) -> AdamState:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ShapeError("params, grads and optimizer state disagree in length")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"shape mismatch {p.shape} / {g.shape} / {m.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return state


# --------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    skipped_kinks: int
    worst_index: tuple = field(default=())


def rel_error(a, b, floor: float = 1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def finite_difference_check(params: list[np.ndarray], analytic: list[np.ndarray], loss_fn, pattern_fn=None,
                            h: float = 1e-4, floor: float = 1e-8) -> GradCheckReport:
    """Compare analytic gradients with central differences of ``loss_fn()``.

    ``params`` are perturbed in place.  Coordinates whose perturbation changes
    the ReLU on/off pattern reported by ``pattern_fn`` straddle a kink and are
    skipped.
    """
    base_pattern = pattern_fn() if pattern_fn else None
    worst, worst_idx, checked, skipped = 0.0, (), 0, 0
    for pi, (p, g) in enumerate(zip(params, analytic)):
        flat = p.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            f_plus = loss_fn()
            pat_plus = pattern_fn() if pattern_fn else None
            flat[k] = orig - h
            f_minus = loss_fn()
            pat_minus = pattern_fn() if pattern_fn else None
            flat[k] = orig
            if pattern_fn and not (np.array_equal(pat_plus, base_pattern) and np.array_equal(pat_minus, base_pattern)):
                skipped += 1
                continue
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = float(rel_error(gflat[k], numeric, floor))
            checked += 1
            if err > worst:
                worst, worst_idx = err, (pi, k)
    return GradCheckReport(worst, checked, skipped, worst_idx)


def grad_check(net: Network, loss, x: np.ndarray, h: float = 1e-4, check_input: bool = True) -> GradCheckReport:
    """Worst relative error between analytic and central-difference gradients, in float64.

    ``loss(output) -> (value, d value / d output)``.
    """
    if net.param_count > GRADCHECK_MAX_PARAMS:
        raise ValueError(f"network has {net.param_count} parameters; gradient check limited to {GRADCHECK_MAX_PARAMS}")
    net64 = net.astype(np.float64)
    x64 = np.array(x, dtype=np.float64)
    trace = forward(net64, x64)
    _, dout = loss(trace.output)
    grads, dx = backward(net64, trace, dout)

    def value():
        return float(loss(forward(net64, x64).output)[0])

    def pattern():
        return relu_pattern(forward(net64, x64))

    params = net64.params()
    analytic = list(grads)
    if check_input:
        params = params + [x64]
        analytic = analytic + [dx]
    return finite_difference_check(params, analytic, value, pattern, h)


# ---------------------------------------------------------------- serialization


def layer_header(layer: Layer) -> dict:
    return {"kind": layer.kind, "hyper": layer.hyper, "shapes": [list(p.shape) for p in layer.params]}


def network_from_header(layers: list[dict]) -> Network:
    return build_network([(entry["kind"], entry["hyper"]) for entry in layers])


def save_networks(path, networks: dict[str, Network], metadata: dict | None = None) -> None:
    """Write a textual JSON header line followed by a little-endian float32 payload in header order."""
    header = {
        "format_version": FORMAT_VERSION,
        "metadata": metadata or {},
        "networks": [{"name": name, "layers": [layer_header(layer) for layer in net.layers]}
                     for name, net in networks.items()],
    }
    payload = io.BytesIO()
    for net in networks.values():
        for p in net.params():
            payload.write(np.ascontiguousarray(p, dtype="<f4").tobytes())
    text = json.dumps(header, sort_keys=True, separators=(",", ":"))
    with open(path, "wb") as fh:
        fh.write(FORMAT_MAGIC + b" " + str(FORMAT_VERSION).encode() + b"\n")
        fh.write(text.encode("utf-8") + b"\n")
        fh.write(payload.getvalue())


def load_networks(path, dtype=np.float32) -> tuple[dict[str, Network], dict]:
    with open(path, "rb") as fh:
        magic = fh.readline().rstrip(b"\n").split(b" ")
        if magic[0] != FORMAT_MAGIC or len(magic) != 2:
            raise ValueError(f"{path}: not a model container")
        if int(magic[1]) != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format version {magic[1].decode()}")
        header = json.loads(fh.readline().decode("utf-8"))
        payload = fh.read()
    offset = 0
    networks = {}
    for entry in header["networks"]:
        net = network_from_header(entry["layers"])
        values = []
        for layer_entry in entry["layers"]:
            for shape in layer_entry["shapes"]:
                n = int(np.prod(shape))
                chunk = np.frombuffer(payload, dtype="<f4", count=n, offset=offset)
                if chunk.size != n:
                    raise ValueError(f"{path}: truncated parameter payload")
                offset += 4 * n
                values.append(chunk.astype(dtype).reshape(shape))
        net.set_params(values)
        networks[entry["name"]] = net
    if offset != len(payload):
        raise ValueError(f"{path}: {len(payload) - offset} trailing payload bytes")
    return networks, header["metadata"]
