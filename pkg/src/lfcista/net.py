"""CISTA-net: unrolled convolutional ISTA with learned filters.

Each layer updates an M-channel code stack ``Z`` from the input EPI ``x``::

    Z <- relu(Z - S (*) Z + W (*) x - b)

where ``S (*) Z`` is a depthwise correlation (channel m uses kernel S[m]),
``W (*) x`` correlates the single-channel input with each of the M kernels in
W, and ``b >= 0`` is a per-channel threshold.  The final stack is reduced by a
global max pool, followed by a fully connected M -> M layer and a sigmoid.

Gradients are derived by hand; :func:`backward` differentiates the mean
binary cross-entropy of a batch.
"""
import csv
import logging
import math
import struct
from contextlib import nullcontext
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit
from threadpoolctl import threadpool_limits

from . import convops, synth
from .errors import (
    ConfigError,
    DimensionError,
    FormatError,
    NumericalError,
    ShapeError,
    StaleCacheError,
    VersionError,
)

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"CISTA1\n"
MODEL_VERSION = 1
INPUT_NORMS = ("none", "max")


@dataclass(frozen=True)
class Architecture:
    m: int
    theta: int
    n: int
    kernel_sizes: tuple = (3, 5, 7, 9, 11, 13)
    depth_min: float = -18.0
    depth_max: float = 36.0
    # "-" subtracts the non-negative bias (soft-threshold reading), "+" adds it
    bias_sign: str = "-"
    # "max" divides every EPI by its largest absolute value before the first layer
    input_norm: str = "none"

    def __post_init__(self):
        object.__setattr__(self, "kernel_sizes", tuple(int(k) for k in self.kernel_sizes))
        if self.m < 1 or self.theta < 1 or self.n < 1:
            raise ConfigError("m, theta and n must be >= 1")
        if not self.kernel_sizes:
            raise ConfigError("at least one layer is required")
        for k in self.kernel_sizes:
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"kernel sizes must be odd, got {k}")
            if k > min(self.theta, self.n):
                raise ConfigError(f"kernel size {k} exceeds the EPI {self.theta}x{self.n}")
        if any(b < a for a, b in zip(self.kernel_sizes, self.kernel_sizes[1:])):
            raise ConfigError(f"kernel schedule must be non-decreasing: {self.kernel_sizes}")
        if self.bias_sign not in ("-", "+"):
            raise ConfigError(f"bias_sign must be '-' or '+', got {self.bias_sign!r}")
        if self.input_norm not in INPUT_NORMS:
            raise ConfigError(f"input_norm must be one of {INPUT_NORMS}, got {self.input_norm!r}")

    @property
    def layers(self):
        return len(self.kernel_sizes)

    def depth_grid(self):
        return self.depth_min + np.arange(self.m) * ((self.depth_max - self.depth_min) / (self.m - 1))


def param_count(arch):
    """Number of scalars in a CISTA-net with this architecture."""
    m = arch.m
    return sum(2 * m * k * k + m for k in arch.kernel_sizes) + m * m + m


def dense_param_count(arch):
    """Parameter count if S were a full M -> M convolution instead of depthwise."""
    m = arch.m
    return sum(m * m * k * k + m * k * k + m for k in arch.kernel_sizes) + m * m + m


@dataclass
class LayerParams:
    s_filters: np.ndarray
    w_filters: np.ndarray
    bias: np.ndarray


@dataclass
class HeadParams:
    weights: np.ndarray
    bias: np.ndarray


@dataclass
class CistaNetParams:
    arch: Architecture
    layers: list
    head: HeadParams
    # bumped whenever the tensors are updated in place
    generation: int = 0

    def tensors(self):
        """Parameter tensors by name, in serialization order.  Arrays are live views."""
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"layer{i}.s_filters"] = layer.s_filters
            out[f"layer{i}.w_filters"] = layer.w_filters
            out[f"layer{i}.bias"] = layer.bias
        out["head.weights"] = self.head.weights
        out["head.bias"] = self.head.bias
        return out

    def copy(self):
        layers = [LayerParams(l.s_filters.copy(), l.w_filters.copy(), l.bias.copy())
                  for l in self.layers]
        return CistaNetParams(self.arch, layers, HeadParams(self.head.weights.copy(),
                                                            self.head.bias.copy()))

    def bump(self):
        self.generation += 1


def _expected_shapes(arch):
    shapes = {}
    for i, k in enumerate(arch.kernel_sizes):
        shapes[f"layer{i}.s_filters"] = (arch.m, k, k)
        shapes[f"layer{i}.w_filters"] = (arch.m, k, k)
        shapes[f"layer{i}.bias"] = (arch.m,)
    shapes["head.weights"] = (arch.m, arch.m)
    shapes["head.bias"] = (arch.m,)
    return shapes


def _params_from_tensors(arch, tensors):
    layers = [LayerParams(tensors[f"layer{i}.s_filters"], tensors[f"layer{i}.w_filters"],
                          tensors[f"layer{i}.bias"]) for i in range(arch.layers)]
    return CistaNetParams(arch, layers, HeadParams(tensors["head.weights"], tensors["head.bias"]))


def init_params(arch, seed=0, init_dictionary=None):
    """Initial parameters, deterministic in ``seed``.

    Filters and head weights are uniform on ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``
    and all biases start at 0.01.  With ``init_dictionary``, every layer's W
    channel m holds ``gamma * d_m`` centered in the kernel, so that ``W (*) x``
    reproduces the scaled analysis operator ``gamma * D^T x`` of ISTA with
    ``gamma = 0.99 / L``.
    """
    rng = np.random.default_rng(seed)
    m = arch.m
    layers = []
    for k in arch.kernel_sizes:
        bound = 1.0 / k
        s = rng.uniform(-bound, bound, size=(m, k, k))
        w = rng.uniform(-bound, bound, size=(m, k, k))
        layers.append(LayerParams(s, w, np.full(m, 0.01)))
    bound = 1.0 / math.sqrt(m)
    head = HeadParams(rng.uniform(-bound, bound, size=(m, m)), np.full(m, 0.01))
    params = CistaNetParams(arch, layers, head)

    if init_dictionary is not None:
        atoms = np.asarray(getattr(init_dictionary, "atoms", init_dictionary), dtype=np.float64)
        if atoms.ndim != 3 or atoms.shape[0] != m:
            raise ConfigError(f"dictionary with shape {atoms.shape} does not match M={m}")
        ar, ac = atoms.shape[1:]
        kmin = arch.kernel_sizes[0]
        if ar > kmin or ac > kmin:
            raise ConfigError(f"atoms {ar}x{ac} do not fit the first kernel size {kmin}")
        lip = convops.estimate_lipschitz(atoms, (arch.theta, arch.n), seed=seed)
        if lip <= 0:
            raise ConfigError("dictionary has a zero Gram operator")
        gamma = 0.99 / lip
        for layer, k in zip(layers, arch.kernel_sizes):
            r0, c0 = (k - ar) // 2, (k - ac) // 2
            layer.w_filters[:] = 0.0
            layer.w_filters[:, r0:r0 + ar, c0:c0 + ac] = gamma * atoms
    return params


@dataclass
class ForwardCache:
    params: CistaNetParams
    generation: int
    x: np.ndarray
    z_in: list
    pre: list
    argpos: np.ndarray
    pooled: np.ndarray
    logits: np.ndarray
    probs: np.ndarray


def _as_batch(x, arch):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (arch.theta, arch.n):
        raise DimensionError(f"input of shape {x.shape} does not match EPI {arch.theta}x{arch.n}")
    if arch.input_norm == "max":
        peak = np.abs(x).max(axis=(1, 2))
        # an all-zero EPI is left as it is
        x = x / np.where(peak > 0, peak, 1.0)[:, None, None]
    return x


def forward_batch(x, params, keep_cache=True):
    """Run the network on a batch ``(B, theta, n)``; returns ``(probs, cache)``.

    With ``keep_cache=False`` the per-layer activations are dropped and the
    cache only carries pooled values and logits; it cannot be used by
    :func:`backward`.
    """
    arch = params.arch
    x = _as_batch(x, arch)
    xin = x[:, None]
    sign = -1.0 if arch.bias_sign == "-" else 1.0
    z = None
    z_in, pre_list = [], []
    for layer in params.layers:
        pre = convops.corr_batch(xin, layer.w_filters)
        if z is not None:
            pre += z
            pre -= convops.corr_batch(z, layer.s_filters)
        pre += sign * layer.bias[None, :, None, None]
        if keep_cache:
            z_in.append(z)
            pre_list.append(pre)
        z = np.maximum(pre, 0.0)

    nb, nm = z.shape[:2]
    flat = z.reshape(nb, nm, -1)
    argpos = np.argmax(flat, axis=2)
    pooled = np.take_along_axis(flat, argpos[..., None], axis=2)[..., 0]
    logits = pooled @ params.head.weights.T + params.head.bias
    probs = expit(logits)
    cache = ForwardCache(params, params.generation, x, z_in, pre_list, argpos, pooled,
                         logits, probs)
    return probs, cache


def forward(x, params):
    """Forward pass on one EPI; returns ``(probs, cache)`` with ``probs`` of length M."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError("forward expects a single 2-D EPI")
    probs, cache = forward_batch(x, params)
    return probs[0], cache


def infer(x, params):
    """Depth probabilities for one EPI ``(theta, n)`` or a batch ``(B, theta, n)``."""
    x = np.asarray(x, dtype=np.float64)
    probs, _ = forward_batch(x, params, keep_cache=False)
    return probs[0] if x.ndim == 2 else probs


def bce_loss(logits, label):
    """Mean binary cross-entropy of ``sigmoid(logits)`` against ``label``.

    Evaluated as ``max(l, 0) - l*y + log1p(exp(-|l|))`` so saturated
    probabilities never reach a logarithm.  For a batch ``(B, M)`` the result
    is averaged over both axes.
    """
    logits = np.asarray(logits, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    if logits.shape != label.shape:
        raise DimensionError(f"logits {logits.shape} and labels {label.shape} differ in shape")
    per = np.maximum(logits, 0.0) - logits * label + np.log1p(np.exp(-np.abs(logits)))
    return float(per.mean())


def backward(cache, label):
    """Gradients of the mean BCE loss with respect to every parameter tensor.

    The max pool routes its gradient to the cached row-major-first argmax and
    ReLU uses derivative 0 at exactly 0.

    Returns:
        A dict keyed like :meth:`CistaNetParams.tensors`.

    Raises:
        StaleCacheError: if the parameters changed after the forward pass.
    """
    params = cache.params
    if params.generation != cache.generation:
        raise StaleCacheError("parameters were updated after this forward pass")
    if not cache.pre:
        raise StaleCacheError("cache was built without intermediate activations")
    arch = params.arch
    label = np.asarray(label, dtype=np.float64)
    if label.ndim == 1:
        label = label[None]
    nb, nm = cache.probs.shape
    if label.shape != (nb, nm):
        raise DimensionError(f"label shape {label.shape} does not match output {(nb, nm)}")

    grads = {}
    dlogits = (cache.probs - label) / (nb * nm)
    grads["head.weights"] = dlogits.T @ cache.pooled
    grads["head.bias"] = dlogits.sum(axis=0)
    dpooled = dlogits @ params.head.weights

    shape = cache.pre[-1].shape
    dz = np.zeros((nb, nm, shape[2] * shape[3]))
    np.put_along_axis(dz, cache.argpos[..., None], dpooled[..., None], axis=2)
    dz = dz.reshape(shape)

    sign = -1.0 if arch.bias_sign == "-" else 1.0
    xin = cache.x[:, None]
    for i in reversed(range(arch.layers)):
        k = arch.kernel_sizes[i]
        layer = params.layers[i]
        dpre = dz * (cache.pre[i] > 0.0)
        grads[f"layer{i}.bias"] = sign * dpre.sum(axis=(0, 2, 3))
        grads[f"layer{i}.w_filters"] = convops.kernel_grad_batch(dpre, xin, k, k)
        zin = cache.z_in[i]
        if zin is None:
            grads[f"layer{i}.s_filters"] = np.zeros_like(layer.s_filters)
            continue
        grads[f"layer{i}.s_filters"] = -convops.kernel_grad_batch(dpre, zin, k, k)
        dz = dpre - convops.conv_batch(dpre, layer.s_filters)
    return {name: grads[name] for name in params.tensors()}


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        t = params.tensors()
        return cls({k: np.zeros_like(a) for k, a in t.items()},
                   {k: np.zeros_like(a) for k, a in t.items()})


def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected ADAM update applied in place, then biases clamped to >= 0.

    Returns ``(params, state)`` for convenience; both are mutated.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.tensors().items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    for layer in params.layers:
        np.maximum(layer.bias, 0.0, out=layer.bias)
    params.bump()
    return params, state


@dataclass
class TrainingHyper:
    epochs: int = 100
    batch: int = 64
    lr: float = 1e-3
    seed: int = 0
    val_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    single_thread: bool = True


@dataclass
class TrainingReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = float("inf")
    n_train: int = 0
    n_val: int = 0

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss"])
            for e, (tr, va) in enumerate(zip(self.train_loss, self.val_loss), start=1):
                w.writerow([e, repr(tr), repr(va)])


def split_indices(count, val_fraction, seed):
    """Deterministic train/validation split of ``range(count)``."""
    if not 0 <= val_fraction < 1:
        raise ConfigError("val_fraction must be in [0, 1)")
    n_val = int(round(count * val_fraction))
    if val_fraction > 0 and count > 1:
        n_val = min(max(n_val, 1), count - 1)
    perm = np.random.default_rng([seed, 0x5EED]).permutation(count)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def mean_loss(params, epis, labels, chunk=128):
    """Average BCE over a set of samples, evaluated in chunks."""
    if len(epis) == 0:
        return float("nan")
    total = 0.0
    for start in range(0, len(epis), chunk):
        _, cache = forward_batch(epis[start:start + chunk], params, keep_cache=False)
        total += bce_loss(cache.logits, labels[start:start + chunk]) * len(cache.logits)
    return total / len(epis)


def _param_norms(params):
    return {k: float(np.linalg.norm(a)) for k, a in params.tensors().items()}


def train(dataset_path, arch, hyper=None, out_model_path=None, init_dictionary=None,
          csv_path=None):
    """Train a CISTA-net on a dataset file with ADAM on the BCE loss.

    Each epoch reshuffles the training split with a stream keyed by
    ``(seed, epoch)``.  The parameters with the lowest validation loss are
    kept (the initialization counts as epoch 0) and written to
    ``out_model_path``.

    Returns:
        ``(best_params, report)``.

    Raises:
        ConfigError: when the dataset does not match ``arch``.
        NumericalError: when a batch loss is not finite.
    """
    hyper = hyper or TrainingHyper()
    data = synth.read_dataset(dataset_path)
    h = data.header
    if (h.m, h.theta, h.n) != (arch.m, arch.theta, arch.n):
        raise ConfigError(f"dataset (M={h.m}, theta={h.theta}, N={h.n}) does not match "
                          f"architecture (M={arch.m}, theta={arch.theta}, N={arch.n})")
    if hyper.batch < 1 or hyper.epochs < 0:
        raise ConfigError("batch must be >= 1 and epochs >= 0")

    limits = threadpool_limits(1) if hyper.single_thread else nullcontext()
    with limits:
        params, report = _train_loop(data, arch, hyper, init_dictionary)
    if out_model_path is not None:
        save_model(params, out_model_path)
    if csv_path is not None:
        report.write_csv(csv_path)
    return params, report


def _train_loop(data, arch, hyper, init_dictionary):
    tr_idx, va_idx = split_indices(len(data), hyper.val_fraction, hyper.seed)
    report = TrainingReport(n_train=len(tr_idx), n_val=len(va_idx))
    params = init_params(arch, hyper.seed, init_dictionary)
    state = AdamState.zeros_like(params)
    best = params.copy()
    va_x, va_y = data.epis[va_idx], data.labels[va_idx]
    has_val = len(va_idx) > 0
    report.best_val_loss = mean_loss(params, va_x, va_y) if has_val else float("inf")

    for epoch in range(1, hyper.epochs + 1):
        order = tr_idx[np.random.default_rng([hyper.seed, epoch]).permutation(len(tr_idx))]
        total = 0.0
        for bi, start in enumerate(range(0, len(order), hyper.batch)):
            idx = order[start:start + hyper.batch]
            probs, cache = forward_batch(data.epis[idx], params)
            loss = bce_loss(cache.logits, data.labels[idx])
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {bi}; "
                                     f"parameter norms {_param_norms(params)}")
            grads = backward(cache, data.labels[idx])
            adam_step(params, grads, state, hyper.lr, hyper.beta1, hyper.beta2, hyper.eps)
            total += loss * len(idx)
        train_loss = total / max(len(order), 1)
        val_loss = mean_loss(params, va_x, va_y)
        report.train_loss.append(train_loss)
        report.val_loss.append(val_loss)
        logger.info("epoch %d train %.6f val %.6f", epoch, train_loss, val_loss)
        score = val_loss if has_val else train_loss
        if score < report.best_val_loss:
            report.best_val_loss = score
            report.best_epoch = epoch
            best = params.copy()
    return best, report


def _header_items(arch):
    return [("version", MODEL_VERSION), ("m", arch.m), ("theta", arch.theta), ("n", arch.n),
            ("layers", arch.layers), ("kernel_sizes", ",".join(map(str, arch.kernel_sizes))),
            ("depth_min", float(arch.depth_min)), ("depth_max", float(arch.depth_max)),
            ("bias_sign", arch.bias_sign), ("input_norm", arch.input_norm)]


def save_model(params, path):
    """Write parameters as binary32 tensors after a ``key=value`` header."""
    parts = [synth.format_header(MODEL_MAGIC, _header_items(params.arch))]
    for name, arr in params.tensors().items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.asarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_model(path):
    """Read a model file written by :func:`save_model`; tensors are upcast to float64."""
    with open(path, "rb") as fh:
        kv = synth.parse_header(fh, MODEL_MAGIC)
        try:
            version = int(kv["version"])
        except (KeyError, ValueError):
            raise FormatError("model header lacks a valid version") from None
        if version != MODEL_VERSION:
            raise VersionError(f"unsupported model version {version}")
        try:
            kernels = tuple(int(k) for k in kv["kernel_sizes"].split(","))
            arch = Architecture(m=int(kv["m"]), theta=int(kv["theta"]), n=int(kv["n"]),
                                kernel_sizes=kernels, depth_min=float(kv["depth_min"]),
                                depth_max=float(kv["depth_max"]),
                                bias_sign=kv.get("bias_sign", "-"),
                                input_norm=kv.get("input_norm", "none"))
            layers = int(kv["layers"])
        except (KeyError, ValueError) as exc:
            raise FormatError(f"bad model header: {exc}") from None
        if layers != arch.layers:
            raise ShapeError(f"header declares {layers} layers but {arch.layers} kernel sizes")

        tensors = {}
        for name, shape in _expected_shapes(arch).items():
            nlen = struct.unpack("<H", synth.read_exact(fh, 2, f"name length of {name}"))[0]
            got = synth.read_exact(fh, nlen, f"name of {name}").decode("utf-8", "replace")
            if got != name:
                raise ShapeError(f"expected tensor {name}, found {got}")
            rank = struct.unpack("<B", synth.read_exact(fh, 1, f"rank of {name}"))[0]
            dims = struct.unpack(f"<{rank}I", synth.read_exact(fh, 4 * rank, f"dims of {name}"))
            if dims != shape:
                raise ShapeError(f"tensor {name} has shape {dims}, expected {shape}")
            count = int(np.prod(dims))
            buf = synth.read_exact(fh, 4 * count, f"tensor {name}")
            tensors[name] = np.frombuffer(buf, "<f4").reshape(dims).astype(np.float64)
        if fh.read(1):
            raise ShapeError("trailing bytes after the last tensor")
    return _params_from_tensors(arch, tensors)
