"""1D-CNN over spectral coefficient vectors, written directly in numpy.

Architecture: conv(1 -> c1, k, stride) -> act -> conv(c1 -> c2, k, stride)
-> act -> flatten -> dropout -> dense(hidden) -> act -> dense(n_out) -> output.
Convolutions are "valid" (no padding). Activations are kept channels-last,
``(batch, length, channels)``, and flatten in that row-major order.

Class index 0 is non-defect, 1 is defect.
"""

import json
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .containers import read_container, write_container
from .errors import CompatibilityError, ConfigError, DivergenceError, ShapeError

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = "cnn-checkpoint/v1"
PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "dense1_w", "dense1_b", "dense2_w", "dense2_b")
PROB_CLAMP = 1e-12
SCALINGS = ("standard", "unit-energy", "none")


@dataclass(frozen=True)
class CnnArch:
    input_length: int = 4096
    channels: tuple = (32, 64)
    kernel_size: int = 3
    stride: int = 3
    hidden: int = 128
    n_outputs: int = 2
    dropout: float = 0.5
    activation: str = "relu"  # "relu" | "identity"
    output: str = "sigmoid"  # "sigmoid" | "softmax" | "identity"

    def conv_lengths(self):
        l1 = conv_output_length(self.input_length, self.kernel_size, self.stride)
        l2 = conv_output_length(l1, self.kernel_size, self.stride)
        return l1, l2

    @property
    def flat_size(self):
        return self.conv_lengths()[1] * self.channels[1]

    def validate(self):
        if self.kernel_size < 1 or self.stride < 1 or self.hidden < 1 or self.n_outputs < 1:
            raise ConfigError("kernel_size, stride, hidden and n_outputs must be >= 1")
        if len(self.channels) != 2 or min(self.channels) < 1:
            raise ConfigError(f"channels must be two positive ints, got {self.channels}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.activation not in ("relu", "identity"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.output not in ("sigmoid", "softmax", "identity"):
            raise ConfigError(f"unknown output {self.output!r}")
        l1, l2 = self.conv_lengths()
        if l1 < 1 or l2 < 1:
            raise ConfigError(f"input length {self.input_length} too short for kernel {self.kernel_size}")


def conv_output_length(length, kernel, stride):
    return (length - kernel) // stride + 1


def param_shapes(arch):
    k, (c1, c2) = arch.kernel_size, arch.channels
    return {
        "conv1_w": (k, c1),
        "conv1_b": (c1,),
        "conv2_w": (k * c1, c2),
        "conv2_b": (c2,),
        "dense1_w": (arch.flat_size, arch.hidden),
        "dense1_b": (arch.hidden,),
        "dense2_w": (arch.hidden, arch.n_outputs),
        "dense2_b": (arch.n_outputs,),
    }


@dataclass
class CnnModel:
    arch: CnnArch
    params: dict
    scaler_mean: np.ndarray = None
    scaler_std: np.ndarray = None

    @property
    def dtype(self):
        return self.params["conv1_w"].dtype

    def astype(self, dtype):
        return CnnModel(self.arch, {k: v.astype(dtype) for k, v in self.params.items()}, self.scaler_mean, self.scaler_std)

    def copy(self):
        return self.astype(self.dtype)

    def standardize(self, s):
        s = np.asarray(s, dtype=np.float64)
        if self.scaler_mean is None:
            return s
        return (s - self.scaler_mean) / self.scaler_std


def init_model(arch, seed, dtype=np.float64):
    """Fan-in scaled uniform weights (limit sqrt(6 / fan_in)), zero biases."""
    arch.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(arch).items():
        if name.endswith("_b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            limit = np.sqrt(6.0 / shape[0])
            params[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return CnnModel(arch, params)


# --------------------------------------------------------------------------
# layers


def _windows(a, kernel, stride, lout):
    b, _, c = a.shape
    if stride == kernel and a.flags.c_contiguous:
        # non-overlapping windows are a plain reshape
        return a[:, : lout * kernel].reshape(b, lout, kernel * c)
    s0, s1, s2 = a.strides
    return as_strided(a, (b, lout, kernel, c), (s0, stride * s1, s1, s2), writeable=False).reshape(b, lout, kernel * c)


def _col2im(dcols, length, kernel, stride, channels):
    b, lout, _ = dcols.shape
    if stride == kernel:
        out = np.empty((b, length, channels), dtype=dcols.dtype)
        out[:, : lout * kernel] = dcols.reshape(b, lout * kernel, channels)
        out[:, lout * kernel :] = 0
        return out
    out = np.zeros((b, length, channels), dtype=dcols.dtype)
    d = dcols.reshape(b, lout, kernel, channels)
    stop = stride * (lout - 1) + 1
    for j in range(kernel):
        out[:, j : j + stop : stride] += d[:, :, j]
    return out


def _dense(cols, w, b):
    # 2-D GEMM is far faster than numpy's batched 3-D matmul here
    lead = cols.shape[:-1]
    return (cols.reshape(-1, cols.shape[-1]) @ w + b).reshape(*lead, w.shape[1])


def _act(z, kind):
    return np.maximum(z, 0) if kind == "relu" else z


def _act_slope(z, kind):
    return z > 0 if kind == "relu" else None


def _scale(d, slope):
    if slope is not None:
        np.multiply(d, slope, out=d)
    return d


def sigmoid(z):
    """Stable logistic, kept strictly inside (0, 1) for saturated inputs."""
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    info = np.finfo(out.dtype)
    return np.clip(out, info.tiny, 1.0 - info.epsneg, out=out)


def _output(z, kind):
    if kind == "sigmoid":
        return sigmoid(z)
    if kind == "softmax":
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)
    return z


@dataclass
class ForwardCache:
    x: np.ndarray
    w0: np.ndarray
    z1: np.ndarray
    w1: np.ndarray
    z2: np.ndarray
    flat: np.ndarray
    drop: np.ndarray
    z3: np.ndarray
    a3: np.ndarray
    z4: np.ndarray
    out: np.ndarray


def forward_cache(model, x, train=False, rng=None):
    """Forward pass on standardized inputs ``x`` of shape ``(B, L)``."""
    a, p = model.arch, model.params
    l1, l2 = a.conv_lengths()
    b = x.shape[0]
    w0 = _windows(np.ascontiguousarray(x)[:, :, None], a.kernel_size, a.stride, l1)
    z1 = _dense(w0, p["conv1_w"], p["conv1_b"])
    w1 = _windows(_act(z1, a.activation), a.kernel_size, a.stride, l2)
    z2 = _dense(w1, p["conv2_w"], p["conv2_b"])
    flat = _act(z2, a.activation).reshape(b, l2 * a.channels[1])
    drop = None
    if train and a.dropout > 0:
        # 16-bit uniform draws; the scale uses the exact quantized keep rate
        threshold = int(round(a.dropout * 65536))
        keep = rng.integers(0, 65536, size=flat.shape, dtype=np.uint16) >= threshold
        drop = keep * flat.dtype.type(65536.0 / (65536 - threshold))
        flat = flat * drop
    z3 = flat @ p["dense1_w"] + p["dense1_b"]
    a3 = _act(z3, a.activation)
    z4 = a3 @ p["dense2_w"] + p["dense2_b"]
    # output nonlinearity in float64 so float32 models keep scores inside (0, 1)
    out = _output(z4.astype(np.float64), a.output)
    return ForwardCache(x, w0, z1, w1, z2, flat, drop, z3, a3, z4, out)


def backward(model, cache, d_z4, slopes=None, param_grads=True, input_grad=False):
    """Backpropagate ``d_z4`` (gradient at the output pre-activation).

    ``slopes`` overrides the elementwise activation slopes ``(s1, s2, s3)`` of
    the three hidden nonlinearities (``None`` means slope 1); by default they
    are the derivatives at the cached pre-activations. Returns
    ``(grads, d_x)``.
    """
    a, p = model.arch, model.params
    l1, l2 = a.conv_lengths()
    k, (c1, c2) = a.kernel_size, a.channels
    if slopes is None:
        slopes = tuple(_act_slope(z, a.activation) for z in (cache.z1, cache.z2, cache.z3))
    s1, s2, s3 = slopes
    g = {}
    b = d_z4.shape[0]
    if param_grads:
        g["dense2_w"] = cache.a3.T @ d_z4
        g["dense2_b"] = d_z4.sum(axis=0)
    d_z3 = _scale(d_z4 @ p["dense2_w"].T, s3)
    if param_grads:
        g["dense1_w"] = cache.flat.T @ d_z3
        g["dense1_b"] = d_z3.sum(axis=0)
    d_flat = d_z3 @ p["dense1_w"].T
    if cache.drop is not None:
        d_flat = d_flat * cache.drop
    d_z2 = _scale(d_flat.reshape(b, l2, c2), s2)
    if param_grads:
        g["conv2_w"] = cache.w1.reshape(-1, k * c1).T @ d_z2.reshape(-1, c2)
        g["conv2_b"] = d_z2.sum(axis=(0, 1))
    d_z1 = _scale(_col2im(_dense(d_z2, p["conv2_w"].T, 0), l1, k, a.stride, c1), s1)
    if param_grads:
        g["conv1_w"] = cache.w0.reshape(-1, k).T @ d_z1.reshape(-1, c1)
        g["conv1_b"] = d_z1.sum(axis=(0, 1))
    d_x = None
    if input_grad:
        d_x = _col2im(_dense(d_z1, p["conv1_w"].T, 0), a.input_length, k, a.stride, 1)[:, :, 0]
    return g, d_x


def _as_batch(model, s):
    s = np.asarray(s)
    single = s.ndim == 1
    s = s[None] if single else s
    if s.ndim != 2 or s.shape[1] != model.arch.input_length:
        raise ShapeError(f"expected input length {model.arch.input_length}, got shape {np.shape(s)}")
    return s, single


def forward(model, s, mode="infer", rng=None, batch_size=512):
    """Output pair(s) for raw spectral vector(s) ``s``; standardization included.

    ``mode="train"`` applies inverted dropout drawn from ``rng``.
    """
    s, single = _as_batch(model, s)
    x = model.standardize(s).astype(model.dtype)
    train = mode == "train"
    if train and rng is None:
        raise ValueError("train mode needs an rng for dropout")
    outs = [forward_cache(model, x[i : i + batch_size], train, rng).out for i in range(0, len(x), batch_size)]
    out = np.concatenate(outs) if outs else np.empty((0, model.arch.n_outputs))
    return out[0] if single else out


def one_hot(labels, n=2):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), n))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def loss(pred, target):
    """Mean categorical cross-entropy.

    Output pairs are first normalized to sum to one (independent sigmoid
    outputs are not a distribution), then clamped to [1e-12, 1 - 1e-12].
    """
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    q = np.clip(pred / pred.sum(axis=1, keepdims=True), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(np.mean(-np.sum(target * np.log(q), axis=1)))


def loss_grad_z(out, target, output_kind):
    """Gradient of the batch-mean loss wrt the output pre-activations."""
    b = len(out)
    if output_kind == "softmax":
        return (out - target) / b
    if output_kind == "sigmoid":
        total = out.sum(axis=1, keepdims=True)
        ysum = target.sum(axis=1, keepdims=True)
        return (-target + out * ysum / total) * (1.0 - out) / b
    raise ConfigError("identity output has no training loss")


def defect_score(out, output_kind="sigmoid"):
    """Defect probability from output pair(s).

    Sigmoid pairs are normalized to sum to one, exactly as the loss treats
    them, and clamped like the loss so scores stay inside (0, 1). Identity
    outputs pass the raw defect unit through.
    """
    out = np.asarray(out, dtype=np.float64)
    if output_kind == "identity":
        return out[..., 1].copy()
    q = out[..., 1] / out.sum(axis=-1)
    return np.clip(q, PROB_CLAMP, 1.0 - PROB_CLAMP)


def predict(model, s):
    """``(label, defect score)``; an exact tie resolves to non-defect."""
    out = forward(model, s)
    score = defect_score(out, model.arch.output)
    if np.ndim(out) == 1:
        return int(out[1] > out[0]), float(score)
    return predict_from_outputs(out), score


def predict_from_outputs(out):
    out = np.atleast_2d(out)
    return (out[:, 1] > out[:, 0]).astype(np.int64)


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 50
    batch_size: int = 64
    seed: int = 0
    dtype: str = "float32"
    scaling: str = "unit-energy"  # "standard" | "unit-energy" | "none"

    def validate(self):
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.scaling not in SCALINGS:
            raise ConfigError(f"scaling must be one of {SCALINGS}, got {self.scaling!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)  # one dict per epoch
    seed: int = 0
    checkpoint: str = ""

    @property
    def final(self):
        return self.epochs[-1]

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)


class Adam:
    def __init__(self, params, lr, beta1, beta2, eps):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name in PARAM_NAMES:
            g = grads[name].astype(params[name].dtype, copy=False)
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            np.multiply(g, g, out=g)
            g *= 1.0 - self.b2
            v += g
            # g is reused as scratch for the step
            np.divide(v, c2, out=g)
            np.sqrt(g, out=g)
            g += self.eps
            np.divide(m, g, out=g)
            g *= self.lr / c1
            params[name] -= g


def fit_scaler(x, scaling="standard"):
    """Per-coefficient ``(mean, scale)`` from training rows.

    ``"unit-energy"`` additionally divides by sqrt(N) so a standardized vector
    has unit expected squared norm; with all N inputs at unit variance the
    first Adam steps on the wide dense layer otherwise saturate the outputs.
    """
    n = x.shape[1]
    if scaling == "none":
        return np.zeros(n), np.ones(n)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std < 1e-12] = 1.0
    if scaling == "unit-energy":
        std = std * np.sqrt(n)
    return mean, std


def evaluate(model, features, labels, batch_size=512):
    """``(mean loss, accuracy)`` in inference mode."""
    if len(labels) == 0:
        return float("nan"), float("nan")
    out = forward(model, features, batch_size=batch_size)
    acc = float(np.mean(predict_from_outputs(out) == np.asarray(labels)))
    return loss(out, one_hot(labels, model.arch.n_outputs)), acc


def train(model, dataset, cfg, callback=None):
    """Minibatch Adam on the training split. Returns ``(trained model, report)``.

    The per-coefficient scaler is fitted on the training split only and kept
    in the returned model.
    """
    cfg.validate()
    x_tr, y_tr = dataset.train
    x_te, y_te = dataset.test
    if len(y_tr) == 0:
        raise ConfigError("dataset has no training rows")
    dtype = np.dtype(cfg.dtype)
    model = model.astype(dtype)
    model.scaler_mean, model.scaler_std = fit_scaler(x_tr, cfg.scaling)
    xs = model.standardize(x_tr).astype(dtype)
    targets = one_hot(y_tr, model.arch.n_outputs).astype(dtype)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
    report = TrainReport(seed=cfg.seed)
    n = len(y_tr)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            cache = forward_cache(model, xs[idx], train=True, rng=rng)
            batch_loss = loss(cache.out, targets[idx])
            if not np.isfinite(batch_loss) or not np.all(np.isfinite(cache.out)):
                raise DivergenceError(epoch, bi, batch_loss)
            d_z4 = loss_grad_z(cache.out, targets[idx], model.arch.output).astype(dtype)
            grads, _ = backward(model, cache, d_z4)
            opt.step(model.params, grads)
        tr_loss, tr_acc = evaluate(model, x_tr, y_tr)
        te_loss, te_acc = evaluate(model, x_te, y_te)
        if not np.isfinite(tr_loss):
            raise DivergenceError(epoch, "eval", tr_loss)
        row = {"epoch": epoch, "train_loss": tr_loss, "train_acc": tr_acc, "test_loss": te_loss, "test_acc": te_acc}
        report.epochs.append(row)
        log.info("epoch %d: train loss %.4f acc %.4f | test loss %.4f acc %.4f", epoch, tr_loss, tr_acc, te_loss, te_acc)
        if callback:
            callback(row)
    return model, report


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model, path, seed=0, spectrum_version="", extra=None):
    meta = {
        "version": CHECKPOINT_VERSION,
        "arch": asdict(model.arch),
        "dtype": model.dtype.name,
        "seed": int(seed),
        "spectrum_version": spectrum_version,
        "extra": extra or {},
    }
    arrays = {name: model.params[name] for name in PARAM_NAMES}
    if model.scaler_mean is not None:
        arrays["scaler_mean"] = model.scaler_mean.astype(np.float64)
        arrays["scaler_std"] = model.scaler_std.astype(np.float64)
    write_container(path, "checkpoint", meta, arrays)


def load_checkpoint(path, spectrum_version=None):
    """Returns ``(model, meta)``; checks the spectrum tag when one is given."""
    meta, arrays = read_container(path, kind="checkpoint")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CompatibilityError(f"checkpoint version {meta.get('version')!r} != {CHECKPOINT_VERSION!r}")
    if spectrum_version is not None and meta["spectrum_version"] != spectrum_version:
        raise CompatibilityError(
            f"checkpoint trained on spectrum {meta['spectrum_version']!r}, current is {spectrum_version!r}"
        )
    arch_d = dict(meta["arch"])
    arch_d["channels"] = tuple(arch_d["channels"])
    arch = CnnArch(**arch_d)
    shapes = param_shapes(arch)
    params = {}
    for name in PARAM_NAMES:
        if tuple(arrays[name].shape) != shapes[name]:
            raise CompatibilityError(f"parameter {name} has shape {arrays[name].shape}, expected {shapes[name]}")
        params[name] = arrays[name]
    return CnnModel(arch, params, arrays.get("scaler_mean"), arrays.get("scaler_std")), meta


def with_dropout(arch, rate):
    return replace(arch, dropout=rate)
