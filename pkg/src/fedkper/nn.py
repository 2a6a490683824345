"""Dense ReLU classifier with hand-written backpropagation.

Everything here runs in float64. Parameters live in one flat vector
(:class:`ModelParams`) together with a manifest of named layer shapes, which
is what the federated code adds, scales and averages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, NumericError, ValidationError

DEFAULT_HIDDEN = (64, 64)
DEFAULT_LAMBDA_CAP = 10.0
DEFAULT_MAX_GRAD_NORM = 5.0

Manifest = tuple[tuple[str, tuple[int, ...]], ...]


def _normalize_manifest(manifest) -> Manifest:
    out = []
    for name, shape in manifest:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise DimensionError(f"layer {name!r} has non-positive shape {shape}")
        out.append((str(name), shape))
    return tuple(out)


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Immutable flat parameter vector plus its layer manifest."""

    values: np.ndarray
    manifest: Manifest

    def __post_init__(self):
        manifest = _normalize_manifest(self.manifest)
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        expected = sum(math.prod(shape) for _, shape in manifest)
        if values.size != expected:
            raise DimensionError(
                f"parameter vector has {values.size} entries, manifest needs {expected}"
            )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "manifest", manifest)

    @classmethod
    def zeros(cls, manifest) -> ModelParams:
        manifest = _normalize_manifest(manifest)
        size = sum(math.prod(shape) for _, shape in manifest)
        return cls(np.zeros(size), manifest)

    @classmethod
    def from_arrays(cls, named: Sequence[tuple[str, np.ndarray]]) -> ModelParams:
        manifest = tuple((name, np.shape(arr)) for name, arr in named)
        if not named:
            return cls(np.zeros(0), ())
        values = np.concatenate([np.asarray(arr, dtype=np.float64).reshape(-1) for _, arr in named])
        return cls(values, manifest)

    def arrays(self) -> dict[str, np.ndarray]:
        """Read-only views of each layer, reshaped per the manifest."""
        out = {}
        offset = 0
        for name, shape in self.manifest:
            size = math.prod(shape)
            out[name] = self.values[offset:offset + size].reshape(shape)
            offset += size
        return out

    def with_values(self, values: np.ndarray) -> ModelParams:
        return ModelParams(values, self.manifest)

    def _check(self, other: ModelParams) -> None:
        if not isinstance(other, ModelParams):
            raise TypeError(f"expected ModelParams, got {type(other).__name__}")
        if other.manifest != self.manifest:
            raise DimensionError("parameter manifests differ")

    def __add__(self, other: ModelParams) -> ModelParams:
        self._check(other)
        return self.with_values(self.values + other.values)

    def __sub__(self, other: ModelParams) -> ModelParams:
        self._check(other)
        return self.with_values(self.values - other.values)

    def __mul__(self, scalar: float) -> ModelParams:
        return self.with_values(self.values * float(scalar))

    __rmul__ = __mul__

    def __neg__(self) -> ModelParams:
        return self.with_values(-self.values)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def identical(self, other: ModelParams) -> bool:
        """Bit-exact equality of manifest and values."""
        return self.manifest == other.manifest and self.values.tobytes() == other.values.tobytes()

    def __len__(self) -> int:
        return self.values.size


def mlp_manifest(layer_sizes: Sequence[int], bias: bool = True) -> Manifest:
    """Manifest for a dense network with the given widths, input first."""
    if len(layer_sizes) < 2:
        raise DimensionError("need at least an input and an output width")
    manifest = []
    for i, (fan_in, fan_out) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
        manifest.append((f"dense{i}.weight", (fan_in, fan_out)))
        if bias:
            manifest.append((f"dense{i}.bias", (fan_out,)))
    return _normalize_manifest(manifest)


def init_mlp(layer_sizes: Sequence[int], seed: int, owner: int = 0) -> ModelParams:
    """Glorot-uniform weights and zero biases.

    Each layer draws from its own stream keyed by ``(seed, owner, layer)``,
    so the result does not depend on how many layers precede it.
    """
    named = []
    for i, (fan_in, fan_out) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(owner), i]))
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        named.append((f"dense{i}.weight", rng.uniform(-limit, limit, size=(fan_in, fan_out))))
        named.append((f"dense{i}.bias", np.zeros(fan_out)))
    return ModelParams.from_arrays(named)


def _layers(params: ModelParams):
    """Group the manifest into (weight, bias-or-None) pairs in order."""
    arrays = params.arrays()
    layers = []
    pending = None
    for name, shape in params.manifest:
        if len(shape) == 2:
            if pending is not None:
                layers.append((pending, None))
            pending = name
        elif len(shape) == 1 and pending is not None:
            if arrays[pending].shape[1] != shape[0]:
                raise DimensionError(f"bias {name!r} does not match weight {pending!r}")
            layers.append((pending, name))
            pending = None
        else:
            raise DimensionError(f"cannot interpret manifest entry {name!r} with shape {shape}")
    if pending is not None:
        layers.append((pending, None))
    for (w0, _), (w1, _) in zip(layers[:-1], layers[1:]):
        if arrays[w0].shape[1] != arrays[w1].shape[0]:
            raise DimensionError(f"layer {w0!r} output does not feed {w1!r}")
    return arrays, layers


def _as_batch(params: ModelParams, batch) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise DimensionError(f"batch must be 2-d, got shape {x.shape}")
    return x


def _forward_cache(params: ModelParams, batch):
    arrays, layers = _layers(params)
    x = _as_batch(params, batch)
    if not layers:
        raise DimensionError("model has no layers")
    in_width = arrays[layers[0][0]].shape[0]
    if x.shape[1] != in_width:
        raise DimensionError(f"batch has {x.shape[1]} columns, input layer expects {in_width}")
    inputs = []
    h = x
    for i, (wname, bname) in enumerate(layers):
        inputs.append(h)
        z = h @ arrays[wname]
        if bname is not None:
            z = z + arrays[bname]
        h = np.maximum(z, 0.0) if i < len(layers) - 1 else z
    return h, (arrays, layers, inputs)


def forward(params: ModelParams, batch) -> np.ndarray:
    """Logits of shape (rows, classes); ReLU between layers, none on output."""
    logits, _ = _forward_cache(params, batch)
    return logits


def _backward(params: ModelParams, cache, dlogits: np.ndarray) -> ModelParams:
    arrays, layers, inputs = cache
    grads: dict[str, np.ndarray] = {}
    delta = dlogits
    for i in range(len(layers) - 1, -1, -1):
        wname, bname = layers[i]
        h = inputs[i]
        grads[wname] = h.T @ delta
        if bname is not None:
            grads[bname] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ arrays[wname].T) * (h > 0.0)
    return ModelParams.from_arrays([(name, grads[name]) for name, _ in params.manifest])


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def ce_loss(logits, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the logits."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels).reshape(-1)
    n, c = logits.shape
    if labels.shape[0] != n:
        raise DimensionError(f"{labels.shape[0]} labels for {n} logit rows")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(np.mod(labels, 1) == 0):
            raise ValidationError("labels must be integer class indices")
        labels = labels.astype(np.int64)
    if n and (labels.min() < 0 or labels.max() >= c):
        raise ValidationError(f"labels must lie in [0, {c})")
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = -float(logp[rows, labels].mean())
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return max(loss, 0.0), grad / n


def kd_loss(teacher, student) -> tuple[float, np.ndarray]:
    """Mean KL(softmax(teacher) || softmax(student)) and the student-logit gradient.

    Temperature is 1.
    """
    teacher = np.atleast_2d(np.asarray(teacher, dtype=np.float64))
    student = np.atleast_2d(np.asarray(student, dtype=np.float64))
    if teacher.shape != student.shape:
        raise DimensionError(f"teacher {teacher.shape} and student {student.shape} differ")
    n = teacher.shape[0]
    log_t = log_softmax(teacher)
    log_s = log_softmax(student)
    p_t = np.exp(log_t)
    kl = float((p_t * (log_t - log_s)).sum(axis=1).mean())
    grad = (np.exp(log_s) - p_t) / n
    return max(kl, 0.0), grad


def adaptive_lambda(global_ce: float, cap: float = DEFAULT_LAMBDA_CAP) -> float:
    """Trust in the global teacher: min(1 / global_ce, cap)."""
    if global_ce < 0 or math.isnan(global_ce):
        raise ValidationError(f"global cross-entropy must be >= 0, got {global_ce}")
    if global_ce == 0 or 1.0 / global_ce > cap:
        return float(cap)
    return 1.0 / global_ce


@dataclass(frozen=True)
class LossBreakdown:
    ce: float
    kd: float
    lam: float
    prox: float
    total: float
    grad: ModelParams


def local_objective(
    params: ModelParams,
    global_params: ModelParams,
    batch,
    labels,
    *,
    distill: bool = False,
    mu: float = 0.0,
    lambda_cap: float = DEFAULT_LAMBDA_CAP,
) -> LossBreakdown:
    """Client loss: CE, optionally plus adaptive KD and/or a proximal term.

    The global model is a constant here: it supplies teacher logits and the
    proximal anchor but receives no gradient.
    """
    if params.manifest != global_params.manifest:
        raise DimensionError("student and global manifests differ")
    logits, cache = _forward_cache(params, batch)
    ce, dlogits = ce_loss(logits, labels)
    kd = lam = 0.0
    if distill:
        teacher = forward(global_params, batch)
        teacher_ce, _ = ce_loss(teacher, labels)
        lam = adaptive_lambda(teacher_ce, lambda_cap)
        kd, dkd = kd_loss(teacher, logits)
        dlogits = dlogits + lam * dkd
    grad = _backward(params, cache, dlogits)
    total = ce + lam * kd
    prox = 0.0
    # mu == 0 must leave the update bit-identical to plain CE
    if mu:
        diff = params.values - global_params.values
        prox = 0.5 * mu * float(diff @ diff)
        total += prox
        grad = grad.with_values(grad.values + mu * diff)
    return LossBreakdown(ce=ce, kd=kd, lam=lam, prox=prox, total=total, grad=grad)


def fedkper_loss(student_params, global_params, batch, labels, lambda_cap=DEFAULT_LAMBDA_CAP):
    return local_objective(
        student_params, global_params, batch, labels, distill=True, lambda_cap=lambda_cap
    )


def fedprox_loss(params, global_params, batch, labels, mu):
    return local_objective(params, global_params, batch, labels, mu=mu)


def sgd_step(params: ModelParams, grad: ModelParams, lr: float, max_norm: float) -> ModelParams:
    """One SGD update with global L2 clipping of the gradient."""
    params._check(grad)
    if lr <= 0 or max_norm <= 0:
        raise ValidationError("lr and max_norm must be positive")
    g = grad.values
    if not np.all(np.isfinite(g)):
        raise NumericError("gradient contains non-finite entries")
    norm = float(np.linalg.norm(g))
    if norm > max_norm:
        g = g * (max_norm / norm)
    return params.with_values(params.values - lr * g)


def finite_diff_grad(
    loss: Callable[[ModelParams], float], params: ModelParams, epsilon: float = 1e-5
) -> ModelParams:
    """Central-difference gradient, one coordinate at a time."""
    if epsilon <= 0:
        raise ValidationError("epsilon must be positive")
    base = params.values
    grad = np.empty_like(base)
    work = base.copy()
    for i in range(base.size):
        work[i] = base[i] + epsilon
        up = loss(params.with_values(work))
        work[i] = base[i] - epsilon
        down = loss(params.with_values(work))
        work[i] = base[i]
        grad[i] = (up - down) / (2.0 * epsilon)
    return params.with_values(grad)


def predict(params: ModelParams, batch) -> np.ndarray:
    return forward(params, batch).argmax(axis=1)


def accuracy(params: ModelParams, features, labels) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValidationError("cannot score an empty set")
    return float((predict(params, features) == labels).mean())
