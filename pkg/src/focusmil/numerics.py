"""Dense numeric substrate: forward ops, hand-derived backward rules, AdamW,
and a finite-difference gradient checker.

There is no autodiff graph. The model is a fixed pipeline, so every forward
op here has an explicit backward twin and the pipeline's backward pass is a
hand-written mirror of its forward pass. All math runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MissingGradient, NonFiniteValue, ShapeMismatch


class Tensor2:
    """2-D parameter carrier: row-major float64 values plus optional gradient."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ShapeMismatch(f"Tensor2 needs 2-D data, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteValue("Tensor2 initialized with non-finite values")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def accumulate(self, g: np.ndarray) -> None:
        """Add ``g`` into the gradient buffer (additive accumulation)."""
        if not self.requires_grad:
            return
        g = np.asarray(g, dtype=np.float64)
        if g.shape != self.data.shape:
            raise ShapeMismatch(f"grad shape {g.shape} != param shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor2(shape={self.data.shape}, requires_grad={self.requires_grad})"


class ParamStore:
    """Named map of parameters; every parameter registered exactly once."""

    def __init__(self):
        self._params: dict[str, Tensor2] = {}

    def register(self, name: str, tensor: Tensor2) -> Tensor2:
        if name in self._params:
            raise ValueError(f"parameter {name!r} registered twice")
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor2:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def trainable(self) -> list[tuple[str, Tensor2]]:
        return [(n, p) for n, p in self._params.items() if p.requires_grad]

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self._params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for n, v in snap.items():
            self._params[n].data[...] = v


def _check_finite(out: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(out).all():
        raise NonFiniteValue(f"{op} produced non-finite values")
    return out


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"cannot multiply {a.shape} by {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a @ b
    return _check_finite(out, "matmul")


def matmul_backward(d_out: np.ndarray, a: np.ndarray, b: np.ndarray):
    """d(a@b) -> (da, db)."""
    return d_out @ b.T, a.T @ d_out


def row_softmax(x: np.ndarray) -> np.ndarray:
    if x.ndim != 2:
        raise ShapeMismatch(f"row_softmax needs a 2-D input, got {x.shape}")
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return _check_finite(e / e.sum(axis=1, keepdims=True), "row_softmax")


def row_softmax_backward(d_p: np.ndarray, p: np.ndarray) -> np.ndarray:
    """dx given dp and the forward output p (row-wise Jacobian product)."""
    dot = (d_p * p).sum(axis=1, keepdims=True)
    return p * (d_p - dot)


def layer_norm(x: np.ndarray, scale: np.ndarray, shift: np.ndarray,
               eps: float = 1e-5):
    """Normalize each row over the feature axis, then apply the affine map.

    Returns (y, cache); feed the cache to :func:`layer_norm_backward`.
    """
    scale = scale.reshape(-1)
    shift = shift.reshape(-1)
    if x.ndim != 2 or scale.shape[0] != x.shape[1] or shift.shape[0] != x.shape[1]:
        raise ShapeMismatch("layer_norm shape mismatch")
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    y = _check_finite(xhat * scale + shift, "layer_norm")
    return y, (xhat, inv, scale)


def layer_norm_backward(d_y: np.ndarray, cache):
    xhat, inv, scale = cache
    n = xhat.shape[1]
    d_scale = (d_y * xhat).sum(axis=0)
    d_shift = d_y.sum(axis=0)
    d_xhat = d_y * scale
    # Row-wise: dx = (1/n) * inv * (n*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat))
    s1 = d_xhat.sum(axis=1, keepdims=True)
    s2 = (d_xhat * xhat).sum(axis=1, keepdims=True)
    d_x = (inv / n) * (n * d_xhat - s1 - xhat * s2)
    return d_x, d_scale, d_shift


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max()
    return logits - m - np.log(np.exp(logits - m).sum())


def cross_entropy(logits: np.ndarray, label: int):
    """Negative log-likelihood of ``label``; returns (loss, dlogits)."""
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    s = logits.shape[0]
    if s < 2:
        raise ShapeMismatch("cross_entropy needs at least 2 classes")
    if not (0 <= label < s):
        raise ValueError(f"label {label} out of range for {s} classes")
    logp = log_softmax(logits)
    loss = -logp[label]
    grad = np.exp(logp)
    grad[label] -= 1.0
    return float(loss), grad


class AdamW:
    """Decoupled weight-decay Adam over a ParamStore.

    step() applies one update to every trainable parameter, increments the
    step counter, and clears the gradients.
    """

    def __init__(self, params: ParamStore, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {n: np.zeros_like(p.data) for n, p in params.trainable()}
        self._v = {n: np.zeros_like(p.data) for n, p in params.trainable()}

    def step(self) -> None:
        grads = {}
        for name, p in self.params.trainable():
            if p.grad is None:
                raise MissingGradient(name)
            grads[name] = p.grad
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.trainable():
            g = grads[name]
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        self.params.zero_grads()


def adamw_step(opt: AdamW) -> None:
    opt.step()


@dataclass
class GradCheckEntry:
    name: str
    coord: tuple[int, int]
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    tolerance: float
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.rel_err < self.tolerance for e in self.entries)

    def failures(self) -> list[GradCheckEntry]:
        return [e for e in self.entries if e.rel_err >= self.tolerance]

    def worst(self) -> float:
        return max((e.rel_err for e in self.entries), default=0.0)

    def by_param(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for e in self.entries:
            out[e.name] = max(out.get(e.name, 0.0), e.rel_err)
        return out


def grad_check(closure, params: ParamStore, tolerance: float = 1e-4,
               max_coords: int = 64, h: float = 1e-5, seed: int = 0) -> GradCheckReport:
    """Compare the closure's analytic gradients against central differences.

    ``closure()`` must run forward+backward deterministically, accumulate
    gradients into ``params``, and return the scalar loss. At most
    ``max_coords`` coordinates per tensor are probed (seeded subsample).
    Frozen tensors are skipped. The report carries every probed entry;
    nothing raises on failure.
    """
    rng = np.random.default_rng(seed)
    params.zero_grads()
    closure()
    analytic = {}
    for name, p in params.trainable():
        if p.grad is None:
            raise MissingGradient(name)
        analytic[name] = p.grad.copy()
    params.zero_grads()

    report = GradCheckReport(tolerance=tolerance)
    for name, p in params.trainable():
        size = p.data.size
        if size <= max_coords:
            flat_coords = np.arange(size)
        else:
            flat_coords = np.sort(rng.choice(size, size=max_coords, replace=False))
        flat = p.data.reshape(-1)
        for fc in flat_coords:
            orig = flat[fc]
            flat[fc] = orig + h
            f_plus = closure()
            params.zero_grads()
            flat[fc] = orig - h
            f_minus = closure()
            params.zero_grads()
            flat[fc] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            ana = analytic[name].reshape(-1)[fc]
            rel = abs(ana - numeric) / max(1.0, abs(numeric))
            coord = (int(fc) // p.cols, int(fc) % p.cols)
            report.entries.append(GradCheckEntry(name, coord, float(ana), float(numeric), float(rel)))
    return report
