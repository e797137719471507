"""Dense neural-network stack: float32 tensors with reverse-mode gradients.

Everything is built from a handful of primitive ops (affine map, LSTM gate
arithmetic, layer normalization, elementwise activations) recorded on a tape
so one backward() call yields exact gradients, including backpropagation
through time when a recurrent step is applied repeatedly.  The only dtype is
32-bit IEEE-754; arrays are row-major throughout.

No general-purpose autodiff: each op knows its own adjoint and nothing else.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float32
LAYERNORM_EPS = 1e-5


class Tensor:
    """A float32 array plus the bookkeeping needed for reverse mode.

    ``parents`` and ``backward_fn`` are filled in by the op that produced the
    tensor; leaves (parameters, inputs) have neither.  ``grad`` accumulates
    d(loss)/d(self) during backward().
    """

    __slots__ = ("data", "grad", "parents", "backward_fn")

    def __init__(self, data, parents=(), backward_fn=None):
        arr = np.asarray(data, dtype=DTYPE)
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError("non-finite tensor data")
        self.data = arr
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn

    @property
    def shape(self):
        return self.data.shape

    def add_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE)
        else:
            self.grad = self.grad + np.asarray(g, dtype=DTYPE)


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss.

    Walks the recorded graph once in reverse topological order; every
    reachable tensor ends up with ``grad`` populated (leaves included).
    """
    if loss.data.size != 1:
        raise ValueError("backward() needs a scalar loss")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# Primitive ops
# ---------------------------------------------------------------------------

def constant(value) -> Tensor:
    return Tensor(value)


def linear_forward(p: "LinearParams", x: Tensor) -> Tensor:
    """y = x Wᵀ + b for weight [out, in] and x [batch, in]."""
    if x.data.ndim != 2 or x.data.shape[1] != p.weight.data.shape[1]:
        raise ValueError(
            f"linear_forward: x {x.data.shape} vs weight {p.weight.data.shape}")
    w, b = p.weight, p.bias
    out = Tensor(x.data @ w.data.T + b.data, parents=(x, w, b))

    def back(g):
        x.add_grad(g @ w.data)
        w.add_grad(g.T @ x.data)
        b.add_grad(g.sum(axis=0))
    out.backward_fn = back
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"add: shape mismatch {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data + b.data, parents=(a, b))

    def back(g):
        a.add_grad(g)
        b.add_grad(g)
    out.backward_fn = back
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"mul: shape mismatch {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data * b.data, parents=(a, b))

    def back(g):
        a.add_grad(g * b.data)
        b.add_grad(g * a.data)
    out.backward_fn = back
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0), parents=(x,))

    def back(g):
        x.add_grad(g * (x.data > 0))
    out.backward_fn = back
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data.astype(np.float64)))
    out = Tensor(s, parents=(x,))

    def back(g):
        x.add_grad(g * out.data * (1.0 - out.data))
    out.backward_fn = back
    return out


def tanh(x: Tensor) -> Tensor:
    out = Tensor(np.tanh(x.data), parents=(x,))

    def back(g):
        x.add_grad(g * (1.0 - out.data * out.data))
    out.backward_fn = back
    return out


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two [batch, *] tensors along the last axis."""
    if a.data.shape[:-1] != b.data.shape[:-1]:
        raise ValueError("concat: leading dims differ")
    na = a.data.shape[-1]
    out = Tensor(np.concatenate([a.data, b.data], axis=-1), parents=(a, b))

    def back(g):
        a.add_grad(g[..., :na])
        b.add_grad(g[..., na:])
    out.backward_fn = back
    return out


def layernorm(x: Tensor, gain: Tensor, shift: Tensor,
              eps: float = LAYERNORM_EPS) -> Tensor:
    """Per-row standardization to mean 0 / variance 1, then affine gain/shift."""
    if x.data.ndim != 2 or x.data.shape[1] < 2:
        raise ValueError("layernorm expects [batch, d] with d >= 2")
    x64 = x.data.astype(np.float64)
    mu = x64.mean(axis=1, keepdims=True)
    var = x64.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x64 - mu) * inv
    out = Tensor(xhat * gain.data + shift.data, parents=(x, gain, shift))

    def back(g):
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
        x.add_grad((dxhat - m1 - xhat * m2) * inv)
        gain.add_grad((g * xhat).sum(axis=0))
        shift.add_grad(g.sum(axis=0))
    out.backward_fn = back
    return out


def take_columns(x: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one column per row: out[i] = x[i, idx[i]].  Shape [batch]."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(x.data.shape[0])
    out = Tensor(x.data[rows, idx], parents=(x,))

    def back(g):
        gx = np.zeros_like(x.data)
        gx[rows, idx] = g
        x.add_grad(gx)
    out.backward_fn = back
    return out


def vstack(parts) -> Tensor:
    """Stack [batch_i, d] tensors along axis 0; gradient splits back."""
    parts = list(parts)
    if not parts:
        raise ValueError("vstack of nothing")
    out = Tensor(np.concatenate([p.data for p in parts], axis=0),
                 parents=tuple(parts))
    sizes = [p.data.shape[0] for p in parts]

    def back(g):
        at = 0
        for p, n in zip(parts, sizes):
            p.add_grad(g[at:at + n])
            at += n
    out.backward_fn = back
    return out


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather whole rows: out[i] = x[idx[i]].  Rows may repeat; the backward
    pass scatter-adds, so a row used twice accumulates both gradients."""
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(x.data[idx], parents=(x,))

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        x.add_grad(gx)
    out.backward_fn = back
    return out


def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error against a constant target."""
    target = np.asarray(target, dtype=DTYPE)
    diff = pred.data - target
    out = Tensor(np.float32(np.mean(diff.astype(np.float64) ** 2)),
                 parents=(pred,))
    scale = 2.0 / diff.size

    def back(g):
        pred.add_grad(g * scale * diff)
    out.backward_fn = back
    return out


def mean_all(x: Tensor) -> Tensor:
    out = Tensor(np.float32(x.data.astype(np.float64).mean()), parents=(x,))
    scale = 1.0 / x.data.size

    def back(g):
        x.add_grad(np.full_like(x.data, g * scale))
    out.backward_fn = back
    return out


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.float32(x.data.astype(np.float64).sum()), parents=(x,))

    def back(g):
        x.add_grad(np.full_like(x.data, g))
    out.backward_fn = back
    return out


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

@dataclass
class LinearParams:
    weight: Tensor                 # [out, in]
    bias: Tensor                   # [out]

    def tensors(self):
        return [self.weight, self.bias]


@dataclass
class LstmParams:
    """One gate quartet (input, forget, cell candidate, output).

    Each gate has an input-to-hidden weight [H, in], a hidden-to-hidden
    weight [H, H] and a bias [H].
    """
    wx_i: Tensor; wh_i: Tensor; b_i: Tensor
    wx_f: Tensor; wh_f: Tensor; b_f: Tensor
    wx_g: Tensor; wh_g: Tensor; b_g: Tensor
    wx_o: Tensor; wh_o: Tensor; b_o: Tensor
    hidden_size: int = 0

    def tensors(self):
        return [self.wx_i, self.wh_i, self.b_i, self.wx_f, self.wh_f, self.b_f,
                self.wx_g, self.wh_g, self.b_g, self.wx_o, self.wh_o, self.b_o]


@dataclass
class LayerNormParams:
    gain: Tensor                   # [d]
    shift: Tensor                  # [d]

    def tensors(self):
        return [self.gain, self.shift]


def init_linear(out_dim: int, in_dim: int, rng: np.random.Generator) -> LinearParams:
    bound = 1.0 / np.sqrt(in_dim)
    return LinearParams(
        weight=Tensor(rng.uniform(-bound, bound, size=(out_dim, in_dim))),
        bias=Tensor(rng.uniform(-bound, bound, size=out_dim)),
    )


def init_lstm(in_dim: int, hidden: int, rng: np.random.Generator) -> LstmParams:
    """Uniform ±1/√fan_in weights; forget-gate bias starts at +1."""
    def w(rows, cols):
        bound = 1.0 / np.sqrt(cols)
        return Tensor(rng.uniform(-bound, bound, size=(rows, cols)))

    def b(fill=0.0):
        return Tensor(np.full(hidden, fill, dtype=DTYPE))

    return LstmParams(
        wx_i=w(hidden, in_dim), wh_i=w(hidden, hidden), b_i=b(),
        wx_f=w(hidden, in_dim), wh_f=w(hidden, hidden), b_f=b(1.0),
        wx_g=w(hidden, in_dim), wh_g=w(hidden, hidden), b_g=b(),
        wx_o=w(hidden, in_dim), wh_o=w(hidden, hidden), b_o=b(),
        hidden_size=hidden,
    )


def init_layernorm(dim: int) -> LayerNormParams:
    return LayerNormParams(gain=Tensor(np.ones(dim, dtype=DTYPE)),
                           shift=Tensor(np.zeros(dim, dtype=DTYPE)))


def _gate(x: Tensor, h: Tensor, wx: Tensor, wh: Tensor, b: Tensor) -> Tensor:
    """Fused gate preactivation x wxᵀ + h whᵀ + b as a single taped node."""
    out = Tensor(x.data @ wx.data.T + h.data @ wh.data.T + b.data,
                 parents=(x, h, wx, wh, b))

    def back(g):
        x.add_grad(g @ wx.data)
        h.add_grad(g @ wh.data)
        wx.add_grad(g.T @ x.data)
        wh.add_grad(g.T @ h.data)
        b.add_grad(g.sum(axis=0))
    out.backward_fn = back
    return out


def lstm_step(p: LstmParams, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
    """Standard LSTM cell; x [batch, in], h and c [batch, H]."""
    i = sigmoid(_gate(x, h, p.wx_i, p.wh_i, p.b_i))
    f = sigmoid(_gate(x, h, p.wx_f, p.wh_f, p.b_f))
    g = tanh(_gate(x, h, p.wx_g, p.wh_g, p.b_g))
    o = sigmoid(_gate(x, h, p.wx_o, p.wh_o, p.b_o))
    c_next = add(mul(f, c), mul(i, g))
    h_next = mul(o, tanh(c_next))
    return h_next, c_next


def lstm_sequence(p: LstmParams, xs, h: Tensor, c: Tensor):
    """Chain lstm_step over a list of inputs; returns (h, c) after the last."""
    for x in xs:
        h, c = lstm_step(p, x, h, c)
    return h, c


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptState:
    """RMSProp accumulator; one slot per parameter, positionally aligned."""
    acc: list = field(default_factory=list)
    rho: float = 0.99
    eps: float = 1e-8
    lr: float = 2e-5

    @staticmethod
    def for_params(params, lr=2e-5, rho=0.99, eps=1e-8) -> "OptState":
        return OptState(acc=[np.zeros_like(p.data) for p in params],
                        rho=rho, eps=eps, lr=lr)


def rmsprop_update(params, grads, opt: OptState):
    """acc ← ρ·acc + (1−ρ)·g²;  θ ← θ − lr·g/√(acc + ε).  Pure: returns new
    parameter arrays and a new OptState; inputs are never mutated."""
    new_params = []
    new_acc = []
    for p, g, a in zip(params, grads, opt.acc):
        g = np.zeros_like(p) if g is None else np.asarray(g, dtype=DTYPE)
        a2 = opt.rho * a + (1.0 - opt.rho) * g * g
        new_params.append((p - opt.lr * g / np.sqrt(a2 + opt.eps)).astype(DTYPE))
        new_acc.append(a2.astype(DTYPE))
    return new_params, OptState(acc=new_acc, rho=opt.rho, eps=opt.eps, lr=opt.lr)


def clip_global_norm(grads, max_norm: float = 10.0):
    """Scale the whole gradient list so its global L2 norm is ≤ max_norm."""
    total = 0.0
    for g in grads:
        if g is not None:
            total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    norm = np.sqrt(total)
    if norm <= max_norm or norm == 0.0:
        return list(grads), norm
    scale = DTYPE(max_norm / norm)
    return [None if g is None else g * scale for g in grads], norm


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = "peelsim-ckpt 1"


def save_checkpoint(path, header: dict, named_tensors) -> None:
    """Text header + raw little-endian float32 blob, in declared order.

    header carries architecture dims / config hash / seed / step; the tensor
    list (name, shape) is appended to it so loading can validate before
    touching the blob.
    """
    names, arrays = [], []
    for name, arr in named_tensors:
        names.append([name, list(np.asarray(arr).shape)])
        arrays.append(np.ascontiguousarray(arr, dtype="<f4"))
    doc = dict(header)
    doc["tensors"] = names
    with open(path, "wb") as fh:
        fh.write((CKPT_MAGIC + "\n").encode())
        fh.write((json.dumps(doc, sort_keys=True) + "\n").encode())
        for arr in arrays:
            fh.write(arr.tobytes())


def load_checkpoint(path) -> tuple[dict, dict]:
    """Returns (header, {name: float32 array}); bit-exact round trip."""
    with open(path, "rb") as fh:
        magic = fh.readline().decode().rstrip("\n")
        if magic != CKPT_MAGIC:
            raise ValueError(f"not a checkpoint file: {magic!r}")
        header = json.loads(fh.readline().decode())
        blob = fh.read()
    tensors = {}
    offset = 0
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(blob):
            raise ValueError("checkpoint blob shorter than declared tensors")
        tensors[name] = np.frombuffer(blob[offset:end], dtype="<f4").reshape(shape).copy()
        offset = end
    if offset != len(blob):
        raise ValueError("checkpoint blob longer than declared tensors")
    return header, tensors


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------

def finite_difference_check(loss_fn, params, step: float = 1e-3) -> float:
    """Relative error of the analytic gradient vs central differences.

    loss_fn() must rebuild the forward pass from the current parameter data
    and return the scalar loss Tensor.  The gradients of all checked
    parameters are compared as one concatenated vector:
    ‖fd − analytic‖ / max(‖fd‖ + ‖analytic‖, 1e-8).  The vector norm is
    the only definition that stays meaningful in 32-bit: the loss is
    quantized to float32, so a central difference carries noise of order
    ulp(loss)/(2·step) per entry, and parameters whose true gradient sits
    below that floor (e.g. weights upstream of a layer norm, which is
    scale-invariant to first order) would drown any per-entry ratio.
    """
    zero_grads(params)
    loss = loss_fn()
    backward(loss)
    an_parts = []
    fd_parts = []
    for p in params:
        an = np.zeros_like(p.data) if p.grad is None else p.grad
        an_parts.append(an.reshape(-1).astype(np.float64))
        flat = p.data.reshape(-1)
        fd = np.zeros(flat.size)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + DTYPE(step)
            up = float(loss_fn().data)
            flat[i] = keep - DTYPE(step)
            down = float(loss_fn().data)
            flat[i] = keep
            fd[i] = (up - down) / (2.0 * step)
        fd_parts.append(fd)
    an_all = np.concatenate(an_parts)
    fd_all = np.concatenate(fd_parts)
    num = float(np.linalg.norm(fd_all - an_all))
    den = max(float(np.linalg.norm(fd_all)) + float(np.linalg.norm(an_all)),
              1e-8)
    return num / den
