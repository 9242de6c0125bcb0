"""Tiny reverse-mode array engine and the layers built on it.

Everything operates on single samples: feature maps are (C, H, W) float64
arrays with no batch axis.  Each op returns a node carrying the forward
value and a closure that scatters the output gradient onto its parents, so
a full backward pass is a reversed topological walk.  Parameters are plain
leaf nodes; an optimizer reads ``.grad`` and writes ``.data``.

Values at rest in parameters are kept on the float32 grid (see
``quantize_f32``) so that raw-float32 checkpoints round-trip bitwise.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError


class Tensor:
    """A value in the computation graph."""

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def accumulate(self, g):
        self.grad = g if self.grad is None else self.grad + g

    def backward(self, seed=None):
        """Backpropagate from this node; ``seed`` defaults to ones."""
        topo, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        if seed is None:
            seed = np.ones_like(self.data)
        self.accumulate(np.asarray(seed, dtype=np.float64))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def quantize_f32(x: np.ndarray) -> np.ndarray:
    """Round float64 values onto the float32 grid (kept as float64)."""
    return x.astype(np.float32).astype(np.float64)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, (a, b))

    def bw():
        a.accumulate(_unbroadcast(out.grad, a.shape))
        b.accumulate(_unbroadcast(out.grad, b.shape))

    out._backward = bw
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data, (a, b))

    def bw():
        a.accumulate(_unbroadcast(out.grad, a.shape))
        b.accumulate(_unbroadcast(-out.grad, b.shape))

    out._backward = bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, (a, b))

    def bw():
        a.accumulate(_unbroadcast(out.grad * b.data, a.shape))
        b.accumulate(_unbroadcast(out.grad * a.data, b.shape))

    out._backward = bw
    return out


def scale(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data * s, (a,))

    def bw():
        a.accumulate(out.grad * s)

    out._backward = bw
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data @ b.data, (a, b))

    def bw():
        ga = out.grad @ b.data.T if b.data.ndim == 2 else np.outer(out.grad, b.data)
        gb = a.data.T @ out.grad
        a.accumulate(ga.reshape(a.shape))
        b.accumulate(gb.reshape(b.shape))

    out._backward = bw
    return out


def transpose2d(a: Tensor) -> Tensor:
    out = Tensor(a.data.T, (a,))

    def bw():
        a.accumulate(out.grad.T)

    out._backward = bw
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), (a,))

    def bw():
        a.accumulate(out.grad.reshape(a.shape))

    out._backward = bw
    return out


def concat_channels(parts) -> Tensor:
    parts = list(parts)
    out = Tensor(np.concatenate([p.data for p in parts], axis=0), tuple(parts))
    sizes = [p.shape[0] for p in parts]

    def bw():
        ofs = 0
        for p, n in zip(parts, sizes):
            p.accumulate(out.grad[ofs:ofs + n])
            ofs += n

    out._backward = bw
    return out


def narrow_channels(a: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(a.data[start:stop], (a,))

    def bw():
        g = np.zeros_like(a.data)
        g[start:stop] = out.grad
        a.accumulate(g)

    out._backward = bw
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = Tensor(np.where(mask, a.data, 0.0), (a,))

    def bw():
        a.accumulate(out.grad * mask)

    out._backward = bw
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = sigmoid_np(a.data)
    out = Tensor(s, (a,))

    def bw():
        a.accumulate(out.grad * s * (1.0 - s))

    out._backward = bw
    return out


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    """Numerically stable sigmoid on raw arrays."""
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum(), (a,))

    def bw():
        a.accumulate(np.full_like(a.data, float(out.grad)))

    out._backward = bw
    return out


def mean_over_channels(a: Tensor) -> Tensor:
    """(C,H,W) -> (1,H,W) channel mean."""
    c = a.shape[0]
    out = Tensor(a.data.mean(axis=0, keepdims=True), (a,))

    def bw():
        a.accumulate(np.broadcast_to(out.grad / c, a.shape).copy())

    out._backward = bw
    return out


def max_over_channels(a: Tensor) -> Tensor:
    """(C,H,W) -> (1,H,W) channel max; ties send gradient to the first hit."""
    arg = a.data.argmax(axis=0)
    out = Tensor(a.data.max(axis=0, keepdims=True), (a,))

    def bw():
        g = np.zeros_like(a.data)
        h, w = arg.shape
        g[arg, np.arange(h)[:, None], np.arange(w)[None, :]] = out.grad[0]
        a.accumulate(g)

    out._backward = bw
    return out


def global_avg_pool(a: Tensor) -> Tensor:
    """(C,H,W) -> (C,) spatial mean."""
    n = a.shape[1] * a.shape[2]
    out = Tensor(a.data.mean(axis=(1, 2)), (a,))

    def bw():
        a.accumulate(np.broadcast_to(out.grad[:, None, None] / n, a.shape).copy())

    out._backward = bw
    return out


# ---------------------------------------------------------------------------
# spatial ops
# ---------------------------------------------------------------------------

def _sym_index(n: int, p: int) -> np.ndarray:
    """Source indices of a length-(n+2p) symmetric (edge-mirroring) pad."""
    if p == 0:
        return np.arange(n)
    if p > n:
        raise ContractError(f"symmetric padding {p} exceeds extent {n}")
    return np.concatenate([np.arange(p)[::-1], np.arange(n), n - 1 - np.arange(p)])


def _pad_input(x: np.ndarray, p: int, mode: str):
    """Pad (C,H,W) by p on each spatial side; returns (padded, unpad_fn)."""
    if p == 0:
        return x, lambda gp: gp
    c, h, w = x.shape
    if mode == "zeros":
        xp = np.pad(x, ((0, 0), (p, p), (p, p)))

        def unpad(gp):
            return gp[:, p:p + h, p:p + w]

        return xp, unpad
    if mode == "symmetric":
        sy = _sym_index(h, p)
        sx = _sym_index(w, p)
        xp = x[:, sy[:, None], sx[None, :]]
        ci = np.arange(c)[:, None, None]

        def unpad(gp):
            g = np.zeros_like(x)
            np.add.at(g, (ci, sy[None, :, None], sx[None, None, :]), gp)
            return g

        return xp, unpad
    raise ContractError(f"unknown padding mode {mode!r}")


def _correlate(xp: np.ndarray, w: np.ndarray, stride: int, dilation: int,
               depthwise: bool):
    """Raw cross-correlation on a pre-padded (C,H,W) array.

    Returns (output, patches, index arrays); the patch tensor is reused by
    the weight-gradient computation.
    """
    cin = xp.shape[0]
    k = w.shape[-1]
    span = (k - 1) * dilation + 1
    ho = (xp.shape[1] - span) // stride + 1
    wo = (xp.shape[2] - span) // stride + 1
    iy = stride * np.arange(ho)[:, None] + dilation * np.arange(k)[None, :]  # (ho,k)
    ix = stride * np.arange(wo)[:, None] + dilation * np.arange(k)[None, :]  # (wo,k)
    patches = xp[:, iy[:, None, :, None], ix[None, :, None, :]]  # (C,ho,wo,k,k)
    if depthwise:
        out = np.einsum("chwyx,cyx->chw", patches, w, optimize=True)
    else:
        cols = patches.transpose(0, 3, 4, 1, 2).reshape(cin * k * k, ho * wo)
        out = (w.reshape(w.shape[0], cin * k * k) @ cols).reshape(w.shape[0], ho, wo)
    return out, patches, iy, ix


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1,
           dilation: int = 1, padding: int = 0, pad_mode: str = "zeros",
           depthwise: bool = False) -> Tensor:
    """2-D cross-correlation on a (C,H,W) map.

    ``w`` is (Cout, Cin, k, k), or (C, k, k) when ``depthwise``.
    """
    cin = x.shape[0]
    k = w.shape[-1]
    if depthwise and w.shape[0] != cin:
        raise ContractError(f"depthwise kernel channels {w.shape[0]} != input {cin}")
    if not depthwise and w.shape[1] != cin:
        raise ContractError(f"kernel expects {w.shape[1]} input channels, got {cin}")

    xp, unpad = _pad_input(x.data, padding, pad_mode)
    span = (k - 1) * dilation + 1
    if xp.shape[1] < span or xp.shape[2] < span:
        raise ContractError(f"input {x.shape[1:]} too small for kernel span {span}")
    out_data, patches, iy, ix = _correlate(xp, w.data, stride, dilation, depthwise)
    ho, wo = out_data.shape[1], out_data.shape[2]
    if b is not None:
        out_data = out_data + b.data[:, None, None]

    parents = (x, w) if b is None else (x, w, b)
    out = Tensor(out_data, parents)

    def bw():
        go = out.grad
        if depthwise:
            w.accumulate(np.einsum("chwyx,chw->cyx", patches, go, optimize=True))
        else:
            go2 = go.reshape(w.shape[0], ho * wo)
            cols_l = patches.transpose(0, 3, 4, 1, 2).reshape(cin * k * k, ho * wo)
            w.accumulate((go2 @ cols_l.T).reshape(w.shape))
        if b is not None:
            b.accumulate(go.sum(axis=(1, 2)))

        if stride == 1:
            # the input gradient is itself a full correlation with the
            # spatially flipped kernel
            gp_pad = np.pad(go, ((0, 0), (span - 1, span - 1), (span - 1, span - 1)))
            if depthwise:
                wt = w.data[:, ::-1, ::-1]
            else:
                wt = w.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]
            gp = _correlate(gp_pad, np.ascontiguousarray(wt), 1, dilation, depthwise)[0]
        else:
            if depthwise:
                dpatches = go[:, :, :, None, None] * w.data[:, None, None, :, :]
            else:
                go2 = go.reshape(w.shape[0], ho * wo)
                dcols = w.data.reshape(w.shape[0], -1).T @ go2
                dpatches = dcols.reshape(cin, k, k, ho, wo).transpose(0, 3, 4, 1, 2)
            gp = np.zeros_like(xp)
            ci = np.arange(cin)[:, None, None, None, None]
            np.add.at(gp, (ci, iy[None, :, None, :, None], ix[None, None, :, None, :]),
                      dpatches)
        x.accumulate(unpad(gp))

    out._backward = bw
    return out


def maxpool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k-by-k max pooling; extents must divide by k."""
    c, h, w = x.shape
    if h % k or w % k:
        raise ContractError(f"pool size {k} does not divide extents {(h, w)}")
    ho, wo = h // k, w // k
    windows = x.data.reshape(c, ho, k, wo, k).transpose(0, 1, 3, 2, 4).reshape(c, ho, wo, k * k)
    arg = windows.argmax(axis=-1)
    out = Tensor(windows.max(axis=-1), (x,))

    def bw():
        gwin = np.zeros_like(windows)
        np.put_along_axis(gwin, arg[..., None], out.grad[..., None], axis=-1)
        g = gwin.reshape(c, ho, wo, k, k).transpose(0, 1, 3, 2, 4).reshape(c, h, w)
        x.accumulate(g)

    out._backward = bw
    return out


def _bilinear_matrix(n_in: int, factor: int) -> np.ndarray:
    """Row-interpolation matrix (n_in*factor, n_in), half-pixel convention."""
    n_out = n_in * factor
    src = np.clip((np.arange(n_out) + 0.5) / factor - 0.5, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = src - i0
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(mat, (rows, i0), 1.0 - t)
    np.add.at(mat, (rows, i1), t)
    return mat


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling by an integer factor (half-pixel convention).

    Expressed as two interpolation-matrix products, so the backward pass is
    the transposed pair.
    """
    _, h, w = x.shape
    ay = _bilinear_matrix(h, factor)
    ax = _bilinear_matrix(w, factor)
    out = Tensor(ay @ x.data @ ax.T, (x,))

    def bw():
        x.accumulate(ay.T @ out.grad @ ax)

    out._backward = bw
    return out


def batchnorm_instance(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over the spatial extent of one sample."""
    c, h, w = x.shape
    n = h * w
    mu = x.data.mean(axis=(1, 2), keepdims=True)
    var = x.data.var(axis=(1, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(gamma.data[:, None, None] * xhat + beta.data[:, None, None],
                 (x, gamma, beta))

    def bw():
        go = out.grad
        gamma.accumulate((go * xhat).sum(axis=(1, 2)))
        beta.accumulate(go.sum(axis=(1, 2)))
        gy = go * gamma.data[:, None, None]
        m1 = gy.mean(axis=(1, 2), keepdims=True)
        m2 = (gy * xhat).mean(axis=(1, 2), keepdims=True)
        x.accumulate(inv * (gy - m1 - xhat * m2))

    out._backward = bw
    return out


# ---------------------------------------------------------------------------
# parameterized layers
# ---------------------------------------------------------------------------

def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return quantize_f32(rng.uniform(-bound, bound, size=shape))


class Module:
    """Base class with parameter discovery over attributes."""

    def params(self):
        """Ordered list of (name, Tensor) parameter pairs."""
        found = []
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                found.append((name, value))
            elif isinstance(value, Module):
                found.extend((f"{name}.{sub}", p) for sub, p in value.params())
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        found.extend((f"{name}.{i}.{sub}", p) for sub, p in item.params())
                    elif isinstance(item, Tensor):
                        found.append((f"{name}.{i}", item))
        return found

    def buffers(self):
        """Ordered list of (name, ndarray) non-learned state (running stats)."""
        found = []
        for name, value in vars(self).items():
            if isinstance(value, Module):
                found.extend((f"{name}.{sub}", b) for sub, b in value.buffers())
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        found.extend((f"{name}.{i}.{sub}", b) for sub, b in item.buffers())
            elif isinstance(value, np.ndarray) and name.startswith("running_"):
                found.append((name, value))
        return found

    def zero_grad(self):
        for _, p in self.params():
            p.grad = None


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng, stride=1, dilation=1, padding=None,
                 pad_mode="zeros", depthwise=False, bias=True):
        if depthwise and cin != cout:
            raise ContractError("depthwise convolution keeps the channel count")
        self.stride = stride
        self.dilation = dilation
        self.padding = (k - 1) // 2 * dilation if padding is None else padding
        self.pad_mode = pad_mode
        self.depthwise = depthwise
        if depthwise:
            shape, fan_in = (cin, k, k), k * k
        else:
            shape, fan_in = (cout, cin, k, k), cin * k * k
        self.w = Tensor(kaiming_uniform(rng, shape, fan_in))
        self.b = Tensor(np.zeros(cout)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b, stride=self.stride, dilation=self.dilation,
                      padding=self.padding, pad_mode=self.pad_mode,
                      depthwise=self.depthwise)

    def params(self):
        out = [("w", self.w)]
        if self.b is not None:
            out.append(("b", self.b))
        return out


class BatchNorm2d(Module):
    """Batch normalization specialized to batch size one.

    Normalization always uses the current sample's spatial statistics (the
    only well-defined choice at batch 1); running estimates are still
    tracked during training so they persist through checkpoints.
    """

    momentum = 0.1

    def __init__(self, c, eps=1e-5):
        self.gamma = Tensor(np.ones(c))
        self.beta = Tensor(np.zeros(c))
        self.eps = eps
        self.running_mean = np.zeros(c)
        self.running_var = np.ones(c)

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        if training:
            m = self.momentum
            self.running_mean = quantize_f32(
                self.running_mean + m * (x.data.mean(axis=(1, 2)) - self.running_mean))
            self.running_var = quantize_f32(
                self.running_var + m * (x.data.var(axis=(1, 2)) - self.running_var))
        return batchnorm_instance(x, self.gamma, self.beta, self.eps)

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]


class Linear(Module):
    def __init__(self, cin, cout, rng):
        self.w = Tensor(kaiming_uniform(rng, (cout, cin), cin))
        self.b = Tensor(np.zeros(cout))

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(self.w, x), self.b)


class Adam(Module):
    """Adam with bias correction; params stay on the float32 grid."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self._params = [p for _, p in params] if params and isinstance(params[0], tuple) else list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self._params]
        self._v = [np.zeros_like(p.data) for p in self._params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self._params, self._m, self._v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            p.data = quantize_f32(p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps))

    def zero_grad(self):
        for p in self._params:
            p.grad = None
