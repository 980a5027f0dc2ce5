"""
Transformer building blocks in NumPy with cached forward activations and
manual backward passes

Every layer works in float64 on batched inputs [B, L, d]. Gradients
accumulate into ``grads`` until ``zero_grad`` is called, so one forward can
be followed by one backward per loss term.
"""

from typing import Callable, Dict, Iterator, Optional, Tuple

import numpy as np
from scipy.special import softmax

from ..errors import BackboneStateError


def init_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    """Uniform in +-1/sqrt(fan_in)"""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def softmax_backward(probs: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of softmax along the last axis"""
    return probs * (grad - np.sum(grad * probs, axis=-1, keepdims=True))


def numerical_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """
    Central-difference gradient of the scalar ``f()`` with respect to ``x``

    ``x`` is perturbed in place and restored entry by entry.
    """
    grad = np.zeros_like(x, dtype=np.float64)
    for idx in np.ndindex(x.shape):
        original = x[idx]
        x[idx] = original + h
        f_plus = f()
        x[idx] = original - h
        f_minus = f()
        x[idx] = original
        grad[idx] = (f_plus - f_minus) / (2.0 * h)
    return grad


class Layer:
    """
    Base class: ``params`` and ``grads`` share keys; composite layers expose
    their sub-layers through ``children``.
    """

    def __init__(self):
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}

    def children(self) -> Dict[str, "Layer"]:
        return {}

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray, np.ndarray]]:
        for name, value in self.params.items():
            yield prefix + name, value, self.grads[name]
        for child_name, child in self.children().items():
            yield from child.named_parameters(f"{prefix}{child_name}.")

    def zero_grad(self):
        for _, _, grad in self.named_parameters():
            grad[...] = 0.0

    def _register(self, name: str, value: np.ndarray):
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)


class Linear(Layer):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self._register("w", init_uniform(rng, d_in, (d_in, d_out)))
        if bias:
            self._register("b", np.zeros(d_out))
        self._x: Optional[np.ndarray] = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        out = x @ self.params["w"]
        if "b" in self.params:
            out = out + self.params["b"]
        return out

    def backward(self, grad: np.ndarray) -> np.ndarray:
        x = self._x
        d_in, d_out = self.params["w"].shape
        self.grads["w"] += x.reshape(-1, d_in).T @ grad.reshape(-1, d_out)
        if "b" in self.params:
            self.grads["b"] += grad.reshape(-1, d_out).sum(axis=0)
        return grad @ self.params["w"].T


class LayerNorm(Layer):
    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self._register("gamma", np.ones(d))
        self._register("beta", np.zeros(d))

    def forward(self, x: np.ndarray) -> np.ndarray:
        mean = np.mean(x, axis=-1, keepdims=True)
        var = np.var(x, axis=-1, keepdims=True)
        self._inv_std = 1.0 / np.sqrt(var + self.eps)
        self._x_hat = (x - mean) * self._inv_std
        return self.params["gamma"] * self._x_hat + self.params["beta"]

    def backward(self, grad: np.ndarray) -> np.ndarray:
        d = grad.shape[-1]
        x_hat = self._x_hat
        self.grads["gamma"] += np.sum(grad * x_hat, axis=tuple(range(grad.ndim - 1)))
        self.grads["beta"] += np.sum(grad, axis=tuple(range(grad.ndim - 1)))
        g_hat = grad * self.params["gamma"]
        return (self._inv_std / d) * (
            d * g_hat
            - np.sum(g_hat, axis=-1, keepdims=True)
            - x_hat * np.sum(g_hat * x_hat, axis=-1, keepdims=True)
        )


class GELU(Layer):
    """tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))"""

    _C = np.sqrt(2.0 / np.pi)

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        self._tanh = np.tanh(self._C * (x + 0.044715 * x ** 3))
        return 0.5 * x * (1.0 + self._tanh)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        x, th = self._x, self._tanh
        d_inner = self._C * (1.0 + 3 * 0.044715 * x ** 2)
        local = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th ** 2) * d_inner
        return grad * local


class CausalSelfAttention(Layer):
    """
    Multi-head self-attention with a causal mask

    Projections are stored per head: w_q, w_k, w_v [H, d, d_k]; the
    concatenated heads are mixed back to d by w_o [H * d_k, d].
    """

    def __init__(self, d: int, heads: int, d_head: int, rng: np.random.Generator):
        super().__init__()
        self.heads, self.d_head = heads, d_head
        for name in ("w_q", "w_k", "w_v"):
            self._register(name, init_uniform(rng, d, (heads, d, d_head)))
        self._register("w_o", init_uniform(rng, heads * d_head, (heads * d_head, d)))

    def forward(self, x: np.ndarray) -> np.ndarray:
        p = self.params
        b, n, _ = x.shape
        q = np.einsum("bld,hdk->bhlk", x, p["w_q"])
        k = np.einsum("bld,hdk->bhlk", x, p["w_k"])
        v = np.einsum("bld,hdk->bhlk", x, p["w_v"])
        scores = np.einsum("bhik,bhjk->bhij", q, k) / np.sqrt(self.d_head)
        future = np.triu(np.ones((n, n), dtype=bool), k=1)
        scores = np.where(future, -np.inf, scores)
        attn = softmax(scores, axis=-1)
        o = np.einsum("bhij,bhjk->bhik", attn, v)
        concat = o.transpose(0, 2, 1, 3).reshape(b, n, self.heads * self.d_head)
        self._cache = (x, q, k, v, attn, concat)
        return concat @ p["w_o"]

    def backward(self, grad: np.ndarray) -> np.ndarray:
        p = self.params
        x, q, k, v, attn, concat = self._cache
        b, n, _ = x.shape
        self.grads["w_o"] += concat.reshape(b * n, -1).T @ grad.reshape(b * n, -1)
        g_o = (grad @ p["w_o"].T).reshape(b, n, self.heads, self.d_head).transpose(0, 2, 1, 3)
        g_attn = np.einsum("bhik,bhjk->bhij", g_o, v)
        g_v = np.einsum("bhij,bhik->bhjk", attn, g_o)
        g_scores = softmax_backward(attn, g_attn) / np.sqrt(self.d_head)
        g_q = np.einsum("bhij,bhjk->bhik", g_scores, k)
        g_k = np.einsum("bhij,bhik->bhjk", g_scores, q)
        g_x = np.zeros_like(x)
        for name, g in (("w_q", g_q), ("w_k", g_k), ("w_v", g_v)):
            self.grads[name] += np.einsum("bld,bhlk->hdk", x, g)
            g_x += np.einsum("bhlk,hdk->bld", g, p[name])
        return g_x


class FeedForward(Layer):
    def __init__(self, d: int, d_ff: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = Linear(d, d_ff, rng)
        self.act = GELU()
        self.fc2 = Linear(d_ff, d, rng)

    def children(self):
        return {"fc1": self.fc1, "fc2": self.fc2}

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.fc2.forward(self.act.forward(self.fc1.forward(x)))

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return self.fc1.backward(self.act.backward(self.fc2.backward(grad)))


class TransformerBlock(Layer):
    """Pre-norm block: x + attn(ln1(x)), then x + mlp(ln2(x))"""

    def __init__(self, d: int, heads: int, d_head: int, rng: np.random.Generator):
        super().__init__()
        self.ln1 = LayerNorm(d)
        self.attn = CausalSelfAttention(d, heads, d_head, rng)
        self.ln2 = LayerNorm(d)
        self.mlp = FeedForward(d, 4 * d, rng)

    def children(self):
        return {"ln1": self.ln1, "attn": self.attn, "ln2": self.ln2, "mlp": self.mlp}

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = x + self.attn.forward(self.ln1.forward(x))
        return x + self.mlp.forward(self.ln2.forward(x))

    def backward(self, grad: np.ndarray) -> np.ndarray:
        grad = grad + self.ln2.backward(self.mlp.backward(grad))
        return grad + self.ln1.backward(self.attn.backward(grad))


class ForwardCache:
    """Marks whether a forward pass is available for backward"""

    def __init__(self):
        self._ready = False

    def set(self):
        self._ready = True

    def consume(self, what: str):
        if not self._ready:
            raise BackboneStateError(f"{what}: backward called without a cached forward pass")
        self._ready = False
