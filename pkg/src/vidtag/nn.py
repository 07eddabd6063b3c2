"""Module container and the transformer building blocks used by every network."""

import math

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tensor


class Module:
    """Attribute-walking parameter container.

    Parameters are discovered from instance attributes (``Parameter``, child
    ``Module`` or lists of modules) in definition order, and named by their
    dotted attribute path. Non-trainable arrays live in ``self.buffers``.
    """

    training = True

    def __init__(self):
        self.buffers = {}

    def _children(self):
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{key}.{i}", v

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + key, value
        for key, child in self._children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for key, value in self.buffers.items():
            yield prefix + key, value
        for key, child in self._children():
            yield from child.named_buffers(f"{prefix}{key}.")

    def modules(self):
        yield self
        for _, child in self._children():
            yield from child.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
        return self

    def unfreeze(self):
        for p in self.parameters():
            p.requires_grad = True
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for m in self.modules():
            for k, v in m.buffers.items():
                m.buffers[k] = v.astype(dtype)
        return self

    @property
    def dtype(self):
        for p in self.parameters():
            return p.dtype
        return np.dtype(np.float32)

    def state_dict(self):
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state, strict=True):
        own = dict(self.named_parameters())
        buffers = {}
        for m_name, m in self._named_modules():
            for k in m.buffers:
                buffers[m_name + k] = (m, k)
        expected = set(own) | set(buffers)
        if strict:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            if missing or extra:
                raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, value in state.items():
            value = np.asarray(value)
            if name in own:
                p = own[name]
                if p.shape != value.shape:
                    raise ValueError(f"{name}: shape {value.shape} does not match {p.shape}")
                p.data = value.astype(p.dtype, copy=True)
            elif name in buffers:
                m, k = buffers[name]
                if m.buffers[k].shape != value.shape:
                    raise ValueError(f"{name}: shape {value.shape} does not match {m.buffers[k].shape}")
                m.buffers[k] = value.astype(m.buffers[k].dtype, copy=True)

    def _named_modules(self, prefix=""):
        yield prefix, self
        for key, child in self._children():
            yield from child._named_modules(f"{prefix}{key}.")

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, n_in, n_out, rng, bias=True, zero=False, dtype=np.float32):
        super().__init__()
        bound = 1.0 / math.sqrt(n_in)
        if zero:
            w = np.zeros((n_in, n_out))
        else:
            w = rng.uniform(-bound, bound, size=(n_in, n_out))
        self.weight = Parameter(w.astype(dtype))
        if bias:
            b = np.zeros(n_out) if zero else rng.uniform(-bound, bound, size=n_out)
            self.bias = Parameter(b.astype(dtype))
        else:
            self.bias = None

    def forward(self, x):
        y = ag.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.weight = Parameter(np.ones(dim, dtype=dtype))
        self.bias = Parameter(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def forward(self, x):
        return ag.layer_norm(x, self.weight, self.bias, self.eps)


class MultiHeadAttention(Module):
    """Scaled dot-product attention over ``(B, T, D)`` inputs.

    ``mask`` is a boolean ``(T_q, T_k)`` array where True blocks attention.
    """

    def __init__(self, dim, heads, rng, zero_out=False, dtype=np.float32):
        super().__init__()
        if dim % heads:
            raise ValueError(f"width {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.q = Linear(dim, dim, rng, dtype=dtype)
        self.k = Linear(dim, dim, rng, dtype=dtype)
        self.v = Linear(dim, dim, rng, dtype=dtype)
        self.out = Linear(dim, dim, rng, zero=zero_out, dtype=dtype)

    def _split(self, x):
        b, t, _ = x.shape
        return x.reshape(b, t, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def forward(self, x, context=None, mask=None):
        context = x if context is None else context
        b, t, d = x.shape
        q = self._split(self.q(x))
        k = self._split(self.k(context))
        v = self._split(self.v(context))
        scores = ag.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(self.head_dim))
        weights = ag.softmax(scores, axis=-1, mask=mask)
        y = ag.matmul(weights, v).transpose(0, 2, 1, 3).reshape(b, t, d)
        return self.out(y)


class FeedForward(Module):
    def __init__(self, dim, hidden, rng, zero_out=False, dtype=np.float32):
        super().__init__()
        self.fc1 = Linear(dim, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, dim, rng, zero=zero_out, dtype=dtype)

    def forward(self, x):
        return self.fc2(ag.gelu(self.fc1(x)))


class EncoderBlock(Module):
    """Pre-norm transformer encoder layer with full (bidirectional) self-attention."""

    def __init__(self, dim, heads, ff_mult, dropout, rng, zero_init=False, dtype=np.float32):
        super().__init__()
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.attn = MultiHeadAttention(dim, heads, rng, zero_out=zero_init, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.ff = FeedForward(dim, ff_mult * dim, rng, zero_out=zero_init, dtype=dtype)
        self.dropout = dropout

    def forward(self, x, rng=None, mask=None):
        train = self.training
        x = x + ag.dropout(self.attn(self.norm1(x), mask=mask), self.dropout, rng, train)
        x = x + ag.dropout(self.ff(self.norm2(x)), self.dropout, rng, train)
        return x


class DecoderBlock(Module):
    """Pre-norm decoder layer: self-attention, cross-attention to memory, feed-forward."""

    def __init__(self, dim, heads, ff_mult, dropout, rng, zero_init=False, dtype=np.float32):
        super().__init__()
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.self_attn = MultiHeadAttention(dim, heads, rng, zero_out=zero_init, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.cross_attn = MultiHeadAttention(dim, heads, rng, zero_out=zero_init, dtype=dtype)
        self.norm3 = LayerNorm(dim, dtype=dtype)
        self.ff = FeedForward(dim, ff_mult * dim, rng, zero_out=zero_init, dtype=dtype)
        self.dropout = dropout

    def forward(self, x, memory, rng=None, self_mask=None, pos=None):
        """``pos`` is added to the attention inputs only, never to the residual stream."""
        train = self.training
        at = (lambda h: h) if pos is None else (lambda h: h + pos)
        x = x + ag.dropout(self.self_attn(at(self.norm1(x)), mask=self_mask), self.dropout, rng, train)
        x = x + ag.dropout(self.cross_attn(at(self.norm2(x)), context=memory), self.dropout, rng, train)
        x = x + ag.dropout(self.ff(self.norm3(x)), self.dropout, rng, train)
        return x


def as_input(x, dtype):
    """Wrap raw arrays as constant tensors of the model dtype."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))
