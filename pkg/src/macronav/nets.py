"""Differentiable numeric core: named parameters, attention, LSTM, AdamW.

All layers are written directly from their defining formulas on top of torch
tensor primitives, so the computation matches the documented math instead of
whatever a fused library layer happens to do.  Parameters live in a
:class:`ParamStore`, an ordered name -> tensor map; every composite op pulls
its weights by name prefix.  That keeps checkpoint contents, optimizer state,
and gradient isolation all keyed by stable names.

Ops accept any number of leading batch dimensions: shapes are written as
``[..., N, d]``.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Iterator

import numpy as np
import torch

from .errors import NumericError, ShapeError

# Large negative logit used to mask attention to padded slots.  Finite on
# purpose: a fully masked row then degrades to a uniform distribution over
# padding instead of producing NaNs.
NEG_INF = -1e9

LN_EPS = 1e-6


def assert_finite(t: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite values in {what}")
    return t


class ParamStore:
    """Ordered map of unique parameter names to trainable tensors."""

    def __init__(self) -> None:
        self._params: dict[str, torch.Tensor] = {}

    def add(self, name: str, value, requires_grad: bool = True) -> torch.Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = torch.as_tensor(value)
        if t.dtype not in (torch.float32, torch.float64):
            t = t.to(torch.float32)
        t = t.clone().requires_grad_(requires_grad)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> torch.Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, torch.Tensor]]:
        return iter(self._params.items())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def to_arrays(self) -> dict[str, np.ndarray]:
        """Detached float32 copies, in insertion order."""
        return {n: p.detach().numpy().astype(np.float32, copy=True)
                for n, p in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray],
                    subset: bool = False) -> list[str]:
        """Copy values in by name; returns the names actually loaded.

        With ``subset=True`` only the intersection of names is loaded (used
        when warm-starting from a checkpoint that covers part of the model);
        otherwise the name sets must match exactly.
        """
        if not subset:
            missing = set(self._params) - set(arrays)
            extra = set(arrays) - set(self._params)
            if missing or extra:
                raise KeyError(f"parameter name mismatch: missing={sorted(missing)} "
                               f"unexpected={sorted(extra)}")
        loaded = []
        with torch.no_grad():
            for name, p in self._params.items():
                if name not in arrays:
                    continue
                arr = arrays[name]
                if tuple(arr.shape) != tuple(p.shape):
                    raise ShapeError(f"parameter {name!r}: checkpoint shape "
                                     f"{tuple(arr.shape)} != model shape {tuple(p.shape)}")
                p.copy_(torch.as_tensor(arr, dtype=p.dtype))
                loaded.append(name)
        return loaded


# ---------------------------------------------------------------------------
# initializers


def _uniform(shape, bound: float, gen: torch.Generator) -> torch.Tensor:
    return (torch.rand(shape, generator=gen) * 2.0 - 1.0) * bound


def init_linear(store: ParamStore, prefix: str, d_in: int, d_out: int,
                gen: torch.Generator, bias: bool = True) -> None:
    bound = 1.0 / math.sqrt(d_in)
    store.add(f"{prefix}.w", _uniform((d_in, d_out), bound, gen))
    if bias:
        store.add(f"{prefix}.b", _uniform((d_out,), bound, gen))


def init_layer_norm(store: ParamStore, prefix: str, d: int) -> None:
    store.add(f"{prefix}.g", torch.ones(d))
    store.add(f"{prefix}.b", torch.zeros(d))


def init_attention(store: ParamStore, prefix: str, d: int,
                   gen: torch.Generator, d_kv: int | None = None) -> None:
    """Projection weights for one attention block (no biases)."""
    d_kv = d if d_kv is None else d_kv
    bound = 1.0 / math.sqrt(d)
    store.add(f"{prefix}.wq", _uniform((d, d), bound, gen))
    store.add(f"{prefix}.wk", _uniform((d_kv, d), 1.0 / math.sqrt(d_kv), gen))
    store.add(f"{prefix}.wv", _uniform((d_kv, d), 1.0 / math.sqrt(d_kv), gen))
    store.add(f"{prefix}.wo", _uniform((d, d), bound, gen))


def init_transformer_layer(store: ParamStore, prefix: str, d: int,
                           gen: torch.Generator) -> None:
    init_attention(store, f"{prefix}.att", d, gen)
    init_layer_norm(store, f"{prefix}.ln1", d)
    init_linear(store, f"{prefix}.fc1", d, 4 * d, gen)
    init_linear(store, f"{prefix}.fc2", 4 * d, d, gen)
    init_layer_norm(store, f"{prefix}.ln2", d)


def init_lstm(store: ParamStore, prefix: str, d_in: int, d_hidden: int,
              gen: torch.Generator) -> None:
    bound = 1.0 / math.sqrt(d_hidden)
    store.add(f"{prefix}.w_ih", _uniform((d_in, 4 * d_hidden), bound, gen))
    store.add(f"{prefix}.w_hh", _uniform((d_hidden, 4 * d_hidden), bound, gen))
    store.add(f"{prefix}.b", _uniform((4 * d_hidden,), bound, gen))


# ---------------------------------------------------------------------------
# primitive ops


def linear(x: torch.Tensor, store: ParamStore, prefix: str) -> torch.Tensor:
    w = store[f"{prefix}.w"]
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear {prefix}: input width {x.shape[-1]} != {w.shape[0]}")
    out = x @ w
    if f"{prefix}.b" in store:
        out = out + store[f"{prefix}.b"]
    return out


def layer_norm(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor,
               eps: float = LN_EPS) -> torch.Tensor:
    mean = x.mean(dim=-1, keepdim=True)
    var = x.var(dim=-1, unbiased=False, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps) * gamma + beta


def stable_softmax(logits: torch.Tensor, dim: int = -1) -> torch.Tensor:
    shifted = logits - logits.max(dim=dim, keepdim=True).values
    z = torch.exp(shifted)
    return z / z.sum(dim=dim, keepdim=True)


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    # [..., N, d] -> [..., H, N, d/H]
    *lead, n, d = x.shape
    x = x.reshape(*lead, n, heads, d // heads)
    return x.transpose(-2, -3)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    # [..., H, N, dk] -> [..., N, H*dk]
    x = x.transpose(-2, -3)
    *lead, n, h, dk = x.shape
    return x.reshape(*lead, n, h * dk)


def _attend(q_in: torch.Tensor, kv_in: torch.Tensor, heads: int,
            store: ParamStore, prefix: str,
            pad_mask: torch.Tensor | None = None,
            return_attention: bool = False):
    wq = store[f"{prefix}.wq"]
    wk = store[f"{prefix}.wk"]
    wv = store[f"{prefix}.wv"]
    wo = store[f"{prefix}.wo"]
    d = wq.shape[1]
    if d % heads != 0:
        raise ShapeError(f"attention {prefix}: dim {d} not divisible by {heads} heads")
    if q_in.shape[-1] != wq.shape[0]:
        raise ShapeError(f"attention {prefix}: query width {q_in.shape[-1]} != {wq.shape[0]}")
    if kv_in.shape[-1] != wk.shape[0]:
        raise ShapeError(f"attention {prefix}: key width {kv_in.shape[-1]} != {wk.shape[0]}")
    d_k = d // heads
    q = _split_heads(q_in @ wq, heads)
    k = _split_heads(kv_in @ wk, heads)
    v = _split_heads(kv_in @ wv, heads)
    logits = q @ k.transpose(-1, -2) / math.sqrt(d_k)  # [..., H, Nq, Nk]
    if pad_mask is not None:
        logits = logits.masked_fill(pad_mask[..., None, None, :], NEG_INF)
    att = stable_softmax(logits, dim=-1)
    out = _merge_heads(att @ v) @ wo
    if return_attention:
        return out, att
    return out


def mhsa(x: torch.Tensor, heads: int, store: ParamStore, prefix: str,
         pad_mask: torch.Tensor | None = None,
         return_attention: bool = False):
    """Multi-head self-attention: per-head softmax(QKᵀ/√d_k)V, concat, W_O."""
    return _attend(x, x, heads, store, prefix, pad_mask, return_attention)


def mhca(q: torch.Tensor, kv: torch.Tensor, heads: int, store: ParamStore,
         prefix: str, pad_mask: torch.Tensor | None = None,
         return_attention: bool = False):
    """Multi-head cross-attention: queries from ``q``, keys/values from ``kv``."""
    return _attend(q, kv, heads, store, prefix, pad_mask, return_attention)


def ffn(x: torch.Tensor, store: ParamStore, prefix: str) -> torch.Tensor:
    hidden = torch.nn.functional.gelu(linear(x, store, f"{prefix}.fc1"))
    return linear(hidden, store, f"{prefix}.fc2")


def transformer_layer(x: torch.Tensor, heads: int, store: ParamStore,
                      prefix: str, pad_mask: torch.Tensor | None = None,
                      return_attention: bool = False):
    """Post-norm block: LN after each residual add, 4d GELU feed-forward."""
    att = mhsa(x, heads, store, f"{prefix}.att", pad_mask, return_attention)
    if return_attention:
        att, weights = att
    z = layer_norm(x + att, store[f"{prefix}.ln1.g"], store[f"{prefix}.ln1.b"])
    out = layer_norm(z + ffn(z, store, prefix),
                     store[f"{prefix}.ln2.g"], store[f"{prefix}.ln2.b"])
    if return_attention:
        return out, weights
    return out


def lstm_step(x: torch.Tensor, state: tuple[torch.Tensor, torch.Tensor],
              store: ParamStore, prefix: str) -> tuple[torch.Tensor, torch.Tensor]:
    """One LSTM cell update; gate order in the packed weights is (i, f, g, o)."""
    h, c = state
    w_ih = store[f"{prefix}.w_ih"]
    w_hh = store[f"{prefix}.w_hh"]
    if x.shape[-1] != w_ih.shape[0]:
        raise ShapeError(f"lstm {prefix}: input width {x.shape[-1]} != {w_ih.shape[0]}")
    if h.shape[-1] != w_hh.shape[0]:
        raise ShapeError(f"lstm {prefix}: hidden width {h.shape[-1]} != {w_hh.shape[0]}")
    gates = x @ w_ih + h @ w_hh + store[f"{prefix}.b"]
    i, f, g, o = gates.chunk(4, dim=-1)
    i = torch.sigmoid(i)
    f = torch.sigmoid(f)
    g = torch.tanh(g)
    o = torch.sigmoid(o)
    c_next = f * c + i * g
    h_next = o * torch.tanh(c_next)
    return h_next, c_next


def mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a - b) ** 2).mean()


# ---------------------------------------------------------------------------
# optimization


class AdamW:
    """Decoupled-weight-decay Adam over a ParamStore.

    Moments and step counts are keyed by parameter name, and a parameter
    whose ``.grad`` is None is skipped entirely: no moment update, no step
    count, no decay.  A parameter therefore only ever changes on steps whose
    loss actually touched it.

    ``names`` restricts the optimizer to a subset of the store, which lets
    several optimizers with different roles share one parameter store
    (gradients deposited on out-of-subset parameters are simply ignored).
    """

    def __init__(self, store: ParamStore, lr: float,
                 betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0,
                 names: Iterable[str] | None = None):
        self.store = store
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.names = None if names is None else frozenset(names)
        if self.names:
            for n in self.names:
                store[n]  # raises KeyError for unknown names
        self.m: dict[str, torch.Tensor] = {}
        self.v: dict[str, torch.Tensor] = {}
        self.t: dict[str, int] = {}

    def step(self) -> None:
        b1, b2 = self.betas
        with torch.no_grad():
            for name, p in self.store.items():
                if self.names is not None and name not in self.names:
                    continue
                g = p.grad
                if g is None:
                    continue
                if not torch.isfinite(g).all():
                    raise NumericError(f"non-finite gradient for {name!r}")
                t = self.t.get(name, 0) + 1
                self.t[name] = t
                if name not in self.m:
                    self.m[name] = torch.zeros_like(p)
                    self.v[name] = torch.zeros_like(p)
                m, v = self.m[name], self.v[name]
                m.mul_(b1).add_(g, alpha=1.0 - b1)
                v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
                if self.weight_decay:
                    p.mul_(1.0 - self.lr * self.weight_decay)
                m_hat = m / (1.0 - b1 ** t)
                v_hat = v / (1.0 - b2 ** t)
                p.addcdiv_(m_hat, v_hat.sqrt().add_(self.eps), value=-self.lr)

    def zero_grad(self) -> None:
        self.store.zero_grad()


def cast_store(store: ParamStore, dtype: torch.dtype) -> ParamStore:
    """Copy of a store with every tensor cast (used for float64 grad checks)."""
    out = ParamStore()
    for name, p in store.items():
        out.add(name, p.detach().to(dtype))
    return out


def soft_update(target: ParamStore, online: ParamStore, tau: float) -> None:
    """Polyak averaging: target <- tau * online + (1 - tau) * target.

    The target store's names define what is tracked; the online store may
    hold additional parameters (e.g. shared trunks the target does not copy).
    """
    with torch.no_grad():
        for name, tp in target.items():
            p = online[name]
            if tp.shape != p.shape:
                raise ShapeError(f"soft_update {name!r}: {tuple(tp.shape)} vs {tuple(p.shape)}")
            tp.mul_(1.0 - tau).add_(p, alpha=tau)


# ---------------------------------------------------------------------------
# gradient verification


def grad_check(f: Callable[[], torch.Tensor], store: ParamStore,
               eps: float = 1e-3, max_coords: int = 40,
               names: Iterable[str] | None = None, seed: int = 0) -> float:
    """Max relative error between autograd and central differences.

    ``f`` recomputes the scalar loss from the store's current values.  Up to
    ``max_coords`` coordinates per tensor are probed (all of them for small
    tensors), sampled deterministically from ``seed``.
    """
    store.zero_grad()
    out = f()
    if out.numel() != 1:
        raise ShapeError("grad_check expects a scalar function")
    out.backward()
    analytic = {n: p.grad.detach().clone() for n, p in store.items()
                if p.grad is not None}
    rng = np.random.default_rng(seed)
    check_names = list(names) if names is not None else list(analytic)
    worst = 0.0
    with torch.no_grad():
        for name in check_names:
            p = store[name]
            ana = analytic.get(name)
            if ana is None:
                continue
            flat = p.view(-1)
            n = flat.numel()
            if n <= max_coords:
                coords = np.arange(n)
            else:
                coords = rng.choice(n, size=max_coords, replace=False)
            for idx in coords:
                idx = int(idx)
                orig = flat[idx].item()
                flat[idx] = orig + eps
                f_plus = float(f())
                flat[idx] = orig - eps
                f_minus = float(f())
                flat[idx] = orig
                numeric = (f_plus - f_minus) / (2.0 * eps)
                a = float(ana.view(-1)[idx])
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-4)
                worst = max(worst, rel)
    store.zero_grad()
    return worst
