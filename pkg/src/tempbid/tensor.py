"""Differentiable substrate: layers, parameter storage, Adam and gradient checking.

Reverse-mode differentiation is delegated to torch (float64, define-by-run);
layer formulas, parameter initialization, the Adam update and the
finite-difference checker are written out here so their behaviour is pinned
by this package's tests rather than by library defaults.
"""

from __future__ import annotations

import hashlib
import math
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch

from .errors import CompatibilityError, GraphStateError, ShapeError

DTYPE = torch.float64
Tensor = torch.Tensor

LN_EPS = 1e-5


def tensor(data, requires_grad=False) -> Tensor:
    t = torch.as_tensor(np.asarray(data, dtype=np.float64), dtype=DTYPE).clone()
    t.requires_grad_(requires_grad)
    return t


# ----------------------------------------------------------------------- layers


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input has {x.shape[-1]} columns, weight expects {W.shape[0]}")
    y = x @ W
    if b is not None:
        if b.shape[-1] != W.shape[1]:
            raise ShapeError(f"linear: bias width {b.shape[-1]} != {W.shape[1]}")
        y = y + b
    return y


# set by finite_diff_check: collects the sign pattern of every relu input
_relu_signs: list[Tensor] | None = None


def relu(x: Tensor) -> Tensor:
    if _relu_signs is not None:
        _relu_signs.append(x.detach() > 0)
    return torch.clamp(x, min=0.0)


def tanh(x: Tensor) -> Tensor:
    return torch.tanh(x)


def softmax_rows(x: Tensor) -> Tensor:
    z = x - x.max(dim=-1, keepdim=True).values.detach()
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    if x.shape[-1] < 2:
        raise ShapeError("layer_norm needs at least 2 columns")
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * gain + bias


# ------------------------------------------------------------------ parameters


class ParamStore:
    """Named parameters with Adam moments and a step counter."""

    def __init__(self, name: str = ""):
        self.name = name
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self.m: dict[str, Tensor] = {}
        self.v: dict[str, Tensor] = {}
        self.step = 0

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = tensor(value, requires_grad=True)
        self.params[name] = t
        self.m[name] = torch.zeros_like(t, requires_grad=False)
        self.v[name] = torch.zeros_like(t, requires_grad=False)
        return t

    def add_linear(self, prefix: str, fan_in: int, fan_out: int, gen: torch.Generator, bias: bool = True):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        w = (torch.rand(fan_in, fan_out, generator=gen, dtype=DTYPE) * 2.0 - 1.0) * bound
        W = self.add(f"{prefix}.W", w)
        b = self.add(f"{prefix}.b", np.zeros((1, fan_out))) if bias else None
        return W, b

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __len__(self):
        return len(self.params)

    def values(self) -> Iterable[Tensor]:
        return self.params.values()

    def items(self):
        return self.params.items()

    def grad(self, name) -> Tensor:
        g = self.params[name].grad
        return torch.zeros_like(self.params[name]) if g is None else g

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def n_params(self) -> int:
        return sum(p.numel() for p in self.params.values())

    def copy_from(self, other: "ParamStore"):
        with torch.no_grad():
            for k, p in self.params.items():
                p.copy_(other.params[k])

    def soft_update(self, source: "ParamStore", tau: float):
        """self <- tau * source + (1 - tau) * self, elementwise."""
        with torch.no_grad():
            for k, p in self.params.items():
                p.copy_(tau * source.params[k] + (1.0 - tau) * p)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, p in self.params.items():
            h.update(k.encode())
            h.update(p.detach().numpy().tobytes())
        return h.hexdigest()

    def to_arrays(self, with_optimizer=True) -> dict[str, np.ndarray]:
        out = {}
        for k, p in self.params.items():
            out[f"param/{k}"] = p.detach().numpy().copy()
            if with_optimizer:
                out[f"adam_m/{k}"] = self.m[k].numpy().copy()
                out[f"adam_v/{k}"] = self.v[k].numpy().copy()
        if with_optimizer:
            out["adam_step"] = np.array(self.step, dtype=np.int64)
        return out

    def load_arrays(self, arrays: Mapping[str, np.ndarray]):
        for k, p in self.params.items():
            key = f"param/{k}"
            if key not in arrays:
                raise CompatibilityError(f"{self.name}: checkpoint lacks parameter {k!r}")
            a = arrays[key]
            if tuple(a.shape) != tuple(p.shape):
                raise CompatibilityError(f"{self.name}.{k}: checkpoint shape {a.shape} != {tuple(p.shape)}")
        extra = {key.split("/", 1)[1] for key in arrays if key.startswith("param/")} - set(self.params)
        if extra:
            raise CompatibilityError(f"{self.name}: unexpected parameter {sorted(extra)[0]!r}")
        with torch.no_grad():
            for k, p in self.params.items():
                p.copy_(torch.from_numpy(np.asarray(arrays[f"param/{k}"], dtype=np.float64)))
                if f"adam_m/{k}" in arrays:
                    self.m[k] = torch.from_numpy(np.array(arrays[f"adam_m/{k}"], dtype=np.float64))
                    self.v[k] = torch.from_numpy(np.array(arrays[f"adam_v/{k}"], dtype=np.float64))
        if "adam_step" in arrays:
            self.step = int(arrays["adam_step"])


def backward(loss: Tensor, retain_graph: bool = False):
    """Accumulate d(loss)/d(leaf) into every reachable parameter's .grad."""
    if not isinstance(loss, torch.Tensor) or loss.grad_fn is None:
        raise GraphStateError("backward() needs a loss produced by a recorded forward pass")
    if loss.numel() != 1:
        raise ShapeError("backward() needs a scalar loss")
    try:
        loss.backward(retain_graph=retain_graph)
    except RuntimeError as exc:
        raise GraphStateError(f"graph already consumed: {exc}") from exc


def adam_step(store: ParamStore, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update in place; gradients are cleared afterwards."""
    store.step += 1
    k = store.step
    c1 = 1.0 - beta1**k
    c2 = 1.0 - beta2**k
    with torch.no_grad():
        for name, p in store.params.items():
            g = store.grad(name)
            m = store.m[name].mul_(beta1).add_(g, alpha=1.0 - beta1)
            v = store.v[name].mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + eps))
    store.zero_grad()


# --------------------------------------------------------------- grad checking


def _relu_kink_crossed(f: Callable[[], Tensor], flat: Tensor, i: int, orig: float, h: float) -> tuple[float, float, bool]:
    """f at orig +/- h, and whether any relu input changed sign between the two."""
    global _relu_signs
    patterns = []
    try:
        for x in (orig + h, orig - h):
            _relu_signs = []
            flat[i] = x
            patterns.append((f().item(), _relu_signs))
    finally:
        _relu_signs = None
        flat[i] = orig
    (fp, up), (fm, dn) = patterns
    crossed = len(up) != len(dn) or any(not torch.equal(a, b) for a, b in zip(up, dn))
    return fp, fm, crossed


def finite_diff_check(
    f: Callable[[], Tensor],
    params: ParamStore | Iterable[Tensor],
    h: float = 1e-5,
    max_coords: int | None = 20,
    seed: int = 0,
    kink_retries: int = 3,
) -> float:
    """Max relative error between backward() gradients and central differences.

    ``params`` may be a ParamStore or plain leaf tensors (e.g. network inputs
    with requires_grad). At most ``max_coords`` coordinates per tensor are
    sampled; None checks every coordinate.

    A central difference whose two evaluations straddle a relu kink measures
    the kink, not the derivative. Such coordinates are retried with the step
    divided by 10, up to ``kink_retries`` times, and skipped if the kink persists.
    """
    tensors = list(params.values()) if isinstance(params, ParamStore) else list(params)
    for t in tensors:
        t.grad = None
    loss = f()
    backward(loss)
    analytic = [t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t) for t in tensors]
    for t in tensors:
        t.grad = None

    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for t, g in zip(tensors, analytic):
            flat = t.view(-1)
            n = flat.numel()
            idx = np.arange(n) if max_coords is None or n <= max_coords else rng.choice(n, max_coords, replace=False)
            for i in idx:
                orig = flat[i].item()
                step = h
                for _ in range(kink_retries + 1):
                    fp, fm, crossed = _relu_kink_crossed(f, flat, i, orig, step)
                    if not crossed:
                        break
                    step /= 10.0
                if crossed:
                    continue
                g_fd = (fp - fm) / (2.0 * step)
                g_ad = g.view(-1)[i].item()
                err = abs(g_ad - g_fd) / max(1e-8, abs(g_ad) + abs(g_fd))
                worst = max(worst, err)
    return worst


# ----------------------------------------------------------------- checkpoints


def save_checkpoint(path: str | Path, stores: Mapping[str, ParamStore], meta: Mapping[str, str] | None = None):
    arrays = {}
    for sname, store in stores.items():
        for k, a in store.to_arrays().items():
            arrays[f"{sname}::{k}"] = a
    for k, v in (meta or {}).items():
        arrays[f"meta::{k}"] = np.array(str(v))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)


def read_checkpoint(path: str | Path) -> tuple[dict[str, dict[str, np.ndarray]], dict[str, str]]:
    stores: dict[str, dict[str, np.ndarray]] = {}
    meta = {}
    with np.load(path, allow_pickle=False) as z:
        for key in z.files:
            sname, k = key.split("::", 1)
            if sname == "meta":
                meta[k] = str(z[key])
            else:
                stores.setdefault(sname, {})[k] = z[key]
    return stores, meta


def load_checkpoint(path: str | Path, stores: Mapping[str, ParamStore]) -> dict[str, str]:
    data, meta = read_checkpoint(path)
    missing = set(stores) - set(data)
    if missing:
        raise CompatibilityError(f"checkpoint lacks network {sorted(missing)[0]!r}")
    extra = set(data) - set(stores)
    if extra:
        raise CompatibilityError(f"checkpoint has unexpected network {sorted(extra)[0]!r}")
    for sname, store in stores.items():
        store.load_arrays(data[sname])
    return meta


def file_hash(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
