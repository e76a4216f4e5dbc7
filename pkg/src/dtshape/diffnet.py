"""Dense coordinate networks over flat parameter vectors.

Networks are described by a :class:`DenseNetSpec` and evaluated against a flat
``ParamVector`` (a 1-D float64 tensor, or a ``(B, P)`` stack when every
instance in a batch carries its own weights, as with hypernetwork output).

Spatial jacobians are propagated forward alongside the activations
(``forward_with_spatial_grad``).  Because the jacobian is an ordinary tensor
expression of the parameters, losses that contain ``grad_p f`` are
differentiated by plain reverse mode; no double-backward is involved.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import torch

DTYPE = torch.float64
ACTIVATIONS = ("sine", "relu", "linear")


class ShapeError(ValueError):
    """Input or parameter dimensions do not match a network spec."""


class ConfigurationError(ValueError):
    """Hypernetwork generators do not fit the network they parameterise."""


class NonFiniteError(FloatingPointError):
    def __init__(self, node: str):
        super().__init__(f"non-finite value at {node}")
        self.node = node


@dataclass(frozen=True)
class DenseNetSpec:
    """Layer widths ``(in, hidden..., out)`` and one activation per linear layer."""

    widths: tuple[int, ...]
    activations: tuple[str, ...]
    omega0: float = 30.0

    def __post_init__(self):
        if len(self.widths) < 3:
            raise ShapeError("a dense net needs at least one hidden layer")
        if len(self.activations) != len(self.widths) - 1:
            raise ShapeError("one activation per linear layer")
        if any(a not in ACTIVATIONS for a in self.activations):
            raise ShapeError(f"unknown activation in {self.activations}")
        if self.activations[-1] != "linear":
            raise ShapeError("output layer must be linear")
        if self.omega0 <= 0:
            raise ShapeError("omega0 must be positive")

    @classmethod
    def mlp(cls, n_in: int, hidden: int, n_layers: int, n_out: int,
            activation: str = "sine", omega0: float = 30.0) -> "DenseNetSpec":
        """``n_layers`` fully-connected layers, the last one linear."""
        widths = (n_in,) + (hidden,) * (n_layers - 1) + (n_out,)
        acts = (activation,) * (n_layers - 1) + ("linear",)
        return cls(widths, acts, omega0)

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    def layer_sizes(self) -> list[int]:
        return [(i + 1) * o for i, o in zip(self.widths[:-1], self.widths[1:])]

    def layout(self) -> list[tuple[int, str, int, tuple[int, ...]]]:
        """(layer, 'weight'|'bias', offset, shape) in storage order."""
        out, off = [], 0
        for k, (i, o) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            out.append((k, "weight", off, (o, i)))
            off += o * i
            out.append((k, "bias", off, (o,)))
            off += o
        return out

    @property
    def n_params(self) -> int:
        return sum(self.layer_sizes())


def unflatten(spec: DenseNetSpec, params: torch.Tensor) -> list[tuple[torch.Tensor, torch.Tensor]]:
    """Split a ``(..., P)`` parameter tensor into per-layer ``(W, b)`` views."""
    if params.shape[-1] != spec.n_params:
        raise ShapeError(f"expected {spec.n_params} parameters, got {params.shape[-1]}")
    lead = params.shape[:-1]
    layers, off = [], 0
    for i, o in zip(spec.widths[:-1], spec.widths[1:]):
        w = params[..., off:off + o * i].reshape(*lead, o, i)
        off += o * i
        b = params[..., off:off + o]
        off += o
        layers.append((w, b))
    return layers


def siren_init(spec: DenseNetSpec, seed: int | torch.Generator) -> torch.Tensor:
    """Sine-network initialisation.

    First layer weights ~ U(-1/fan_in, 1/fan_in); later sine layers
    ~ U(-sqrt(6/fan_in)/omega0, +sqrt(6/fan_in)/omega0).  The linear output
    layer and all biases use U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    """
    gen = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))
    chunks = []
    for k, (i, o) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        act = spec.activations[k]
        if act == "sine" and k == 0:
            bound = 1.0 / i
        elif act == "sine":
            bound = math.sqrt(6.0 / i) / spec.omega0
        elif act == "relu":
            bound = math.sqrt(6.0 / i)
        else:
            bound = 1.0 / math.sqrt(i)
        chunks.append(_uniform(gen, o * i, bound))
        chunks.append(_uniform(gen, o, 1.0 / math.sqrt(i)))
    return torch.cat(chunks)


def _uniform(gen: torch.Generator, n: int, bound: float) -> torch.Tensor:
    return (torch.rand(n, generator=gen, dtype=DTYPE) * 2.0 - 1.0) * bound


def _activate(act: str, z: torch.Tensor, omega0: float):
    if act == "sine":
        return torch.sin(omega0 * z)
    if act == "relu":
        return torch.relu(z)
    return z


def _activate_deriv(act: str, z: torch.Tensor, omega0: float):
    if act == "sine":
        return omega0 * torch.cos(omega0 * z)
    if act == "relu":
        return (z > 0).to(z.dtype)
    return None


def _linear(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # w: (..., o, i) possibly batched over instances; x: (..., N, i)
    if w.dim() == 2:
        return x @ w.transpose(-1, -2) + b
    return torch.matmul(x, w.transpose(-1, -2)) + b.unsqueeze(-2)


def _check_input(spec: DenseNetSpec, x: torch.Tensor, n_const: int) -> None:
    if x.shape[-1] + n_const != spec.n_in:
        raise ShapeError(f"input dimension {x.shape[-1] + n_const} != spec input {spec.n_in}")


def _first_layer(w: torch.Tensor, b: torch.Tensor, x: torch.Tensor,
                 const: torch.Tensor | None) -> tuple[torch.Tensor, torch.Tensor]:
    """Fold a per-instance constant input suffix into the first-layer bias."""
    n = x.shape[-1]
    wx = w[..., :n]
    if const is None:
        return wx, b
    wc = w[..., n:]
    if w.dim() == 2:
        return wx, b + wc @ const
    return wx, b + torch.einsum("boi,bi->bo", wc, const)


def forward(spec: DenseNetSpec, params: torch.Tensor, inputs: torch.Tensor,
            const: torch.Tensor | None = None) -> torch.Tensor:
    """Evaluate the network.

    ``inputs`` is ``(N, d)`` with flat params or ``(B, N, d)`` with ``(B, P)``
    params.  ``const`` is an optional input suffix shared by every point of an
    instance (a latent code); it is equivalent to concatenating it onto every
    input row.
    """
    _check_input(spec, inputs, 0 if const is None else const.shape[-1])
    layers = unflatten(spec, params)
    x = inputs
    for k, (w, b) in enumerate(layers):
        if k == 0:
            w, b = _first_layer(w, b, x, const)
        x = _activate(spec.activations[k], _linear(x, w, b), spec.omega0)
    return x


class DualBatch(NamedTuple):
    values: torch.Tensor  # (..., N, out)
    jacobian: torch.Tensor  # (..., N, out, k): d out / d position


def forward_with_spatial_grad(spec: DenseNetSpec, params: torch.Tensor, inputs: torch.Tensor,
                              const: torch.Tensor | None = None,
                              tangents: torch.Tensor | None = None) -> DualBatch:
    """Forward pass carrying the jacobian with respect to the position inputs.

    Every column of ``inputs`` is a position coordinate; latent codes travel in
    ``const`` and therefore never receive a jacobian.  ``tangents`` seeds the
    input jacobian as ``(..., k, N, d)`` (direction-major); identity by default.
    """
    _check_input(spec, inputs, 0 if const is None else const.shape[-1])
    layers = unflatten(spec, params)
    x = inputs
    jac = tangents  # (..., k, N, width); None means identity seed
    for k, (w, b) in enumerate(layers):
        if k == 0:
            w, b = _first_layer(w, b, x, const)
        z = _linear(x, w, b)
        wt = w.transpose(-1, -2)  # (..., i, o)
        if jac is None:
            # identity seed: row j of W^T, broadcast over points
            jac = wt.unsqueeze(-2).expand(*wt.shape[:-2], wt.shape[-2], z.shape[-2], wt.shape[-1])
        elif w.dim() == 2:
            jac = jac @ wt
        else:
            jac = torch.matmul(jac, wt.unsqueeze(-3))
        act = spec.activations[k]
        d = _activate_deriv(act, z, spec.omega0)
        if d is not None:
            jac = d.unsqueeze(-3) * jac
        x = _activate(act, z, spec.omega0)
    return DualBatch(x, jac.movedim(-3, -1))


def backward(loss: torch.Tensor, wrt: Sequence[torch.Tensor], node: str = "loss",
             retain_graph: bool = False) -> list[torch.Tensor]:
    """Gradients of a scalar loss; unused leaves get exact zeros."""
    if not torch.isfinite(loss).all():
        raise NonFiniteError(node)
    grads = torch.autograd.grad(loss, list(wrt), allow_unused=True, retain_graph=retain_graph)
    out = []
    for g, p in zip(grads, wrt):
        if g is None:
            g = torch.zeros_like(p)
        elif not torch.isfinite(g).all():
            raise NonFiniteError(f"d{node}/dparam")
        out.append(g)
    return out


@dataclass(frozen=True)
class HyperSpec:
    """One 3-layer ReLU generator per layer of the target network."""

    target: DenseNetSpec
    latent_dim: int
    hidden: int
    n_layers: int = 3
    out_scale: float = 1e-2

    def generators(self) -> list[DenseNetSpec]:
        return [DenseNetSpec.mlp(self.latent_dim, self.hidden, self.n_layers, size, activation="relu")
                for size in self.target.layer_sizes()]


def hyper_init(hspec: HyperSpec, seed: int | torch.Generator) -> list[torch.Tensor]:
    """Generator parameters whose output at a zero code is a sine-net init.

    The last generator layer gets small weights (scaled by ``out_scale``) and a
    bias equal to a fresh initialisation of the target layer; the target's
    output layer is further shrunk so the generated network starts close to
    zero output.
    """
    gen = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))
    target_init = unflatten(hspec.target, siren_init(hspec.target, gen))
    out = []
    n = hspec.target.n_layers
    for k, gspec in enumerate(hspec.generators()):
        p = siren_init(gspec, gen)
        w_last, b_last = unflatten(gspec, p)[-1]
        w, b = target_init[k]
        scale = 1e-2 if k == n - 1 else 1.0
        with torch.no_grad():
            w_last.mul_(hspec.out_scale * scale)
            b_last.copy_(torch.cat([w.reshape(-1), b]) * scale)
        out.append(p)
    return out


def hyper_forward(hspec: HyperSpec, hyper_params: Sequence[torch.Tensor],
                  beta: torch.Tensor) -> torch.Tensor:
    """Generate target-network parameters from ``beta`` (``(L,)`` or ``(B, L)``)."""
    gens = hspec.generators()
    if len(hyper_params) != len(gens):
        raise ConfigurationError(f"{len(hyper_params)} generators for {len(gens)} target layers")
    if beta.shape[-1] != hspec.latent_dim:
        raise ShapeError(f"code dimension {beta.shape[-1]} != {hspec.latent_dim}")
    chunks = []
    for gspec, p in zip(gens, hyper_params):
        if p.shape[-1] != gspec.n_params:
            raise ConfigurationError(f"generator has {p.shape[-1]} params, expected {gspec.n_params}")
        chunks.append(forward(gspec, p, beta.unsqueeze(-2)).squeeze(-2))
    return torch.cat(chunks, dim=-1)


@dataclass
class AdamState:
    m: list[torch.Tensor]
    v: list[torch.Tensor]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[torch.Tensor]) -> "AdamState":
        return cls([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])


def adam_step(state: AdamState, params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor],
              lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place Adam update with bias correction."""
    if len(state.m) != len(params) or len(grads) != len(params):
        raise ShapeError("Adam state does not match parameter list")
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            denom = (v / c2).sqrt_().add_(eps)
            p.addcdiv_(m / c1, denom, value=-lr)
