"""Permutation-equivariant layers and the baseline networks they are compared with."""

from __future__ import annotations

from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor


class ComparisonError(ValueError):
    """Raised when two networks cannot be compared layer by layer."""


class Module:
    """Minimal parameter container; parameters and submodules register on assignment."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"parameter names differ: missing={missing} unexpected={extra}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data[...] = arr

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return ad.parameter(rng.uniform(-bound, bound, size=shape))


def _zeros(shape) -> Tensor:
    return ad.parameter(np.zeros(shape))


def _check_width(x: Tensor, width: int, who: str) -> None:
    if x.shape[-1] != width:
        raise DimensionError(f"{who}: expected input width {width}, got {x.shape[-1]}")


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.weight = _uniform(rng, d_in, (d_in, d_out))
        self.bias = _zeros((d_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        _check_width(x, self.d_in, "Linear")
        return ad.linear(x, self.weight, self.bias)


class LocalLayer(Module):
    """Affine map plus activation applied to each agent row independently.

    This is the local sub-layer of a GLPE layer on its own, i.e. one layer of
    a parameter-shared distributed policy.
    """

    is_recurrent = False

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, activation: str = "relu"):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.activation = activation
        self.w_loc = _uniform(rng, d_in, (d_in, d_out))
        self.b_loc = _zeros((d_out,))

    def __call__(self, x: Tensor) -> Tensor:
        _check_width(x, self.d_in, "LocalLayer")
        return ad.elementwise(self.activation, ad.linear(x, self.w_loc, self.b_loc))


class GlpeLayer(Module):
    """Global-local permutation-equivariant layer.

    Row i of the output is ``local_act(x_i W_loc + b_loc) + global_act(pool(x) W_pool [+ b_pool])``.
    The pooled term is computed once per joint input and broadcast to every
    agent, so the layer is exactly equivariant and its parameters do not
    depend on the number of agents.
    """

    is_recurrent = False

    def __init__(
        self,
        d_in: int,
        d_out: int,
        rng: np.random.Generator,
        pooling: str = "mean",
        global_activation: str = "tanh",
        local_activation: str = "relu",
        pool_bias: bool = False,
    ):
        super().__init__()
        if pooling not in ad.POOLINGS:
            raise ValueError(f"unknown pooling {pooling!r}")
        if global_activation not in ("tanh", "identity"):
            raise ValueError(f"unknown global activation {global_activation!r}")
        if local_activation not in ("elu", "relu", "identity"):
            raise ValueError(f"unknown local activation {local_activation!r}")
        self.d_in, self.d_out = d_in, d_out
        self.pooling = pooling
        self.global_activation = global_activation
        self.local_activation = local_activation
        self.w_loc = _uniform(rng, d_in, (d_in, d_out))
        self.b_loc = _zeros((d_out,))
        self.w_pool = _uniform(rng, d_in, (d_in, d_out))
        self.b_pool = _zeros((d_out,)) if pool_bias else None

    def local_term(self, x: Tensor) -> Tensor:
        return ad.elementwise(self.local_activation, ad.linear(x, self.w_loc, self.b_loc))

    def global_term(self, x: Tensor) -> Tensor:
        """Pooled contribution with a singleton agent axis, shape [..., 1, d_out]."""
        pooled = ad.POOLINGS[self.pooling](x, keepdims=True)
        return ad.elementwise(self.global_activation, ad.linear(pooled, self.w_pool, self.b_pool))

    def __call__(self, x: Tensor) -> Tensor:
        _check_width(x, self.d_in, "GlpeLayer")
        if x.ndim < 2:
            raise DimensionError(f"GlpeLayer needs a joint input [..., N, d], got {x.shape}")
        return ad.add(self.local_term(x), self.global_term(x))


class GruGlpeLayer(Module):
    """GRU cell shared by all agents and applied row-wise; it has no global sub-layer."""

    is_recurrent = True

    def __init__(self, d_in: int, d_hidden: int, rng: np.random.Generator):
        super().__init__()
        self.d_in, self.d_out = d_in, d_hidden
        self.w_in = _uniform(rng, d_in, (d_in, 3 * d_hidden))
        self.w_hid = _uniform(rng, d_hidden, (d_hidden, 3 * d_hidden))
        self.b_in = _zeros((3 * d_hidden,))
        self.b_hid = _zeros((3 * d_hidden,))

    def __call__(self, x: Tensor, h: Tensor) -> Tuple[Tensor, Tensor]:
        _check_width(x, self.d_in, "GruGlpeLayer")
        if h.shape[-1] != self.d_out:
            raise DimensionError(f"GruGlpeLayer: hidden width {h.shape[-1]} != {self.d_out}")
        if x.shape[:-1] != h.shape[:-1]:
            raise DimensionError(f"GruGlpeLayer: {x.shape[:-1]} input rows vs {h.shape[:-1]} hidden rows")
        h_new = ad.gru_cell(x, h, self.w_in, self.w_hid, self.b_in, self.b_hid)
        return h_new, h_new


Hiddens = List[Optional[Tensor]]


class GlpeNetwork(Module):
    """Stack of row-wise layers over joint inputs ``[..., N, d]``.

    Holds any mix of :class:`GlpeLayer`, :class:`LocalLayer` and
    :class:`GruGlpeLayer`. One hidden-state slot exists per recurrent layer.
    """

    def __init__(self, layers: Sequence[Module]):
        super().__init__()
        self.layers = list(layers)
        for a, b in zip(self.layers, self.layers[1:]):
            if a.d_out != b.d_in:
                raise DimensionError(f"layer widths do not chain: {a.d_out} -> {b.d_in}")
        for i, layer in enumerate(self.layers):
            setattr(self, f"layer{i}", layer)

    @property
    def d_in(self) -> int:
        return self.layers[0].d_in

    @property
    def d_out(self) -> int:
        return self.layers[-1].d_out

    def initial_hiddens(self, rows_shape: Tuple[int, ...]) -> Hiddens:
        return [Tensor(np.zeros(rows_shape + (layer.d_out,))) if layer.is_recurrent else None for layer in self.layers]

    def __call__(self, x: Tensor, hiddens: Optional[Hiddens] = None) -> Tuple[Tensor, Hiddens]:
        if hiddens is None:
            hiddens = self.initial_hiddens(x.shape[:-1])
        if len(hiddens) != len(self.layers):
            raise DimensionError(f"expected {len(self.layers)} hidden slots, got {len(hiddens)}")
        new_hiddens: Hiddens = []
        for layer, h in zip(self.layers, hiddens):
            if layer.is_recurrent:
                if h is None:
                    raise DimensionError("recurrent layer is missing its hidden state")
                x, h = layer(x, h)
                new_hiddens.append(h)
            else:
                x = layer(x)
                new_hiddens.append(None)
        return x, new_hiddens

    def distributed_equivalent(self, rng: Optional[np.random.Generator] = None) -> "GlpeNetwork":
        """Same depth and widths with every pooled sub-layer removed."""
        rng = rng if rng is not None else np.random.default_rng(0)
        layers: List[Module] = []
        for layer in self.layers:
            if isinstance(layer, GruGlpeLayer):
                layers.append(GruGlpeLayer(layer.d_in, layer.d_out, rng))
            elif isinstance(layer, GlpeLayer):
                layers.append(LocalLayer(layer.d_in, layer.d_out, rng, activation=layer.local_activation))
            else:
                layers.append(LocalLayer(layer.d_in, layer.d_out, rng, activation=layer.activation))
        return GlpeNetwork(layers)

    def structure(self) -> List[Tuple[str, int, int]]:
        return [("gru" if layer.is_recurrent else "affine", layer.d_in, layer.d_out) for layer in self.layers]


class PlainMlp(Module):
    """Fully connected network over the flattened joint input ``[N * d_in] -> [N * d_out]``."""

    def __init__(self, n_agents: int, d_in: int, hidden: Sequence[int], d_out: int, rng: np.random.Generator,
                 activation: str = "elu"):
        super().__init__()
        self.n_agents, self.d_in, self.d_out = n_agents, d_in, d_out
        self.activation = activation
        widths = [n_agents * d_in, *hidden, n_agents * d_out]
        self.layers = [Linear(a, b, rng) for a, b in zip(widths, widths[1:])]
        for i, layer in enumerate(self.layers):
            setattr(self, f"layer{i}", layer)

    def __call__(self, x: Tensor, hiddens=None):
        lead = x.shape[:-2]
        if x.shape[-2:] != (self.n_agents, self.d_in):
            raise DimensionError(f"PlainMlp expects [..., {self.n_agents}, {self.d_in}], got {x.shape}")
        h = ad.reshape(x, lead + (self.n_agents * self.d_in,))
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = ad.elementwise(self.activation, h)
        return ad.reshape(h, lead + (self.n_agents, self.d_out)), None


def build_glpe_network(d_in: int, hidden: int, d_out: int, n_layers: int, rng: np.random.Generator,
                       pooling: str = "mean", global_activation: str = "tanh",
                       local_activation: str = "elu", pool_bias: bool = False) -> GlpeNetwork:
    """Feedforward GLPE stack; the last layer has no local activation."""
    widths = [d_in] + [hidden] * (n_layers - 1) + [d_out]
    layers = []
    for i, (a, b) in enumerate(zip(widths, widths[1:])):
        last = i == n_layers - 1
        layers.append(GlpeLayer(a, b, rng, pooling=pooling, global_activation=global_activation,
                                local_activation="identity" if last else local_activation,
                                pool_bias=pool_bias))
    return GlpeNetwork(layers)


def build_cpe_policy(d_obs: int, n_actions: int, rng: np.random.Generator, hidden: int = 64) -> GlpeNetwork:
    """Centralized policy: GLPE -> GRU-GLPE -> GLPE, one Q row per agent."""
    return GlpeNetwork([
        GlpeLayer(d_obs, hidden, rng, local_activation="relu"),
        GruGlpeLayer(hidden, hidden, rng),
        GlpeLayer(hidden, n_actions, rng, local_activation="identity"),
    ])


def build_distributed_policy(d_obs: int, n_actions: int, rng: np.random.Generator, hidden: int = 64) -> GlpeNetwork:
    """Parameter-shared per-agent policy: affine -> GRU -> affine."""
    return GlpeNetwork([
        LocalLayer(d_obs, hidden, rng, activation="relu"),
        GruGlpeLayer(hidden, hidden, rng),
        LocalLayer(hidden, n_actions, rng, activation="identity"),
    ])


def param_count(net: Module) -> int:
    return net.param_count()


def check_size_bound(glpe: GlpeNetwork, distributed: GlpeNetwork) -> bool:
    """True when ``glpe`` holds at most twice the parameters of its distributed counterpart."""
    if not isinstance(glpe, GlpeNetwork) or not isinstance(distributed, GlpeNetwork):
        raise ComparisonError("both networks must be layer stacks")
    if glpe.structure() != distributed.structure():
        raise ComparisonError(f"layer structures differ: {glpe.structure()} vs {distributed.structure()}")
    return param_count(glpe) <= 2 * param_count(distributed)
