"""Randomised permutation-equivariance checks for joint-input networks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import Tensor, no_grad


@dataclass
class EquivarianceReport:
    trials: int
    max_deviation: float
    tolerance: float
    worst_n_agents: Optional[int] = None

    @property
    def passed(self) -> bool:
        return self.max_deviation <= self.tolerance


def _outputs(net, x: np.ndarray, hiddens: Optional[Sequence[np.ndarray]]) -> np.ndarray:
    with no_grad():
        if hiddens is None:
            out, new_h = net(Tensor(x))
        else:
            out, new_h = net(Tensor(x), [None if h is None else Tensor(h) for h in hiddens])
    parts = [out.data]
    for h in new_h or []:
        if h is not None:
            parts.append(h.data)
    return np.concatenate(parts, axis=-1)


def permutation_deviation(net, x: np.ndarray, perm: np.ndarray, hiddens=None) -> float:
    """max |f(P x) - P f(x)| for one joint input (hidden states permuted alongside)."""
    base = _outputs(net, x, hiddens)
    ph = None if hiddens is None else [None if h is None else h[..., perm, :] for h in hiddens]
    moved = _outputs(net, x[..., perm, :], ph)
    return float(np.max(np.abs(moved - base[..., perm, :])))


def assert_permutation_equivariant(
    net,
    trials: int = 100,
    tolerance: float = 1e-9,
    n_agents: Sequence[int] = (2, 5, 8),
    rng: Optional[np.random.Generator] = None,
    input_scale: float = 1.0,
    perm_sampler: Optional[Callable[[np.random.Generator, int], np.ndarray]] = None,
) -> EquivarianceReport:
    """Sample random joint inputs and permutations; report the worst deviation.

    Recurrent layers get random hidden states which are permuted with the
    inputs. The report carries the verdict; nothing is raised.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    sampler = perm_sampler or (lambda g, n: g.permutation(n))
    worst, worst_n = 0.0, None
    for n in n_agents:
        for _ in range(trials):
            x = rng.normal(scale=input_scale, size=(n, net.d_in))
            hiddens = None
            if hasattr(net, "initial_hiddens"):
                hiddens = [None if h is None else rng.normal(size=h.shape) for h in net.initial_hiddens((n,))]
            dev = permutation_deviation(net, x, sampler(rng, n), hiddens)
            if worst_n is None or dev > worst:
                worst, worst_n = dev, n
    return EquivarianceReport(trials=trials * len(n_agents), max_deviation=worst, tolerance=tolerance,
                              worst_n_agents=worst_n)


def swap_two(rng: np.random.Generator, n: int) -> np.ndarray:
    """Transposition of two distinct random rows."""
    perm = np.arange(n)
    i, j = rng.choice(n, size=2, replace=False)
    perm[i], perm[j] = perm[j], perm[i]
    return perm
