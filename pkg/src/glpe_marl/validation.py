"""Input checks for joint (multi-agent) arrays."""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np


def check_joint_array(X, name: str = "X", n_agents: Optional[int] = None,
                      width: Optional[int] = None) -> np.ndarray:
    """Return ``X`` as a float64 array of shape [count, N, d].

    A single joint input [N, d] is promoted to a batch of one.
    """
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"{name} must have shape [count, n_agents, width]; got {arr.shape}")
    if 0 in arr.shape:
        raise ValueError(f"{name} is empty: shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains NaN or infinity")
    if n_agents is not None and arr.shape[1] != n_agents:
        raise ValueError(f"{name} has {arr.shape[1]} agents; this model was fit with {n_agents}")
    if width is not None and arr.shape[2] != width:
        raise ValueError(f"{name} has per-agent width {arr.shape[2]}; expected {width}")
    return arr


def check_joint_pair(X, y) -> Tuple[np.ndarray, np.ndarray]:
    X = check_joint_array(X, "X")
    y = check_joint_array(y, "y")
    if X.shape[:2] != y.shape[:2]:
        raise ValueError(f"X and y disagree on [count, n_agents]: {X.shape[:2]} vs {y.shape[:2]}")
    return X, y


def check_random_state(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
