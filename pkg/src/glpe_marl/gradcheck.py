"""Central finite-difference checks of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import GlpeLayer, GruGlpeLayer, LocalLayer, PlainMlp, build_cpe_policy
from .marl.mixers import QmixMixer

STEP = 1e-6
REL_TOL = 1e-5
ABS_TOL = 1e-7
SMALL_GRAD = 1e-4


@dataclass
class GradCheckResult:
    name: str
    instances: int
    max_rel_error: float
    max_abs_error_small: float
    passed: bool


def numerical_gradient(loss_fn: Callable[[], float], arr: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of ``loss_fn`` with respect to ``arr`` (perturbed in place, then restored)."""
    grad = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn()
        flat[i] = orig - h
        down = loss_fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def compare(analytic: np.ndarray, numeric: np.ndarray):
    """(max relative error over large entries, max absolute error over small entries, verdict)."""
    diff = np.abs(analytic - numeric)
    small = np.abs(analytic) < SMALL_GRAD
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = diff / np.maximum(np.abs(analytic), np.abs(numeric))
    max_rel = float(rel[~small].max()) if (~small).any() else 0.0
    max_abs = float(diff[small].max()) if small.any() else 0.0
    return max_rel, max_abs, max_rel <= REL_TOL and max_abs <= ABS_TOL


def check_case(build: Callable[[], Tensor], leaves: Sequence[Tensor]) -> tuple:
    """Gradient check of scalar ``build()`` against every tensor in ``leaves``."""
    for leaf in leaves:
        leaf.grad = None
    build().backward()
    analytic = [leaf.grad.copy() for leaf in leaves]
    worst_rel, worst_abs, ok = 0.0, 0.0, True
    for leaf, a in zip(leaves, analytic):
        numeric = numerical_gradient(lambda: build().item(), leaf.data)
        r, s, passed = compare(a, numeric)
        worst_rel, worst_abs, ok = max(worst_rel, r), max(worst_abs, s), ok and passed
    return worst_rel, worst_abs, ok


def _param(rng, *shape, away_from_zero=False) -> Tensor:
    x = rng.normal(size=shape)
    if away_from_zero:
        # keep kinks (relu, abs, argmax ties) well outside the difference stencil
        x = np.where(np.abs(x) < 0.05, np.sign(x + 1e-12) * 0.05, x)
    return Tensor(x, requires_grad=True)


def _project(out: Tensor, rng) -> Callable[[Tensor], Tensor]:
    weights = rng.normal(size=out.shape)
    return lambda y: ad.sum_all(ad.mul(y, weights))


def _cases(rng: np.random.Generator) -> Dict[str, Callable[[], tuple]]:
    """name -> factory returning (build, leaves) for one random instance."""

    def unary(fn, away=False, shape=(3, 4)):
        def make():
            x = _param(rng, *shape, away_from_zero=away)
            w = rng.normal(size=fn(x).shape)
            return (lambda: ad.sum_all(ad.mul(fn(x), w))), [x]
        return make

    def binary(fn, sa, sb):
        def make():
            a, b = _param(rng, *sa), _param(rng, *sb)
            w = rng.normal(size=np.broadcast_shapes(sa, sb) if fn is not ad.matmul else (sa[0], sb[-1]))
            return (lambda: ad.sum_all(ad.mul(fn(a, b), w))), [a, b]
        return make

    def linear_case():
        x, W, b = _param(rng, 2, 3, 4), _param(rng, 4, 5), _param(rng, 5)
        w = rng.normal(size=(2, 3, 5))
        return (lambda: ad.sum_all(ad.mul(ad.linear(x, W, b), w))), [x, W, b]

    def bmm_case():
        a, b = _param(rng, 3, 1, 4), _param(rng, 3, 4, 2)
        w = rng.normal(size=(3, 1, 2))
        return (lambda: ad.sum_all(ad.mul(ad.matmul(a, b), w))), [a, b]

    def stack_case():
        a, b = _param(rng, 2, 3), _param(rng, 2, 3)
        w = rng.normal(size=(2, 2, 3))
        return (lambda: ad.sum_all(ad.mul(ad.stack([a, b], axis=1), w))), [a, b]

    def gather_case():
        x = _param(rng, 3, 4, 5)
        idx = rng.integers(0, 5, size=(3, 4))
        w = rng.normal(size=(3, 4))
        return (lambda: ad.sum_all(ad.mul(ad.gather_last(x, idx), w))), [x]

    def gru_case():
        x, h = _param(rng, 2, 3, 4), _param(rng, 2, 3, 5)
        wi, wh = _param(rng, 4, 15), _param(rng, 5, 15)
        bi, bh = _param(rng, 15), _param(rng, 15)
        w = rng.normal(size=(2, 3, 5))
        return (lambda: ad.sum_all(ad.mul(ad.gru_cell(x, h, wi, wh, bi, bh), w))), [x, h, wi, wh, bi, bh]

    def mse_case():
        p, y = _param(rng, 4, 3), rng.normal(size=(4, 3))
        return (lambda: ad.mse(p, y)), [p]

    def masked_case():
        p, y = _param(rng, 4, 3), rng.normal(size=(4, 3))
        mask = (rng.random((4, 3)) < 0.7).astype(float)
        return (lambda: ad.masked_mse(p, y, mask)), [p]

    def module_case(make_module, in_shape, recurrent=False):
        def make():
            mod = make_module()
            x = _param(rng, *in_shape)
            leaves = [x] + mod.parameters()
            for p in mod.parameters():
                p.data[...] = rng.normal(scale=0.5, size=p.shape)
            if recurrent:
                h = _param(rng, *in_shape[:-1], mod.d_out)
                out_w = rng.normal(size=in_shape[:-1] + (mod.d_out,))
                return (lambda: ad.sum_all(ad.mul(mod(x, h)[0], out_w))), leaves + [h]
            out = mod(x)
            out = out[0] if isinstance(out, tuple) else out
            proj = _project(out, rng)
            return (lambda: proj(_first(mod(x)))), leaves
        return make

    def network_case():
        net = build_cpe_policy(4, 3, rng, hidden=5)
        for p in net.parameters():
            p.data[...] = rng.normal(scale=0.5, size=p.shape)
        xs = [_param(rng, 2, 3, 4) for _ in range(2)]
        w = rng.normal(size=(2, 2, 3, 3))

        def build():
            h = net.initial_hiddens((2, 3))
            total = None
            for t, x in enumerate(xs):
                q, h = net(x, h)
                term = ad.sum_all(ad.mul(q, w[t]))
                total = term if total is None else ad.add(total, term)
            return total
        return build, xs + net.parameters()

    def mixer_case():
        mix = QmixMixer(3, 4, rng, embed_dim=4, hypernet_dim=5)
        qs, states = _param(rng, 6, 3), rng.normal(size=(6, 4))
        w = rng.normal(size=6)
        return (lambda: ad.sum_all(ad.mul(mix(qs, states), w))), [qs] + mix.parameters()

    cases = {
        "matmul": binary(ad.matmul, (3, 4), (4, 2)),
        "matmul_batched": bmm_case,
        "linear": linear_case,
        "add_broadcast": binary(ad.add, (2, 3, 4), (2, 1, 4)),
        "sub": binary(ad.sub, (3, 4), (4,)),
        "mul": binary(ad.mul, (3, 4), (3, 4)),
        "square": unary(ad.square),
        "tanh": unary(ad.tanh),
        "elu": unary(ad.elu, away=True),
        "sigmoid": unary(ad.sigmoid),
        "relu": unary(ad.relu, away=True),
        "abs": unary(ad.abs_, away=True),
        "sum_axis": unary(lambda x: ad.sum_axis(x, -1)),
        "mean_over_agents": unary(ad.mean_over_agents, shape=(2, 5, 3)),
        "sum_over_agents": unary(ad.sum_over_agents, shape=(2, 5, 3)),
        "max_over_agents": unary(ad.max_over_agents, shape=(2, 5, 3)),
        "reshape": unary(lambda x: ad.reshape(x, (4, 3))),
        "stack": stack_case,
        "gather_last": gather_case,
        "gru_cell": gru_case,
        "mse": mse_case,
        "masked_mse": masked_case,
        "layer.local": module_case(lambda: LocalLayer(4, 3, rng, activation="elu"), (2, 3, 4)),
        "layer.glpe_mean_tanh": module_case(lambda: GlpeLayer(4, 3, rng, local_activation="elu",
                                                              pool_bias=True), (2, 3, 4)),
        "layer.glpe_sum": module_case(lambda: GlpeLayer(4, 3, rng, pooling="sum", global_activation="identity",
                                                        local_activation="identity"), (2, 3, 4)),
        "layer.glpe_max_tanh": module_case(lambda: GlpeLayer(4, 3, rng, pooling="max"), (2, 3, 4)),
        "layer.gru_glpe": module_case(lambda: GruGlpeLayer(4, 5, rng), (2, 3, 4), recurrent=True),
        "layer.plain_mlp": module_case(lambda: PlainMlp(3, 2, [4], 2, rng), (2, 3, 2)),
        "network.cpe_unrolled": network_case,
        "mixer.qmix": mixer_case,
    }
    return cases


def _first(out):
    return out[0] if isinstance(out, tuple) else out


def run_grad_suite(instances: int = 20, seed: int = 0, names: Sequence[str] | None = None) -> List[GradCheckResult]:
    rng = np.random.default_rng(seed)
    cases = _cases(rng)
    results = []
    for name, make in cases.items():
        if names is not None and name not in names:
            continue
        worst_rel, worst_abs, ok = 0.0, 0.0, True
        for _ in range(instances):
            build, leaves = make()
            r, s, passed = check_case(build, leaves)
            worst_rel, worst_abs, ok = max(worst_rel, r), max(worst_abs, s), ok and passed
        results.append(GradCheckResult(name, instances, worst_rel, worst_abs, ok))
    return results
