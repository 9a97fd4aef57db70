"""Finite-difference suite over every autodiff op and every training loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .losses import loss_base, loss_con, loss_con_hat, loss_md, loss_smd, pair_labels
from .model import Mode, TokenPolicy, forward_logit, forward_repr, init_params


@dataclass
class SuiteResult:
    name: str
    max_rel_error: float
    n_checked: int
    passed: bool


def _op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[], ad.Tensor], list[ad.Tensor]]]:
    # each case contracts the op output with fixed random weights
    P = ad.parameter
    cases = {}

    def unary(name, op, make):
        x = P(make((3, 4)))
        w = rng.normal(size=op(ad.constant(x.data)).shape)
        cases[name] = (lambda: ad.reduce_sum(ad.mul(op(x), ad.constant(w))), [x])

    def binary(name, op, sa=(3, 4), sb=(3, 4)):
        a, b = P(rng.normal(size=sa)), P(rng.normal(size=sb))
        shape = op(ad.constant(a.data), ad.constant(b.data)).shape
        w = rng.normal(size=shape)
        cases[name] = (lambda: ad.reduce_sum(ad.mul(op(a, b), ad.constant(w))), [a, b])

    binary("matmul", ad.matmul, (3, 4), (4, 2))
    binary("add", ad.add)
    binary("add[scalar]", ad.add, (1, 1), (3, 4))
    binary("sub", ad.sub)
    binary("sub[scalar]", ad.sub, (3, 4), (1, 1))
    binary("mul", ad.mul)
    binary("mul[scalar]", ad.mul, (1, 1), (3, 4))
    binary("concat_cols", ad.concat_cols, (3, 2), (3, 3))
    binary("add_row", ad.add_row, (3, 4), (1, 4))
    c = float(rng.normal())
    unary("scalar_mul", lambda x: ad.scalar_mul(x, c), lambda s: rng.normal(size=s))
    unary("neg", ad.neg, lambda s: rng.normal(size=s))
    unary("transpose", ad.transpose, lambda s: rng.normal(size=s))
    unary("relu", ad.relu, lambda s: rng.normal(size=s))
    unary("sigmoid", ad.sigmoid, lambda s: rng.normal(scale=2.0, size=s))
    unary("softplus", ad.softplus, lambda s: rng.normal(scale=2.0, size=s))
    unary("log", ad.log, lambda s: rng.uniform(0.5, 2.0, size=s))
    unary("exp", ad.exp, lambda s: rng.normal(size=s))
    unary("l2_normalize_rows", ad.l2_normalize_rows, lambda s: rng.normal(size=s))
    unary("reduce_sum", ad.reduce_sum, lambda s: rng.normal(size=s))
    unary("reduce_mean", ad.reduce_mean, lambda s: rng.normal(size=s))
    row = P(rng.normal(size=(1, 4)))
    w = rng.normal(size=(3, 4))
    cases["repeat_rows"] = (lambda: ad.reduce_sum(ad.mul(ad.repeat_rows(row, 3), ad.constant(w))), [row])
    return cases


def _loss_cases(rng: np.random.Generator, seed: int):
    dim_c, dim_t, n = 4, 3, 4
    params = init_params(dim_c, dim_t, d_f=5, d_p=3, seed=seed)
    # move tokens, biases and contrastive scalars off their init values
    for name in ("image_token", "tabular_token", "fuse_b", "head_b", "proj_b"):
        t = params.named()[name]
        t.data = rng.normal(scale=0.5, size=t.shape)
    params.log_scale.data = np.array([[rng.uniform(0.0, 1.0)]])
    params.logit_bias.data = np.array([[rng.uniform(-1.0, 1.0)]])
    x_c = rng.normal(size=(n, dim_c))
    x_t = rng.normal(size=(n, dim_t))
    y = np.array([0.0, 1.0, 1.0, 0.0])
    a = pair_labels(y)
    plist = list(params.named().values())
    pol = TokenPolicy.LEARNED

    def con(hat: bool):
        def f():
            z_c = forward_repr(params, x_c, x_t, "c", pol)
            z_t = forward_repr(params, x_c, x_t, "t", pol)
            t, b = ad.exp(params.log_scale), params.logit_bias
            if hat:
                return loss_con_hat(z_c, z_t, forward_repr(params, x_c, x_t, "f", pol), a, t, b)
            return loss_con(z_c, z_t, a, t, b)
        return f

    cases = {
        "loss_base": lambda: loss_base(forward_logit(params, x_c, x_t, Mode.BOTH, pol), y),
        "loss_md[image]": lambda: loss_md(params, x_c, x_t, y, Mode.IMAGE, pol)[0],
        "loss_md[tabular]": lambda: loss_md(params, x_c, x_t, y, Mode.TABULAR, pol)[0],
        "loss_md[both]": lambda: loss_md(params, x_c, x_t, y, Mode.BOTH, pol)[0],
        "loss_smd[lambda=0]": lambda: loss_smd(params, x_c, x_t, y, 0.0, pol),
        "loss_smd[lambda=1]": lambda: loss_smd(params, x_c, x_t, y, 1.0, pol),
        "loss_smd[lambda=2]": lambda: loss_smd(params, x_c, x_t, y, 2.0, pol),
        "loss_con": con(False),
        "loss_con_hat": con(True),
    }
    return {k: (f, plist) for k, f in cases.items()}


def run_suite(seeds=range(10), eps: float = 1e-5, tol: float = 1e-4) -> list[SuiteResult]:
    """Max relative error per op/loss across all seeds."""
    worst: dict[str, list] = {}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        cases = _op_cases(rng)
        cases.update(_loss_cases(rng, seed))
        for name, (f, params) in cases.items():
            rep = ad.check_gradients(f, params, eps, tol)
            w = worst.setdefault(name, [0.0, 0])
            w[0] = max(w[0], rep.max_rel_error)
            w[1] += rep.n_checked
    return [SuiteResult(k, v[0], v[1], v[0] < tol) for k, v in worst.items()]
