"""Finite-difference verification of the analytic MASR gradients.

Each random configuration draws dimensions, cascade depth, head variant,
loss options and a small batch, then compares every parameter group's
analytic gradient with central differences of the batch objective.
"""

from dataclasses import dataclass

import numpy as np

from .model import BETA_MODES, MasrParams, ModelShape, RegularizerTable, batch_loss, loss_and_grad
from .numerics import finite_diff_gradient, relative_error

TOLERANCE = 1e-4
STEP = 1e-5


@dataclass
class Problem:
    params: MasrParams
    X: np.ndarray
    A: np.ndarray
    Ahat: np.ndarray
    y: np.ndarray
    reg: RegularizerTable
    mode: str
    beta_mode: str
    mean_over_attributes: bool


@dataclass
class GroupCheck:
    config: int
    group: str
    rel_error: float
    passed: bool


def random_problem(rng, max_d=32, max_m=16, max_K=5, max_depth=3, max_batch=4):
    shape = ModelShape(
        d=int(rng.integers(1, max_d + 1)),
        m=int(rng.integers(1, max_m + 1)),
        K=int(rng.integers(2, max_K + 1)),
        depth=int(rng.integers(1, max_depth + 1)),
        attr_hidden=int(rng.choice([0, 0, 3])),
        adapter=bool(rng.random() < 0.3),
    )
    params = MasrParams.init(shape, rng)
    # widen the draw so gates and ReLUs see both regimes
    for name, arr in params.items():
        if name != "adapter.weight":
            params.arrays[name] = arr * rng.uniform(1.0, 3.0)
        else:
            params.arrays[name] = arr + 0.1 * rng.normal(size=arr.shape)
    n = int(rng.integers(1, max_batch + 1))
    X = rng.normal(size=(n, shape.d))
    A = rng.uniform(0.0, 1.0, size=(n, shape.m)) * (rng.random((n, shape.m)) < 0.6)
    Ahat = (rng.random((n, shape.m)) < 0.4).astype(np.float64)
    y = rng.integers(0, shape.K, size=n)
    reg = RegularizerTable(rng.uniform(0.0, 3.0, size=(shape.m, shape.K)))
    return Problem(
        params, X, A, Ahat, y, reg,
        mode="joint" if rng.random() < 0.85 else "scene_only",
        beta_mode=str(rng.choice(BETA_MODES)),
        mean_over_attributes=bool(rng.random() < 0.8),
    )


def check_problem(problem, index=0, tol=TOLERANCE, h=STEP):
    opts = dict(mode=problem.mode, beta_mode=problem.beta_mode,
                mean_over_attributes=problem.mean_over_attributes)
    _, grads = loss_and_grad(problem.params, problem.X, problem.A, problem.Ahat, problem.y, problem.reg, **opts)
    results = []
    probe = problem.params.copy()
    for name, value in problem.params.items():

        def objective(w, name=name):
            probe.arrays[name] = w
            return batch_loss(probe, problem.X, problem.A, problem.Ahat, problem.y, problem.reg, **opts).total

        numeric = finite_diff_gradient(objective, value, h)
        probe.arrays[name] = value
        err = relative_error(grads[name], numeric, floor=1e-6)
        results.append(GroupCheck(index, name, err, err < tol))
        if name.startswith("attr.") and value.ndim >= 1 and value.shape[0] == problem.params.shape.m:
            # one more check per attribute branch
            for j in range(value.shape[0]):
                e = relative_error(grads[name][j], numeric[j], floor=1e-6)
                results.append(GroupCheck(index, f"{name}[{j}]", e, e < tol))
    return results


def run_gradcheck(n_configs=100, seed=0, tol=TOLERANCE, h=STEP):
    rng = np.random.default_rng(seed)
    results = []
    for i in range(n_configs):
        results.extend(check_problem(random_problem(rng), i, tol, h))
    return results
