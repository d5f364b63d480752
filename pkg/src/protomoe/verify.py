"""Finite-difference verification suite behind the `gradcheck` CLI command.

Checks every differentiable tensor op and the composed expert-layer + MSE
loss (with routing pinned at the linearization point) against central
differences in double precision.
"""

from __future__ import annotations

import numpy as np

from .losses import RCLConfig, diffusion_loss
from .moe import MoELayerConfig, PrototypeMoELayer
from .router import partition_by_condition
from .tensor import Tensor, concat, gradcheck

OP_TOL = 1e-4
COMPOSED_TOL = 1e-3

_MASK = np.array([True, False, True, False])
_TAKE_IDX = np.array([[0, 2], [1, 3], [2, 0]])

# each case: (param shapes, loss builder over those params)
_OP_CASES = {
    "add": ([(3, 4), (3, 4)], lambda a, b: (a + b).sigmoid().sum()),
    "sub": ([(3, 4), (3, 4)], lambda a, b: ((a - b) ** 2.0).sum()),
    "mul": ([(3, 4), (3, 4)], lambda a, b: (a * b).tanh().sum()),
    "div": ([(3, 4), (3, 4)], lambda a, b: (a / (b * b + 1.0)).sum()),
    "matmul": ([(3, 4), (4, 2)], lambda a, b: ((a @ b) ** 2.0).sum()),
    "batched_matmul": ([(2, 3, 4), (2, 4, 2)], lambda a, b: (a @ b).tanh().sum()),
    "sum": ([(3, 4)], lambda a: (a.sum(axis=1) ** 2.0).sum()),
    "mean": ([(3, 4)], lambda a: (a.mean(axis=0) ** 2.0).sum()),
    "exp": ([(3, 4)], lambda a: a.exp().mean()),
    "log": ([(3, 4)], lambda a: (a * a + 0.5).log().mean()),
    "sigmoid": ([(3, 4)], lambda a: (a.sigmoid() * np.pi).sum()),
    "tanh": ([(3, 4)], lambda a: (a.tanh() * 1.3).sum()),
    "softmax": ([(3, 4)], lambda a: (a.softmax(axis=1) ** 2.0).sum()),
    "log_softmax": ([(3, 4)], lambda a: (a.log_softmax(axis=1) * 0.7).sum()),
    "gelu": ([(3, 4)], lambda a: a.gelu().sum()),
    "layer_norm": ([(3, 4)], lambda a: (a.layer_norm() ** 2.0).sum()),
    "l2_normalize": ([(3, 4)], lambda a: (a.l2_normalize(axis=1) * np.e).sum()),
    "gather_rows": ([(4, 3)], lambda a: (a.gather_rows(_MASK) ** 2.0).sum()),
    "scatter_rows": ([(4, 3), (2, 3)],
                     lambda a, v: a.scatter_rows(_MASK, v).gelu().sum()),
    "scatter_add_rows": ([(4, 3), (2, 3)],
                         lambda a, v: (a.scatter_add_rows(_MASK, v) ** 2.0).sum()),
    "concat": ([(2, 3), (3, 3)], lambda a, b: concat([a, b]).sigmoid().sum()),
    "take_along_rows": ([(3, 4)], lambda a: (a.take_along_rows(_TAKE_IDX) ** 2.0).sum()),
    "reshape_transpose": ([(3, 4)], lambda a: (a.reshape(4, 3).transpose(1, 0) ** 2.0).sum()),
}


def check_ops(seeds: int = 3) -> dict[str, float]:
    """Max finite-difference error per differentiable op over random seeds."""
    report = {}
    for name, (shapes, loss_fn) in _OP_CASES.items():
        worst = 0.0
        for s in range(seeds):
            gen = np.random.Generator(np.random.Philox(key=10_000 + 97 * s))
            params = [Tensor(gen.standard_normal(shape), requires_grad=True)
                      for shape in shapes]
            worst = max(worst, gradcheck(lambda: loss_fn(*params), params))
        report[name] = worst
    return report


def check_composed_layer(seed: int = 0) -> float:
    """Expert layer composed with MSE, routing held fixed; double precision."""
    gen = np.random.Generator(np.random.Philox(key=31_000 + seed))
    cfg = MoELayerConfig(n_experts=3, top_k=2, n_shared=1, n_uncond=1,
                         rcl=RCLConfig(lambda_rcl=1.0))
    layer = PrototypeMoELayer(6, cfg, seed=seed)
    x = Tensor(gen.standard_normal((2, 4, 6)), requires_grad=True)
    part = partition_by_condition(np.array([0, 9]), null_label=9, seq_len=4)
    target = Tensor(gen.standard_normal((2, 4, 6)))
    frozen = layer.forward(x, part, train=False).log.indices.copy()
    params = [x, layer.proto.p] + layer.pool.parameters()

    def loss_fn():
        out = layer.forward(x, part, train=False, forced_indices=frozen)
        return diffusion_loss(out.output, target)

    return gradcheck(loss_fn, params)


def gradcheck_report(scope: str = "full") -> dict[str, float]:
    """scope: "ops", "layer", or "full" (both)."""
    report: dict[str, float] = {}
    if scope in ("ops", "full"):
        report.update(check_ops())
    if scope in ("layer", "full"):
        report["composed_layer_mse"] = check_composed_layer()
    return report


def report_passes(report: dict[str, float]) -> bool:
    for name, err in report.items():
        tol = COMPOSED_TOL if name.startswith("composed") else OP_TOL
        if not err < tol:
            return False
    return True
