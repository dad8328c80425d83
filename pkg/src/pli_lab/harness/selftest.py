"""Fast invariant checks runnable without the test suite (``pli-lab selftest``)."""

from __future__ import annotations

from typing import Callable

import numpy as np

from pli_lab.attack import optimal_logits, quality_q, recover_last_layer_input, row_estimates
from pli_lab.federation import era
from pli_lab.metrics import ssim, tv
from pli_lab.nn import layers
from pli_lab.nn.functional import cross_entropy
from pli_lab.nn.gradcheck import check_layer


def _gradients() -> str:
    rng = np.random.default_rng(0)
    cases = [
        (layers.Conv2d(2, 3, 3, 1, 1, rng=rng, dtype=np.float64), (2, 2, 6, 6)),
        (layers.ConvTranspose2d(3, 2, 4, 2, 1, rng=rng, dtype=np.float64), (2, 3, 3, 3)),
        (layers.BatchNorm2d(3, dtype=np.float64), (4, 3, 3, 3)),
        (layers.Linear(5, 4, rng=rng, dtype=np.float64), (3, 5)),
        (layers.MaxPool2d(2), (2, 2, 4, 4)),
        (layers.Tanh(), (3, 4)),
    ]
    worst = 0.0
    for layer, shape in cases:
        errs = check_layer(layer, rng.standard_normal(shape), seed=1)
        worst = max(worst, max(errs.values()))
    if worst > 1e-3:
        raise AssertionError(f"finite-difference mismatch {worst:.2e}")
    return f"max relative error {worst:.1e}"


def _optimum() -> str:
    rng = np.random.default_rng(1)
    for _ in range(20):
        j_, alpha = int(rng.integers(2, 30)), float(rng.uniform(0.5, 10))
        opt = optimal_logits(0, j_, alpha)
        best = quality_q(opt.client, opt.server, 0, alpha)
        for _ in range(100):
            p, q = rng.dirichlet(np.ones(j_)), rng.dirichlet(np.ones(j_))
            if quality_q(p, q, 0, alpha) > best + 1e-12:
                raise AssertionError("random simplex pair beat the analytic optimum")
    return "analytic optimum dominates 2000 samples"


def _recovery() -> str:
    rng = np.random.default_rng(2)
    z = rng.standard_normal(16)
    a, b = rng.standard_normal((5, 16)), rng.standard_normal(5)
    _, g = cross_entropy((a @ z + b)[None], np.array([2]))
    g = g[0]
    est = row_estimates(np.outer(g, z), g)
    rec = recover_last_layer_input(np.outer(g, z), g)
    err = max(np.abs(est - z).max(), np.abs(rec - z).max()) / np.abs(z).max()
    if err > 1e-5:
        raise AssertionError(f"recovery error {err:.2e}")
    return f"relative error {err:.1e}"


def _units() -> str:
    rng = np.random.default_rng(3)
    x = rng.uniform(-1, 1, (3, 16, 16))
    if ssim(x, x) != 1.0 or tv(np.full((3, 4, 4), 0.3)) != 0 or tv(np.array([[[1.0, -1], [-1, 1]]])) != 8:
        raise AssertionError("metric unit check failed")
    for _ in range(200):
        p = rng.dirichlet(np.ones(8))
        if np.argmax(era(p)) != np.argmax(p):
            raise AssertionError("sharpening changed the argmax")
    return "ssim, tv and sharpening units exact"


CHECKS: dict[str, Callable[[], str]] = {
    "gradients": _gradients,
    "optimal-pair": _optimum,
    "last-layer-recovery": _recovery,
    "metric-units": _units,
}


def run_selftest(echo=print) -> bool:
    ok = True
    for name, fn in CHECKS.items():
        try:
            echo(f"PASS {name}: {fn()}")
        except AssertionError as exc:
            ok = False
            echo(f"FAIL {name}: {exc}")
    return ok
