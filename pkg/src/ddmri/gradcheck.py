"""Central finite-difference oracle for analytic gradients.

The check perturbs every scalar of every parameter, so callers are expected
to use small (toy-sized) configurations. It must run at float64: a float32
ParamStore is rejected because central differences at step ~1e-4 drown in
rounding noise there.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import EngineError, ParamStore, Tape, backward


@dataclass
class GradCheckReport:
    step: float
    tol: float
    max_rel_err: float = 0.0
    worst_param: str = ""
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status}: max rel err {self.max_rel_err:.3e} (tol {self.tol:.1e}) "
            f"at {self.worst_param or '<none>'}"
        )


def rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(1.0, abs(a), abs(n))


def finite_diff_check(f, params: ParamStore, step: float = 1e-4, tol: float = 1e-4,
                      max_elements_per_param: int | None = None) -> GradCheckReport:
    """Compare analytic gradients of ``f(params)`` against central differences.

    ``f`` must be a deterministic scalar-valued function of the store and
    smooth within ``step`` of the evaluation point (relu/max kinks inside the
    perturbation interval invalidate a central difference). Returns the
    per-parameter max relative error; the check passes iff the overall max is
    below ``tol``. ``max_elements_per_param`` caps the perturbed scalars per
    parameter with an evenly strided deterministic subset.
    """
    if params.dtype != np.float64:
        raise EngineError("finite_diff_check requires a float64 ParamStore")

    params.zero_grads()
    with Tape() as tape:
        loss = f(params)
    if loss.size != 1:
        raise EngineError(f"finite_diff_check: f must be scalar-valued, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise EngineError("finite_diff_check: non-finite loss")
    backward(loss, tape)
    analytic = {name: t.grad.copy() for name, t in params.items()}

    report = GradCheckReport(step=step, tol=tol)
    for name, t in params.items():
        flat = t.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        if max_elements_per_param is None or flat.size <= max_elements_per_param:
            indices = range(flat.size)
        else:
            indices = np.unique(np.linspace(0, flat.size - 1, max_elements_per_param, dtype=int))
        worst = 0.0
        for i in indices:
            orig = flat[i]
            flat[i] = orig + step
            f_plus = f(params).item()
            flat[i] = orig - step
            f_minus = f(params).item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            worst = max(worst, rel_err(a_flat[i], numeric))
        report.per_param[name] = worst
        if worst >= report.max_rel_err:
            if worst > report.max_rel_err or not report.worst_param:
                report.max_rel_err = worst
                report.worst_param = name
    return report
