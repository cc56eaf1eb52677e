"""Central finite-difference checks for hand-written gradients."""

from dataclasses import dataclass, field

import numpy as np


def numerical_gradient(f, x, eps=1e-5):
    """Central differences of scalar ``f()`` w.r.t. array ``x``, perturbed in place."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        grad.reshape(-1)[i] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(analytic, numeric):
    """``||a - n|| / max(||a||, ||n||)``; 0 when both vanish."""
    num = np.linalg.norm(np.asarray(analytic) - np.asarray(numeric))
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    return 0.0 if den == 0 else float(num / den)


@dataclass
class GradCheckReport:
    errors: dict = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self):
        return self.max_error < self.tol

    def __str__(self):
        parts = ", ".join(f"{k}={v:.2e}" for k, v in self.errors.items())
        return f"gradcheck {'PASS' if self.passed else 'FAIL'} max={self.max_error:.2e} ({parts})"


def gradient_check(loss_fn, params, analytic, eps=1e-5, tol=1e-4):
    """Compare ``analytic[name]`` with finite differences of ``loss_fn()``.

    ``loss_fn`` must read the arrays in ``params`` (mutated in place during
    the check and restored afterwards).
    """
    report = GradCheckReport(tol=tol)
    for name, arr in params.items():
        numeric = numerical_gradient(loss_fn, arr, eps)
        report.errors[name] = relative_error(analytic[name], numeric)
    return report
