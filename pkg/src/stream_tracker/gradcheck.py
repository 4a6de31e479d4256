"""Central finite-difference checks of analytic gradients."""

import logging
from typing import Callable, Sequence

import numpy as np

from stream_tracker.models import GradCheckReport
from stream_tracker.tensor import ContractError, Tensor, no_grad

logger = logging.getLogger(__name__)

REL_ERROR_FLOOR = 1e-8


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    tol: float = 1e-4,
    eps: float = 1e-6,
    op_name: str = "op",
) -> GradCheckReport:
    """Compare backward() of `fn(*inputs)` against central differences.

    `fn` must return a scalar Tensor. Inputs are promoted to float64;
    rel error per element is |a - n| / max(|a|, |n|, 1e-8).
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    loss = fn(*leaves)
    if loss.size != 1:
        raise ContractError(f"grad_check({op_name}): closure must return a scalar, got shape {loss.shape}")
    loss.backward()
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

    max_rel = 0.0
    max_abs = 0.0
    with no_grad():
        for i, base in enumerate(arrays):
            for idx in np.ndindex(base.shape):
                plus = [a.copy() for a in arrays]
                minus = [a.copy() for a in arrays]
                plus[i][idx] += eps
                minus[i][idx] -= eps
                f_plus = fn(*[Tensor(a) for a in plus]).item()
                f_minus = fn(*[Tensor(a) for a in minus]).item()
                numeric = (f_plus - f_minus) / (2 * eps)
                a = float(analytic[i][idx])
                abs_err = abs(a - numeric)
                rel_err = abs_err / max(abs(a), abs(numeric), REL_ERROR_FLOOR)
                max_abs = max(max_abs, abs_err)
                max_rel = max(max_rel, rel_err)

    report = GradCheckReport(
        op_name=op_name,
        max_rel_error=max_rel,
        max_abs_error=max_abs,
        passed=max_rel <= tol,
        tolerance=tol,
    )
    logger.debug("grad_check %s: rel=%.3e abs=%.3e passed=%s", op_name, max_rel, max_abs, report.passed)
    return report
