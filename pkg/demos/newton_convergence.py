"""Watch the Newton pseudoinverse converge on a landmark Gram matrix.

Prints the residual trace, the chosen step scale and the distance to the
eigendecomposition reference after each iteration budget.
"""

import numpy as np

from softfree.bench import gram_from_token_field
from softfree.pinv import NewtonConfig, eigh_pinv, newton_pinv


def main():
    a = gram_from_token_field(49, np.random.default_rng(0))
    ref = eigh_pinv(a)
    print(f"Gram 49x49, condition number {np.linalg.cond(a):.3g}")

    _, report = newton_pinv(a, NewtonConfig(max_iters=20))
    print(f"alpha = {report.alpha_used:.4g} (exponent {report.alpha_exponent}, "
          f"one-norm test satisfied: {report.alpha_satisfied})")
    for k, r in enumerate(report.residuals):
        print(f"  iter {k:2d}  residual {r:.3e}")

    for budget in (5, 10, 15, 20):
        x, _ = newton_pinv(a, NewtonConfig(max_iters=budget))
        err = np.linalg.norm(x - ref) / np.linalg.norm(ref)
        print(f"T = {budget:2d}: relative error vs eigh reference {err:.2e}")


if __name__ == "__main__":
    main()
