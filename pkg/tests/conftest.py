import numpy as np
import pytest

from promptalign import ot


@pytest.fixture(autouse=True)
def assert_plan_marginals():
    """Every converged plan produced anywhere in the suite must satisfy
    both marginal constraints within its configured tolerance."""
    seen = []

    def check(plan):
        seen.append(plan)
        assert (plan.matrix >= 0.0).all()
        if plan.converged:
            row_err = np.abs(plan.matrix.sum(axis=1) - plan.source.weights).sum()
            col_err = np.abs(plan.matrix.sum(axis=0) - plan.target.weights).sum()
            assert row_err <= plan.tolerance
            assert col_err <= plan.tolerance

    ot.PLAN_OBSERVERS.append(check)
    yield seen
    ot.PLAN_OBSERVERS.remove(check)
