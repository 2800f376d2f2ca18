"""Light wrapper around the finite-difference sweep registry.

The full 20-seed sweep is acceptance criterion territory
(tests/test_acceptance.py); here every registered check runs on a couple of
seeds so a broken gradient rule fails fast and close to its name.
"""

import pytest

from dynssm.gradcheck import CHECKS, run_gradcheck


@pytest.mark.parametrize("name", sorted(CHECKS))
def test_gradcheck_two_seeds(name):
    worst = run_gradcheck(seeds=2, only=[name])[name]
    assert worst < 1e-4, f"{name}: max relative error {worst:.3e}"
