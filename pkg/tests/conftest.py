import numpy as np
import pytest

from tabdoor import _jit
from tabdoor.dataset import Dataset, FeatureSpec, Schema

BACKENDS = ["numpy"] + (["numba"] if _jit.HAVE_NUMBA else [])


@pytest.fixture(params=BACKENDS)
def backend(request):
    """Run the test once per kernel backend."""
    previous = _jit.set_backend(request.param)
    yield request.param
    _jit.set_backend(previous)


def toy_schema(task="regression", city_values=("a", "b", "c")):
    target = (FeatureSpec("y", "numeric", role="target") if task == "regression"
              else FeatureSpec("y", "binary", allowed_values=("0", "1"), role="target"))
    return Schema((
        FeatureSpec("age", "numeric", numeric_bounds=(0, 100)),
        FeatureSpec("city", "categorical", allowed_values=city_values),
        FeatureSpec("smoker", "binary", allowed_values=("no", "yes")),
        target,
    ), "regression" if task == "regression" else "binary_classification")


def toy_dataset(n=60, seed=0, task="regression", city_values=("a", "b", "c")):
    rng = np.random.default_rng(seed)
    recs = []
    for _ in range(n):
        age = float(rng.integers(18, 65))
        city = str(rng.choice(["a", "b", "c"]))
        smoker = str(rng.choice(["no", "yes"]))
        if task == "regression":
            y = age * 10 + (city == "c") * 200 + (smoker == "yes") * 300 + rng.normal(0, 5)
        else:
            y = str(int(rng.uniform() < (0.6 if smoker == "yes" else 0.1)))
        recs.append({"age": age, "city": city, "smoker": smoker, "y": y})
    return Dataset.from_records(toy_schema(task, city_values), recs)
