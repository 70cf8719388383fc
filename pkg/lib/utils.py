from importlib.metadata import PackageNotFoundError, version

import numpy as np

PACKAGE_NAME = "hjb-sos"


def code_version() -> str:
    try:
        return version(PACKAGE_NAME)
    except PackageNotFoundError:
        return "0.1.0+local"


def make_rng(seed: int | None = 0) -> np.random.Generator:
    return np.random.default_rng(seed)


def roundup_even(n: int) -> int:
    return n + (n % 2)


def rounddown_even(n: int) -> int:
    return n - (n % 2)


def clamp(value: np.ndarray, lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    """Elementwise min(max(value, lower), upper); infinite bounds are no-ops."""
    return np.minimum(np.maximum(value, lower), upper)
