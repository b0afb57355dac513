"""Avoid using magic numbers with these handy constants
Use the same values in tests, function returns.
Exit codes follow the revex convention: 0 success, 1 usage error,
2 data error, 3 numerical failure.
"""

from importlib.metadata import PackageNotFoundError, version


def _get_version() -> str:
    """Get package version from installed metadata, with fallback."""
    try:
        return version("revex")
    except PackageNotFoundError:
        return "0.0.0-dev"


PROGRAM_NAME = "revex"
APP_HELP = "Two-stage reverberant speaker extraction: dataset generation, training and evaluation"
VERSION = _get_version()

NO_ERROR = 0
USAGE_ERROR = 1
DATA_ERROR = 2
NUMERICAL_ERROR = 3

# signal defaults
SAMPLE_RATE = 8000
SPEED_OF_SOUND = 343.0  # m/s
EPSILON = 1e-8

# reporting clamp for dB values
DB_FLOOR = -40.0
DB_CEILING = 60.0
