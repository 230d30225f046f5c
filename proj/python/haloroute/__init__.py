"""Python bindings for the haloroute core."""

from ._core import *  # noqa: F401,F403
from ._core import ConfigError, DependencyError, GeometryError, NumericError  # noqa: F401
