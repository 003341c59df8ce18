"""Python bindings for the clipcap library."""

from ._clipcap import *  # noqa: F401,F403
from ._clipcap import Error  # noqa: F401
