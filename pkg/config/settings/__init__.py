# Settings package - import from base
from .base import *  # noqa: F401, F403
