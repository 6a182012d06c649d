"""On-ramp merging lab: simulator, fault model, agents, training, evaluation."""

from ._oftlab import *  # noqa: F401,F403
from ._oftlab import __doc__  # noqa: F401
