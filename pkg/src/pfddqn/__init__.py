"""Multi-AGV grid path planning with DDQN, PF-DDQN and EKF-DDQN trainers."""

from importlib import resources

__version__ = "0.1.0"


def bundled_map(name: str) -> str:
    """Path of a map shipped with the package, e.g. ``"trivial_3x3.map"``."""
    return str(resources.files(__name__) / "maps" / name)
