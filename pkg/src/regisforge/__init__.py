"""Registers, timelines, linkage and frame-calibrated estimation for administrative data."""

from .errors import RegisforgeError
from .idforge import IdGenerator, check_digit, make_svid, validate_svid

__version__ = "0.1.0"

__all__ = ["IdGenerator", "RegisforgeError", "check_digit", "make_svid", "validate_svid", "__version__"]
