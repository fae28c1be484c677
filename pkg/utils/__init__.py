"""
HLSIRM - Utilities Package
"""
from utils.errors import HlsirmError
from utils.helpers import canonical_json, csv_banner, derive_seed, short_hash
from utils.linalg import is_spd, psd_sqrt

__all__ = [
    "HlsirmError",
    "canonical_json",
    "csv_banner",
    "derive_seed",
    "short_hash",
    "is_spd",
    "psd_sqrt",
]
