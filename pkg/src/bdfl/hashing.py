"""Hash helpers shared by the overlay, the clients and the contract.

SHA-256 is the single hash used project-wide.
"""

import hashlib

import numpy as np

COORD_SALT = "bdfl-coord-v1"


def ring_coordinate(address: str, ring: int, salt: str = COORD_SALT) -> float:
    """First 8 digest bytes of H(salt|address|ring) as an integer, scaled into [0, 1)."""
    h = hashlib.sha256(f"{salt}|{address}|{ring}".encode()).digest()
    return int.from_bytes(h[:8], "big") / 2.0**64


def fingerprint(weights) -> str:
    """Hex SHA-256 over the little-endian float64 serialization of ``weights``."""
    buf = np.ascontiguousarray(weights, dtype="<f8").tobytes()
    return hashlib.sha256(buf).hexdigest()


def digest(weights) -> str:
    """Model digest h(w) kept by the contract; same construction as a fingerprint."""
    return fingerprint(weights)
