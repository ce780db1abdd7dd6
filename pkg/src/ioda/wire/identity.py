"""Per-gate Ed25519 identities."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Union

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from ioda.core_model import GateAddress, format_address, parse_address


@dataclass(frozen=True)
class GateIdentity:
    address: GateAddress
    verify_key: bytes  # raw 32-byte Ed25519 public key


class GateKeys:
    """A gate's identity together with its private signing key."""

    def __init__(self, address: Union[str, GateAddress], signing_key: Ed25519PrivateKey):
        self.address = parse_address(address) if isinstance(address, str) else address
        self._sk = signing_key
        raw = signing_key.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
        self.identity = GateIdentity(self.address, raw)

    @classmethod
    def generate(cls, address) -> "GateKeys":
        return cls(address, Ed25519PrivateKey.generate())

    @classmethod
    def from_seed(cls, address, seed: Union[str, bytes]) -> "GateKeys":
        """Deterministic keys for reproducible scenario runs."""
        seed = seed.encode() if isinstance(seed, str) else seed
        addr = address if isinstance(address, str) else format_address(address)
        material = hashlib.sha256(b"ioda-gate-key\0" + seed + b"\0" + addr.encode()).digest()
        return cls(address, Ed25519PrivateKey.from_private_bytes(material))

    @property
    def verify_key(self) -> bytes:
        return self.identity.verify_key

    def sign(self, data: bytes) -> bytes:
        return self._sk.sign(data)


def verify_signature(verify_key: bytes, signature: bytes, data: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(verify_key).verify(signature, data)
    except (InvalidSignature, ValueError):
        return False
    return True
