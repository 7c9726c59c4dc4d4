"""
signatures.py - Pluggable authenticity schemes for transactions, seals and votes.

The default keyed-hash scheme is an HMAC over the payload with a per-identity
secret derived from the run seed. It is only meaningful inside a closed
simulation. The Ed25519 scheme uses real asymmetric keys from the
cryptography package and is selected with consensus.signature_scheme.
"""

import hmac
import logging
from dataclasses import dataclass
from typing import Dict

from cryptography.exceptions import InvalidSignature as CryptoInvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from codec import digest, uint_bytes
from constants import HASH_ALGORITHM

logger = logging.getLogger(__name__)


class SignatureError(Exception):
    """Raised for unknown schemes or identities."""
    pass


@dataclass(frozen=True)
class KeyPair:
    identity: str
    private: object
    public: bytes


class KeyedHashScheme:
    """Keyed-hash stub: sign = HMAC(secret(identity), payload)."""

    name = "keyed-hash"

    def keygen(self, identity: str, seed: int) -> KeyPair:
        secret = digest(b"chainbench-key|" + uint_bytes(seed) + b"|" + identity.encode("utf-8"))
        # Closed simulation: the verifier holds the same secret
        return KeyPair(identity=identity, private=secret, public=secret)

    def sign(self, pair: KeyPair, payload: bytes) -> bytes:
        return hmac.new(pair.private, payload, HASH_ALGORITHM).digest()

    def verify(self, pair: KeyPair, payload: bytes, signature: bytes) -> bool:
        expected = hmac.new(pair.public, payload, HASH_ALGORITHM).digest()
        return hmac.compare_digest(expected, signature)


class Ed25519Scheme:
    """Ed25519 signatures with keys derived deterministically from the seed."""

    name = "ed25519"

    def __init__(self):
        self._public_keys: Dict[bytes, Ed25519PublicKey] = {}

    def keygen(self, identity: str, seed: int) -> KeyPair:
        material = digest(b"chainbench-ed25519|" + uint_bytes(seed) + b"|" + identity.encode("utf-8"))
        private = Ed25519PrivateKey.from_private_bytes(material)
        public = private.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
        return KeyPair(identity=identity, private=private, public=public)

    def sign(self, pair: KeyPair, payload: bytes) -> bytes:
        return pair.private.sign(payload)

    def verify(self, pair: KeyPair, payload: bytes, signature: bytes) -> bool:
        key = self._public_keys.get(pair.public)
        if key is None:
            key = Ed25519PublicKey.from_public_bytes(pair.public)
            self._public_keys[pair.public] = key
        try:
            key.verify(signature, payload)
            return True
        except CryptoInvalidSignature:
            return False


SCHEMES = {
    KeyedHashScheme.name: KeyedHashScheme,
    Ed25519Scheme.name: Ed25519Scheme,
}


def make_scheme(name: str):
    try:
        return SCHEMES[name]()
    except KeyError:
        raise SignatureError(f"Unknown signature scheme: {name}")


class KeyRegistry:
    """
    Holds the key pairs of every node and client identity in one run.

    Keys are derived lazily from (seed, identity), so every node sees the same
    registry without a key exchange.
    """

    def __init__(self, scheme_name: str = KeyedHashScheme.name, seed: int = 0):
        self.scheme = make_scheme(scheme_name)
        self.seed = seed
        self._pairs: Dict[str, KeyPair] = {}
        self.signed = 0
        self.verified = 0

    def pair(self, identity: str) -> KeyPair:
        pair = self._pairs.get(identity)
        if pair is None:
            pair = self.scheme.keygen(identity, self.seed)
            self._pairs[identity] = pair
        return pair

    def public_key(self, identity: str) -> bytes:
        return self.pair(identity).public

    def sign(self, identity: str, payload: bytes) -> bytes:
        self.signed += 1
        return self.scheme.sign(self.pair(identity), payload)

    def verify(self, identity: str, payload: bytes, signature: bytes) -> bool:
        self.verified += 1
        if not signature:
            return False
        return self.scheme.verify(self.pair(identity), payload, signature)


def node_identity(node_id: int) -> str:
    return f"node-{node_id}"


def client_identity(client_id: int) -> str:
    return f"client-{client_id}"
