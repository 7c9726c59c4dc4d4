import pytest

from signatures import (
    KeyRegistry,
    SignatureError,
    client_identity,
    node_identity,
)


@pytest.mark.parametrize("scheme", ["keyed-hash", "ed25519"])
def test_sign_and_verify(scheme):
    registry = KeyRegistry(scheme, seed=3)
    signature = registry.sign(node_identity(1), b"payload")
    assert registry.verify(node_identity(1), b"payload", signature)
    assert not registry.verify(node_identity(1), b"payloaD", signature)
    assert not registry.verify(node_identity(2), b"payload", signature)
    assert not registry.verify(node_identity(1), b"payload", b"")
    assert registry.signed == 1
    assert registry.verified == 4


@pytest.mark.parametrize("scheme", ["keyed-hash", "ed25519"])
def test_keys_derive_from_seed(scheme):
    a = KeyRegistry(scheme, seed=1)
    b = KeyRegistry(scheme, seed=1)
    c = KeyRegistry(scheme, seed=2)
    identity = client_identity(0)
    assert a.public_key(identity) == b.public_key(identity)
    assert a.public_key(identity) != c.public_key(identity)
    assert b.verify(identity, b"x", a.sign(identity, b"x"))
    assert not c.verify(identity, b"x", a.sign(identity, b"x"))


def test_ed25519_public_key_is_raw_32_bytes():
    registry = KeyRegistry("ed25519")
    assert len(registry.public_key(node_identity(0))) == 32
    assert len(registry.sign(node_identity(0), b"m")) == 64


def test_unknown_scheme():
    with pytest.raises(SignatureError):
        KeyRegistry("rsa")


def test_identities():
    assert node_identity(3) == "node-3"
    assert client_identity(0) == "client-0"
