"""
codec.py - Canonical byte encoding and hashing shared by every chain structure.

All on-wire and hashed structures are RLP lists of byte strings. Integers are
encoded big-endian with no leading zero bytes (zero is the empty string), text
as UTF-8. Contract arguments carry a one-byte type tag so that they decode back
to the same Python values. See manual.md for the full byte layout.
"""

import hashlib
import logging
from typing import Any, List, Sequence

import rlp

from constants import DIGEST_SIZE, HASH_ALGORITHM

logger = logging.getLogger(__name__)

ZERO_HASH = b"\x00" * DIGEST_SIZE

# Argument type tags
TAG_INT = b"i"
TAG_BYTES = b"b"
TAG_TEXT = b"s"
TAG_BOOL = b"t"
TAG_NONE = b"n"

# Merkle domain separation
MERKLE_LEAF = b"\x00"
MERKLE_NODE = b"\x01"


class CodecError(Exception):
    """Raised when bytes cannot be decoded into canonical values."""
    pass


def digest(data: bytes) -> bytes:
    """Return the repository-wide 256-bit digest of data."""
    return hashlib.new(HASH_ALGORITHM, data).digest()


EMPTY_ROOT = digest(b"")


def digest_to_int(value: bytes) -> int:
    """Interpret a digest as a 256-bit big-endian unsigned integer."""
    return int.from_bytes(value, "big")


def uint_bytes(value: int) -> bytes:
    if value < 0:
        raise CodecError(f"Unsigned field cannot be negative: {value}")
    if value == 0:
        return b""
    return value.to_bytes((value.bit_length() + 7) // 8, "big")


def bytes_uint(data: bytes) -> int:
    if data[:1] == b"\x00":
        raise CodecError("Non-canonical integer with leading zero byte")
    return int.from_bytes(data, "big")


def sint_bytes(value: int) -> bytes:
    # Two's complement, minimal length; zero is the empty string
    if value == 0:
        return b""
    return value.to_bytes((value.bit_length() + 8) // 8, "big", signed=True)


def bytes_sint(data: bytes) -> int:
    if not data:
        return 0
    return int.from_bytes(data, "big", signed=True)


def text_bytes(value: str) -> bytes:
    return value.encode("utf-8")


def encode_arg(value: Any) -> List[bytes]:
    """
    Encode one contract argument as a [tag, payload] pair.

    Raises:
        CodecError: If the value type has no canonical encoding
    """
    # bool before int: bool is an int subclass
    if isinstance(value, bool):
        return [TAG_BOOL, b"\x01" if value else b""]
    if isinstance(value, int):
        return [TAG_INT, sint_bytes(value)]
    if isinstance(value, (bytes, bytearray)):
        return [TAG_BYTES, bytes(value)]
    if isinstance(value, str):
        return [TAG_TEXT, text_bytes(value)]
    if value is None:
        return [TAG_NONE, b""]
    raise CodecError(f"Unsupported argument type: {type(value).__name__}")


def decode_arg(item: Sequence[bytes]) -> Any:
    if len(item) != 2:
        raise CodecError("Argument must be a [tag, payload] pair")
    tag, payload = bytes(item[0]), bytes(item[1])
    if tag == TAG_INT:
        return bytes_sint(payload)
    if tag == TAG_BYTES:
        return payload
    if tag == TAG_TEXT:
        return payload.decode("utf-8")
    if tag == TAG_BOOL:
        return payload == b"\x01"
    if tag == TAG_NONE:
        return None
    raise CodecError(f"Unknown argument tag: {tag!r}")


def encode_args(args: Sequence[Any]) -> List[List[bytes]]:
    return [encode_arg(a) for a in args]


def decode_args(encoded) -> tuple:
    """Decode a list of [tag, payload] pairs (raw RLP bytes or already decoded)."""
    if isinstance(encoded, (bytes, bytearray)):
        try:
            encoded = rlp.decode(bytes(encoded))
        except rlp.DecodingError as e:
            raise CodecError(f"Malformed argument list: {e}")
    return tuple(decode_arg(item) for item in encoded)


def pack_values(values: Sequence[Any]) -> bytes:
    """RLP-encode typed values; used for contract state cells."""
    return rlp.encode(encode_args(values))


def unpack_values(data: bytes) -> tuple:
    return decode_args(data)


def encode(obj) -> bytes:
    """RLP-encode a nested list of byte strings."""
    return rlp.encode(obj)


def decode(data: bytes):
    try:
        return rlp.decode(data)
    except rlp.DecodingError as e:
        raise CodecError(f"Malformed RLP payload: {e}")


def merkle_leaf(data: bytes) -> bytes:
    return digest(MERKLE_LEAF + data)


def merkle_node(left: bytes, right: bytes) -> bytes:
    return digest(MERKLE_NODE + left + right)


def merkle_parent(level: Sequence[bytes], index: int) -> bytes:
    """Parent number index of a Merkle level; an unpaired last node moves up unchanged."""
    left = level[2 * index]
    if 2 * index + 1 < len(level):
        return merkle_node(left, level[2 * index + 1])
    return left


def merkle_levels(leaves: Sequence[bytes]) -> List[List[bytes]]:
    """
    Build every level of a binary Merkle tree, leaf digests first.

    Leaves and interior nodes hash under distinct tag bytes, and an odd level
    promotes its last node, so no two leaf lists share a root. An empty leaf
    list yields a single level holding the digest of the empty string.
    """
    if not leaves:
        return [[EMPTY_ROOT]]
    levels = [[merkle_leaf(leaf) for leaf in leaves]]
    while len(levels[-1]) > 1:
        current = levels[-1]
        levels.append([merkle_parent(current, i) for i in range((len(current) + 1) // 2)])
    return levels


def merkle_root(leaves: Sequence[bytes]) -> bytes:
    return merkle_levels(leaves)[-1][0]
