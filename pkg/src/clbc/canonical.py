"""Canonical byte encoding and the transcript digest chain.

Encoding rules (ruleset ``clbc-c14n-1``):

* UTF-8 output, no insignificant whitespace.
* Map keys must be strings; they are sorted by their UTF-8 byte order
  (identical to code-point order).
* Integers are written in minimal decimal form.  Decimals and finite
  floats are written in plain positional notation with trailing zeros
  removed; an integral decimal is written as an integer, so ``1``,
  ``Decimal("1.0")`` and ``1.0`` all encode to ``1``.
* Sequences keep their order.  Booleans and null use JSON literals.
* Strings use JSON escaping: ``"``, ``\\`` and control characters only.

Everything else (sets, bytes, NaN, Inf, non-string keys, lone surrogates)
raises :class:`UnsupportedValue`.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from decimal import Decimal
from json.encoder import encode_basestring
from typing import Any, Iterable, Sequence

from .errors import NegativeTurn, UnsupportedValue

ENCODING_ID = "clbc-c14n-1"
DIGEST_ALGORITHM_ID = "clbc-d-1"
DIGEST_SIZE = 32


@dataclass(frozen=True)
class CanonicalBytes:
    bytes: bytes
    encoding_id: str = ENCODING_ID

    def __len__(self) -> int:
        return len(self.bytes)

    def text(self) -> str:
        return self.bytes.decode("utf-8")


@dataclass(frozen=True)
class Digest:
    value: bytes
    algorithm_id: str = DIGEST_ALGORITHM_ID

    def __post_init__(self):
        if len(self.value) != DIGEST_SIZE:
            raise ValueError(f"digest must be {DIGEST_SIZE} octets, got {len(self.value)}")

    def hex(self) -> str:
        return self.value.hex()

    @classmethod
    def fromhex(cls, text: str) -> "Digest":
        return cls(bytes.fromhex(text))

    def __repr__(self) -> str:
        return f"Digest({self.value.hex()[:16]}...)"


ZERO_DIGEST = Digest(bytes(DIGEST_SIZE))


@dataclass(frozen=True)
class ChainLink:
    prev: Digest
    payload_digest: Digest
    link: Digest
    turn_index: int

    def to_value(self) -> dict:
        return {
            "prev": self.prev.hex(),
            "payload_digest": self.payload_digest.hex(),
            "link": self.link.hex(),
            "turn_index": self.turn_index,
        }

    @classmethod
    def from_value(cls, value: dict) -> "ChainLink":
        return cls(
            prev=Digest.fromhex(value["prev"]),
            payload_digest=Digest.fromhex(value["payload_digest"]),
            link=Digest.fromhex(value["link"]),
            turn_index=int(value["turn_index"]),
        )


def _number_text(value: Decimal) -> str:
    if not value.is_finite():
        raise UnsupportedValue(f"non-finite number {value!r}")
    if value == value.to_integral_value():
        return str(int(value))
    return format(value.normalize(), "f")


def _encode(value: Any, out: list[str]) -> None:
    # bool first: bool is a subclass of int
    if value is None:
        out.append("null")
    elif value is True:
        out.append("true")
    elif value is False:
        out.append("false")
    elif isinstance(value, str):
        try:
            value.encode("utf-8")
        except UnicodeEncodeError as exc:
            raise UnsupportedValue(f"string is not encodable as UTF-8: {value!r}") from exc
        out.append(encode_basestring(value))
    elif isinstance(value, int):
        out.append(str(int(value)))
    elif isinstance(value, Decimal):
        out.append(_number_text(value))
    elif isinstance(value, float):
        if not math.isfinite(value):
            raise UnsupportedValue(f"non-finite float {value!r}")
        out.append(_number_text(Decimal(repr(value))))
    elif isinstance(value, dict):
        for key in value:
            if not isinstance(key, str):
                raise UnsupportedValue(f"map key must be a string, got {type(key).__name__}")
        out.append("{")
        for i, key in enumerate(sorted(value)):
            if i:
                out.append(",")
            _encode(key, out)
            out.append(":")
            _encode(value[key], out)
        out.append("}")
    elif isinstance(value, (list, tuple)):
        out.append("[")
        for i, item in enumerate(value):
            if i:
                out.append(",")
            _encode(item, out)
        out.append("]")
    else:
        raise UnsupportedValue(f"cannot canonicalize {type(value).__name__}")


def canonicalize(value: Any) -> CanonicalBytes:
    """Encode a structured value into canonical bytes.

    >>> canonicalize({"b": 2, "a": [1, True, None]}).text()
    '{"a":[1,true,null],"b":2}'
    """
    if isinstance(value, CanonicalBytes):
        value = decode(value)
    if _is_plain(value):
        # no numbers beyond ints and only string keys: the C encoder agrees with _encode
        text = json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    else:
        out: list[str] = []
        _encode(value, out)
        text = "".join(out)
    try:
        return CanonicalBytes(text.encode("utf-8"))
    except UnicodeEncodeError as exc:
        raise UnsupportedValue("string is not encodable as UTF-8") from exc


_PLAIN_SCALARS = (str, int, bool, type(None))


def _is_plain(value: Any) -> bool:
    stack = [value]
    while stack:
        v = stack.pop()
        t = type(v)
        if t is dict:
            for k, item in v.items():
                if type(k) is not str:
                    return False
                stack.append(item)
        elif t is list or t is tuple:
            stack.extend(v)
        elif t not in _PLAIN_SCALARS:
            return False
    return True


def _reject_constant(name: str):
    raise UnsupportedValue(f"non-finite literal {name}")


def _no_duplicates(pairs: list[tuple[str, Any]]) -> dict:
    result = {}
    for key, val in pairs:
        if key in result:
            raise UnsupportedValue(f"duplicate map key {key!r}")
        result[key] = val
    return result


def decode(data: bytes | CanonicalBytes | str) -> Any:
    """Parse encoded bytes back into a structured value.

    Non-integral numbers come back as :class:`Decimal`.  Duplicate keys and
    NaN/Infinity literals are rejected.
    """
    if isinstance(data, CanonicalBytes):
        data = data.bytes
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise UnsupportedValue("input is not valid UTF-8") from exc
    try:
        return json.loads(
            data,
            parse_float=Decimal,
            parse_constant=_reject_constant,
            object_pairs_hook=_no_duplicates,
        )
    except json.JSONDecodeError as exc:
        raise UnsupportedValue(f"malformed encoding: {exc}") from exc


def is_canonical(data: bytes) -> bool:
    """True iff ``data`` decodes and re-encodes to exactly the same octets."""
    try:
        return canonicalize(decode(data)).bytes == data
    except UnsupportedValue:
        return False


def digest(data: bytes | CanonicalBytes) -> Digest:
    if isinstance(data, CanonicalBytes):
        data = data.bytes
    return Digest(hashlib.sha256(data).digest())


def digest_value(value: Any) -> Digest:
    return digest(canonicalize(value))


def _link_value(prev: Digest, payload_digest: Digest, turn_index: int) -> Digest:
    return digest(prev.value + payload_digest.value + turn_index.to_bytes(8, "big"))


def extend_chain(prev: Digest, payload: CanonicalBytes | bytes, turn_index: int) -> ChainLink:
    """Bind ``payload`` to the previous head at position ``turn_index``."""
    if turn_index < 0:
        raise NegativeTurn(f"turn_index must be >= 0, got {turn_index}")
    payload_digest = digest(payload)
    return ChainLink(prev, payload_digest, _link_value(prev, payload_digest, turn_index), turn_index)


def link_is_consistent(link: ChainLink) -> bool:
    return link.link == _link_value(link.prev, link.payload_digest, link.turn_index)


def verify_chain(links: Sequence[ChainLink], payloads: Iterable[bytes | CanonicalBytes]) -> int | None:
    """Re-verify a chain from genesis.

    Returns the index of the first inconsistent link, or ``None`` when every
    link matches its payload, its predecessor and its position.
    """
    prev = ZERO_DIGEST
    payloads = list(payloads)
    if len(payloads) != len(links):
        return min(len(payloads), len(links))
    for i, (link, payload) in enumerate(zip(links, payloads)):
        expected = extend_chain(prev, payload, i)
        if link != expected:
            return i
        prev = link.link
    return None


# -- conformance vectors ----------------------------------------------------

def conformance_record(source_text: str) -> dict:
    """One conformance vector: input text, canonical hex, digest hex."""
    canon = canonicalize(decode(source_text))
    return {
        "input": source_text,
        "canonical_hex": canon.bytes.hex(),
        "digest_hex": digest(canon).hex(),
    }


def write_conformance_vectors(path, sources: Iterable[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for text in sources:
            fh.write(canonicalize(conformance_record(text)).text() + "\n")


def check_conformance_vectors(path) -> list[str]:
    """Return a list of mismatch descriptions (empty when all vectors hold)."""
    problems = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            record = decode(line.strip())
            got = conformance_record(record["input"])
            for key in ("canonical_hex", "digest_hex"):
                if got[key] != record[key]:
                    problems.append(f"line {lineno}: {key} mismatch for {record['input']!r}")
    return problems
