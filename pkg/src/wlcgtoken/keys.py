"""Asymmetric signing keys, JWK conversion and raw JWS signature primitives.

Only two algorithms are accepted: ``RS256`` (mandatory) and ``ES256``.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Union

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec, padding, rsa
from cryptography.hazmat.primitives.asymmetric.utils import (
    decode_dss_signature,
    encode_dss_signature,
)

from .errors import UnsupportedAlgorithm

ALLOWED_ALGORITHMS = ("RS256", "ES256")

PrivateKey = Union[rsa.RSAPrivateKey, ec.EllipticCurvePrivateKey]
PublicKey = Union[rsa.RSAPublicKey, ec.EllipticCurvePublicKey]

_ES256_COORD = 32


def b64url_encode(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def b64url_decode(text: str) -> bytes:
    """Strict base64url decoding: no padding, canonical trailing bits only."""
    if not isinstance(text, str) or "=" in text:
        raise ValueError("invalid base64url segment")
    try:
        raw = base64.urlsafe_b64decode(text + "=" * (-len(text) % 4))
    except (ValueError, TypeError) as exc:
        raise ValueError("invalid base64url segment") from exc
    # Non-canonical encodings would let two distinct strings carry one value.
    if b64url_encode(raw) != text:
        raise ValueError("non-canonical base64url segment")
    return raw


def _int_to_b64(value: int, length: int | None = None) -> str:
    length = length or max(1, (value.bit_length() + 7) // 8)
    return b64url_encode(value.to_bytes(length, "big"))


def _b64_to_int(text: str) -> int:
    return int.from_bytes(b64url_decode(text), "big")


def check_algorithm(alg: Any) -> str:
    if alg not in ALLOWED_ALGORITHMS:
        raise UnsupportedAlgorithm(f"algorithm {alg!r} is not allowed")
    return alg


def _public_jwk_members(public_key: PublicKey) -> dict[str, str]:
    if isinstance(public_key, rsa.RSAPublicKey):
        numbers = public_key.public_numbers()
        return {"e": _int_to_b64(numbers.e), "kty": "RSA", "n": _int_to_b64(numbers.n)}
    numbers = public_key.public_numbers()
    return {
        "crv": "P-256",
        "kty": "EC",
        "x": _int_to_b64(numbers.x, _ES256_COORD),
        "y": _int_to_b64(numbers.y, _ES256_COORD),
    }


def thumbprint(public_key: PublicKey) -> str:
    """RFC 7638 JWK thumbprint, used as the default kid."""
    members = _public_jwk_members(public_key)
    canonical = json.dumps(members, separators=(",", ":"), sort_keys=True)
    return b64url_encode(hashlib.sha256(canonical.encode()).digest())


def _key_algorithm_matches(alg: str, key: PublicKey | PrivateKey) -> bool:
    if alg == "RS256":
        return isinstance(key, (rsa.RSAPublicKey, rsa.RSAPrivateKey))
    curve = getattr(key, "curve", None)
    return isinstance(curve, ec.SECP256R1)


@dataclass(frozen=True)
class VerificationKey:
    kid: str
    algorithm: str
    public_key: PublicKey

    def __post_init__(self):
        check_algorithm(self.algorithm)
        if not _key_algorithm_matches(self.algorithm, self.public_key):
            raise UnsupportedAlgorithm(
                f"key material does not fit algorithm {self.algorithm}"
            )

    def to_jwk(self) -> dict[str, str]:
        jwk = _public_jwk_members(self.public_key)
        jwk.update(kid=self.kid, alg=self.algorithm, use="sig")
        return jwk

    @classmethod
    def from_jwk(cls, jwk: dict[str, Any]) -> "VerificationKey":
        kty = jwk.get("kty")
        kid = jwk.get("kid")
        if not isinstance(kid, str) or not kid:
            raise ValueError("JWK has no kid")
        if kty == "RSA":
            alg = jwk.get("alg", "RS256")
            public_key: PublicKey = rsa.RSAPublicNumbers(
                _b64_to_int(jwk["e"]), _b64_to_int(jwk["n"])
            ).public_key()
        elif kty == "EC":
            if jwk.get("crv") != "P-256":
                raise UnsupportedAlgorithm(f"curve {jwk.get('crv')!r} is not allowed")
            alg = jwk.get("alg", "ES256")
            public_key = ec.EllipticCurvePublicNumbers(
                _b64_to_int(jwk["x"]), _b64_to_int(jwk["y"]), ec.SECP256R1()
            ).public_key()
        else:
            raise UnsupportedAlgorithm(f"key type {kty!r} is not allowed")
        return cls(kid=kid, algorithm=alg, public_key=public_key)

    def verify(self, signing_input: bytes, signature: bytes) -> bool:
        try:
            if self.algorithm == "RS256":
                self.public_key.verify(
                    signature, signing_input, padding.PKCS1v15(), hashes.SHA256()
                )
            else:
                if len(signature) != 2 * _ES256_COORD:
                    return False
                r = int.from_bytes(signature[:_ES256_COORD], "big")
                s = int.from_bytes(signature[_ES256_COORD:], "big")
                self.public_key.verify(
                    encode_dss_signature(r, s), signing_input, ec.ECDSA(hashes.SHA256())
                )
        except InvalidSignature:
            return False
        return True


@dataclass(frozen=True)
class KeyPair:
    kid: str
    algorithm: str
    private_key: PrivateKey

    def __post_init__(self):
        check_algorithm(self.algorithm)
        if not _key_algorithm_matches(self.algorithm, self.private_key):
            raise UnsupportedAlgorithm(
                f"key material does not fit algorithm {self.algorithm}"
            )

    @classmethod
    def generate(cls, algorithm: str = "RS256", kid: str | None = None) -> "KeyPair":
        check_algorithm(algorithm)
        if algorithm == "RS256":
            private_key: PrivateKey = rsa.generate_private_key(65537, 2048)
        else:
            private_key = ec.generate_private_key(ec.SECP256R1())
        return cls(kid or thumbprint(private_key.public_key()), algorithm, private_key)

    @classmethod
    def from_seed(cls, seed: int, kid: str | None = None) -> "KeyPair":
        """Deterministic ES256 key pair; for reproducible scenarios only."""
        scalar = int.from_bytes(hashlib.sha256(str(seed).encode()).digest(), "big")
        scalar = scalar % (0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551 - 1) + 1
        private_key = ec.derive_private_key(scalar, ec.SECP256R1())
        return cls(kid or thumbprint(private_key.public_key()), "ES256", private_key)

    def public(self) -> VerificationKey:
        return VerificationKey(self.kid, self.algorithm, self.private_key.public_key())

    def sign(self, signing_input: bytes) -> bytes:
        if self.algorithm == "RS256":
            return self.private_key.sign(signing_input, padding.PKCS1v15(), hashes.SHA256())
        der = self.private_key.sign(signing_input, ec.ECDSA(hashes.SHA256()))
        r, s = decode_dss_signature(der)
        return r.to_bytes(_ES256_COORD, "big") + s.to_bytes(_ES256_COORD, "big")

    # key files: {"kid", "alg", "private_key_pem"}

    def to_file_document(self) -> dict[str, str]:
        pem = self.private_key.private_bytes(
            serialization.Encoding.PEM,
            serialization.PrivateFormat.PKCS8,
            serialization.NoEncryption(),
        )
        return {"kid": self.kid, "alg": self.algorithm, "private_key_pem": pem.decode()}

    @classmethod
    def from_file_document(cls, doc: dict[str, Any]) -> "KeyPair":
        private_key = serialization.load_pem_private_key(
            doc["private_key_pem"].encode(), password=None
        )
        return cls(doc["kid"], doc["alg"], private_key)  # type: ignore[arg-type]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_file_document(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "KeyPair":
        return cls.from_file_document(json.loads(Path(path).read_text()))


def load_verification_key(path: str | Path) -> VerificationKey:
    """Load a public JWK file, or the public half of a private key file."""
    doc = json.loads(Path(path).read_text())
    if "private_key_pem" in doc:
        return KeyPair.from_file_document(doc).public()
    return VerificationKey.from_jwk(doc)
