"""WLCG JWT profile tokens: issuance, validation and authorization."""

from .authz import (
    AuthzDecision,
    AuthzPolicy,
    Capability,
    GroupMatching,
    GroupName,
    PolicyMode,
    ResourceRequest,
    authorize,
    authorize_capability,
    authorize_groups,
    parse_scope,
)
from .clock import SystemClock, VirtualClock
from .keys import KeyPair, VerificationKey
from .tokens import (
    ClaimSet,
    TokenKind,
    ValidationContext,
    check_profile_shape,
    decode,
    encode_and_sign,
    validate_claims,
    verify_signature,
)
from .trust import IssuerMetadata, IssuerTrustAnchor, TrustAnchorCache, discover

__version__ = "0.1.0"
