"""Group-based and capability-based authorization decisions.

Capabilities come from the ``scope`` claim (``operation[:path]`` entries),
groups from ``wlcg.groups``. Paths are matched on segment boundaries only and
non-canonical paths are rejected rather than normalized.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping

from .errors import InvalidGroupName, InvalidPath, MalformedScopeEntry
from .tokens import ClaimSet

OPERATION_RE = re.compile(r"[a-z0-9_]+(\.[a-z0-9_]+)*")


def path_segments(path: str) -> tuple[str, ...]:
    """Split an absolute path into segments, rejecting anything non-canonical."""
    if not isinstance(path, str) or not path.startswith("/"):
        raise InvalidPath(f"path {path!r} is not absolute")
    if path == "/":
        return ()
    segments = tuple(path[1:].split("/"))
    for seg in segments:
        if seg == "":
            raise InvalidPath(f"path {path!r} has an empty segment or trailing slash")
        if seg in (".", ".."):
            raise InvalidPath(f"path {path!r} contains a dot segment")
    return segments


def is_segment_prefix(prefix: tuple[str, ...], full: tuple[str, ...]) -> bool:
    return full[: len(prefix)] == prefix


def _check_operation(op: str) -> str:
    if not isinstance(op, str) or not OPERATION_RE.fullmatch(op):
        raise MalformedScopeEntry(f"bad operation identifier {op!r}")
    return op


@dataclass(frozen=True)
class Capability:
    operation: str
    path: str | None = None

    def __post_init__(self):
        _check_operation(self.operation)
        if self.path is not None:
            try:
                path_segments(self.path)
            except InvalidPath as exc:
                raise MalformedScopeEntry(str(exc)) from exc

    @classmethod
    def parse(cls, entry: str) -> "Capability":
        op, sep, path = entry.partition(":")
        if sep and not path:
            raise MalformedScopeEntry(f"empty path in {entry!r}")
        return cls(op, path if sep else None)

    @property
    def segments(self) -> tuple[str, ...] | None:
        return None if self.path is None else path_segments(self.path)

    def covers(self, other: "Capability") -> bool:
        """True if this capability grants at least what ``other`` grants."""
        if self.operation != other.operation:
            return False
        if self.path is None:
            return True
        if other.path is None:
            return False
        return is_segment_prefix(self.segments, other.segments)

    def __str__(self):
        return self.operation if self.path is None else f"{self.operation}:{self.path}"


@dataclass(frozen=True)
class GroupName:
    segments: tuple[str, ...]

    def __post_init__(self):
        segs = tuple(self.segments)
        if not segs or any(not s or "/" in s for s in segs):
            raise InvalidGroupName(f"invalid group segments {segs!r}")
        object.__setattr__(self, "segments", segs)

    @classmethod
    def parse(cls, text: str) -> "GroupName":
        if not isinstance(text, str) or not text.startswith("/"):
            raise InvalidGroupName(f"group {text!r} must start with '/'")
        return cls(tuple(text[1:].split("/")))

    def __str__(self):
        return "/" + "/".join(self.segments)


@dataclass(frozen=True)
class ResourceRequest:
    operation: str
    path: str

    def __post_init__(self):
        _check_operation(self.operation)
        path_segments(self.path)


class PolicyMode(str, Enum):
    CAPABILITY_ONLY = "CapabilityOnly"
    GROUP_ONLY = "GroupOnly"
    EITHER = "Either"


class GroupMatching(str, Enum):
    EXACT = "Exact"
    HIERARCHICAL = "Hierarchical"


@dataclass(frozen=True)
class AuthzPolicy:
    mode: PolicyMode = PolicyMode.EITHER
    group_rules: Mapping[tuple[str, str], GroupName] = field(default_factory=dict)
    group_matching: GroupMatching = GroupMatching.HIERARCHICAL

    def __post_init__(self):
        rules = {}
        for (op, prefix), group in dict(self.group_rules).items():
            _check_operation(op)
            path_segments(prefix)
            rules[(op, prefix)] = group if isinstance(group, GroupName) else GroupName.parse(group)
        object.__setattr__(self, "group_rules", rules)
        object.__setattr__(self, "mode", PolicyMode(self.mode))
        object.__setattr__(self, "group_matching", GroupMatching(self.group_matching))

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "AuthzPolicy":
        """Build from a config mapping.

        ``group_rules`` is a list of ``{"operation", "path", "group"}`` objects.
        """
        rules = {(r["operation"], r["path"]): r["group"] for r in doc.get("group_rules", [])}
        return cls(
            mode=PolicyMode(doc.get("mode", PolicyMode.EITHER.value)),
            group_rules=rules,
            group_matching=GroupMatching(
                doc.get("group_matching", GroupMatching.HIERARCHICAL.value)
            ),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "mode": self.mode.value,
            "group_matching": self.group_matching.value,
            "group_rules": [
                {"operation": op, "path": path, "group": str(group)}
                for (op, path), group in self.group_rules.items()
            ],
        }

    def rule_for(self, req: ResourceRequest) -> tuple[tuple[str, str], GroupName] | None:
        """The most specific rule whose prefix covers the request, if any."""
        target = path_segments(req.path)
        best = None
        for (op, prefix), group in self.group_rules.items():
            segs = path_segments(prefix)
            if op == req.operation and is_segment_prefix(segs, target):
                if best is None or len(segs) > best[0]:
                    best = (len(segs), (op, prefix), group)
        return None if best is None else (best[1], best[2])


@dataclass(frozen=True)
class AuthzDecision:
    allowed: bool
    matched_rule: str | None = None
    trace: tuple[str, ...] = ()

    def __post_init__(self):
        if self.allowed and self.matched_rule is None:
            raise ValueError("an allow decision needs a matched rule")


NO_AUTHZ_CLAIMS = "no authorization claims"
NO_APPLICABLE_RULE = "NoApplicableRule"


def parse_scope(scope_claim: str) -> list[Capability]:
    if scope_claim == "":
        return []
    caps = []
    for entry in scope_claim.split(" "):
        if not entry:
            raise MalformedScopeEntry(f"empty entry in scope {scope_claim!r}")
        caps.append(Capability.parse(entry))
    return caps


def authorize_capability(caps: Iterable[Capability], req: ResourceRequest) -> AuthzDecision:
    target = path_segments(req.path)
    trace = []
    for cap in caps:
        if cap.operation != req.operation:
            trace.append(f"{cap}: operation mismatch")
        elif cap.path is None:
            trace.append(f"{cap}: match (no path restriction)")
            return AuthzDecision(True, f"capability {cap}", tuple(trace))
        elif is_segment_prefix(cap.segments, target):
            trace.append(f"{cap}: match ({cap.path} covers {req.path})")
            return AuthzDecision(True, f"capability {cap}", tuple(trace))
        else:
            trace.append(f"{cap}: prefix failure ({cap.path} does not cover {req.path})")
    trace.append(f"no capability grants {req.operation} on {req.path}")
    return AuthzDecision(False, None, tuple(trace))


def authorize_groups(
    member_of: Iterable[GroupName], required: GroupName, matching: GroupMatching
) -> AuthzDecision:
    matching = GroupMatching(matching)
    trace = []
    for group in member_of:
        if matching is GroupMatching.EXACT:
            ok = group == required
        else:
            ok = group.segments[: len(required.segments)] == required.segments
        if ok:
            trace.append(f"{group}: satisfies {required} ({matching.value})")
            return AuthzDecision(True, f"group {group} satisfies {required}", tuple(trace))
        trace.append(f"{group}: does not satisfy {required} ({matching.value})")
    trace.append(f"no membership satisfies {required}")
    return AuthzDecision(False, None, tuple(trace))


def _group_branch(groups: list[GroupName], req: ResourceRequest, policy: AuthzPolicy) -> AuthzDecision:
    rule = policy.rule_for(req)
    if rule is None:
        return AuthzDecision(
            False, None, (f"{NO_APPLICABLE_RULE}: no group rule covers {req.operation} {req.path}",)
        )
    (op, prefix), required = rule
    inner = authorize_groups(groups, required, policy.group_matching)
    trace = (f"rule ({op}, {prefix}) requires {required}",) + inner.trace
    matched = f"rule ({op}, {prefix}) -> {required}; {inner.matched_rule}" if inner.allowed else None
    return AuthzDecision(inner.allowed, matched, trace)


def authorize(claims: ClaimSet, req: ResourceRequest, policy: AuthzPolicy) -> AuthzDecision:
    """Combine the capability and group branches under ``policy.mode``.

    Raises MalformedScopeEntry / InvalidGroupName when the token's
    authorization claims cannot be parsed.
    """
    if not claims.scope and not claims.wlcg_groups:
        return AuthzDecision(False, None, (NO_AUTHZ_CLAIMS,))
    caps = parse_scope(claims.scope) if claims.scope else []
    groups = [GroupName.parse(g) for g in claims.wlcg_groups or ()]

    trace: list[str] = []
    if policy.mode in (PolicyMode.CAPABILITY_ONLY, PolicyMode.EITHER):
        if caps:
            decision = authorize_capability(caps, req)
            trace += ["capability branch:", *decision.trace]
            if decision.allowed:
                return AuthzDecision(True, decision.matched_rule, tuple(trace))
        else:
            trace.append("capability branch: token has no scope claim")
    if policy.mode in (PolicyMode.GROUP_ONLY, PolicyMode.EITHER):
        if groups:
            decision = _group_branch(groups, req, policy)
            trace += ["group branch:", *decision.trace]
            if decision.allowed:
                return AuthzDecision(True, decision.matched_rule, tuple(trace))
        else:
            trace.append("group branch: token has no wlcg.groups claim")
    trace.append(f"deny ({policy.mode.value})")
    return AuthzDecision(False, None, tuple(trace))


def scope_covered(requested: Iterable[Capability], granted: Iterable[Capability]) -> list[Capability]:
    """The requested capabilities that no granted capability covers."""
    granted = list(granted)
    return [r for r in requested if not any(g.covers(r) for g in granted)]
