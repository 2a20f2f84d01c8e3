"""Command-line front end: ``wlcg-token <subcommand>``.

Every subcommand is a thin wrapper over library calls. Machine output goes
to stdout, diagnostics to stderr; the exit status is 0 only on success.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import harness
from .clock import SystemClock
from .errors import ConfigError, WLCGTokenError
from .httpio import UrllibTransport, serve_forever
from .issuer import IssuerApp, IssuerConfig, TokenIssuer
from .keys import KeyPair, load_verification_key
from .resource import ResourceConfig
from .tokens import (
    PROFILE_VERSION,
    ClaimSet,
    TokenKind,
    ValidationContext,
    check_profile_shape,
    decode,
    new_jti,
    encode_and_sign,
    validate_claims,
    verify_signature,
)
from .trust import TrustAnchorCache

log = logging.getLogger("wlcgtoken")

KINDS = {"access": TokenKind.ACCESS, "id": TokenKind.ID}
DEFAULT_LIFETIMES = {"access": 1200, "id": 600}


class ShapeViolation(WLCGTokenError):
    pass


def _public_path(out: Path) -> Path:
    return out.with_name(out.stem + ".pub.json")


def cmd_keygen(args) -> int:
    key = KeyPair.generate(args.alg, kid=args.kid)
    out = Path(args.out)
    key.save(out)
    out.chmod(0o600)
    _public_path(out).write_text(json.dumps(key.public().to_jwk(), indent=2) + "\n")
    print(key.kid)
    return 0


def cmd_mint(args) -> int:
    key = KeyPair.load(args.key)
    kind = KINDS[args.kind]
    issuer = args.iss or os.environ.get("WLCG_ISSUER")
    if not issuer:
        raise WLCGTokenError("no issuer: pass --iss or set WLCG_ISSUER")
    now = SystemClock().now()
    lifetime = args.lifetime or DEFAULT_LIFETIMES[args.kind]
    claims = ClaimSet(
        sub=args.sub,
        iss=issuer,
        aud=tuple(args.aud) or (issuer,),
        iat=now,
        nbf=now,
        exp=now + lifetime,
        jti=new_jti(),
        wlcg_ver=PROFILE_VERSION,
        scope=args.scope,
        wlcg_groups=tuple(args.group) or None,
        eduperson_assurance=tuple(args.assurance) or None,
        auth_time=now if kind is TokenKind.ID else None,
    )
    report = check_profile_shape(claims, kind)
    if not report.conformant:
        raise ShapeViolation("; ".join(map(str, report.violations)))
    sys.stdout.write(encode_and_sign(claims, kind, key) + "\n")
    return 0


def _read_token(arg: str | None) -> str:
    if arg and arg != "-":
        path = Path(arg)
        try:
            if path.is_file():
                return path.read_text().strip()
        except OSError:  # a long token is not a valid file name
            pass
        return arg.strip()
    env = os.environ.get("WLCG_TOKEN")
    if arg is None and env:
        return env.strip()
    return sys.stdin.read().strip()


def _guess_kind(claims: ClaimSet) -> TokenKind:
    if claims.auth_time is not None or claims.oidc_standard:
        return TokenKind.ID
    return TokenKind.ACCESS


def _trust(args, issuer: str) -> TrustAnchorCache:
    return TrustAnchorCache(UrllibTransport(), [issuer], allow_http=args.insecure_http)


def _signature_status(args, token: str, header: dict, claims: ClaimSet) -> tuple[bool, str]:
    if args.key:
        key = load_verification_key(args.key)
    else:
        issuer = args.issuer or os.environ.get("WLCG_ISSUER") or claims.iss
        if issuer != claims.iss:
            return False, f"token issuer {claims.iss!r} is not {issuer!r}"
        key = _trust(args, issuer).get_key(issuer, header.get("kid"))
    ok = verify_signature(token, key)
    return ok, "signature valid" if ok else "signature INVALID"


def cmd_inspect(args) -> int:
    token = _read_token(args.token)
    header, claims = decode(token)
    kind = KINDS[args.kind] if args.kind else _guess_kind(claims)
    shape = check_profile_shape(claims, kind)
    verified = None
    sig_msg = "UNVERIFIED (signature not checked)"
    if args.verify:
        verified, sig_msg = _signature_status(args, token, header, claims)
    if args.json:
        doc = {
            "header": header,
            "claims": claims.to_payload(),
            "kind": kind.value,
            "shape": {
                "conformant": shape.conformant,
                "violations": [str(v) for v in shape.violations],
                "warnings": [str(w) for w in shape.warnings],
            },
            "signature": {"checked": args.verify, "valid": verified, "detail": sig_msg},
        }
        print(json.dumps(doc, indent=2))
    else:
        print(f"signature: {sig_msg}")
        print(f"header: alg={header.get('alg')} kid={header.get('kid')}")
        print(f"kind (for shape check): {kind.value}")
        for name, value in claims.to_payload().items():
            print(f"  {name}: {json.dumps(value)}")
        print("shape: " + ("conformant" if shape.conformant else "NOT conformant"))
        for v in shape.violations:
            print(f"  violation: {v}")
        for w in shape.warnings:
            print(f"  warning: {w}")
    return 0 if verified in (None, True) else 1


def cmd_validate(args) -> int:
    token = _read_token(args.token)
    header, claims = decode(token)
    issuer = args.issuer or os.environ.get("WLCG_ISSUER")
    if not issuer:
        raise WLCGTokenError("no issuer: pass --issuer or set WLCG_ISSUER")
    problems = []
    ok, sig_msg = _signature_status(args, token, header, claims)
    if not ok:
        problems.append(sig_msg)
    ctx = ValidationContext(
        expected_audiences=tuple(args.aud),
        accepted_issuers=(issuer,),
        skew_tolerance=args.skew,
    )
    report = validate_claims(claims, ctx)
    problems.extend(f"{code.value}: {detail}" for code, detail in report.failures)
    shape = check_profile_shape(claims, KINDS[args.kind])
    problems.extend(str(v) for v in shape.violations)
    if args.json:
        print(json.dumps({"valid": not problems, "problems": problems}))
    else:
        print("VALID" if not problems else "INVALID")
        for p in problems:
            print(f"  {p}")
    return 0 if not problems else 1


def _split_listen(listen: str) -> tuple[str, int]:
    host, _, port = listen.rpartition(":")
    return host or "127.0.0.1", int(port)


def cmd_serve_issuer(args) -> int:
    config = IssuerConfig.load(args.config)
    host, port = _split_listen(args.listen or config.listen)
    app = IssuerApp(TokenIssuer(config))
    print(f"issuer {config.issuer} listening on {host}:{port}", file=sys.stderr)
    serve_forever(app, host, port)
    return 0


def cmd_serve_resource(args) -> int:
    config = ResourceConfig.load(args.config)
    host, port = _split_listen(args.listen or config.listen)
    app = config.build(UrllibTransport())
    print(f"resource listening on {host}:{port}", file=sys.stderr)
    serve_forever(app, host, port)
    return 0


def cmd_run_scenario(args) -> int:
    runner = harness.SCENARIOS.get(args.name)
    if runner is None:
        raise ConfigError(
            f"unknown scenario {args.name!r}; available: {', '.join(harness.SCENARIOS)}"
        )
    try:
        transcript = runner(sockets=args.sockets)
        status = 0
    except harness.ScenarioFailure as exc:
        transcript = exc.transcript
        print(f"ScenarioFailure: {exc}", file=sys.stderr)
        status = 1
    if args.out:
        transcript.write(args.out)
    else:
        sys.stdout.write(transcript.to_jsonl())
    print(
        f"{transcript.scenario}: {len(transcript.steps)} steps, "
        + ("passed" if transcript.passed else "FAILED"),
        file=sys.stderr,
    )
    return status


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wlcg-token", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keygen", help="generate a signing key pair")
    p.add_argument("--out", required=True, help="private key file; public JWK goes to <stem>.pub.json")
    p.add_argument("--alg", default="RS256")
    p.add_argument("--kid")
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("mint", help="sign a profile token")
    p.add_argument("--key", required=True)
    p.add_argument("--kind", choices=sorted(KINDS), default="access")
    p.add_argument("--sub", required=True)
    p.add_argument("--iss", help="issuer URL (default: $WLCG_ISSUER)")
    p.add_argument("--aud", action="append", default=[])
    p.add_argument("--scope")
    p.add_argument("--group", action="append", default=[])
    p.add_argument("--assurance", action="append", default=[])
    p.add_argument("--lifetime", type=int, help="seconds (default 1200 access, 600 id)")
    p.set_defaults(func=cmd_mint)

    def add_verify_opts(p):
        p.add_argument("--issuer", help="issuer URL (default: $WLCG_ISSUER)")
        p.add_argument("--key", help="public key file instead of issuer discovery")
        p.add_argument("--insecure-http", action="store_true", help="allow http issuers (testing)")
        p.add_argument("--json", action="store_true")

    p = sub.add_parser("inspect", help="show a token's claims and profile shape")
    p.add_argument("token", nargs="?", help="token, file, or - for stdin (default: $WLCG_TOKEN)")
    p.add_argument("--kind", choices=sorted(KINDS))
    p.add_argument("--verify", action="store_true", help="also check the signature")
    add_verify_opts(p)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("validate", help="full signature, claim and shape validation")
    p.add_argument("token", nargs="?")
    p.add_argument("--aud", action="append", default=[])
    p.add_argument("--kind", choices=sorted(KINDS), default="access")
    p.add_argument("--skew", type=int, default=60)
    add_verify_opts(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("serve-issuer", help="run the token issuer")
    p.add_argument("--config", required=True)
    p.add_argument("--listen")
    p.set_defaults(func=cmd_serve_issuer)

    p = sub.add_parser("serve-resource", help="run the protected storage resource")
    p.add_argument("--config", required=True)
    p.add_argument("--listen")
    p.set_defaults(func=cmd_serve_resource)

    p = sub.add_parser("run-scenario", help="run a token-flow scenario")
    p.add_argument("--name", required=True)
    p.add_argument("--out", help="transcript file (default: stdout)")
    p.add_argument("--sockets", action="store_true", help="use real local sockets")
    p.set_defaults(func=cmd_run_scenario)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        return args.func(args)
    except (WLCGTokenError, OSError, ValueError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
