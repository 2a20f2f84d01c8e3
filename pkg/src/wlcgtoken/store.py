"""Persistence for authorization codes and refresh-token records.

Only SHA-256 digests of codes and refresh handles are stored. Consuming a
code and revoking a refresh handle are atomic, so concurrent reuse of one
value yields exactly one success.
"""

from __future__ import annotations

import hashlib
import json
import sqlite3
import threading
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Protocol


def digest(secret: str) -> str:
    return hashlib.sha256(secret.encode()).hexdigest()


@dataclass(frozen=True)
class AuthorizationCode:
    client_id: str
    subject: str
    scopes: tuple[str, ...]
    redirect_uri: str
    auth_time: int
    expires_at: int
    nonce: str | None = None


@dataclass(frozen=True)
class RefreshTokenRecord:
    handle_hash: str
    client_id: str
    subject: str
    granted_scopes: tuple[str, ...]
    issued_at: int
    expires_at: int
    revoked: bool = False
    auth_time: int | None = None

    def __post_init__(self):
        if not self.expires_at > self.issued_at:
            raise ValueError("refresh record must expire after it is issued")


class GrantStore(Protocol):
    def save_code(self, code: str, record: AuthorizationCode) -> None: ...
    def consume_code(self, code: str) -> AuthorizationCode | None: ...
    def save_refresh(self, handle: str, record: RefreshTokenRecord) -> None: ...
    def get_refresh(self, handle: str) -> RefreshTokenRecord | None: ...
    def revoke_refresh(self, handle: str) -> bool: ...
    def live_refresh_count(self, client_id: str, subject: str, now: int) -> int: ...


class MemoryGrantStore:
    def __init__(self):
        self._codes: dict[str, AuthorizationCode] = {}
        self._refresh: dict[str, RefreshTokenRecord] = {}
        self._lock = threading.Lock()

    def save_code(self, code, record):
        with self._lock:
            self._codes[digest(code)] = record

    def consume_code(self, code):
        with self._lock:
            return self._codes.pop(digest(code), None)

    def save_refresh(self, handle, record):
        with self._lock:
            self._refresh[digest(handle)] = record

    def get_refresh(self, handle):
        with self._lock:
            return self._refresh.get(digest(handle))

    def revoke_refresh(self, handle):
        """Mark a live handle revoked; False if it was already revoked or unknown."""
        key = digest(handle)
        with self._lock:
            record = self._refresh.get(key)
            if record is None or record.revoked:
                return False
            self._refresh[key] = replace(record, revoked=True)
            return True

    def live_refresh_count(self, client_id, subject, now):
        with self._lock:
            return sum(
                1
                for r in self._refresh.values()
                if r.client_id == client_id and r.subject == subject
                and not r.revoked and now < r.expires_at
            )


_SCHEMA = """
CREATE TABLE IF NOT EXISTS codes (
    code_hash TEXT PRIMARY KEY,
    record TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS refresh_tokens (
    handle_hash TEXT PRIMARY KEY,
    client_id TEXT NOT NULL,
    subject TEXT NOT NULL,
    granted_scopes TEXT NOT NULL,
    issued_at INTEGER NOT NULL,
    expires_at INTEGER NOT NULL,
    revoked INTEGER NOT NULL DEFAULT 0,
    auth_time INTEGER
);
"""


class SqliteGrantStore:
    """Single-file store; pass ``":memory:"`` for a throwaway database."""

    def __init__(self, path: str | Path):
        self._db = sqlite3.connect(str(path), check_same_thread=False, isolation_level=None)
        self._db.executescript(_SCHEMA)
        self._lock = threading.Lock()

    def close(self):
        self._db.close()

    def save_code(self, code, record):
        doc = json.dumps(record.__dict__)
        with self._lock:
            self._db.execute(
                "INSERT OR REPLACE INTO codes VALUES (?, ?)", (digest(code), doc)
            )

    def consume_code(self, code):
        with self._lock:
            row = self._db.execute(
                "DELETE FROM codes WHERE code_hash = ? RETURNING record", (digest(code),)
            ).fetchone()
        if row is None:
            return None
        doc = json.loads(row[0])
        doc["scopes"] = tuple(doc["scopes"])
        return AuthorizationCode(**doc)

    def save_refresh(self, handle, record):
        with self._lock:
            self._db.execute(
                "INSERT OR REPLACE INTO refresh_tokens VALUES (?, ?, ?, ?, ?, ?, ?, ?)",
                (
                    digest(handle), record.client_id, record.subject,
                    json.dumps(list(record.granted_scopes)), record.issued_at,
                    record.expires_at, int(record.revoked), record.auth_time,
                ),
            )

    def get_refresh(self, handle):
        with self._lock:
            row = self._db.execute(
                "SELECT handle_hash, client_id, subject, granted_scopes, issued_at,"
                " expires_at, revoked, auth_time FROM refresh_tokens WHERE handle_hash = ?",
                (digest(handle),),
            ).fetchone()
        if row is None:
            return None
        return RefreshTokenRecord(
            row[0], row[1], row[2], tuple(json.loads(row[3])), row[4], row[5], bool(row[6]), row[7]
        )

    def revoke_refresh(self, handle):
        with self._lock:
            cur = self._db.execute(
                "UPDATE refresh_tokens SET revoked = 1 WHERE handle_hash = ? AND revoked = 0",
                (digest(handle),),
            )
            return cur.rowcount == 1

    def live_refresh_count(self, client_id, subject, now):
        with self._lock:
            (count,) = self._db.execute(
                "SELECT COUNT(*) FROM refresh_tokens WHERE client_id = ? AND subject = ?"
                " AND revoked = 0 AND expires_at > ?",
                (client_id, subject, now),
            ).fetchone()
        return count
