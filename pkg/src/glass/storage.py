"""Versioned, hash-linked JSON serialization.

Every artifact is a JSON document with a fixed header: format_version,
artifact_kind, created_by, and a content_hash that is the SHA-256 of the
canonical serialization of the rest of the document (header minus
created_by and the hash itself, plus the body).  Canonical form uses
sorted keys, compact separators, and shortest round-trip float reprs, so
saving the same artifact twice yields identical bytes.  Writes go
through a temp file and an atomic rename.

This module is artifact-agnostic; the domain modules define their own
body schemas on top of it.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, Mapping

from .errors import (
    IntegrityError,
    KindMismatchError,
    SchemaError,
    UnsupportedVersionError,
    ValidationError,
)

FORMAT_VERSION = 1
TOOL_VERSION = "glass 0.1.0"

HEADER_FIELDS = frozenset({"format_version", "artifact_kind", "created_by", "content_hash"})
# Fields excluded from the hashed bytes: the hash itself, and the tool
# string (identical content produced by different builds hashes the same).
_UNHASHED = frozenset({"content_hash", "created_by"})

ARTIFACT_KINDS = ("model", "corpus", "stats", "mask", "report")


def canonical_bytes(doc: Mapping) -> bytes:
    """Deterministic JSON encoding; rejects NaN/Inf and non-JSON types."""
    try:
        text = json.dumps(doc, sort_keys=True, separators=(",", ":"),
                          ensure_ascii=False, allow_nan=False)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"artifact is not canonically serializable: {exc}") from exc
    return text.encode("utf-8")


def content_hash(doc: Mapping) -> str:
    hashed = {k: v for k, v in doc.items() if k not in _UNHASHED}
    return hashlib.sha256(canonical_bytes(hashed)).hexdigest()


def hash_for(kind: str, body: Mapping) -> str:
    """Hash an artifact body as it would be hashed when saved."""
    return content_hash(_assemble(kind, body))


def _assemble(kind: str, body: Mapping) -> dict:
    if kind not in ARTIFACT_KINDS:
        raise ValidationError(f"unknown artifact kind {kind!r}")
    overlap = HEADER_FIELDS.intersection(body)
    if overlap:
        raise ValidationError(f"body fields collide with header: {sorted(overlap)}")
    doc = {"format_version": FORMAT_VERSION, "artifact_kind": kind, "created_by": TOOL_VERSION}
    doc.update(body)
    return doc


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def save_json(path: str | Path, kind: str, body: Mapping) -> str:
    """Write one canonical JSON artifact; returns its content hash."""
    doc = _assemble(kind, body)
    digest = content_hash(doc)
    doc["content_hash"] = digest
    atomic_write_bytes(path, canonical_bytes(doc) + b"\n")
    return digest


def _check_header(doc: Mapping, expected_kind: str, source: str) -> None:
    if not isinstance(doc, dict):
        raise SchemaError(f"{source}: artifact root must be a JSON object")
    missing = HEADER_FIELDS.difference(doc)
    if missing:
        raise SchemaError(f"{source}: missing header fields {sorted(missing)}")
    if doc["format_version"] != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"{source}: format_version {doc['format_version']!r} unsupported "
            f"(reader supports {FORMAT_VERSION})"
        )
    if doc["artifact_kind"] != expected_kind:
        raise KindMismatchError(
            f"{source}: artifact kind {doc['artifact_kind']!r}, expected {expected_kind!r}"
        )
    if doc["content_hash"] != content_hash(doc):
        raise IntegrityError(f"{source}: content hash does not match file body")


def load_json(path: str | Path, expected_kind: str) -> dict:
    """Read and verify one artifact; returns the full document."""
    raw = Path(path).read_bytes()
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON: {exc}") from exc
    _check_header(doc, expected_kind, str(path))
    return doc


def check_exact_fields(doc: Mapping, body_fields: Iterable[str], source: str) -> None:
    """Strict schema check: body must carry exactly ``body_fields``."""
    want = set(body_fields) | HEADER_FIELDS
    got = set(doc)
    extra = got - want
    missing = want - got
    if extra or missing:
        parts = []
        if missing:
            parts.append(f"missing {sorted(missing)}")
        if extra:
            parts.append(f"unknown {sorted(extra)}")
        raise SchemaError(f"{source}: {'; '.join(parts)}")


def save_jsonl(path: str | Path, kind: str, header_body: Mapping,
               lines: Iterable[Iterable[int]]) -> str:
    """Write a header line plus one JSON array per document line.

    The content hash covers the header body and every document line, so
    any corruption is detected on load.
    """
    lines = [list(map(int, line)) for line in lines]
    doc = _assemble(kind, dict(header_body, documents=lines))
    digest = content_hash(doc)
    header = {k: v for k, v in doc.items() if k != "documents"}
    header["content_hash"] = digest
    payload = canonical_bytes(header) + b"\n"
    payload += b"".join(canonical_bytes(line) + b"\n" for line in lines)
    atomic_write_bytes(path, payload)
    return digest


def load_jsonl(path: str | Path, expected_kind: str) -> dict:
    """Read a JSONL artifact back into {header fields..., documents: [...]}."""
    raw = Path(path).read_bytes()
    text_lines = [ln for ln in raw.decode("utf-8").split("\n") if ln]
    if not text_lines:
        raise SchemaError(f"{path}: empty file")
    try:
        header = json.loads(text_lines[0])
        docs = [json.loads(ln) for ln in text_lines[1:]]
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON lines: {exc}") from exc
    for d in docs:
        if not isinstance(d, list):
            raise SchemaError(f"{path}: document lines must be JSON arrays")
    doc = dict(header)
    doc["documents"] = docs
    _check_header(doc, expected_kind, str(path))
    return doc
