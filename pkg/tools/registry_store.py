"""
File-backed shadow registry.

Layout: {root}/{kind}/{name}/{version}.meta.json next to {version}.payload.
A record exists once its metadata sidecar has been created exclusively; the
payload is linked in right after. Payload bytes are stored verbatim and
their sha256 digest is re-checked on every read.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import uuid
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

from pydantic import BaseModel, ConfigDict, ValidationError

from behavior_tree import TreeError, build_tree
from safety_nodes import IDENT_RE, SEMVER_RE, semver_key, validate_spec

logger = logging.getLogger(__name__)

META_SUFFIX = ".meta.json"
PAYLOAD_SUFFIX = ".payload"


class RecordKind(str, Enum):
    SPECS = "specs"
    TREES = "trees"


# --- Errors ---


class RegistryError(Exception):
    status_code = 500

    def detail(self) -> dict:
        return {"error": type(self).__name__, "detail": str(self)}


class NotFoundError(RegistryError, LookupError):
    status_code = 404


class ConflictError(RegistryError):
    status_code = 409

    def __init__(self, name: str, version: str, stored_digest: str, offered_digest: str):
        super().__init__(
            f"{name}@{version} already exists with digest {stored_digest}; offered {offered_digest}"
        )
        self.name = name
        self.version = version
        self.stored_digest = stored_digest
        self.offered_digest = offered_digest

    def detail(self) -> dict:
        return {
            **super().detail(),
            "name": self.name,
            "version": self.version,
            "stored_digest": self.stored_digest,
            "offered_digest": self.offered_digest,
        }


class ValidationFailed(RegistryError, ValueError):
    status_code = 400

    def __init__(self, errors: Sequence[str]):
        super().__init__("Payload failed validation: " + "; ".join(errors))
        self.errors = list(errors)

    def detail(self) -> dict:
        return {**super().detail(), "errors": self.errors}


class MalformedVersionError(RegistryError, ValueError):
    status_code = 400


class IntegrityError(RegistryError, RuntimeError):
    status_code = 500


# --- Records ---


class RegistryRecord(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: RecordKind
    name: str
    version: str
    content_digest: str
    size: int
    published_at: datetime
    publisher: str = ""


class QueryEntry(BaseModel):
    name: str
    versions: list[str]
    tags: list[str]
    digest: str


class AuditReport(BaseModel):
    checked: int = 0
    problems: list[str] = []
    incomplete: list[str] = []

    @property
    def ok(self) -> bool:
        return not self.problems


def content_digest(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


def validate_payload(kind: RecordKind, name: str, version: str, payload: bytes) -> list[str]:
    if kind == RecordKind.SPECS:
        errors = validate_spec(payload)
        if errors:
            return errors
        document = json.loads(payload)
        if document["name"] != name:
            errors.append(f"name: payload says {document['name']!r}, path says {name!r}")
        if document["version"] != version:
            errors.append(f"version: payload says {document['version']!r}, path says {version!r}")
        return errors
    try:
        build_tree(payload)
    except TreeError as e:
        return [str(e)]
    return []


def _fsync_dir(path: Path) -> None:
    try:
        fd = os.open(path, os.O_RDONLY)
    except OSError:
        return
    try:
        os.fsync(fd)
    except OSError:
        pass
    finally:
        os.close(fd)


def _write_tmp(directory: Path, data: bytes) -> Path:
    tmp = directory / f".tmp-{uuid.uuid4().hex}"
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    return tmp


class ShadowRegistry:
    def __init__(self, root: os.PathLike | str):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _paths(self, kind: RecordKind, name: str, version: str) -> tuple[Path, Path]:
        base = self.root / RecordKind(kind).value / name
        return base / f"{version}{META_SUFFIX}", base / f"{version}{PAYLOAD_SUFFIX}"

    @staticmethod
    def _check_coordinates(name: str, version: str) -> None:
        if not IDENT_RE.match(name):
            raise ValidationFailed([f"name: {name!r} is not an identifier"])
        if not SEMVER_RE.match(version):
            raise MalformedVersionError(f"{version!r} is not a semantic version")

    @staticmethod
    def _read_meta(meta_path: Path) -> RegistryRecord:
        try:
            return RegistryRecord.model_validate_json(meta_path.read_bytes())
        except ValidationError as e:
            raise IntegrityError(f"Corrupt metadata {meta_path}: {e}") from e

    # --- Writes ---

    def publish(
        self,
        kind: RecordKind,
        name: str,
        version: str,
        payload: bytes,
        publisher: str = "",
    ) -> tuple[RegistryRecord, bool]:
        """Store payload under (kind, name, version); returns (record, created)."""
        kind = RecordKind(kind)
        self._check_coordinates(name, version)
        errors = validate_payload(kind, name, version, payload)
        if errors:
            raise ValidationFailed(errors)

        meta_path, payload_path = self._paths(kind, name, version)
        directory = meta_path.parent
        directory.mkdir(parents=True, exist_ok=True)
        record = RegistryRecord(
            kind=kind,
            name=name,
            version=version,
            content_digest=content_digest(payload),
            size=len(payload),
            published_at=datetime.now(timezone.utc),
            publisher=publisher,
        )

        tmp = _write_tmp(directory, record.model_dump_json(indent=2).encode("utf-8"))
        try:
            os.link(tmp, meta_path)
            created = True
        except FileExistsError:
            created = False
        finally:
            tmp.unlink(missing_ok=True)

        if not created:
            existing = self._read_meta(meta_path)
            if existing.content_digest != record.content_digest:
                raise ConflictError(name, version, existing.content_digest, record.content_digest)
            record = existing

        if created or not self._payload_intact(payload_path, record.content_digest):
            tmp = _write_tmp(directory, payload)
            os.replace(tmp, payload_path)
        _fsync_dir(directory)

        if created:
            logger.info("Published %s %s@%s (%s)", kind.value, name, version, record.content_digest[:12])
        else:
            logger.info("Republished %s %s@%s unchanged", kind.value, name, version)
        return record, created

    @staticmethod
    def _payload_intact(payload_path: Path, digest: str) -> bool:
        try:
            return content_digest(payload_path.read_bytes()) == digest
        except FileNotFoundError:
            return False

    # --- Reads ---

    def record(self, kind: RecordKind, name: str, version: str) -> RegistryRecord:
        self._check_coordinates(name, version)
        meta_path, payload_path = self._paths(kind, name, version)
        if not meta_path.exists() or not payload_path.exists():
            raise NotFoundError(f"{RecordKind(kind).value}/{name}@{version} not found")
        return self._read_meta(meta_path)

    def fetch(self, kind: RecordKind, name: str, version: str) -> tuple[RegistryRecord, bytes]:
        record = self.record(kind, name, version)
        _, payload_path = self._paths(kind, name, version)
        payload = payload_path.read_bytes()
        actual = content_digest(payload)
        if actual != record.content_digest:
            logger.error("Digest mismatch for %s@%s: stored %s, read %s", name, version, record.content_digest, actual)
            raise IntegrityError(
                f"{name}@{version}: payload digest {actual} does not match recorded {record.content_digest}"
            )
        return record, payload

    def versions(self, kind: RecordKind, name: str) -> list[str]:
        """Complete versions of name, newest first."""
        directory = self.root / RecordKind(kind).value / name
        if not IDENT_RE.match(name) or not directory.is_dir():
            raise NotFoundError(f"{RecordKind(kind).value}/{name} not found")
        found = [
            meta.name[: -len(META_SUFFIX)]
            for meta in directory.glob(f"*{META_SUFFIX}")
        ]
        found = [v for v in found if (directory / f"{v}{PAYLOAD_SUFFIX}").exists()]
        if not found:
            raise NotFoundError(f"{RecordKind(kind).value}/{name} not found")
        return sorted(found, key=semver_key, reverse=True)

    def names(self, kind: RecordKind) -> list[str]:
        base = self.root / RecordKind(kind).value
        if not base.is_dir():
            return []
        return sorted(p.name for p in base.iterdir() if p.is_dir() and IDENT_RE.match(p.name))

    def query(
        self, kind: RecordKind, prefix: Optional[str] = None, tag: Optional[str] = None
    ) -> list[QueryEntry]:
        """Matching names ascending, each with its versions newest first; tags and digest of the newest."""
        entries = []
        for name in self.names(kind):
            if prefix and not name.startswith(prefix):
                continue
            try:
                versions = self.versions(kind, name)
                record, payload = self.fetch(kind, name, versions[0])
            except NotFoundError:
                continue
            tags: list[str] = []
            if RecordKind(kind) == RecordKind.SPECS:
                tags = list(json.loads(payload).get("tags", []))
            if tag and tag not in tags:
                continue
            entries.append(QueryEntry(name=name, versions=versions, tags=tags, digest=record.content_digest))
        return entries

    def audit(self) -> AuditReport:
        """Re-verify digest and validity of every stored record."""
        report = AuditReport()
        for kind in RecordKind:
            for name in self.names(kind):
                directory = self.root / kind.value / name
                for meta in sorted(directory.glob(f"*{META_SUFFIX}")):
                    version = meta.name[: -len(META_SUFFIX)]
                    ref = f"{kind.value}/{name}@{version}"
                    if not (directory / f"{version}{PAYLOAD_SUFFIX}").exists():
                        report.incomplete.append(ref)
                        continue
                    report.checked += 1
                    try:
                        _, payload = self.fetch(kind, name, version)
                    except RegistryError as e:
                        report.problems.append(f"{ref}: {e}")
                        continue
                    errors = validate_payload(kind, name, version, payload)
                    report.problems += [f"{ref}: {err}" for err in errors]
        if report.problems:
            logger.warning("Audit found %d problem(s) in %d record(s)", len(report.problems), report.checked)
        else:
            logger.info("Audit checked %d record(s), no problems", report.checked)
        return report
