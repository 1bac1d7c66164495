import logging
from typing import Any, Optional

import requests

import config
from tools.registry_store import (
    ConflictError,
    IntegrityError,
    MalformedVersionError,
    NotFoundError,
    QueryEntry,
    RecordKind,
    RegistryError,
    RegistryRecord,
    ValidationFailed,
    content_digest,
)

logger = logging.getLogger(__name__)


class RegistryUnavailable(RegistryError, ConnectionError):
    """Transport-level failure talking to the registry."""


class RegistryClient:
    """
    Thin HTTP client for the shadow registry.

    `session` is anything with a requests-style `request(method, url, ...)`;
    tests inject an adapter around the ASGI test client.
    """

    def __init__(
        self,
        base_url: Optional[str] = None,
        session: Optional[Any] = None,
        timeout: Optional[float] = None,
        publisher: str = "",
    ):
        self.base_url = (base_url or config.REGISTRY_URL).rstrip("/")
        self.session = session or requests.Session()
        self.timeout = config.HTTP_TIMEOUT if timeout is None else timeout
        self.publisher = publisher

    def _request(self, method: str, path: str, **kwargs):
        url = f"{self.base_url}{path}"
        try:
            response = self.session.request(method, url, timeout=self.timeout, **kwargs)
        except requests.RequestException as e:
            raise RegistryUnavailable(f"{method} {url} failed: {e}") from e
        logger.debug("%s %s -> %d", method, url, response.status_code)
        if response.status_code >= 400:
            self._raise_for(response)
        return response

    @staticmethod
    def _raise_for(response) -> None:
        try:
            body = response.json()
        except ValueError:
            body = {"detail": response.text}
        detail = body.get("detail", "") if isinstance(body, dict) else str(body)
        error = body.get("error") if isinstance(body, dict) else None
        status = response.status_code
        if status == 404:
            raise NotFoundError(detail)
        if status == 409:
            raise ConflictError(
                body.get("name", "?"),
                body.get("version", "?"),
                body.get("stored_digest", "?"),
                body.get("offered_digest", "?"),
            )
        if status == 400 and error == "MalformedVersionError":
            raise MalformedVersionError(detail)
        if status in (400, 422):
            raise ValidationFailed(body.get("errors") or [str(detail)])
        if error == "IntegrityError":
            raise IntegrityError(detail)
        raise RegistryError(f"Registry answered {status}: {detail}")

    def publish(self, kind: RecordKind, name: str, version: str, payload: bytes) -> tuple[RegistryRecord, bool]:
        headers = {"Content-Type": "application/json"}
        if self.publisher:
            headers["X-Publisher"] = self.publisher
        response = self._request(
            "PUT", f"/v1/{RecordKind(kind).value}/{name}/{version}", data=payload, headers=headers
        )
        return RegistryRecord.model_validate(response.json()), response.status_code == 201

    def fetch(self, kind: RecordKind, name: str, version: str) -> tuple[bytes, str]:
        """Payload bytes and their digest, verified against the server's X-Content-Digest."""
        response = self._request("GET", f"/v1/{RecordKind(kind).value}/{name}/{version}")
        payload = response.content
        digest = content_digest(payload)
        claimed = response.headers.get("X-Content-Digest")
        if claimed is None or claimed != digest:
            raise IntegrityError(f"{name}@{version}: received digest {digest}, server claims {claimed}")
        return payload, digest

    def versions(self, kind: RecordKind, name: str) -> list[str]:
        return self._request("GET", f"/v1/{RecordKind(kind).value}/{name}").json()["versions"]

    def query(
        self, kind: RecordKind, prefix: Optional[str] = None, tag: Optional[str] = None
    ) -> list[QueryEntry]:
        params = {key: value for key, value in (("prefix", prefix), ("tag", tag)) if value}
        response = self._request("GET", f"/v1/{RecordKind(kind).value}", params=params)
        return [QueryEntry.model_validate(entry) for entry in response.json()]

    def audit(self) -> dict:
        return self._request("GET", "/v1/audit").json()

    def health(self) -> bool:
        return self._request("GET", "/v1/health").json().get("status") == "ok"
