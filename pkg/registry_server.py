import logging
from contextlib import asynccontextmanager
from typing import Optional

import uvicorn
from fastapi import FastAPI, Header, Request, Response
from fastapi.responses import JSONResponse

import config
from tools.registry_store import RecordKind, RegistryError, ShadowRegistry

logger = logging.getLogger(__name__)

PAYLOAD_MEDIA_TYPE = "application/json"


def create_app(store: Optional[ShadowRegistry] = None) -> FastAPI:
    """Registry service; without a store one is opened at config.REGISTRY_ROOT on startup."""

    # --- Lifespan (Setup/Teardown) ---
    @asynccontextmanager
    async def lifespan(app: FastAPI):
        if getattr(app.state, "store", None) is None:
            app.state.store = ShadowRegistry(config.REGISTRY_ROOT)
        logger.info("Shadow registry serving %s", app.state.store.root.resolve())
        yield
        logger.info("Shadow registry shutting down.")

    app = FastAPI(title="Shadow registry", lifespan=lifespan)
    app.state.store = store

    def registry(request: Request) -> ShadowRegistry:
        if request.app.state.store is None:
            request.app.state.store = ShadowRegistry(config.REGISTRY_ROOT)
        return request.app.state.store

    @app.exception_handler(RegistryError)
    async def registry_error(request: Request, exc: RegistryError) -> JSONResponse:
        level = logging.ERROR if exc.status_code >= 500 else logging.INFO
        logger.log(level, "%s %s -> %d %s", request.method, request.url.path, exc.status_code, exc)
        return JSONResponse(status_code=exc.status_code, content=exc.detail())

    # --- Service endpoints (declared before the {kind} routes) ---
    @app.get("/v1/health")
    async def health_check():
        return {"status": "ok"}

    @app.get("/v1/audit")
    def audit(request: Request):
        return registry(request).audit().model_dump()

    # --- Documents ---
    @app.put("/v1/{kind}/{name}/{version}")
    async def publish(
        kind: RecordKind,
        name: str,
        version: str,
        request: Request,
        publisher: str = Header("", alias="X-Publisher"),
    ) -> Response:
        payload = await request.body()
        record, created = registry(request).publish(kind, name, version, payload, publisher=publisher)
        return Response(
            content=record.model_dump_json(),
            status_code=201 if created else 200,
            media_type="application/json",
        )

    @app.get("/v1/{kind}/{name}/{version}")
    def fetch(kind: RecordKind, name: str, version: str, request: Request) -> Response:
        record, payload = registry(request).fetch(kind, name, version)
        return Response(
            content=payload,
            media_type=PAYLOAD_MEDIA_TYPE,
            headers={"X-Content-Digest": record.content_digest},
        )

    @app.get("/v1/{kind}/{name}")
    def versions(kind: RecordKind, name: str, request: Request):
        return {"name": name, "versions": registry(request).versions(kind, name)}

    @app.get("/v1/{kind}")
    def query(kind: RecordKind, request: Request, tag: Optional[str] = None, prefix: Optional[str] = None):
        return [entry.model_dump() for entry in registry(request).query(kind, prefix=prefix, tag=tag)]

    return app


app = create_app()


def serve(host: str = config.HOST, port: int = config.PORT, root: Optional[str] = None) -> None:
    service = create_app(ShadowRegistry(root)) if root else app
    logger.info(f"Starting Uvicorn server on {host}:{port}...")
    uvicorn.run(service, host=host, port=port)


# --- Main Execution Block (for running with uvicorn) ---
if __name__ == "__main__":
    config.setup_logging()
    serve()
