"""JSON-over-HTTP front end for dynamic index updates and queries."""
from __future__ import annotations

import logging
import math
import os
import threading
from contextlib import asynccontextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse

from .descriptor import AffineHead
from .errors import DimensionMismatch, NotNormalized
from .index import PrototypeIndex, Prototype
from .pipeline import PipelineConfig, embed_image
from .synth import decode_png

log = logging.getLogger(__name__)

TOKEN_ENV = "LOGORET_TOKEN"


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8080
    index_path: str | None = None
    head_path: str | None = None
    token: str | None = None
    read_only: bool = False
    threshold: float = 0.45

    def __post_init__(self):
        if not 1 <= self.port <= 65535:
            raise ValueError(f"port {self.port} out of range")
        if self.token is None:
            self.token = os.environ.get(TOKEN_ENV) or None


class _BadRequest(Exception):
    pass


def _error(status: int, message: str) -> JSONResponse:
    return JSONResponse({"error": message}, status_code=status)


async def _json_body(request: Request) -> dict:
    try:
        body = await request.json()
    except Exception as exc:  # malformed JSON of any flavor
        raise _BadRequest(f"malformed JSON body: {exc}") from exc
    if not isinstance(body, dict):
        raise _BadRequest("JSON body must be an object")
    return body


def _descriptor(body: dict) -> np.ndarray:
    raw = body.get("descriptor")
    if not isinstance(raw, list) or not raw or not all(isinstance(x, (int, float)) for x in raw):
        raise _BadRequest("descriptor must be a non-empty list of numbers")
    v = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise _BadRequest("descriptor contains non-finite values")
    return v


def create_app(config: ServiceConfig, index: PrototypeIndex | None = None,
               head: AffineHead | None = None, pipeline_config: PipelineConfig | None = None) -> FastAPI:
    """Build the service around an index (loaded from ``config.index_path`` if not given)."""
    if index is None:
        path = config.index_path
        index = PrototypeIndex.load(path) if path and Path(path).exists() else PrototypeIndex()
    if head is None and config.head_path:
        from .training import read_head

        head = read_head(config.head_path)
    if pipeline_config is None:
        pipeline_config = PipelineConfig(threshold=config.threshold)
    if head is not None:
        pipeline_config.toy_channels = head.in_dim
    snapshot_lock = threading.Lock()

    def snapshot() -> str | None:
        if not config.index_path:
            return None
        index.snapshot().save(config.index_path)
        return config.index_path

    @asynccontextmanager
    async def lifespan(app):
        yield
        if not config.read_only and config.index_path:
            with snapshot_lock:
                snapshot()
            log.info("index saved on shutdown to %s", config.index_path)

    app = FastAPI(title="logoret prototype index", lifespan=lifespan)
    app.state.index = index

    @app.middleware("http")
    async def guard(request: Request, call_next):
        if config.token and request.url.path != "/healthz":
            if request.headers.get("authorization") != f"Bearer {config.token}":
                return _error(401, "missing or bad token")
        mutating = request.method == "DELETE" or (
            request.method == "POST" and request.url.path in ("/prototypes", "/snapshot")
        )
        if config.read_only and mutating:
            return _error(403, "service is read-only")
        return await call_next(request)

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "prototypes": len(index)}

    @app.post("/prototypes")
    async def add_prototype(request: Request):
        try:
            body = await _json_body(request)
            cls, variant = body.get("class"), body.get("variant", "0")
            if not isinstance(cls, str) or not cls or not isinstance(variant, str):
                raise _BadRequest("class and variant must be strings")
            metadata = body.get("metadata", {})
            if not isinstance(metadata, dict):
                raise _BadRequest("metadata must be an object")
            v = _descriptor(body)
        except _BadRequest as exc:
            return _error(400, str(exc))
        try:
            index.add(Prototype(cls, variant, v, {str(k): str(x) for k, x in metadata.items()}))
        except (DimensionMismatch, NotNormalized) as exc:
            return _error(409, str(exc))
        log.info("added prototype %s/%s", cls, variant)
        return JSONResponse({"class": cls, "variant": variant, "prototypes": len(index)}, status_code=201)

    @app.delete("/prototypes/{class_id}")
    def remove_prototype(class_id: str, variant: str | None = None):
        removed = index.remove(class_id, variant)
        log.info("removed %d prototypes of %s", removed, class_id)
        return {"removed": removed}

    @app.post("/query")
    async def query(request: Request):
        try:
            body = await _json_body(request)
            v = _descriptor(body)
            k = body.get("k", 5)
            threshold = body.get("threshold", 0.0)
            if not isinstance(k, int) or k < 1:
                raise _BadRequest("k must be a positive integer")
            if not isinstance(threshold, (int, float)) or not math.isfinite(threshold):
                raise _BadRequest("threshold must be a number")
        except _BadRequest as exc:
            return _error(400, str(exc))
        try:
            hits = index.query(v, k, float(threshold))
        except (DimensionMismatch, NotNormalized) as exc:
            return _error(409, str(exc))
        return {"results": [{"class": h.class_id, "variant": h.variant_id, "similarity": h.similarity} for h in hits]}

    @app.post("/classify")
    async def classify(request: Request):
        if head is None:
            return _error(409, "service started without a head; /classify unavailable")
        data = await request.body()
        try:
            image = decode_png(data)
        except Exception:
            return _error(400, "body must be PNG bytes")
        v = embed_image(image, head, pipeline_config)
        best = index.query_topclass(v, k=1, threshold=pipeline_config.threshold)
        if best is None:
            return Response(status_code=204)
        return {"class": best[0], "score": best[1]}

    @app.post("/snapshot")
    def save_snapshot():
        if not snapshot_lock.acquire(blocking=False):
            return _error(503, "snapshot already in progress")
        try:
            path = snapshot()
        finally:
            snapshot_lock.release()
        if path is None:
            return _error(409, "service has no index path")
        return {"saved": path, "prototypes": len(index)}

    return app


def serve(config: ServiceConfig) -> None:
    import uvicorn

    uvicorn.run(create_app(config), host=config.host, port=config.port, log_config=None)
