"""HTTP surface over the creative service. All bodies are JSON."""

from __future__ import annotations

import logging
from pathlib import Path

from fastapi import Body, FastAPI, HTTPException, Query, Response

from ..store import CacheKey, IllegalTransition, NotFound, StorageFailure
from .core import BadRequest, CreativeService

logger = logging.getLogger(__name__)


def create_app(service: CreativeService) -> FastAPI:
    app = FastAPI(title="creativegen", docs_url=None, redoc_url=None)
    app.state.service = service

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.post("/v1/creative")
    def creative(payload: dict = Body(...)):
        try:
            return service.handle_creative_request(payload)
        except BadRequest as exc:
            raise HTTPException(status_code=400, detail=str(exc))

    @app.post("/v1/feedback")
    def feedback(payload: dict = Body(...)):
        request_id = payload.get("request_id")
        event = payload.get("event")
        if not request_id or not event:
            raise HTTPException(status_code=400, detail="request_id and event required")
        try:
            return service.handle_feedback(str(request_id), str(event))
        except BadRequest as exc:
            raise HTTPException(status_code=400, detail=str(exc))

    @app.get("/v1/review/pending")
    def review_pending(limit: int = Query(50, ge=1, le=500)):
        return {"items": service.list_pending(limit=limit)}

    def _review_action(image_hash: str, prompt_id: str, bucket: int, action):
        key = CacheKey(image_hash, prompt_id, bucket)
        try:
            rec = action(key)
        except NotFound as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        except IllegalTransition as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        except StorageFailure as exc:
            raise HTTPException(status_code=503, detail=str(exc))
        return {
            "image_hash": rec.key.image_hash,
            "prompt_id": rec.key.prompt_id,
            "bucket": rec.key.bucket,
            "status": rec.status.value,
            "approved": rec.approved,
        }

    @app.post("/v1/review/{image_hash}/{prompt_id}/{bucket}/approve")
    def approve(image_hash: str, prompt_id: str, bucket: int):
        return _review_action(image_hash, prompt_id, bucket, service.approve)

    @app.post("/v1/review/{image_hash}/{prompt_id}/{bucket}/reject")
    def reject(image_hash: str, prompt_id: str, bucket: int):
        return _review_action(image_hash, prompt_id, bucket, service.reject)

    @app.post("/v1/review/{image_hash}/{prompt_id}/{bucket}/regenerate")
    def regenerate(image_hash: str, prompt_id: str, bucket: int):
        return _review_action(image_hash, prompt_id, bucket, service.regenerate)

    @app.get("/v1/bandit/stats")
    def bandit_stats():
        return service.bandit_stats()

    @app.get("/v1/ab/report")
    def ab_report(window: float | None = Query(None, gt=0)):
        return service.ab_report(window=window)

    @app.get("/v1/images/{ref}")
    def image(ref: str, w: int | None = Query(None, ge=1, le=4096),
              h: int | None = Query(None, ge=1, le=4096)):
        try:
            data = service.image_bytes(ref, w, h)
        except NotFound:
            raise HTTPException(status_code=404, detail="image not found")
        except StorageFailure as exc:
            raise HTTPException(status_code=503, detail=str(exc))
        return Response(content=data, media_type="image/png")

    console_dist = service.config.console_dist
    if console_dist and Path(console_dist).is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/console", StaticFiles(directory=console_dist, html=True), name="console")
    return app
