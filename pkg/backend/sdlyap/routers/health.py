from __future__ import annotations

from fastapi import APIRouter

from .. import __version__
from ..catalog import BUILTINS
from ..config import settings

router = APIRouter()


@router.get("/health")
async def health() -> dict[str, bool]:
    return {"ok": True}


@router.get("/meta")
async def meta() -> dict[str, str | int | list[str]]:
    return {
        "backend_version": __version__,
        "threads": settings.worker_count(),
        "builtins": sorted(BUILTINS),
    }
