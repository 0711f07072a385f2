from __future__ import annotations

import logging

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from . import __version__
from .config import settings
from .errors import SdlyapError
from .routers import health, masp, simulate, verify

logger = logging.getLogger(__name__)


def create_app() -> FastAPI:
    app = FastAPI(title="sdlyap API", version=__version__)

    app.include_router(health.router, prefix="/api")
    app.include_router(masp.router, prefix="/api")
    app.include_router(verify.router, prefix="/api")
    app.include_router(simulate.router, prefix="/api")

    @app.exception_handler(SdlyapError)
    async def sdlyap_error_handler(request: Request, exc: SdlyapError) -> JSONResponse:
        logger.info("%s %s rejected: %s", request.method, request.url.path, exc)
        return JSONResponse({"detail": str(exc)}, status_code=422)

    logging.getLogger("sdlyap").setLevel(settings.log_level.upper())
    return app


app = create_app()
