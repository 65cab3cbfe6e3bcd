# app/main.py
from fastapi import FastAPI

from app.api.router import router
from app.core.config import settings
from app.core.log import configure_logging

configure_logging(settings.LOG_LEVEL)

app = FastAPI(
    title="Joint IE API",
    description="Joint extraction of events, arguments and entity mentions with dual decomposition decoding.",
    version="1.0.0",
)

app.include_router(router)


@app.get("/")
def root():
    return {"name": "Joint IE API, extracting events and entities from annotated documents", "docs": "/docs"}
