from fastapi import APIRouter
from .endpoints.extract import router as extract_router
from .endpoints.evaluate import router as evaluate_router
from .endpoints.schema import router as schema_router

router = APIRouter()
router.include_router(extract_router)
router.include_router(evaluate_router)
router.include_router(schema_router)
