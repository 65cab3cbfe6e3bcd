# app/api/endpoints/extract.py
from typing import Any, Dict, List, Optional

from fastapi import APIRouter, HTTPException
from pydantic import BaseModel, Field

from app.core.config import settings
from app.core.errors import CorpusError, SchemaError
from app.services.extraction_service import ExtractionService
from app.services.model_bundle import ModelBundle
from app.services.utils.bundle_cache import BundleCache
from app.services.utils.corpus import document_from_dict, document_to_dict, validate_document

router = APIRouter(prefix="/extract", tags=["extract"])

bundle_cache: BundleCache[ModelBundle] = BundleCache(ModelBundle.load, ttl_seconds=settings.BUNDLE_CACHE_TTL)


class ExtractRequest(BaseModel):
    documents: List[Dict[str, Any]] = Field(..., description="Documents in the corpus line format.")
    mode: Optional[str] = Field(None, description="joint, joint_no_pairs, joint_no_entities or within_event")


def get_service() -> ExtractionService:
    return ExtractionService(bundle_cache.get(settings.BUNDLE_PATH))


@router.post("", description="Extract events and entities from documents with the configured bundle.")
def extract(req: ExtractRequest) -> Dict[str, Any]:
    """
    Decode each document and return it with predicted annotations.
    **mode**: decoding variant; defaults to the bundle's configured mode
    """
    try:
        service = get_service()
        docs = [document_from_dict(d) for d in req.documents]
        for doc in docs:
            validate_document(doc, service.schema)
        results = service.predict(docs, req.mode)
    except (CorpusError, SchemaError, ValueError) as e:
        raise HTTPException(status_code=422, detail=str(e))
    except Exception as e:
        raise HTTPException(status_code=500, detail=str(e))
    return {
        "documents": [document_to_dict(r.document) for r in results],
        "status": [r.status_row() for r in results],
    }
