# app/api/endpoints/schema.py
from typing import Any, Dict

from fastapi import APIRouter, HTTPException

from app.core.config import settings
from app.services.utils.schema import load_schema, schema_fingerprint

router = APIRouter(prefix="/schema", tags=["schema"])


@router.get("", description="The label schema and compatibility maps used for extraction.")
def get_schema() -> Dict[str, Any]:
    try:
        schema = load_schema(settings.SCHEMA_PATH)
    except Exception as e:
        raise HTTPException(status_code=500, detail=str(e))
    return {"fingerprint": schema_fingerprint(schema), **schema.to_dict()}
