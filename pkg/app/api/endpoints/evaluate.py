# app/api/endpoints/evaluate.py
from typing import Any, Dict, List

from fastapi import APIRouter, HTTPException
from pydantic import BaseModel

from app.core.errors import CorpusError
from app.services.evaluation_service import evaluate
from app.services.utils.corpus import document_from_dict

router = APIRouter(prefix="/evaluate", tags=["evaluate"])


class EvaluateRequest(BaseModel):
    gold: List[Dict[str, Any]]
    predicted: List[Dict[str, Any]]


@router.post("", description="Score predicted documents against gold documents.")
def evaluate_documents(req: EvaluateRequest) -> Dict[str, Any]:
    try:
        gold = [document_from_dict(d) for d in req.gold]
        predicted = [document_from_dict(d) for d in req.predicted]
        report = evaluate(gold, predicted)
    except CorpusError as e:
        raise HTTPException(status_code=422, detail=str(e))
    except Exception as e:
        raise HTTPException(status_code=500, detail=str(e))
    return report.to_dict()
