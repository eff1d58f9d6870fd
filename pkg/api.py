# api.py
from functools import lru_cache
from pathlib import Path
from typing import List, Optional

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from crm_toolkit.affine_hull import enumerate_hull, in_affine_hull
from crm_toolkit.attribute_space import AttributeSpec, GroupSet
from crm_toolkit.crm_adapt import TestPredictor, argmax_groups, log_predict
from crm_toolkit.errors import CrmError
from crm_toolkit.settings import load_settings
from crm_toolkit.storage import load_predictor

app = FastAPI(title="CRM Toolkit API", version="0.1.0")


class HullRequest(BaseModel):
    cardinalities: List[int]
    train: List[List[int]]
    candidate: Optional[List[int]] = None


class PredictRequest(BaseModel):
    features: List[List[float]]


@lru_cache(maxsize=1)
def _predictor() -> TestPredictor:
    cfg = load_settings()
    bundle = cfg.get("PredictorBundle")
    if not bundle:
        raise HTTPException(status_code=503, detail="PredictorBundle is not configured")
    return load_predictor(Path(bundle))


@app.get("/health")
def health():
    return {"status": "ok"}


@app.post("/hull/membership")
def hull_membership(req: HullRequest):
    if req.candidate is None:
        raise HTTPException(status_code=400, detail="candidate is required")
    try:
        spec = AttributeSpec(tuple(req.cardinalities))
        return in_affine_hull(req.candidate, GroupSet.of(spec, req.train), spec).to_json()
    except CrmError as e:
        raise HTTPException(status_code=400, detail=str(e))


@app.post("/hull/enumerate")
def hull_enumerate(req: HullRequest):
    try:
        spec = AttributeSpec(tuple(req.cardinalities))
        hull = enumerate_hull(GroupSet.of(spec, req.train), spec)
        return {"hull": hull.to_json(), "size": len(hull), "grid": spec.total_groups}
    except CrmError as e:
        raise HTTPException(status_code=400, detail=str(e))


@app.post("/predict")
def predict(req: PredictRequest):
    try:
        predictor = _predictor()
        post = np.exp(log_predict(predictor, np.asarray(req.features, dtype=np.float64)))
        return {
            "support": predictor.test_support.to_json(),
            "posterior": post.tolist(),
            "argmax": argmax_groups(post, predictor.test_support).tolist(),
        }
    except HTTPException:
        raise
    except (CrmError, FileNotFoundError) as e:
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        raise HTTPException(status_code=500, detail=f"Prediction failed: {e}")


# uvicorn api:app --reload --host 127.0.0.1 --port 8000
