from __future__ import annotations

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse

from app import __version__
from app.adapters.artifact_store import ArtifactStore
from app.config import get_settings
from app.errors import LabError, ShapeMismatch
from app.models import (
    GradcheckRequest,
    GradcheckResponse,
    HealthResponse,
    RecallRequest,
    RecallResponse,
    RunReport,
    RunSummary,
)
from app.orchestrator import LabOrchestrator
from app.services.retrieval import RetrievalIndex, recall_at_k


settings = get_settings()
store = ArtifactStore(settings.runs_path)
orchestrator = LabOrchestrator(settings, store)

app = FastAPI(title="Center Contrastive Loss Lab", version=__version__)


@app.exception_handler(LabError)
def lab_error_handler(request: Request, exc: LabError) -> JSONResponse:
    del request
    return JSONResponse(status_code=422, content={"detail": str(exc), "error": exc.__class__.__name__})


@app.get("/healthz", response_model=HealthResponse)
def healthz() -> HealthResponse:
    return HealthResponse(
        status="ok",
        version=__version__,
        runs_dir=str(store.root),
        runs_count=len(store.list_runs()),
    )


@app.post("/api/gradcheck", response_model=GradcheckResponse)
def gradcheck(request: GradcheckRequest) -> GradcheckResponse:
    return orchestrator.gradcheck(seed=request.seed, trials=request.trials)


@app.post("/api/recall", response_model=RecallResponse)
def recall(request: RecallRequest) -> RecallResponse:
    queries = _matrix(request.queries, "queries")
    if request.gallery is None:
        index = RetrievalIndex.build(queries, request.query_labels)
        scores = recall_at_k(queries, request.query_labels, index, request.ks, exclude_self=True)
        return RecallResponse(exclude_self=True, recall=scores)
    if request.gallery_labels is None:
        raise HTTPException(status_code=422, detail="gallery_labels are required with a gallery")
    index = RetrievalIndex.build(_matrix(request.gallery, "gallery"), request.gallery_labels)
    return RecallResponse(exclude_self=False, recall=recall_at_k(queries, request.query_labels, index, request.ks))


@app.get("/api/runs", response_model=list[RunSummary])
def runs() -> list[RunSummary]:
    return store.list_runs()


@app.get("/api/runs/{run_id}", response_model=RunReport)
def run_detail(run_id: str) -> RunReport:
    report = store.read_report(run_id)
    if report is None:
        raise HTTPException(status_code=404, detail=f"Unknown run {run_id}")
    return report


def _matrix(rows: list[list[float]], name: str) -> np.ndarray:
    try:
        return np.asarray(rows, dtype=np.float64)
    except ValueError as exc:
        raise ShapeMismatch(f"{name} rows must all have the same length") from exc
