"""Request/response models for the experiment service."""

from __future__ import annotations

from typing import Any, Optional

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    version: str


class RunRequest(BaseModel):
    config: dict
    seed: Optional[int] = None
    out_root: Optional[str] = None
    overwrite: bool = False
    wait: bool = True  # False: return immediately and poll /runs/{run_id}


class RunInfo(BaseModel):
    run_id: str
    status: str  # queued | running | ok | error
    out_dir: Optional[str] = None
    summary: Optional[dict] = None
    error: Optional[str] = None


class MetricsResponse(BaseModel):
    run_id: str
    records: list[dict]


class SweepRequest(BaseModel):
    config: dict
    out_root: Optional[str] = None
    overwrite: bool = False
    parallel: int = 1


class SweepResponse(BaseModel):
    rows: list[dict]
    failures: list[dict]
    table: str
    cells: int


class ReportRequest(BaseModel):
    run_dirs: list[str]
    out_dir: str


class ReportResponse(BaseModel):
    files: list[str]
    skipped: list[dict]


class LossRequest(BaseModel):
    """Desk-scale loss evaluation on explicit matrices.

    ``loss`` is one of coral, mmd, lmmd, cmmd, mi, bnm, nwd. Feature losses
    read ``source``/``target``; prediction losses read the probability
    fields. LMMD and CMMD additionally need labels/probabilities.
    """

    loss: str
    source: Optional[list[list[float]]] = None
    target: Optional[list[list[float]]] = None
    source_labels: Optional[list[int]] = None
    target_probs: Optional[list[list[float]]] = None
    source_probs: Optional[list[list[float]]] = None
    class_count: Optional[int] = None
    kernel: dict = Field(default_factory=dict)
    nwd_mode: str = "nuclear"
    cmmd_reg: float = 1.0


class LossResponse(BaseModel):
    loss: str
    value: float
    components: dict[str, float]


class ExportFeaturesRequest(BaseModel):
    run_dir: str
    out_path: Optional[str] = None


class ExportFeaturesResponse(BaseModel):
    path: str


class GradCamRequest(BaseModel):
    run_dir: str
    image_path: str
    class_index: int
    layer: str
    out_path: Optional[str] = None


class GradCamResponse(BaseModel):
    path: str


class ADistanceRequest(BaseModel):
    source: list[list[float]]
    target: list[list[float]]
    seed: int = 0


class ADistanceResponse(BaseModel):
    value: float
    probe_error: float
    probe: str
    seed: int
