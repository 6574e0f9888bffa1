"""HTTP facade over the experiment harness.

Runs execute through the same orchestrator functions the CLI uses; a small
in-memory registry tracks submitted jobs so long trainings can be polled
instead of blocking the request.
"""

from __future__ import annotations

import threading
import uuid

import torch
from fastapi import FastAPI, HTTPException

from .. import __version__
from ..errors import ConfigError, DabenchError, RunCollisionError
from ..evaluation import a_distance
from ..losses import (
    bnm_loss,
    cmmd_loss,
    coral_loss,
    lmmd_loss,
    mmd_loss,
    mutual_info_loss,
    nwd_loss,
    subdomain_weights,
)
from ..numerics import KernelSpec, one_hot
from ..orchestrator import (
    cmd_export_features,
    cmd_grad_cam,
    cmd_report,
    cmd_run,
    cmd_sweep,
    read_metric_log,
)
from . import schemas

app = FastAPI(title="dabench", version=__version__)

_jobs: dict[str, schemas.RunInfo] = {}
_jobs_lock = threading.Lock()


@app.get("/health", response_model=schemas.HealthResponse)
def health():
    return schemas.HealthResponse(status="ok", version=__version__)


def _execute_run(run_id: str, req: schemas.RunRequest):
    try:
        result = cmd_run(req.config, out_root=req.out_root, seed=req.seed,
                         overwrite=req.overwrite)
        info = schemas.RunInfo(run_id=run_id, status=result.status,
                               out_dir=result.out_dir, summary=result.summary,
                               error=result.error)
    except DabenchError as exc:
        info = schemas.RunInfo(run_id=run_id, status="error", error=str(exc))
    with _jobs_lock:
        _jobs[run_id] = info
    return info


@app.post("/runs", response_model=schemas.RunInfo)
def submit_run(req: schemas.RunRequest):
    run_id = uuid.uuid4().hex[:12]
    if req.wait:
        try:
            info = _execute_run(run_id, req)
        except Exception as exc:  # defensive: surface anything unexpected
            raise HTTPException(status_code=500, detail=str(exc))
        if info.status == "error" and info.out_dir is None:
            # config/collision problems never started a run
            raise HTTPException(status_code=_status_for(info.error), detail=info.error)
        return info
    info = schemas.RunInfo(run_id=run_id, status="queued")
    with _jobs_lock:
        _jobs[run_id] = info
    thread = threading.Thread(target=_execute_run, args=(run_id, req), daemon=True)
    thread.start()
    return info


def _status_for(message: str | None) -> int:
    if message and "overwrite" in message:
        return 409
    return 400


@app.get("/runs/{run_id}", response_model=schemas.RunInfo)
def run_status(run_id: str):
    with _jobs_lock:
        info = _jobs.get(run_id)
    if info is None:
        raise HTTPException(status_code=404, detail=f"unknown run {run_id}")
    return info


@app.get("/runs/{run_id}/metrics", response_model=schemas.MetricsResponse)
def run_metrics(run_id: str):
    with _jobs_lock:
        info = _jobs.get(run_id)
    if info is None or not info.out_dir:
        raise HTTPException(status_code=404, detail=f"no artifacts for run {run_id}")
    try:
        records = read_metric_log(info.out_dir)
    except DabenchError as exc:
        raise HTTPException(status_code=404, detail=str(exc))
    return schemas.MetricsResponse(run_id=run_id, records=records)


@app.post("/sweeps", response_model=schemas.SweepResponse)
def submit_sweep(req: schemas.SweepRequest):
    try:
        result = cmd_sweep(req.config, out_root=req.out_root,
                           overwrite=req.overwrite, parallel=req.parallel)
    except ConfigError as exc:
        raise HTTPException(status_code=400, detail=str(exc))
    return schemas.SweepResponse(**result)


@app.post("/reports", response_model=schemas.ReportResponse)
def make_report(req: schemas.ReportRequest):
    result = cmd_report(req.run_dirs, req.out_dir)
    return schemas.ReportResponse(**result)


@app.post("/features/export", response_model=schemas.ExportFeaturesResponse)
def export_features_endpoint(req: schemas.ExportFeaturesRequest):
    try:
        path = cmd_export_features(req.run_dir, req.out_path)
    except (DabenchError, FileNotFoundError) as exc:
        raise HTTPException(status_code=400, detail=str(exc))
    return schemas.ExportFeaturesResponse(path=path)


@app.post("/gradcam", response_model=schemas.GradCamResponse)
def grad_cam_endpoint(req: schemas.GradCamRequest):
    try:
        path = cmd_grad_cam(req.run_dir, req.image_path, req.class_index,
                            req.layer, req.out_path)
    except (DabenchError, FileNotFoundError) as exc:
        raise HTTPException(status_code=400, detail=str(exc))
    return schemas.GradCamResponse(path=path)


@app.post("/adistance", response_model=schemas.ADistanceResponse)
def a_distance_endpoint(req: schemas.ADistanceRequest):
    try:
        est = a_distance(req.source, req.target, seed=req.seed)
    except DabenchError as exc:
        raise HTTPException(status_code=400, detail=str(exc))
    return schemas.ADistanceResponse(value=est.value, probe_error=est.probe_error,
                                     probe=est.probe, seed=est.seed)


def _tensor(rows, name: str) -> torch.Tensor:
    if rows is None:
        raise HTTPException(status_code=400, detail=f"loss request needs {name}")
    return torch.tensor(rows, dtype=torch.float64)


@app.post("/losses/evaluate", response_model=schemas.LossResponse)
def evaluate_loss(req: schemas.LossRequest):
    kernel = KernelSpec(
        kind=req.kernel.get("kind", "gaussian-multi"),
        bandwidth_base=req.kernel.get("bandwidth_base", "median"),
        ladder=tuple(req.kernel.get("ladder", KernelSpec().ladder)),
    ) if req.kernel else KernelSpec()
    try:
        if req.loss == "coral":
            lv = coral_loss(_tensor(req.source, "source"), _tensor(req.target, "target"))
        elif req.loss == "mmd":
            lv = mmd_loss(_tensor(req.source, "source"), _tensor(req.target, "target"),
                          kernel)
        elif req.loss == "lmmd":
            fs = _tensor(req.source, "source")
            ft = _tensor(req.target, "target")
            if req.source_labels is None or req.target_probs is None or not req.class_count:
                raise HTTPException(
                    status_code=400,
                    detail="lmmd needs source_labels, target_probs and class_count")
            ws = subdomain_weights(one_hot(torch.tensor(req.source_labels),
                                           req.class_count, dtype=fs.dtype))
            wt = subdomain_weights(_tensor(req.target_probs, "target_probs"))
            lv = lmmd_loss(fs, ft, ws, wt, kernel, req.class_count)
        elif req.loss == "cmmd":
            fs = _tensor(req.source, "source")
            ft = _tensor(req.target, "target")
            if req.source_labels is None or req.target_probs is None or not req.class_count:
                raise HTTPException(
                    status_code=400,
                    detail="cmmd needs source_labels, target_probs and class_count")
            ys = one_hot(torch.tensor(req.source_labels), req.class_count, dtype=fs.dtype)
            lv = cmmd_loss(fs, ft, ys, _tensor(req.target_probs, "target_probs"),
                           kernel, reg=req.cmmd_reg)
        elif req.loss == "mi":
            lv = mutual_info_loss(_tensor(req.target_probs, "target_probs"))
        elif req.loss == "bnm":
            lv = bnm_loss(_tensor(req.target_probs, "target_probs"))
        elif req.loss == "nwd":
            lv = nwd_loss(_tensor(req.source_probs, "source_probs"),
                          _tensor(req.target_probs, "target_probs"), mode=req.nwd_mode)
        else:
            raise HTTPException(status_code=400, detail=f"unknown loss {req.loss!r}")
    except DabenchError as exc:
        raise HTTPException(status_code=400, detail=str(exc))
    return schemas.LossResponse(loss=req.loss, value=float(lv.value),
                                components={k: float(v) for k, v in lv.components.items()})
