"""Thin command-line client for the experiment service.

Every verb is one HTTP call. With --server (or DABENCH_SERVER) requests go
to a running service; otherwise the app is mounted in-process, so local use
needs no daemon and stays fully deterministic.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

SERVER_ENV = "DABENCH_SERVER"


def _client(server: str | None):
    server = server or os.environ.get(SERVER_ENV)
    if server:
        import httpx

        return httpx.Client(base_url=server, timeout=None)
    from fastapi.testclient import TestClient

    from .service.app import app

    return TestClient(app)


def _load_config(path: str) -> dict:
    from .config import load_config_file

    return load_config_file(path)


def _fail(resp) -> int:
    detail = resp.json().get("detail", resp.text)
    print(f"error: {detail}", file=sys.stderr)
    if resp.status_code == 409:
        return 3
    if resp.status_code in (400, 422):
        return 2
    return 1


def cmd_run(args) -> int:
    payload = {"config": _load_config(args.config), "seed": args.seed,
               "out_root": args.out, "overwrite": args.overwrite, "wait": True}
    with _client(args.server) as client:
        resp = client.post("/runs", json=payload)
        if resp.status_code != 200:
            return _fail(resp)
        info = resp.json()
    if info["status"] != "ok":
        print(f"error: {info.get('error')}", file=sys.stderr)
        print(f"partial artifacts: {info.get('out_dir')}", file=sys.stderr)
        return 1
    print(json.dumps(info["summary"], indent=2))
    print(f"artifacts: {info['out_dir']}")
    return 0


def cmd_sweep(args) -> int:
    payload = {"config": _load_config(args.config), "out_root": args.out,
               "overwrite": args.overwrite, "parallel": args.parallel}
    with _client(args.server) as client:
        resp = client.post("/sweeps", json=payload)
        if resp.status_code != 200:
            return _fail(resp)
        result = resp.json()
    for row in result["rows"]:
        print("\t".join(str(row[k]) for k in
                        ("algorithm", "scenario", "backbone", "batch_size",
                         "seed", "best_accuracy", "best_epoch")))
    if result["failures"]:
        print(f"{len(result['failures'])} cell(s) failed; see sweep_errors.txt",
              file=sys.stderr)
    print(f"table: {result['table']}")
    return 0


def cmd_report(args) -> int:
    payload = {"run_dirs": args.run_dirs, "out_dir": args.out or "report"}
    with _client(args.server) as client:
        resp = client.post("/reports", json=payload)
        if resp.status_code != 200:
            return _fail(resp)
        result = resp.json()
    for f in result["files"]:
        print(f)
    for s in result["skipped"]:
        print(f"skipped {s['run_dir']}: {s['error']}", file=sys.stderr)
    return 0


def cmd_export_features(args) -> int:
    payload = {"run_dir": args.run_dir, "out_path": args.out}
    with _client(args.server) as client:
        resp = client.post("/features/export", json=payload)
        if resp.status_code != 200:
            return _fail(resp)
        print(resp.json()["path"])
    return 0


def cmd_grad_cam(args) -> int:
    payload = {"run_dir": args.run_dir, "image_path": args.image,
               "class_index": args.class_index, "layer": args.layer,
               "out_path": args.out}
    with _client(args.server) as client:
        resp = client.post("/gradcam", json=payload)
        if resp.status_code != 200:
            return _fail(resp)
        print(resp.json()["path"])
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service.app import app

    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dabench",
                                     description="domain-adaptation benchmark harness")
    parser.add_argument("--server", "-s", default=None,
                        help=f"service URL (default: in-process; env {SERVER_ENV})")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment from a config file")
    p.add_argument("--config", "-c", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", "-o", default=None, help="output root directory")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run every cell of the config's sweep axes")
    p.add_argument("--config", "-c", required=True)
    p.add_argument("--out", "-o", default=None)
    p.add_argument("--overwrite", action="store_true")
    p.add_argument("--parallel", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="curves + summary table for finished runs")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", "-o", default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("export-features", help="dump bottleneck features of a run")
    p.add_argument("run_dir")
    p.add_argument("--out", "-o", default=None)
    p.set_defaults(func=cmd_export_features)

    p = sub.add_parser("grad-cam", help="class-activation heatmap from a run checkpoint")
    p.add_argument("run_dir")
    p.add_argument("--image", required=True)
    p.add_argument("--class-index", type=int, required=True)
    p.add_argument("--layer", required=True)
    p.add_argument("--out", "-o", default=None)
    p.set_defaults(func=cmd_grad_cam)

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8008)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
