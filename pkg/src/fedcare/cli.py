"""Command-line entry point.

    fedcare sim run <spec.json|bundled-name> [--wire] [--out report.json] [--no-figures]
    fedcare sim verify <report.json>
    fedcare keygen --seed N [--out key.json]
    fedcare cloud serve --config cloud.json
    fedcare edge serve --config edge.json

Exit codes: 0 pass, 1 assertion failure, 2 usage or parse error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from .errors import FedcareError, ValidationError


def _cmd_sim_run(args) -> int:
    from .sim import run_scenario
    out = args.out or "report.json"
    try:
        report, code = run_scenario(args.spec, wire=args.wire, out_path=out,
                                    figures=not args.no_figures)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for item in report["assertions"]:
        mark = "PASS" if item["passed"] else "FAIL"
        threshold = "" if item["threshold"] is None else f" (threshold {item['threshold']})"
        print(f"[{mark}] {item['name']}: {item['observed']}{threshold}")
    print(f"report: {out}  transport={report['transport']}  "
          f"runtime={report['wall_clock_runtime_s']}s")
    return code


def _cmd_sim_verify(args) -> int:
    from .sim import verify_report
    try:
        failures = verify_report(args.report)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if failures:
        for failure in failures:
            print(f"[FAIL] {failure}")
        return 1
    print("[PASS] report re-checks green")
    return 0


def _cmd_keygen(args) -> int:
    from .crypto import keygen
    key = keygen(args.seed)
    payload = json.dumps(key.to_json(), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(payload + "\n", encoding="utf-8")
        print(f"key written to {args.out}")
    else:
        print(payload)
    return 0


def _load_config(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot parse config {path}: {exc}") from exc


def _cmd_cloud_serve(args) -> int:
    from .cloud import CloudConfig, CloudService
    from .cloud.httpd import CloudHttpServer
    from .ml import TrainingConfig
    from .transport import WallClock

    cfg = _load_config(args.config)
    service = CloudService(CloudConfig(
        admission_secret=cfg["admission_secret"],
        rounds=int(cfg.get("rounds", 5)),
        round_deadline=int(cfg.get("round_deadline", 30)),
        surrogate_deadline=int(cfg.get("surrogate_deadline", 30)),
        weighted_averaging=bool(cfg.get("weighted_averaging", True)),
        he_training=TrainingConfig(task="regression", **cfg.get("he_training", {})),
        data_dir=cfg.get("data_dir"),
    ), WallClock())
    host, _, port = cfg.get("listen_address", "127.0.0.1:8700").partition(":")
    server = CloudHttpServer(service, host=host, port=int(port or 0))
    server.start()
    print(f"cloud coordinator listening on {server.base_url}")
    try:
        while True:
            time.sleep(1)
    except KeyboardInterrupt:
        server.stop()
        service.snapshot()
        return 0


def _cmd_edge_serve(args) -> int:
    from .crypto import MoreKey
    from .domain import FeatureSchema, Intervention
    from .edge import EdgeConfig, EdgeNode
    from .edge.httpd import EdgeHttpServer
    from .ml import TrainingConfig
    from .transport import HttpCloudClient, TransportLog, WallClock

    cfg = _load_config(args.config)
    schema = FeatureSchema.from_json(json.loads(
        Path(cfg["schema_path"]).read_text(encoding="utf-8")))
    more_key = None
    if cfg.get("more_key_path"):
        more_key = MoreKey.from_json(json.loads(
            Path(cfg["more_key_path"]).read_text(encoding="utf-8")))
    clock = WallClock()
    config = EdgeConfig(
        edge_id=cfg["edge_id"],
        pseudonymization_key=cfg["pseudonymization_key"].encode("utf-8"),
        schema=schema,
        admission_secret=cfg.get("admission_secret", ""),
        cloud_base_url=cfg.get("cloud_base_url"),
        federation_enabled=bool(cfg.get("federation_enabled", True)),
        he_enabled=bool(cfg.get("he_enabled", False)),
        more_key=more_key,
        he_targets=tuple(cfg["he_targets"]) if cfg.get("he_targets") else None,
        bearer_token=cfg.get("bearer_token", "edge-dashboard-token"),
        interventions=tuple(Intervention(iv["id"], iv["kind"], iv["name"], 0)
                            for iv in cfg.get("interventions", [])),
        training=TrainingConfig(**cfg.get("training", {})),
        poll_sleep=0.05,
        data_dir=cfg.get("data_dir"),
        listen_address=cfg.get("listen_address", "127.0.0.1:8800"),
    )
    client = None
    if config.cloud_base_url:
        client = HttpCloudClient(config.cloud_base_url, config.edge_id,
                                 TransportLog(), clock)
    edge = EdgeNode(config, clock, client)
    if client is not None:
        edge.register_with_cloud()
    host, _, port = config.listen_address.partition(":")
    server = EdgeHttpServer(edge, host=host, port=int(port or 0))
    server.start()
    print(f"edge node {config.edge_id} listening on {server.base_url}")
    try:
        while True:
            if client is not None:
                edge.process_tasks()
            time.sleep(1)
    except KeyboardInterrupt:
        server.stop()
        return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedcare")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("sim", help="scenario harness")
    sim_sub = sim.add_subparsers(dest="sim_command", required=True)
    run_p = sim_sub.add_parser("run", help="run a scenario spec")
    run_p.add_argument("spec", help="path to a spec JSON or a bundled scenario name")
    run_p.add_argument("--wire", action="store_true",
                       help="run over loopback HTTP instead of in-process")
    run_p.add_argument("--out", default=None, help="report output path")
    run_p.add_argument("--no-figures", action="store_true",
                       help="skip figure/CSV rendering")
    run_p.set_defaults(func=_cmd_sim_run)
    verify_p = sim_sub.add_parser("verify", help="re-check a report")
    verify_p.add_argument("report")
    verify_p.set_defaults(func=_cmd_sim_verify)

    key_p = sub.add_parser("keygen", help="generate a shared encryption key")
    key_p.add_argument("--seed", type=int, required=True)
    key_p.add_argument("--out", default=None)
    key_p.set_defaults(func=_cmd_keygen)

    cloud_p = sub.add_parser("cloud", help="cloud coordinator")
    cloud_sub = cloud_p.add_subparsers(dest="cloud_command", required=True)
    cloud_serve = cloud_sub.add_parser("serve")
    cloud_serve.add_argument("--config", required=True)
    cloud_serve.set_defaults(func=_cmd_cloud_serve)

    edge_p = sub.add_parser("edge", help="edge node")
    edge_sub = edge_p.add_subparsers(dest="edge_command", required=True)
    edge_serve = edge_sub.add_parser("serve")
    edge_serve.add_argument("--config", required=True)
    edge_serve.set_defaults(func=_cmd_edge_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FedcareError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
