"""``gridwatch`` command line.

Exit codes: 0 success, 1 input/usage error, 2 power flow diverged,
3 power flow islanded.
"""

from __future__ import annotations

import argparse
import base64
import csv
import io
import json
import logging
import os
import random
import signal
import sys
import urllib.error
import urllib.request
from pathlib import Path
from typing import Any, Sequence

from gridwatch import __version__
from gridwatch.grid import GridError, GridSpec, parse_grid
from gridwatch.powerflow import Converged, Diverged, SolveOptions, outcome_to_dict, solve_newton

log = logging.getLogger("gridwatch")

EXIT_OK, EXIT_ERROR, EXIT_DIVERGED, EXIT_ISLANDED = 0, 1, 2, 3
TEST_MODE_ENV = "GRIDWATCH_TEST_MODE"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit 2, which means "diverged" here
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _read_grid(path: str, lenient: bool) -> GridSpec:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read grid file {path}: {exc}") from None
    return parse_grid(text, strict=not lenient)


def _write(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


# -- powerflow -------------------------------------------------------------

def cmd_powerflow(args: argparse.Namespace) -> int:
    spec = _read_grid(args.grid, args.lenient)
    outcome = solve_newton(spec, None, SolveOptions(tol=args.tol, max_iter=args.max_iter))
    _write(args.out, json.dumps(outcome_to_dict(outcome, spec), indent=2) + "\n")
    if isinstance(outcome, Converged):
        return EXIT_OK
    if isinstance(outcome, Diverged):
        log.error("power flow diverged after %d iterations: %s", outcome.iterations, outcome.reason)
        return EXIT_DIVERGED
    log.error("network is islanded: %s", outcome.islands)
    return EXIT_ISLANDED


# -- contingency -------------------------------------------------------------

def _load_reports(args: argparse.Namespace, spec: GridSpec) -> tuple[list, int]:
    from gridwatch.reports import AcceptedReport, IncidentReport, Rejection, map_to_asset

    accepted: list[AcceptedReport] = []
    skipped = 0

    def add(doc: Any, origin: str) -> None:
        nonlocal skipped
        try:
            if isinstance(doc, dict) and "report" in doc:
                rep = IncidentReport.from_dict(doc["report"])
            else:
                rep = IncidentReport.from_dict(doc)
        except Rejection as exc:
            log.warning("skipping unreadable report %s: %s", origin, exc)
            skipped += 1
            return
        accepted.append(AcceptedReport(rep, map_to_asset(rep.location, spec, args.radius), rep.timestamp))

    if args.reports_dir:
        for path in sorted(Path(args.reports_dir).glob("*.json")):
            try:
                doc = json.loads(path.read_text(encoding="utf-8"))
            except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
                log.warning("skipping unreadable report %s: %s", path, exc)
                skipped += 1
                continue
            add(doc, str(path))
    if args.store:
        for n, line in enumerate(Path(args.store).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                log.warning("skipping unreadable store line %d: %s", n, exc)
                skipped += 1
                continue
            add(doc, f"{args.store}:{n}")
    return accepted, skipped


def contingency_table(assessment) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rank", "contingency", "order", "probability", "severity", "unsolvable", "worst_branch"])
    for rank, e in enumerate(assessment.ranked(), 1):
        s = e.severity
        w.writerow([rank, e.contingency.label(), e.contingency.order, repr(e.probability), repr(s.value),
                    int(s.unsolvable), "" if s.worst_branch is None else s.worst_branch])
    return buf.getvalue()


def cmd_contingency(args: argparse.Namespace) -> int:
    from gridwatch.contingency import ScreeningPolicy, analyze, derive_probabilities
    from gridwatch.riskmap import raster_csv, raster_svg, risk_surface

    spec = _read_grid(args.grid, args.lenient)
    policy = ScreeningPolicy(floor=args.floor, threshold=args.threshold, budget=args.budget, max_order=args.max_order)
    reports, skipped = _load_reports(args, spec)
    probs = derive_probabilities(reports, spec, policy.floor)
    assessment = analyze(spec, probs, policy, exhaustive=args.exhaustive,
                         opts=SolveOptions(tol=args.tol, max_iter=args.max_iter), workers=args.workers)
    raster = risk_surface(assessment, spec, args.res)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "contingencies.csv").write_text(contingency_table(assessment), encoding="utf-8")
    (out / "risk.csv").write_text(raster_csv(raster), encoding="utf-8")
    (out / "risk.svg").write_text(raster_svg(raster, spec), encoding="utf-8")
    summary = {
        "reports_used": len(reports),
        "reports_mapped": sum(1 for r in reports if r.asset is not None),
        "reports_skipped": skipped,
        "contingencies_assessed": len(assessment.entries),
        "exhaustive": args.exhaustive,
        "asset_probabilities": {f"{k}:{i}": p for (k, i), p in sorted(probs.probs.items())},
        "bus_risk": {str(b): r for b, r in sorted(assessment.bus_risk.items())},
        "region_means": raster.quadrant_means(),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(summary, indent=2))
    return EXIT_OK


# -- serve ---------------------------------------------------------------------

def _listen(value: str) -> tuple[str, int]:
    host, _, port = value.rpartition(":")
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise UsageError(f"--listen must be host:port, got {value!r}") from None


def cmd_serve(args: argparse.Namespace) -> int:
    from gridwatch.contingency import ScreeningPolicy
    from gridwatch.reports import DeviceRegistry, ReportStore
    from gridwatch.service import ReportService, make_server

    spec = _read_grid(args.grid, args.lenient)
    registry = DeviceRegistry.from_json(Path(args.registry).read_text(encoding="utf-8"))
    host, port = _listen(args.listen)
    store = ReportStore(Path(args.store_path))
    service = ReportService(registry, store, spec, ScreeningPolicy(), radius=args.radius)
    try:
        server = make_server(service, host, port)
    except OSError as exc:
        store.close()
        log.error("cannot listen on %s:%d: %s", host, port, exc)
        return EXIT_ERROR

    def stop(signum, frame):  # noqa: ARG001
        log.info("signal %d: shutting down", signum)
        # shutdown() blocks until serve_forever returns, so hand it off
        import threading

        threading.Thread(target=server.shutdown, daemon=True).start()

    signal.signal(signal.SIGTERM, stop)
    signal.signal(signal.SIGINT, stop)
    log.info("listening on %s:%d (%d registered devices)", *server.server_address[:2], len(registry))
    print(f"listening on {server.server_address[0]}:{server.server_address[1]}", flush=True)
    try:
        server.serve_forever()
    finally:
        server.server_close()
        store.close()
    return EXIT_OK


# -- report --------------------------------------------------------------------

def _seeded_rng(seed: int | None) -> random.Random | None:
    if seed is None:
        return None
    if os.environ.get(TEST_MODE_ENV) != "1":
        raise UsageError(f"--seed is only available with {TEST_MODE_ENV}=1")
    return random.Random(seed)


def cmd_report_keygen(args: argparse.Namespace) -> int:
    from gridwatch.reports import DeviceKey, DeviceRegistry, SigningKey, now_ms

    key = SigningKey.generate(args.id)
    Path(args.key_out).write_text(key.to_json() + "\n", encoding="utf-8")
    if args.registry:
        path = Path(args.registry)
        reg = DeviceRegistry.from_json(path.read_text(encoding="utf-8")) if path.exists() else DeviceRegistry()
        reg.enroll(DeviceKey(args.id, key.public_bytes(), now_ms(), role=args.role))
        path.write_text(reg.to_json() + "\n", encoding="utf-8")
    print(json.dumps({"device_key_id": args.id, "public_key_b64": base64.b64encode(key.public_bytes()).decode()}))
    return EXIT_OK


def cmd_report_sign(args: argparse.Namespace) -> int:
    from gridwatch.reports import Attachment, IncidentReport, Rejection, SigningKey, make_report, sign

    key = SigningKey.from_json(Path(args.key).read_text(encoding="utf-8"))
    doc = json.loads(Path(args.report).read_text(encoding="utf-8"))
    claimed = doc.get("device_key_id", key.device_key_id)
    if claimed != key.device_key_id:
        raise UsageError(f"report is for device {claimed!r} but key is {key.device_key_id!r}")
    rng = _seeded_rng(args.seed)
    try:
        base = make_report(
            key.device_key_id,
            tuple(doc["location"]),
            doc["confidence"],
            doc.get("description", ""),
            [Attachment(**a) for a in doc.get("attachments", [])],
            timestamp=doc.get("timestamp"),
            rng=rng,
        )
        fields = base.to_dict()
        for k in ("report_id", "nonce"):
            if k in doc:
                fields[k] = doc[k]
        report = IncidentReport.from_dict(fields)
    except (KeyError, TypeError) as exc:
        raise UsageError(f"bad report file: {exc}") from None
    except Rejection as exc:
        raise UsageError(f"invalid report: {exc}") from None
    _write(args.out, sign(report, key).to_json() + "\n")
    return EXIT_OK


def cmd_report_send(args: argparse.Namespace) -> int:
    body = Path(args.envelope).read_bytes()
    req = urllib.request.Request(args.url.rstrip("/") + "/reports", data=body,
                                 headers={"Content-Type": "application/json"}, method="POST")
    try:
        with urllib.request.urlopen(req, timeout=args.timeout) as resp:
            print(resp.read().decode())
            return EXIT_OK
    except urllib.error.HTTPError as exc:
        print(exc.read().decode())
        return EXIT_ERROR
    except urllib.error.URLError as exc:
        raise UsageError(f"cannot reach {args.url}: {exc.reason}") from None


# -- capsule -------------------------------------------------------------------

def _owners(path: str) -> dict[str, bytes]:
    p = Path(path)
    if not p.exists():
        return {}
    return {k: base64.b64decode(v) for k, v in json.loads(p.read_text(encoding="utf-8")).items()}


def cmd_capsule_keygen(args: argparse.Namespace) -> int:
    from gridwatch.capsule import OwnerKey

    key = OwnerKey.generate(args.owner)
    Path(args.out).write_text(key.to_json() + "\n", encoding="utf-8")
    if args.owners:
        owners = _owners(args.owners)
        owners[args.owner] = key.public_bytes()
        Path(args.owners).write_text(json.dumps({k: base64.b64encode(v).decode() for k, v in sorted(owners.items())},
                                                indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_capsule_keyserver(args: argparse.Namespace) -> int:
    from gridwatch.capsule import KeyServer

    Path(args.out).write_text(KeyServer(require_attestation=not args.no_attestation).to_json() + "\n",
                              encoding="utf-8")
    return EXIT_OK


def cmd_capsule_attest(args: argparse.Namespace) -> int:
    from gridwatch.capsule import KeyServer

    ks = KeyServer.from_json(Path(args.keyserver).read_text(encoding="utf-8"))
    _write(args.out, ks.attest(args.descriptor.encode()).to_json() + "\n")
    return EXIT_OK


def cmd_capsule_package(args: argparse.Namespace) -> int:
    from gridwatch.capsule import CapsulePolicy, KeyServer, OwnerKey, package_capsule

    owner = OwnerKey.from_json(Path(args.owner_key).read_text(encoding="utf-8"))
    policy = CapsulePolicy.from_dict(json.loads(Path(args.policy).read_text(encoding="utf-8")))
    ks_path = Path(args.keyserver)
    ks = KeyServer.from_json(ks_path.read_text(encoding="utf-8"))
    payload = [(Path(p).name, Path(p).read_bytes()) for p in args.payload]
    capsule = package_capsule(payload, policy, owner, ks)
    Path(args.out).write_bytes(capsule.to_bytes())
    ks_path.write_text(ks.to_json() + "\n", encoding="utf-8")
    print(json.dumps({"capsule_id": capsule.capsule_id, "key_id": capsule.key_id}))
    return EXIT_OK


def cmd_capsule_install(args: argparse.Namespace) -> int:
    from gridwatch.capsule import Attestation, Capsule, CapsuleError, KeyServer, TaintEngine, install_capsule

    ks = KeyServer.from_json(Path(args.keyserver).read_text(encoding="utf-8"))
    att = Attestation.from_json(Path(args.attestation).read_text(encoding="utf-8")) if args.attestation else None
    db_path = Path(args.db)
    engine = TaintEngine.restore(db_path) if db_path.exists() else TaintEngine()
    try:
        capsule = Capsule.from_bytes(Path(args.capsule).read_bytes())
        inst = install_capsule(capsule, att, engine, ks, _owners(args.owners))
    except CapsuleError as exc:
        print(json.dumps({"error": type(exc).__name__, "detail": str(exc)}))
        return EXIT_ERROR
    engine.persist(db_path)
    print(json.dumps({"capsule_id": inst.capsule_id, "label": inst.label, "objects": list(inst.object_ids)}))
    return EXIT_OK


def cmd_capsule_simulate(args: argparse.Namespace) -> int:
    from gridwatch.capsule.script import simulate

    _, steps = simulate(Path(args.script).read_text(encoding="utf-8"))
    if args.json:
        print(json.dumps([{"index": s.index, **s.event.to_dict(), **s.decision.to_dict()} for s in steps], indent=2))
    else:
        for s in steps:
            print(s.line())
    return EXIT_OK


# -- wiring --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gridwatch", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"gridwatch {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def solver_flags(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--tol", type=float, default=1e-8, help="mismatch tolerance, per-unit (default 1e-8)")
        sp.add_argument("--max-iter", type=int, default=20, help="Newton iteration cap (default 20)")
        sp.add_argument("--lenient", action="store_true", help="ignore unknown keys in the grid file")

    pf = sub.add_parser("powerflow", help="solve the AC power flow of a grid file")
    pf.add_argument("grid", help="grid JSON file")
    pf.add_argument("--out", help="write solution JSON here instead of stdout")
    solver_flags(pf)
    pf.set_defaults(func=cmd_powerflow)

    ct = sub.add_parser("contingency", help="screen and assess contingencies, emit risk raster")
    ct.add_argument("grid", help="grid JSON file")
    ct.add_argument("--reports-dir", help="directory of report JSON files")
    ct.add_argument("--store", help="report store NDJSON written by 'serve'")
    ct.add_argument("--out-dir", default=".", help="output directory (default .)")
    ct.add_argument("--floor", type=float, default=0.001, help="baseline asset failure probability")
    ct.add_argument("--threshold", type=float, default=1e-4, help="minimum contingency probability")
    ct.add_argument("--budget", type=int, default=None, help="max contingencies to assess (default unlimited)")
    ct.add_argument("--max-order", type=int, default=2, help="highest outage order (default 2)")
    ct.add_argument("--exhaustive", action="store_true", help="assess every enumerated contingency")
    ct.add_argument("--res", type=int, default=40, help="raster resolution (default 40)")
    ct.add_argument("--radius", type=float, default=500.0, help="report-to-branch radius, metres")
    ct.add_argument("--workers", type=int, default=1, help="parallel assessment threads")
    solver_flags(ct)
    ct.set_defaults(func=cmd_contingency)

    sv = sub.add_parser("serve", help="run the report ingestion service")
    sv.add_argument("--grid", required=True, help="grid JSON file")
    sv.add_argument("--registry", required=True, help="device registry JSON")
    sv.add_argument("--store-path", required=True, help="report store NDJSON (created if absent)")
    sv.add_argument("--listen", default="127.0.0.1:8080", help="host:port (default 127.0.0.1:8080)")
    sv.add_argument("--radius", type=float, default=500.0, help="report-to-branch radius, metres")
    sv.add_argument("--lenient", action="store_true", help="ignore unknown keys in the grid file")
    sv.set_defaults(func=cmd_serve)

    rp = sub.add_parser("report", help="device keys, signing and submission")
    rsub = rp.add_subparsers(dest="action", required=True, parser_class=_Parser)
    kg = rsub.add_parser("keygen", help="create a device signing key")
    kg.add_argument("--id", required=True, help="device_key_id")
    kg.add_argument("--key-out", required=True, help="where to write the secret key JSON")
    kg.add_argument("--registry", help="registry JSON to enroll the public key in")
    kg.add_argument("--role", help="optional registry role")
    kg.set_defaults(func=cmd_report_keygen)
    sg = rsub.add_parser("sign", help="sign a report JSON into an envelope")
    sg.add_argument("--key", required=True, help="device secret key JSON")
    sg.add_argument("--report", required=True, help="report JSON (location, confidence, description, ...)")
    sg.add_argument("--out", help="envelope output (default stdout)")
    sg.add_argument("--seed", type=int, help=f"deterministic ids/nonce; needs {TEST_MODE_ENV}=1")
    sg.set_defaults(func=cmd_report_sign)
    sd = rsub.add_parser("send", help="POST an envelope to a running service")
    sd.add_argument("--url", required=True, help="service base URL")
    sd.add_argument("--envelope", required=True, help="envelope JSON file")
    sd.add_argument("--timeout", type=float, default=10.0, help="seconds (default 10)")
    sd.set_defaults(func=cmd_report_send)

    cp = sub.add_parser("capsule", help="capsule packaging, installation and simulation")
    csub = cp.add_subparsers(dest="action", required=True, parser_class=_Parser)
    ck = csub.add_parser("keygen", help="create an owner signing key")
    ck.add_argument("--owner", required=True, help="owner id")
    ck.add_argument("--out", required=True, help="secret key JSON")
    ck.add_argument("--owners", help="owners JSON to add the public key to")
    ck.set_defaults(func=cmd_capsule_keygen)
    ci = csub.add_parser("keyserver-init", help="create an empty key server state file")
    ci.add_argument("--out", required=True, help="key server JSON")
    ci.add_argument("--no-attestation", action="store_true", help="release keys without attestation")
    ci.set_defaults(func=cmd_capsule_keyserver)
    ca = csub.add_parser("attest", help="issue an attestation token for a platform descriptor")
    ca.add_argument("--keyserver", required=True, help="key server JSON")
    ca.add_argument("--descriptor", required=True, help="platform descriptor text")
    ca.add_argument("--out", help="attestation JSON (default stdout)")
    ca.set_defaults(func=cmd_capsule_attest)
    cg = csub.add_parser("package", help="encrypt and sign payload files into a capsule")
    cg.add_argument("--owner-key", required=True, help="owner secret key JSON")
    cg.add_argument("--policy", required=True, help="policy JSON")
    cg.add_argument("--keyserver", required=True, help="key server JSON (updated with the new key)")
    cg.add_argument("--out", required=True, help="capsule file to write")
    cg.add_argument("payload", nargs="+", help="payload files")
    cg.set_defaults(func=cmd_capsule_package)
    cn = csub.add_parser("install", help="verify, decrypt and install a capsule")
    cn.add_argument("capsule", help="capsule file")
    cn.add_argument("--keyserver", required=True, help="key server JSON")
    cn.add_argument("--owners", required=True, help="owners JSON (owner id -> public key)")
    cn.add_argument("--attestation", help="attestation JSON")
    cn.add_argument("--db", required=True, help="taint database NDJSON (created if absent)")
    cn.set_defaults(func=cmd_capsule_install)
    cs = csub.add_parser("simulate", help="replay an event script and print verdicts")
    cs.add_argument("script", help="event script JSON")
    cs.add_argument("--json", action="store_true", help="machine-readable transcript")
    cs.set_defaults(func=cmd_capsule_simulate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except GridError as exc:
        print(f"gridwatch: grid error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (UsageError, OSError, ValueError) as exc:
        print(f"gridwatch: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
