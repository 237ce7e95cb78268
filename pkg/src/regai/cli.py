"""Command line interface.

Exit codes: 0 success, 1 operational error, 2 anomaly flags raised.

Output layout under ``--out``::

    generate-rubric   proposal.rubric, audit-<run_id>.jsonl
    score             <run_id>/scores.jsonl, cycles.jsonl, proposals.jsonl,
                      errors.jsonl, summary.json, audit.jsonl, report.json
    evaluate          report.json, report.txt, metrics.tsv,
                      distributions.png, category_metrics.png
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import yaml

from . import __version__
from .audit import AuditLog, canonical_json, fixed_clock, utc_now
from .config import ConfigError, RunConfig, build_embedder, build_engine, load_config, load_stores, save_stores
from .dataset import DatasetError, first_n, parse_dataset
from .domain import (
    RecordText,
    RubricError,
    critique_to_dict,
    edit_from_dict,
    parse_rubric,
    render_rubric,
    scoreset_from_dict,
    scoreset_to_dict,
)
from .evaluation import AlignmentError, evaluate, load_scoresets
from .llm import ProviderError
from .metrics import MetricsError, MetricsReport, anomaly_check
from .pipeline import (
    CycleError,
    Mode,
    Phase,
    ReviewAction,
    Rejection,
    admit,
    build_manifest,
    decide_admission,
    generate_rubric,
    review_gate,
    run_critique_cycle,
)
from .plotting import render_figures
from .retrieval import RetrievalConfig, RetrievalError, StoreKind, top_k

EXIT_OK, EXIT_ERROR, EXIT_ANOMALY = 0, 1, 2
CONFIG_ENV = "REGAI_CONFIG"


class CliError(Exception):
    pass


def _err(msg: str) -> None:
    print(f"regai: error: {msg}", file=sys.stderr)


def _config(args) -> RunConfig:
    path = args.config or os.environ.get(CONFIG_ENV)
    if not path:
        raise CliError(f"no config: pass --config or set {CONFIG_ENV}")
    return load_config(path, seed=getattr(args, "seed", None))


def _read_text(path: str, what: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read {what} {path}: {exc.strerror or exc}") from exc


def _clock(args):
    return fixed_clock(args.fixed_clock) if getattr(args, "fixed_clock", None) else utc_now


def _default_run_id(prefix: str) -> str:
    return prefix + "-" + datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")


def _write_jsonl(path: Path, rows: Sequence[dict]) -> None:
    path.write_text("".join(canonical_json(r) + "\n" for r in rows), encoding="utf-8")


# -- generate-rubric --------------------------------------------------------


def cmd_generate_rubric(args) -> int:
    cfg = _config(args)
    task = _read_text(args.task, "task file")
    note = _read_text(args.domain_note_file, "domain note file") if args.domain_note_file else args.domain_note
    engine = build_engine(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run_id = args.run_id or _default_run_id("gen")
    engine.audit = AuditLog(run_id, build_manifest(engine).to_dict(), out / f"audit-{run_id}.jsonl", _clock(args))
    try:
        rubric, _ = generate_rubric(engine, note or "", task)
    except RubricError as exc:
        raw = getattr(exc, "raw", None)
        if raw:
            (out / f"unparsed-{run_id}.txt").write_text(raw, encoding="utf-8")
            raise CliError(f"completion did not parse as a rubric ({exc}); raw text saved for repair") from exc
        raise CliError(f"generated rubric is not valid: {exc}") from exc
    path = out / "proposal.rubric"
    path.write_text(render_rubric(rubric), encoding="utf-8")
    print(f"wrote unapproved proposal {path} ({len(rubric.criteria)} criteria)")
    return EXIT_OK


# -- review -----------------------------------------------------------------


def cmd_review(args) -> int:
    path = Path(args.rubric)
    try:
        rubric = parse_rubric(_read_text(args.rubric, "rubric"))
    except RubricError as exc:
        raise CliError(f"{path}: {exc}") from exc
    if args.reject:
        result = review_gate(rubric, ReviewAction.REJECT, args.reason or "")
        assert isinstance(result, Rejection)
        record = path.with_name(path.name + ".rejection.json")
        record.write_text(json.dumps(asdict(result), indent=2) + "\n", encoding="utf-8")
        if rubric.approved:
            path.write_text(render_rubric(replace(rubric, approved=False)), encoding="utf-8")
        print(f"rejected {rubric.id}; record written to {record}")
        return EXIT_OK
    if args.edit:
        try:
            items = json.loads(_read_text(args.edit, "edits file"))
            if not isinstance(items, list):
                raise CliError(f"{args.edit}: expected a JSON list of edits")
            edits = [edit_from_dict(d) for d in items]
            result = review_gate(rubric, edits)
        except (ValueError, RubricError) as exc:
            raise CliError(f"edit rejected, rubric left unchanged: {exc}") from exc
    else:
        result = review_gate(rubric, ReviewAction.APPROVE)
    path.write_text(render_rubric(result), encoding="utf-8")
    print(f"approved {result.id}")
    return EXIT_OK


# -- score ------------------------------------------------------------------


@dataclass
class RunSummary:
    run_id: str
    manifest: dict
    manifest_hash: str
    records: int
    passed: int
    exhausted: int
    errors: int
    wall_time_s: float
    metrics_report: str | None
    audit: str


def cmd_score(args) -> int:
    cfg = _config(args)
    if args.max_iters is not None:
        cfg.pipeline = replace(cfg.pipeline, max_critique_iterations=args.max_iters)
    try:
        rubric = parse_rubric(_read_text(args.rubric, "rubric"))
    except RubricError as exc:
        raise CliError(f"{args.rubric}: {exc}") from exc
    if not rubric.approved:
        raise CliError(f"rubric {rubric.id!r} is not approved; run 'regai review --approve' first")
    try:
        records = parse_dataset(args.records, essay_set=args.essay_set)
    except DatasetError as exc:
        raise CliError(str(exc)) from exc
    if args.limit is not None:
        records = first_n(records, args.limit)

    run_id = args.run_id or _default_run_id("run")
    run_dir = Path(args.out) / run_id
    if run_dir.exists():
        raise CliError(f"run {run_id!r} already exists at {run_dir}; refusing to overwrite")
    run_dir.mkdir(parents=True)
    engine = build_engine(cfg)
    manifest = build_manifest(engine)
    engine.audit = AuditLog(run_id, manifest.to_dict(), run_dir / "audit.jsonl", _clock(args))
    mode = Mode(args.mode)
    started = time.monotonic()

    def one(rec):
        text = RecordText(rec.record_id, rec.body)
        try:
            final, state, _ = run_critique_cycle(engine, text, rubric, mode)
            return rec, text, state, None
        except CycleError as exc:
            return rec, text, exc.state, exc

    with ThreadPoolExecutor(max_workers=max(1, args.workers)) as pool:
        results = list(pool.map(one, records))

    scores, cycles, errors, proposals = [], [], [], []
    passed = exhausted = 0
    for rec, text, state, exc in results:
        cycles.append({
            "record_id": state.record_id, "mode": state.mode.value, "phase": state.phase.value,
            "iteration": state.iteration, "trace": [p.value for p in state.trace],
            "drafts": [scoreset_to_dict(d) for d in state.drafts],
            "critiques": [critique_to_dict(c) for c in state.critiques],
        })
        if exc is not None:
            errors.append({"record_id": state.record_id, "phase": state.phase.value, "error": str(exc)})
            continue
        passed += state.phase is Phase.PASSED
        exhausted += state.phase is Phase.EXHAUSTED
        scores.append({**scoreset_to_dict(state.final), "phase": state.phase.value})
        for p in decide_admission(state, text, cfg.pipeline.admission_policy):
            proposals.append(p)

    _write_jsonl(run_dir / "scores.jsonl", scores)
    _write_jsonl(run_dir / "cycles.jsonl", cycles)
    _write_jsonl(run_dir / "errors.jsonl", errors)
    _write_jsonl(run_dir / "proposals.jsonl", [
        {"kind": p.kind.value, "key_text": p.key_text, "value_doc": p.value_doc, "approved": p.approved,
         "metadata": dict(p.metadata)} for p in proposals
    ])
    if args.admit and proposals:
        admit(proposals, engine.stores)
        save_stores(cfg, engine.stores)

    report_path = None
    if not errors and records:
        by_id = {s["record_id"]: scoreset_from_dict(s) for s in scores}
        try:
            report = evaluate(records, {mode.value: by_id}, hrs_source=cfg.hrs_source)
        except MetricsError as exc:
            print(f"no metrics report for this run: {exc}", file=sys.stderr)
        else:
            report_path = run_dir / "report.json"
            report_path.write_text(report.to_json(), encoding="utf-8")

    summary = RunSummary(
        run_id, manifest.to_dict(), manifest.hash, len(records), passed, exhausted, len(errors),
        round(time.monotonic() - started, 3), str(report_path) if report_path else None, str(run_dir / "audit.jsonl"),
    )
    (run_dir / "summary.json").write_text(json.dumps(asdict(summary), indent=2) + "\n", encoding="utf-8")
    print(f"run {run_id}: records {len(records)}, passed {passed}, exhausted {exhausted}, errors {len(errors)}")
    for e in errors:
        print(f"  record {e['record_id']} failed in {e['phase']}: {e['error']}", file=sys.stderr)
    return EXIT_ERROR if errors else EXIT_OK


# -- evaluate ---------------------------------------------------------------


def _parse_system(spec: str) -> tuple[str, str]:
    label, sep, path = spec.partition("=")
    if not sep or not label or not path:
        raise CliError(f"--system expects LABEL=PATH, got {spec!r}")
    return label, path


def cmd_evaluate(args) -> int:
    try:
        records = parse_dataset(args.dataset, essay_set=args.essay_set)
    except DatasetError as exc:
        raise CliError(str(exc)) from exc
    if args.limit is not None:
        records = first_n(records, args.limit)
    if not records:
        raise CliError(f"no essay-set {args.essay_set} records in {args.dataset}")
    systems = {}
    for spec in args.system or []:
        label, path = _parse_system(spec)
        if label in ("R1", "R2", "HRS"):
            raise CliError(f"system label {label!r} is reserved for the human columns")
        try:
            systems[label] = load_scoresets(path)
        except (OSError, ValueError) as exc:
            raise CliError(f"cannot load scores {path}: {exc}") from exc
    try:
        report = evaluate(records, systems, hrs_source=args.hrs_source, category_reference=args.category_reference)
    except AlignmentError as exc:
        raise CliError(f"score file not aligned with the dataset: {exc}") from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    text = report.render_text()
    (out / "report.txt").write_text(text, encoding="utf-8")
    (out / "metrics.tsv").write_text(
        "metric\tvalue\n" + "".join(f"{k}\t{v!r}\n" for k, v in report.flatten().items()), encoding="utf-8")
    figures = render_figures(report, out)
    print(text)
    print("wrote " + ", ".join(str(p) for p in [out / "report.json", out / "report.txt", out / "metrics.tsv", *figures]))
    return EXIT_OK


# -- track ------------------------------------------------------------------


def _load_report(path: Path) -> MetricsReport:
    try:
        return MetricsReport.from_dict(json.loads(path.read_text(encoding="utf-8")))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CliError(f"cannot read report {path}: {exc}") from exc


def cmd_track(args) -> int:
    base = Path(args.baseline)
    files = sorted(base.glob("*.json")) if base.is_dir() else []
    if not files:
        raise CliError(f"baseline directory {base} has no report files")
    baselines = [_load_report(p) for p in files]
    report = _load_report(Path(args.report))
    thresholds = yaml.safe_load(_read_text(args.thresholds, "thresholds file")) or {}
    if not isinstance(thresholds, dict):
        raise CliError(f"{args.thresholds}: expected a mapping of metric -> threshold")
    flags = anomaly_check(report, baselines, {str(k): float(v) for k, v in thresholds.items()})
    for f in flags:
        print(f"ANOMALY\t{f}")
    print(f"{len(flags)} anomaly flag(s) against {len(baselines)} baseline report(s)")
    return EXIT_ANOMALY if flags else EXIT_OK


# -- kb ---------------------------------------------------------------------

KIND_NAMES = {"rubric": StoreKind.RUBRIC_EXEMPLARS, "scoring": StoreKind.SCORING_EXEMPLARS,
              "critique": StoreKind.CRITIQUE_EXEMPLARS}


def _kb_path(cfg: RunConfig, kind: StoreKind) -> Path:
    path = cfg.store_paths[kind]
    if path is None:
        raise CliError(f"config has no store path for {kind.value}")
    return path


def cmd_kb(args) -> int:
    cfg = _config(args)
    embedder = build_embedder(cfg)
    stores = load_stores(cfg, embedder)
    if args.kb_cmd == "stats":
        for kind in StoreKind:
            s = stores.by_kind(kind).stats()
            print(f"{kind.value}\ttotal={s['total']}\tapproved={s['approved']}\tunapproved={s['unapproved']}")
        return EXIT_OK
    if args.kb_cmd == "list":
        kinds = [KIND_NAMES[args.kind]] if args.kind else list(StoreKind)
        for kind in kinds:
            for e in stores.by_kind(kind).entries:
                key = e.key_text.replace("\n", " ")
                print(f"{e.id}\t{'approved' if e.approved else 'pending'}\t{key[:60]}")
        return EXIT_OK
    if args.kb_cmd == "approve":
        prefix = args.id.split("-", 1)[0]
        kind = KIND_NAMES.get(prefix)
        if kind is None:
            raise CliError(f"unknown entry id {args.id!r}")
        try:
            stores.by_kind(kind).set_approved(args.id, not args.revoke)
        except KeyError:
            raise CliError(f"unknown entry id {args.id!r}") from None
        save_stores(cfg, stores)
        print(f"{'revoked' if args.revoke else 'approved'} {args.id}")
        return EXIT_OK
    if args.kb_cmd == "add":
        kind = KIND_NAMES[args.kind]
        _kb_path(cfg, kind)
        meta = dict(m.split("=", 1) for m in args.meta or [])
        new_id = stores.by_kind(kind).add_entry(
            _read_text(args.key_file, "key file"), _read_text(args.doc_file, "document file"),
            performance=args.performance, approved=args.approved, metadata=meta,
        )
        save_stores(cfg, stores)
        print(new_id)
        return EXIT_OK
    if args.kb_cmd == "query":
        store = stores.by_kind(KIND_NAMES[args.kind])
        rc = cfg.pipeline.retrieval[store.kind]
        rc = RetrievalConfig(args.k or rc.k, rc.similarity_threshold, rc.measure, rc.similarity)
        for m in top_k(store, embedder.embed(_read_text(args.text_file, "query file")), rc):
            print(f"{m.entry.id}\tscore={m.score:.6f}\tcosine={m.similarity:.6f}")
        return EXIT_OK
    raise CliError(f"unknown kb command {args.kb_cmd!r}")


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="regai", description="Rubric-driven scoring with a critique cycle.")
    p.add_argument("--version", action="version", version=f"regai {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help=f"YAML config (default: ${CONFIG_ENV})")
        sp.add_argument("--seed", type=int, help="override embedding and sampling seeds")

    g = sub.add_parser("generate-rubric", help="draft an unapproved rubric for a task")
    with_config(g)
    g.add_argument("--task", required=True, help="text file describing the task")
    g.add_argument("--domain-note", default="", help="system prompt describing the domain")
    g.add_argument("--domain-note-file")
    g.add_argument("--out", required=True)
    g.add_argument("--run-id")
    g.add_argument("--fixed-clock", metavar="ISO", help="timestamp every audit event with this value")
    g.set_defaults(func=cmd_generate_rubric)

    r = sub.add_parser("review", help="approve, edit or reject a rubric file")
    r.add_argument("rubric")
    act = r.add_mutually_exclusive_group(required=True)
    act.add_argument("--approve", action="store_true")
    act.add_argument("--edit", metavar="EDITS_JSON")
    act.add_argument("--reject", action="store_true")
    r.add_argument("--reason")
    r.set_defaults(func=cmd_review)

    s = sub.add_parser("score", help="score dataset records with an approved rubric")
    with_config(s)
    s.add_argument("--rubric", required=True)
    s.add_argument("--records", required=True, help="ASAP-style TSV")
    s.add_argument("--essay-set", type=int, default=8)
    s.add_argument("--limit", type=int)
    s.add_argument("--mode", choices=[m.value for m in Mode], default="SC")
    s.add_argument("--max-iters", type=int)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--run-id")
    s.add_argument("--out", required=True)
    s.add_argument("--admit", action="store_true", help="add admission proposals to the knowledge bases")
    s.add_argument("--fixed-clock", metavar="ISO")
    s.set_defaults(func=cmd_score)

    e = sub.add_parser("evaluate", help="metrics report with figures")
    e.add_argument("--dataset", required=True)
    e.add_argument("--essay-set", type=int, default=8)
    e.add_argument("--limit", type=int, default=500)
    e.add_argument("--system", action="append", metavar="LABEL=SCORES_JSONL")
    e.add_argument("--hrs-source", choices=["combined", "resolved"], default="combined")
    e.add_argument("--category-reference", choices=["R1", "R2"], default="R1")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    t = sub.add_parser("track", help="flag metrics that drifted from baseline reports")
    t.add_argument("--baseline", required=True)
    t.add_argument("--report", required=True)
    t.add_argument("--thresholds", required=True, help="YAML/JSON mapping of metric path or leaf to threshold")
    t.set_defaults(func=cmd_track)

    k = sub.add_parser("kb", help="manage the exemplar knowledge bases")
    with_config(k)
    ks = k.add_subparsers(dest="kb_cmd", required=True)
    kl = ks.add_parser("list")
    kl.add_argument("--kind", choices=list(KIND_NAMES))
    ka = ks.add_parser("approve")
    ka.add_argument("id")
    ka.add_argument("--revoke", action="store_true")
    kd = ks.add_parser("add")
    kd.add_argument("--kind", choices=list(KIND_NAMES), required=True)
    kd.add_argument("--key-file", required=True)
    kd.add_argument("--doc-file", required=True)
    kd.add_argument("--performance", type=float)
    kd.add_argument("--approved", action="store_true")
    kd.add_argument("--meta", action="append", metavar="KEY=VALUE")
    ks.add_parser("stats")
    kq = ks.add_parser("query", help="diagnostic top-k lookup")
    kq.add_argument("--kind", choices=list(KIND_NAMES), required=True)
    kq.add_argument("--text-file", required=True)
    kq.add_argument("--k", type=int)
    k.set_defaults(func=cmd_kb)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigError, RetrievalError, ProviderError, MetricsError, RubricError, ValueError) as exc:
        _err(str(exc))
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
