"""Command-line driver: scan, extract, eval, report, replay-check.

Exit codes: 0 success, 1 partial failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .agent import Checker, CheckerNotFound
from .corpus import CorpusIndex, NoFilesMatched, scan_project
from .evaluation import (EvalConfig, FoldPlan, TooFewTheorems, build_report, evaluate, load_outcomes,
                         make_folds, render_report)
from .extraction import (ExtractionConfig, build_formalize_prompt, build_nl_proof_prompt,
                         extract_for_theorem, make_nl_proof)
from .gateway import (Cassette, ChatMessage, Gateway, GatewayError, GenerationParams, RateLimiter, RoutingProvider,
                      cassette_key)
from .retrieval import collect_context
from .store import LemmaStore

log = logging.getLogger("lemmamine")

INDEX_FILE = "index.jsonl"
STORE_FILE = "store.jsonl"
TELEMETRY_FILE = "telemetry.jsonl"
OUTCOMES_FILE = "outcomes.jsonl"
REPORT_MD = "report.md"
REPORT_CSV = "report.csv"
FOLDS_FILE = "folds.json"
CONFIG_DUMP = "config.effective.json"


class ConfigError(Exception):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class ProjectConfig:
    root: str
    name: str | None = None
    globs: list[str] = field(default_factory=lambda: ["**/*.v"])
    coq_flags: list[str] = field(default_factory=list)
    imports: str = ""
    max_theorems: int | None = None
    sample_seed: int = 0


@dataclass
class RunConfig:
    projects: list[ProjectConfig] = field(default_factory=list)
    extraction_model: str = "claude-3-7-sonnet-20250219"
    agent_model: str = "o4-mini"
    temperature: float = 0.0
    max_output_tokens: int = 8192
    mode: str = "replay"
    cassette: str | None = None
    round_limit: int = 8
    k: int = 3
    seed: int = 0
    token_budget: int | None = None
    context_budget: int = 32000
    depth_limit: int = 3
    requests_per_minute: int | None = None
    max_concurrent: int = 4
    checker_timeout_secs: float = 60.0
    prover_timeout_secs: float = 60.0
    jobs: int = 1
    filter_redundant: bool = False
    include_admitted: bool = False
    coqc: str = "coqc"
    out_dir: str = "out"

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(key, "unknown key")
        d = dict(d)
        projects = []
        for i, p in enumerate(d.pop("projects", [])):
            if not isinstance(p, dict) or "root" not in p:
                raise ConfigError(f"projects[{i}].root", "missing")
            pk = {f.name for f in fields(ProjectConfig)}
            for key in p:
                if key not in pk:
                    raise ConfigError(f"projects[{i}].{key}", "unknown key")
            p = dict(p)
            if base is not None and not os.path.isabs(p["root"]):
                p["root"] = str((base / p["root"]).resolve())
            projects.append(ProjectConfig(**p))
        cfg = cls(projects=projects, **d)
        if base is not None:
            if cfg.cassette and not os.path.isabs(cfg.cassette):
                cfg.cassette = str((base / cfg.cassette).resolve())
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.round_limit < 1:
            raise ConfigError("round_limit", "must be >= 1")
        if self.k < 2:
            raise ConfigError("k", "must be >= 2")
        if self.jobs < 1:
            raise ConfigError("jobs", "must be >= 1")
        if self.mode not in ("live", "record", "replay"):
            raise ConfigError("mode", "must be live, record or replay")
        if self.mode in ("record", "replay") and not self.cassette:
            raise ConfigError("cassette", f"required in {self.mode} mode")
        for i, p in enumerate(self.projects):
            if not os.path.isdir(p.root):
                raise ConfigError(f"projects[{i}].root", f"{p.root} does not exist")

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(path: str | None, args: argparse.Namespace) -> RunConfig:
    raw: dict = {}
    base = None
    if path:
        try:
            with open(path, encoding="utf-8") as f:
                raw = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError("config", str(e)) from e
        base = Path(path).resolve().parent
    overrides = {
        "mode": args.mode, "cassette": args.cassette, "round_limit": args.rounds, "k": args.folds,
        "seed": args.seed, "prover_timeout_secs": args.timeout_secs, "jobs": args.jobs,
        "out_dir": args.out_dir,
    }
    for k, v in overrides.items():
        if v is not None:
            raw[k] = v
    if args.filter_redundant:
        raw["filter_redundant"] = True
    if args.project:
        raw["projects"] = [{"root": os.path.abspath(p)} for p in args.project]
    if args.cassette:
        raw["cassette"] = os.path.abspath(args.cassette)
    return RunConfig.from_dict(raw, base)


# -- shared plumbing ---------------------------------------------------------------

def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / CONFIG_DUMP, "w", encoding="utf-8") as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    return out


def _scan(cfg: RunConfig) -> list[tuple[ProjectConfig, CorpusIndex]]:
    out = []
    for p in cfg.projects:
        ix = scan_project(p.root, p.globs, project=p.name, include_admitted=cfg.include_admitted,
                          max_theorems=p.max_theorems, sample_seed=p.sample_seed, jobs=cfg.jobs)
        out.append((p, ix))
    return out


def _checker(cfg: RunConfig, p: ProjectConfig) -> Checker:
    return Checker(cfg.coqc, list(p.coq_flags))


def _read_jsonl(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with open(path, encoding="utf-8") as f:
        return [json.loads(l) for l in f if l.strip()]


def _gateway(cfg: RunConfig) -> Gateway:
    provider = RoutingProvider() if cfg.mode != "replay" else None
    return Gateway(provider, Cassette(cfg.cassette), cfg.mode, cfg.token_budget,
                   RateLimiter(cfg.requests_per_minute, cfg.max_concurrent))


def _params(cfg: RunConfig, model: str) -> GenerationParams:
    return GenerationParams(model, cfg.temperature, cfg.max_output_tokens)


# -- commands ---------------------------------------------------------------------

def cmd_scan(cfg: RunConfig) -> int:
    out = _out(cfg)
    status = 0
    with open(out / INDEX_FILE, "w", encoding="utf-8") as f:
        for p, ix in _scan(cfg):
            for t in ix.theorems:
                f.write(json.dumps(t.to_json(), ensure_ascii=False) + "\n")
            for d in ix.definitions:
                f.write(json.dumps(d.to_json(), ensure_ascii=False) + "\n")
            for rel, err in ix.errors.items():
                log.error("%s/%s: %s", ix.project, rel, err)
                status = 1
            print(f"{ix.project}: {len(ix.files)} files, {len(ix.proved_theorems)} proved theorems, "
                  f"{len(ix.definitions)} definitions")
    return status


def cmd_extract(cfg: RunConfig) -> int:
    out = _out(cfg)
    done = {d["id"] for d in _read_jsonl(out / TELEMETRY_FILE)}
    gateway = _gateway(cfg)
    store = LemmaStore(out / STORE_FILE)
    failures = 0
    for p, ix in _scan(cfg):
        checker = _checker(cfg, p)
        checker.executable()
        ecfg = ExtractionConfig(
            extraction_params=_params(cfg, cfg.extraction_model),
            agent_params=_params(cfg, cfg.agent_model),
            gateway=gateway, checker=checker, round_limit=cfg.round_limit,
            context_budget=cfg.context_budget, depth_limit=cfg.depth_limit,
            checker_timeout=cfg.checker_timeout_secs, imports=p.imports,
            backend_model=cfg.extraction_model, sandbox_root=str(out / "sandboxes"),
        )
        todo = [t for t in ix.proved_theorems if t.id not in done]

        def job(thm):
            try:
                return thm, extract_for_theorem(thm, ix, ecfg), None
            except (GatewayError, OSError, ValueError, RuntimeError) as e:
                return thm, None, f"{type(e).__name__}: {e}"

        pool = ThreadPoolExecutor(max_workers=cfg.jobs)
        try:
            # map() yields in submission order, so output files are deterministic.
            for thm, res, err in pool.map(job, todo):
                if err is not None:
                    log.error("%s: extraction failed: %s", thm.id, err)
                    failures += 1
                    continue
                for lem in res:
                    store.add(lem)
                with open(out / TELEMETRY_FILE, "a", encoding="utf-8") as f:
                    f.write(json.dumps(res.telemetry.to_json(), ensure_ascii=False) + "\n")
        except KeyboardInterrupt:
            pool.shutdown(wait=True, cancel_futures=True)
            log.error("interrupted; rerun to resume")
            return 1
        pool.shutdown()
    print(f"store: {len(store)} lemmas; {failures} theorems failed; "
          f"{gateway.calls} chat responses, {gateway.provider_calls} provider calls")
    return 1 if failures else 0


def cmd_eval(cfg: RunConfig) -> int:
    out = _out(cfg)
    scanned = _scan(cfg)
    ids = [t.id for _, ix in scanned for t in ix.proved_theorems]
    plan_path = out / FOLDS_FILE
    if plan_path.exists():
        plan = FoldPlan.from_json(plan_path.read_text(encoding="utf-8"))
        if (plan.k, plan.seed) != (cfg.k, cfg.seed) or set(plan.assignment) != set(ids):
            raise ConfigError("folds", f"{plan_path} was made for a different corpus, k or seed")
    else:
        plan = make_folds(ids, cfg.k, cfg.seed)
        plan_path.write_text(plan.to_json() + "\n", encoding="utf-8")
    store = LemmaStore(out / STORE_FILE) if (out / STORE_FILE).exists() else LemmaStore()
    outcomes = []
    errors = 0
    for p, ix in scanned:
        checker = _checker(cfg, p)
        checker.executable()
        ecfg = EvalConfig(checker, cfg.prover_timeout_secs, cfg.jobs, cfg.filter_redundant,
                          sandbox_root=str(out / "sandboxes"), outcomes_path=out / OUTCOMES_FILE)
        try:
            _, got = evaluate(ix, store, plan, ecfg)
        except KeyboardInterrupt:
            log.error("interrupted; rerun to resume")
            return 1
        outcomes += got
        errors += sum(1 for o in got if o.error)
    report = build_report(outcomes, [ix.project for _, ix in scanned])
    (out / REPORT_MD).write_text(render_report(report, "markdown"), encoding="utf-8")
    (out / REPORT_CSV).write_text(render_report(report, "csv"), encoding="utf-8", newline="")
    print(render_report(report, "markdown"), end="")
    return 1 if errors else 0


def cmd_report(cfg: RunConfig, outcomes_path: str | None = None) -> int:
    out = Path(cfg.out_dir)
    path = Path(outcomes_path) if outcomes_path else out / OUTCOMES_FILE
    if not path.exists():
        raise ConfigError("outcomes", f"{path} does not exist")
    outcomes = load_outcomes(path)
    projects = [p.name or Path(p.root).name for p in cfg.projects] or None
    report = build_report(outcomes, projects)
    out.mkdir(parents=True, exist_ok=True)
    (out / REPORT_MD).write_text(render_report(report, "markdown"), encoding="utf-8")
    (out / REPORT_CSV).write_text(render_report(report, "csv"), encoding="utf-8", newline="")
    print(render_report(report, "markdown"), end="")
    return 0


def replay_coverage(cfg: RunConfig) -> list[tuple[str, str, str]]:
    """(theorem id, stage, key) for every statically known request missing from the cassette.

    Fix requests depend on checker output and cannot be enumerated ahead of time.
    """
    cassette = Cassette(cfg.cassette)
    params = _params(cfg, cfg.extraction_model)
    missing = []
    for p, ix in _scan(cfg):
        for thm in ix.proved_theorems:
            stage1 = build_nl_proof_prompt(collect_context(thm, ix, cfg.context_budget, cfg.depth_limit),
                                           thm.statement_text)
            key = cassette_key(stage1, params.model_id)
            entry = cassette.get(key)
            if entry is None:
                missing.append((thm.id, "nl_proof", key))
                continue
            nl = make_nl_proof(entry.response, thm.id)
            if nl.refusal and not nl.steps:
                continue
            stage2 = build_formalize_prompt(stage1.extend(ChatMessage("assistant", entry.response)))
            key2 = cassette_key(stage2, params.model_id)
            if key2 not in cassette:
                missing.append((thm.id, "formalize", key2))
    return missing


def cmd_replay_check(cfg: RunConfig) -> int:
    if not cfg.cassette:
        raise ConfigError("cassette", "required")
    missing = replay_coverage(cfg)
    for tid, stage, key in missing:
        print(f"MISSING {key} {stage} {tid}")
    if not missing:
        print("cassette covers every stage-1 and stage-2 request")
    return 1 if missing else 0


# -- entry point --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lemmamine", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=["scan", "extract", "eval", "report", "replay-check"])
    ap.add_argument("--config", help="JSON run configuration")
    ap.add_argument("--project", action="append", help="project root (repeatable; replaces config projects)")
    ap.add_argument("--mode", choices=["live", "record", "replay"])
    ap.add_argument("--cassette")
    ap.add_argument("--rounds", type=int)
    ap.add_argument("--folds", type=int)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--timeout-secs", type=float)
    ap.add_argument("--jobs", type=int)
    ap.add_argument("--filter-redundant", action="store_true")
    ap.add_argument("--out-dir")
    ap.add_argument("--outcomes", help="report: outcomes file (default OUT_DIR/outcomes.jsonl)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args)
        if args.command == "scan":
            return cmd_scan(cfg)
        if args.command == "extract":
            return cmd_extract(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "report":
            return cmd_report(cfg, args.outcomes)
        return cmd_replay_check(cfg)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except (CheckerNotFound, NoFilesMatched, TooFewTheorems) as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
