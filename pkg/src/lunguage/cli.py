"""Command-line interface.

Exit codes: 0 success, 2 invalid input (bad file, schema or scoring
error), 3 unreachable or failing backend.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .embed import (
    CachedProvider,
    DeterministicProvider,
    HttpEmbeddingProvider,
    PairTableProvider,
    SimilarityEnsemble,
)
from .errors import (
    CorpusError,
    DimensionMismatch,
    EmptyReport,
    LunguageError,
    ProviderUnavailable,
    ScoringError,
    ValidationError,
    ValidationExhausted,
)
from .model import PatientSequence, iter_corpus, load_corpus, report_from_dict, report_to_dict, sequence_to_dict
from .perturb import Perturbation, PerturbationKind, run_sensitivity
from .score import AttributeWeights, LunguageScorer, micro_average
from .structure import HttpCompletionProvider, RateLimiter, ReportStructurer, ScriptedProvider, structure_sequence
from .vocab import load_vocabulary, match_spans

logger = logging.getLogger("lunguage")

EXIT_OK, EXIT_INVALID, EXIT_PROVIDER = 0, 2, 3


class UsageError(LunguageError):
    pass


@dataclass
class RunConfig:
    """Resolved settings, written next to every output."""

    command: str
    embed_backend: str | None = None
    embed_url: str | None = None
    embed_models: list[str] = field(default_factory=list)
    llm_backend: str | None = None
    llm_url: str | None = None
    weights: dict | None = None
    match_threshold: float = 0.0
    shots: int | None = None
    cache: str | None = None
    seed: int = 0
    jobs: int = 1
    format: str = "json"
    lenient: bool = False

    def to_dict(self) -> dict:
        return {"version": __version__, **asdict(self)}


# ---------------------------------------------------------------------------
# backends
# ---------------------------------------------------------------------------

def _load_pair_table(path: str) -> dict:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(data, dict):
        data = data.get("pairs", [])
    return {(a, b): float(s) for a, b, s in data}


def build_ensemble(args, cfg: RunConfig) -> SimilarityEnsemble:
    backend = args.embed_backend
    url = args.embed_url or os.environ.get("LUNGUAGE_EMBED_URL")
    if backend == "auto":
        backend = "http" if url else None
    if backend is None:
        raise UsageError("no embedding backend: pass --embed-url, set LUNGUAGE_EMBED_URL, or choose --embed-backend")
    cfg.embed_backend = backend
    if backend == "deterministic":
        cfg.embed_models = [f"deterministic-{args.seed}"]
        return SimilarityEnsemble([DeterministicProvider(seed=args.seed)])
    if backend == "fixture":
        if not args.fixture_table:
            raise UsageError("--embed-backend fixture needs --fixture-table")
        cfg.embed_models = [args.fixture_table]
        return SimilarityEnsemble([PairTableProvider(_load_pair_table(args.fixture_table))])
    if not url:
        raise UsageError("--embed-backend http needs --embed-url or LUNGUAGE_EMBED_URL")
    models = args.embed_models or os.environ.get("LUNGUAGE_EMBED_MODELS", "")
    models = [m.strip() for m in models.split(",") if m.strip()]
    if not models:
        raise UsageError("name at least one embedding model with --embed-models")
    cfg.embed_url, cfg.embed_models = url, models
    providers = []
    for m in models:
        p = HttpEmbeddingProvider(url, m)
        providers.append(CachedProvider(p, args.cache) if args.cache else p)
    return SimilarityEnsemble(providers)


def build_completion(args, cfg: RunConfig):
    if args.transcript:
        cfg.llm_backend = "scripted"
        return ScriptedProvider.from_file(args.transcript)
    url = args.llm_url or os.environ.get("LUNGUAGE_LLM_URL")
    if not url:
        raise UsageError("no completion backend: pass --llm-url, set LUNGUAGE_LLM_URL, or give --transcript")
    cfg.llm_backend, cfg.llm_url = "http", url
    limiter = RateLimiter(args.rate_limit, burst=max(1, args.jobs)) if args.rate_limit else None
    return HttpCompletionProvider(url, args.llm_model or os.environ.get("LUNGUAGE_LLM_MODEL"),
                                  rate_limiter=limiter)


def build_scorer(args, cfg: RunConfig) -> LunguageScorer:
    weights = AttributeWeights.from_file(args.weights) if args.weights else AttributeWeights.default()
    cfg.weights = weights.to_dict()
    cfg.match_threshold = args.match_threshold
    cfg.lenient = args.lenient
    return LunguageScorer(build_ensemble(args, cfg), weights, match_threshold=args.match_threshold,
                          lenient_grouping=args.lenient)


def _save_caches(scorer: LunguageScorer) -> None:
    for p in scorer.similarity.providers if scorer.similarity else ():
        if isinstance(p, CachedProvider):
            p.save()


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------

def _write(args, text: str, cfg: RunConfig, sidecar: bool) -> None:
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        if sidecar:
            Path(str(args.out) + ".run.json").write_text(
                json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
            )
    else:
        sys.stdout.write(text)
        if sidecar:
            # no file to sit next to, so the config goes to stderr
            print("run_config: " + json.dumps(cfg.to_dict(), sort_keys=True), file=sys.stderr)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, ensure_ascii=False) + "\n"


def _map(jobs: int, fn, items):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _pair_up(preds, golds, key, what):
    by_key = {}
    for p in preds:
        by_key.setdefault(key(p), p)
    missing = [key(g) for g in golds if key(g) not in by_key]
    if missing:
        raise UsageError(f"no prediction for {what} {', '.join(missing[:5])}")
    return [(key(g), by_key[key(g)], g) for g in golds]


def cmd_score(args) -> int:
    cfg = RunConfig("score", seed=args.seed, jobs=args.jobs, format=args.format, cache=args.cache)
    kind = "report" if args.mode == "single" else "sequence"
    preds = load_corpus(args.pred, kind, lenient=args.lenient)
    golds = load_corpus(args.gold, kind, lenient=args.lenient)
    key = (lambda r: r.study_id) if kind == "report" else (lambda s: s.patient_id)
    pairs = _pair_up(preds, golds, key, "study" if kind == "report" else "patient")
    scorer = build_scorer(args, cfg)
    fn = scorer.score_single if kind == "report" else scorer.score_sequence
    results = _map(args.jobs, lambda t: fn(t[1], t[2]), pairs)
    _save_caches(scorer)
    corpus = micro_average(results)
    totals = {k: getattr(corpus, k) for k in ("tp", "fp", "fn", "precision", "recall", "f1")}
    if args.format == "csv":
        lines = ["id,tp,fp,fn,precision,recall,f1"]
        for (cid, _, _), b in [*zip(pairs, results), (("__corpus__", None, None), corpus)]:
            lines.append(",".join([cid] + [f"{getattr(b, k):.6f}" for k in ("tp", "fp", "fn", "precision", "recall", "f1")]))
        _write(args, "\n".join(lines) + "\n", cfg, sidecar=True)
    else:
        doc = {
            "run_config": cfg.to_dict(),
            "mode": args.mode,
            "cases": [{"id": cid, **b.to_dict()} for (cid, _, _), b in zip(pairs, results)],
            "corpus": totals,
        }
        _write(args, _json(doc), cfg, sidecar=False)
    print(f"corpus precision={corpus.precision:.4f} recall={corpus.recall:.4f} f1={corpus.f1:.4f}", file=sys.stderr)
    return EXIT_OK


def _read_raw(path: str) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise UsageError(f"{path}:{n}: invalid JSON: {exc}") from None
            if not isinstance(obj, dict) or not isinstance(obj.get("sections"), dict) or "study_id" not in obj:
                raise UsageError(f"{path}:{n}: expected an object with study_id and a sections map")
            obj.setdefault("study_day", 0)
            obj["_line"] = n
            out.append(obj)
    return out


def _read_index(path: str | None) -> list:
    if not path:
        return []
    corpus = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            obj = json.loads(line)
            try:
                report = report_from_dict(obj["report"])
            except ValidationError as exc:
                raise UsageError(f"{path}:{n}: {exc}") from None
            corpus.append((obj.get("sections") or obj["text"], report))
    return corpus


def cmd_structure(args) -> int:
    cfg = RunConfig("structure", seed=args.seed, jobs=args.jobs, format="jsonl", shots=args.shots)
    raw = _read_raw(args.input)
    provider = build_completion(args, cfg)
    vocab = load_vocabulary(args.vocab) if args.vocab else None
    structurer = ReportStructurer(provider, vocab, k_shots=args.shots, max_repairs=args.max_repairs,
                                  n_jobs=args.jobs).fit(_read_index(args.index))
    transcripts: list = []

    def one(item):
        log: list = []
        try:
            report = structurer.structure_report(item["sections"], str(item["study_id"]), int(item["study_day"]), log)
        finally:
            transcripts.append((item["_line"], log))
        return report

    reports = _map(args.jobs, one, raw)
    if args.sequential:
        by_patient: dict[str, list] = {}
        for item, rep in zip(raw, reports):
            if "patient_id" not in item:
                raise UsageError(f"{args.input}:{item['_line']}: --sequential needs patient_id on every line")
            by_patient.setdefault(str(item["patient_id"]), []).append(rep)

        def group(pid):
            seq = PatientSequence(pid, tuple(sorted(by_patient[pid], key=lambda r: r.study_day)))
            log: list = []
            try:
                return structure_sequence(provider, seq, args.max_repairs, log)
            finally:
                transcripts.append((pid, log))

        lines = [json.dumps(sequence_to_dict(s), ensure_ascii=False) for s in _map(args.jobs, group, list(by_patient))]
    else:
        lines = [json.dumps(report_to_dict(r), ensure_ascii=False) for r in reports]
    if args.log_transcripts:
        with open(args.log_transcripts, "w", encoding="utf-8") as fh:
            for where, log in sorted(transcripts, key=lambda t: str(t[0])):
                for ex in log:
                    fh.write(json.dumps({"source": where, "user": ex.user, "response": ex.response,
                                         "error": ex.error}, ensure_ascii=False) + "\n")
    _write(args, "".join(line + "\n" for line in lines), cfg, sidecar=True)
    return EXIT_OK


def cmd_match_vocab(args) -> int:
    cfg = RunConfig("match-vocab", format=args.format)
    vocab = load_vocabulary(args.vocab)
    source = args.input if args.input is not None else args.text
    if args.input is not None or os.path.isfile(source):
        text = Path(source).read_text(encoding="utf-8")
    else:
        text = source
    matches = match_spans(vocab, text)
    fields = ("sent_idx", "char_start", "char_end", "text", "matched_term", "category")
    if args.format == "csv":
        import csv
        import io

        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(fields)
        for m in matches:
            w.writerow([getattr(m, f) for f in fields])
        _write(args, buf.getvalue(), cfg, sidecar=True)
    else:
        doc = {"run_config": cfg.to_dict(), "matches": [{f: getattr(m, f) for f in fields} for m in matches]}
        _write(args, _json(doc), cfg, sidecar=False)
    return EXIT_OK


def cmd_perturb(args) -> int:
    cfg = RunConfig("perturb", seed=args.seed, jobs=args.jobs, format=args.format, cache=args.cache)
    golds = load_corpus(args.input, "sequence", lenient=args.lenient)
    scorer = build_scorer(args, cfg)
    kind = PerturbationKind(args.kind)
    cases = [(g, Perturbation(kind, seed=args.seed + i)) for i, g in enumerate(golds)]
    report = run_sensitivity(scorer, cases, n_jobs=args.jobs)
    _save_caches(scorer)
    if not report.cases:
        print("notice: no applicable cases; nothing was perturbed", file=sys.stderr)
    if args.format == "json":
        doc = {
            "run_config": cfg.to_dict(),
            "cases": [asdict(c) for c in report.cases],
            "skipped": report.skipped,
            "summary": report.summary(),
        }
        _write(args, _json(doc), cfg, sidecar=False)
    else:
        _write(args, report.to_csv(), cfg, sidecar=True)
    return EXIT_OK


def cmd_validate(args) -> int:
    bad = 0
    total = 0
    for n, item in iter_corpus(args.input, args.kind):
        total += 1
        if isinstance(item, ValidationError):
            bad += 1
            print(f"{args.input}:{n}: {item.code} at {item.path or '/'}: {item.message}")
    print(f"{total - bad}/{total} valid", file=sys.stderr)
    return EXIT_INVALID if bad else EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _global_flags() -> argparse.ArgumentParser:
    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--weights", help="JSON map of attribute weight overrides")
    g.add_argument("--embed-url", help="embedding service base URL")
    g.add_argument("--embed-models", help="comma-separated embedding model names")
    g.add_argument("--embed-backend", choices=["auto", "http", "deterministic", "fixture"], default="auto")
    g.add_argument("--fixture-table", help="JSON list of [text_a, text_b, similarity] for the fixture backend")
    g.add_argument("--llm-url", help="completion service base URL")
    g.add_argument("--llm-model", help="model name sent to the completion service")
    g.add_argument("--transcript", help="replay completions from a recorded transcript")
    g.add_argument("--rate-limit", type=float, default=0.0, help="completion requests per second (0 = unlimited)")
    g.add_argument("--cache", help="embedding cache file")
    g.add_argument("--jobs", type=int, default=1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--format", choices=["json", "csv"], default=None)
    g.add_argument("--match-threshold", type=float, default=0.0)
    g.add_argument("--lenient", action="store_true", help="skip invalid corpus lines and ungrouped findings")
    g.add_argument("--out", help="output file (default: stdout)")
    g.add_argument("-v", "--verbose", action="store_true")
    return g


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = argparse.ArgumentParser(prog="lunguage", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("score", parents=[common], help="score predictions against references")
    p.add_argument("--pred", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--mode", choices=["single", "sequential"], default="sequential")
    p.set_defaults(func=cmd_score, default_format="json")

    p = sub.add_parser("structure", parents=[common], help="structure raw reports with a completion backend")
    p.add_argument("--in", dest="input", required=True, help="JSONL of {study_id, study_day, sections}")
    p.add_argument("--vocab")
    p.add_argument("--index", help="JSONL of {text|sections, report} few-shot examples")
    p.add_argument("--shots", type=int, default=0)
    p.add_argument("--max-repairs", type=int, default=2)
    p.add_argument("--sequential", action="store_true", help="also group findings per patient")
    p.add_argument("--log-transcripts", help="write every prompt/response exchange here")
    p.set_defaults(func=cmd_structure, default_format="json")

    p = sub.add_parser("match-vocab", parents=[common], help="list vocabulary matches in a text")
    p.add_argument("--vocab", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--text", help="text to match, or a file holding it")
    src.add_argument("--in", dest="input")
    p.set_defaults(func=cmd_match_vocab, default_format="csv")

    p = sub.add_parser("perturb", parents=[common], help="sensitivity of the score to controlled edits")
    p.add_argument("--kind", choices=[k.value for k in PerturbationKind], default="flip-temporal")
    p.add_argument("--in", dest="input", required=True)
    p.set_defaults(func=cmd_perturb, default_format="csv")

    p = sub.add_parser("validate", parents=[common], help="validate a corpus")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--kind", choices=["report", "sequence"], default="sequence")
    p.set_defaults(func=cmd_validate, default_format="json")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.format is None:
        args.format = args.default_format
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ProviderUnavailable, DimensionMismatch) as exc:
        print(f"error: backend failure: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except FileNotFoundError as exc:
        print(f"error: no such file: {exc.filename}", file=sys.stderr)
        return EXIT_INVALID
    except (ValidationError, CorpusError, ScoringError, EmptyReport, ValidationExhausted, UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
