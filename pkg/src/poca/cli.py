"""Command-line interface.

Commands: ``simulate`` (Monte Carlo verification and violation studies),
``pipeline`` (batch caption pyramids over a manifest), ``eval`` (score a
finished run), ``export-prompts`` (write the default prompt templates),
and ``report`` (pretty-print and re-verify a run archive).

Exit codes: 0 success, 1 partial item failures (or verification
violations), 2 configuration or usage errors.

Every archive is self-describing: a config echo, the produced files, and
a ``files.json`` manifest with content hashes.  Archives carry no
wall-clock data, so identical invocations on identical inputs (with mock
backends) produce byte-identical archives.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

from poca import __version__
from poca.backends import (
    Client,
    FunctionBackend,
    ResponseCache,
    fingerprint_request,
    BackendConfig,
)
from poca.config import ConfigError, RunConfig, load_config
from poca.evaluation import (
    MetricReport,
    clip_score,
    evaluate_vqa,
    meteor_exact,
    read_vqa_manifest,
)
from poca.pipeline import PipelineSettings, read_manifest, run_pipeline
from poca.prompts import (
    MERGE_TEMPLATES,
    MergePromptTemplate,
    NO_CAPTION_SYSTEM,
    NO_CAPTION_USER_TEMPLATE,
    VQA_ASSISTANT_PREFIX,
    VQA_SYSTEM,
    VQA_USER_TEMPLATE,
)

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_CONFIG = 2


# -- archive helpers ----------------------------------------------------------


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _finalize_archive(out_dir: Path) -> None:
    """Write files.json: sha-256 of every file in the archive."""
    hashes = {}
    for p in sorted(out_dir.rglob("*")):
        if p.is_file() and p.name != "files.json":
            rel = p.relative_to(out_dir).as_posix()
            hashes[rel] = hashlib.sha256(p.read_bytes()).hexdigest()
    _write_text(out_dir / "files.json", json.dumps({"files": hashes}, indent=2) + "\n")


def _echo_config(cfg: RunConfig, out_dir: Path) -> None:
    _write_text(
        out_dir / "config.json",
        json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n",
    )


# -- deterministic demo backends (--mock) --------------------------------------


def _demo_rules(body: dict):
    """Deterministic canned behavior for every backend role.

    Requests are recognized by their trailing generation prefix (the
    demo config uses prefix-as-message mode), which works for every
    merge template variant; NLI requests by their instruction.
    """
    fp8 = fingerprint_request(body)[:8]
    if body.get("kind") == "embeddings":
        digest = hashlib.sha256(fingerprint_request(body).encode()).digest()
        vec = [(b - 127.5) / 127.5 for b in digest[:16]]
        return {"data": [{"embedding": vec}]}
    messages = list(body.get("messages", ()))
    prefix = ""
    if messages and messages[-1].get("role") == "assistant":
        prefix = messages[-1].get("content", "")
    if prefix == "Here's the merged caption:":
        return f"Here's the merged caption: a merged stub caption ({fp8})."
    if prefix == "The most possible answer is:":
        return f"The most possible answer is: stub-{fp8}"
    for message in messages:
        if message.get("role") == "system" and isinstance(
            message.get("content"), str
        ):
            if "natural language inference" in message["content"]:
                return "neutral"
            break
    return f"a stub caption ({fp8})."


_MOCK_BACKEND_CONFIG = BackendConfig(
    endpoint_url="mock://demo", model_id="demo-mock"
)


def _build_client(
    cfg: RunConfig, role: str, mock: bool, cache: ResponseCache | None
) -> Client:
    if mock:
        return Client(
            _MOCK_BACKEND_CONFIG,
            transport=FunctionBackend(_demo_rules),
            cache=cache,
            refusal_phrases=cfg.eval.refusal_phrases,
        )
    if role not in cfg.backends:
        raise ConfigError(
            f"backends.{role} is not configured (or pass --mock for a dry run)"
        )
    return Client(
        cfg.backends[role], cache=cache, refusal_phrases=cfg.eval.refusal_phrases
    )


def _resolve_template(name: str) -> MergePromptTemplate:
    if name in MERGE_TEMPLATES:
        return MERGE_TEMPLATES[name]
    path = Path(name)
    if path.exists():
        return MergePromptTemplate.parse(path.read_text(encoding="utf-8"))
    raise ConfigError(
        f"pipeline.template must be one of {sorted(MERGE_TEMPLATES)} "
        f"or a template file path, got {name!r}"
    )


# -- commands ------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig, out_dir: Path) -> int:
    sim = cfg.simulate
    mc_cfg = sim.monte_carlo_config(cfg.seed)
    perturbation = sim.perturbation()
    if not sim.verify and perturbation is None:
        raise ConfigError("simulate: nothing to run (verify=false and no study)")

    from poca.theory import run_monte_carlo, run_violation_study

    _echo_config(cfg, out_dir)
    exit_code = EXIT_OK
    histogram_source = None
    if sim.verify:
        summary = run_monte_carlo(mc_cfg)
        _write_text(out_dir / "summary.json", summary.to_json() + "\n")
        histogram_source = summary
        total = summary.total_violations
        print(f"verification: {mc_cfg.trials} trials, {total} violations")
        if total:
            exit_code = EXIT_PARTIAL
    if perturbation is not None:
        study = run_violation_study(mc_cfg, perturbation)
        _write_text(out_dir / "study_summary.json", study.to_json() + "\n")
        if histogram_source is None:
            histogram_source = study
        print(
            f"study ({perturbation.kind.value}): "
            f"violation frequency {study.violation_frequency:.4f}"
        )
    hist = histogram_source.gap_histogram
    rows = ["bin_left,bin_right,count"]
    for i, count in enumerate(hist["counts"]):
        rows.append(f"{hist['edges'][i]!r},{hist['edges'][i + 1]!r},{count}")
    _write_text(out_dir / "gap_histogram.csv", "\n".join(rows) + "\n")
    _finalize_archive(out_dir)
    return exit_code


def cmd_pipeline(cfg: RunConfig, out_dir: Path, mock: bool) -> int:
    if cfg.io.manifest is None:
        raise ConfigError("io.manifest is required for the pipeline command")
    try:
        items = read_manifest(cfg.io.manifest)
    except FileNotFoundError as exc:
        raise ConfigError(f"manifest not readable: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    cache = ResponseCache(cfg.io.cache_dir) if cfg.io.cache_dir else None
    captioner = _build_client(cfg, "captioner", mock, cache)
    merger = _build_client(cfg, "merger", mock, cache)
    try:
        settings = PipelineSettings(
            depth=cfg.pipeline.depth,
            template=_resolve_template(cfg.pipeline.template),
            prompt_kind=cfg.pipeline.prompt_kind,
            baselines=cfg.pipeline.baselines,
            workers=cfg.pipeline.workers,
        )
    except ValueError as exc:
        raise ConfigError(f"pipeline: {exc}") from exc
    _echo_config(cfg, out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    run = run_pipeline(
        items, captioner, merger, settings, records_path=out_dir / "records.jsonl"
    )
    _finalize_archive(out_dir)
    print(f"pipeline: {len(run.records)} records, {run.failures} failures")
    return EXIT_PARTIAL if run.failures else EXIT_OK


def _caption_from_record(record: dict, which: str) -> str:
    if which in ("merged", "global"):
        return record[which]["text"]
    if which.startswith("baseline:"):
        return record["baselines"][which.split(":", 1)[1]]["text"]
    raise ConfigError(
        f"eval.captions must be 'merged', 'global', or 'baseline:<name>', got {which!r}"
    )


def _print_report(report: MetricReport) -> None:
    rows = [(k, v) for k, v in report.to_dict().items() if v is not None]
    width = max(len(k) for k, _ in rows) if rows else 0
    for key, value in rows:
        print(f"  {key:<{width}}  {value}")


def cmd_eval(cfg: RunConfig, archive: Path, out_dir: Path, mock: bool) -> int:
    records_path = archive / "records.jsonl"
    if not records_path.exists():
        print(f"error: no run archive at {archive}", file=sys.stderr)
        return EXIT_CONFIG
    records = [
        json.loads(line)
        for line in records_path.read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
    good = [r for r in records if not r.get("errors")]
    cache = ResponseCache(cfg.io.cache_dir) if cfg.io.cache_dir else None
    _echo_config(cfg, out_dir)

    if cfg.eval.mode == "vqa":
        if cfg.eval.vqa_manifest is None:
            raise ConfigError("eval.vqa_manifest is required in vqa mode")
        items = read_vqa_manifest(cfg.eval.vqa_manifest)
        ids = {r["id"] for r in good}
        items = [i for i in items if i.image_id in ids]
        captions = {r["id"]: _caption_from_record(r, cfg.eval.captions) for r in good}
        answerer = _build_client(cfg, "vqa_answerer", mock, cache)
        judge = (
            _build_client(cfg, "nli_judge", mock, cache) if cfg.eval.nli else None
        )
        report, answer_records = evaluate_vqa(
            captions,
            items,
            answerer,
            nli_judge=judge,
            default_captions=[r["global"]["text"] for r in good],
            poca_captions=[r["merged"]["text"] for r in good],
        )
        with (out_dir / "per_item.csv").open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(
                fh,
                fieldnames=[
                    "image_id",
                    "question",
                    "generated",
                    "exact_match",
                    "refused",
                    "nli_label",
                    "nli_error",
                ],
            )
            writer.writeheader()
            for rec in answer_records:
                writer.writerow(rec.to_dict())
    else:
        if cfg.io.manifest is None:
            raise ConfigError("io.manifest is required in paragraph mode")
        manifest = {item.id: item for item in read_manifest(cfg.io.manifest)}
        missing = [r["id"] for r in good if r["id"] not in manifest]
        if missing:
            raise ConfigError(
                f"records not present in the manifest: {missing[:5]}"
            )
        meteor_value = None
        if cfg.eval.meteor:
            scores = [
                meteor_exact(
                    _caption_from_record(r, cfg.eval.captions),
                    manifest[r["id"]].reference_captions,
                )
                for r in good
                if manifest[r["id"]].reference_captions
            ]
            meteor_value = sum(scores) / len(scores) if scores else None
        clip_value = None
        if cfg.eval.clip:
            embedder = _build_client(cfg, "embedder", mock, cache)
            scores = []
            for r in good:
                image_bytes = Path(manifest[r["id"]].path).read_bytes()
                image_vec = embedder.embed(image_bytes)
                text_vec = embedder.embed(_caption_from_record(r, cfg.eval.captions))
                scores.append(clip_score(image_vec, text_vec))
            clip_value = sum(scores) / len(scores) if scores else None
        from poca.evaluation import length_stats

        length_default = length_poca = delta = None
        if good:
            length_default, length_poca, delta = length_stats(
                [r["global"]["text"] for r in good],
                [r["merged"]["text"] for r in good],
            )
        report = MetricReport(
            caption_length_default=length_default,
            caption_length_poca=length_poca,
            delta_length=delta,
            meteor=meteor_value,
            clip_score=clip_value,
        )

    _write_text(
        out_dir / "report.json", json.dumps(report.to_dict(), indent=2) + "\n"
    )
    _finalize_archive(out_dir)
    print("evaluation report:")
    _print_report(report)
    return EXIT_OK


_PROMPT_EXPORTS = {
    "merge_corrected.txt": lambda: MERGE_TEMPLATES["corrected"].serialize(),
    "merge_paper_verbatim.txt": lambda: MERGE_TEMPLATES["paper-verbatim"].serialize(),
    "vqa.txt": lambda: (
        f"=== system ===\n{VQA_SYSTEM}\n=== user ===\n{VQA_USER_TEMPLATE}\n"
        f"=== assistant_prefix ===\n{VQA_ASSISTANT_PREFIX}\n"
    ),
    "no_caption.txt": lambda: (
        f"=== system ===\n{NO_CAPTION_SYSTEM}\n=== user ===\n"
        f"{NO_CAPTION_USER_TEMPLATE}\n=== assistant_prefix ===\n{VQA_ASSISTANT_PREFIX}\n"
    ),
}


def cmd_export_prompts(out_dir: Path) -> int:
    for name, render in _PROMPT_EXPORTS.items():
        _write_text(out_dir / name, render())
        print(f"wrote {out_dir / name}")
    return EXIT_OK


def cmd_report(archive: Path) -> int:
    files_path = archive / "files.json"
    if not files_path.exists():
        print(f"error: {archive} is not a run archive (no files.json)", file=sys.stderr)
        return EXIT_CONFIG
    manifest = json.loads(files_path.read_text(encoding="utf-8"))["files"]
    bad = []
    for rel, expected in manifest.items():
        p = archive / rel
        actual = hashlib.sha256(p.read_bytes()).hexdigest() if p.exists() else "missing"
        if actual != expected:
            bad.append(rel)
    print(f"archive: {archive}")
    print(f"files: {len(manifest)} ({'all verified' if not bad else 'CORRUPT: ' + ', '.join(bad)})")
    for name in ("summary.json", "study_summary.json", "report.json"):
        p = archive / name
        if p.exists():
            try:
                payload = json.loads(p.read_text(encoding="utf-8"))
            except json.JSONDecodeError:
                print(f"\n{name}: unreadable")
                continue
            print(f"\n{name}:")
            for key, value in payload.items():
                if not isinstance(value, (dict, list)):
                    print(f"  {key}: {value}")
                elif key in ("violations", "gap_quantiles"):
                    print(f"  {key}: {json.dumps(value)}")
    records_path = archive / "records.jsonl"
    if records_path.exists():
        lines = [
            line
            for line in records_path.read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]
        failures = sum(bool(json.loads(line).get("errors")) for line in lines)
        print(f"\nrecords: {len(lines)} ({failures} failed)")
    return EXIT_PARTIAL if bad else EXIT_OK


# -- argument parsing -----------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON config file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", type=Path, help="output directory")
    parser.add_argument("--cache", type=Path, help="response cache directory")
    parser.add_argument(
        "--mock", action="store_true", help="use deterministic built-in mock backends"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="poca",
        description="caption pyramid pipeline, simulator, and evaluation toolkit",
    )
    parser.add_argument("--version", action="version", version=f"poca {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="verify the merge guarantee numerically")
    _add_common(p)

    p = sub.add_parser("pipeline", help="run caption pyramids over a manifest")
    _add_common(p)
    p.add_argument("--depth", type=int, help="pyramid depth override")
    p.add_argument(
        "--template",
        choices=sorted(MERGE_TEMPLATES),
        help="merge prompt template override",
    )

    p = sub.add_parser("eval", help="score a finished pipeline run")
    _add_common(p)
    p.add_argument("--archive", type=Path, help="run archive to evaluate")
    p.add_argument("--mode", choices=("vqa", "paragraph"), help="evaluation mode")

    p = sub.add_parser("export-prompts", help="write the default prompt templates")
    p.add_argument("--out", type=Path, default=Path("prompts"))

    p = sub.add_parser("report", help="pretty-print and verify a run archive")
    p.add_argument("--archive", type=Path, required=True)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "export-prompts":
            return cmd_export_prompts(args.out)
        if args.command == "report":
            return cmd_report(args.archive)

        cfg = load_config(args.config)
        cfg = cfg.with_overrides(
            seed=args.seed,
            out_dir=str(args.out) if args.out else None,
            cache_dir=str(args.cache) if args.cache else None,
            depth=getattr(args, "depth", None),
            template=getattr(args, "template", None),
        )
        out_dir = Path(cfg.io.out_dir)
        if args.command == "simulate":
            return cmd_simulate(cfg, out_dir)
        if args.command == "pipeline":
            return cmd_pipeline(cfg, out_dir, args.mock)
        if args.command == "eval":
            if getattr(args, "mode", None):
                from dataclasses import replace

                cfg = replace(cfg, eval=replace(cfg.eval, mode=args.mode))
            archive = args.archive if args.archive else out_dir
            eval_out = out_dir if args.out else archive / "eval"
            return cmd_eval(cfg, archive, eval_out, args.mock)
        raise AssertionError(f"unhandled command {args.command}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
