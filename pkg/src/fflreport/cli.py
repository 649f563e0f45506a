"""Command-line entry point: ``fflreport <command>``."""

from __future__ import annotations

import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import click

from . import __version__
from .calibration import (
    OperatingPoints,
    apply_thresholds,
    calibrate,
    label_auc,
    merge_patterns,
    read_score_csv,
)
from .extraction import SentenceExtraction, extract_report, parse_label, relevant_text
from .generator import assemble_report
from .lexicon import demo_lexicon, load_lexicon, validate_lexicon_data
from .metrics import audit_extraction, evaluate_pairs
from .parsing import ingest_parse, parse_report_text, write_parse
from .patterndb import LabelSpace, PatternVector, build_database, load_db, save_db


class PipelineError(click.ClickException):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage


# -- I/O helpers ----------------------------------------------------------------


def read_reports(path) -> List[Tuple[str, str]]:
    """(report_id, text) pairs from a directory of .txt files, a JSONL file, or one text file."""
    p = Path(path)
    if p.is_dir():
        return [(f.stem, f.read_text(encoding="utf-8")) for f in sorted(p.glob("*.txt"))]
    if p.suffix == ".jsonl":
        out = []
        for line in p.read_text(encoding="utf-8").splitlines():
            if line.strip():
                d = json.loads(line)
                out.append((str(d["report_id"]), d["text"]))
        return sorted(out)
    return [(p.stem, p.read_text(encoding="utf-8"))]


def write_jsonl(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n")


def read_jsonl(path) -> List[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def read_extractions(path) -> List[SentenceExtraction]:
    return [SentenceExtraction.from_dict(d) for d in read_jsonl(path)]


def _lexicon(path):
    return load_lexicon(path) if path else demo_lexicon()


def _extract_one(args):
    report_id, text, lex = args
    return [e.to_dict() for e in extract_report(text, lex, report_id=report_id)]


def run_extraction(reports_path, lex, parsed_path=None, jobs: int = 1) -> List[dict]:
    if parsed_path:
        by_report: Dict[str, list] = {}
        for s in ingest_parse(parsed_path):
            by_report.setdefault(s.report_id, []).append(s)
        records = []
        for rid in sorted(by_report):
            records.extend(e.to_dict() for e in extract_report(by_report[rid], lex, report_id=rid))
        return records
    reports = read_reports(reports_path)
    work = [(rid, text, lex) for rid, text in reports]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(_extract_one, work, chunksize=max(1, len(work) // (4 * jobs))))
    else:
        chunks = [_extract_one(w) for w in work]
    return [r for chunk in chunks for r in chunk]


def space_from_keys(keys) -> LabelSpace:
    keys = tuple(keys)
    return LabelSpace(
        keys,
        tuple(1.0 for _ in keys),
        tuple(0 for _ in keys),
        tuple(i for i, k in enumerate(keys) if not parse_label(k).modifiers),
    )


def predict_patterns(scores_path, thresholds_path, space: Optional[LabelSpace] = None,
                     cfl_scores_path=None, cfl_thresholds_path=None) -> List[dict]:
    scores = read_score_csv(scores_path)
    points = OperatingPoints.load(thresholds_path)
    if tuple(points.label_keys) != tuple(scores.label_keys):
        scores = _reorder(scores, points.label_keys)
    cfl = cfl_points = None
    if cfl_scores_path:
        cfl = read_score_csv(cfl_scores_path)
        cfl_points = OperatingPoints.load(cfl_thresholds_path)
        if tuple(cfl_points.label_keys) != tuple(cfl.label_keys):
            cfl = _reorder(cfl, cfl_points.label_keys)
    if space is None:
        keys = list(points.label_keys) + ([k for k in cfl_points.label_keys if k not in points.label_keys] if cfl else [])
        space = space_from_keys(keys)
    records = []
    for i, image_id in enumerate(scores.image_ids):
        q = apply_thresholds(scores.scores[i], points, space)
        if cfl is not None:
            c = apply_thresholds(cfl.row(image_id), cfl_points, space)
            q = merge_patterns(c, q, space)
        records.append({"image_id": image_id, "labels": [space.keys[j] for j in q.set_indices()]})
    return records


def _reorder(m, keys):
    from .calibration import ScoreMatrix

    if set(m.label_keys) != set(keys):
        raise click.ClickException("score columns do not match the threshold labels")
    idx = [m.label_keys.index(k) for k in keys]
    return ScoreMatrix(m.image_ids, tuple(keys), m.scores[:, idx])


def generate_reports(patterns: List[dict], db, out_dir, explain: bool = False, keep_negatives: bool = False) -> int:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    space = db.label_space
    for rec in patterns:
        bits = set()
        for key in rec["labels"]:
            j = space.map_label(parse_label(key))
            if j is not None:
                bits.add(j)
        q = PatternVector.from_indices(len(space), bits)
        result = assemble_report(q, db, keep_negatives=keep_negatives)
        (out / f"{rec['image_id']}.txt").write_text(result.text + "\n", encoding="utf-8")
        if explain:
            (out / f"{rec['image_id']}.explain.json").write_text(
                json.dumps(result.explain(space), indent=2, sort_keys=True) + "\n", encoding="utf-8"
            )
    return len(patterns)


def evaluate_dirs(generated, reference, smooth: bool = False, metrics=("bleu", "rouge", "meteor")) -> dict:
    gen = {f.stem: f.read_text(encoding="utf-8") for f in sorted(Path(generated).glob("*.txt"))}
    ref = {f.stem: f.read_text(encoding="utf-8") for f in sorted(Path(reference).glob("*.txt"))}
    missing = sorted(set(gen) - set(ref))
    if missing:
        raise click.ClickException(f"no reference report for {missing[:5]}")
    if not gen:
        raise click.ClickException("no generated reports found")
    report = evaluate_pairs({k: (gen[k], ref[k]) for k in gen}, smooth=smooth).to_dict()
    keep = {"bleu": ("bleu_1", "bleu_2", "bleu_3", "bleu_4"), "rouge": ("rouge_l",), "meteor": ("meteor_lite",)}
    wanted = {k for m in metrics for k in keep[m]}
    out = {k: v for k, v in report.items() if k in wanted}
    out["per_pair"] = {i: {k: v for k, v in p.items() if k in wanted} for i, p in report["per_pair"].items()}
    out["pairs"] = len(gen)
    return out


def _dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- commands ---------------------------------------------------------------------

CONTEXT = {"help_option_names": ["-h", "--help"]}


@click.group(context_settings=CONTEXT)
@click.version_option(__version__)
def main():
    """Fine finding label extraction and retrieval-based report generation."""


@main.group()
def lexicon():
    """Lexicon utilities."""


@lexicon.command("validate")
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
def lexicon_validate(path):
    """Check a lexicon file; exits nonzero and lists every problem on failure."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise click.ClickException(f"{path}: not valid JSON ({e})")
    problems = validate_lexicon_data(data) if isinstance(data, dict) else ["<root>: must be a JSON object"]
    if problems:
        for p in problems:
            click.echo(f"error: {p}", err=True)
        sys.exit(1)
    lex = load_lexicon(path)
    click.echo(f"ok: {len(lex.findings)} findings, {len(lex.modifiers)} modifier categories, "
               f"{len(lex.negation_seeds)} negation seeds")


@main.command()
@click.option("--in", "in_path", required=True, type=click.Path(exists=True), help="Report file, directory or JSONL.")
@click.option("--out", "out_path", required=True, type=click.Path(), help="Output parse TSV.")
@click.option("--lexicon", "lexicon_path", type=click.Path(exists=True, dir_okay=False), help="Lexicon JSON (default: bundled demo).")
def parse(in_path, out_path, lexicon_path):
    """Parse reports with the built-in fallback parser."""
    lex = _lexicon(lexicon_path)
    sentences = []
    for rid, text in read_reports(in_path):
        sentences.extend(parse_report_text(relevant_text(text), lex, rid))
    write_parse(sentences, out_path)
    click.echo(f"parsed {len(sentences)} sentences")


@main.command()
@click.option("--reports", "reports_path", type=click.Path(exists=True), help="Report file, directory or JSONL.")
@click.option("--lexicon", "lexicon_path", type=click.Path(exists=True, dir_okay=False), help="Lexicon JSON (default: bundled demo).")
@click.option("--parsed", "parsed_path", type=click.Path(exists=True, dir_okay=False), help="External parse TSV; replaces --reports.")
@click.option("--out", "out_path", required=True, type=click.Path(), help="Output labels JSONL.")
@click.option("--jobs", default=1, show_default=True, type=click.IntRange(min=1), help="Worker processes.")
def extract(reports_path, lexicon_path, parsed_path, out_path, jobs):
    """Extract FFL labels, one JSONL record per sentence."""
    if not reports_path and not parsed_path:
        raise click.UsageError("one of --reports or --parsed is required")
    records = run_extraction(reports_path, _lexicon(lexicon_path), parsed_path, jobs)
    write_jsonl(records, out_path)
    click.echo(f"extracted {sum(len(r['labels']) for r in records)} labels from {len(records)} sentences")


@main.command("build-db")
@click.option("--labels", "labels_path", required=True, type=click.Path(exists=True, dir_okay=False), help="Labels JSONL from extract.")
@click.option("--reports", "reports_path", type=click.Path(exists=True), help="Restrict to these reports.")
@click.option("--lexicon", "lexicon_path", type=click.Path(exists=True, dir_okay=False), help="Lexicon JSON for label weights.")
@click.option("--min-support", default=1, show_default=True, type=click.IntRange(min=1), help="Reports needed to admit a label.")
@click.option("--all-sentences", is_flag=True, help="Rank over every sentence, not only labelled ones.")
@click.option("--out", "out_path", required=True, type=click.Path(), help="Output database file.")
def build_db(labels_path, reports_path, lexicon_path, min_support, all_sentences, out_path):
    """Build the pattern -> ranked report database."""
    ext = read_extractions(labels_path)
    if reports_path:
        keep = {rid for rid, _ in read_reports(reports_path)}
        ext = [e for e in ext if e.report_id in keep]
    db = build_database(ext, _lexicon(lexicon_path), min_support=min_support, all_sentences_relevant=all_sentences)
    save_db(db, out_path)
    s = db.stats()
    click.echo(f"{s['patterns']} patterns, {s['sentences']} sentences, {s['labels']} labels")


@main.group()
def db():
    """Pattern database utilities."""


@db.command("stats")
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
def db_stats(path):
    """Print pattern, sentence, report and label counts."""
    s = load_db(path).stats()
    for k in ("patterns", "sentences", "reports", "labels"):
        click.echo(f"{k}: {s[k]}")


@main.command("calibrate")
@click.option("--scores", "scores_path", required=True, type=click.Path(exists=True, dir_okay=False), help="Score CSV.")
@click.option("--truth", "truth_path", required=True, type=click.Path(exists=True, dir_okay=False), help="Truth CSV (0/1).")
@click.option("--mode", type=click.Choice(["image", "label"]), default="image", show_default=True, help="F1 averaged over images or labels.")
@click.option("--auc", "show_auc", is_flag=True, help="Print per-label AUC diagnostics.")
@click.option("--out", "out_path", required=True, type=click.Path(), help="Output thresholds JSON.")
def calibrate_cmd(scores_path, truth_path, mode, show_auc, out_path):
    """Choose per-label thresholds minimising -ln(mean F1)."""
    scores = read_score_csv(scores_path)
    truth = read_score_csv(truth_path)
    points = calibrate(scores, truth, mode=mode)
    points.save(out_path)
    click.echo(f"loss {points.achieved_loss:.6f} over {len(scores.image_ids)} images")
    if show_auc:
        aligned = scores.aligned(truth)
        for k, a in zip(scores.label_keys, label_auc(scores.scores, aligned.scores)):
            click.echo(f"auc\t{a:.4f}\t{k}")


@main.command("predict-pattern")
@click.option("--scores", "scores_path", required=True, type=click.Path(exists=True, dir_okay=False), help="FFL score CSV.")
@click.option("--thresholds", "thresholds_path", required=True, type=click.Path(exists=True, dir_okay=False), help="FFL thresholds JSON.")
@click.option("--cfl-scores", "cfl_scores_path", type=click.Path(exists=True, dir_okay=False), help="Core-label score CSV.")
@click.option("--cfl-thresholds", "cfl_thresholds_path", type=click.Path(exists=True, dir_okay=False), help="Core-label thresholds JSON.")
@click.option("--db", "db_path", type=click.Path(exists=True, dir_okay=False), help="Database whose label space to use.")
@click.option("--out", "out_path", required=True, type=click.Path(), help="Output patterns JSONL.")
def predict_pattern(scores_path, thresholds_path, cfl_scores_path, cfl_thresholds_path, db_path, out_path):
    """Threshold scores into per-image label patterns."""
    if bool(cfl_scores_path) != bool(cfl_thresholds_path):
        raise click.UsageError("--cfl-scores and --cfl-thresholds go together")
    space = load_db(db_path).label_space if db_path else None
    records = predict_patterns(scores_path, thresholds_path, space, cfl_scores_path, cfl_thresholds_path)
    write_jsonl(records, out_path)
    click.echo(f"{len(records)} patterns written")


@main.command()
@click.option("--patterns", "patterns_path", required=True, type=click.Path(exists=True, dir_okay=False), help="Patterns JSONL.")
@click.option("--db", "db_path", required=True, type=click.Path(exists=True, dir_okay=False), help="Pattern database.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False), help="Output directory.")
@click.option("--explain", is_flag=True, help="Also write <image_id>.explain.json.")
@click.option("--keep-negatives", is_flag=True, help="Keep negative-finding sentences without query evidence.")
def generate(patterns_path, db_path, out_dir, explain, keep_negatives):
    """Assemble one report per query pattern."""
    n = generate_reports(read_jsonl(patterns_path), load_db(db_path), out_dir, explain, keep_negatives)
    click.echo(f"{n} reports written to {out_dir}")


def _metric_list(value):
    items = [m.strip() for m in value.split(",") if m.strip()]
    bad = [m for m in items if m not in ("bleu", "rouge", "meteor")]
    if bad or not items:
        raise click.BadParameter(f"unknown metric(s) {bad}; choose from bleu,rouge,meteor")
    return tuple(items)


@main.command()
@click.option("--generated", required=True, type=click.Path(exists=True, file_okay=False), help="Generated report directory.")
@click.option("--reference", required=True, type=click.Path(exists=True, file_okay=False), help="Reference report directory.")
@click.option("--metrics", "metric_names", default="bleu,rouge,meteor", show_default=True, help="Comma-separated metrics.")
@click.option("--smooth", is_flag=True, help="Add-one smoothing for BLEU-2..4.")
@click.option("--out", "out_path", required=True, type=click.Path(), help="Output metrics JSON.")
def evaluate(generated, reference, metric_names, smooth, out_path):
    """Score generated reports against references."""
    result = evaluate_dirs(generated, reference, smooth, _metric_list(metric_names))
    _dump_json(result, out_path)
    for k in ("bleu_1", "bleu_2", "bleu_3", "bleu_4", "rouge_l", "meteor_lite"):
        if k in result:
            click.echo(f"{k}: {result[k]:.4f}")


@main.command()
@click.option("--labels", "labels_path", required=True, type=click.Path(exists=True, dir_okay=False), help="Labels JSONL from extract.")
@click.option("--gold", "gold_path", required=True, type=click.Path(exists=True, dir_okay=False), help="Gold labels JSONL.")
@click.option("--out", "out_path", type=click.Path(), help="Optional audit JSON.")
def audit(labels_path, gold_path, out_path):
    """Compare extracted labels with gold annotations."""
    gold = {(str(d["report_id"]), int(d["sentence_index"])): [parse_label(s) for s in d["labels"]] for d in read_jsonl(gold_path)}
    result = audit_extraction(read_extractions(labels_path), gold)
    d = result.to_dict()
    for k, v in d.items():
        click.echo(f"{k}: {v:.4f}" if isinstance(v, float) else f"{k}: {v}")
    if out_path:
        _dump_json(d, out_path)


# -- pipeline ---------------------------------------------------------------------


@dataclass
class PipelineConfig:
    reports: str = None
    scores: str = None
    truth: str = None
    reference: str = None
    out: str = None
    lexicon: Optional[str] = None
    parsed: Optional[str] = None
    predict_scores: Optional[str] = None
    cfl_scores: Optional[str] = None
    cfl_truth: Optional[str] = None
    cfl_predict_scores: Optional[str] = None
    min_support: int = 1
    mode: str = "image"
    all_sentences: bool = False
    keep_negatives: bool = False
    smooth: bool = False
    jobs: int = 1

    REQUIRED = ("reports", "scores", "truth", "reference", "out")
    PATHS = ("reports", "scores", "truth", "reference", "lexicon", "parsed", "predict_scores",
             "cfl_scores", "cfl_truth", "cfl_predict_scores")

    def validate(self):
        missing = [n for n in self.REQUIRED if getattr(self, n) in (None, "")]
        if missing:
            raise click.UsageError("missing pipeline setting(s): " + ", ".join(missing))
        for name in self.PATHS:
            value = getattr(self, name)
            if value and not Path(value).exists():
                raise click.UsageError(f"{name}: path does not exist: {value}")
        if self.min_support < 1:
            raise click.UsageError("min_support must be >= 1")
        if bool(self.cfl_scores) != bool(self.cfl_truth):
            raise click.UsageError("cfl_scores and cfl_truth go together")


def run_pipeline(cfg: PipelineConfig) -> Dict[str, str]:
    """extract -> build-db -> calibrate -> predict-pattern -> generate -> evaluate."""
    cfg.validate()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / "FAILED"
    if marker.exists():
        marker.unlink()
    art = {
        "labels": out / "labels.jsonl",
        "db": out / "db.bin",
        "thresholds": out / "thresholds.json",
        "cfl_thresholds": out / "cfl_thresholds.json",
        "patterns": out / "patterns.jsonl",
        "reports": out / "reports",
        "metrics": out / "metrics.json",
    }
    done: List[str] = []

    def stage(name, fn):
        try:
            fn()
        except Exception as e:  # noqa: BLE001 - every stage failure is reported the same way
            marker.write_text(f"stage: {name}\nerror: {e}\ncompleted: {', '.join(done)}\n", encoding="utf-8")
            raise PipelineError(name, str(e)) from e
        done.append(name)

    lex_holder = {}

    def do_extract():
        lex_holder["lex"] = _lexicon(cfg.lexicon)
        write_jsonl(run_extraction(cfg.reports, lex_holder["lex"], cfg.parsed, cfg.jobs), art["labels"])

    def do_build():
        db = build_database(read_extractions(art["labels"]), lex_holder["lex"], min_support=cfg.min_support,
                            all_sentences_relevant=cfg.all_sentences)
        save_db(db, art["db"])

    def do_calibrate():
        calibrate(read_score_csv(cfg.scores), read_score_csv(cfg.truth), cfg.mode).save(art["thresholds"])
        if cfg.cfl_scores:
            calibrate(read_score_csv(cfg.cfl_scores), read_score_csv(cfg.cfl_truth), cfg.mode).save(art["cfl_thresholds"])

    def do_predict():
        space = load_db(art["db"]).label_space
        cfl_scores = (cfg.cfl_predict_scores or cfg.cfl_scores) if cfg.cfl_scores else None
        records = predict_patterns(cfg.predict_scores or cfg.scores, art["thresholds"], space,
                                   cfl_scores, art["cfl_thresholds"] if cfl_scores else None)
        write_jsonl(records, art["patterns"])

    def do_generate():
        generate_reports(read_jsonl(art["patterns"]), load_db(art["db"]), art["reports"], explain=True,
                         keep_negatives=cfg.keep_negatives)

    def do_evaluate():
        _dump_json(evaluate_dirs(art["reports"], cfg.reference, cfg.smooth), art["metrics"])

    for name, fn in (("extract", do_extract), ("build-db", do_build), ("calibrate", do_calibrate),
                     ("predict-pattern", do_predict), ("generate", do_generate), ("evaluate", do_evaluate)):
        stage(name, fn)
    return {k: str(v) for k, v in art.items() if v.exists()}


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="JSON config; flags override it.")
@click.option("--reports", help="Training report corpus (file, directory or JSONL).")
@click.option("--lexicon", help="Lexicon JSON (default: bundled demo).")
@click.option("--parsed", help="External parse TSV for the corpus.")
@click.option("--scores", help="Calibration score CSV.")
@click.option("--truth", help="Calibration truth CSV.")
@click.option("--predict-scores", help="Score CSV of images to report on (default: --scores).")
@click.option("--cfl-scores", help="Core-label calibration score CSV.")
@click.option("--cfl-truth", help="Core-label calibration truth CSV.")
@click.option("--cfl-predict-scores", help="Core-label score CSV of images to report on.")
@click.option("--reference", help="Reference report directory for evaluation.")
@click.option("--out", help="Output directory.")
@click.option("--min-support", type=int, help="Reports needed to admit a label.")
@click.option("--mode", type=click.Choice(["image", "label"]), help="F1 averaging for calibration.")
@click.option("--all-sentences/--labelled-sentences", default=None, help="Sentences counted in report ranking.")
@click.option("--keep-negatives/--prune-negatives", default=None, help="Negative-finding sentence pruning.")
@click.option("--smooth/--no-smooth", default=None, help="BLEU smoothing.")
@click.option("--jobs", type=click.IntRange(min=1), help="Worker processes for extraction.")
def pipeline(config_path, **flags):
    """Run every stage end to end."""
    values = {}
    if config_path:
        data = json.loads(Path(config_path).read_text(encoding="utf-8"))
        names = {f.name for f in fields(PipelineConfig)}
        unknown = sorted(set(k.replace("-", "_") for k in data) - names)
        if unknown:
            raise click.UsageError(f"unknown config key(s): {', '.join(unknown)}")
        base = Path(config_path).parent
        for k, v in data.items():
            k = k.replace("-", "_")
            if k in PipelineConfig.PATHS + ("out",) and v is not None and not os.path.isabs(v):
                v = str(base / v)
            values[k] = v
    values.update({k: v for k, v in flags.items() if v is not None})
    cfg = PipelineConfig(**values)
    artifacts = run_pipeline(cfg)
    for k in sorted(artifacts):
        click.echo(f"{k}: {artifacts[k]}")


if __name__ == "__main__":
    main()
