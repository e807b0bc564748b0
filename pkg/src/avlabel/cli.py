"""Command-line interface: label, evaluate, train-confidence, synth, scale-probe.

Exit codes: 0 on success, 1 on a fatal stage error, 2 on configuration
errors. The label subcommand writes a run log with every effective
parameter so runs are reproducible.
"""

from __future__ import annotations

import json
import sys

import click

from . import __version__
from .aliasing import AliasParams
from .confidence import (
    ConfidenceFeatures,
    FEATURE_NAMES,
    save_model,
    threshold_filter,
    train_model,
)
from .errors import ConfigError, LabelerError, StageError
from .pipeline import (
    GroundTruth,
    LabelOutput,
    PipelineConfig,
    evaluate as evaluate_predictions,
    load_ground_truth,
    run_pipeline,
)
from .synth import make_alias_profile, make_confusion_profile, scaling_probe, synth_generate
from .votes import TagThresholds


def _fail(exc: Exception) -> None:
    click.echo(f"error: {exc}", err=True)
    sys.exit(2 if isinstance(exc, ConfigError) else 1)


def _parse_tag_thresholds(overrides) -> TagThresholds:
    values = {"beh": 5, "file": 5, "vuln": 1, "pack": 1, "grp": 1}
    for item in overrides:
        try:
            category, number = item.split("=", 1)
            category = category.strip().lower()
            if category not in values:
                raise ValueError(category)
            values[category] = int(number)
        except ValueError:
            raise ConfigError(f"bad --tag-threshold {item!r}, expected CAT=N") from None
    return TagThresholds(**values)


@click.group()
@click.version_option(version=__version__, prog_name="avlabel")
def main():
    """Aggregate AV scan reports into family labels, confidence, and tags."""


@main.command()
@click.argument("input_path", type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--output", default="-", help="Output file, '-' for stdout.")
@click.option("--rules", "rules_path", type=click.Path(exists=True), default=None)
@click.option("--groups", "groups_path", type=click.Path(exists=True), default=None)
@click.option("--placeholders", "placeholders_path", type=click.Path(exists=True), default=None)
@click.option("--clusters", "clusters_path", type=click.Path(exists=True), default=None)
@click.option("--vt-format", is_flag=True, help="Accept VirusTotal-style nesting.")
@click.option("--tsv", is_flag=True, help="Tab-separated output instead of JSON lines.")
@click.option("--dominance", default=0.9, show_default=True)
@click.option("-S", "--sibling-coocur", default=0.95, show_default=True,
              help="Both-way co-occurrence rate for sibling aliases.")
@click.option("-T", "--sibling-support", default=1000, show_default=True,
              help="Report-count floor for sibling aliases.")
@click.option("-E", "--escore-min", default=0.6, show_default=True,
              help="Edit-similarity floor for parent-child aliases.")
@click.option("-C", "--combined-min", default=0.5, show_default=True,
              help="coocur*escore floor for parent-child aliases.")
@click.option("--tag-threshold", multiple=True, metavar="CAT=N",
              help="Override a per-category tag threshold (repeatable).")
@click.option("--vote-mode", type=click.Choice(["ibcc", "plurality"]), default="ibcc",
              show_default=True)
@click.option("--ibcc-tol", default=1e-4, show_default=True)
@click.option("--ibcc-max-iter", default=100, show_default=True)
@click.option("--ibcc-diag-boost", default=1.5, show_default=True)
@click.option("--ibcc-base-mass", default=0.5, show_default=True)
@click.option("--confidence-model", type=click.Path(exists=True), default=None)
@click.option("--confidence-threshold", type=float, default=None,
              help="Drop outputs below this confidence (breaks line parity).")
@click.option("--output-taxonomy", type=click.Path(), default=None)
@click.option("--output-aliases", type=click.Path(), default=None)
@click.option("--output-votes", type=click.Path(), default=None,
              help="Sidecar JSONL with per-report family votes.")
@click.option("--output-features", type=click.Path(), default=None,
              help="Sidecar JSONL with confidence features (and correctness when --truth given).")
@click.option("--truth", "truth_path", type=click.Path(exists=True), default=None)
@click.option("--truth-aliases", "truth_aliases_path", type=click.Path(exists=True), default=None)
@click.option("--threads", default=1, show_default=True)
@click.option("--temp-dir", type=click.Path(), default=None)
@click.option("--memory-budget", type=int, default=None,
              help="Max in-memory co-occurrence entries before spilling to disk.")
@click.option("--run-log", type=click.Path(), default=None)
def label(input_path, output, tsv, tag_threshold, sibling_coocur, sibling_support,
          escore_min, combined_min, confidence_model, truth_path, truth_aliases_path,
          output_votes, output_features, run_log, **kwargs):
    """Label a scan-report file with families, confidence, and tags."""
    try:
        config = PipelineConfig(
            alias=AliasParams(
                min_coocur=sibling_coocur,
                min_support=sibling_support,
                min_escore=escore_min,
                min_combined=combined_min,
            ),
            tag_thresholds=_parse_tag_thresholds(tag_threshold),
            confidence_model_path=confidence_model,
            **kwargs,
        )
        result = run_pipeline(input_path, config)
    except (ConfigError, StageError) as exc:
        _fail(exc)

    lines = [o.to_tsv() if tsv else o.to_json() for o in result.outputs]
    if output == "-":
        for line in lines:
            click.echo(line)
    else:
        with open(output, "w", encoding="utf-8") as fd:
            for line in lines:
                fd.write(line + "\n")

    if output_votes:
        with open(output_votes, "w", encoding="utf-8") as fd:
            for file_hash, votes in result.votes_by_hash.items():
                fd.write(json.dumps({"sha256": file_hash, "votes": votes}) + "\n")

    if output_features:
        _write_features(result, truth_path, truth_aliases_path, output_features)

    log_payload = json.dumps(result.summary, sort_keys=True)
    if run_log:
        with open(run_log, "w", encoding="utf-8") as fd:
            fd.write(log_payload + "\n")
    else:
        click.echo(log_payload, err=True)


def _write_features(result, truth_path, truth_aliases_path, output_features):
    """Write per-report difficulty features, with correctness when truth given."""
    from .pipeline import family_matcher

    truth = load_ground_truth(truth_path, truth_aliases_path) if truth_path else None
    same_family = family_matcher(truth, result.alias_map) if truth else None
    with open(output_features, "w", encoding="utf-8") as fd:
        for out in result.outputs:
            features = result.features_by_hash.get(out.file_hash)
            if features is None:
                continue
            record = {"sha256": out.file_hash, "family": out.family}
            record.update(features.as_dict())
            if truth is not None and out.file_hash in truth.families:
                record["correct"] = same_family(
                    out.family, truth.families[out.file_hash]
                )
            fd.write(json.dumps(record) + "\n")


@main.command("evaluate")
@click.argument("predictions_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("truth_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--truth-aliases", type=click.Path(exists=True), default=None)
@click.option("--aliases", "aliases_path", type=click.Path(exists=True), default=None,
              help="Alias mapping emitted by label --output-aliases.")
@click.option("--votes", "votes_path", type=click.Path(exists=True), default=None,
              help="Votes sidecar from label --output-votes, enables the impossibility bound.")
@click.option("--confidence-threshold", type=float, default=None)
@click.option("--per-family", is_flag=True, help="Also print per-family accuracy.")
def evaluate_cmd(predictions_path, truth_path, truth_aliases, aliases_path, votes_path,
                 confidence_threshold, per_family):
    """Score a predictions file against ground truth with alias-aware matching."""
    from .aliasing import AliasMap

    try:
        truth = load_ground_truth(truth_path, truth_aliases)
        predictions = []
        with open(predictions_path, "r", encoding="utf-8") as fd:
            for line in fd:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                detected, scanned = rec["detected"].split("/")
                predictions.append(
                    LabelOutput(
                        file_hash=rec["sha256"],
                        num_detected=int(detected),
                        num_scanned=int(scanned),
                        family=rec["family"],
                        confidence=float(rec["confidence"]),
                        tags=(),
                    )
                )
        alias_map = None
        if aliases_path:
            alias_map = AliasMap()
            with open(aliases_path, "r", encoding="utf-8") as fd:
                for line in fd:
                    parts = line.strip().split("\t")
                    if len(parts) == 2:
                        alias_map.union(parts[0], parts[1])
        candidates = None
        if votes_path:
            candidates = {}
            with open(votes_path, "r", encoding="utf-8") as fd:
                for line in fd:
                    rec = json.loads(line)
                    candidates[rec["sha256"]] = tuple(set(rec["votes"].values()))
        if confidence_threshold is not None:
            predictions, filter_summary = threshold_filter(predictions, confidence_threshold)
            click.echo(
                f"confidence >= {confidence_threshold}: retained "
                f"{filter_summary.retained}/{filter_summary.total} "
                f"({filter_summary.retained_fraction:.2%})"
            )
            retained_hashes = {p.file_hash for p in predictions}
            kept = {h: f for h, f in truth.families.items() if h in retained_hashes}
            if not kept:
                _fail(ConfigError("no retained prediction matches any truth hash"))
            truth = GroundTruth(families=kept, alias_groups=truth.alias_groups)
        report = evaluate_predictions(predictions, truth, alias_map, candidates)
    except LabelerError as exc:
        _fail(exc)
    except (ValueError, KeyError) as exc:
        _fail(ConfigError(f"bad predictions file: {exc}"))
    for line in report.lines():
        click.echo(line)
    if per_family:
        breakdown = sorted(
            report.per_family.items(), key=lambda kv: (-kv[1][0], kv[0])
        )
        for family, (total, correct) in breakdown:
            click.echo(f"  {family}\t{correct}/{total}\t{correct / total:.2%}")


@main.command("train-confidence")
@click.option("--input", "input_path", type=click.Path(exists=True), required=True,
              help="JSONL with the seven feature fields plus a boolean 'correct'.")
@click.option("--folds", default=5, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--output", "output_path", type=click.Path(), required=True)
def train_confidence(input_path, folds, seed, output_path):
    """Train the difficulty model from a (features, correctness) file."""
    examples = []
    try:
        with open(input_path, "r", encoding="utf-8") as fd:
            for lineno, line in enumerate(fd, 1):
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                if "correct" not in rec:
                    raise ConfigError(f"{input_path}:{lineno}: missing 'correct' field")
                features = ConfidenceFeatures(
                    **{name: float(rec[name]) for name in FEATURE_NAMES}
                )
                examples.append((features, bool(rec["correct"])))
        model, fold_reports = train_model(examples, folds=folds, seed=seed)
        save_model(model, output_path)
    except (ValueError, KeyError) as exc:
        _fail(ConfigError(f"bad features file: {exc}"))
    except LabelerError as exc:
        _fail(exc)
    for report in fold_reports:
        click.echo(
            f"fold {report.fold}: accuracy {report.accuracy:.4f} brier {report.brier:.4f}"
        )
    click.echo(f"model written to {output_path}")


@main.command("synth")
@click.option("--seed", default=0, show_default=True)
@click.option("--n-reports", default=1000, show_default=True)
@click.option("--n-families", default=20, show_default=True)
@click.option("--n-annotators", default=10, show_default=True)
@click.option("--confusion-profile", default="heterogeneous", show_default=True,
              help="identity | uniform:<p> | heterogeneous")
@click.option("--alias-profile", default="none", show_default=True,
              help="none | trivial:<fraction>")
@click.option("--output", "corpus_path", type=click.Path(), required=True)
@click.option("--truth", "truth_path", type=click.Path(), required=True)
@click.option("--confusions", "confusions_path", type=click.Path(), default=None)
def synth(seed, n_reports, n_families, n_annotators, confusion_profile, alias_profile,
          corpus_path, truth_path, confusions_path):
    """Generate a synthetic scan-report corpus with known ground truth."""
    try:
        profile = make_confusion_profile(confusion_profile, n_annotators, seed)
        aliases = make_alias_profile(alias_profile)
        result = synth_generate(
            seed=seed,
            n_reports=n_reports,
            n_families=n_families,
            n_annotators=n_annotators,
            confusion_profile=profile,
            alias_profile=aliases,
            corpus_path=corpus_path,
            truth_path=truth_path,
            confusions_path=confusions_path,
        )
    except LabelerError as exc:
        _fail(exc)
    click.echo(f"wrote {result.n_reports} reports to {result.corpus_path}")
    click.echo(f"ground truth in {result.truth_path}")
    if result.alias_groups_path:
        click.echo(f"alias groups in {result.alias_groups_path}")


@main.command("scale-probe")
@click.option("--sizes", default="10000,40000", show_default=True,
              help="Comma-separated corpus sizes.")
@click.option("--seed", default=7, show_default=True)
@click.option("--n-annotators", default=20, show_default=True)
@click.option("--max-iter", default=20, show_default=True)
def scale_probe(sizes, seed, n_annotators, max_iter):
    """Measure inference runtime across synthetic corpus sizes."""
    try:
        size_list = [int(s) for s in sizes.split(",") if s.strip()]
        result = scaling_probe(size_list, seed=seed, n_annotators=n_annotators,
                               max_iter=max_iter)
    except ValueError:
        _fail(ConfigError(f"bad --sizes {sizes!r}"))
    except LabelerError as exc:
        _fail(exc)
    click.echo(result.table())
    if result.quadratic_fit:
        a, b, c = result.quadratic_fit
        click.echo(f"quadratic fit: {a:.3e}*n^2 + {b:.3e}*n + {c:.3e}")
    if len(result.rows) >= 2:
        first, last = result.rows[0], result.rows[-1]
        size_ratio = last.size / first.size
        time_ratio = (
            last.inference_seconds / first.inference_seconds
            if first.inference_seconds > 0
            else float("inf")
        )
        click.echo(
            f"size x{size_ratio:.1f} -> time x{time_ratio:.2f} "
            f"({'sub' if time_ratio < size_ratio else 'super'}-linear)"
        )


if __name__ == "__main__":
    main()
