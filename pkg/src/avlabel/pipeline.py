"""Two-pass labeling pipeline, evaluation, and output serialization.

Pass 1 parses every report and accumulates token statistics plus a
co-occurrence index. Between passes the taxonomy is finalized, aliases are
resolved, and weak family tokens are downgraded. Pass 2 reparses with the
taxonomy, swaps tokens for their canonical names, collapses correlated AVs,
and assembles votes and tags. Inference then labels every voting report and
confidence is scored last. Outputs preserve input order.
"""

from __future__ import annotations

import json
import multiprocessing
import os
import tempfile
import time
from dataclasses import dataclass, field, fields
from importlib import resources
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import aliasing, confidence, taxonomy as taxonomy_mod, votes as votes_mod
from .errors import (
    ConfigError,
    CorpusError,
    LabelerError,
    MalformedRecordError,
    StageError,
)
from .aliasing import AliasParams, CooccurrenceIndex
from .ibcc import build_instance, plurality_vote, run_inference
from .parsing import (
    CONTENT_CATEGORIES,
    DetectionParser,
    EmptyDetectionError,
    Rulebook,
    load_token_list,
)
from .reports import _MAX_MALFORMED_RATIO, _RATIO_CHECK_MIN_LINES, normalize_report
from .taxonomy import TokenStats
from .votes import AVClusterMap, Tag, TagThresholds

_CHUNK_LINES = 256
_MIN_CONFIDENCE = 1e-6  # family present implies nonzero confidence


def _data_path(name: str) -> str:
    return str(resources.files("avlabel").joinpath("data").joinpath(name))


@dataclass
class PipelineConfig:
    """Every knob of the pipeline; defaults mirror the documented values."""

    rules_path: Optional[str] = None
    groups_path: Optional[str] = None
    placeholders_path: Optional[str] = None
    clusters_path: Optional[str] = None
    vt_format: bool = False
    dominance: float = 0.9
    min_fam_clusters: int = 3
    alias: AliasParams = field(default_factory=AliasParams)
    alias_substrings: Tuple[str, ...] = aliasing.DEFAULT_ALIAS_SUBSTRINGS
    tag_thresholds: TagThresholds = field(default_factory=TagThresholds)
    ibcc_tol: float = 1e-4
    ibcc_max_iter: int = 100
    ibcc_diag_boost: float = 1.5
    ibcc_base_mass: float = 0.5
    ibcc_class_prior_mass: float = 1.0
    vote_mode: str = "ibcc"
    confidence_model_path: Optional[str] = None
    confidence_threshold: Optional[float] = None
    output_taxonomy: Optional[str] = None
    output_aliases: Optional[str] = None
    threads: int = 1
    temp_dir: Optional[str] = None
    memory_budget: Optional[int] = None  # co-occurrence entries held in memory

    def resolved_rules_path(self) -> str:
        return self.rules_path or _data_path("rules.jsonl")

    def resolved_groups_path(self) -> str:
        return self.groups_path or _data_path("groups.txt")

    def resolved_placeholders_path(self) -> str:
        return self.placeholders_path or _data_path("placeholders.txt")

    def resolved_clusters_path(self) -> str:
        return self.clusters_path or _data_path("clusters.txt")

    def validate(self) -> None:
        if not 0 < self.dominance <= 1:
            raise ConfigError(f"dominance must be in (0, 1]: {self.dominance}")
        if self.min_fam_clusters < 1:
            raise ConfigError("min_fam_clusters must be >= 1")
        self.alias.validate()
        self.tag_thresholds.validate()
        if self.ibcc_tol < 0:
            raise ConfigError("ibcc_tol must be non-negative")
        if self.ibcc_max_iter < 0:
            raise ConfigError("ibcc_max_iter must be non-negative")
        if self.ibcc_base_mass <= 0 or self.ibcc_class_prior_mass <= 0:
            raise ConfigError("IBCC prior masses must be positive")
        if self.ibcc_diag_boost < 0:
            raise ConfigError("ibcc_diag_boost must be non-negative")
        if self.vote_mode not in ("ibcc", "plurality"):
            raise ConfigError(f"vote_mode must be ibcc or plurality: {self.vote_mode}")
        if self.confidence_threshold is not None and not 0 <= self.confidence_threshold <= 1:
            raise ConfigError("confidence_threshold must be in [0, 1]")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.memory_budget is not None and self.memory_budget < 1:
            raise ConfigError("memory_budget must be >= 1 when set")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, AliasParams):
                value = {
                    "min_coocur": value.min_coocur,
                    "min_support": value.min_support,
                    "min_escore": value.min_escore,
                    "min_combined": value.min_combined,
                }
            elif isinstance(value, TagThresholds):
                value = {
                    "BEH": value.beh, "FILE": value.file, "VULN": value.vuln,
                    "PACK": value.pack, "GRP": value.grp,
                }
            elif isinstance(value, tuple):
                value = list(value)
            out[f.name] = value
        out["rules_path_resolved"] = self.resolved_rules_path()
        out["groups_path_resolved"] = self.resolved_groups_path()
        out["placeholders_path_resolved"] = self.resolved_placeholders_path()
        out["clusters_path_resolved"] = self.resolved_clusters_path()
        return out


@dataclass(frozen=True)
class LabelOutput:
    """The per-file output contract: counts, family, confidence, tags."""

    file_hash: str
    num_detected: int
    num_scanned: int
    family: Optional[str]
    confidence: float
    tags: Tuple[Tag, ...]

    def to_json_obj(self) -> dict:
        return {
            "sha256": self.file_hash,
            "detected": f"{self.num_detected}/{self.num_scanned}",
            "family": self.family,
            "confidence": round(self.confidence, 6),
            "tags": [{"tag": t.tag, "count": t.support} for t in self.tags],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_obj(), separators=(",", ":"))

    def to_tsv(self) -> str:
        tags = ",".join(f"{t.tag}:{t.support}" for t in self.tags)
        return "\t".join(
            [
                self.file_hash,
                f"{self.num_detected}/{self.num_scanned}",
                self.family if self.family is not None else "none",
                f"{round(self.confidence, 6)}",
                tags,
            ]
        )


@dataclass
class _ReportRow:
    file_hash: str
    num_detected: int
    num_scanned: int
    votes: Dict[str, str]
    tags: Tuple[Tag, ...]


@dataclass
class PipelineResult:
    outputs: List[LabelOutput]
    taxonomy: taxonomy_mod.Taxonomy
    alias_map: aliasing.AliasMap
    excluded: List[str]
    candidates: Dict[str, Tuple[str, ...]]
    votes_by_hash: Dict[str, Dict[str, str]]
    features_by_hash: Dict[str, confidence.ConfidenceFeatures]
    summary: dict
    inference: Optional[object] = None


# --- worker plumbing ---------------------------------------------------------
#
# Workers receive immutable parsing state through the pool initializer; the
# chunked imap preserves submission order, so merges are deterministic for
# any thread count.

_WORKER_STATE: dict = {}


def _init_worker(state: dict) -> None:
    global _WORKER_STATE
    _WORKER_STATE = state


def _parse_report_items(parser, report):
    """Per-AV ordered (token, category) items for one report."""
    av_items = {}
    for av_name, res in report.scans.items():
        if not res.detected or not res.detection:
            continue
        try:
            parsed = parser.parse(av_name, res.detection)
        except EmptyDetectionError:
            continue  # label had no alphanumeric content; treat as label-less
        av_items[av_name] = list(parsed.items())
    return av_items


def _pass1_chunk(lines) -> tuple:
    state = _WORKER_STATE
    parser: DetectionParser = state["parser"]
    vt_format: bool = state["vt_format"]
    stats = TokenStats()
    index = CooccurrenceIndex()
    n_lines = 0
    malformed = 0
    for line in lines:
        line = line.strip()
        if not line:
            continue
        n_lines += 1
        try:
            report = normalize_report(json.loads(line), vt_format=vt_format)
        except (ValueError, MalformedRecordError):
            malformed += 1
            continue
        av_items = _parse_report_items(parser, report)
        stats.observe_report(av_items)
        tokens = set()
        content_tokens = set()
        for items in av_items.values():
            for token, cat in items:
                tokens.add(token)
                if cat in CONTENT_CATEGORIES:
                    content_tokens.add(token)
        index.observe_report(tokens, pair_tokens=content_tokens)
    return n_lines, malformed, stats, index


def _pass2_chunk(lines) -> tuple:
    state = _WORKER_STATE
    parser: DetectionParser = state["parser"]
    vt_format: bool = state["vt_format"]
    resolve: Dict[str, str] = state["resolve"]
    clusters: AVClusterMap = state["clusters"]
    thresholds: TagThresholds = state["tag_thresholds"]
    rows = []
    malformed = 0
    for line in lines:
        line = line.strip()
        if not line:
            continue
        try:
            report = normalize_report(json.loads(line), vt_format=vt_format)
        except (ValueError, MalformedRecordError):
            malformed += 1
            continue
        av_items = _parse_report_items(parser, report)
        canonical_items = {
            av: [(resolve.get(token, token), cat) for token, cat in items]
            for av, items in av_items.items()
        }
        deduped = votes_mod.collapse_correlated(canonical_items, clusters)
        fam_votes = votes_mod.extract_family_votes(deduped)
        tags = tuple(votes_mod.extract_tags(deduped, thresholds))
        rows.append(
            _ReportRow(
                file_hash=report.file_hash,
                num_detected=report.num_detected,
                num_scanned=report.num_scanned,
                votes=fam_votes,
                tags=tags,
            )
        )
    return malformed, rows


def _iter_line_chunks(path: str, chunk_lines: int = _CHUNK_LINES):
    with open(path, "r", encoding="utf-8", errors="replace") as fd:
        chunk = []
        for line in fd:
            chunk.append(line)
            if len(chunk) >= chunk_lines:
                yield chunk
                chunk = []
        if chunk:
            yield chunk


def _map_chunks(path, worker_fn, state, threads):
    """Apply worker_fn over line chunks, yielding results in file order."""
    if threads <= 1:
        _init_worker(state)
        for chunk in _iter_line_chunks(path):
            yield worker_fn(chunk)
        return
    ctx = multiprocessing.get_context()
    with ctx.Pool(threads, initializer=_init_worker, initargs=(state,)) as pool:
        for result in pool.imap(worker_fn, _iter_line_chunks(path), chunksize=1):
            yield result


def run_pipeline(input_path, config: PipelineConfig) -> PipelineResult:
    """Run the full two-pass pipeline over a line-delimited report file."""
    config.validate()
    summary: dict = {"config": config.to_dict(), "stages": {}}
    timings = summary["stages"]

    def stage(name):
        return _StageTimer(name, timings)

    # Stage: configuration and resources.
    try:
        with stage("config"):
            rulebook = Rulebook.load(config.resolved_rules_path())
            group_list = load_token_list(config.resolved_groups_path())
            placeholder_list = load_token_list(config.resolved_placeholders_path())
            clusters = AVClusterMap.load(config.resolved_clusters_path())
            parser = DetectionParser(rulebook, group_list, placeholder_list)
            model = (
                confidence.load_model(config.confidence_model_path)
                if config.confidence_model_path
                else None
            )
    except LabelerError as exc:
        raise StageError("config", exc) from exc
    except OSError as exc:
        raise StageError("config", exc) from exc

    if not os.path.isfile(input_path):
        raise StageError("parse-1", CorpusError(f"cannot read {input_path}"))

    # Stage: first parsing pass, accumulating statistics.
    spill_dir = None
    spill_tags: List[int] = []
    stats = TokenStats()
    index = CooccurrenceIndex()
    n_lines = 0
    n_malformed = 0
    try:
        with stage("parse-1"):
            state = {"parser": parser, "vt_format": config.vt_format}
            for chunk_lines_count, chunk_malformed, chunk_stats, chunk_index in _map_chunks(
                input_path, _pass1_chunk, state, config.threads
            ):
                n_lines += chunk_lines_count
                n_malformed += chunk_malformed
                stats.merge(chunk_stats)
                index.merge(chunk_index)
                if config.memory_budget is not None and len(index) > config.memory_budget:
                    if spill_dir is None:
                        spill_dir = tempfile.mkdtemp(
                            prefix="avlabel_spill_", dir=config.temp_dir
                        )
                    tag = len(spill_tags)
                    index.spill(os.path.join(spill_dir, f"cooc_{tag}.pkl"))
                    stats.spill(os.path.join(spill_dir, f"stats_{tag}.pkl"))
                    spill_tags.append(tag)
            summary["spill_shards"] = len(spill_tags)
            for tag in spill_tags:
                index.absorb_spill(os.path.join(spill_dir, f"cooc_{tag}.pkl"))
                stats.absorb_spill(os.path.join(spill_dir, f"stats_{tag}.pkl"))
            if (
                n_lines >= _RATIO_CHECK_MIN_LINES
                and n_malformed > _MAX_MALFORMED_RATIO * n_lines
            ):
                raise CorpusError(
                    f"{n_malformed} of {n_lines} lines malformed (>10%)"
                )
    except LabelerError as exc:
        raise StageError("parse-1", exc) from exc

    summary["input_lines"] = n_lines
    summary["malformed_lines"] = n_malformed
    summary["distinct_tokens"] = len(stats.counts)

    # Stage: taxonomy and aliases.
    try:
        with stage("taxonomy"):
            tax = taxonomy_mod.finalize_taxonomy(stats, config.dominance)
        with stage("alias"):
            all_tokens = list(stats.counts)
            trivial = aliasing.find_trivial_aliases(
                all_tokens, tax, config.alias_substrings
            )
            fam_tokens = tax.tokens_of(taxonomy_mod.LexicalCategory.FAM)
            siblings = aliasing.find_sibling_aliases(
                fam_tokens, index, config.alias.min_coocur, config.alias.min_support
            )
            parent_child = aliasing.find_parent_child(
                index, tax, config.alias.min_escore, config.alias.min_combined
            )
            alias_map = aliasing.build_alias_map(
                trivial, siblings, parent_child, tax, index.singles
            )
        with stage("downgrade"):
            tax = taxonomy_mod.downgrade_rare_fams(
                tax, stats, alias_map, clusters, config.min_fam_clusters
            )
    except LabelerError as exc:
        raise StageError("alias", exc) from exc

    summary["alias_pairs"] = {
        "trivial": len(trivial),
        "sibling": len(siblings),
        "parent_child": len(parent_child),
    }
    summary["taxonomy_size"] = len(tax)

    if config.output_taxonomy:
        tax.write(config.output_taxonomy)
    if config.output_aliases:
        alias_map.write(config.output_aliases)

    # Stage: second pass with taxonomy and canonical names.
    resolve = dict(alias_map.nonself_mappings())
    rows: List[_ReportRow] = []
    try:
        with stage("parse-2"):
            state = {
                "parser": parser.with_taxonomy(tax),
                "vt_format": config.vt_format,
                "resolve": resolve,
                "clusters": clusters,
                "tag_thresholds": config.tag_thresholds,
            }
            for _chunk_malformed, chunk_rows in _map_chunks(
                input_path, _pass2_chunk, state, config.threads
            ):
                rows.extend(chunk_rows)
    except LabelerError as exc:
        raise StageError("parse-2", exc) from exc

    # Stage: inference over family votes.
    inference_result = None
    family_by_row: List[Optional[str]] = [None] * len(rows)
    posterior_by_row: List[Optional[tuple]] = [None] * len(rows)
    excluded_hashes: List[str] = []
    try:
        with stage("inference"):
            voting_rows = [i for i, row in enumerate(rows) if row.votes]
            excluded_hashes = [row.file_hash for row in rows if not row.votes]
            if voting_rows:
                if config.vote_mode == "ibcc":
                    instance, _excluded = build_instance(
                        [rows[i].votes for i in voting_rows],
                        report_keys=[rows[i].file_hash for i in voting_rows],
                    )
                    inference_result = run_inference(
                        instance,
                        tol=config.ibcc_tol,
                        max_iter=config.ibcc_max_iter,
                        diag_boost=config.ibcc_diag_boost,
                        base_mass=config.ibcc_base_mass,
                        class_prior_mass=config.ibcc_class_prior_mass,
                    )
                    posterior = inference_result.posterior
                    top_families = posterior.argmax_families()
                    for pos, i in enumerate(voting_rows):
                        fam_ids, probs = posterior.row(pos)
                        names = tuple(instance.families[j] for j in fam_ids)
                        posterior_by_row[i] = (names, probs)
                        family_by_row[i] = instance.families[int(top_families[pos])]
                    summary["ibcc"] = {
                        "iterations": inference_result.iterations,
                        "converged": inference_result.converged,
                        "n_families": instance.n_families,
                        "n_annotators": instance.n_annotators,
                        "confusion_entries": instance.cooccurrence.total_entries,
                        "posterior_entries": posterior.n_entries,
                    }
                else:
                    for i in voting_rows:
                        row = rows[i]
                        family_by_row[i] = plurality_vote(row.votes, index.singles)
                        tally = {}
                        for fam in row.votes.values():
                            tally[fam] = tally.get(fam, 0) + 1
                        names = tuple(sorted(tally))
                        total = sum(tally.values())
                        probs = np.array([tally[f] / total for f in names])
                        posterior_by_row[i] = (names, probs)
    except LabelerError as exc:
        raise StageError("inference", exc) from exc

    # Stage: confidence scoring and output assembly.
    try:
        with stage("confidence"):
            features = [
                confidence.extract_features(row, row.votes, posterior_by_row[i])
                for i, row in enumerate(rows)
            ]
            if model is not None:
                scored = confidence.score_many(model, features)
            else:
                scored = np.array([f.top_posterior for f in features])
            outputs = []
            for i, row in enumerate(rows):
                family = family_by_row[i]
                conf = max(float(scored[i]), _MIN_CONFIDENCE) if family else 0.0
                outputs.append(
                    LabelOutput(
                        file_hash=row.file_hash,
                        num_detected=row.num_detected,
                        num_scanned=row.num_scanned,
                        family=family,
                        confidence=conf,
                        tags=row.tags,
                    )
                )
    except LabelerError as exc:
        raise StageError("confidence", exc) from exc

    summary["outputs"] = len(outputs)
    summary["family_less"] = len(excluded_hashes)

    if config.confidence_threshold is not None:
        outputs, filter_summary = confidence.threshold_filter(
            outputs, config.confidence_threshold
        )
        summary["confidence_filter"] = {
            "tau": config.confidence_threshold,
            "retained": filter_summary.retained,
            "total": filter_summary.total,
        }

    candidates = {
        row.file_hash: tuple(sorted(set(row.votes.values()))) for row in rows
    }
    votes_by_hash = {row.file_hash: dict(row.votes) for row in rows}
    features_by_hash = {}
    for i, row in enumerate(rows):
        features_by_hash.setdefault(row.file_hash, features[i])
    return PipelineResult(
        outputs=outputs,
        taxonomy=tax,
        alias_map=alias_map,
        excluded=excluded_hashes,
        candidates=candidates,
        votes_by_hash=votes_by_hash,
        features_by_hash=features_by_hash,
        summary=summary,
        inference=inference_result,
    )


class _StageTimer:
    def __init__(self, name, sink):
        self.name = name
        self.sink = sink

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.sink[self.name] = round(time.perf_counter() - self.start, 4)
        return False


# --- evaluation ---------------------------------------------------------------


@dataclass
class GroundTruth:
    families: Dict[str, str]
    alias_groups: Tuple[Tuple[str, ...], ...] = ()


def load_ground_truth(path, aliases_path=None) -> GroundTruth:
    """JSONL {"sha256", "family"} plus optional comma-grouped alias lines."""
    families: Dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fd:
        for lineno, line in enumerate(fd, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                file_hash = rec["sha256"].strip().lower()
                family = rec["family"].strip().lower()
            except (ValueError, KeyError, AttributeError):
                raise MalformedRecordError(f"{path}:{lineno}: bad ground-truth record")
            if file_hash in families:
                raise MalformedRecordError(f"{path}:{lineno}: duplicate hash {file_hash}")
            families[file_hash] = family
    groups = []
    if aliases_path:
        with open(aliases_path, "r", encoding="utf-8") as fd:
            for line in fd:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                members = tuple(part.strip().lower() for part in line.split(",") if part.strip())
                if len(members) >= 2:
                    groups.append(members)
    return GroundTruth(families=families, alias_groups=tuple(groups))


@dataclass
class EvalReport:
    n_truth: int
    n_correct: int
    n_missing: int
    accuracy: float
    impossible_fraction: Optional[float]
    per_family: Dict[str, Tuple[int, int]]  # true family -> (total, correct)

    def lines(self) -> List[str]:
        out = [
            f"accuracy: {self.accuracy:.4f} ({self.n_correct}/{self.n_truth})",
            f"missing predictions: {self.n_missing}",
        ]
        if self.impossible_fraction is not None:
            out.append(f"impossible (true family never voted): {self.impossible_fraction:.2%}")
        return out


def family_matcher(truth: GroundTruth, alias_map: Optional[aliasing.AliasMap] = None):
    """Predicate `same_family(predicted, true)` over the union of the run's
    alias map and any truth-side alias groups."""
    uf = aliasing.AliasMap()
    if alias_map is not None:
        for members in alias_map.groups().values():
            members = sorted(members)
            for other in members[1:]:
                uf.union(members[0], other)
    for group in truth.alias_groups:
        for other in group[1:]:
            uf.union(group[0].lower(), other.lower())

    def same_family(predicted: Optional[str], true_family: str) -> bool:
        if predicted is None:
            return False
        return uf.find(predicted.lower()) == uf.find(true_family.lower())

    return same_family


def evaluate(
    predictions,
    truth: GroundTruth,
    alias_map: Optional[aliasing.AliasMap] = None,
    candidates: Optional[Mapping[str, Sequence[str]]] = None,
) -> EvalReport:
    """Alias-aware accuracy of predictions against ground truth.

    A prediction is correct when its family shares an alias group with the
    true family, under the union of the run's alias map and any truth-side
    alias groups. Truth hashes without a prediction count as wrong. When a
    per-hash candidate map is given, also reports the fraction of reports
    whose true family received no vote at all.
    """
    if not truth.families:
        raise ConfigError("ground truth is empty")

    same_family = family_matcher(truth, alias_map)

    predicted: Dict[str, Optional[str]] = {}
    for output in predictions:
        predicted.setdefault(output.file_hash, output.family)

    n_correct = 0
    n_missing = 0
    n_impossible = 0
    per_family: Dict[str, Tuple[int, int]] = {}
    for file_hash, true_family in truth.families.items():
        total, correct = per_family.get(true_family, (0, 0))
        if file_hash not in predicted:
            n_missing += 1
            per_family[true_family] = (total + 1, correct)
            continue
        hit = same_family(predicted[file_hash], true_family)
        if hit:
            n_correct += 1
        per_family[true_family] = (total + 1, correct + int(hit))
        if candidates is not None:
            cand = candidates.get(file_hash, ())
            if not any(same_family(c, true_family) for c in cand):
                n_impossible += 1

    impossible_fraction = None
    if candidates is not None:
        impossible_fraction = n_impossible / len(truth.families)
    return EvalReport(
        n_truth=len(truth.families),
        n_correct=n_correct,
        n_missing=n_missing,
        accuracy=n_correct / len(truth.families),
        impossible_fraction=impossible_fraction,
        per_family=per_family,
    )
