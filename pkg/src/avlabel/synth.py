"""Seeded synthetic benchmarks: scan-report corpora with known ground truth.

The generator emits detection strings shaped for the bundled demonstration
rulebook, so the full pipeline can run end to end at desk scale. Vote-level
instances (no text) are also available for inference-only experiments and
runtime probes.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError
from .ibcc import build_instance, run_inference
from .aliasing import DEFAULT_ALIAS_SUBSTRINGS, escore

# Demo AV products with rulebook coverage. Clustered AVs come last so small
# annotator pools stay free of correlated pairs.
DEMO_AV_POOL = (
    "AlphaAV", "BetaAV", "GammaAV", "DeltaAV", "EpsilonAV", "ZetaAV",
    "EtaAV", "ThetaAV", "IotaAV", "KappaAV", "LambdaAV", "MuAV", "NuAV",
    "XiAV", "OmicronAV", "PiAV", "RhoAV",
    "PhiAV", "ChiAV", "PsiAV", "OmegaAV", "SigmaAV", "TauAV", "UpsilonAV",
)

# Detection templates matching the bundled rules. `generic_ok` marks shapes
# whose family slot routes generic words to PRE instead of FAM.
_TEMPLATES = {
    "AlphaAV": ("{beh}.{file}.{fam}.{suf}", True),
    "BetaAV": ("{beh}.{file}.{fam}.{suf}", True),
    "GammaAV": ("{beh}.{file}.{fam}.{suf}", True),
    "DeltaAV": ("{beh}.{file}.{fam}.{suf}", True),
    "EpsilonAV": ("{beh}.{file}.{fam}.{suf}", True),
    "ZetaAV": ("{beh}.{file}.{fam}.{suf}", True),
    "EtaAV": ("{beh}.{file}.{fam}.{suf}", True),
    "ThetaAV": ("{beh}.{fam}!{suf}", True),
    "IotaAV": ("Heur:{fam}.{suf}", True),
    "KappaAV": ("{file}/{fam}.{suf}", True),
    "LambdaAV": ("{file}/{fam}.{suf}", True),
    "MuAV": ("{beh}.{file}.{fam}.{suf}", True),
    "NuAV": ("{beh}.{file}.{fam}.{suf}", True),
    "XiAV": ("{beh}.{fam}!{suf}", True),
    "OmicronAV": ("{beh}.{fam}!{suf}", True),
    "PiAV": ("{beh}.{file}.{fam}.{suf}", True),
    "RhoAV": ("{file}_{beh}_{fam}", True),
    "PhiAV": ("{beh}.{file}.{fam}.{suf}", True),
    "ChiAV": ("{beh}.{file}.{fam}.{suf}", True),
    "PsiAV": ("Heur:{fam}.{suf}", True),
    "OmegaAV": ("{beh}:{file}/{fam}.{suf}", False),
    "SigmaAV": ("{file}_{beh}_{fam}", True),
    "TauAV": ("{file}_{beh}_{fam}", True),
    "UpsilonAV": ("{file}/{fam}.{suf}", True),
}

_BEH_WORDS = (
    "Trojan", "Backdoor", "Worm", "Downloader", "Dropper",
    "Adware", "Spyware", "Injector", "Banker", "Keylogger",
)
_FILE_WORDS = (
    "Win32", "Linux", "MSIL", "JS", "VBS", "HTML", "Java", "AndroidOS",
)
_GENERIC_WORDS = ("Generic", "Suspicious", "Agent", "Malware", "Unknown", "Variant")

_SYLLABLES = (
    "ba", "ce", "di", "fo", "gu", "ha", "ki", "lo", "mu", "ne",
    "po", "qua", "ri", "so", "tu", "ve", "wo", "xa", "yo", "zu",
)


def _make_family_names(rng: np.random.Generator, count: int) -> List[str]:
    """Distinct pronounceable names that cannot alias each other by accident."""
    names: List[str] = []
    while len(names) < count:
        n_syll = int(rng.integers(3, 5))
        name = "".join(rng.choice(_SYLLABLES) for _ in range(n_syll))
        if len(name) < 6 or name in names:
            continue
        ok = True
        for other in names:
            if name.startswith(other) or other.startswith(name):
                ok = False
                break
            if escore(name, other) >= 0.6:
                ok = False
                break
        if ok:
            names.append(name)
    return names


@dataclass(frozen=True)
class ConfusionProfile:
    """Per-annotator behavior: accuracy, detection rate, family-emission rate.

    Annotators below 0.5 accuracy share a systematic family-confusion map
    (with probability partner_bias a wrong vote goes to the true family's
    fixed partner), which is what correlated low-quality engines look like.
    """

    accuracies: Tuple[float, ...]
    detect_rates: Tuple[float, ...]
    family_rates: Tuple[float, ...]
    partner_bias: float = 0.75

    def validate(self) -> None:
        if not self.accuracies:
            raise ConfigError("confusion profile has no annotators")
        for name in ("accuracies", "detect_rates", "family_rates"):
            values = getattr(self, name)
            if len(values) != len(self.accuracies):
                raise ConfigError(f"{name} length mismatch in confusion profile")
            if any(not 0.0 <= v <= 1.0 for v in values):
                raise ConfigError(f"{name} outside [0, 1] in confusion profile")
        if all(d == 0.0 for d in self.detect_rates):
            raise ConfigError("confusion profile can never produce a detection")


def make_confusion_profile(name: str, n_annotators: int, seed: int = 0) -> ConfusionProfile:
    """Named presets: identity, uniform:<p>, heterogeneous."""
    rng = np.random.default_rng(seed)
    if name == "identity":
        return ConfusionProfile(
            accuracies=(1.0,) * n_annotators,
            detect_rates=(1.0,) * n_annotators,
            family_rates=(1.0,) * n_annotators,
        )
    if name.startswith("uniform:"):
        p = float(name.split(":", 1)[1])
        if not 0.0 <= p <= 1.0:
            raise ConfigError(f"uniform profile probability out of range: {p}")
        return ConfusionProfile(
            accuracies=(p,) * n_annotators,
            detect_rates=(0.9,) * n_annotators,
            family_rates=(0.9,) * n_annotators,
        )
    if name == "heterogeneous":
        # Roughly half reliable engines, half poor ones with systematic bias.
        accuracies = []
        for k in range(n_annotators):
            if k % 2 == 0:
                accuracies.append(float(rng.uniform(0.82, 0.95)))
            else:
                accuracies.append(float(rng.uniform(0.25, 0.45)))
        detect_rates = [float(rng.uniform(0.55, 0.95)) for _ in range(n_annotators)]
        family_rates = [float(rng.uniform(0.75, 0.95)) for _ in range(n_annotators)]
        return ConfusionProfile(
            accuracies=tuple(accuracies),
            detect_rates=tuple(detect_rates),
            family_rates=tuple(family_rates),
        )
    raise ConfigError(f"unknown confusion profile {name!r}")


@dataclass(frozen=True)
class AliasProfile:
    """Alias noise injected into detection strings.

    A fraction of families get a spelled variant (an appended character or a
    common substring) that annotators emit instead of the true name at
    `variant_rate`.
    """

    variant_fraction: float = 0.0
    variant_rate: float = 0.4

    def validate(self) -> None:
        if not 0.0 <= self.variant_fraction <= 1.0:
            raise ConfigError("variant_fraction outside [0, 1]")
        if not 0.0 <= self.variant_rate <= 1.0:
            raise ConfigError("variant_rate outside [0, 1]")


def make_alias_profile(name: str) -> AliasProfile:
    if name in ("none", ""):
        return AliasProfile(variant_fraction=0.0)
    if name.startswith("trivial:"):
        return AliasProfile(variant_fraction=float(name.split(":", 1)[1]))
    raise ConfigError(f"unknown alias profile {name!r}")


@dataclass
class SynthResult:
    corpus_path: str
    truth_path: str
    alias_groups_path: Optional[str]
    confusions_path: Optional[str]
    n_reports: int
    families: Tuple[str, ...]
    annotators: Tuple[str, ...]


def _hash_for(seed: int, index: int) -> str:
    return hashlib.sha256(f"{seed}:{index}".encode()).hexdigest()


def synth_generate(
    seed: int,
    n_reports: int,
    n_families: int,
    n_annotators: int,
    confusion_profile="heterogeneous",
    alias_profile="none",
    corpus_path="synth_corpus.jsonl",
    truth_path="synth_truth.jsonl",
    confusions_path: Optional[str] = None,
) -> SynthResult:
    """Emit a parseable scan-report corpus plus ground truth.

    Detection strings use the bundled demo rulebook's structures, so the
    two-pass pipeline parses them without extra configuration.
    """
    if n_reports < 1 or n_families < 1 or n_annotators < 1:
        raise ConfigError("n_reports, n_families, and n_annotators must be positive")
    if n_annotators > len(DEMO_AV_POOL):
        raise ConfigError(
            f"at most {len(DEMO_AV_POOL)} annotators have demo rulebook coverage; "
            "supply a custom rulebook for more"
        )
    if isinstance(confusion_profile, str):
        confusion_profile = make_confusion_profile(confusion_profile, n_annotators, seed)
    confusion_profile.validate()
    if len(confusion_profile.accuracies) != n_annotators:
        raise ConfigError("confusion profile size does not match n_annotators")
    if isinstance(alias_profile, str):
        alias_profile = make_alias_profile(alias_profile)
    alias_profile.validate()

    rng = np.random.default_rng(seed)
    av_names = DEMO_AV_POOL[:n_annotators]
    families = _make_family_names(rng, n_families)

    # Long-tailed family frequencies: new families get rarer down the rank.
    weights = 1.0 / np.arange(1, n_families + 1) ** 0.7
    weights /= weights.sum()
    truth_ids = rng.choice(n_families, size=n_reports, p=weights)

    # Shared systematic confusion for low-accuracy annotators.
    partner = np.roll(np.arange(n_families), 1) if n_families > 1 else np.arange(1)

    variant_of: Dict[int, str] = {}
    n_variants = int(round(alias_profile.variant_fraction * n_families))
    for j in range(n_variants):
        base = families[j]
        if j % 2 == 0:
            variant_of[j] = base + rng.choice(list("0129xz"))
        else:
            variant_of[j] = base + DEFAULT_ALIAS_SUBSTRINGS[j % len(DEFAULT_ALIAS_SUBSTRINGS)]

    def suffix() -> str:
        return "".join(rng.choice(list("abcdefghijklmnopqrstuvwxyz"))
                       for _ in range(int(rng.integers(2, 5))))

    def detection_for(av: str, family_token: Optional[str]):
        template, generic_ok = _TEMPLATES[av]
        if family_token is None:
            if not generic_ok:
                return None  # detected, but no usable label
            family_token = str(rng.choice(_GENERIC_WORDS))
        return template.format(
            beh=rng.choice(_BEH_WORDS),
            file=rng.choice(_FILE_WORDS),
            fam=family_token,
            suf=suffix(),
        )

    with open(corpus_path, "w", encoding="utf-8") as corpus_fd:
        for i in range(n_reports):
            true_j = int(truth_ids[i])
            scans = {}
            for k, av in enumerate(av_names):
                if rng.random() >= confusion_profile.detect_rates[k]:
                    scans[av] = {"detected": False, "result": None}
                    continue
                if rng.random() >= confusion_profile.family_rates[k]:
                    label = detection_for(av, None)
                    scans[av] = {"detected": True, "result": label}
                    continue
                if rng.random() < confusion_profile.accuracies[k]:
                    vote_j = true_j
                elif (
                    confusion_profile.accuracies[k] < 0.5
                    and n_families > 1
                    and rng.random() < confusion_profile.partner_bias
                ):
                    vote_j = int(partner[true_j])
                else:
                    vote_j = int(rng.integers(0, n_families))
                    if n_families > 1 and vote_j == true_j:
                        vote_j = (vote_j + 1) % n_families
                token = families[vote_j]
                if vote_j in variant_of and rng.random() < alias_profile.variant_rate:
                    token = variant_of[vote_j]
                label = detection_for(av, token.capitalize())
                scans[av] = {"detected": True, "result": label}
            record = {"sha256": _hash_for(seed, i), "scans": scans}
            corpus_fd.write(json.dumps(record, sort_keys=True) + "\n")

    with open(truth_path, "w", encoding="utf-8") as truth_fd:
        for i in range(n_reports):
            truth_fd.write(
                json.dumps(
                    {"sha256": _hash_for(seed, i), "family": families[int(truth_ids[i])]}
                )
                + "\n"
            )

    alias_groups_path = None
    if variant_of:
        alias_groups_path = f"{truth_path}.aliases.txt"
        with open(alias_groups_path, "w", encoding="utf-8") as fd:
            for j in sorted(variant_of):
                fd.write(f"{families[j]},{variant_of[j].lower()}\n")

    if confusions_path:
        payload = {
            av: {
                "accuracy": confusion_profile.accuracies[k],
                "detect_rate": confusion_profile.detect_rates[k],
                "family_rate": confusion_profile.family_rates[k],
                "partner_map": (
                    {families[j]: families[int(partner[j])] for j in range(n_families)}
                    if confusion_profile.accuracies[k] < 0.5
                    else None
                ),
            }
            for k, av in enumerate(av_names)
        }
        with open(confusions_path, "w", encoding="utf-8") as fd:
            json.dump(payload, fd, indent=2, sort_keys=True)

    return SynthResult(
        corpus_path=str(corpus_path),
        truth_path=str(truth_path),
        alias_groups_path=alias_groups_path,
        confusions_path=str(confusions_path) if confusions_path else None,
        n_reports=n_reports,
        families=tuple(families),
        annotators=tuple(av_names),
    )


def generate_vote_instance(
    seed: int,
    n_reports: int,
    n_families: int,
    n_annotators: int,
    accuracies: Optional[Sequence[float]] = None,
    detect_rate: float = 0.8,
    partner_bias: float = 0.6,
    confusion_window: int = 25,
):
    """Vote-level synthetic data: (per-report vote dicts, true family names).

    Bypasses detection-string generation; names are fam####/av## strings.
    Wrong votes land within `confusion_window` ranks of the true family,
    mirroring real corpora where most family pairs never co-occur.
    """
    rng = np.random.default_rng(seed)
    if accuracies is None:
        accuracies = [0.9 if k % 2 == 0 else 0.35 for k in range(n_annotators)]
    if len(accuracies) != n_annotators:
        raise ConfigError("accuracies length does not match n_annotators")
    families = [f"fam{j:04d}" for j in range(n_families)]
    annotators = [f"av{k:02d}" for k in range(n_annotators)]
    partner = np.roll(np.arange(n_families), 1) if n_families > 1 else np.arange(1)
    truth_ids = rng.integers(0, n_families, size=n_reports)
    window = max(2, min(n_families, confusion_window))

    votes = []
    truth = []
    for i in range(n_reports):
        true_j = int(truth_ids[i])
        row = {}
        for k in range(n_annotators):
            if rng.random() >= detect_rate:
                continue
            if rng.random() < accuracies[k]:
                vote_j = true_j
            elif accuracies[k] < 0.5 and n_families > 1 and rng.random() < partner_bias:
                vote_j = int(partner[true_j])
            else:
                vote_j = (true_j + int(rng.integers(1, window))) % n_families
                if vote_j == true_j:
                    vote_j = (vote_j + 1) % n_families
            row[annotators[k]] = families[vote_j]
        votes.append(row)
        truth.append(families[true_j])
    return votes, truth


def complete_pair_coverage(votes, n_families: int, annotators: Sequence[str]):
    """Append two-vote reports so every family pair co-occurs at least once.

    Returns the extended vote list (the input list is not modified). Used to
    build instances whose sparse confusion support matches a dense layout.
    """
    if len(annotators) < 2:
        raise ConfigError("need at least two annotators to cover pairs")
    families = sorted({f for row in votes for f in row.values()})
    seen = set()
    for row in votes:
        fams = sorted(set(row.values()))
        for a in range(len(fams)):
            for b in range(a + 1, len(fams)):
                seen.add((fams[a], fams[b]))
    extended = list(votes)
    for a in range(len(families)):
        for b in range(a + 1, len(families)):
            pair = (families[a], families[b])
            if pair not in seen:
                extended.append({annotators[0]: pair[0], annotators[1]: pair[1]})
    return extended


@dataclass
class ProbeRow:
    size: int
    build_seconds: float
    inference_seconds: float
    iterations: int


@dataclass
class ProbeResult:
    rows: List[ProbeRow]
    quadratic_fit: Optional[Tuple[float, float, float]]

    def table(self) -> str:
        lines = ["size\tbuild_s\tinfer_s\titerations"]
        for row in self.rows:
            lines.append(
                f"{row.size}\t{row.build_seconds:.3f}\t{row.inference_seconds:.3f}\t{row.iterations}"
            )
        return "\n".join(lines)


def scaling_probe(
    sizes: Sequence[int],
    seed: int = 7,
    n_annotators: int = 20,
    max_iter: int = 20,
    tol: float = 0.0,
    repeats: int = 2,
) -> ProbeResult:
    """Measure inference wall time across corpus sizes.

    Family count grows with the square root of size, mimicking the slowing
    rate of new families in real corpora. Iteration count is pinned so the
    per-size work is comparable. Each size reports the fastest of `repeats`
    runs to damp scheduler noise.
    """
    if not sizes:
        raise ConfigError("scaling probe needs at least one size")
    rows = []
    for size in sizes:
        n_families = max(10, int(2 * size ** 0.5))
        votes, _truth = generate_vote_instance(
            seed, size, n_families, n_annotators, detect_rate=0.7
        )
        t0 = time.perf_counter()
        instance, _excluded = build_instance(votes)
        build_s = time.perf_counter() - t0
        run_inference(instance, tol=tol, max_iter=1)  # warm plan and page cache
        best = None
        iterations = 0
        for _ in range(max(1, repeats)):
            t0 = time.perf_counter()
            result = run_inference(instance, tol=tol, max_iter=max_iter)
            elapsed = time.perf_counter() - t0
            iterations = result.iterations
            best = elapsed if best is None else min(best, elapsed)
        rows.append(
            ProbeRow(size=int(size), build_seconds=build_s,
                     inference_seconds=best, iterations=iterations)
        )
    fit = None
    if len(rows) >= 3:
        xs = np.array([r.size for r in rows], dtype=float)
        ys = np.array([r.inference_seconds for r in rows])
        fit = tuple(float(c) for c in np.polyfit(xs, ys, 2))
    return ProbeResult(rows=rows, quadratic_fit=fit)
