"""Per-report vote assembly: correlated-AV collapsing, family votes, tags.

Related AV products (shared engines, acquisitions, copied results) produce
correlated detections. Within one report, each (cluster, token) pair keeps a
single occurrence so that a cluster contributes one vote per tag or family.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

from .errors import ConfigError
from .parsing import LexicalCategory

TAG_CATEGORIES = frozenset(
    {
        LexicalCategory.BEH,
        LexicalCategory.FILE,
        LexicalCategory.PACK,
        LexicalCategory.VULN,
        LexicalCategory.GRP,
    }
)

_NON_ALNUM_RE = re.compile(r"[^0-9a-z]")


class AVClusterMap:
    """Maps AV product names to correlation clusters.

    AVs absent from the map form singleton clusters keyed by their own name.
    """

    def __init__(self, clusters: Sequence[Sequence[str]] = ()):
        self._cluster_of: Dict[str, str] = {}
        for idx, members in enumerate(clusters):
            members = [m for m in members if m]
            if not members:
                continue
            label = f"cluster{idx}"
            for av in members:
                if av in self._cluster_of:
                    raise ConfigError(f"AV {av!r} appears in more than one cluster")
                self._cluster_of[av] = label

    def cluster_of(self, av_name: str) -> str:
        return self._cluster_of.get(av_name, av_name)

    def __len__(self) -> int:
        return len(self._cluster_of)

    @classmethod
    def load(cls, path) -> "AVClusterMap":
        """One cluster per line, comma-separated AV names, '#' comments."""
        clusters = []
        with open(path, "r", encoding="utf-8") as fd:
            for line in fd:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                clusters.append([part.strip() for part in line.split(",")])
        return cls(clusters)


@dataclass(frozen=True)
class TagThresholds:
    """Minimum unrelated-cluster support per tag category."""

    beh: int = 5
    file: int = 5
    vuln: int = 1
    pack: int = 1
    grp: int = 1

    def for_category(self, category: LexicalCategory) -> int:
        return getattr(self, category.value.lower())

    def validate(self) -> None:
        for name in ("beh", "file", "vuln", "pack", "grp"):
            if getattr(self, name) < 1:
                raise ConfigError(f"tag threshold for {name.upper()} must be >= 1")


@dataclass(frozen=True)
class Tag:
    tag: str
    category: LexicalCategory
    support: int


def collapse_correlated(av_items, clusters: AVClusterMap):
    """Deduplicate token occurrences emitted by correlated AV products.

    av_items maps av_name -> ordered [(token, category)] from second-pass
    parsing with canonical token names. For each (cluster, token) pair the
    single surviving occurrence belongs to the alphabetically first AV in
    the cluster that emitted it, at its first position. Idempotent.
    """
    owner = {}
    for av in sorted(av_items):
        cluster = clusters.cluster_of(av)
        for token, _category in av_items[av]:
            owner.setdefault((cluster, token), av)
    out = {}
    for av, items in av_items.items():
        cluster = clusters.cluster_of(av)
        kept = []
        seen = set()
        for token, category in items:
            if owner[(cluster, token)] != av or token in seen:
                continue
            seen.add(token)
            kept.append((token, category))
        out[av] = kept
    return out


def extract_family_votes(deduped) -> Dict[str, str]:
    """Each AV's first family token, in detection order, becomes its vote.

    AVs without a family token abstain and are absent from the result.
    """
    votes = {}
    for av, items in deduped.items():
        for token, category in items:
            if category is LexicalCategory.FAM:
                votes[av] = token
                break
    return votes


def extract_tags(
    deduped,
    thresholds: TagThresholds,
    clusters: Optional[AVClusterMap] = None,
) -> List[Tag]:
    """Tags supported by at least the per-category number of unrelated clusters.

    Post-collapse, each (cluster, token) pair occurs at most once, so the
    occurrence count of a token equals its distinct-cluster support.
    """
    support = Counter()
    for _av, items in deduped.items():
        for token, category in items:
            if category in TAG_CATEGORIES:
                support[(token, category)] += 1
    tags = [
        Tag(tag=normalize_tag(token), category=category, support=count)
        for (token, category), count in support.items()
        if count >= thresholds.for_category(category)
    ]
    tags.sort(key=lambda t: (-t.support, t.tag))
    return tags


def normalize_tag(token: str) -> str:
    """Lowercase and replace every non-alphanumeric character with '_'."""
    return _NON_ALNUM_RE.sub("_", token.lower())
