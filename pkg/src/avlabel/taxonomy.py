"""Per-token category statistics and permanent category assignment.

After the first parsing pass, every token's category assignments are tallied
and reduced to one permanent lexical category. Family tokens without enough
independent AV support are downgraded to UNK unless alias resolution ties
them to a well-supported family.
"""

from __future__ import annotations

import pickle
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Optional

from .parsing import LexicalCategory

_AMBIGUOUS = (LexicalCategory.PRE, LexicalCategory.UNK)

# Deterministic order for breaking exact count ties between categories.
_CATEGORY_ORDER = {cat: idx for idx, cat in enumerate(LexicalCategory)}


@dataclass
class TokenStats:
    """Accumulated token statistics from first-pass parsing.

    Shards merge by addition and set-union, so accumulation can run over
    report chunks in any grouping.
    """

    counts: Dict[str, Counter] = field(default_factory=dict)
    av_support: Dict[str, set] = field(default_factory=dict)
    report_counts: Counter = field(default_factory=Counter)

    def observe_report(self, av_items) -> None:
        """Record one report's parses: av_items maps av_name -> [(token, cat)]."""
        seen_in_report = set()
        for av_name, items in av_items.items():
            for token, category in items:
                counter = self.counts.get(token)
                if counter is None:
                    counter = self.counts[token] = Counter()
                    self.av_support[token] = set()
                counter[category] += 1
                self.av_support[token].add(av_name)
                seen_in_report.add(token)
        for token in seen_in_report:
            self.report_counts[token] += 1

    def merge(self, other: "TokenStats") -> None:
        for token, counter in other.counts.items():
            mine = self.counts.get(token)
            if mine is None:
                self.counts[token] = Counter(counter)
                self.av_support[token] = set(other.av_support[token])
            else:
                mine.update(counter)
                self.av_support[token] |= other.av_support[token]
        self.report_counts.update(other.report_counts)

    def spill(self, path) -> None:
        """Write this shard to disk and reset to empty."""
        with open(path, "wb") as fd:
            pickle.dump((self.counts, self.av_support, self.report_counts), fd)
        self.counts = {}
        self.av_support = {}
        self.report_counts = Counter()

    def absorb_spill(self, path) -> None:
        with open(path, "rb") as fd:
            counts, av_support, report_counts = pickle.load(fd)
        shard = TokenStats(counts=counts, av_support=av_support, report_counts=report_counts)
        self.merge(shard)

    def __len__(self) -> int:
        return len(self.counts)


def accumulate_stats(report_parses, stats: Optional[TokenStats] = None) -> TokenStats:
    """Accumulate stats over a stream of per-report parse maps."""
    if stats is None:
        stats = TokenStats()
    for av_items in report_parses:
        stats.observe_report(av_items)
    return stats


def finalize_category(token, stats: TokenStats, dominance: float = 0.9) -> LexicalCategory:
    """Pick the permanent lexical category for one token.

    A category wins when it holds at least `dominance` of the informative
    (non-PRE, non-UNK) assignments. With no winner the token falls back to
    PRE when it was ever assigned PRE, else UNK.
    """
    counter = stats.counts.get(token, Counter())
    informative = {
        cat: n for cat, n in counter.items() if cat not in _AMBIGUOUS and n > 0
    }
    total = sum(informative.values())
    if total > 0:
        best = min(informative.items(), key=lambda kv: (-kv[1], _CATEGORY_ORDER[kv[0]]))
        if best[1] >= dominance * total:
            return best[0]
    if counter.get(LexicalCategory.PRE, 0) > 0:
        return LexicalCategory.PRE
    return LexicalCategory.UNK


class Taxonomy:
    """Immutable-by-convention map from token to permanent lexical category."""

    def __init__(self, assignments: Optional[Dict[str, LexicalCategory]] = None):
        self._assignments = dict(assignments or {})

    def get(self, token: str) -> Optional[LexicalCategory]:
        return self._assignments.get(token)

    def category_for(self, token: str) -> LexicalCategory:
        """Permanent category, defaulting unseen tokens to PRE."""
        return self._assignments.get(token, LexicalCategory.PRE)

    def tokens_of(self, category: LexicalCategory) -> list:
        return [t for t, c in self._assignments.items() if c is category]

    def items(self):
        return self._assignments.items()

    def replacing(self, updates: Dict[str, LexicalCategory]) -> "Taxonomy":
        merged = dict(self._assignments)
        merged.update(updates)
        return Taxonomy(merged)

    def __len__(self) -> int:
        return len(self._assignments)

    def __contains__(self, token: str) -> bool:
        return token in self._assignments

    def write(self, path) -> None:
        """Emit `<token>\\t<CATEGORY>` lines sorted by token."""
        with open(path, "w", encoding="utf-8") as fd:
            for token in sorted(self._assignments):
                fd.write(f"{token}\t{self._assignments[token].value}\n")


def finalize_taxonomy(stats: TokenStats, dominance: float = 0.9) -> Taxonomy:
    """Fix a permanent category for every token seen in the first pass."""
    return Taxonomy(
        {token: finalize_category(token, stats, dominance) for token in stats.counts}
    )


def downgrade_rare_fams(
    taxonomy: Taxonomy,
    stats: TokenStats,
    alias_map,
    cluster_map,
    min_clusters: int = 3,
) -> Taxonomy:
    """Downgrade weakly supported family tokens to UNK.

    A family token survives when its supporting AVs span at least
    `min_clusters` unrelated clusters, or when its alias group contains a
    member that does.
    """
    fam_tokens = taxonomy.tokens_of(LexicalCategory.FAM)
    strong_roots = set()
    cluster_counts = {}
    for token in fam_tokens:
        avs = stats.av_support.get(token, ())
        n_clusters = len({cluster_map.cluster_of(av) for av in avs})
        cluster_counts[token] = n_clusters
        if n_clusters >= min_clusters:
            strong_roots.add(alias_map.find(token))
    updates = {
        token: LexicalCategory.UNK
        for token in fam_tokens
        if alias_map.find(token) not in strong_roots
    }
    return taxonomy.replacing(updates)
