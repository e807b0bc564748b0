"""Token statistics, permanent category assignment, and family downgrading."""

from collections import Counter

from hypothesis import given, strategies as st

from avlabel.aliasing import AliasMap
from avlabel.parsing import LexicalCategory as Cat
from avlabel.taxonomy import (
    TokenStats,
    accumulate_stats,
    downgrade_rare_fams,
    finalize_category,
    finalize_taxonomy,
)
from avlabel.votes import AVClusterMap


def _stats_with(token, counts, avs=("AV1",), report_count=1):
    stats = TokenStats()
    stats.counts[token] = Counter(counts)
    stats.av_support[token] = set(avs)
    stats.report_counts[token] = report_count
    return stats


class TestAccumulate:
    def test_shard_merge_is_additive(self):
        a = _stats_with("backdoor", {Cat.BEH: 600})
        b = _stats_with("backdoor", {Cat.BEH: 400}, avs=("AV2",))
        a.merge(b)
        assert a.counts["backdoor"][Cat.BEH] == 1000
        assert a.av_support["backdoor"] == {"AV1", "AV2"}

    def test_absent_token_absent_from_stats(self):
        stats = accumulate_stats([{"AV1": [("foo", Cat.FAM)]}])
        assert "bar" not in stats.counts

    def test_token_twice_in_one_report(self):
        stats = accumulate_stats(
            [{"AV1": [("foo", Cat.FAM), ("foo", Cat.FAM)]}]
        )
        assert stats.counts["foo"][Cat.FAM] == 2
        assert stats.report_counts["foo"] == 1

    def test_merge_order_invariance(self):
        shards = [
            _stats_with("tok", {Cat.BEH: 3}, avs=("AV1",), report_count=3),
            _stats_with("tok", {Cat.FAM: 2}, avs=("AV2",), report_count=2),
            _stats_with("tok", {Cat.PRE: 5}, avs=("AV3",), report_count=5),
        ]
        forward = TokenStats()
        for s in shards:
            forward.merge(s)
        backward = TokenStats()
        for s in reversed(shards):
            backward.merge(s)
        assert forward.counts == backward.counts
        assert forward.av_support == backward.av_support
        assert forward.report_counts == backward.report_counts

    def test_spill_roundtrip(self, tmp_path):
        stats = _stats_with("tok", {Cat.BEH: 7}, report_count=7)
        path = tmp_path / "stats.pkl"
        stats.spill(path)
        assert len(stats) == 0
        stats.absorb_spill(path)
        assert stats.counts["tok"][Cat.BEH] == 7


class TestFinalizeCategory:
    def test_dominant_behavior_example(self):
        stats = _stats_with("backdoor", {Cat.BEH: 1000, Cat.PRE: 200, Cat.FAM: 5})
        assert finalize_category("backdoor", stats) is Cat.BEH

    def test_tie_falls_back(self):
        stats = _stats_with("tok", {Cat.FAM: 50, Cat.BEH: 50})
        assert finalize_category("tok", stats) is Cat.UNK

    def test_tie_with_pre_count_falls_back_to_pre(self):
        stats = _stats_with("tok", {Cat.FAM: 50, Cat.BEH: 50, Cat.PRE: 1})
        assert finalize_category("tok", stats) is Cat.PRE

    def test_only_pre_counts(self):
        stats = _stats_with("tok", {Cat.PRE: 30})
        assert finalize_category("tok", stats) is Cat.PRE

    def test_only_unk_counts(self):
        stats = _stats_with("tok", {Cat.UNK: 3})
        assert finalize_category("tok", stats) is Cat.UNK

    def test_boundary_is_inclusive(self):
        stats = _stats_with("tok", {Cat.FAM: 9, Cat.BEH: 1})
        assert finalize_category("tok", stats, dominance=0.9) is Cat.FAM

    def test_just_below_boundary(self):
        stats = _stats_with("tok", {Cat.FAM: 89, Cat.BEH: 11})
        assert finalize_category("tok", stats, dominance=0.9) is Cat.UNK
        stats.counts["tok"][Cat.PRE] = 1
        assert finalize_category("tok", stats, dominance=0.9) is Cat.PRE

    @given(
        st.dictionaries(
            st.sampled_from([Cat.FAM, Cat.BEH, Cat.FILE, Cat.PRE, Cat.UNK]),
            st.integers(min_value=0, max_value=100),
            min_size=1,
        ),
        st.floats(min_value=0.5, max_value=0.99),
        st.floats(min_value=0.0, max_value=0.49),
    )
    def test_raising_dominance_never_creates_informative(self, counts, dom, bump):
        stats = _stats_with("tok", counts)
        low = finalize_category("tok", stats, dominance=dom)
        high = finalize_category("tok", stats, dominance=min(1.0, dom + bump))
        if low in (Cat.PRE, Cat.UNK):
            assert high in (Cat.PRE, Cat.UNK)


class TestDowngrade:
    CLUSTERS = AVClusterMap([["AV1", "AV2"], ["AV3", "AV4"]])

    def _taxonomy_and_stats(self, support_by_token):
        assignments = {}
        stats = TokenStats()
        for token, avs in support_by_token.items():
            assignments[token] = Cat.FAM
            stats.counts[token] = Counter({Cat.FAM: len(avs)})
            stats.av_support[token] = set(avs)
            stats.report_counts[token] = len(avs)
        return finalize_taxonomy(stats), stats

    def test_single_cluster_support_downgraded(self):
        tax, stats = self._taxonomy_and_stats({"rare": {"AV1", "AV2"}})
        out = downgrade_rare_fams(tax, stats, AliasMap(), self.CLUSTERS)
        assert out.get("rare") is Cat.UNK

    def test_alias_to_strong_family_survives(self):
        tax, stats = self._taxonomy_and_stats(
            {"weak": {"AV1", "AV3"}, "strong": {"AV1", "AV3", "AV5"}}
        )
        alias_map = AliasMap()
        alias_map.union("weak", "strong")
        out = downgrade_rare_fams(tax, stats, alias_map, self.CLUSTERS)
        assert out.get("weak") is Cat.FAM
        assert out.get("strong") is Cat.FAM

    def test_broad_support_survives(self):
        tax, stats = self._taxonomy_and_stats(
            {"common": {"AV1", "AV3", "AV5", "AV6", "AV7"}}
        )
        out = downgrade_rare_fams(tax, stats, AliasMap(), self.CLUSTERS)
        assert out.get("common") is Cat.FAM

    def test_weak_alias_group_fully_downgraded(self):
        tax, stats = self._taxonomy_and_stats(
            {"weak1": {"AV1", "AV3"}, "weak2": {"AV2", "AV4"}}
        )
        alias_map = AliasMap()
        alias_map.union("weak1", "weak2")
        out = downgrade_rare_fams(tax, stats, alias_map, self.CLUSTERS)
        assert out.get("weak1") is Cat.UNK
        assert out.get("weak2") is Cat.UNK

    def test_survivors_have_strong_group_member(self):
        tax, stats = self._taxonomy_and_stats(
            {
                "a": {"AV1", "AV3", "AV5"},
                "b": {"AV1"},
                "c": {"AV2"},
            }
        )
        alias_map = AliasMap()
        alias_map.union("b", "a")
        out = downgrade_rare_fams(tax, stats, alias_map, self.CLUSTERS)
        for token, category in out.items():
            if category is Cat.FAM:
                group = {
                    t for t in ("a", "b", "c")
                    if alias_map.find(t) == alias_map.find(token)
                }
                best = max(
                    len({self.CLUSTERS.cluster_of(av) for av in stats.av_support[t]})
                    for t in group
                )
                assert best >= 3
        assert out.get("c") is Cat.UNK
