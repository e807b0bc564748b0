"""Correlated-AV collapsing, family vote extraction, and tagging."""

import pytest
from hypothesis import given, strategies as st

from avlabel.errors import ConfigError
from avlabel.parsing import LexicalCategory as Cat
from avlabel.votes import (
    AVClusterMap,
    Tag,
    TagThresholds,
    collapse_correlated,
    extract_family_votes,
    extract_tags,
    normalize_tag,
)

CLUSTERS = AVClusterMap([["X", "Y"], ["P", "Q"]])


class TestClusterMap:
    def test_mapped_and_singleton(self):
        assert CLUSTERS.cluster_of("X") == CLUSTERS.cluster_of("Y")
        assert CLUSTERS.cluster_of("Z") == "Z"
        assert CLUSTERS.cluster_of("X") != CLUSTERS.cluster_of("P")

    def test_duplicate_membership_rejected(self):
        with pytest.raises(ConfigError):
            AVClusterMap([["A", "B"], ["B", "C"]])

    def test_load(self, tmp_path):
        path = tmp_path / "clusters.txt"
        path.write_text("# comment\nA,B\nC, D\n", encoding="utf-8")
        cm = AVClusterMap.load(path)
        assert cm.cluster_of("A") == cm.cluster_of("B")
        assert cm.cluster_of("C") == cm.cluster_of("D")
        assert cm.cluster_of("A") != cm.cluster_of("C")


class TestCollapse:
    def test_same_token_in_cluster_collapsed(self):
        items = {"X": [("fam", Cat.FAM)], "Y": [("fam", Cat.FAM)]}
        deduped = collapse_correlated(items, CLUSTERS)
        assert deduped["X"] == [("fam", Cat.FAM)]
        assert deduped["Y"] == []

    def test_different_tokens_in_cluster_survive(self):
        items = {"X": [("famf", Cat.FAM)], "Y": [("famg", Cat.FAM)]}
        deduped = collapse_correlated(items, CLUSTERS)
        assert deduped["X"] == [("famf", Cat.FAM)]
        assert deduped["Y"] == [("famg", Cat.FAM)]

    def test_unrelated_avs_unaffected(self):
        items = {"X": [("fam", Cat.FAM)], "Z": [("fam", Cat.FAM)]}
        deduped = collapse_correlated(items, CLUSTERS)
        assert deduped["X"] == [("fam", Cat.FAM)]
        assert deduped["Z"] == [("fam", Cat.FAM)]

    def test_idempotent(self):
        items = {
            "X": [("fam", Cat.FAM), ("trojan", Cat.BEH)],
            "Y": [("trojan", Cat.BEH), ("other", Cat.FAM)],
            "Z": [("fam", Cat.FAM)],
        }
        once = collapse_correlated(items, CLUSTERS)
        twice = collapse_correlated(once, CLUSTERS)
        assert once == twice

    def test_duplicate_token_within_av_deduped(self):
        items = {"Z": [("fam", Cat.FAM), ("fam", Cat.FAM)]}
        deduped = collapse_correlated(items, CLUSTERS)
        assert deduped["Z"] == [("fam", Cat.FAM)]

    @given(st.permutations(["X", "Y"]))
    def test_renaming_within_cluster_keeps_token_multiset(self, order):
        base_items = [[("fam", Cat.FAM), ("trojan", Cat.BEH)], [("fam", Cat.FAM)]]
        items = {av: base_items[i] for i, av in enumerate(order)}
        deduped = collapse_correlated(items, CLUSTERS)
        surviving = sorted(t for items in deduped.values() for t, _c in items)
        assert surviving == ["fam", "trojan"]


class TestFamilyVotes:
    def test_first_family_token_wins(self):
        deduped = {"A": [("zeus", Cat.FAM), ("citadel", Cat.FAM)]}
        assert extract_family_votes(deduped) == {"A": "zeus"}

    def test_no_family_token_abstains(self):
        deduped = {"A": [("trojan", Cat.BEH)], "B": []}
        assert extract_family_votes(deduped) == {}

    def test_fig_style_report(self):
        deduped = {
            f"AV{i}": [("andromeda", Cat.FAM), ("trojan", Cat.BEH)] for i in range(1, 7)
        }
        deduped["AV7"] = [("trojan", Cat.BEH), ("backdoor", Cat.BEH)]
        deduped["AV8"] = []
        deduped["AV9"] = [("zbot", Cat.FAM)]
        votes = extract_family_votes(deduped)
        assert sum(1 for fam in votes.values() if fam == "andromeda") == 6
        assert votes["AV9"] == "zbot"
        assert "AV7" not in votes and "AV8" not in votes


class TestTags:
    def test_threshold_met(self):
        deduped = {f"A{i}": [("downloader", Cat.BEH)] for i in range(6)}
        tags = extract_tags(deduped, TagThresholds())
        assert tags == [Tag("downloader", Cat.BEH, 6)]

    def test_threshold_not_met(self):
        deduped = {f"A{i}": [("downloader", Cat.BEH)] for i in range(4)}
        assert extract_tags(deduped, TagThresholds()) == []

    def test_vuln_threshold_one(self):
        deduped = {"A": [("cve_2017_0144", Cat.VULN)]}
        tags = extract_tags(deduped, TagThresholds())
        assert tags == [Tag("cve_2017_0144", Cat.VULN, 1)]

    def test_family_tokens_not_tagged(self):
        deduped = {f"A{i}": [("zeus", Cat.FAM)] for i in range(9)}
        assert extract_tags(deduped, TagThresholds()) == []

    def test_support_bounded_by_cluster_count(self):
        deduped = {f"A{i}": [("downloader", Cat.BEH)] for i in range(7)}
        tags = extract_tags(deduped, TagThresholds())
        assert tags[0].support <= len(deduped)

    def test_sorted_by_support_then_name(self):
        deduped = {f"A{i}": [("worm", Cat.BEH), ("js", Cat.FILE)] for i in range(5)}
        deduped["A5"] = [("worm", Cat.BEH)]
        tags = extract_tags(deduped, TagThresholds())
        assert [t.tag for t in tags] == ["worm", "js"]

    def test_threshold_validation(self):
        with pytest.raises(ConfigError):
            TagThresholds(beh=0).validate()


class TestNormalizeTag:
    def test_dash_to_underscore(self):
        assert normalize_tag("MS08-067") == "ms08_067"

    def test_case_fold(self):
        assert normalize_tag("Downloader") == "downloader"

    def test_identity_on_normalized(self):
        assert normalize_tag("a_b") == "a_b"

    @given(st.text(min_size=1, max_size=20))
    def test_output_alphabet(self, raw):
        normalized = normalize_tag(raw)
        assert all(c.islower() or c.isdigit() or c == "_" for c in normalized)
