"""End-to-end pipeline behavior, evaluation, and the CLI surface."""

import json

import pytest
from click.testing import CliRunner

from avlabel.cli import main as cli_main
from avlabel.errors import ConfigError, StageError
from avlabel.parsing import LexicalCategory as Cat
from avlabel.pipeline import (
    GroundTruth,
    LabelOutput,
    PipelineConfig,
    evaluate,
    load_ground_truth,
    run_pipeline,
)
from avlabel.aliasing import AliasMap

from helpers import alias_demo_corpus, fake_hash, report_record, write_jsonl


@pytest.fixture(scope="module")
def demo_corpus(tmp_path_factory):
    path = tmp_path_factory.mktemp("corpus") / "demo.jsonl"
    records, fig_hash = alias_demo_corpus()
    write_jsonl(path, records)
    return path, fig_hash, len(records)


@pytest.fixture(scope="module")
def demo_result(demo_corpus):
    path, _fig, _n = demo_corpus
    return run_pipeline(path, PipelineConfig())


class TestEndToEnd:
    def test_output_count_matches_input(self, demo_corpus, demo_result):
        _path, _fig, n_records = demo_corpus
        assert len(demo_result.outputs) == n_records

    def test_alias_group_resolves_to_andromeda(self, demo_result):
        amap = demo_result.alias_map
        for token in ("androm", "gamarue", "wauchos"):
            assert amap.resolve(token) == "andromeda"

    def test_fig_report_labeled_andromeda(self, demo_corpus, demo_result):
        _path, fig_hash, _n = demo_corpus
        out = next(o for o in demo_result.outputs if o.file_hash == fig_hash)
        assert out.family == "andromeda"
        assert out.num_detected == 12
        assert out.num_scanned == 14
        assert out.confidence > 0.5

    def test_fig_report_tags(self, demo_corpus, demo_result):
        _path, fig_hash, _n = demo_corpus
        out = next(o for o in demo_result.outputs if o.file_hash == fig_hash)
        tag_names = {t.tag for t in out.tags}
        assert "trojan" in tag_names
        assert "backdoor" in tag_names
        assert "win32" in tag_names
        assert "ms08_067" in tag_names
        win32 = next(t for t in out.tags if t.tag == "win32")
        assert win32.support == 9

    def test_rare_family_downgraded_zbot_survives(self, demo_result):
        tax = demo_result.taxonomy
        assert tax.get("zbot") is Cat.FAM
        assert tax.get("andromeda") is Cat.FAM
        # aliases of a strong family stay FAM
        assert tax.get("wauchos") is Cat.FAM

    def test_candidates_canonicalized(self, demo_corpus, demo_result):
        _path, fig_hash, _n = demo_corpus
        assert set(demo_result.candidates[fig_hash]) == {"andromeda", "zbot"}

    def test_family_none_iff_confidence_zero(self, demo_result):
        for out in demo_result.outputs:
            assert (out.family is None) == (out.confidence == 0.0)

    def test_summary_has_config_and_counts(self, demo_result):
        summary = demo_result.summary
        assert summary["config"]["dominance"] == 0.9
        assert summary["config"]["vote_mode"] == "ibcc"
        assert summary["input_lines"] == summary["outputs"] + summary["malformed_lines"]
        assert "ibcc" in summary


class TestDeterminismAndModes:
    def _labels(self, result):
        return [(o.file_hash, o.family, round(o.confidence, 9)) for o in result.outputs]

    def test_rerun_identical(self, demo_corpus):
        path, _fig, _n = demo_corpus
        first = run_pipeline(path, PipelineConfig())
        second = run_pipeline(path, PipelineConfig())
        assert [o.to_json() for o in first.outputs] == [o.to_json() for o in second.outputs]

    def test_threads_do_not_change_results(self, demo_corpus, demo_result):
        path, _fig, _n = demo_corpus
        threaded = run_pipeline(path, PipelineConfig(threads=2))
        assert self._labels(threaded) == self._labels(demo_result)

    def test_memory_budget_spill_equivalent(self, demo_corpus, demo_result, tmp_path):
        path, _fig, _n = demo_corpus
        spilled = run_pipeline(
            path, PipelineConfig(memory_budget=5, temp_dir=str(tmp_path))
        )
        assert spilled.summary["spill_shards"] > 0
        assert self._labels(spilled) == self._labels(demo_result)

    def test_threads_with_spill(self, demo_corpus, demo_result, tmp_path):
        path, _fig, _n = demo_corpus
        combo = run_pipeline(
            path,
            PipelineConfig(threads=2, memory_budget=5, temp_dir=str(tmp_path)),
        )
        assert combo.summary["spill_shards"] > 0
        assert self._labels(combo) == self._labels(demo_result)

    def test_plurality_mode(self, demo_corpus, demo_result):
        path, fig_hash, _n = demo_corpus
        plur = run_pipeline(path, PipelineConfig(vote_mode="plurality"))
        out = next(o for o in plur.outputs if o.file_hash == fig_hash)
        assert out.family == "andromeda"
        assert len(plur.outputs) == len(demo_result.outputs)

    def test_taxonomy_and_alias_artifacts(self, demo_corpus, tmp_path):
        path, _fig, _n = demo_corpus
        tax_path = tmp_path / "tax.tsv"
        alias_path = tmp_path / "alias.tsv"
        run_pipeline(
            path,
            PipelineConfig(output_taxonomy=str(tax_path), output_aliases=str(alias_path)),
        )
        tax_lines = tax_path.read_text().splitlines()
        assert tax_lines == sorted(tax_lines)
        assert "andromeda\tFAM" in tax_lines
        alias_lines = alias_path.read_text().splitlines()
        assert alias_lines == sorted(alias_lines)
        assert "androm\tandromeda" in alias_lines


class TestPipelineErrors:
    def test_missing_input_names_stage(self):
        with pytest.raises(StageError) as err:
            run_pipeline("/nonexistent/input.jsonl", PipelineConfig())
        assert err.value.stage == "parse-1"

    def test_bad_rulebook_names_config_stage(self, tmp_path):
        bad_rules = tmp_path / "rules.jsonl"
        bad_rules.write_text('{"av": "X"}\n', encoding="utf-8")
        corpus = tmp_path / "c.jsonl"
        write_jsonl(corpus, [report_record(fake_hash(0), {})])
        with pytest.raises(StageError) as err:
            run_pipeline(corpus, PipelineConfig(rules_path=str(bad_rules)))
        assert err.value.stage == "config"

    def test_invalid_config_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            run_pipeline(tmp_path / "x.jsonl", PipelineConfig(dominance=0.0))

    def test_empty_input_gives_empty_output(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("", encoding="utf-8")
        result = run_pipeline(path, PipelineConfig())
        assert result.outputs == []

    def test_family_less_corpus(self, tmp_path):
        path = tmp_path / "nofam.jsonl"
        write_jsonl(
            path,
            [report_record(fake_hash(i), {"EtaAV": "Trojan_Backdoor"}) for i in range(3)],
        )
        result = run_pipeline(path, PipelineConfig())
        assert all(o.family is None and o.confidence == 0.0 for o in result.outputs)
        assert len(result.excluded) == 3


class TestMoreEndToEnd:
    def test_vt_format_pipeline(self, tmp_path):
        path = tmp_path / "vt.jsonl"
        records = [
            {
                "data": {
                    "attributes": {
                        "sha256": fake_hash(i),
                        "last_analysis_results": {
                            "AlphaAV": {"result": "Trojan.Win32.Zeus.aa"},
                            "BetaAV": {"result": "Trojan.Win32.Zeus.bb"},
                            "GammaAV": {"result": "Trojan.Win32.Zeus.cc"},
                            "DeltaAV": {"result": None},
                        },
                    }
                }
            }
            for i in range(4)
        ]
        write_jsonl(path, records)
        result = run_pipeline(path, PipelineConfig(vt_format=True))
        assert len(result.outputs) == 4
        assert all(o.family == "zeus" for o in result.outputs)
        assert all(o.num_detected == 3 and o.num_scanned == 4 for o in result.outputs)

    def test_mostly_malformed_aborts_with_stage(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        lines = [json.dumps(report_record(fake_hash(i), {})) for i in range(15)]
        lines += ["not json"] * 10
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        with pytest.raises(StageError) as err:
            run_pipeline(path, PipelineConfig())
        assert err.value.stage == "parse-1"

    def test_placeholder_family_never_reaches_outputs(self, tmp_path):
        path = tmp_path / "ph.jsonl"
        records = [
            report_record(
                fake_hash(i),
                {
                    "AlphaAV": "Trojan.Win32.Artemis.aa",
                    "BetaAV": "Trojan.Win32.Realfam.bb",
                    "GammaAV": "Trojan.Win32.Realfam.cc",
                    "MuAV": "Trojan.Win32.Realfam.dd",
                },
            )
            for i in range(6)
        ]
        write_jsonl(path, records)
        result = run_pipeline(path, PipelineConfig())
        assert "artemis" not in result.taxonomy
        for out in result.outputs:
            assert out.family == "realfam"
            assert all(t.tag != "artemis" for t in out.tags)
        for votes in result.votes_by_hash.values():
            assert "artemis" not in votes.values()

    def test_confidence_threshold_filters_outputs(self, tmp_path):
        path = tmp_path / "mix.jsonl"
        records = [
            report_record(
                fake_hash(i),
                {
                    "AlphaAV": "Trojan.Win32.Famone.aa",
                    "BetaAV": "Trojan.Win32.Famone.bb",
                    "GammaAV": "Trojan.Win32.Famone.cc",
                },
            )
            for i in range(3)
        ]
        records.append(report_record(fake_hash(9), {"EtaAV": "Trojan_Backdoor"}))
        write_jsonl(path, records)
        unfiltered = run_pipeline(path, PipelineConfig())
        filtered = run_pipeline(path, PipelineConfig(confidence_threshold=0.5))
        assert len(unfiltered.outputs) == 4
        assert len(filtered.outputs) == 3  # the family-less report drops out
        assert all(o.confidence >= 0.5 for o in filtered.outputs)


class TestEvaluate:
    TRUTH = GroundTruth(
        families={fake_hash(0): "andromeda", fake_hash(1): "zeus", fake_hash(2): "emotet"},
        alias_groups=(("andromeda", "gamarue", "wauchos"),),
    )

    def _out(self, i, family, confidence=0.9):
        return LabelOutput(fake_hash(i), 5, 10, family, confidence if family else 0.0, ())

    def test_alias_counts_as_correct(self):
        preds = [self._out(0, "gamarue"), self._out(1, "zeus"), self._out(2, "emotet")]
        report = evaluate(preds, self.TRUTH)
        assert report.accuracy == 1.0

    def test_none_prediction_is_wrong(self):
        preds = [self._out(0, None), self._out(1, "zeus"), self._out(2, "emotet")]
        report = evaluate(preds, self.TRUTH)
        assert report.accuracy == pytest.approx(2 / 3)

    def test_missing_hash_counted_wrong(self):
        preds = [self._out(0, "andromeda")]
        report = evaluate(preds, self.TRUTH)
        assert report.n_missing == 2
        assert report.accuracy == pytest.approx(1 / 3)

    def test_run_alias_map_used(self):
        amap = AliasMap()
        amap.union("zeus", "zbot")
        amap.assign_canonicals({"zeus": 10, "zbot": 2})
        preds = [self._out(0, "andromeda"), self._out(1, "zbot"), self._out(2, "emotet")]
        report = evaluate(preds, self.TRUTH, alias_map=amap)
        assert report.accuracy == 1.0

    def test_empty_truth_rejected(self):
        with pytest.raises(ConfigError):
            evaluate([], GroundTruth(families={}))

    def test_impossibility_bound(self):
        preds = [self._out(0, "other"), self._out(1, "zeus"), self._out(2, "emotet")]
        candidates = {
            fake_hash(0): ("other",),            # truth never voted -> impossible
            fake_hash(1): ("zeus", "zbot"),
            fake_hash(2): ("emotet",),
        }
        report = evaluate(preds, self.TRUTH, candidates=candidates)
        assert report.impossible_fraction == pytest.approx(1 / 3)

    def test_per_family_breakdown(self):
        preds = [self._out(0, "gamarue"), self._out(1, "nope"), self._out(2, "emotet")]
        report = evaluate(preds, self.TRUTH)
        assert report.per_family["andromeda"] == (1, 1)
        assert report.per_family["zeus"] == (1, 0)

    def test_ground_truth_loader(self, tmp_path):
        truth_path = tmp_path / "truth.jsonl"
        write_jsonl(
            truth_path,
            [{"sha256": fake_hash(0), "family": "Andromeda"}],
        )
        aliases_path = tmp_path / "aliases.txt"
        aliases_path.write_text("andromeda,gamarue\n", encoding="utf-8")
        truth = load_ground_truth(truth_path, aliases_path)
        assert truth.families[fake_hash(0)] == "andromeda"
        assert truth.alias_groups == (("andromeda", "gamarue"),)


class TestOutputFormats:
    def test_json_schema(self):
        from avlabel.votes import Tag

        out = LabelOutput(fake_hash(1), 3, 5, "zeus", 0.75, (Tag("trojan", Cat.BEH, 6),))
        obj = json.loads(out.to_json())
        assert obj == {
            "sha256": fake_hash(1),
            "detected": "3/5",
            "family": "zeus",
            "confidence": 0.75,
            "tags": [{"tag": "trojan", "count": 6}],
        }

    def test_json_family_none(self):
        out = LabelOutput(fake_hash(1), 0, 5, None, 0.0, ())
        obj = json.loads(out.to_json())
        assert obj["family"] is None
        assert obj["confidence"] == 0

    def test_tsv(self):
        out = LabelOutput(fake_hash(1), 3, 5, None, 0.0, ())
        fields = out.to_tsv().split("\t")
        assert fields[1] == "3/5"
        assert fields[2] == "none"


class TestCli:
    def _corpus(self, tmp_path, n=3):
        path = tmp_path / "c.jsonl"
        write_jsonl(
            path,
            [
                report_record(
                    fake_hash(i),
                    {
                        "AlphaAV": "Trojan.Win32.Zeus.aa",
                        "BetaAV": "Trojan.Win32.Zeus.bb",
                        "GammaAV": "Trojan.Win32.Zeus.cc",
                    },
                )
                for i in range(n)
            ],
        )
        return path

    def test_label_stdout(self, tmp_path):
        runner = CliRunner()
        corpus = self._corpus(tmp_path)
        result = runner.invoke(cli_main, ["label", str(corpus)])
        assert result.exit_code == 0, result.output
        lines = [l for l in result.output.splitlines() if l.startswith('{"sha256"')]
        assert len(lines) == 3
        first = json.loads(lines[0])
        assert first["family"] == "zeus"

    def test_label_outputs_and_run_log(self, tmp_path):
        runner = CliRunner()
        corpus = self._corpus(tmp_path)
        out_path = tmp_path / "out.jsonl"
        log_path = tmp_path / "run.json"
        votes_path = tmp_path / "votes.jsonl"
        result = runner.invoke(
            cli_main,
            [
                "label", str(corpus),
                "-o", str(out_path),
                "--run-log", str(log_path),
                "--output-votes", str(votes_path),
                "--tsv",
            ],
        )
        assert result.exit_code == 0, result.output
        assert len(out_path.read_text().splitlines()) == 3
        log = json.loads(log_path.read_text())
        assert log["config"]["vote_mode"] == "ibcc"
        assert log["config"]["tag_thresholds"]["BEH"] == 5
        votes = [json.loads(l) for l in votes_path.read_text().splitlines()]
        assert votes[0]["votes"]["AlphaAV"] == "zeus"

    def test_label_rejects_bad_tag_threshold(self, tmp_path):
        runner = CliRunner()
        corpus = self._corpus(tmp_path)
        result = runner.invoke(cli_main, ["label", str(corpus), "--tag-threshold", "XXX=2"])
        assert result.exit_code == 2

    def test_evaluate_cli(self, tmp_path):
        runner = CliRunner()
        corpus = self._corpus(tmp_path)
        out_path = tmp_path / "out.jsonl"
        votes_path = tmp_path / "votes.jsonl"
        truth_path = tmp_path / "truth.jsonl"
        write_jsonl(
            truth_path,
            [{"sha256": fake_hash(i), "family": "zeus"} for i in range(3)],
        )
        assert runner.invoke(
            cli_main,
            ["label", str(corpus), "-o", str(out_path), "--output-votes", str(votes_path)],
        ).exit_code == 0
        result = runner.invoke(
            cli_main,
            ["evaluate", str(out_path), str(truth_path), "--votes", str(votes_path),
             "--per-family"],
        )
        assert result.exit_code == 0, result.output
        assert "accuracy: 1.0000" in result.output
        assert "impossible" in result.output
        assert "zeus\t3/3" in result.output

    def test_synth_cli(self, tmp_path):
        runner = CliRunner()
        corpus = tmp_path / "synth.jsonl"
        truth = tmp_path / "truth.jsonl"
        result = runner.invoke(
            cli_main,
            [
                "synth", "--seed", "3", "--n-reports", "30", "--n-families", "5",
                "--n-annotators", "6", "--output", str(corpus), "--truth", str(truth),
            ],
        )
        assert result.exit_code == 0, result.output
        assert len(corpus.read_text().splitlines()) == 30

    def test_scale_probe_cli(self):
        runner = CliRunner()
        result = runner.invoke(
            cli_main,
            ["scale-probe", "--sizes", "200,400", "--n-annotators", "5", "--max-iter", "2"],
        )
        assert result.exit_code == 0, result.output
        assert "size" in result.output

    def test_exit_code_on_config_error(self, tmp_path):
        runner = CliRunner()
        corpus = self._corpus(tmp_path)
        result = runner.invoke(cli_main, ["label", str(corpus), "--dominance", "0"])
        assert result.exit_code == 2

    def test_threads_flag_matches_single_thread(self, tmp_path):
        runner = CliRunner()
        corpus = self._corpus(tmp_path, n=10)
        single = tmp_path / "single.jsonl"
        multi = tmp_path / "multi.jsonl"
        assert runner.invoke(
            cli_main, ["label", str(corpus), "-o", str(single)]
        ).exit_code == 0
        assert runner.invoke(
            cli_main, ["label", str(corpus), "-o", str(multi), "--threads", "2"]
        ).exit_code == 0
        assert single.read_bytes() == multi.read_bytes()

    def test_evaluate_confidence_threshold_retained_accuracy(self, tmp_path):
        runner = CliRunner()
        preds = tmp_path / "preds.jsonl"
        write_jsonl(
            preds,
            [
                {"sha256": fake_hash(0), "detected": "3/3", "family": "zeus",
                 "confidence": 0.9, "tags": []},
                {"sha256": fake_hash(1), "detected": "3/3", "family": "wrong",
                 "confidence": 0.2, "tags": []},
            ],
        )
        truth = tmp_path / "truth.jsonl"
        write_jsonl(
            truth,
            [
                {"sha256": fake_hash(0), "family": "zeus"},
                {"sha256": fake_hash(1), "family": "zeus"},
            ],
        )
        result = runner.invoke(
            cli_main,
            ["evaluate", str(preds), str(truth), "--confidence-threshold", "0.5"],
        )
        assert result.exit_code == 0, result.output
        assert "retained 1/2" in result.output
        assert "accuracy: 1.0000 (1/1)" in result.output

    def test_train_confidence_cli(self, tmp_path):
        import numpy as np

        rng = np.random.default_rng(0)
        features_path = tmp_path / "features.jsonl"
        rows = []
        for i in range(120):
            correct = i % 2 == 0
            top = float(rng.uniform(0.8, 1.0) if correct else rng.uniform(0, 0.3))
            rows.append(
                {
                    "n_distinct_families": 2.0,
                    "family_entropy": 0.5,
                    "detect_ratio": 0.8,
                    "fam_per_detection": 0.7,
                    "fam_per_scanned": 0.6,
                    "top_posterior": top,
                    "posterior_entropy": 1 - top,
                    "correct": correct,
                }
            )
        write_jsonl(features_path, rows)
        model_path = tmp_path / "model.pkl"
        runner = CliRunner()
        result = runner.invoke(
            cli_main,
            [
                "train-confidence", "--input", str(features_path),
                "--folds", "3", "--output", str(model_path),
            ],
        )
        assert result.exit_code == 0, result.output
        assert model_path.exists()
        assert "fold 0" in result.output
