"""Stage orchestration: caching, invalidation, determinism, and the ledger."""

import dataclasses
import json
import shutil

import pytest

from ghostvec import pipeline
from ghostvec.pipeline import (
    CONDITIONS,
    STAGE_ORDER,
    MissingPrerequisiteError,
    StageNameError,
    file_digest,
    read_ledger,
    run_all,
    run_stage,
)


def _statuses(records):
    return {r["stage"]: r["status"] for r in records}


def test_all_stages_complete_in_order(pipeline_lab):
    assert [r["stage"] for r in pipeline_lab.records] == list(STAGE_ORDER)
    assert all(r["status"] == "ok" for r in pipeline_lab.records)


def test_expected_artifacts_exist(pipeline_lab):
    out = pipeline_lab.out
    expected = [
        "ledger.jsonl",
        "corpus/manifest.tsv",
        "corpus/profiles.tsv",
        "models/asr.pt",
        "models/asr_meta.json",
        "models/sv.pt",
        "attack/attack_stats.json",
        "attack/ghost_spk00.gvb",
        "attack/ghost_spk02.gvb",
        "svd/transfer_report.tsv",
        "svd/modified_spk00.fmat",
        "svd/speaker_means.fmat",
        "synth/voice_map.fmat",
        "synth/texts.tsv",
        "score/score_stats.json",
        "report/report.json",
        "report/report.txt",
        "report/clustering.tsv",
        "report/projection.tsv",
    ]
    for rel in expected:
        assert (out / rel).exists(), rel


def test_synth_wrote_every_condition(pipeline_lab):
    out = pipeline_lab.out
    # 2 targets x 3 sentences per condition
    for cond in CONDITIONS:
        assert (out / "synth" / f"requests_{cond}.tsv").exists()
        wavs = list((out / "synth" / "wav").glob(f"{cond}_*.wav"))
        assert len(wavs) == 6


def test_attack_stats_schema(pipeline_lab):
    stats = json.loads((pipeline_lab.out / "attack" / "attack_stats.json").read_text())
    assert set(stats["targets"]) == {"spk00", "spk02"}
    for rec in stats["targets"].values():
        assert 0.0 <= rec["success_rate_first_batch"] <= 1.0
        assert rec["n_converged"] >= 1
        assert rec["bundle_sha256"]


def test_report_structure(pipeline_lab):
    report = json.loads((pipeline_lab.out / "report" / "report.json").read_text())
    for cond in CONDITIONS:
        row = report["conditions"][cond]
        for key in ("eer_pct", "min_dcf", "cllr_min", "cllr_act", "n_target", "n_nontarget"):
            assert key in row, key
    assert set(report["cer_pct"]) == set(CONDITIONS)
    assert report["clustering"]["n_targets"] == 2
    assert "asr_speaker_token_accuracy" in report["gates"]
    assert report["seed"] == 0


def test_second_run_hits_cache_everywhere(pipeline_lab):
    before = file_digest(pipeline_lab.out / "report" / "report.json")
    records = run_all(pipeline_lab.cfg, pipeline_lab.out)
    assert all(r["status"] == "cached" for r in records)
    assert all(r["wall_time_s"] == 0.0 for r in records)
    assert file_digest(pipeline_lab.out / "report" / "report.json") == before


def test_forced_rerun_reproduces_report_bytes(pipeline_lab, tmp_path):
    copy = tmp_path / "rerun"
    shutil.copytree(pipeline_lab.out, copy)
    before = file_digest(copy / "report" / "report.json")
    records = run_all(pipeline_lab.cfg, copy, force=True)
    assert all(r["status"] == "ok" for r in records)
    assert file_digest(copy / "report" / "report.json") == before


def test_seed_change_invalidates_and_changes_outputs(pipeline_lab, tmp_path):
    copy = tmp_path / "reseed"
    shutil.copytree(pipeline_lab.out, copy)
    before = file_digest(copy / "report" / "report.json")
    reseeded = dataclasses.replace(pipeline_lab.cfg, seed=1)
    records = run_all(reseeded, copy)
    assert all(r["status"] == "ok" for r in records)
    assert file_digest(copy / "report" / "report.json") != before


def test_downstream_config_change_keeps_upstream_cached(pipeline_lab, tmp_path):
    copy = tmp_path / "retune"
    shutil.copytree(pipeline_lab.out, copy)
    tuned = dataclasses.replace(
        pipeline_lab.cfg, attack=dataclasses.replace(pipeline_lab.cfg.attack, epsilon=0.05)
    )
    statuses = _statuses(run_all(tuned, copy))
    assert statuses["corpus"] == "cached"
    assert statuses["train-asr"] == "cached"
    assert statuses["train-sv"] == "cached"
    for stage in ("attack", "svd-transfer", "synth", "score", "report"):
        assert statuses[stage] == "ok"


def test_missing_output_forces_stage_rerun(pipeline_lab, tmp_path):
    copy = tmp_path / "heal"
    shutil.copytree(pipeline_lab.out, copy)
    (copy / "report" / "report.json").unlink()
    statuses = _statuses(run_all(pipeline_lab.cfg, copy))
    assert statuses["report"] == "ok"
    assert statuses["score"] == "cached"
    assert (copy / "report" / "report.json").exists()


def test_stage_requires_prerequisites(pipeline_lab, tmp_path):
    with pytest.raises(MissingPrerequisiteError, match="attack"):
        run_stage(pipeline_lab.cfg, tmp_path / "empty", "attack")


def test_unknown_stage_name(pipeline_lab, tmp_path):
    with pytest.raises(StageNameError, match="unknown stage"):
        run_stage(pipeline_lab.cfg, tmp_path, "finetune")


def test_ledger_lines_are_json_records(pipeline_lab):
    records = read_ledger(pipeline_lab.out)
    assert len(records) >= len(STAGE_ORDER)
    for rec in records:
        assert rec["stage"] in STAGE_ORDER
        assert rec["status"] in ("ok", "cached", "error")
        assert "config_digest" in rec
        assert "wall_time_s" in rec


def test_ledger_tolerates_torn_tail(tmp_path):
    path = tmp_path / pipeline.LEDGER_NAME
    good = json.dumps({"stage": "corpus", "status": "ok", "config_digest": "x"})
    path.write_text(good + "\n" + '{"stage": "train-asr", "status"')
    records = read_ledger(tmp_path)
    assert len(records) == 1
    assert records[0]["stage"] == "corpus"


def test_error_is_recorded_in_ledger(pipeline_lab, tmp_path):
    copy = tmp_path / "breakage"
    shutil.copytree(pipeline_lab.out, copy)
    (copy / "models" / "asr.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(Exception):
        run_stage(pipeline_lab.cfg, copy, "attack", force=True)
    last = read_ledger(copy)[-1]
    assert last["stage"] == "attack"
    assert last["status"] == "error"
    assert "error" in last


def test_resolve_out_dir_precedence(pipeline_lab):
    cfg = pipeline_lab.cfg
    assert pipeline.resolve_out_dir(cfg, "explicit", env={"GHOSTVEC_OUT": "envdir"}) == pipeline.Path(
        "explicit"
    )
    assert pipeline.resolve_out_dir(cfg, None, env={"GHOSTVEC_OUT": "envdir"}) == pipeline.Path(
        "envdir"
    )
    assert pipeline.resolve_out_dir(cfg, None, env={}) == pipeline.Path(cfg.out_dir)


def test_split_speakers_and_targets(pipeline_lab):
    train, templates = pipeline.split_speakers(pipeline_lab.cfg, ["spk04", "spk00", "spk02", "spk01", "spk03"])
    assert train == ["spk00", "spk01", "spk02"]
    assert templates == ["spk03", "spk04"]
    targets = pipeline.target_speakers(pipeline_lab.cfg, train)
    assert targets == ["spk00", "spk02"]  # endpoints of an even spread
