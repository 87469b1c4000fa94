import dataclasses

import pytest

from segens import io as sio
from segens.align import EnsembleConfig
from segens.pipeline import IMAGE_HEADER, EvalOptions, evaluate_manifest, summary_rows, worker_count
from segens.pixagg import PixelAgg
from segens.synth import SynthConfig, synthesize_dataset

THINGS = (2, 3, 4, 5)


@pytest.fixture(scope="module")
def noisy(tmp_path_factory):
    out = tmp_path_factory.mktemp("noisy")
    return sio.read_manifest(synthesize_dataset(out, SynthConfig(seed=2, scenes=6, frames=1, ood_fraction=0.5,
                                                                 mc=2, tta="hflip")))


@pytest.fixture(scope="module")
def ideal(tmp_path_factory):
    out = tmp_path_factory.mktemp("ideal")
    cfg = SynthConfig(seed=1, scenes=4, mc=0, view_noise=0, mc_noise=0, frame_noise=0, jitter=0)
    return sio.read_manifest(synthesize_dataset(out, cfg))


def test_ideal_scenes_segment_perfectly(ideal):
    opts = EvalOptions(configs=[EnsembleConfig()], tasks=("seg",), things=THINGS)
    _, (summary,) = evaluate_manifest(ideal, opts, workers=1)
    assert summary["seg"]["miou"] == 1.0
    assert summary["seg"]["pq"] == 1.0
    assert not summary["errors"]


def test_row_layout(noisy):
    configs = [EnsembleConfig(0, 0, "none"), EnsembleConfig(2, 1, "hflip")]
    aggs = [PixelAgg.parse("image-mean"), PixelAgg.parse("patch:16")]
    measures = ["max_softmax_cm", "mutual_information_cm"]
    opts = EvalOptions(configs=configs, measures=measures, pixel_aggs=aggs, things=THINGS)
    rows, summaries = evaluate_manifest(noisy, opts, workers=1)
    assert len(rows) == len(configs) * len(noisy) * len(measures) * len(aggs)
    assert all(len(r) == len(IMAGE_HEADER) for r in rows)
    assert [s["config"] for s in summaries] == ["0:0:none", "2:1:hflip"]
    assert summaries[1]["samples"] == 8
    for s in summaries:
        assert len(s["scores"]) == 4
        assert all(0 <= row["auroc_ood"] <= 1 for row in s["scores"])
        assert {"ece_sem", "ece_pan"} <= set(s["calib"])
    flat = summary_rows(summaries)
    assert {r[3] for r in flat} >= {"miou", "pq", "aurc_iou", "aurc_pq", "auroc_ood", "ece_sem", "ece_pan"}


def test_thread_count_does_not_change_results(noisy):
    opts = EvalOptions(configs=[EnsembleConfig(2, 1, "hflip")], measures=["predictive_entropy_cm"], things=THINGS)
    a = evaluate_manifest(noisy, opts, workers=1)
    b = evaluate_manifest(noisy, opts, workers=4)
    assert a == b


def test_degenerate_task_reported_without_aborting(ideal):
    opts = EvalOptions(configs=[EnsembleConfig()], measures=["max_softmax_cm"], tasks=("ood", "seg"),
                       things=THINGS)
    _, (summary,) = evaluate_manifest(ideal, opts, workers=1)
    assert "DegenerateLabels" in summary["errors"]["auroc_ood"]
    assert summary["seg"]["miou"] == 1.0


def test_incomplete_container_is_per_image_error(ideal):
    opts = EvalOptions(configs=[EnsembleConfig(0, 1, "none"), EnsembleConfig()], measures=["max_softmax_cm"],
                       tasks=("seg",), things=THINGS)
    _, (bad, good) = evaluate_manifest(ideal, opts, workers=1)
    assert len(bad["errors"]) == len(ideal)
    assert all("IncompleteEnsemble" in e for e in bad["errors"].values())
    assert "seg" not in bad
    assert good["seg"]["pq"] == 1.0


def test_missing_flow_is_per_image_error(noisy):
    stripped = [dataclasses.replace(r, flows=()) for r in noisy]
    sio.write_manifest(noisy.root / "noflow.jsonl", stripped)
    man = sio.read_manifest(noisy.root / "noflow.jsonl")
    opts = EvalOptions(configs=[EnsembleConfig(0, 1, "none")], measures=["max_softmax_cm"], things=THINGS)
    _, (s,) = evaluate_manifest(man, opts, workers=1)
    assert len(s["errors"]) == len(man)
    assert all("MissingFlow" in e for e in s["errors"].values())


def test_semantic_domain_only(noisy):
    opts = EvalOptions(configs=[EnsembleConfig()], measures=["max_softmax_cm"], domain="semantic",
                       things=THINGS)
    rows, (s,) = evaluate_manifest(noisy, opts, workers=1)
    assert "pq" not in s["seg"] and "ece_pan" not in s["calib"]
    assert all("aurc_pq" not in r for r in s["scores"])
    assert all(r[8] is None for r in rows)


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("SEGENS_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("SEGENS_THREADS", "x")
    assert worker_count() >= 1
