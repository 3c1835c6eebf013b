"""Zero-shot scoring, thresholds, grounding and report files."""
import copy

import numpy as np
import pandas as pd
import pytest

from app.exceptions import ConfigError, DataError, UnavailableError
from app.model.simr import build_model, model_metadata
from app.services.evaluation_service import EvaluationService, write_reports


def _service(dataset, model_config, **overrides):
    config = model_config.model_copy(update=overrides)
    model = build_model(config, model_metadata(dataset), seed=1)
    return EvaluationService(model, dataset, config_echo={"prompt_align": True}, chunk_size=5)


def test_zero_head_scores_are_constant(tiny_dataset, tiny_model_config):
    service = _service(tiny_dataset, tiny_model_config)
    service.model.alignment.head.weight.data[:] = 0.0
    report = service.evaluate("P1")
    test_scores = service.zero_shot_scores(tiny_dataset.split("test").patches, "P1").scores
    assert np.all(test_scores == 0.0)
    for metrics in report.per_class:
        if metrics.auc is not None:
            assert metrics.auc == pytest.approx(0.5)
        assert metrics.threshold_fallback


def test_duplicate_images_get_identical_rows(tiny_dataset, tiny_model_config):
    service = _service(tiny_dataset, tiny_model_config)
    patches = tiny_dataset.split("test").patches
    duplicated = np.concatenate([patches[:3], patches[:3]])
    scores = service.zero_shot_scores(duplicated, "P2").scores
    assert scores.shape == (6, 3)
    np.testing.assert_allclose(scores[:3], scores[3:], atol=1e-6)


def test_mean_direction_averages_both_directions(tiny_dataset, tiny_model_config):
    service = _service(tiny_dataset, tiny_model_config)
    patches = tiny_dataset.split("val").patches
    t2i = service.zero_shot_scores(patches, "P1", "t2i").scores
    i2t = service.zero_shot_scores(patches, "P1", "i2t").scores
    mean = service.zero_shot_scores(patches, "P1", "mean").scores
    np.testing.assert_allclose(mean, 0.5 * (t2i + i2t), atol=1e-6)
    assert not np.allclose(t2i, i2t)


def test_chunking_does_not_change_scores(tiny_dataset, tiny_model_config):
    service = _service(tiny_dataset, tiny_model_config)
    patches = tiny_dataset.split("test").patches
    chunked = service.zero_shot_scores(patches, "P1").scores
    service.chunk_size = 64
    whole = service.zero_shot_scores(patches, "P1").scores
    np.testing.assert_allclose(chunked, whole, atol=1e-5)


def test_prompts_are_encoded_once(tiny_dataset, tiny_model_config):
    service = _service(tiny_dataset, tiny_model_config)
    assert service.encode_prompts("P1") is service.encode_prompts("P1")


def test_bad_direction_and_template(tiny_dataset, tiny_model_config):
    service = _service(tiny_dataset, tiny_model_config)
    patches = tiny_dataset.split("test").patches[:2]
    with pytest.raises(ConfigError, match="direction"):
        service.zero_shot_scores(patches, "P1", "sideways")
    with pytest.raises(ConfigError, match="P1, P2"):
        service.zero_shot_scores(patches, "P9")


def test_report_ranges_and_grounding(tiny_dataset, tiny_model_config):
    report = _service(tiny_dataset, tiny_model_config, kv_choice="both").evaluate("P1")
    assert report.aligned and report.template_id == "P1" and report.direction == "mean"
    assert list(report.thresholds) == tiny_dataset.concepts
    labels = tiny_dataset.split("test").labels
    for k, metrics in enumerate(report.per_class):
        assert -1.0 <= metrics.mcc <= 1.0 and 0.0 <= metrics.f1 <= 1.0 and 0.0 <= metrics.acc <= 1.0
        assert metrics.pointing_trials == int(labels[:, k].sum())
        if metrics.pointing_trials:
            assert 0.0 <= metrics.pointing_hit_rate <= 1.0
    assert report.mean.pointing_defined_classes >= 1
    assert report.config["eval"]["split"] == "test"


def test_global_keys_have_no_pointing_game(tiny_dataset, tiny_model_config):
    report = _service(tiny_dataset, tiny_model_config, kv_choice="global").evaluate("P2")
    assert not report.aligned
    assert all(m.pointing_hit_rate is None for m in report.per_class)
    assert report.mean.pointing_defined_classes == 0


def test_cross_attention_off_scores_without_maps(tiny_dataset, tiny_model_config):
    service = _service(tiny_dataset, tiny_model_config, cross_attention=False)
    result = service.zero_shot_scores(tiny_dataset.split("test").patches, "P1")
    assert result.attn_t2i is None and result.local_count == 0
    with pytest.raises(UnavailableError):
        service.attention_for("P1", "test", [0])


def test_attention_rows_cover_local_and_global_keys(tiny_dataset, tiny_model_config):
    service = _service(tiny_dataset, tiny_model_config, kv_choice="both")
    result = service.attention_for("P1", "test", [0, 2])
    assert result.attn_t2i.shape == (2, 3, 2, tiny_dataset.num_patches + 1)
    assert result.local_count == tiny_dataset.num_patches


def test_thresholds_need_a_validation_split(tiny_dataset, tiny_model_config):
    dataset = copy.copy(tiny_dataset)
    dataset.splits = {name: s for name, s in tiny_dataset.splits.items() if name != "val"}
    with pytest.raises(DataError, match="validation"):
        _service(dataset, tiny_model_config).evaluate("P1")


def test_reports_are_written(tmp_path, tiny_dataset, tiny_model_config):
    service = _service(tiny_dataset, tiny_model_config)
    reports = [service.evaluate("P1"), service.evaluate("P2")]
    paths = write_reports(reports, tmp_path)
    names = sorted(p.name for p in paths)
    assert names == sorted([
        "eval_P1_mean.json", "eval_P1_mean.csv", "eval_P2_mean.json", "eval_P2_mean.csv", "comparison.csv",
    ])
    frame = pd.read_csv(tmp_path / "eval_P1_mean.csv")
    assert frame["concept"].tolist() == tiny_dataset.concepts + ["mean"]
    comparison = pd.read_csv(tmp_path / "comparison.csv")
    assert comparison["template"].tolist() == ["P1", "P2"]
