# Copyright 2026 The lensnet Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#      http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

import json
import math

import numpy as np
import pytest

import lensnet


def test_enhance_identity_and_range():
    rng = np.random.default_rng(0)
    img = rng.uniform(1e-4, 1.0, size=(9, 7, 3))
    assert np.array_equal(lensnet.enhance(img), img)
    out = lensnet.enhance(img, gamma=0.5, alpha=2.0, zeta=0.3)
    assert out.shape == img.shape
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_scale_params_midpoints():
    assert lensnet.scale_params((0.0, 0.0, 0.0)) == pytest.approx((1.65, 2.15, 0.6), abs=1e-12)


def test_rarity_and_probabilities():
    r = lensnet.rarity(22, 4204)
    assert r == pytest.approx(1 - math.log(23) / math.log(4205), abs=1e-15)
    assert lensnet.class_aug_prob(0.0) == pytest.approx(0.15)
    assert lensnet.applied_aug_prob(0.61, 0.9) == pytest.approx(0.549)


def test_focal_loss_reduces_to_cross_entropy():
    logits = np.array([[0.5, -1.0, 2.0]])
    ce = math.log(np.exp(logits).sum()) - logits[0, 2]
    assert lensnet.focal_loss(logits, [2], [1.0, 1.0, 1.0], gamma=0.0) == pytest.approx(ce, abs=1e-12)
    assert sum(lensnet.class_alpha_weights([1, 4, 9])) == pytest.approx(3.0)


def test_detection_metrics():
    assert lensnet.iou((0, 0, 2, 2), (1, 0, 3, 2)) == pytest.approx(1 / 3)
    gts = [[(0, 0, 10, 10)]]
    dets = [[(0, 0, 10, 10, 0.9)]]
    assert lensnet.average_precision(dets, gts) == 1.0
    assert lensnet.evaluate_detections(dets, gts) == {"map50": 1.0, "map50_95": 1.0}


def test_validation_error_maps_to_value_error():
    with pytest.raises(ValueError):
        lensnet.rarity(5, 4)
    with pytest.raises(OSError):
        lensnet.read_image("/nonexistent/image.png")


def test_synthetic_dataset_pipeline(tmp_path):
    n = lensnet.write_synthetic_dataset(tmp_path / "ds", {"images": 24, "classes": 4, "seed": 5})
    assert n == 24
    c = lensnet.census(tmp_path / "ds" / "manifest.jsonl")
    assert c["images"] == 24
    assert c["mean_signs_per_image"] == pytest.approx(c["instances"] / c["images"])
    folds = lensnet.stratified_kfold(tmp_path / "ds" / "manifest.jsonl", 3, 0)
    assert sorted(i for f in folds for i in f) == sorted(f"scene_{i:05d}" for i in range(24))

    config = lensnet.default_config()
    config.update(manifest="ds/manifest.jsonl", classes="ds/classes.txt")
    config["detector"]["schedule"].update(head_epochs=1, joint_epochs=1, batch_size=8)
    config["detector"]["backbone"]["width"] = 4
    config["classifier"]["train"]["epochs"] = 2
    config["classifier"]["crop_size"] = 24
    (tmp_path / "cfg.json").write_text(json.dumps(config))

    code, out, err = lensnet.run_cli(
        ["train-detector", "--config", str(tmp_path / "cfg.json"), "--fold", "0", "--out", str(tmp_path / "d.ckpt")])
    assert code == 0, err
    code, out, err = lensnet.run_cli(
        ["train-classifier", "--config", str(tmp_path / "cfg.json"), "--fold", "0", "--out", str(tmp_path / "c.ckpt")])
    assert code == 0, err

    detector = lensnet.Detector(tmp_path / "d.ckpt")
    assert detector.wrapped
    image = lensnet.read_image(tmp_path / "ds" / "images" / "scene_00000.png")
    gamma, alpha, zeta = detector.enhance_params(image)
    assert 0.3 <= gamma <= 3.0 and 0.3 <= alpha <= 4.0 and 0.0 <= zeta <= 1.2
    assert detector.detect(image, threshold=1.0) == []
    signs = detector.detect(image, threshold=0.0)
    assert signs and all(0.0 <= s["confidence"] <= 1.0 for s in signs)

    classifier = lensnet.Classifier(tmp_path / "c.ckpt")
    pred = classifier.classify(signs[0]["crop"])
    assert pred["class_name"] in classifier.class_names
    assert 0.0 < pred["probability"] <= 1.0


def test_cli_exit_codes():
    assert lensnet.run_cli([])[0] == 1
    assert lensnet.run_cli(["stats", "--manifest", "/nonexistent.jsonl"])[0] in (1, 2)
