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

"""Nighttime traffic sign detection and classification toolkit."""

from ._lensnet import (
    Classifier,
    Detector,
    IoError,
    TrainingError,
    ValidationError,
    applied_aug_prob,
    average_precision,
    census,
    class_alpha_weights,
    class_aug_prob,
    default_config,
    enhance,
    evaluate_detections,
    focal_loss,
    iou,
    preproc_loss,
    rarity,
    read_image,
    run_cli,
    scale_params,
    stratified_kfold,
    write_image,
    write_synthetic_dataset,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
