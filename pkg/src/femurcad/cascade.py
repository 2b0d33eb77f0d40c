"""Hierarchical baseline: four stage classifiers arranged over the
fracture taxonomy tree (Unbroken/Broken, then A/B, then the subtypes).

Any backbone exposing the ViT model interface works per stage; the tiny
preset is the default. Soft prediction multiplies stage probabilities
along each root-to-leaf path, hard prediction follows stage argmaxes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from . import training as tr
from . import vit
from .data import LABEL_INDEX, LABEL_ORDER, FractureLabel
from .tensor import ConfigurationError

# Stage layout: name -> (ordered class names, membership test on a leaf label)
STAGE_CLASSES = {
    "stage1": ["Unbroken", "Broken"],
    "stage2": ["A", "B"],
    "stage3": ["A1", "A2", "A3"],
    "stage4": ["B1", "B2", "B3"],
}


def stage_target(stage: str, label: FractureLabel) -> Optional[int]:
    """Class index of `label` within a stage, or None when not routed there."""
    if stage == "stage1":
        return 0 if label is FractureLabel.UNBROKEN else 1
    if stage == "stage2":
        if label.parent in ("A", "B"):
            return STAGE_CLASSES["stage2"].index(label.parent)
        return None
    if stage == "stage3":
        return STAGE_CLASSES["stage3"].index(label.value) if label.parent == "A" else None
    if stage == "stage4":
        return STAGE_CLASSES["stage4"].index(label.value) if label.parent == "B" else None
    raise ConfigurationError(f"unknown cascade stage {stage!r}")


@dataclass
class CascadeSpec:
    """One trained backbone per stage; leaves cover the 7 fracture classes."""

    models: dict = field(default_factory=dict)

    def require(self, stage: str) -> vit.ViTModel:
        model = self.models.get(stage)
        if model is None:
            raise ConfigurationError(f"cascade is missing a trained model for {stage}")
        return model


def _stage_probs(model: vit.ViTModel, image: np.ndarray) -> np.ndarray:
    logits, _ = vit.forward(model, image, mode="infer")
    return T.softmax(logits).data


def cascade_predict(spec: CascadeSpec, image: np.ndarray, mode: str = "soft") -> np.ndarray:
    """Distribution over the 7 leaf classes in taxonomy order."""
    if mode not in ("soft", "hard"):
        raise ConfigurationError(f"cascade mode must be soft or hard, got {mode!r}")
    p1 = _stage_probs(spec.require("stage1"), image)

    if mode == "hard":
        out = np.zeros(len(LABEL_ORDER), dtype=np.float32)
        if p1.argmax() == 0:
            out[LABEL_INDEX[FractureLabel.UNBROKEN]] = 1.0
            return out
        p2 = _stage_probs(spec.require("stage2"), image)
        if p2.argmax() == 0:
            p3 = _stage_probs(spec.require("stage3"), image)
            leaf = FractureLabel(STAGE_CLASSES["stage3"][int(p3.argmax())])
        else:
            p4 = _stage_probs(spec.require("stage4"), image)
            leaf = FractureLabel(STAGE_CLASSES["stage4"][int(p4.argmax())])
        out[LABEL_INDEX[leaf]] = 1.0
        return out

    p2 = _stage_probs(spec.require("stage2"), image)
    p3 = _stage_probs(spec.require("stage3"), image)
    p4 = _stage_probs(spec.require("stage4"), image)
    return assemble_leaf_distribution(p1, p2, p3, p4)


def assemble_leaf_distribution(p1, p2, p3, p4) -> np.ndarray:
    """Leaf probability = product of stage probabilities along its path."""
    out = np.zeros(len(LABEL_ORDER), dtype=np.float64)
    out[LABEL_INDEX[FractureLabel.UNBROKEN]] = p1[0]
    broken = p1[1]
    for i, name in enumerate(STAGE_CLASSES["stage3"]):
        out[LABEL_INDEX[FractureLabel(name)]] = broken * p2[0] * p3[i]
    for i, name in enumerate(STAGE_CLASSES["stage4"]):
        out[LABEL_INDEX[FractureLabel(name)]] = broken * p2[1] * p4[i]
    return out.astype(np.float32)


class _RelabeledDataset:
    """View of an ArrayDataset with labels remapped for one stage."""

    def __init__(self, base, mapping: dict):
        self._base = base
        self._mapping = mapping
        self.image_shape = base.image_shape

    def image_for(self, sample_id):
        return self._base.image_for(sample_id)

    def label_for(self, sample_id):
        return self._mapping[sample_id]


def train_cascade(dataset, plan: tr.SplitPlan, config: tr.TrainConfig,
                  backbone: Optional[vit.ViTConfig] = None,
                  seed: int = 0) -> tuple[CascadeSpec, dict]:
    """Train the four stage models on ground-truth-routed subsets.

    Stage 1 sees everything with Unbroken/Broken labels; stage 2 the
    broken subset as A vs B; stages 3 and 4 the A and B subtypes.
    """
    backbone = backbone or vit.ViTConfig.preset("tiny")
    spec = CascadeSpec()
    logs: dict = {}
    for stage_index, stage in enumerate(STAGE_CLASSES):
        mapping: dict = {}
        stage_plan_train: dict = {}
        stage_plan_val: dict = {}
        for group, source, target in (("train", plan.train, stage_plan_train),
                                      ("val", plan.val, stage_plan_val)):
            for label, ids in source.items():
                leaf = label if isinstance(label, FractureLabel) else LABEL_ORDER[label]
                stage_idx = stage_target(stage, leaf)
                if stage_idx is None:
                    continue
                target.setdefault(stage_idx, []).extend(ids)
                for sid in ids:
                    mapping[sid] = stage_idx
        classes = STAGE_CLASSES[stage]
        missing = [classes[i] for i in range(len(classes)) if not stage_plan_train.get(i)]
        if missing or not stage_plan_val:
            raise ConfigurationError(
                f"{stage} has no training data for {missing or 'validation'}; "
                f"cannot train this cascade on the given dataset")

        stage_cfg = vit.ViTConfig(image_size=backbone.image_size, patch_size=backbone.patch_size,
                                  hidden_size=backbone.hidden_size, num_heads=backbone.num_heads,
                                  num_layers=backbone.num_layers, mlp_units=backbone.mlp_units,
                                  head_units=backbone.head_units, num_classes=len(classes),
                                  channels=backbone.channels, dropout_keep=backbone.dropout_keep)
        model = vit.ViTModel(stage_cfg, seed=seed + stage_index)
        stage_plan = tr.SplitPlan(train=stage_plan_train, val=stage_plan_val,
                                  test={}, seed=plan.seed)
        result = tr.train(model, _RelabeledDataset(dataset, mapping), stage_plan, config)
        spec.models[stage] = model
        logs[stage] = result.log
    return spec, logs


def evaluate_cascade(spec: CascadeSpec, dataset, ids, mode: str = "soft") -> np.ndarray:
    """Predicted leaf indices for the given sample ids."""
    preds = np.empty(len(ids), dtype=np.int64)
    for i, sid in enumerate(ids):
        dist = cascade_predict(spec, dataset.image_for(sid), mode=mode)
        preds[i] = int(dist.argmax())
    return preds


def save_cascade(spec: CascadeSpec, directory) -> Path:
    """Write the four stage checkpoints plus a JSON spec listing them."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    listing = {}
    for stage, model in spec.models.items():
        path = directory / f"{stage}.ckpt"
        vit.save_checkpoint(model, path)
        listing[stage] = path.name
    spec_path = directory / "cascade.json"
    spec_path.write_text(json.dumps({"stages": listing}, indent=2) + "\n")
    return spec_path


def load_cascade(spec_path) -> CascadeSpec:
    spec_path = Path(spec_path)
    listing = json.loads(spec_path.read_text())["stages"]
    missing = [stage for stage in STAGE_CLASSES if stage not in listing]
    if missing:
        raise ConfigurationError(f"cascade spec missing stages {missing}")
    spec = CascadeSpec()
    for stage, name in listing.items():
        spec.models[stage] = vit.load_checkpoint(spec_path.parent / name)
    return spec
