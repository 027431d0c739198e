"""Training engine: three-domain batches, reversal-mediated updates, SGD schedule.

Each iteration consumes one labeled source image, one unlabeled target image
and one auxiliary image synthesized from the source. Detection losses come
from the source only; the image- and object-level domain classifiers see
source (label 1) and target (label 0) features routed through the adversarial
reversal layer; the triplet regularizers see all three domains. The composite
objective is

    total = cls + reg + w * (img + obj + triplet_img + triplet_obj)

with the object-level triplet dropped in unaligned mode.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import yaml

from .adversarial import (
    AdversarialConfig,
    Domain,
    ImageDomainClassifier,
    LambdaHolder,
    ObjectDomainClassifier,
    advgrl,
    compute_lambda_adv,
    image_domain_loss,
    object_domain_loss,
)
from .datasets import DatasetManifest, DetectionSample
from .detector import Detector, DetectorConfig, Proposal
from .errors import ContractError, NonFiniteLossError, NotInitializedError
from .regularization import TripletFeatures, image_triplet_loss, object_triplet_loss
from .synthesis import load_image

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
WEIGHTS_FILE = "weights.pt"
ITERATION_FILE = "iteration.json"
CONFIG_FILE = "config.yaml"
LOG_FILE = "train_log.tsv"


@dataclass(frozen=True)
class TrainConfig:
    """Optimization schedule and loss composition knobs."""

    loss_weight: float = 0.1
    lr_phase1: float = 0.01
    lr_phase2: float = 0.001
    phase1_iters: int = 50000
    phase2_iters: int = 20000
    momentum: float = 0.9
    weight_decay: float = 0.0005
    aligned_mode: bool = True
    margin_delta: float = 1.0
    grad_clip_norm: float = 10.0
    lambda_smoothing: float = 0.0  # EMA decay for the classifier loss; 0 disables

    def __post_init__(self) -> None:
        if self.loss_weight < 0:
            raise ContractError(f"loss weight must be >= 0, got {self.loss_weight}")
        if self.phase1_iters < 0 or self.phase2_iters < 0:
            raise ContractError("phase lengths must be >= 0")

    @property
    def total_iters(self) -> int:
        return self.phase1_iters + self.phase2_iters


@dataclass(frozen=True)
class LossReport:
    """Every term of the composite objective for one iteration."""

    cls_loss: float
    reg_loss: float
    img_domain_loss: float
    obj_domain_loss: float
    img_triplet_loss: float
    obj_triplet_loss: float | None  # absent in unaligned mode
    lambda_img: float
    lambda_obj: float
    total: float


@dataclass
class TripletBatch:
    """Exactly one sample per domain; only the source carries labels."""

    source: DetectionSample
    target: DetectionSample
    auxiliary: DetectionSample

    def __post_init__(self) -> None:
        if self.source.annotations is None:
            raise ContractError("source sample must carry annotations")
        if self.target.annotations is not None:
            raise ContractError("target sample must not carry annotations")


def learning_rate_at(iteration: int, cfg: TrainConfig) -> float:
    """Two-phase schedule: lr_phase1 while iteration < phase1_iters, then lr_phase2."""
    return cfg.lr_phase1 if iteration < cfg.phase1_iters else cfg.lr_phase2


def total_loss(
    cls_loss: float,
    reg_loss: float,
    img_domain: float,
    obj_domain: float,
    img_triplet: float,
    obj_triplet: float | None,
    weight: float,
    aligned_mode: bool,
) -> float:
    """Composite objective; the exact arithmetic used for every LossReport."""
    components = {
        "cls_loss": cls_loss,
        "reg_loss": reg_loss,
        "img_domain_loss": img_domain,
        "obj_domain_loss": obj_domain,
        "img_triplet_loss": img_triplet,
    }
    if aligned_mode:
        if obj_triplet is None:
            raise ContractError("aligned mode requires the object-level triplet loss")
        components["obj_triplet_loss"] = obj_triplet
    for name, value in components.items():
        if not math.isfinite(value):
            raise NonFiniteLossError(f"{name} is non-finite ({value})")
    adaptation = img_domain + obj_domain + img_triplet
    if aligned_mode:
        adaptation = adaptation + obj_triplet
    return cls_loss + reg_loss + weight * adaptation


class AdaptationHeads(nn.Module):
    """Image- and object-level domain classifiers (training-only parameters)."""

    def __init__(self, config: DetectorConfig, seed: int = 0):
        super().__init__()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.image_classifier = ImageDomainClassifier(config.feature_channels)
            self.object_classifier = ObjectDomainClassifier(config.object_feature_dim)


class Trainer:
    """Owns the optimizer and applies one composite SGD update per batch."""

    def __init__(
        self,
        detector: Detector,
        heads: AdaptationHeads,
        train_cfg: TrainConfig,
        adv_cfg: AdversarialConfig,
        seed: int = 0,
    ):
        self.detector = detector
        self.heads = heads
        self.train_cfg = train_cfg
        self.adv_cfg = adv_cfg
        self.parameters = list(detector.parameters()) + list(heads.parameters())
        self.optimizer = torch.optim.SGD(
            self.parameters,
            lr=train_cfg.lr_phase1,
            momentum=train_cfg.momentum,
            weight_decay=train_cfg.weight_decay,
        )
        self.sampler_rng = np.random.default_rng([seed, 1])
        self.iteration = 0
        self._ema: dict[str, float] = {}

    def _smoothed(self, key: str, value: float) -> float:
        decay = self.train_cfg.lambda_smoothing
        if decay <= 0.0:
            return value
        prev = self._ema.get(key)
        smoothed = value if prev is None else decay * prev + (1.0 - decay) * value
        self._ema[key] = smoothed
        return smoothed

    def _source_detection(self, source: DetectionSample):
        det = self.detector
        fmap = det.extract_features(source.image)
        logits, deltas, anchors = det.rpn_outputs(fmap)
        rpn_cls, rpn_reg = det.rpn_losses(
            logits, deltas, anchors, source.annotations, self.sampler_rng
        )
        proposals = det._filter_proposals(
            logits, deltas, anchors, fmap, det.config.rpn_post_nms_top
        )
        if det.config.roi_append_gt and source.annotations:
            proposals = proposals + [Proposal(a.box, 1.0) for a in source.annotations]
        preds, feats = det.head_predictions(source.image_id, fmap, proposals)
        roi_cls, roi_reg = det.detection_losses(preds, source.annotations, source.image_id)
        return fmap, proposals, feats, rpn_cls + roi_cls, rpn_reg + roi_reg

    def train_step(self, batch: TripletBatch) -> LossReport:
        """One SGD update on the composite loss; raises on a non-finite total."""
        cfg = self.train_cfg
        det = self.detector
        w = cfg.loss_weight
        fmap_s, proposals_s, feats_s, l_cls, l_reg = self._source_detection(batch.source)

        if w == 0.0:
            # Source-only degenerate: adaptation terms contribute no gradient.
            l_img = l_obj = l_rimg = torch.zeros(())
            l_robj = torch.zeros(()) if cfg.aligned_mode else None
            lambda_img = lambda_obj = 0.0
            total_tensor = l_cls + l_reg
        else:
            fmap_t = det.extract_features(batch.target.image)
            fmap_a = det.extract_features(batch.auxiliary.image)

            holder_img = LambdaHolder(self.adv_cfg.lambda0)
            pred_s = self.heads.image_classifier(advgrl(fmap_s.activations, holder_img))
            pred_t = self.heads.image_classifier(advgrl(fmap_t.activations, holder_img))
            l_img = image_domain_loss([pred_s, pred_t], [Domain.SOURCE, Domain.TARGET])
            lambda_img = compute_lambda_adv(
                self._smoothed("img", float(l_img.detach())), self.adv_cfg
            )
            holder_img.value = lambda_img

            proposals_t = det.propose_regions(fmap_t, det.config.rpn_post_nms_top)
            feats_t = det.pool_object_features(fmap_t, proposals_t)
            holder_obj = LambdaHolder(self.adv_cfg.lambda0)
            pred_so = self.heads.object_classifier(advgrl(feats_s.features, holder_obj))
            pred_to = self.heads.object_classifier(advgrl(feats_t.features, holder_obj))
            l_obj = object_domain_loss([pred_so, pred_to], [Domain.SOURCE, Domain.TARGET])
            lambda_obj = compute_lambda_adv(
                self._smoothed("obj", float(l_obj.detach())), self.adv_cfg
            )
            holder_obj.value = lambda_obj

            l_rimg = image_triplet_loss(
                TripletFeatures(
                    fmap_s.activations, fmap_t.activations, fmap_a.activations,
                    margin=cfg.margin_delta,
                )
            )
            if cfg.aligned_mode:
                # Reuse the source proposal coordinates on all three maps.
                aligned_t = det.pool_object_features(fmap_t, proposals_s)
                aligned_a = det.pool_object_features(fmap_a, proposals_s)
                l_robj = object_triplet_loss(
                    TripletFeatures(
                        feats_s.features, aligned_t.features, aligned_a.features,
                        margin=cfg.margin_delta,
                    ),
                    aligned_mode=True,
                )
            else:
                l_robj = None
            adaptation = l_img + l_obj + l_rimg
            if l_robj is not None:
                adaptation = adaptation + l_robj
            total_tensor = l_cls + l_reg + w * adaptation

        cls_v = float(l_cls.detach())
        reg_v = float(l_reg.detach())
        img_v = float(l_img.detach())
        obj_v = float(l_obj.detach())
        rimg_v = float(l_rimg.detach())
        robj_v = None if l_robj is None else float(l_robj.detach())
        total_value = total_loss(
            cls_v, reg_v, img_v, obj_v, rimg_v, robj_v, w, cfg.aligned_mode
        )
        report = LossReport(
            cls_loss=cls_v,
            reg_loss=reg_v,
            img_domain_loss=img_v,
            obj_domain_loss=obj_v,
            img_triplet_loss=rimg_v,
            obj_triplet_loss=robj_v,
            lambda_img=lambda_img,
            lambda_obj=lambda_obj,
            total=total_value,
        )

        self.optimizer.zero_grad()
        total_tensor.backward()
        torch.nn.utils.clip_grad_norm_(self.parameters, cfg.grad_clip_norm)
        for group in self.optimizer.param_groups:
            group["lr"] = learning_rate_at(self.iteration, cfg)
        self.optimizer.step()
        self.iteration += 1
        return report


@dataclass
class TrainingResult:
    checkpoint_dir: Path
    reports: list[LossReport]
    skipped: int


def _load_cached(cache: dict, path: Path) -> np.ndarray:
    if path not in cache:
        cache[path] = np.rint(load_image(path) * 255.0).astype(np.uint8)
    return cache[path].astype(np.float32) / 255.0


def format_log_line(iteration: int, lr: float, report: LossReport) -> str:
    fields = [
        str(iteration),
        repr(lr),
        repr(report.cls_loss),
        repr(report.reg_loss),
        repr(report.img_domain_loss),
        repr(report.obj_domain_loss),
        repr(report.img_triplet_loss),
    ]
    if report.obj_triplet_loss is not None:
        fields.append(repr(report.obj_triplet_loss))
    fields += [repr(report.lambda_img), repr(report.lambda_obj), repr(report.total)]
    return "\t".join(fields)


def log_header(aligned_mode: bool) -> str:
    columns = ["iteration", "lr", "cls_loss", "reg_loss", "img_domain_loss",
               "obj_domain_loss", "img_triplet_loss"]
    if aligned_mode:
        columns.append("obj_triplet_loss")
    columns += ["lambda_img", "lambda_obj", "total"]
    return "\t".join(columns)


def run_training(
    source_set: DatasetManifest,
    target_set: DatasetManifest,
    aux_set: DatasetManifest,
    detector_cfg: DetectorConfig,
    train_cfg: TrainConfig,
    adv_cfg: AdversarialConfig,
    output_dir: Path | str,
    seed: int = 0,
    config_snapshot: dict | None = None,
) -> TrainingResult:
    """Run the full two-phase schedule and write a checkpoint directory.

    The auxiliary set must mirror the source set index-for-index (it is
    synthesized from it). In aligned mode an equally sized target set is
    paired by index as well; otherwise target images are drawn independently.
    """
    if len(source_set) == 0:
        raise ContractError("source set is empty")
    if len(aux_set) != len(source_set):
        raise ContractError(
            f"auxiliary set size {len(aux_set)} != source set size {len(source_set)}"
        )
    if len(target_set) == 0:
        raise ContractError("target set is empty")
    paired_target = train_cfg.aligned_mode and len(target_set) == len(source_set)

    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    detector = Detector(detector_cfg, seed=seed)
    heads = AdaptationHeads(detector_cfg, seed=seed + 1)
    trainer = Trainer(detector, heads, train_cfg, adv_cfg, seed=seed)
    batch_rng = np.random.default_rng([seed, 0])
    cache: dict[Path, np.ndarray] = {}
    reports: list[LossReport] = []
    skipped = 0

    log_path = output_dir / LOG_FILE
    with log_path.open("w", encoding="utf-8") as log:
        log.write(log_header(train_cfg.aligned_mode) + "\n")
        for iteration in range(train_cfg.total_iters):
            i = int(batch_rng.integers(len(source_set)))
            j = i if paired_target else int(batch_rng.integers(len(target_set)))
            src_entry = source_set.entries[i]
            batch = TripletBatch(
                source=DetectionSample(
                    image_id=src_entry.file,
                    image=_load_cached(cache, src_entry.path),
                    domain=Domain.SOURCE,
                    annotations=src_entry.boxes,
                ),
                target=DetectionSample(
                    image_id=target_set.entries[j].file,
                    image=_load_cached(cache, target_set.entries[j].path),
                    domain=Domain.TARGET,
                    annotations=None,
                ),
                auxiliary=DetectionSample(
                    image_id=aux_set.entries[i].file,
                    image=_load_cached(cache, aux_set.entries[i].path),
                    domain=Domain.AUXILIARY,
                    annotations=None,
                ),
            )
            lr = learning_rate_at(iteration, train_cfg)
            try:
                report = trainer.train_step(batch)
            except NonFiniteLossError as exc:
                logger.warning("iteration %d skipped: %s", iteration, exc)
                skipped += 1
                continue
            reports.append(report)
            log.write(format_log_line(iteration, lr, report) + "\n")

    save_checkpoint(output_dir, detector, heads, trainer.iteration, config_snapshot)
    return TrainingResult(checkpoint_dir=output_dir, reports=reports, skipped=skipped)


def save_checkpoint(
    output_dir: Path | str,
    detector: Detector,
    heads: AdaptationHeads,
    iteration: int,
    config_snapshot: dict | None = None,
) -> Path:
    """Write weights blob, iteration file and config snapshot into a directory."""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "detector_config": asdict(detector.config),
            "detector": detector.state_dict(),
            "adaptation": heads.state_dict(),
        },
        output_dir / WEIGHTS_FILE,
    )
    (output_dir / ITERATION_FILE).write_text(
        json.dumps(
            {
                "format_version": CHECKPOINT_FORMAT_VERSION,
                "iteration": iteration,
                "categories": list(detector.config.categories),
            },
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )
    if config_snapshot is not None:
        (output_dir / CONFIG_FILE).write_text(
            yaml.safe_dump(config_snapshot, sort_keys=False), encoding="utf-8"
        )
    return output_dir


def load_checkpoint(checkpoint_dir: Path | str) -> tuple[Detector, AdaptationHeads, dict]:
    """Rebuild the detector and adaptation heads from a checkpoint directory."""
    checkpoint_dir = Path(checkpoint_dir)
    weights_path = checkpoint_dir / WEIGHTS_FILE
    iter_path = checkpoint_dir / ITERATION_FILE
    if not weights_path.is_file():
        raise NotInitializedError(f"missing weights blob {weights_path}")
    if not iter_path.is_file():
        raise NotInitializedError(f"missing iteration file {iter_path}")
    blob = torch.load(weights_path, weights_only=False)
    if blob.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise NotInitializedError(
            f"unsupported checkpoint format {blob.get('format_version')!r}"
        )
    cfg_dict = dict(blob["detector_config"])
    cfg_dict["categories"] = tuple(cfg_dict["categories"])
    cfg_dict["channels"] = tuple(cfg_dict["channels"])
    cfg_dict["anchor_ratios"] = tuple(cfg_dict["anchor_ratios"])
    config = DetectorConfig(**cfg_dict)
    detector = Detector(config)
    detector.load_state_dict(blob["detector"])
    heads = AdaptationHeads(config)
    heads.load_state_dict(blob["adaptation"])
    meta = json.loads(iter_path.read_text(encoding="utf-8"))
    return detector, heads, meta
