"""Training loops: RPN alone, the 4-step alternating scheme, and
approximate joint training over a shared backbone."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .anchors import AnchorConfig, grid_anchors, inside_mask
from .assignment import NoLabeledAnchorsError, assign_labels, sample_minibatch
from .dataio import Scene, image_to_input
from .detector import (DetectorHead, RoiSampleConfig, detector_forward,
                       detector_loss, sample_rois)
from .nn import Param, SgdConfig, save_checkpoint, sgd_step
from .rng import Rng
from .rpn import (Backbone, LossWeights, ProposalParams, RpnHead, propose_arrays,
                  rpn_loss)
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainSchedule:
    total_iters: int
    lr: float = 0.06
    lr_drop_at: int | None = None   # default: 75% of total_iters
    momentum: float = 0.9
    weight_decay: float = 0.0005
    seed: int = 0

    def __post_init__(self):
        if self.lr_drop_at is None:
            self.lr_drop_at = (3 * self.total_iters) // 4
        if self.lr_drop_at > self.total_iters:
            raise ValueError("lr_drop_at must not exceed total_iters")

    def lr_at(self, iteration: int) -> float:
        return self.lr if iteration < self.lr_drop_at else self.lr * 0.1


@dataclass
class TrainState:
    backbone: Backbone
    rpn_head: RpnHead | None = None
    det_head: DetectorHead | None = None
    onestage_head: object | None = None
    shared_frozen: bool = False
    iteration: int = 0
    loss_log: list[dict] = field(default_factory=list)


def backbone_checksum(backbone: Backbone) -> str:
    h = hashlib.sha256()
    for p in backbone.params:
        h.update(p.value.data.tobytes())
    return h.hexdigest()


def _log_csv(rows: list[dict], path):
    if not rows:
        Path(path).write_text("")
        return
    keys = []
    for r in rows:
        for k in r:
            if k not in keys:
                keys.append(k)
    lines = [",".join(keys)]
    for r in rows:
        lines.append(",".join(
            "" if k not in r else
            (f"{r[k]:.6g}" if isinstance(r[k], float) else str(r[k]))
            for k in keys))
    Path(path).write_text("\n".join(lines) + "\n")


class _Feeder:
    """Deterministic epoch-shuffled scene order from the 'data' stream."""

    def __init__(self, n: int, rng: Rng):
        self.n = n
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0

    def next(self) -> int:
        if self.pos >= self.n:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        i = int(self.order[self.pos])
        self.pos += 1
        return i


def _precompute(scenes: list[Scene], cfg: AnchorConfig, backbone_stride: int):
    """Per-scene inputs, anchor sets, and assigned labels (image-size cached)."""
    inputs, asets, targets = [], {}, []
    for s in scenes:
        inputs.append(image_to_input(s.image))
        key = (s.width, s.height)
        if key not in asets:
            fa = grid_anchors(cfg, s.width // backbone_stride, s.height // backbone_stride)
            inside_mask(fa, s.width, s.height)
            asets[key] = fa
        targets.append(assign_labels(asets[key], s.boxes, s.width, s.height))
    return inputs, [asets[(s.width, s.height)] for s in scenes], targets


def train_rpn(scenes: list[Scene], state: TrainState, sched: TrainSchedule,
              anchor_cfg: AnchorConfig, weights: LossWeights,
              batch: int = 256, max_pos: int = 128) -> TrainState:
    """Image-centric SGD on the RPN loss; one image per minibatch."""
    if not scenes:
        raise ValueError("empty dataset")
    rng = Rng(sched.seed)
    feeder = _Feeder(len(scenes), rng.substream("data"))
    sample_rng = rng.substream("sampling")
    inputs, asets, targets = _precompute(scenes, anchor_cfg, state.backbone.stride)
    params = state.rpn_head.params
    if not state.shared_frozen:
        params = state.backbone.params + params
    state.backbone.set_trainable(not state.shared_frozen)

    for it in range(sched.total_iters):
        i = feeder.next()
        try:
            t = sample_minibatch(targets[i], sample_rng, batch=batch, max_pos=max_pos)
        except NoLabeledAnchorsError:
            log.warning("skipping image %d: no labelable anchors", i)
            continue
        feats = state.backbone.forward(Tensor(inputs[i]))
        cls, reg = state.rpn_head.forward(feats)
        w = LossWeights(weights.lam, weights.n_cls,
                        float(asets[i].feature_w * asets[i].feature_h))
        loss, cv, rv = rpn_loss(cls, reg, t, anchor_cfg.k, w)
        loss.backward()
        lr = sched.lr_at(it)
        sgd_step(params, SgdConfig(lr, sched.momentum, sched.weight_decay))
        state.loss_log.append({"iteration": state.iteration, "lr": lr,
                               "loss_cls": cv, "loss_reg": rv})
        state.iteration += 1
    return state


def proposals_for_scenes(scenes: list[Scene], backbone: Backbone, head: RpnHead,
                         anchor_cfg: AnchorConfig,
                         p: ProposalParams) -> list[np.ndarray]:
    out = []
    asets = {}
    for s in scenes:
        key = (s.width, s.height)
        if key not in asets:
            asets[key] = grid_anchors(anchor_cfg, s.width // backbone.stride,
                                      s.height // backbone.stride)
        feats = backbone.forward(Tensor(image_to_input(s.image)))
        cls, reg = head.forward(feats)
        boxes, _ = propose_arrays(cls.data, reg.data, asets[key], s.width, s.height, p)
        out.append(boxes)
    return out


def train_detector(scenes: list[Scene], proposals: list[np.ndarray],
                   state: TrainState, sched: TrainSchedule,
                   roi_cfg: RoiSampleConfig) -> TrainState:
    """SGD on the detector loss over sampled RoIs from fixed proposals."""
    if not scenes:
        raise ValueError("empty dataset")
    rng = Rng(sched.seed)
    feeder = _Feeder(len(scenes), rng.substream("data"))
    sample_rng = rng.substream("sampling")
    inputs = [image_to_input(s.image) for s in scenes]
    params = state.det_head.params
    if not state.shared_frozen:
        params = state.backbone.params + params
    state.backbone.set_trainable(not state.shared_frozen)
    scale = 1.0 / state.backbone.stride

    for it in range(sched.total_iters):
        i = feeder.next()
        batch = sample_rois(proposals[i], scenes[i].boxes, scenes[i].classes,
                            roi_cfg, sample_rng)
        if batch.labels.shape[0] == 0:
            log.warning("skipping image %d: no RoI candidates", i)
            continue
        feats = state.backbone.forward(Tensor(inputs[i]))
        cls, reg = detector_forward(feats, batch.rois, state.det_head, scale)
        loss, cv, rv = detector_loss(cls, reg, batch)
        loss.backward()
        lr = sched.lr_at(it)
        sgd_step(params, SgdConfig(lr, sched.momentum, sched.weight_decay))
        state.loss_log.append({"iteration": state.iteration, "lr": lr,
                               "loss_det_cls": cv, "loss_det_reg": rv})
        state.iteration += 1
    return state


def alternate_4step(scenes: list[Scene], sched_rpn: TrainSchedule,
                    sched_det: TrainSchedule, anchor_cfg: AnchorConfig,
                    weights: LossWeights, roi_cfg: RoiSampleConfig,
                    n_classes: int, head_dim: int = 64,
                    train_proposals: ProposalParams | None = None,
                    out_dir=None,
                    channels=(16, 32, 64, 64)) -> TrainState:
    """The pragmatic 4-step alternating scheme; ends with one shared backbone."""
    if train_proposals is None:
        train_proposals = ProposalParams(post_nms_top=2000, pre_nms_top=6000)
    seed = sched_rpn.seed
    init = Rng(seed).substream("init")

    # step 1: train RPN end to end from scratch
    bb1 = Backbone(init, channels=channels)
    rpn1 = RpnHead(init, bb1.out_dim, anchor_cfg.k, head_dim)
    s1 = TrainState(backbone=bb1, rpn_head=rpn1)
    train_rpn(scenes, s1, sched_rpn, anchor_cfg, weights)
    props = proposals_for_scenes(scenes, bb1, rpn1, anchor_cfg, train_proposals)

    # step 2: separate detector network on step-1 proposals (fresh backbone,
    # random init standing in for the paper's ImageNet initialization)
    bb2 = Backbone(init, channels=channels)
    det = DetectorHead(init, bb2.out_dim, n_classes)
    s2 = TrainState(backbone=bb2, det_head=det)
    train_detector(scenes, props, s2, sched_det, roi_cfg)

    # step 3: re-init the RPN head on step-2's backbone, conv layers frozen
    rpn3 = RpnHead(init, bb2.out_dim, anchor_cfg.k, head_dim)
    s3 = TrainState(backbone=bb2, rpn_head=rpn3, shared_frozen=True)
    pre = backbone_checksum(bb2)
    train_rpn(scenes, s3, sched_rpn, anchor_cfg, weights)
    assert backbone_checksum(bb2) == pre, "frozen backbone changed in step 3"

    # step 4: fine-tune the detector head, shared conv layers still frozen
    props = proposals_for_scenes(scenes, bb2, rpn3, anchor_cfg, train_proposals)
    s4 = TrainState(backbone=bb2, det_head=det, shared_frozen=True)
    train_detector(scenes, props, s4, sched_det, roi_cfg)
    assert backbone_checksum(bb2) == pre, "frozen backbone changed in step 4"

    final = TrainState(backbone=bb2, rpn_head=rpn3, det_head=det,
                       loss_log=s1.loss_log + s2.loss_log + s3.loss_log + s4.loss_log)
    if out_dir is not None:
        out_dir = Path(out_dir)
        for name, st in (("step1", s1), ("step2", s2), ("step3", s3), ("step4", s4)):
            save_checkpoint(_state_params(st), out_dir / f"{name}.frpn")
    return final


def joint_train(scenes: list[Scene], sched: TrainSchedule, anchor_cfg: AnchorConfig,
                weights: LossWeights, roi_cfg: RoiSampleConfig, n_classes: int,
                head_dim: int = 64,
                train_proposals: ProposalParams | None = None,
                channels=(16, 32, 64, 64)) -> TrainState:
    """Approximate joint training: both losses share one backbone; proposals
    are generated from detached head outputs, so no gradient flows through
    box coordinates."""
    if not scenes:
        raise ValueError("empty dataset")
    if train_proposals is None:
        train_proposals = ProposalParams(post_nms_top=2000, pre_nms_top=6000)
    init = Rng(sched.seed).substream("init")
    backbone = Backbone(init, channels=channels)
    rpn_head = RpnHead(init, backbone.out_dim, anchor_cfg.k, head_dim)
    det_head = DetectorHead(init, backbone.out_dim, n_classes)
    state = TrainState(backbone=backbone, rpn_head=rpn_head, det_head=det_head)

    rng = Rng(sched.seed)
    feeder = _Feeder(len(scenes), rng.substream("data"))
    sample_rng = rng.substream("sampling")
    inputs, asets, targets = _precompute(scenes, anchor_cfg, backbone.stride)
    params = backbone.params + rpn_head.params + det_head.params
    scale = 1.0 / backbone.stride

    for it in range(sched.total_iters):
        i = feeder.next()
        s = scenes[i]
        try:
            t = sample_minibatch(targets[i], sample_rng)
        except NoLabeledAnchorsError:
            log.warning("skipping image %d: no labelable anchors", i)
            continue
        feats = backbone.forward(Tensor(inputs[i]))
        cls, reg = rpn_head.forward(feats)
        w = LossWeights(weights.lam, weights.n_cls,
                        float(asets[i].feature_w * asets[i].feature_h))
        rloss, rcv, rrv = rpn_loss(cls, reg, t, anchor_cfg.k, w)
        # detached proposal coordinates: raw arrays only, no tape
        boxes, _ = propose_arrays(cls.data, reg.data, asets[i], s.width, s.height,
                                  train_proposals)
        batch = sample_rois(boxes, s.boxes, s.classes, roi_cfg, sample_rng)
        lr = sched.lr_at(it)
        row = {"iteration": state.iteration, "lr": lr, "loss_cls": rcv,
               "loss_reg": rrv, "loss_det_cls": 0.0, "loss_det_reg": 0.0}
        if batch.labels.shape[0]:
            dcls, dreg = detector_forward(feats, batch.rois, det_head, scale)
            dloss, dcv, drv = detector_loss(dcls, dreg, batch)
            total = rloss + dloss
            row["loss_det_cls"], row["loss_det_reg"] = dcv, drv
        else:
            total = rloss
        total.backward()
        sgd_step(params, SgdConfig(lr, sched.momentum, sched.weight_decay))
        state.loss_log.append(row)
        state.iteration += 1
    return state


def _state_params(state: TrainState) -> list[Param]:
    params = list(state.backbone.params)
    if state.rpn_head is not None:
        params += state.rpn_head.params
    if state.det_head is not None:
        params += state.det_head.params
    if state.onestage_head is not None:
        params += state.onestage_head.params
    return params


def save_state(state: TrainState, path):
    save_checkpoint(_state_params(state), path)


def write_loss_log(state: TrainState, path):
    _log_csv(state.loss_log, path)
