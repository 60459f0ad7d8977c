"""Trainable toy heatmap predictor, training for both loss modes, and
evaluation with the standard reporting conventions.

The predictor is a small shared-weight convolutional net applied per
view. Training mode "proposed-3d" backpropagates the mean 3D joint
error through fusion, camera projection and inverse augmentation;
"baseline-2d" trains the same network on mean 2D centre-of-mass error
and only lifts to 3D at inference, via depth indexing at the predicted
pixels.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import tensorgrad as tg
from .augment import (
    AugmentationConfig,
    apply_to_input,
    identity_record,
    invert_on_heatmap_tensor,
    sample_augmentation,
)
from .data import Scene, load_dataset, make_target_heatmaps, quantization_bound_cm
from .fusion import (
    JOINT_NAMES,
    JOINT_TYPES,
    Pose2,
    Pose3,
    lift_and_fuse_2d,
    pixel_coordinates,
    pose_distances,
    soft_center_stack,
    _multi_view_soft_centers,
    view_cloud_coords,
)
from .geometry import Point3
from .heatmap import Heatmap, MaskConfig, build_input_tensor, valid_pixel_mask
from .tensorgrad import AdamState, Tape, Tensor, adam_step, backward

__all__ = [
    "PipelineError",
    "ToyPredictor",
    "TrainConfig",
    "TrainResult",
    "EvalReport",
    "forward_scene",
    "train",
    "evaluate",
    "oracle_fusion_mpjpe",
]

J = len(JOINT_NAMES)
HIDDEN_CHANNELS = 16
VIEW_BUCKET_TYPES = ("shoulder", "hip", "elbow", "wrist")


class PipelineError(ValueError):
    """Invalid training/evaluation configuration or inputs."""


# ---------------------------------------------------------------------------
# predictor


class ToyPredictor:
    """conv 5->16 + relu, conv 16->16 + relu, conv 16->J, linear output.

    One instance is shared across views; a forward pass sees one view's
    5-channel input and emits one heatmap per joint at input resolution.
    """

    PARAM_SHAPES = {
        "conv1_w": (HIDDEN_CHANNELS, 5, 3, 3),
        "conv1_b": (HIDDEN_CHANNELS,),
        "conv2_w": (HIDDEN_CHANNELS, HIDDEN_CHANNELS, 3, 3),
        "conv2_b": (HIDDEN_CHANNELS,),
        "conv3_w": (J, HIDDEN_CHANNELS, 3, 3),
        "conv3_b": (J,),
    }

    def __init__(self, params: dict):
        for name, shape in self.PARAM_SHAPES.items():
            if name not in params or params[name].shape != shape:
                raise PipelineError(f"predictor parameter '{name}' missing or misshaped")
        self.params = params

    @classmethod
    def initialise(cls, seed: int) -> "ToyPredictor":
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in cls.PARAM_SHAPES.items():
            if name.endswith("_b"):
                params[name] = Tensor(np.zeros(shape), requires_grad=True)
            else:
                fan_in = int(np.prod(shape[1:]))
                params[name] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape),
                                      requires_grad=True)
        return cls(params)

    def forward(self, tape: Tape | None, channels: np.ndarray) -> Tensor:
        x = Tensor(channels)
        p = self.params
        h = tg.relu(tape, tg.conv2d(tape, x, p["conv1_w"], p["conv1_b"]))
        h = tg.relu(tape, tg.conv2d(tape, h, p["conv2_w"], p["conv2_b"]))
        return tg.conv2d(tape, h, p["conv3_w"], p["conv3_b"])

    def save(self, path, extra: dict | None = None) -> None:
        tg.save_checkpoint(path, self.params, extra)

    @classmethod
    def load(cls, path) -> tuple["ToyPredictor", dict]:
        params, extra = tg.load_checkpoint(path)
        return cls(params), extra


def _select_row(tape: Tape | None, t: Tensor, row: int) -> Tensor:
    """Tape node extracting one slice along a tensor's first axis."""
    vals = t.values[row]

    def vjp(g):
        out = np.zeros(t.shape)
        out[row] = g
        return (out,)

    out = Tensor(vals, requires_grad=t.requires_grad)
    if tape is not None and out.requires_grad:
        tape.record((t,), out, vjp, "select_row")
    return out


# ---------------------------------------------------------------------------
# per-person forward pass


@dataclass
class ViewForward:
    view: int
    masked: Tensor            # (J, H, W), exclusion-masked, original frame
    valid: np.ndarray         # (H, W) bool
    coords: np.ndarray        # (H*W, 3) shared-frame pixel positions


def forward_scene(predictor: ToyPredictor, scene: Scene, person: int,
                  records: dict | None, tape: Tape | None,
                  mask_cfg: MaskConfig = MaskConfig(),
                  coords_cache: dict | None = None,
                  oracle_heatmaps: dict | None = None) -> list:
    """Run the per-view chain for one person: build input, augment,
    predict, invert the augmentation, exclusion-mask. Returns one
    ViewForward per supporting view (empty list = no supporting views).

    With ``oracle_heatmaps`` (view -> (J,H,W) array), the predictor and
    augmentation are bypassed and the provided heatmaps are masked
    directly; this is the oracle path used by fusion verification.
    """
    supporting = [sv for sv in scene.views if person in sv.boxes]
    if not supporting:
        return []

    view_data = []
    for sv in supporting:
        box = sv.boxes[person]
        valid = valid_pixel_mask(box, sv.depth)
        if coords_cache is not None:
            key = (scene.id, sv.view)
            if key not in coords_cache:
                coords_cache[key] = view_cloud_coords(sv.depth, sv.camera)
            coords = coords_cache[key]
        else:
            coords = view_cloud_coords(sv.depth, sv.camera)
        view_data.append((sv, box, valid, coords))

    preds = {}
    if oracle_heatmaps is not None:
        for sv, _box, _valid, _coords in view_data:
            preds[sv.view] = Tensor(oracle_heatmaps[sv.view])
    else:
        recs, augmented = {}, {}
        for sv, box, _valid, _coords in view_data:
            rec = records.get(sv.view) if records else None
            if rec is None:
                rec = identity_record(sv.height, sv.width)
            recs[sv.view] = rec
            inp = build_input_tensor(sv.colour, sv.depth, box)
            augmented[sv.view] = apply_to_input(inp, rec).channels
        shapes = {a.shape for a in augmented.values()}
        if len(shapes) == 1 and len(view_data) > 1:
            stacked = np.stack([augmented[sv.view] for sv, *_ in view_data])
            batched = predictor.forward(tape, stacked)
            for i, (sv, *_rest) in enumerate(view_data):
                preds[sv.view] = _select_row(tape, batched, i)
        else:
            for sv, *_rest in view_data:
                preds[sv.view] = predictor.forward(tape, augmented[sv.view])
        for sv, *_rest in view_data:
            preds[sv.view] = invert_on_heatmap_tensor(tape, preds[sv.view],
                                                      recs[sv.view], mask_cfg.epsilon)

    out = []
    for sv, box, valid, coords in view_data:
        mask01 = np.broadcast_to(valid, (J,) + valid.shape).astype(np.float64)
        gated = tg.multiply(tape, preds[sv.view], Tensor(mask01))
        fill = Tensor((1.0 - mask01) * mask_cfg.epsilon)
        masked = tg.add(tape, gated, fill)
        out.append(ViewForward(view=sv.view, masked=masked, valid=valid, coords=coords))
    return out


def _fused_centers(tape: Tape | None, forwards: list) -> Tensor:
    return soft_center_stack(tape, [f.masked for f in forwards],
                             [f.coords for f in forwards])


def _person_loss_3d(tape: Tape, forwards: list, gt: Pose3) -> Tensor | None:
    """Mean 3D joint distance (meters) for one person, on the tape."""
    centers = _fused_centers(tape, forwards)
    total, count = None, 0
    for j, name in enumerate(JOINT_NAMES):
        target = gt.joints[name]
        if target is None:
            continue
        diff = tg.subtract(tape, _select_row(tape, centers, j), Tensor(target.as_array()))
        dist = tg.euclidean_norm(tape, diff)
        total = dist if total is None else tg.add(tape, total, dist)
        count += 1
    if total is None:
        return None
    return tg.scalar_divide(tape, total, float(count))


def _person_loss_2d(tape: Tape, forwards: list, scene: Scene, person: int) -> Tensor | None:
    """Mean 2D joint distance (pixels) over this person's supporting views."""
    total, count = None, 0
    for f in forwards:
        if not f.valid.any():
            continue
        h, w = f.valid.shape
        coms = _multi_view_soft_centers(tape, [f.masked], [pixel_coordinates(h, w)],
                                        "soft_center_2d")
        ref = scene.gt_pose2(person, f.view)
        for j, name in enumerate(JOINT_NAMES):
            target = ref.joints[name]
            if target is None:
                continue
            diff = tg.subtract(tape, _select_row(tape, coms, j), Tensor(np.asarray(target)))
            dist = tg.euclidean_norm(tape, diff)
            total = dist if total is None else tg.add(tape, total, dist)
            count += 1
    if total is None:
        return None
    return tg.scalar_divide(tape, total, float(count))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    mode: str = "proposed-3d"
    epochs: int = 12
    lr: float = 1e-3
    seed: int = 0
    augment: bool = True
    crop_h: int = 56
    crop_w: int = 72
    flip_prob: float = 0.5
    rot_deg_max: float = 15.0
    jitter_low: float = 0.8
    jitter_high: float = 1.2
    data_root: str | None = None
    fold: str = "train"
    checkpoint_path: str | None = None

    MODES = ("proposed-3d", "baseline-2d")

    def __post_init__(self):
        if self.mode not in self.MODES:
            raise PipelineError(f"mode must be one of {self.MODES}, got '{self.mode}'")
        if self.epochs <= 0 or self.lr <= 0:
            raise PipelineError("epochs and lr must be positive")

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise PipelineError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class TrainResult:
    predictor: ToyPredictor
    loss_curve: list
    best_epoch: int
    mode: str


def train(cfg: TrainConfig, scenes: list | None = None) -> TrainResult:
    """Deterministic training over scenes (batch = one scene: gradients
    are accumulated over that scene's persons, then one Adam step)."""
    if scenes is None:
        if cfg.data_root is None:
            raise PipelineError("no scenes given and no data_root configured")
        scenes = load_dataset(cfg.data_root, cfg.fold)
    if not scenes:
        raise PipelineError("training dataset is empty")

    rng = np.random.default_rng(cfg.seed)
    predictor = ToyPredictor.initialise(cfg.seed)
    state = AdamState(lr=cfg.lr)
    coords_cache: dict = {}
    curve = []
    best = np.inf
    best_epoch = -1

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(scenes))
        epoch_losses = []
        for idx in order:
            scene = scenes[idx]
            person_grads = []
            person_losses = []
            for person in scene.persons():
                views = scene.supporting_views(person)
                if not views:
                    continue
                records = {}
                for v in views:
                    sv = scene.views[v]
                    if cfg.augment:
                        aug_cfg = AugmentationConfig(
                            image_h=sv.height, image_w=sv.width,
                            crop_h=min(cfg.crop_h, sv.height), crop_w=min(cfg.crop_w, sv.width),
                            flip_prob=cfg.flip_prob, rot_deg_max=cfg.rot_deg_max,
                            jitter_low=cfg.jitter_low, jitter_high=cfg.jitter_high,
                        )
                        records[v] = sample_augmentation(aug_cfg, rng)
                    else:
                        records[v] = identity_record(sv.height, sv.width)
                tape = Tape()
                forwards = forward_scene(predictor, scene, person, records, tape,
                                         coords_cache=coords_cache)
                if not any(f.valid.any() for f in forwards):
                    continue
                if cfg.mode == "proposed-3d":
                    loss = _person_loss_3d(tape, forwards, scene.gt_pose3(person))
                else:
                    loss = _person_loss_2d(tape, forwards, scene, person)
                if loss is None:
                    continue
                grads = backward(tape, loss)
                person_grads.append({name: grads.get(t) for name, t in predictor.params.items()})
                person_losses.append(loss.item())
            if not person_losses:
                continue
            scale = 1.0 / len(person_losses)
            total = {}
            for g in person_grads:
                for name, arr in g.items():
                    if arr is None:
                        continue
                    if name in total:
                        total[name] += arr * scale
                    else:
                        total[name] = arr * scale
            adam_step(predictor.params, total, state)
            epoch_losses.append(float(np.mean(person_losses)))
        mean_loss = float(np.mean(epoch_losses)) if epoch_losses else np.inf
        curve.append(mean_loss)
        if mean_loss < best:
            best = mean_loss
            best_epoch = epoch
            if cfg.checkpoint_path:
                predictor.save(cfg.checkpoint_path,
                               extra={"mode": cfg.mode, "epoch": epoch, "loss": mean_loss})
    if cfg.checkpoint_path and best_epoch < 0:
        predictor.save(cfg.checkpoint_path, extra={"mode": cfg.mode, "epoch": -1})
    return TrainResult(predictor=predictor, loss_curve=curve, best_epoch=best_epoch, mode=cfg.mode)


# ---------------------------------------------------------------------------
# inference and evaluation


def _predict_pose3(predictor: ToyPredictor | None, scene: Scene, person: int,
                   mode: str, coords_cache: dict | None = None,
                   oracle_cfg: tuple | None = None) -> Pose3 | None:
    if oracle_cfg is not None:
        sigma, amplitude = oracle_cfg
        oracle = {v: make_target_heatmaps(scene, v, person, sigma, amplitude)
                  for v in scene.supporting_views(person)}
        forwards = forward_scene(None, scene, person, None, None,
                                 coords_cache=coords_cache, oracle_heatmaps=oracle)
    else:
        forwards = forward_scene(predictor, scene, person, None, None,
                                 coords_cache=coords_cache)
    if not forwards or not any(f.valid.any() for f in forwards):
        return None

    if mode == "proposed-3d":
        centers = _fused_centers(None, forwards).values
        joints = {name: Point3(*centers[j]) for j, name in enumerate(JOINT_NAMES)}
        return Pose3(person=person, joints=joints)

    poses2d, depths, cameras, heatmaps = [], {}, {}, {}
    for f in forwards:
        sv = scene.views[f.view]
        depths[f.view] = sv.depth
        cameras[f.view] = sv.camera
        joints2d = {}
        if f.valid.any():
            h, w = f.valid.shape
            coms = _multi_view_soft_centers(None, [f.masked], [pixel_coordinates(h, w)],
                                            "soft_center_2d").values
            for j, name in enumerate(JOINT_NAMES):
                joints2d[name] = (float(coms[j, 0]), float(coms[j, 1]))
                heatmaps[(f.view, name)] = Heatmap(view=f.view, joint=j,
                                                   raster=f.masked.values[j], valid=f.valid)
        else:
            joints2d = {name: None for name in JOINT_NAMES}
        poses2d.append(Pose2(person=person, view=f.view, joints=joints2d))
    return lift_and_fuse_2d(poses2d, depths, cameras, heatmaps)


@dataclass
class EvalReport:
    mode: str
    scene_count: int
    pose_count: int
    mpjpe_cm: dict                     # joint type -> cm, plus "average"
    per_view_support: dict             # str(view count) -> {type: cm, "average": cm, "pose_count": n}

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @staticmethod
    def from_json(text: str) -> "EvalReport":
        doc = json.loads(text)
        return EvalReport(**doc)


def _type_scores(distances: dict) -> dict:
    """Per-joint-type MPJPE in cm from {(person-key, joint-name): meters},
    averaging the left and right part scores of paired types."""
    per_joint = {}
    for (_key, name), dist in distances.items():
        per_joint.setdefault(name, []).append(dist)
    scores = {}
    for jtype, members in JOINT_TYPES.items():
        member_scores = [np.mean(per_joint[m]) * 100.0 for m in members if m in per_joint]
        if member_scores:
            scores[jtype] = float(np.mean(member_scores))
    return scores


def evaluate(scenes: list, mode: str, predictor: ToyPredictor | None = None,
             oracle_cfg: tuple | None = None) -> EvalReport:
    """Score a dataset: per-joint-type MPJPE with left/right averaging,
    and the per-supporting-view-count breakdown over shoulders, hips,
    elbows and wrists."""
    if mode not in TrainConfig.MODES:
        raise PipelineError(f"unknown evaluation mode '{mode}'")
    if predictor is None and oracle_cfg is None:
        raise PipelineError("evaluate needs a predictor or an oracle configuration")
    if not scenes:
        raise PipelineError("evaluation dataset is empty")
    coords_cache: dict = {}
    all_dists = {}
    bucket_dists = {}
    bucket_poses = {}
    pose_count = 0
    for si, scene in enumerate(scenes):
        for person in scene.persons():
            support = len(scene.supporting_views(person))
            if support == 0:
                continue
            pred = _predict_pose3(predictor, scene, person, mode,
                                  coords_cache=coords_cache, oracle_cfg=oracle_cfg)
            if pred is None:
                continue
            dists = pose_distances([pred], [scene.gt_pose3(person)])
            if not dists:
                continue
            pose_count += 1
            for (p, name), dv in dists.items():
                all_dists[((si, p), name)] = dv
                bucket_dists.setdefault(support, {})[((si, p), name)] = dv
            bucket_poses[support] = bucket_poses.get(support, 0) + 1

    scores = _type_scores(all_dists)
    if not scores:
        raise PipelineError("no scorable poses in evaluation dataset")
    scores["average"] = float(np.mean([scores[t] for t in JOINT_TYPES if t in scores]))

    per_view = {}
    for support, dists in sorted(bucket_dists.items()):
        s = _type_scores(dists)
        entry = {t: s[t] for t in VIEW_BUCKET_TYPES if t in s}
        if entry:
            entry["average"] = float(np.mean(list(entry.values())))
        entry["pose_count"] = bucket_poses[support]
        per_view[str(support)] = entry

    return EvalReport(mode=mode, scene_count=len(scenes), pose_count=pose_count,
                      mpjpe_cm=scores, per_view_support=per_view)


def oracle_fusion_mpjpe(scene: Scene, sigma: float = 1.0,
                        amplitude: float = 80.0) -> tuple[float, float]:
    """Fuse ideal Gaussian heatmaps through the full pipeline and compare
    with the scene's quantization bound.

    Returns (pipeline MPJPE cm, bound cm), both averaged over the joints
    that are visible in at least one supporting view.
    """
    coords_cache: dict = {}
    dists = []
    for person in scene.persons():
        support = scene.supporting_views(person)
        if not support:
            continue
        oracle = {v: make_target_heatmaps(scene, v, person, sigma, amplitude)
                  for v in support}
        forwards = forward_scene(None, scene, person, None, None,
                                 coords_cache=coords_cache, oracle_heatmaps=oracle)
        if not any(f.valid.any() for f in forwards):
            continue
        centers = _fused_centers(None, forwards).values
        gt = scene.joints3d[person]
        for jdx, name in enumerate(JOINT_NAMES):
            if not any(scene.visibility[(person, v)][name] for v in support):
                continue
            dists.append(float(np.linalg.norm(centers[jdx] - gt[name].as_array())))
    if not dists:
        raise PipelineError(f"{scene.id}: nothing to score in oracle fusion")
    return float(np.mean(dists)) * 100.0, quantization_bound_cm(scene)
