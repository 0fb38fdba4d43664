"""Training and evaluation orchestration.

The flow for one cross-validation fold is:

1. train a 3D and a 2D segmentor on the training scans (CE + multi-class
   Dice on the final head and on every side head);
2. train the error-map predictor, generating its input masks on the fly with
   the frozen segmentors;
3. harvest 10 masks per test scan (2 segmentors x 5 heads), add the ground
   truth as an 11th record, predict error maps, and score them.
"""

from __future__ import annotations

import enum
import hashlib
import logging
import math
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import torch

from . import metrics
from .datagen import AugmentConfig, FoldSplit, augment, kfold_split, read_dataset_manifest
from .errormap import DEFAULT_TAU, SoftErrorMap, binarize, quality_indicator, true_error_map
from .models import (
    NETWORK_HEADS,
    HeadId,
    NetConfig,
    VoxResNet,
    build_predictor,
    build_segmentor,
    forward_all_heads,
    predict_soft_error,
    predictor_config,
    segmentor_config,
)
from .nn import backward, make_optimizer, step
from .nn.functional import composite_loss, softmax_channels
from .volume import LabelMask, VoxelGrid, load_grid, one_hot_labels, preprocess

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class Source(str, enum.Enum):
    SEG3D = "3D"
    SEG2D = "2D"
    GROUND_TRUTH = "GT"


AUTO_COMBOS = tuple((src, head) for src in (Source.SEG3D, Source.SEG2D) for head in NETWORK_HEADS)
MASKS_PER_SCAN = len(AUTO_COMBOS)


@dataclass(frozen=True, eq=False)
class Scan:
    scan_id: str
    image: VoxelGrid
    gt: LabelMask

    def __post_init__(self):
        if self.image.dims != self.gt.dims:
            raise ValueError(f"{self.scan_id}: image dims {self.image.dims} != gt dims {self.gt.dims}")


@dataclass(frozen=True, eq=False)
class MaskRecord:
    scan_id: str
    source: Source
    head: HeadId
    mask: LabelMask

    def __post_init__(self):
        if (self.source is Source.GROUND_TRUTH) != (self.head is HeadId.GTRUTH):
            raise ValueError("ground-truth source and GT head tag must go together")

    @property
    def mask_type(self) -> str:
        if self.source is Source.GROUND_TRUTH:
            return "GT"
        return f"{self.source.value}-{self.head.label}"


def mask_type_order() -> list[str]:
    return [f"{src.value}-{head.label}" for src in (Source.SEG3D, Source.SEG2D)
            for head in (HeadId.FINAL,) + NETWORK_HEADS[:4]] + ["GT"]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    steps_per_epoch: int = 40
    batch_size: int = 1
    slices_per_step: int = 8
    lr: float = 1e-3
    optimizer: str = "adam"
    head_weights: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0, 1.0)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.epochs < 0 or self.steps_per_epoch < 0:
            raise ValueError("epochs and steps per epoch must be non-negative")
        if self.batch_size < 1 or self.slices_per_step < 1 or not self.lr > 0:
            raise ValueError("batch size, slices per step and learning rate must be positive")
        if len(self.head_weights) != len(NETWORK_HEADS):
            raise ValueError(f"need {len(NETWORK_HEADS)} head weights (side 2..5, final)")
        if min(self.head_weights) < 0 or not sum(self.head_weights) > 0:
            raise ValueError("head weights must be non-negative with a positive sum")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch


@dataclass(frozen=True)
class PipelineConfig:
    num_classes: int = 3
    base_channels: int = 8
    blocks_per_stage: int = 1
    seg3d: TrainConfig = field(default_factory=TrainConfig)
    seg2d: TrainConfig = field(default_factory=TrainConfig)
    # the predictor is only read through its final head, so side heads get no loss by default
    predictor: TrainConfig = field(
        default_factory=lambda: TrainConfig(epochs=20, head_weights=(0.0, 0.0, 0.0, 0.0, 1.0)))
    include_gt_masks: bool = False
    tau: float = DEFAULT_TAU
    spacing: float = 2.0
    roi_margin: int = 8

    def net(self, kind: str) -> NetConfig:
        kw = dict(base_channels=self.base_channels, blocks_per_stage=self.blocks_per_stage)
        if kind == "seg3d":
            return segmentor_config(self.num_classes, rank=3, **kw)
        if kind == "seg2d":
            return segmentor_config(self.num_classes, rank=2, **kw)
        if kind == "predictor":
            return predictor_config(self.num_classes, **kw)
        raise ValueError(kind)


def config_to_dict(config: PipelineConfig) -> dict:
    return asdict(config)


def config_from_dict(data: dict) -> PipelineConfig:
    def train(d):
        d = dict(d)
        aug = {k: tuple(v) if isinstance(v, list) else v for k, v in d.pop("augment").items()}
        d["head_weights"] = tuple(d["head_weights"])
        return TrainConfig(augment=AugmentConfig(**aug), **d)

    data = dict(data)
    for key in ("seg3d", "seg2d", "predictor"):
        data[key] = train(data[key])
    return PipelineConfig(**data)


def load_scans(manifest, config: PipelineConfig | None = None, ids: Sequence[str] | None = None) -> list[Scan]:
    """Load and preprocess the scans listed in a dataset manifest."""
    config = config or PipelineConfig()
    scans = []
    for scan_id, image_path, gt_path in read_dataset_manifest(manifest):
        if ids is not None and scan_id not in ids:
            continue
        image, gt = load_grid(image_path), load_grid(gt_path)
        if not isinstance(image, VoxelGrid) or not isinstance(gt, LabelMask):
            raise ValueError(f"{scan_id}: expected an f32 image and a u8 label volume")
        if gt.num_classes != config.num_classes:
            raise ValueError(f"{scan_id}: gt declares C={gt.num_classes}, config expects {config.num_classes}")
        image, gt = preprocess(image, gt, config.spacing, config.roi_margin)
        scans.append(Scan(scan_id, image, gt))
    return scans


def derive_seed(*keys: int) -> int:
    """Stable 32-bit seed from a tuple of non-negative integers."""
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


def param_digest(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# inference helpers


def _as_input(image: np.ndarray, rank: int) -> torch.Tensor:
    x = torch.from_numpy(np.array(image, dtype=np.float32))
    # 2D models see the first axis as a batch of slices
    return x[None, None] if rank == 3 else x[:, None]


@torch.no_grad()
@torch.no_grad()
def segment_all_heads(model: VoxResNet, image: np.ndarray) -> list[tuple[HeadId, np.ndarray]]:
    """Per-head argmax label volumes for a ``(d, h, w)`` image.

    A 2D model is applied slice by slice along the first axis and the slices
    are restacked.
    """
    was_training = model.training
    model.eval()
    try:
        rank = model.config.rank
        out = []
        for head, probs in forward_all_heads(model, _as_input(image, rank)):
            labels = probs.argmax(dim=1)
            labels = labels[0] if rank == 3 else labels
            out.append((head, labels.numpy().astype(np.uint8)))
        return out
    finally:
        model.train(was_training)


def predictor_input(image: np.ndarray, labels: np.ndarray, num_classes: int) -> torch.Tensor:
    img = torch.from_numpy(np.array(image, dtype=np.float32))[None, None]
    oh = one_hot_labels(torch.from_numpy(labels.astype(np.int64))[None], num_classes + 1, channel_dim=1)
    return torch.cat([img, oh], dim=1)


@torch.no_grad()
def soft_error_map(predictor: VoxResNet, image: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    was_training = predictor.training
    predictor.eval()
    try:
        return predict_soft_error(predictor, predictor_input(image, labels, num_classes))[0].numpy()
    finally:
        predictor.train(was_training)


# ---------------------------------------------------------------------------
# training


def _deep_supervision_loss(logits: Sequence[torch.Tensor], target: torch.Tensor, weights, mode: str) -> torch.Tensor:
    total = None
    for w, z in zip(weights, logits):
        if w == 0:
            continue
        term = w * composite_loss(softmax_channels(z), target, mode)
        total = term if total is None else total + term
    return total


def _fit(model, sample_batch, config: TrainConfig, mode: str, seed: int, label: str,
         history: list | None) -> VoxResNet:
    rng = np.random.default_rng(seed)
    opt = make_optimizer(model.parameters(), config.optimizer, config.lr)
    model.train()
    for epoch in range(config.epochs):
        losses = []
        for _ in range(config.steps_per_epoch):
            x, target = sample_batch(rng)
            loss = _deep_supervision_loss(model(x), target, config.head_weights, mode)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"{label}: non-finite loss at epoch {epoch}")
            backward(loss)
            step(opt)
            losses.append(value)
        mean = float(np.mean(losses)) if losses else float("nan")
        log.info("%s epoch %d loss %.4f", label, epoch, mean)
        if history is not None:
            history.append(mean)
    model.eval()
    return model


def _draw_scan(scans: Sequence[Scan], rng, sample_log, label):
    scan = scans[int(rng.integers(len(scans)))]
    if sample_log is not None:
        sample_log.append((label, scan.scan_id))
    return scan


def train_segmentor(
    train_set: Sequence[Scan],
    config: TrainConfig,
    rank: int,
    net: NetConfig | None = None,
    seed: int = 0,
    sample_log: list | None = None,
    history: list | None = None,
) -> VoxResNet:
    """Train a 3D (``rank=3``) or slice-wise 2D (``rank=2``) segmentor.

    The loss is CE + multi-class Dice on all five heads. 2D models train on
    stacks of ``slices_per_step`` consecutive first-axis slices cropped from
    the augmented volume.
    """
    if not train_set:
        raise ValueError("empty training set")
    num_classes = train_set[0].gt.num_classes
    net = net or segmentor_config(num_classes, rank=rank)
    if net.rank != rank:
        raise ValueError(f"net config rank {net.rank} != requested rank {rank}")
    gen = torch.Generator().manual_seed(derive_seed(seed, 1))
    model = build_segmentor(net, gen)
    aug = config.augment
    patch = aug.patch_3d if rank == 3 else (config.slices_per_step,) + tuple(aug.patch_2d)
    label = f"seg{rank}d"

    def sample(rng):
        xs, ys = [], []
        for _ in range(config.batch_size):
            scan = _draw_scan(train_set, rng, sample_log, label)
            img, lab = augment(scan.image.data, scan.gt.labels, aug, rng, patch)
            xs.append(_as_input(img, rank))
            ys.append(torch.from_numpy(lab.astype(np.int64)))
        x = torch.cat(xs)
        y = torch.stack(ys) if rank == 3 else torch.cat(ys)
        return x, y

    return _fit(model, sample, config, "multiclass", derive_seed(seed, 2), label, history)


def train_predictor(
    seg3d: VoxResNet,
    seg2d: VoxResNet,
    train_set: Sequence[Scan],
    config: TrainConfig,
    net: NetConfig | None = None,
    seed: int = 0,
    include_gt: bool = False,
    sample_log: list | None = None,
    history: list | None = None,
) -> VoxResNet:
    """Train the error-map predictor with masks generated on the fly.

    Every sample draws a scan, augments it, then draws one of the 10
    (segmentor, head) combinations uniformly and runs the frozen segmentor
    on the augmented patch. The target is the per-voxel disagreement between
    that mask and the augmented ground truth.
    """
    if not train_set:
        raise ValueError("empty training set")
    num_classes = train_set[0].gt.num_classes
    net = net or predictor_config(num_classes)
    if net.in_channels != num_classes + 2:
        raise ValueError(f"predictor expects {net.in_channels} input channels, data implies {num_classes + 2}")
    gen = torch.Generator().manual_seed(derive_seed(seed, 3))
    model = build_predictor(net, gen)
    combos = list(AUTO_COMBOS) + ([(Source.GROUND_TRUTH, HeadId.GTRUTH)] if include_gt else [])
    models = {Source.SEG3D: seg3d, Source.SEG2D: seg2d}
    aug = config.augment

    def sample(rng):
        xs, ys = [], []
        for _ in range(config.batch_size):
            scan = _draw_scan(train_set, rng, sample_log, "predictor")
            img, lab = augment(scan.image.data, scan.gt.labels, aug, rng, aug.patch_3d)
            source, head = combos[int(rng.integers(len(combos)))]
            if source is Source.GROUND_TRUTH:
                mask = lab
            else:
                mask = dict(segment_all_heads(models[source], img))[head]
            xs.append(predictor_input(img, mask, num_classes))
            ys.append(torch.from_numpy((mask != lab).astype(np.int64)))
        return torch.cat(xs), torch.stack(ys)

    return _fit(model, sample, config, "binary", derive_seed(seed, 4), "predictor", history)


# ---------------------------------------------------------------------------
# mask harvesting and evaluation


def generate_masks(seg3d: VoxResNet, seg2d: VoxResNet, scans: Sequence[Scan]) -> list[MaskRecord]:
    """The 10 automatic masks per scan, ordered by scan, then 3D/2D, then head."""
    records = []
    for scan in scans:
        for source, model in ((Source.SEG3D, seg3d), (Source.SEG2D, seg2d)):
            for head, labels in segment_all_heads(model, scan.image.data):
                mask = LabelMask(labels, scan.gt.num_classes, scan.gt.spacing)
                records.append(MaskRecord(scan.scan_id, source, head, mask))
    return records


def gt_records(scans: Sequence[Scan]) -> list[MaskRecord]:
    return [MaskRecord(s.scan_id, Source.GROUND_TRUTH, HeadId.GTRUTH, s.gt) for s in scans]


def predict_error_map(predictor, image: VoxelGrid, mask: LabelMask, tau: float = DEFAULT_TAU):
    """Soft map, thresholded map and quality indicator for one (image, mask) pair."""
    if image.dims != mask.dims:
        raise ValueError(f"image dims {image.dims} != mask dims {mask.dims}")
    if isinstance(predictor, VoxResNet):
        soft = SoftErrorMap(soft_error_map(predictor, image.data, mask.labels, mask.num_classes))
    else:
        soft = predictor(image, mask)
    binary = binarize(soft, tau)
    return soft, binary, quality_indicator(binary)


class OraclePredictor:
    """Stand-in predictor that returns the true error map of each mask."""

    def __init__(self, scans: Sequence[Scan]):
        self._gt = {id(s.image): s.gt for s in scans}

    def __call__(self, image: VoxelGrid, mask: LabelMask) -> SoftErrorMap:
        return SoftErrorMap(true_error_map(mask, self._gt[id(image)]).bits.astype(np.float32))


@dataclass(frozen=True)
class EvalRow:
    scan_id: str
    source: Source
    head: HeadId
    prediction: metrics.MetricReport
    seg_dsc: float
    seg_acc: float
    qi: float

    @property
    def mask_type(self) -> str:
        return "GT" if self.source is Source.GROUND_TRUTH else f"{self.source.value}-{self.head.label}"


@dataclass(frozen=True)
class GroupRow:
    mask_type: str
    count: int
    dsc: float
    acc: float
    prec: float
    recl: float
    seg_dsc: float
    seg_acc: float


def _group(name: str, rows: Sequence[EvalRow]) -> GroupRow:
    def mean(values):
        return float(np.mean(values)) if values else float("nan")
    return GroupRow(
        mask_type=name,
        count=len(rows),
        dsc=mean([r.prediction.dsc for r in rows]),
        acc=mean([r.prediction.acc for r in rows]),
        prec=mean([r.prediction.prec for r in rows]),
        recl=mean([r.prediction.recl for r in rows]),
        seg_dsc=mean([r.seg_dsc for r in rows]),
        seg_acc=mean([r.seg_acc for r in rows]),
    )


@dataclass
class EvalReport:
    """Per-mask rows plus macro-averaged groups per mask type."""

    rows: list[EvalRow]

    def groups(self) -> list[GroupRow]:
        out = []
        for name in mask_type_order():
            members = [r for r in self.rows if r.mask_type == name]
            if members:
                out.append(_group(name, members))
        for src in (Source.SEG3D, Source.SEG2D):
            members = [r for r in self.rows if r.source is src]
            if members:
                out.append(_group(f"{src.value}-Average", members))
        auto = [r for r in self.rows if r.source is not Source.GROUND_TRUTH]
        out.append(_group("Overall-auto", auto))
        out.append(_group("Overall-GT", list(self.rows)))
        return out

    def group(self, name: str) -> GroupRow:
        for g in self.groups():
            if g.mask_type == name:
                return g
        raise KeyError(name)

    @property
    def qi(self) -> list[float]:
        return [r.qi for r in self.rows]

    @property
    def seg_acc(self) -> list[float]:
        return [r.seg_acc for r in self.rows]

    @property
    def seg_dsc(self) -> list[float]:
        return [r.seg_dsc for r in self.rows]

    @classmethod
    def pooled(cls, reports: Sequence["EvalReport"]) -> "EvalReport":
        rows = [r for rep in reports for r in rep.rows]
        return cls(sorted(rows, key=_row_key))


def _row_key(row: EvalRow):
    src_order = {Source.SEG3D: 0, Source.SEG2D: 1, Source.GROUND_TRUTH: 2}
    return (row.scan_id, src_order[row.source], -int(row.head) if row.head != HeadId.FINAL else 0)


def evaluate(predictor, records: Sequence[MaskRecord], scans: Sequence[Scan], tau: float = DEFAULT_TAU) -> EvalReport:
    """Score predicted error maps against true ones, and masks against ground truth."""
    by_id = {s.scan_id: s for s in scans}
    rows = []
    for rec in records:
        scan = by_id.get(rec.scan_id)
        if scan is None:
            raise KeyError(f"no ground truth for scan {rec.scan_id!r}")
        if rec.mask.dims != scan.gt.dims:
            raise ValueError(f"{rec.scan_id}: mask dims {rec.mask.dims} != scan dims {scan.gt.dims}")
        _, predicted, qi = predict_error_map(predictor, scan.image, rec.mask, tau)
        truth = true_error_map(rec.mask, scan.gt)
        _, seg_dsc = metrics.dice_multiclass(rec.mask, scan.gt)
        rows.append(EvalRow(
            scan_id=rec.scan_id,
            source=rec.source,
            head=rec.head,
            prediction=metrics.binary_report(predicted.bits, truth.bits),
            seg_dsc=seg_dsc,
            seg_acc=metrics.segmentation_accuracy(rec.mask, scan.gt),
            qi=qi,
        ))
    return EvalReport(sorted(rows, key=_row_key))


@dataclass(frozen=True)
class ScatterRow:
    scan_id: str
    source: str
    head_code: int
    qi: float
    acc: float
    dsc: float


@dataclass(frozen=True)
class QICorrelation:
    pcc_qi_acc: float
    pcc_qi_dsc: float
    mae_qi_acc: float
    scatter: tuple[ScatterRow, ...]


def correlate_qi(report: EvalReport) -> QICorrelation:
    """Agreement of QI with the real segmentation accuracy and Dice over all masks."""
    qi, acc, dsc = report.qi, report.seg_acc, report.seg_dsc
    scatter = tuple(
        ScatterRow(r.scan_id, r.source.value, int(r.head), r.qi, r.seg_acc, r.seg_dsc)
        for r in report.rows
    )
    return QICorrelation(
        pcc_qi_acc=metrics.pearson(qi, acc),
        pcc_qi_dsc=metrics.pearson(qi, dsc),
        mae_qi_acc=metrics.mae(qi, acc),
        scatter=scatter,
    )


# ---------------------------------------------------------------------------
# cross-validation


@dataclass
class FoldModels:
    seg3d: VoxResNet
    seg2d: VoxResNet
    predictor: VoxResNet
    histories: dict[str, list[float]]


@dataclass
class FoldResult:
    split: FoldSplit
    models: FoldModels
    report: EvalReport


@dataclass
class CrossValResult:
    folds: list[FoldResult]
    pooled: EvalReport
    correlation: QICorrelation | None


def train_fold(train_scans: Sequence[Scan], config: PipelineConfig, seed: int,
               sample_log: list | None = None) -> FoldModels:
    histories = {"seg3d": [], "seg2d": [], "predictor": []}
    seg3d = train_segmentor(train_scans, config.seg3d, 3, config.net("seg3d"), derive_seed(seed, 10),
                            sample_log, histories["seg3d"])
    seg2d = train_segmentor(train_scans, config.seg2d, 2, config.net("seg2d"), derive_seed(seed, 20),
                            sample_log, histories["seg2d"])
    predictor = train_predictor(seg3d, seg2d, train_scans, config.predictor, config.net("predictor"),
                                derive_seed(seed, 30), config.include_gt_masks, sample_log,
                                histories["predictor"])
    return FoldModels(seg3d, seg2d, predictor, histories)


def evaluate_fold(models: FoldModels, test_scans: Sequence[Scan], tau: float = DEFAULT_TAU) -> EvalReport:
    records = generate_masks(models.seg3d, models.seg2d, test_scans) + gt_records(test_scans)
    return evaluate(models.predictor, records, test_scans, tau)


def run_fold(split: FoldSplit, scans: Sequence[Scan], config: PipelineConfig, seed: int,
             sample_log: list | None = None) -> FoldResult:
    """Train on the split's training scans and evaluate on its test scans."""
    by_id = {s.scan_id: s for s in scans}
    train = [by_id[i] for i in split.train_ids]
    test = [by_id[i] for i in split.test_ids]
    models = train_fold(train, config, derive_seed(seed, 100 + split.fold), sample_log)
    return FoldResult(split, models, evaluate_fold(models, test, config.tau))


def _run_fold_isolated(split, scans, config, seed):
    torch.set_num_threads(1)
    return run_fold(split, scans, config, seed)


def run_cross_validation(
    scans: Sequence[Scan],
    k: int,
    config: PipelineConfig,
    seed: int = 0,
    sample_log: list | None = None,
    on_fold: Callable[[FoldResult], None] | None = None,
    jobs: int = 1,
) -> CrossValResult:
    """k-fold cross-validation; models only ever see their fold's training scans.

    With ``jobs > 1`` folds run in separate processes. Each fold derives its
    seeds from the master seed and its index, so results do not depend on
    scheduling. ``sample_log`` is only filled in sequential mode.
    """
    if len(scans) < k:
        raise ValueError(f"need at least {k} scans, got {len(scans)}")
    splits = kfold_split([s.scan_id for s in scans], k, seed)
    folds = []
    if jobs <= 1:
        for split in splits:
            result = run_fold(split, scans, config, seed, sample_log)
            if on_fold is not None:
                on_fold(result)
            folds.append(result)
    else:
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=min(jobs, k), mp_context=ctx) as pool:
            futures = [pool.submit(_run_fold_isolated, split, list(scans), config, seed) for split in splits]
            for fut in futures:
                result = fut.result()
                if on_fold is not None:
                    on_fold(result)
                folds.append(result)
    pooled = EvalReport.pooled([f.report for f in folds])
    try:
        corr = correlate_qi(pooled)
    except ValueError:
        corr = None
    return CrossValResult(folds, pooled, corr)


def with_steps(config: TrainConfig, epochs: int | None = None, steps_per_epoch: int | None = None) -> TrainConfig:
    return replace(
        config,
        epochs=config.epochs if epochs is None else epochs,
        steps_per_epoch=config.steps_per_epoch if steps_per_epoch is None else steps_per_epoch,
    )
