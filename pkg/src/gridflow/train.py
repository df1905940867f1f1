"""Two-stage training, MSE evaluation, the four-way ablation and heatmap reports."""

from __future__ import annotations

import csv
import io
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .data import (
    C_IN,
    C_OUT,
    OUTPUT_MINUTES,
    T_IN,
    T_OUT,
    ConcatSamples,
    Sample,
    extract_samples,
    read_movie,
    split_dataset,
)
from .optim import AdamState, adam_step
from .roadmask import RoadMasks, apply_masks, compute_masks
from .synth import MANIFEST_NAME, build_city, read_manifest
from .tensor import NonFiniteError
from .unet import ArchConfig, ModelParams, build_model, loss_and_grads, predict

logger = logging.getLogger(__name__)

ROW_LABELS = (
    "U-Net",
    "U-Net + Roadmap mask",
    "U-Net + Two-stage training",
    "Final model",
)
# Test-set MSE reported on the original competition data; kept only as context.
REFERENCE_MSE = (0.00119438, 0.00117991, 0.00117037, 0.00116868)

# sub-stream tags for seed derivation
_INIT, _PRETRAIN, _FINETUNE = 1, 2, 3


class TrainingDivergedError(FloatingPointError):
    def __init__(self, stage: str, epoch: int, batch: int, cause: Exception):
        super().__init__(f"non-finite values during {stage} at epoch {epoch}, batch {batch}: {cause}")
        self.stage = stage
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    pretrain_epochs: int = 5
    finetune_epochs: int = 1
    batch_size: int = 4
    seed: int = 0
    arch: ArchConfig = field(default_factory=ArchConfig)
    use_mask: bool = False
    use_two_stage: bool = False

    def validate(self) -> None:
        if self.pretrain_epochs < 0 or self.finetune_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class TrainResult:
    params: ModelParams
    losses: list[float]  # mean loss per epoch


def init_seed(seed: int) -> int:
    return int(np.random.SeedSequence([seed, _INIT]).generate_state(1)[0])


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    # Generator.permutation is a Fisher-Yates shuffle
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _stack(samples: Sequence[Sample], idx, dtype) -> tuple[np.ndarray, np.ndarray]:
    batch = [samples[int(i)] for i in idx]
    x = np.stack([s.input for s in batch]).astype(dtype, copy=False)
    y = np.stack([s.target for s in batch]).astype(dtype, copy=False)
    return x, y


def _run_epochs(
    params: ModelParams,
    samples: Sequence[Sample],
    epochs: int,
    cfg: TrainConfig,
    stage: str,
    tag: int,
) -> list[float]:
    if epochs == 0:
        return []
    if len(samples) == 0:
        raise ValueError(f"{stage}: empty sample set")
    dtype = next(iter(params.arrays.values())).dtype
    state = AdamState.for_params(params.arrays, learning_rate=cfg.learning_rate)
    losses = []
    for epoch in range(epochs):
        rng = np.random.default_rng([cfg.seed, tag, epoch])
        total, count = 0.0, 0
        for b, idx in enumerate(_batches(len(samples), cfg.batch_size, rng)):
            x, y = _stack(samples, idx, dtype)
            try:
                loss, grads = loss_and_grads(params, x, y)
                if not np.isfinite(loss):
                    raise NonFiniteError(f"loss is {loss}")
                adam_step(params.arrays, grads, state)
            except NonFiniteError as exc:
                raise TrainingDivergedError(stage, epoch, b, exc) from exc
            total += loss * len(idx)
            count += len(idx)
        losses.append(total / count)
        logger.info("%s epoch %d/%d: mean loss %.6g", stage, epoch + 1, epochs, losses[-1])
    return losses


def pretrain(cfg: TrainConfig, train_samples: Sequence[Sample], init: Optional[ModelParams] = None) -> TrainResult:
    """Adam on the MSE loss for ``cfg.pretrain_epochs`` shuffled passes.

    Parameters start from ``init`` when given, otherwise from
    :func:`build_model` seeded by ``cfg.seed``.
    """
    cfg.validate()
    if len(train_samples) == 0:
        raise ValueError("pretrain needs a non-empty training set")
    params = init.copy() if init is not None else build_model(cfg.arch, init_seed(cfg.seed))
    losses = _run_epochs(params, train_samples, cfg.pretrain_epochs, cfg, "pretrain", _PRETRAIN)
    return TrainResult(params, losses)


def finetune(cfg: TrainConfig, params: ModelParams, validation_samples: Sequence[Sample]) -> TrainResult:
    """Continue training on validation-regime samples with a fresh optimizer state."""
    cfg.validate()
    tuned = params.copy()
    losses = _run_epochs(tuned, validation_samples, cfg.finetune_epochs, cfg, "finetune", _FINETUNE)
    return TrainResult(tuned, losses)


@dataclass
class EvalReport:
    overall_mse: float
    per_timestamp_mse: list[float]
    per_channel_mse: list[float]
    n_samples: int

    def weighted_timestamp_mean(self) -> float:
        # every horizon covers the same number of elements
        return float(np.mean(self.per_timestamp_mse))

    def to_text(self) -> str:
        lines = [f"samples      {self.n_samples}", f"overall MSE  {self.overall_mse:.8f}"]
        for m, v in zip(OUTPUT_MINUTES, self.per_timestamp_mse):
            lines.append(f"{m:>3d} min      {v:.8f}")
        for c, v in enumerate(self.per_channel_mse):
            lines.append(f"channel {c}    {v:.8f}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n_samples", "overall_mse"] + [f"mse_{m}min" for m in OUTPUT_MINUTES] + [f"mse_ch{c}" for c in range(C_OUT)])
        w.writerow([self.n_samples, repr(self.overall_mse)] + [repr(v) for v in self.per_timestamp_mse + self.per_channel_mse])
        return buf.getvalue()


def evaluate_variants(
    predict_batch: Callable[[np.ndarray], np.ndarray],
    samples: Sequence[Sample],
    variants: Mapping[str, Callable[[np.ndarray], np.ndarray]],
    batch_size: int = 4,
) -> dict[str, EvalReport]:
    """One report per post-processing variant, sharing a single prediction pass.

    Squared errors are accumulated in float64.
    """
    if len(samples) == 0:
        raise ValueError("evaluation needs a non-empty test set")
    sq = {k: np.zeros((T_OUT, C_OUT), dtype=np.float64) for k in variants}
    per_cell = 0
    n = len(samples)
    for start in range(0, n, batch_size):
        batch = [samples[i] for i in range(start, min(n, start + batch_size))]
        x = np.stack([s.input for s in batch])
        y = np.stack([s.target for s in batch]).astype(np.float64)
        raw = predict_batch(x)
        for name, post in variants.items():
            p = np.asarray(post(raw), dtype=np.float64)
            if p.shape != y.shape:
                raise ValueError(f"prediction shape {p.shape} != target shape {y.shape}")
            sq[name] += ((p - y) ** 2).reshape(len(batch), T_OUT, C_OUT, -1).sum(axis=(0, 3))
        per_cell = y.shape[-2] * y.shape[-1]
    per_slot = n * per_cell
    return {
        name: EvalReport(
            overall_mse=float(acc.sum() / (per_slot * T_OUT * C_OUT)),
            per_timestamp_mse=[float(v) for v in acc.sum(axis=1) / (per_slot * C_OUT)],
            per_channel_mse=[float(v) for v in acc.sum(axis=0) / (per_slot * T_OUT)],
            n_samples=n,
        )
        for name, acc in sq.items()
    }


def evaluate_predictor(
    predict_batch: Callable[[np.ndarray], np.ndarray],
    samples: Sequence[Sample],
    batch_size: int = 4,
) -> EvalReport:
    """MSE report of ``predict_batch`` over ``samples``."""
    return evaluate_variants(predict_batch, samples, {"": lambda p: p}, batch_size)[""]


def evaluate(
    params: ModelParams,
    test_samples: Sequence[Sample],
    masks: Optional[RoadMasks] = None,
    batch_size: int = 4,
) -> EvalReport:
    """MSE of clamped (optionally masked) predictions against normalized targets."""
    return evaluate_predictor(lambda x: predict(params, x, masks), test_samples, batch_size)


def persistence_baseline(sample_input: np.ndarray) -> np.ndarray:
    """Repeat the last input frame's eight traffic channels for all six horizons.

    Accepts (C, H, W) or a batch (N, C, H, W).
    """
    x = np.asarray(sample_input)
    last = (T_IN - 1) * C_IN
    frame = x[..., last : last + C_OUT, :, :]
    reps = [1] * x.ndim
    reps[-3] = T_OUT
    return np.tile(frame, reps)


def evaluate_persistence(
    test_samples: Sequence[Sample], masks: Optional[RoadMasks] = None, batch_size: int = 4
) -> EvalReport:
    def fn(x):
        p = persistence_baseline(x)
        return apply_masks(p, masks) if masks is not None else p

    return evaluate_predictor(fn, test_samples, batch_size)


# ---------------------------------------------------------------------------
# scenario datasets


@dataclass
class ScenarioData:
    train: Sequence[Sample]
    validation: Sequence[Sample]
    test: Sequence[Sample]
    masks: RoadMasks
    static_map: np.ndarray
    split_days: dict[str, list[int]]


def load_scenario(
    data_dir: str | os.PathLike,
    train_stride: int = 1,
    val_stride: int = 1,
    test_stride: int = 1,
) -> ScenarioData:
    """Load a generated scenario: regime split, samples and training-set masks.

    The static intersection map is rebuilt from the city parameters echoed
    in the manifest header.
    """
    data_dir = Path(data_dir)
    manifest = read_manifest(data_dir / MANIFEST_NAME)
    gt = build_city(manifest.city_spec())
    static = gt.intersections
    splits = split_dataset(manifest.records, regimes=manifest.regimes())
    strides = {"train": train_stride, "validation": val_stride, "test": test_stride}
    movies = {k: [read_movie(data_dir / r.filename) for r in v] for k, v in splits.items()}
    masks = compute_masks(movies["train"])
    sets = {
        k: ConcatSamples(extract_samples(m, static, stride=strides[k]) for m in v) for k, v in movies.items()
    }
    return ScenarioData(
        train=sets["train"],
        validation=sets["validation"],
        test=sets["test"],
        masks=masks,
        static_map=static,
        split_days={k: [r.day_index for r in v] for k, v in splits.items()},
    )


def train_model(cfg: TrainConfig, data: ScenarioData) -> tuple[ModelParams, dict[str, list[float]]]:
    """Pretrain, then fine-tune on validation data when ``cfg.use_two_stage``."""
    pre = pretrain(cfg, data.train)
    curves = {"pretrain": pre.losses}
    params = pre.params
    if cfg.use_two_stage:
        ft = finetune(cfg, params, data.validation)
        curves["finetune"] = ft.losses
        params = ft.params
    return params, curves


# ---------------------------------------------------------------------------
# ablation


@dataclass
class AblationRow:
    label: str
    use_mask: bool
    use_two_stage: bool
    report: EvalReport


@dataclass
class AblationTable:
    rows: list[AblationRow]
    loss_curves: dict[str, list[float]] = field(default_factory=dict)
    persistence: Optional[EvalReport] = None

    def row(self, label: str) -> AblationRow:
        return next(r for r in self.rows if r.label == label)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(
            ["row_label", "use_mask", "use_two_stage", "overall_mse"] + [f"mse_{m}min" for m in OUTPUT_MINUTES]
        )
        for r in self.rows:
            w.writerow(
                [r.label, int(r.use_mask), int(r.use_two_stage), repr(r.report.overall_mse)]
                + [repr(v) for v in r.report.per_timestamp_mse]
            )
        return buf.getvalue()

    def to_text(self) -> str:
        width = max(len(r.label) for r in self.rows)
        head = f"{'Model':<{width}}  {'MSE':>12}  " + "  ".join(f"{m:>9d}m" for m in OUTPUT_MINUTES)
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(
                f"{r.label:<{width}}  {r.report.overall_mse:12.8f}  "
                + "  ".join(f"{v:10.7f}" for v in r.report.per_timestamp_mse)
            )
        if self.persistence is not None:
            lines.append(f"{'Persistence':<{width}}  {self.persistence.overall_mse:12.8f}  "
                         + "  ".join(f"{v:10.7f}" for v in self.persistence.per_timestamp_mse))
        lines.append("")
        lines.append("Reference test-set MSE on the original competition data (not reproducible here):")
        for label, v in zip(ROW_LABELS, REFERENCE_MSE):
            lines.append(f"  {label:<{width}}  {v:.8f}")
        return "\n".join(lines) + "\n"

    def loss_curve_csv(self) -> str:
        return loss_curve_csv(self.loss_curves)


def loss_curve_csv(curves: dict[str, list[float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "split", "mean_loss"])
    for split, values in curves.items():
        for e, v in enumerate(values, 1):
            w.writerow([e, split, repr(v)])
    return buf.getvalue()


def run_ablation(base_cfg: TrainConfig, dataset: ScenarioData, with_persistence: bool = True) -> AblationTable:
    """Evaluate {mask off/on} x {two-stage off/on} with shared seeds.

    The pretrained model is shared by the single-stage rows and is the
    starting point of the fine-tuned rows, so rows differ only in the
    ablated component.
    """
    cfg = replace(base_cfg, use_mask=False, use_two_stage=False)
    pre = pretrain(cfg, dataset.train)
    ft = finetune(cfg, pre.params, dataset.validation)
    models = {False: pre.params, True: ft.params}
    # masking is post-processing, so both mask settings share one forward pass
    variants = {False: lambda p: p, True: lambda p: apply_masks(p, dataset.masks)}
    reports = {
        two_stage: evaluate_variants(lambda x, m=model: predict(m, x), dataset.test, variants, cfg.batch_size)
        for two_stage, model in models.items()
    }
    combos = [(False, False), (True, False), (False, True), (True, True)]
    rows = []
    for label, (use_mask, two_stage) in zip(ROW_LABELS, combos):
        report = reports[two_stage][use_mask]
        rows.append(AblationRow(label, use_mask, two_stage, report))
        logger.info("%s: MSE %.8f", label, report.overall_mse)
    persistence = evaluate_persistence(dataset.test, batch_size=cfg.batch_size) if with_persistence else None
    return AblationTable(rows, {"pretrain": pre.losses, "finetune": ft.losses}, persistence)


# ---------------------------------------------------------------------------
# visual report


def write_pgm(path: str | os.PathLike, image: np.ndarray) -> None:
    """Plain-text (P2) graymap; values in [0, 1] map linearly onto 0..255."""
    img = np.rint(np.clip(image, 0.0, 1.0) * 255).astype(np.int64)
    h, w = img.shape
    rows = "\n".join(" ".join(str(v) for v in row) for row in img)
    Path(path).write_text(f"P2\n{w} {h}\n255\n{rows}\n", encoding="ascii")


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    tokens = Path(path).read_text(encoding="ascii").split()
    if tokens[0] != "P2":
        raise ValueError("not a plain-text graymap")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    vals = np.array([int(t) for t in tokens[4:]], dtype=np.int64)
    if vals.size != w * h or maxval != 255:
        raise ValueError("malformed graymap")
    return vals.reshape(h, w)


def frame_panel(frames: np.ndarray, slot: int) -> np.ndarray:
    """Mean over the eight traffic channels of one forecast horizon."""
    return frames[slot * C_OUT : (slot + 1) * C_OUT].mean(axis=0)


def emit_visual_report(
    params: ModelParams,
    sample: Sample,
    masks: Optional[RoadMasks],
    out_dir: str | os.PathLike,
    prediction: Optional[np.ndarray] = None,
) -> list[Path]:
    """Write ground-truth, prediction and absolute-difference heatmaps per horizon.

    Files are named ``{sample_id}_{minutes}min_{gt|pred|diff}.pgm``. A
    precomputed ``prediction`` may be passed instead of running the model.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pred = prediction if prediction is not None else predict(params, sample.input, masks)
    paths = []
    for slot, minutes in enumerate(OUTPUT_MINUTES):
        gt = frame_panel(sample.target, slot)
        pr = frame_panel(pred, slot)
        diff = np.abs(sample.target[slot * C_OUT : (slot + 1) * C_OUT] - pred[slot * C_OUT : (slot + 1) * C_OUT]).mean(axis=0)
        for kind, img in (("gt", gt), ("pred", pr), ("diff", diff)):
            p = out / f"{sample.sample_id}_{minutes}min_{kind}.pgm"
            write_pgm(p, img)
            paths.append(p)
    return paths
