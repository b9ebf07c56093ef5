"""Two-stage training, sequence inference, and the run-configuration format.

Stage 1 trains detection on single frames (no query propagation); stage 2
samples clips of N consecutive-ish frames (randomized stride), propagates
track queries through the clip with ground-truth-driven supervision, and
takes one optimizer step per clip on the collective average loss.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import MotBox, SequenceDescriptor, load_image, parse_gt
from .losses import LossWeights, cal_loss, frame_loss, stage1_loss, tala_assign
from .model import Checkpoint, ModelConfig, TrackerModel, build_model, save_checkpoint
from .queries import QueryManager, QuerySet, Thresholds

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    stage: int = 1
    iterations: int = 500
    learning_rate: float = 2e-4
    lr_drop_frac: float = 0.8
    lr_drop_factor: float = 0.1
    grad_clip: float = 0.1
    batch_size: int = 2
    clip_length: int = 5
    stride_choices: tuple[int, ...] = (1, 2, 3)
    seed: int = 0
    detach_refs: bool = True


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    thresholds: Thresholds = field(default_factory=Thresholds)
    weights: LossWeights = field(default_factory=LossWeights)


_PRESETS = {"default": ModelConfig, "desk": ModelConfig.desk, "tiny": ModelConfig.tiny}


def _coerce(raw: str, template, key: str):
    if isinstance(template, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected boolean, got {raw!r}")
    if isinstance(template, int) and not isinstance(template, bool):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected integer, got {raw!r}") from None
    if isinstance(template, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected number, got {raw!r}") from None
    if isinstance(template, tuple):
        try:
            return tuple(int(v.strip()) for v in raw.split(",") if v.strip())
        except ValueError:
            raise ConfigError(f"{key}: expected comma-separated integers, got {raw!r}") from None
    return raw


def _apply_section(obj, items: dict[str, str], section: str):
    valid = {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}
    updates = {}
    for key, raw in items.items():
        if key not in valid:
            raise ConfigError(f"unknown key {section}.{key}")
        updates[key] = _coerce(raw, valid[key], f"{section}.{key}")
    return replace(obj, **updates)


def _apply_model_section(model: ModelConfig, items: dict[str, str]) -> ModelConfig:
    items = dict(items)
    preset = items.pop("preset", None)
    if preset is not None:
        if preset not in _PRESETS:
            raise ConfigError(f"unknown model.preset {preset!r}; choose from {sorted(_PRESETS)}")
        model = _PRESETS[preset]()
    backbone_keys = {f.name for f in dataclasses.fields(model.backbone)}
    bb_items = {k: v for k, v in items.items() if k in backbone_keys}
    rest = {k: v for k, v in items.items() if k not in backbone_keys}
    backbone = _apply_section(model.backbone, bb_items, "model")
    model = replace(model, backbone=backbone)
    return _apply_section(model, rest, "model")


def load_run_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    """Build a RunConfig from an INI-style file plus dotted overrides.

    Unknown sections or keys are rejected with the offending name.
    """
    import configparser

    sections: dict[str, dict[str, str]] = {}
    if path is not None:
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise ConfigError(f"cannot read config file {path}")
        for sec in parser.sections():
            sections[sec] = dict(parser[sec])
    for text in overrides or []:
        if "=" not in text or "." not in text.split("=", 1)[0]:
            raise ConfigError(f"override {text!r} must look like section.key=value")
        dotted, value = text.split("=", 1)
        sec, key = dotted.split(".", 1)
        sections.setdefault(sec.strip(), {})[key.strip()] = value.strip()

    known = {"model", "train", "thresholds", "weights"}
    unknown = set(sections) - known
    if unknown:
        raise ConfigError(f"unknown config section(s) {sorted(unknown)}")

    run = RunConfig()
    if "model" in sections:
        run = replace(run, model=_apply_model_section(run.model, sections["model"]))
    if "train" in sections:
        run = replace(run, train=_apply_section(run.train, sections["train"], "train"))
    if "thresholds" in sections:
        run = replace(run, thresholds=_apply_section(run.thresholds, sections["thresholds"], "thresholds"))
    if "weights" in sections:
        run = replace(run, weights=_apply_section(run.weights, sections["weights"], "weights"))
    return run


def save_run_config(path, run: RunConfig) -> None:
    """Write the fully resolved configuration snapshot."""

    def items(obj) -> list[str]:
        out = []
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            out.append(f"{f.name}={v}")
        return out

    lines = ["[model]"]
    lines += items(run.model.backbone)
    lines += [kv for kv in items(run.model) if not kv.startswith("backbone=")]
    lines = [l for l in lines if not l.startswith("backbone=")]
    lines += ["", "[train]"] + items(run.train)
    lines += ["", "[thresholds]"] + items(run.thresholds)
    lines += ["", "[weights]"] + items(run.weights)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")


class SequenceData:
    """One sequence's descriptor, parsed ground truth, and frame access."""

    def __init__(self, descriptor: SequenceDescriptor, gt: dict[int, list[MotBox]] | None = None,
                 frame_offset: int = 0):
        self.descriptor = descriptor
        if gt is None:
            gt_path = (descriptor.root or Path(".")) / "gt" / "gt.txt"
            gt = parse_gt(gt_path) if gt_path.exists() else {}
        self.gt = gt
        self.frame_offset = frame_offset
        self._gt_cache: dict[tuple[int, torch.dtype], tuple[torch.Tensor, list[int]]] = {}

    @property
    def name(self) -> str:
        return self.descriptor.name

    @property
    def num_frames(self) -> int:
        return self.descriptor.seq_length

    def frame_image(self, frame: int, size: tuple[int, int], dtype=torch.float32) -> torch.Tensor:
        """Image tensor [3, H, W] in [0, 1], resized to the model input size."""
        path = self.descriptor.image_path(frame + self.frame_offset)
        array = load_image(path)
        img = torch.from_numpy(array).permute(2, 0, 1).to(dtype) / 255.0
        if (img.shape[1], img.shape[2]) != size:
            img = F.interpolate(img[None], size=size, mode="bilinear", align_corners=False)[0]
        return img

    def frame_gt(self, frame: int, dtype=torch.float32) -> tuple[torch.Tensor, list[int]]:
        """Normalized cxcywh gt boxes and identities for one frame."""
        key = (frame, dtype)
        if key not in self._gt_cache:
            w, h = self.descriptor.im_width, self.descriptor.im_height
            boxes, ids = [], []
            for row in self.gt.get(frame, []):
                l, t, bw, bh = row.ltwh
                x1 = max(l / w, 0.0)
                y1 = max(t / h, 0.0)
                x2 = min((l + bw) / w, 1.0)
                y2 = min((t + bh) / h, 1.0)
                if x2 - x1 <= 0 or y2 - y1 <= 0:
                    continue  # entirely outside the image
                boxes.append([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1])
                ids.append(row.identity)
            tensor = torch.tensor(boxes, dtype=dtype) if boxes else torch.zeros(0, 4, dtype=dtype)
            self._gt_cache[key] = (tensor, ids)
        return self._gt_cache[key]


def load_sequences(directory) -> list[SequenceData]:
    from .data import list_sequences

    return [SequenceData(desc) for desc in list_sequences(directory)]


class LossLog:
    COLUMNS = "iteration,stage,loss,cls,l1,giou"

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists():
            self.path.write_text(self.COLUMNS + "\n")

    def append(self, iteration: int, stage: int, loss: float, cls: float, l1: float, giou: float):
        with open(self.path, "a") as fh:
            fh.write(f"{iteration},{stage},{loss:.8f},{cls:.8f},{l1:.8f},{giou:.8f}\n")


def _set_lr(optimizer: torch.optim.Optimizer, run: RunConfig, iteration: int) -> None:
    lr = run.train.learning_rate
    if iteration >= int(run.train.lr_drop_frac * run.train.iterations):
        lr *= run.train.lr_drop_factor
    for group in optimizer.param_groups:
        group["lr"] = lr


def _check_finite(loss: torch.Tensor, stage: int, iteration: int) -> None:
    if not torch.isfinite(loss):
        raise RuntimeError(
            f"stage {stage} diverged: non-finite loss {float(loss)} at iteration {iteration}"
        )


def train_stage1(sequences: list[SequenceData], run: RunConfig, out_dir,
                 resume: Checkpoint | None = None, iterations: int | None = None) -> Path:
    """Detection-only training on uniformly sampled single frames."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    iterations = iterations if iterations is not None else run.train.iterations
    size = (run.model.input_height, run.model.input_width)

    model = build_model(run.model, seed=run.train.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=run.train.learning_rate)
    start = 0
    if resume is not None:
        resume.load_into(model)
        resume.load_optimizer(model, optimizer)
        start = resume.iteration
    model.train()

    frames = [(si, f) for si, seq in enumerate(sequences) for f in range(1, seq.num_frames + 1)]
    if not frames:
        raise ValueError("no frames to train on")
    logger = LossLog(out_dir / "loss_stage1.csv")

    for it in range(start, iterations):
        _set_lr(optimizer, replace(run, train=replace(run.train, iterations=iterations)), it)
        rng = np.random.default_rng([run.train.seed, 1, it])
        picks = [frames[int(i)] for i in rng.integers(0, len(frames), size=run.train.batch_size)]
        images = torch.stack([sequences[si].frame_image(f, size) for si, f in picks])
        out = model(images)

        losses = []
        comps = np.zeros(3)
        for b, (si, f) in enumerate(picks):
            gt_boxes, _ = sequences[si].frame_gt(f)
            single = type(out)(logits=out.logits[:, b : b + 1], boxes=out.boxes[:, b : b + 1],
                               hidden=out.hidden[b : b + 1])
            loss_b, bd = stage1_loss(single, gt_boxes, run.weights)
            losses.append(loss_b)
            d = bd.detached()
            denom = max(bd.v, 1)
            comps += (d["cls"] / denom, d["l1"] / denom, d["giou"] / denom)
        loss = torch.stack(losses).mean()
        _check_finite(loss, 1, it)

        optimizer.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), run.train.grad_clip)
        optimizer.step()
        comps /= len(picks)
        logger.append(it, 1, float(loss.detach()), *comps)

    path = out_dir / "stage1.npz"
    save_checkpoint(path, model, optimizer=optimizer, stage=1, iteration=iterations)
    return path


def run_clip(model: TrackerModel, seq: SequenceData, frames: list[int], run: RunConfig,
             collect_grads: bool = True):
    """Forward a training clip; returns per-frame loss breakdowns.

    Track queries propagate between frames under ground-truth-driven
    supervision; gradients flow through the aggregated embeddings (reference
    boxes detach when configured).
    """
    size = (run.model.input_height, run.model.input_width)
    manager = QueryManager(tan=model.tan, thresholds=run.thresholds)
    track = QuerySet.empty(run.model.dim)
    breakdowns = []
    for f in frames:
        image = seq.frame_image(f, size)[None]
        memory = model.encode_image(image)
        queries = track.concat(model.detect_query_set())
        out = model.decode(memory, queries)
        gt_boxes, gt_ids = seq.frame_gt(f)
        match = tala_assign(queries, out, gt_boxes, gt_ids, manager.live_id_map, run.weights)
        breakdowns.append(frame_loss(out, match, gt_boxes, run.weights))
        track = manager.propagate_supervised(queries, out, match, gt_ids,
                                             detach_refs=run.train.detach_refs)
    return breakdowns


def sample_clip(seq_lengths: list[int], run: RunConfig, rng: np.random.Generator) -> tuple[int, list[int]]:
    """Pick (sequence index, frame list) for one clip."""
    n = run.train.clip_length
    candidates = []
    for si, length in enumerate(seq_lengths):
        strides = [s for s in run.train.stride_choices if (n - 1) * s + 1 <= length]
        if strides:
            candidates.append((si, strides))
    if not candidates:
        raise ValueError(f"no sequence long enough for clips of length {run.train.clip_length}")
    si, strides = candidates[int(rng.integers(0, len(candidates)))]
    stride = strides[int(rng.integers(0, len(strides)))]
    start = int(rng.integers(1, seq_lengths[si] - (n - 1) * stride + 1))
    return si, [start + i * stride for i in range(n)]


def train_stage2(sequences: list[SequenceData], run: RunConfig, out_dir,
                 stage1_ckpt: Checkpoint, resume: Checkpoint | None = None,
                 iterations: int | None = None) -> Path:
    """Clip training with query propagation and the collective average loss."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    iterations = iterations if iterations is not None else run.train.iterations

    if stage1_ckpt.config != run.model:
        raise ConfigError("stage-1 checkpoint was built with a different model configuration")
    model = build_model(run.model, seed=run.train.seed)
    stage1_ckpt.load_into(model)
    optimizer = torch.optim.Adam(model.parameters(), lr=run.train.learning_rate)
    start = 0
    if resume is not None:
        resume.load_into(model)
        resume.load_optimizer(model, optimizer)
        start = resume.iteration
    model.train()

    lengths = [seq.num_frames for seq in sequences]
    logger = LossLog(out_dir / "loss_stage2.csv")
    for it in range(start, iterations):
        _set_lr(optimizer, replace(run, train=replace(run.train, iterations=iterations)), it)
        rng = np.random.default_rng([run.train.seed, 2, it])
        si, frames = sample_clip(lengths, run, rng)
        breakdowns = run_clip(model, sequences[si], frames, run)
        loss = cal_loss(breakdowns, run.train.clip_length)
        _check_finite(loss, 2, it)

        optimizer.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), run.train.grad_clip)
        optimizer.step()

        v = max(sum(b.v for b in breakdowns), 1)
        cls = sum(float(b.cls.detach()) for b in breakdowns) / v
        l1 = sum(float(b.l1.detach()) for b in breakdowns) / v
        giou = sum(float(b.giou.detach()) for b in breakdowns) / v
        logger.append(it, 2, float(loss.detach()), cls, l1, giou)

    path = out_dir / "stage2.npz"
    save_checkpoint(path, model, optimizer=optimizer, stage=2, iteration=iterations)
    return path


def run_inference(seq: SequenceData, model: TrackerModel, thresholds: Thresholds | None = None,
                  disable_propagation: bool = False) -> dict[int, list[MotBox]]:
    """Track one sequence; returns per-frame pixel-ltwh boxes with identities.

    Frames are processed strictly in order with the query manager threaded
    through; with ``disable_propagation`` the track set is cleared after
    every frame (ablation), so identities never persist.
    """
    size = (model.cfg.input_height, model.cfg.input_width)
    manager = QueryManager(tan=model.tan, thresholds=thresholds or Thresholds())
    track = QuerySet.empty(model.cfg.dim)
    width, height = seq.descriptor.im_width, seq.descriptor.im_height
    results: dict[int, list[MotBox]] = {}

    model.eval()
    with torch.no_grad():
        for frame in range(1, seq.num_frames + 1):
            image = seq.frame_image(frame, size)[None]
            memory = model.encode_image(image)
            queries = track.concat(model.detect_query_set())
            out = model.decode(memory, queries)
            next_track, emitted = manager.step(frame, queries, out)
            track = QuerySet.empty(model.cfg.dim) if disable_propagation else next_track
            rows = []
            for lb in emitted:
                x1, y1, x2, y2 = lb.box.as_xyxy()
                rows.append(MotBox(
                    identity=lb.identity,
                    ltwh=(x1 * width, y1 * height, (x2 - x1) * width, (y2 - y1) * height),
                    score=lb.score,
                ))
            results[frame] = rows
    return results
