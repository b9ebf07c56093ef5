"""Full tracker network and the named-array checkpoint format.

Checkpoints are a single ``.npz`` archive: a ``meta`` JSON entry (format
version, model configuration, training stage/iteration) plus one
``param/<name>`` array per parameter/buffer and optional ``opt/...`` arrays
for the optimizer moments. The layout is stable across runs.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from .backbone import BackboneConfig, BackboneNeck
from .decoder import DecoderConfig, DecoderOutput, DeformableDecoder, DetectQueryBank
from .encoder import EncoderMemory, HybridEncoder
from .queries import QuerySet, TemporalAggregator

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Widths/depths of every stage; presets cover desk-scale and test sizes."""

    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    dim: int = 256
    num_heads: int = 8
    num_layers: int = 6
    num_points: int = 4
    num_queries: int = 60
    ffn_ratio: int = 4
    input_height: int = 640
    input_width: int = 640

    @classmethod
    def desk(cls) -> "ModelConfig":
        """Small preset that trains on a CPU in minutes."""
        return cls(
            backbone=BackboneConfig(
                stem_channels=16,
                stage_channels=(32, 48, 64, 80),
                stage_depths=(1, 1, 1, 1),
                out_channels=(48, 64, 80),
            ),
            dim=96,
            num_heads=8,
            num_layers=3,
            num_points=4,
            num_queries=30,
            ffn_ratio=4,
            input_height=256,
            input_width=256,
        )

    @classmethod
    def tiny(cls) -> "ModelConfig":
        """Minimal geometry for unit tests and gradient audits."""
        return cls(
            backbone=BackboneConfig(
                stem_channels=8,
                stage_channels=(8, 12, 16, 16),
                stage_depths=(1, 1, 1, 1),
                out_channels=(12, 16, 16),
            ),
            dim=16,
            num_heads=2,
            num_layers=2,
            num_points=2,
            num_queries=6,
            ffn_ratio=2,
            input_height=64,
            input_width=64,
        )

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(
            dim=self.dim,
            num_layers=self.num_layers,
            num_heads=self.num_heads,
            num_points=self.num_points,
            num_levels=3,
            ffn_ratio=self.ffn_ratio,
            num_queries=self.num_queries,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        bb = data.pop("backbone")
        backbone = BackboneConfig(
            stem_channels=bb["stem_channels"],
            stage_channels=tuple(bb["stage_channels"]),
            stage_depths=tuple(bb["stage_depths"]),
            out_channels=tuple(bb["out_channels"]),
        )
        return cls(backbone=backbone, **data)


class TrackerModel(nn.Module):
    """Backbone/neck -> hybrid encoder -> deformable decoder with query banks."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.backbone = BackboneNeck(self.cfg.backbone)
        self.encoder = HybridEncoder(
            in_channels=self.cfg.backbone.out_channels,
            dim=self.cfg.dim,
            num_heads=self.cfg.num_heads,
            ffn_ratio=self.cfg.ffn_ratio,
        )
        self.decoder = DeformableDecoder(self.cfg.decoder_config())
        self.query_bank = DetectQueryBank(self.cfg.num_queries, self.cfg.dim)
        self.tan = TemporalAggregator(self.cfg.dim, self.cfg.num_heads, self.cfg.ffn_ratio)

    def encode_image(self, images: Tensor) -> EncoderMemory:
        return self.encoder(self.backbone(images))

    def detect_query_set(self, device=None, dtype=None) -> QuerySet:
        emb, refs = self.query_bank.detect_queries(batch=1)
        emb, refs = emb[0], refs[0]
        if dtype is not None:
            emb, refs = emb.to(dtype), refs.to(dtype)
        return QuerySet.from_detect(emb, refs)

    def decode(self, memory: EncoderMemory, queries: QuerySet) -> DecoderOutput:
        return self.decoder.decode(queries.embeddings[None], queries.ref_boxes[None], memory)

    def forward(self, images: Tensor) -> DecoderOutput:
        """Detection-only pass with the learnable detect queries (any batch)."""
        memory = self.encode_image(images)
        emb, refs = self.query_bank.detect_queries(batch=images.shape[0])
        return self.decoder.decode(emb, refs, memory)


def build_model(cfg: ModelConfig, seed: int | None = None) -> TrackerModel:
    if seed is not None:
        torch.manual_seed(seed)
    return TrackerModel(cfg)


def save_checkpoint(path, model: TrackerModel, *, optimizer: torch.optim.Optimizer | None = None,
                    stage: int = 1, iteration: int = 0) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, tensor in model.state_dict().items():
        arrays[f"param/{name}"] = tensor.detach().cpu().numpy()
    opt_meta = None
    if optimizer is not None:
        names = [n for n, _ in model.named_parameters()]
        state_ids = {id(p): n for n, p in model.named_parameters()}
        opt_meta = {"type": "adam", "params": []}
        for group in optimizer.param_groups:
            for p in group["params"]:
                name = state_ids[id(p)]
                st = optimizer.state.get(p, {})
                if st:
                    arrays[f"opt/{name}/exp_avg"] = st["exp_avg"].cpu().numpy()
                    arrays[f"opt/{name}/exp_avg_sq"] = st["exp_avg_sq"].cpu().numpy()
                    arrays[f"opt/{name}/step"] = np.asarray(
                        st["step"].item() if torch.is_tensor(st["step"]) else st["step"]
                    )
                opt_meta["params"].append(name)
    meta = {
        "version": CHECKPOINT_VERSION,
        "model": model.cfg.to_dict(),
        "stage": stage,
        "iteration": iteration,
        "optimizer": opt_meta,
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


@dataclass
class Checkpoint:
    config: ModelConfig
    stage: int
    iteration: int
    params: dict[str, np.ndarray]
    opt_state: dict[str, dict[str, np.ndarray]]

    def build(self) -> TrackerModel:
        model = TrackerModel(self.config)
        self.load_into(model)
        return model

    def load_into(self, model: TrackerModel) -> None:
        state = model.state_dict()
        missing = set(state) - set(self.params)
        extra = set(self.params) - set(state)
        if missing or extra:
            raise CheckpointError(
                f"checkpoint/config mismatch: missing={sorted(missing)[:4]} extra={sorted(extra)[:4]}"
            )
        for name, tensor in state.items():
            arr = self.params[name]
            if tuple(arr.shape) != tuple(tensor.shape):
                raise CheckpointError(
                    f"shape mismatch for {name}: checkpoint {arr.shape} vs model {tuple(tensor.shape)}"
                )
        model.load_state_dict({k: torch.as_tensor(v) for k, v in self.params.items()})

    def load_optimizer(self, model: TrackerModel, optimizer: torch.optim.Optimizer) -> None:
        by_name = dict(model.named_parameters())
        for name, st in self.opt_state.items():
            p = by_name[name]
            optimizer.state[p] = {
                "step": torch.tensor(float(st["step"])),
                "exp_avg": torch.as_tensor(st["exp_avg"]).clone(),
                "exp_avg_sq": torch.as_tensor(st["exp_avg_sq"]).clone(),
            }


def load_checkpoint(path) -> Checkpoint:
    try:
        archive = np.load(path, allow_pickle=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if "meta" not in archive:
        raise CheckpointError(f"{path}: missing meta entry")
    meta = json.loads(bytes(archive["meta"].tobytes()).decode())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    params = {}
    opt_state: dict[str, dict[str, np.ndarray]] = {}
    for key in archive.files:
        if key.startswith("param/"):
            params[key[len("param/"):]] = archive[key]
        elif key.startswith("opt/"):
            name, leaf = key[len("opt/"):].rsplit("/", 1)
            opt_state.setdefault(name, {})[leaf] = archive[key]
    return Checkpoint(
        config=ModelConfig.from_dict(meta["model"]),
        stage=int(meta["stage"]),
        iteration=int(meta["iteration"]),
        params=params,
        opt_state=opt_state,
    )
