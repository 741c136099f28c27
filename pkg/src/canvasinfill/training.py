"""Two-stage training orchestration.

Stage 1 pretrains the query/key encoders contrastively with SGD; stage 2
jointly trains the generator (optionally initialized from stage 1) against a
gradient-penalty critic with Adam. Both stages draw masks on the fly, log one
machine-parseable line per step, and write resumable checkpoints.
"""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from . import checkpoint as ckpt
from .contrastive import (
    ContrastiveConfig,
    ContrastiveEncoder,
    init_pretrain_state,
    pack_inputs,
    pretrain_step,
    seeded_module,
)
from .errors import ConfigError, ContractError, IngestError
from .generator import InpaintingGenerator
from .losses import (
    Critic,
    LossWeights,
    adv_loss_d,
    make_feature_extractor,
    total_loss,
)
from .masks import IRREGULAR, RECTANGULAR, MaskSpec, apply_mask, gen_mask

_IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}
MASK_KIND_CHOICES = ("rect", "irregular", "mixed")


@dataclass
class TrainConfig:
    """Flat configuration covering both stages; see README for key docs."""

    image_size: int = 64
    seed: int = 0
    val_fraction: float = 0.0
    flip: bool = True
    mask_kind: str = "mixed"
    rect_min_frac: float = 0.25
    rect_max_frac: float = 0.5
    strokes_min: int = 1
    strokes_max: int = 5
    brush_min: float = 4.0
    brush_max: float = 18.0
    vertices_min: int = 4
    vertices_max: int = 12
    max_angle: float = math.pi / 2
    pretrain_steps: int = 500
    pretrain_batch_size: int = 16
    pretrain_lr: float = 0.015
    tau: float = 0.07
    momentum: float = 0.9
    queue_capacity: int = 1024
    repr_dim: int = 128
    joint_steps: int = 1000
    joint_batch_size: int = 8
    joint_lr: float = 1e-4
    use_contrastive_init: bool = True
    use_daf: bool = True
    lambda_rec: float = 6.0
    lambda_per: float = 0.1
    lambda_style: float = 240.0
    lambda_tv: float = 0.1
    lambda_adv: float = 0.001
    lambda_gp: float = 10.0
    feature_extractor: str = "substitute"
    extractor_seed: int = 0
    run_dir: str = "runs/default"
    log_every: int = 1
    probe_every: int = 50
    snapshot_every: int = 0

    def validate(self) -> None:
        if self.image_size < 32 or self.image_size % 32:
            raise ConfigError(
                f"image_size must be a positive multiple of 32, got {self.image_size}"
            )
        if self.pretrain_steps < 1 or self.joint_steps < 1:
            raise ConfigError("step budgets must be >= 1")
        if self.pretrain_batch_size < 1 or self.joint_batch_size < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.pretrain_lr <= 0 or self.joint_lr <= 0:
            raise ConfigError("learning rates must be > 0")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in [0, 1)")
        if self.mask_kind not in MASK_KIND_CHOICES:
            raise ConfigError(
                f"mask_kind must be one of {MASK_KIND_CHOICES}, got {self.mask_kind!r}"
            )
        if self.log_every < 1 or self.probe_every < 1 or self.snapshot_every < 0:
            raise ConfigError("log_every/probe_every must be >= 1, snapshot_every >= 0")
        self.contrastive_config().validate()
        self.loss_weights().validate()
        self.rect_spec().validate()
        self.irregular_spec().validate()

    # -- derived pieces -------------------------------------------------
    def contrastive_config(self) -> ContrastiveConfig:
        return ContrastiveConfig(
            tau=self.tau,
            momentum=self.momentum,
            queue_capacity=self.queue_capacity,
            repr_dim=self.repr_dim,
            lr=self.pretrain_lr,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            rec=self.lambda_rec,
            per=self.lambda_per,
            style=self.lambda_style,
            tv=self.lambda_tv,
            adv=self.lambda_adv,
            gp=self.lambda_gp,
        )

    def rect_spec(self) -> MaskSpec:
        return MaskSpec(
            kind=RECTANGULAR, min_frac=self.rect_min_frac, max_frac=self.rect_max_frac
        )

    def irregular_spec(self) -> MaskSpec:
        scale = self.image_size / 256.0
        lo = max(1.0, self.brush_min * scale)
        return MaskSpec(
            kind=IRREGULAR,
            strokes=(self.strokes_min, self.strokes_max),
            brush_width=(lo, max(lo, self.brush_max * scale)),
            vertices=(self.vertices_min, self.vertices_max),
            max_angle=self.max_angle,
        )

    def sample_mask(self, rng: np.random.Generator) -> np.ndarray:
        """One training mask per the configured kind (mixed = fair coin)."""
        kind = self.mask_kind
        if kind == "mixed":
            kind = "rect" if rng.random() < 0.5 else "irregular"
        spec = self.rect_spec() if kind == "rect" else self.irregular_spec()
        return gen_mask(spec, self.image_size, self.image_size, rng)

    # -- flat key=value text form ---------------------------------------
    def as_flat_dict(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                out[f.name] = "true" if value else "false"
            else:
                out[f.name] = repr(value) if isinstance(value, float) else str(value)
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.as_flat_dict().items())

    @classmethod
    def from_mapping(cls, mapping: dict[str, str]) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in mapping.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _parse_value(key, raw, type(getattr(cls(), key)))
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        mapping = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"config line {lineno} is not 'key = value': {line!r}")
            key, _, value = stripped.partition("=")
            mapping[key.strip()] = value.strip()
        return cls.from_mapping(mapping)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_text(path.read_text())


def _parse_value(key: str, raw: str, typ: type):
    try:
        if typ is bool:
            if raw not in ("true", "false"):
                raise ValueError(f"expected true/false")
            return raw == "true"
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {typ.__name__}") from exc


# ---------------------------------------------------------------------------
# dataset ingestion


class ImageFolderDataset:
    """Lazily decoded image folder, resized to a square and scaled to [0, 1].

    Files are enumerated in sorted order; the validation split takes the
    ``val_fraction`` share of files with the smallest name hashes, so the
    split is a pure function of the file set.
    """

    def __init__(self, root, image_size: int, val_fraction: float = 0.0, seed: int = 0):
        self.root = Path(root)
        self.image_size = image_size
        self.seed = seed
        self.skipped = 0
        if not self.root.is_dir():
            raise IngestError(f"dataset root is not a directory: {self.root}")
        candidates = sorted(
            p for p in self.root.iterdir()
            if p.is_file() and p.suffix.lower() in _IMAGE_EXTENSIONS
        )
        usable = []
        for path in candidates:
            try:
                with Image.open(path) as img:
                    img.verify()
                usable.append(path)
            except Exception as exc:
                self.skipped += 1
                warnings.warn(f"skipping unreadable image {path}: {exc}")
        if not usable:
            raise IngestError(f"no decodable images under {self.root}")
        n_val = int(round(val_fraction * len(usable)))
        ranked = sorted(usable, key=lambda p: hashlib.sha1(p.name.encode()).hexdigest())
        val_set = set(ranked[:n_val])
        self.train_paths = [p for p in usable if p not in val_set]
        self.val_paths = [p for p in usable if p in val_set]
        self._cache: dict[Path, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.train_paths)

    def _load(self, path: Path) -> np.ndarray:
        if path not in self._cache:
            with Image.open(path) as img:
                rgb = img.convert("RGB").resize(
                    (self.image_size, self.image_size), Image.BILINEAR
                )
            self._cache[path] = np.asarray(rgb, dtype=np.float64) / 255.0
        return self._cache[path]

    def __getitem__(self, index: int) -> np.ndarray:
        return self._load(self.train_paths[index])

    def val_image(self, index: int) -> np.ndarray:
        return self._load(self.val_paths[index])

    def train_images(self, indices) -> list[np.ndarray]:
        return [self[int(i)] for i in indices]


def ingest_dataset(root, image_size: int, val_fraction: float = 0.0, seed: int = 0):
    return ImageFolderDataset(root, image_size, val_fraction=val_fraction, seed=seed)


# ---------------------------------------------------------------------------
# logging


def _format_value(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


class StepLogger:
    """Appends one ``key=value`` line per step; floats keep full precision."""

    def __init__(self, path, echo: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a")
        self.echo = echo

    def log(self, **values) -> None:
        line = " ".join(f"{k}={_format_value(v)}" for k, v in values.items())
        self._fh.write(line + "\n")
        self._fh.flush()
        if self.echo:
            print(line)

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def parse_log(path) -> list[dict[str, str]]:
    """Read a step log back into dicts of raw string values."""
    rows = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rows.append(dict(part.split("=", 1) for part in line.split(" ")))
    return rows


# ---------------------------------------------------------------------------
# stage 1: contrastive pretraining


def _sample_training_images(cfg: TrainConfig, dataset, rng, batch_size: int):
    indices = rng.integers(0, len(dataset), size=batch_size)
    images = []
    for i in indices:
        img = dataset[int(i)]
        if cfg.flip and rng.random() < 0.5:
            img = img[:, ::-1, :].copy()
        images.append(img)
    return images


def run_pretrain(
    cfg: TrainConfig,
    dataset,
    run_dir=None,
    resume=None,
) -> Path:
    """Contrastive pretraining for ``cfg.pretrain_steps`` SGD steps.

    Logs ``loss`` and top-1 positive-retrieval ``acc`` per step and writes a
    resumable checkpoint; returns the checkpoint path.
    """
    cfg.validate()
    if len(dataset) == 0:
        raise IngestError("pretraining needs a non-empty dataset")
    run_dir = Path(run_dir) if run_dir is not None else Path(cfg.run_dir) / "pretrain"
    run_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = run_dir / "checkpoint.npz"

    state = init_pretrain_state(
        cfg.contrastive_config(), cfg.image_size, cfg.seed, cfg.irregular_spec()
    )
    if resume is not None:
        arrays, meta = ckpt.load_checkpoint(resume)
        if meta.get("stage") != "pretrain":
            raise ContractError(f"{resume} is not a pretrain checkpoint")
        ckpt.load_module_arrays(state.encoder_q, arrays, "encoder_q")
        ckpt.load_module_arrays(state.encoder_k, arrays, "encoder_k")
        ckpt.load_optimizer_arrays(state.optimizer, arrays, meta["optimizer"], "optimizer")
        state.queue.restore(
            arrays.get("queue/keys"),
            meta["queue"]["enqueued"],
            meta["queue"]["evicted"],
        )
        state.rng = ckpt.rng_from_meta(meta["rng"])
        state.step = int(meta["step"])

    with StepLogger(run_dir / "train.log") as logger:
        while state.step < cfg.pretrain_steps:
            images = _sample_training_images(cfg, dataset, state.rng, cfg.pretrain_batch_size)
            state, stats = pretrain_step(state, images)
            if state.step % cfg.log_every == 0 or state.step == cfg.pretrain_steps:
                logger.log(
                    stage="pretrain",
                    step=state.step,
                    loss=stats.loss,
                    acc=stats.accuracy,
                    queue=len(state.queue),
                )

    arrays = {}
    arrays.update(ckpt.module_arrays(state.encoder_q, "encoder_q"))
    arrays.update(ckpt.module_arrays(state.encoder_k, "encoder_k"))
    opt_arrays, opt_meta = ckpt.optimizer_arrays(state.optimizer, "optimizer")
    arrays.update(opt_arrays)
    queue_keys = state.queue.state_arrays()
    if queue_keys is not None:
        arrays["queue/keys"] = queue_keys
    meta = {
        "stage": "pretrain",
        "step": state.step,
        "config": cfg.as_flat_dict(),
        "rng": ckpt.rng_meta(state.rng),
        "optimizer": opt_meta,
        "queue": {
            "enqueued": state.queue.total_enqueued,
            "evicted": state.queue.total_evicted,
        },
    }
    return ckpt.save_checkpoint(ckpt_path, arrays, meta)


# ---------------------------------------------------------------------------
# stage 2: joint training


def build_generator(cfg: TrainConfig) -> InpaintingGenerator:
    return seeded_module(cfg.seed, InpaintingGenerator, use_daf=cfg.use_daf)


def build_critic(cfg: TrainConfig) -> Critic:
    return seeded_module(cfg.seed + 1, Critic)


def load_pretrained_trunk(generator: InpaintingGenerator, pretrain_ckpt) -> None:
    """Copy the pretrained query-encoder trunk into the generator."""
    arrays, meta = ckpt.load_checkpoint(pretrain_ckpt)
    if meta.get("stage") != "pretrain":
        raise ContractError(f"{pretrain_ckpt} is not a pretrain checkpoint")
    prefix = "encoder_q/trunk."
    trunk = {
        key[len(prefix):]: arr for key, arr in arrays.items() if key.startswith(prefix)
    }
    if not trunk:
        raise ContractError(f"{pretrain_ckpt} holds no encoder trunk arrays")
    generator.load_trunk_state(trunk)


def generator_from_checkpoint(path) -> tuple[InpaintingGenerator, dict]:
    """Rebuild a generator (architecture from the config echo) and load weights."""
    arrays, meta = ckpt.load_checkpoint(path)
    if meta.get("stage") != "joint":
        raise ContractError(f"{path} is not a joint-training checkpoint")
    cfg = TrainConfig.from_mapping(meta["config"])
    generator = build_generator(cfg)
    ckpt.load_module_arrays(generator, arrays, "generator")
    generator.eval()
    return generator, meta


def _probe_set(cfg: TrainConfig, dataset, count: int = 4):
    """Fixed images + masks for the masked-region L1 probe (eval-seed stream)."""
    rng = np.random.default_rng(cfg.seed + 7919)
    n = min(count, len(dataset))
    images = [dataset[i] for i in range(n)]
    masks = [cfg.sample_mask(rng) for _ in range(n)]
    for i, m in enumerate(masks):
        if m.sum() == 0:  # probe needs holes to measure
            m[cfg.image_size // 4 : cfg.image_size // 2,
              cfg.image_size // 4 : cfg.image_size // 2] = 1
            masks[i] = m
    x = pack_inputs([apply_mask(img, m) for img, m in zip(images, masks)])
    y = torch.from_numpy(
        np.stack(images).astype(np.float32)
    ).permute(0, 3, 1, 2).contiguous()
    m = torch.from_numpy(np.stack(masks).astype(np.float32)).unsqueeze(1)
    return x, y, m


@torch.no_grad()
def _probe_masked_l1(generator, probe) -> float:
    x, y, m = probe
    out = generator(x)[1]
    hole = m.expand_as(y)
    total = float((out - y).abs().mul(hole).sum())
    return total / float(hole.sum())


def _save_snapshot(run_dir: Path, step: int, generator, probe) -> None:
    """Image grid (masked input / output / target) for quick visual checks."""
    x, y, m = probe
    with torch.no_grad():
        out = generator(x)[1].clamp(0.0, 1.0)
    rows = []
    for i in range(x.shape[0]):
        masked = x[i, :3].permute(1, 2, 0).numpy()
        pred = out[i].permute(1, 2, 0).numpy()
        target = y[i].permute(1, 2, 0).numpy()
        rows.append(np.concatenate([masked, pred, target], axis=1))
    grid = (np.concatenate(rows, axis=0) * 255).round().astype(np.uint8)
    snap_dir = run_dir / "snapshots"
    snap_dir.mkdir(exist_ok=True)
    Image.fromarray(grid).save(snap_dir / f"step_{step:06d}.png")


def run_joint(
    cfg: TrainConfig,
    dataset,
    init=None,
    run_dir=None,
    resume=None,
) -> Path:
    """Joint generator/critic training for ``cfg.joint_steps`` Adam steps.

    ``init`` is a stage-1 checkpoint; it is required when
    ``cfg.use_contrastive_init`` is set. ``resume`` continues an interrupted
    stage-2 run from its own checkpoint.
    """
    cfg.validate()
    if len(dataset) == 0:
        raise IngestError("joint training needs a non-empty dataset")
    if cfg.use_contrastive_init and init is None and resume is None:
        raise ConfigError(
            "use_contrastive_init=true requires a pretrain checkpoint (init)"
        )
    run_dir = Path(run_dir) if run_dir is not None else Path(cfg.run_dir) / "joint"
    run_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = run_dir / "checkpoint.npz"

    generator = build_generator(cfg)
    critic = build_critic(cfg)
    if cfg.use_contrastive_init and resume is None:
        load_pretrained_trunk(generator, init)
    extractor = make_feature_extractor(cfg.feature_extractor, cfg.extractor_seed)
    weights = cfg.loss_weights()
    opt_g = torch.optim.Adam(generator.parameters(), lr=cfg.joint_lr)
    opt_d = torch.optim.Adam(critic.parameters(), lr=cfg.joint_lr)
    rng = np.random.default_rng(cfg.seed)
    step = 0

    if resume is not None:
        arrays, meta = ckpt.load_checkpoint(resume)
        if meta.get("stage") != "joint":
            raise ContractError(f"{resume} is not a joint-training checkpoint")
        ckpt.load_module_arrays(generator, arrays, "generator")
        ckpt.load_module_arrays(critic, arrays, "critic")
        ckpt.load_optimizer_arrays(opt_g, arrays, meta["opt_g"], "opt_g")
        ckpt.load_optimizer_arrays(opt_d, arrays, meta["opt_d"], "opt_d")
        rng = ckpt.rng_from_meta(meta["rng"])
        step = int(meta["step"])

    probe = _probe_set(cfg, dataset)
    train_adversary = weights.adv > 0

    with StepLogger(run_dir / "train.log") as logger:
        while step < cfg.joint_steps:
            if step % cfg.probe_every == 0:
                logger.log(stage="joint", step=step, probe_masked_l1=_probe_masked_l1(generator, probe))
            if cfg.snapshot_every and step % cfg.snapshot_every == 0:
                _save_snapshot(run_dir, step, generator, probe)

            images = _sample_training_images(cfg, dataset, rng, cfg.joint_batch_size)
            masks = [cfg.sample_mask(rng) for _ in images]
            masked = [apply_mask(img, m) for img, m in zip(images, masks)]
            x = pack_inputs(masked)
            y = torch.from_numpy(
                np.stack(images).astype(np.float32)
            ).permute(0, 3, 1, 2).contiguous()
            m = torch.from_numpy(np.stack(masks).astype(np.float32)).unsqueeze(1)

            d_loss_val = 0.0
            if train_adversary:
                with torch.no_grad():
                    outs = generator(x)
                d_terms = []
                for k in weights.texture_scales:
                    fake = outs[k]
                    if fake.shape[-2:] != y.shape[-2:]:
                        fake = F.interpolate(
                            fake, size=y.shape[-2:], mode="bilinear", align_corners=False
                        )
                    d_terms.append(adv_loss_d(critic, y, fake, rng, gp_weight=weights.gp))
                d_loss = torch.stack(d_terms).mean()
                opt_d.zero_grad()
                d_loss.backward()
                opt_d.step()
                d_loss_val = float(d_loss.detach())

            outs = generator(x)
            g_loss, parts = total_loss(
                outs, y, m, critic if train_adversary else None, extractor, weights
            )
            opt_g.zero_grad()
            g_loss.backward()
            opt_g.step()

            step += 1
            if step % cfg.log_every == 0 or step == cfg.joint_steps:
                logger.log(
                    stage="joint",
                    step=step,
                    d_loss=d_loss_val,
                    g_total=float(g_loss.detach()),
                    **{k: v for k, v in sorted(parts.items())},
                )
        logger.log(stage="joint", step=step, probe_masked_l1=_probe_masked_l1(generator, probe))
        if cfg.snapshot_every:
            _save_snapshot(run_dir, step, generator, probe)

    arrays = {}
    arrays.update(ckpt.module_arrays(generator, "generator"))
    arrays.update(ckpt.module_arrays(critic, "critic"))
    g_arrays, g_meta = ckpt.optimizer_arrays(opt_g, "opt_g")
    d_arrays, d_meta = ckpt.optimizer_arrays(opt_d, "opt_d")
    arrays.update(g_arrays)
    arrays.update(d_arrays)
    meta = {
        "stage": "joint",
        "step": step,
        "config": cfg.as_flat_dict(),
        "rng": ckpt.rng_meta(rng),
        "opt_g": g_meta,
        "opt_d": d_meta,
    }
    return ckpt.save_checkpoint(ckpt_path, arrays, meta)
