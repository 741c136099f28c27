"""Self-supervised Siamese pretraining core.

Two architecturally identical encoders (query and key) with separate weights,
coupled by a momentum update. Keys from past batches are held in a FIFO queue
and serve as negatives for a temperature-scaled softmax objective.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ContractError, DegenerateRepresentationError
from .masks import MaskedImage, MaskSpec, apply_mask, default_irregular_spec, gen_mask

ENCODER_WIDTHS = (32, 64, 128, 256, 256, 256)
_NORM_GROUPS = 8
_MIN_REPR_NORM = 1e-12


@dataclass(frozen=True)
class ContrastiveConfig:
    tau: float = 0.07
    momentum: float = 0.9
    queue_capacity: int = 1024
    repr_dim: int = 128
    lr: float = 0.015

    def validate(self) -> None:
        if self.tau <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.tau}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.queue_capacity < 1:
            raise ConfigError(f"queue capacity must be >= 1, got {self.queue_capacity}")
        if self.repr_dim < 1 or self.lr <= 0:
            raise ConfigError("repr_dim must be >= 1 and lr > 0")


class EncoderTrunk(nn.Module):
    """Six stride-2 conv stages (4ch input -> 32, 64, 128, 256, 256, 256)."""

    def __init__(self, in_channels: int = 4):
        super().__init__()
        stages = []
        prev = in_channels
        for width in ENCODER_WIDTHS:
            stages.append(
                nn.Sequential(
                    nn.Conv2d(prev, width, 3, stride=2, padding=1),
                    nn.GroupNorm(_NORM_GROUPS, width),
                    nn.ReLU(inplace=True),
                )
            )
            prev = width
        self.stages = nn.ModuleList(stages)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class ContrastiveEncoder(nn.Module):
    """Encoder trunk + global average pooling + linear projection, L2-normalized."""

    def __init__(
        self,
        repr_dim: int = 128,
        in_channels: int = 4,
        expected_size: int | None = None,
    ):
        super().__init__()
        self.trunk = EncoderTrunk(in_channels)
        self.proj = nn.Linear(ENCODER_WIDTHS[-1], repr_dim)
        self.expected_size = expected_size

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4:
            raise ContractError(f"expected (B, C, H, W) input, got shape {tuple(x.shape)}")
        if self.expected_size is not None and x.shape[-2:] != (
            self.expected_size,
            self.expected_size,
        ):
            raise ContractError(
                f"input spatial size {tuple(x.shape[-2:])} does not match configured "
                f"training size {self.expected_size}"
            )
        pooled = self.trunk(x)[-1].mean(dim=(-2, -1))
        v = self.proj(pooled)
        norms = v.norm(dim=-1)
        if (norms < _MIN_REPR_NORM).any():
            raise DegenerateRepresentationError(
                "pre-normalization representation has (near) zero norm"
            )
        return v / norms.unsqueeze(-1)


def seeded_module(seed: int, builder, *args, **kwargs):
    """Construct a module with deterministic parameter initialization."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return builder(*args, **kwargs)


def pack_inputs(masked: list[MaskedImage] | MaskedImage) -> torch.Tensor:
    """Stack masked images into a (B, 4, H, W) float32 tensor."""
    if isinstance(masked, MaskedImage):
        masked = [masked]
    arrays = [m.network_input().astype(np.float32) for m in masked]
    return torch.from_numpy(np.stack(arrays)).permute(0, 3, 1, 2).contiguous()


def encode(encoder: ContrastiveEncoder, masked: MaskedImage) -> torch.Tensor:
    """Encode one masked image to a unit-norm representation vector."""
    return encoder(pack_inputs(masked))[0]


def make_positive_pair(
    image: np.ndarray,
    rng: np.random.Generator,
    spec: MaskSpec | None = None,
) -> tuple[MaskedImage, MaskedImage]:
    """Mask the same image twice with independently sampled masks."""
    image = np.asarray(image)
    if spec is None:
        spec = default_irregular_spec(min(image.shape[0], image.shape[1]))
    m_q = gen_mask(spec, image.shape[0], image.shape[1], rng)
    m_k = gen_mask(spec, image.shape[0], image.shape[1], rng)
    return apply_mask(image, m_q), apply_mask(image, m_k)


class KeyQueue:
    """Fixed-capacity FIFO of key representations; oldest entries evict first."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError(f"queue capacity must be >= 1, got {capacity}")
        self._capacity = capacity
        self._items: deque[torch.Tensor] = deque()
        self.total_enqueued = 0
        self.total_evicted = 0

    @property
    def capacity(self) -> int:
        return self._capacity

    def __len__(self) -> int:
        return len(self._items)

    def enqueue(self, batch: torch.Tensor | list[torch.Tensor]) -> "KeyQueue":
        items = list(batch) if not isinstance(batch, torch.Tensor) else list(batch.detach())
        if len(items) > self._capacity:
            raise ContractError(
                f"batch of {len(items)} exceeds queue capacity {self._capacity}"
            )
        for item in items:
            if len(self._items) == self._capacity:
                self._items.popleft()
                self.total_evicted += 1
            self._items.append(torch.as_tensor(item).detach().clone())
            self.total_enqueued += 1
        return self

    def as_tensor(self) -> torch.Tensor:
        if not self._items:
            raise ContractError("queue is empty")
        return torch.stack(list(self._items))

    def state_arrays(self) -> np.ndarray | None:
        """Queue contents as a (n, d) array for checkpointing, or None if empty."""
        if not self._items:
            return None
        return self.as_tensor().numpy()

    def restore(self, keys: np.ndarray | None, enqueued: int, evicted: int) -> None:
        self._items.clear()
        if keys is not None:
            for row in np.asarray(keys):
                self._items.append(torch.from_numpy(np.array(row)))
        self.total_enqueued = enqueued
        self.total_evicted = evicted


def enqueue_keys(queue: KeyQueue, batch) -> KeyQueue:
    """FIFO enqueue of a key batch; evicts exactly the oldest surplus."""
    return queue.enqueue(batch)


def info_nce(
    z_q: torch.Tensor,
    z_pos: torch.Tensor,
    queue: KeyQueue | torch.Tensor,
    tau: float,
) -> torch.Tensor:
    """Softmax cross-entropy classifying the positive key against queue negatives."""
    if tau <= 0:
        raise ContractError(f"temperature must be > 0, got {tau}")
    negatives = queue.as_tensor() if isinstance(queue, KeyQueue) else queue
    if negatives.ndim != 2 or negatives.shape[0] < 1:
        raise ContractError("queue must hold at least one key")
    squeeze = z_q.ndim == 1
    if squeeze:
        z_q = z_q.unsqueeze(0)
        z_pos = z_pos.unsqueeze(0)
    negatives = negatives.to(z_q.dtype)
    l_pos = (z_q * z_pos).sum(dim=-1, keepdim=True)
    l_neg = z_q @ negatives.t()
    logits = torch.cat([l_pos, l_neg], dim=1) / tau
    target = torch.zeros(logits.shape[0], dtype=torch.long)
    return F.cross_entropy(logits, target)


def retrieval_accuracy(
    z_q: torch.Tensor, z_pos: torch.Tensor, negatives: torch.Tensor
) -> float:
    """Fraction of queries whose positive key outranks every negative."""
    l_pos = (z_q * z_pos).sum(dim=-1, keepdim=True)
    l_neg = z_q @ negatives.to(z_q.dtype).t()
    logits = torch.cat([l_pos, l_neg], dim=1)
    return float((logits.argmax(dim=1) == 0).float().mean())


@torch.no_grad()
def momentum_update(
    encoder_q: nn.Module, encoder_k: nn.Module, m: float
) -> nn.Module:
    """Move every key parameter toward the query parameter: k <- m*k + (1-m)*q."""
    if not 0.0 <= m < 1.0:
        raise ConfigError(f"momentum must be in [0, 1), got {m}")
    params_q = dict(encoder_q.named_parameters())
    params_k = dict(encoder_k.named_parameters())
    if params_q.keys() != params_k.keys():
        raise ContractError("encoders expose different parameter names")
    for name, p_q in params_q.items():
        p_k = params_k[name]
        if p_k.shape != p_q.shape:
            raise ContractError(f"parameter {name} shape mismatch: {p_k.shape} vs {p_q.shape}")
        p_k.mul_(m).add_(p_q, alpha=1.0 - m)
    return encoder_k


def clone_parameters(src: nn.Module, dst: nn.Module) -> None:
    """Copy src parameters into dst (exact match of names and shapes required)."""
    with torch.no_grad():
        src_params = dict(src.named_parameters())
        dst_params = dict(dst.named_parameters())
        if src_params.keys() != dst_params.keys():
            raise ContractError("modules expose different parameter names")
        for name, p in src_params.items():
            dst_params[name].copy_(p)


@dataclass
class StepStats:
    loss: float
    accuracy: float


@dataclass
class PretrainState:
    encoder_q: ContrastiveEncoder
    encoder_k: ContrastiveEncoder
    queue: KeyQueue
    optimizer: torch.optim.Optimizer
    config: ContrastiveConfig
    mask_spec: MaskSpec
    rng: np.random.Generator
    step: int = 0
    image_size: int | None = field(default=None)


def init_pretrain_state(
    config: ContrastiveConfig,
    image_size: int,
    seed: int,
    mask_spec: MaskSpec | None = None,
) -> PretrainState:
    """Fresh query/key encoders (key = exact copy), empty queue, SGD optimizer."""
    config.validate()
    encoder_q = seeded_module(seed, ContrastiveEncoder, repr_dim=config.repr_dim)
    encoder_k = seeded_module(seed, ContrastiveEncoder, repr_dim=config.repr_dim)
    clone_parameters(encoder_q, encoder_k)
    for p in encoder_k.parameters():
        p.requires_grad_(False)
    optimizer = torch.optim.SGD(encoder_q.parameters(), lr=config.lr)
    if mask_spec is None:
        mask_spec = default_irregular_spec(image_size)
    return PretrainState(
        encoder_q=encoder_q,
        encoder_k=encoder_k,
        queue=KeyQueue(config.queue_capacity),
        optimizer=optimizer,
        config=config,
        mask_spec=mask_spec,
        rng=np.random.default_rng(seed),
        image_size=image_size,
    )


def pretrain_step(state: PretrainState, images: list[np.ndarray]) -> tuple[PretrainState, StepStats]:
    """One contrastive step: pair, encode, InfoNCE, SGD, momentum update, enqueue."""
    pairs = [make_positive_pair(img, state.rng, state.mask_spec) for img in images]
    x_q = pack_inputs([p[0] for p in pairs])
    x_k = pack_inputs([p[1] for p in pairs])

    z_q = state.encoder_q(x_q)
    with torch.no_grad():
        z_k = state.encoder_k(x_k)

    tau = state.config.tau
    if len(state.queue) == 0:
        # First batch: each sample trains against its already-enqueued
        # predecessors within the batch; the very first sample has none.
        losses = []
        correct = 0
        for i in range(z_q.shape[0]):
            logits = torch.cat(
                [(z_q[i] * z_k[i]).sum().view(1), z_q[i] @ z_k[:i].t()]
            ).unsqueeze(0) / tau
            losses.append(F.cross_entropy(logits, torch.zeros(1, dtype=torch.long)))
            correct += int(logits.argmax() == 0)
        loss = torch.stack(losses).mean()
        accuracy = correct / z_q.shape[0]
    else:
        negatives = state.queue.as_tensor()
        loss = info_nce(z_q, z_k, negatives, tau)
        accuracy = retrieval_accuracy(z_q.detach(), z_k, negatives)

    state.optimizer.zero_grad()
    loss.backward()
    state.optimizer.step()
    momentum_update(state.encoder_q, state.encoder_k, state.config.momentum)
    enqueue_keys(state.queue, z_k)
    state.step += 1
    return state, StepStats(loss=float(loss.detach()), accuracy=accuracy)
