"""Low-rank adapters on a miniature attention layer.

Instead of fine-tuning a weight matrix W, a pair of small matrices (A, B) is
trained while W stays frozen; the adapted projection is
y = W x + (alpha/r) B (A x).  Because B starts at zero the adapted model is
exactly the base model until training moves it, and the extra weights can be
merged into W afterwards without changing any output.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import torch
from torch import nn

from .checkpoint import Checkpoint, LossCurve
from .errors import CheckpointError, InvalidConfigError, ShapeError

PROJECTIONS = ("query", "key", "value", "output")


@dataclass(frozen=True)
class LoRAConfig:
    rank: int = 8
    alpha: float = 16.0
    targets: frozenset[str] = frozenset({"key", "value"})

    def __post_init__(self) -> None:
        if self.rank < 1:
            raise InvalidConfigError(f"rank must be >= 1, got {self.rank}")
        if self.alpha <= 0:
            raise InvalidConfigError(f"alpha must be positive, got {self.alpha}")
        object.__setattr__(self, "targets", frozenset(self.targets))
        unknown = self.targets - set(PROJECTIONS)
        if unknown:
            raise InvalidConfigError(f"unknown projection targets: {sorted(unknown)}")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


@dataclass
class AdapterPair:
    """The trainable low-rank factors for one projection."""

    A: torch.Tensor  # [r, d_in]
    B: torch.Tensor  # [d_out, r]
    scaling: float

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    def parameter_count(self) -> int:
        return self.A.numel() + self.B.numel()

    def delta(self) -> torch.Tensor:
        return self.scaling * (self.B @ self.A)


def init_adapter(
    d_in: int, d_out: int, cfg: LoRAConfig, generator: torch.Generator | None = None
) -> AdapterPair:
    """A ~ N(0, 1/r), B = 0, so the adapted layer starts as the base layer."""
    if cfg.rank > min(d_in, d_out):
        raise InvalidConfigError(
            f"rank {cfg.rank} exceeds min(d_in, d_out) = {min(d_in, d_out)}"
        )
    a = torch.empty(cfg.rank, d_in).normal_(
        std=1.0 / cfg.rank**0.5, generator=generator
    )
    b = torch.zeros(d_out, cfg.rank)
    a.requires_grad_(True)
    b.requires_grad_(True)
    return AdapterPair(A=a, B=b, scaling=cfg.scaling)


def adapted_forward(W: torch.Tensor, adapter: AdapterPair, x: torch.Tensor) -> torch.Tensor:
    """y = W x + scaling * B (A x), with x carrying d_in on its last axis.

    The low-rank product is applied factor by factor; the dense update
    scaling * B A is never materialized here.
    """
    if x.shape[-1] != W.shape[1]:
        raise ShapeError(f"x has {x.shape[-1]} features, W expects {W.shape[1]}")
    if adapter.A.shape[1] != W.shape[1] or adapter.B.shape[0] != W.shape[0]:
        raise ShapeError("adapter factors do not conform to W")
    return x @ W.T + adapter.scaling * ((x @ adapter.A.T) @ adapter.B.T)


def merge(W: torch.Tensor, adapter: AdapterPair) -> torch.Tensor:
    """W + scaling * B A.  Applying this twice doubles the update; callers
    merge into the pristine base exactly once."""
    if adapter.A.shape[1] != W.shape[1] or adapter.B.shape[0] != W.shape[0]:
        raise ShapeError("adapter factors do not conform to W")
    return W + adapter.delta()


def adapter_parameter_count(d_in: int, d_out: int, cfg: LoRAConfig) -> int:
    return cfg.rank * (d_in + d_out)


class ToyAttentionLayer(nn.Module):
    """Single-head attention with frozen projections and optional adapters.

    The four base matrices never receive gradients; only adapter factors on
    the configured targets are trainable.
    """

    def __init__(
        self,
        d_model: int,
        cfg: LoRAConfig | None = None,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        self.d_model = d_model
        self.cfg = cfg or LoRAConfig()
        weights = {}
        for name in PROJECTIONS:
            w = torch.empty(d_model, d_model).normal_(
                std=d_model**-0.5, generator=generator
            )
            weights[name] = w
        self.base = weights
        self.adapters: dict[str, AdapterPair] = {
            name: init_adapter(d_model, d_model, self.cfg, generator)
            for name in sorted(self.cfg.targets)
        }

    def project(self, name: str, x: torch.Tensor) -> torch.Tensor:
        w = self.base[name]
        if name in self.adapters:
            return adapted_forward(w, self.adapters[name], x)
        return x @ w.T

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.d_model:
            raise ShapeError(f"expected feature size {self.d_model}, got {x.shape[-1]}")
        q = self.project("query", x)
        k = self.project("key", x)
        v = self.project("value", x)
        scores = q @ k.transpose(-2, -1) / self.d_model**0.5
        attn = torch.softmax(scores, dim=-1)
        return self.project("output", attn @ v)

    def base_forward(self, x: torch.Tensor) -> torch.Tensor:
        q = x @ self.base["query"].T
        k = x @ self.base["key"].T
        v = x @ self.base["value"].T
        attn = torch.softmax(q @ k.transpose(-2, -1) / self.d_model**0.5, dim=-1)
        return (attn @ v) @ self.base["output"].T

    def trainable_parameters(self) -> list[torch.Tensor]:
        out = []
        for name in sorted(self.adapters):
            out += [self.adapters[name].A, self.adapters[name].B]
        return out

    def base_checksum(self) -> str:
        h = hashlib.sha256()
        for name in PROJECTIONS:
            h.update(self.base[name].detach().numpy().tobytes())
        return h.hexdigest()

    def clone_for_full_finetune(self) -> "ToyAttentionLayer":
        """A copy whose base matrices are trainable and which has no adapters."""
        twin = ToyAttentionLayer.__new__(ToyAttentionLayer)
        nn.Module.__init__(twin)
        twin.d_model = self.d_model
        twin.cfg = self.cfg
        twin.base = {k: v.detach().clone().requires_grad_(True) for k, v in self.base.items()}
        twin.adapters = {}
        return twin


@dataclass(frozen=True)
class LoRATrainConfig:
    """Defaults mirror the published fine-tuning regime; toy runs override."""

    epochs: int = 4
    learning_rate: float = 5e-6
    weight_decay: float = 0.01
    batch_size: int = 4
    grad_accumulation: int = 16
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.grad_accumulation < 1:
            raise InvalidConfigError("epochs, batch_size and grad_accumulation must be >= 1")
        if self.learning_rate <= 0:
            raise InvalidConfigError("learning_rate must be positive")


def _train(layer, params, inputs, targets, cfg: LoRATrainConfig) -> LossCurve:
    n = inputs.shape[0]
    steps_per_epoch = max(1, n // cfg.batch_size)
    total_updates = max(1, cfg.epochs * steps_per_epoch // cfg.grad_accumulation)
    optimizer = torch.optim.AdamW(
        params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay
    )
    # linear decay to zero over the full run
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda u: max(0.0, 1.0 - u / total_updates)
    )
    gen = torch.Generator().manual_seed(cfg.seed)
    curve = LossCurve()
    micro = 0
    for epoch in range(1, cfg.epochs + 1):
        order = torch.randperm(n, generator=gen)
        total = 0.0
        for start in range(0, steps_per_epoch * cfg.batch_size, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss = (layer(inputs[idx]) - targets[idx]).square().mean()
            (loss / cfg.grad_accumulation).backward()
            micro += 1
            if micro % cfg.grad_accumulation == 0:
                optimizer.step()
                optimizer.zero_grad()
                scheduler.step()
            total += float(loss.detach()) * len(idx)
        curve.append(epoch=epoch, loss=total / (steps_per_epoch * cfg.batch_size))
    return curve


def train_adapters(layer: ToyAttentionLayer, dataset, cfg: LoRATrainConfig) -> LossCurve:
    """Fit only the adapter factors; the base matrices cannot move."""
    inputs, targets = _as_tensors(dataset)
    return _train(layer, layer.trainable_parameters(), inputs, targets, cfg)


def train_full_baseline(layer: ToyAttentionLayer, dataset, cfg: LoRATrainConfig) -> LossCurve:
    """Fine-tune every base matrix; the forgetting comparison baseline."""
    if layer.adapters:
        raise InvalidConfigError("full fine-tune expects a layer without adapters")
    inputs, targets = _as_tensors(dataset)
    return _train(layer, list(layer.base.values()), inputs, targets, cfg)


def _as_tensors(dataset):
    if isinstance(dataset, tuple) and len(dataset) == 2:
        x, y = dataset
    else:
        xs, ys = zip(*dataset)
        x, y = torch.stack(list(xs)), torch.stack(list(ys))
    x = torch.as_tensor(x, dtype=torch.float32)
    y = torch.as_tensor(y, dtype=torch.float32)
    if x.shape[0] != y.shape[0] or x.shape[0] == 0:
        raise ShapeError("dataset inputs and targets must pair up")
    return x, y


def output_drift(before: ToyAttentionLayer, after: ToyAttentionLayer, probes: torch.Tensor) -> float:
    """Mean L2 output change on probe inputs, the forgetting metric."""
    with torch.no_grad():
        delta = after(probes) - before(probes)
    return float(delta.flatten(1).norm(dim=1).mean())


def adapter_checkpoint(layer: ToyAttentionLayer, **manifest_fields) -> Checkpoint:
    tensors = {}
    for name, pair in layer.adapters.items():
        tensors[f"adapters.{name}.A"] = pair.A.detach().clone()
        tensors[f"adapters.{name}.B"] = pair.B.detach().clone()
    manifest = {
        "role": "lora",
        "rank": layer.cfg.rank,
        "alpha": layer.cfg.alpha,
        "targets": sorted(layer.cfg.targets),
        "d_model": layer.d_model,
        **manifest_fields,
    }
    return Checkpoint(manifest=manifest, tensors=tensors)


def load_adapters(layer: ToyAttentionLayer, directory) -> None:
    ckpt = Checkpoint.load(directory)
    if ckpt.manifest.get("role") != "lora":
        raise CheckpointError("checkpoint does not hold adapters")
    if int(ckpt.manifest["d_model"]) != layer.d_model:
        raise CheckpointError("adapter checkpoint was built for a different layer size")
    for name, pair in layer.adapters.items():
        with torch.no_grad():
            pair.A.copy_(ckpt.tensors[f"adapters.{name}.A"])
            pair.B.copy_(ckpt.tensors[f"adapters.{name}.B"])
