"""LoRA adapters and int8 absmax weight quantization."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeMismatch, UnknownTarget

ADAPTER_FORMAT = "promptclinic/adapters"
DEFAULT_TARGETS = ("q", "v")
_ATTN_TARGETS = ("q", "k", "v", "o")
_FF_TARGETS = ("ff1", "ff2")


@dataclass
class LoraAdapter:
    """Low-rank update ``(alpha / r) * B @ A`` for an ``n x m`` weight."""

    target: str
    A: torch.Tensor  # r x m
    B: torch.Tensor  # n x r
    alpha: float

    def __post_init__(self):
        if self.A.dim() != 2 or self.B.dim() != 2 or self.A.shape[0] != self.B.shape[1]:
            raise ShapeMismatch(f"{self.target}: A {tuple(self.A.shape)} and B {tuple(self.B.shape)} not conformable")
        check_rank(self.rank, self.in_features, self.out_features)

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def in_features(self) -> int:
        return self.A.shape[1]

    @property
    def out_features(self) -> int:
        return self.B.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> torch.Tensor:
        return self.scale * (self.B @ self.A)


def check_rank(r: int, m: int, n: int) -> None:
    if r < 1 or r >= min(m, n):
        raise ValueError(f"LoRA rank must satisfy 1 <= r < min(m, n) = {min(m, n)}, got {r}")


def _check_target(W: torch.Tensor, ad: LoraAdapter) -> None:
    if tuple(W.shape) != (ad.out_features, ad.in_features):
        raise ShapeMismatch(f"{ad.target}: weight {tuple(W.shape)} vs adapter ({ad.out_features}, {ad.in_features})")


def apply_lora(W: torch.Tensor, ad: LoraAdapter, x: torch.Tensor) -> torch.Tensor:
    """``W x + (alpha/r) B (A x)`` without materializing the merged weight."""
    _check_target(W, ad)
    if x.shape[-1] != ad.in_features:
        raise ShapeMismatch(f"input width {x.shape[-1]} != {ad.in_features}")
    return W @ x + ad.scale * (ad.B @ (ad.A @ x))


def merge_lora(W: torch.Tensor, ad: LoraAdapter) -> torch.Tensor:
    _check_target(W, ad)
    return W + ad.delta()


# --------------------------------------------------------------------------
# quantization

@dataclass
class QuantizedMatrix:
    q: torch.Tensor  # int8
    scale: torch.Tensor  # (n, 1) per-row or (1, 1) per-tensor
    shape: tuple[int, ...]


def _round_half_away(x: torch.Tensor) -> torch.Tensor:
    return torch.sign(x) * torch.floor(x.abs() + 0.5)


def quantize_int8(W: torch.Tensor, granularity: str = "row") -> QuantizedMatrix:
    """Symmetric absmax int8 quantization; zero rows get scale 1 and q = 0."""
    if not torch.isfinite(W).all():
        raise ValueError("cannot quantize a non-finite matrix")
    W2 = W.reshape(W.shape[0], -1) if W.dim() > 1 else W.reshape(1, -1)
    if granularity == "row":
        absmax = W2.abs().amax(dim=1, keepdim=True)
    elif granularity == "tensor":
        absmax = W2.abs().amax().reshape(1, 1)
    else:
        raise ValueError(f"unknown granularity {granularity!r}")
    safe = torch.where(absmax > 0, absmax, torch.full_like(absmax, 127.0))
    q = _round_half_away(W2 * 127.0 / safe).clamp(-127, 127).to(torch.int8)
    return QuantizedMatrix(q.reshape(W.shape), safe / 127.0, tuple(W.shape))


def dequantize(Q: QuantizedMatrix, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    q2 = Q.q.reshape(Q.q.shape[0], -1) if Q.q.dim() > 1 else Q.q.reshape(1, -1)
    return (q2.to(dtype) * Q.scale.to(dtype)).reshape(Q.shape)


class QuantLinear(nn.Module):
    """Frozen linear layer stored as int8 + per-row scales."""

    def __init__(self, out_features: int, in_features: int, has_bias: bool, dtype=torch.float64, granularity="row"):
        super().__init__()
        self.granularity = granularity
        self.register_buffer("q", torch.zeros(out_features, in_features, dtype=torch.int8))
        rows = out_features if granularity == "row" else 1
        self.register_buffer("scale", torch.ones(rows, 1, dtype=dtype))
        self.register_buffer("bias", torch.zeros(out_features, dtype=dtype) if has_bias else None)

    @classmethod
    def from_linear(cls, lin: nn.Linear, granularity: str = "row") -> "QuantLinear":
        W = lin.weight.detach()
        ql = cls(W.shape[0], W.shape[1], lin.bias is not None, W.dtype, granularity)
        Q = quantize_int8(W, granularity)
        ql.q.copy_(Q.q)
        ql.scale.copy_(Q.scale)
        if lin.bias is not None:
            ql.bias.copy_(lin.bias.detach())
        return ql

    @property
    def weight(self) -> torch.Tensor:
        return dequantize(QuantizedMatrix(self.q, self.scale, tuple(self.q.shape)), self.scale.dtype)

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


# --------------------------------------------------------------------------
# attaching to a model

class LoRALinear(nn.Module):
    def __init__(self, base: nn.Module, rank: int, alpha: float, target: str = ""):
        super().__init__()
        n, m = base.weight.shape
        check_rank(rank, m, n)
        self.base = base
        self.target = target
        self.rank = rank
        self.alpha = float(alpha)
        dtype = base.weight.dtype
        self.lora_A = nn.Parameter(torch.zeros(rank, m, dtype=dtype))
        self.lora_B = nn.Parameter(torch.zeros(n, rank, dtype=dtype))
        for p in base.parameters():
            p.requires_grad_(False)

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def adapter(self) -> LoraAdapter:
        return LoraAdapter(self.target, self.lora_A, self.lora_B, self.alpha)

    def forward(self, x):
        return self.base(x) + self.scale * F.linear(F.linear(x, self.lora_A), self.lora_B)


def target_paths(n_layers: int, targets: Iterable[str] = DEFAULT_TARGETS, layers: Iterable[int] | None = None) -> list[str]:
    """Expand short names (``q``, ``ff1`` ...) to module paths, or validate full paths."""
    layer_ids = range(n_layers) if layers is None else list(layers)
    paths = []
    for t in targets:
        if t in _ATTN_TARGETS:
            paths += [f"blocks.{i}.attn.{t}" for i in layer_ids]
        elif t in _FF_TARGETS:
            paths += [f"blocks.{i}.{t}" for i in layer_ids]
        elif t.startswith("blocks."):
            paths.append(t)
        else:
            raise UnknownTarget(f"unknown LoRA target {t!r}")
    return paths


def target_shape(config, path: str) -> tuple[int, int]:
    """(n, m) = (out, in) of the weight at ``path`` for a :class:`ModelConfig`."""
    parts = path.split(".")
    d, f = config.d_model, config.d_ff
    ok_layer = len(parts) >= 3 and parts[0] == "blocks" and parts[1].isdigit() and int(parts[1]) < config.n_layers
    if ok_layer and len(parts) == 4 and parts[2] == "attn" and parts[3] in _ATTN_TARGETS:
        return d, d
    if ok_layer and len(parts) == 3 and parts[2] == "ff1":
        return f, d
    if ok_layer and len(parts) == 3 and parts[2] == "ff2":
        return d, f
    raise UnknownTarget(f"unknown LoRA target {path!r}")


def trainable_param_count(config, lora_spec: Mapping[str, int] | Iterable[tuple[str, int]]) -> int:
    """Sum of ``r * (m + n)`` over adapted targets; base weights count as frozen."""
    items = lora_spec.items() if isinstance(lora_spec, Mapping) else lora_spec
    total = 0
    for path, r in items:
        n, m = target_shape(config, path)
        check_rank(r, m, n)
        total += r * (m + n)
    return total


def _get(model: nn.Module, path: str) -> nn.Module:
    try:
        return model.get_submodule(path)
    except AttributeError as exc:
        raise UnknownTarget(f"unknown module path {path!r}") from exc


def _set(model: nn.Module, path: str, module: nn.Module) -> None:
    parent, _, name = path.rpartition(".")
    setattr(_get(model, parent) if parent else model, name, module)


def attach_lora(
    model: nn.Module,
    targets: Iterable[str] = DEFAULT_TARGETS,
    rank: int = 4,
    alpha: float | None = None,
    seed: int = 0,
    init_std: float = 0.02,
    layers: Iterable[int] | None = None,
) -> list[str]:
    """Wrap target linears in :class:`LoRALinear` (A ~ N(0, init_std), B = 0).

    ``alpha`` defaults to ``2 * rank``. Returns the adapted module paths.
    """
    alpha = 2.0 * rank if alpha is None else alpha
    gen = torch.Generator().manual_seed(seed)
    paths = target_paths(model.cfg.n_layers, targets, layers)
    for path in paths:
        base = _get(model, path)
        if isinstance(base, LoRALinear):
            raise ValueError(f"{path} already carries a LoRA adapter")
        lora = LoRALinear(base, rank, alpha, target=path)
        with torch.no_grad():
            lora.lora_A.copy_(torch.randn(lora.lora_A.shape, generator=gen, dtype=lora.lora_A.dtype) * init_std)
        _set(model, path, lora)
    return paths


def lora_modules(model: nn.Module) -> dict[str, LoRALinear]:
    return {name: m for name, m in model.named_modules() if isinstance(m, LoRALinear)}


def merge_model_lora(model: nn.Module) -> None:
    """Fold every adapter into a plain full-precision linear, in place."""
    for path, lora in lora_modules(model).items():
        W = lora.base.weight.detach()
        merged = nn.Linear(W.shape[1], W.shape[0], bias=lora.base.bias is not None, dtype=W.dtype)
        with torch.no_grad():
            merged.weight.copy_(merge_lora(W, lora.adapter()))
            if lora.base.bias is not None:
                merged.bias.copy_(lora.base.bias)
        _set(model, path, merged)


def quantize_model(model: nn.Module, granularity: str = "row") -> list[str]:
    """Replace every linear inside the transformer blocks with a :class:`QuantLinear`."""
    done = []
    for name, module in list(model.named_modules()):
        if not name.startswith("blocks."):
            continue
        if isinstance(module, LoRALinear) and isinstance(module.base, nn.Linear):
            module.base = QuantLinear.from_linear(module.base, granularity)
            done.append(name)
        elif isinstance(module, nn.Linear) and not name.endswith(".base"):
            _set(model, name, QuantLinear.from_linear(module, granularity))
            done.append(name)
    return sorted(done)


# --------------------------------------------------------------------------
# serialization

def model_structure(model: nn.Module) -> dict:
    quantized = []
    granularity = "row"
    for name, m in model.named_modules():
        if isinstance(m, QuantLinear):
            quantized.append(name[: -len(".base")] if name.endswith(".base") else name)
            granularity = m.granularity
    return {
        "quantized": sorted(quantized),
        "granularity": granularity,
        "lora": [
            {"target": path, "rank": m.rank, "alpha": m.alpha} for path, m in sorted(lora_modules(model).items())
        ],
        "soft_prompt": 0 if model.soft_prompt is None else model.soft_prompt.length,
    }


def restore_structure(model: nn.Module, structure: Mapping) -> None:
    """Rebuild quantized/LoRA/soft-prompt modules so a saved state dict loads strictly."""
    for path in structure.get("quantized", []):
        lin = _get(model, path)
        ql = QuantLinear(lin.weight.shape[0], lin.weight.shape[1], lin.bias is not None,
                         lin.weight.dtype, structure.get("granularity", "row"))
        _set(model, path, ql)
    for rec in structure.get("lora", []):
        _set(model, rec["target"], LoRALinear(_get(model, rec["target"]), rec["rank"], rec["alpha"], rec["target"]))
    if structure.get("soft_prompt"):
        from .prompting import SoftPrompt

        model.soft_prompt = SoftPrompt.zeros(structure["soft_prompt"], model.cfg.d_model, model.cfg.torch_dtype)


def adapter_records(model: nn.Module) -> list[dict]:
    return [
        {"target": path, "rank": m.rank, "alpha": m.alpha,
         "A": m.lora_A.detach().clone(), "B": m.lora_B.detach().clone()}
        for path, m in sorted(lora_modules(model).items())
    ]


def save_adapters(path: str | Path, model: nn.Module) -> None:
    torch.save({"format": ADAPTER_FORMAT, "version": 1, "adapters": adapter_records(model)}, Path(path))


def load_adapters(path: str | Path) -> list[LoraAdapter]:
    payload = torch.load(Path(path), weights_only=True)
    if payload.get("format") != ADAPTER_FORMAT:
        raise ValueError(f"{path}: not an adapter archive")
    return [LoraAdapter(r["target"], r["A"], r["B"], r["alpha"]) for r in payload["adapters"]]


def attach_adapters(model: nn.Module, adapters: Iterable[LoraAdapter]) -> None:
    """Attach previously saved adapters to a (base) model."""
    for ad in adapters:
        base = _get(model, ad.target)
        _check_target(base.weight, ad)
        lora = LoRALinear(base, ad.rank, ad.alpha, ad.target)
        with torch.no_grad():
            lora.lora_A.copy_(ad.A)
            lora.lora_B.copy_(ad.B)
        _set(model, ad.target, lora)
