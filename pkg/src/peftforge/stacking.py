"""Adapter composition over a frozen base: the two-slot stack.

A stack holds at most one domain adapter and one downstream adapter, each
with its own freeze flag, plus a classifier head for downstream training.
Low-rank deltas from both slots targeting the same projection are summed;
a trained low-rank adapter can also be folded into the base weights so the
merged model needs no adapter at runtime.

The six named fine-tuning variants map freeze flags onto the slots:

    head_only                          no adapters, head only
    lora_only                          fresh downstream adapter + head
    domain_frozen                      frozen domain adapter + head
    domain_frozen_plus_downstream      frozen domain + trainable downstream + head
    domain_trainable                   trainable domain adapter + head
    domain_trainable_plus_downstream   both adapters trainable + head
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

from . import tensor as T
from .adapters import Adapter, LoraAdapter, adapter_param_count
from .data import TaskSpec
from .model import BaseModel, ClassifierHead, ModelConfig
from .tensor import Tensor


@dataclass(frozen=True)
class VariantSpec:
    name: str
    needs_domain: bool
    needs_downstream: bool
    domain_frozen: bool


VARIANTS: dict[str, VariantSpec] = {
    "head_only": VariantSpec("head_only", False, False, False),
    "lora_only": VariantSpec("lora_only", False, True, False),
    "domain_frozen": VariantSpec("domain_frozen", True, False, True),
    "domain_frozen_plus_downstream": VariantSpec("domain_frozen_plus_downstream", True, True, True),
    "domain_trainable": VariantSpec("domain_trainable", True, False, False),
    "domain_trainable_plus_downstream": VariantSpec("domain_trainable_plus_downstream", True, True, False),
}

VARIANT_NAMES = tuple(VARIANTS)


class AdapterStack:
    """Ordered (domain, downstream) adapters plus an optional classifier head."""

    def __init__(self, domain: Adapter | None = None, downstream: Adapter | None = None,
                 head: ClassifierHead | None = None):
        self.domain = domain
        self.downstream = downstream
        self.head = head
        if sum(1 for a in self.adapters() if a.kind == "adaption") > 1:
            raise ValueError("at most one gated-prompt adapter per stack")

    def adapters(self) -> list[Adapter]:
        return [a for a in (self.domain, self.downstream) if a is not None]

    # -- hooks consumed by the model forward ---------------------------------

    def lora_delta_sum(self, layer: int, projection: str, x: Tensor,
                       train: bool = False, rng=None) -> Tensor | None:
        total = None
        for a in self.adapters():
            if a.kind == "lora" and a.targets(projection):
                d = a.delta(layer, projection, x, train=train, rng=rng)
                total = d if total is None else T.add(total, d)
        return total

    def virtual_rows(self, train: bool = False, rng=None) -> Tensor | None:
        rows = [a.virtual_rows(train=train, rng=rng)
                for a in self.adapters() if a.kind in ("prompt", "ptuning")]
        if not rows:
            return None
        return rows[0] if len(rows) == 1 else T.concat(rows, axis=0)

    def prefix_rows(self, layer: int) -> tuple[Tensor, Tensor] | None:
        pairs = [a.prefix_kv(layer) for a in self.adapters() if a.kind == "prefix"]
        if not pairs:
            return None
        if len(pairs) == 1:
            return pairs[0]
        return (T.concat([p[0] for p in pairs], axis=0),
                T.concat([p[1] for p in pairs], axis=0))

    def adaption_terms(self, layer: int) -> tuple[Tensor, Tensor] | None:
        for a in self.adapters():
            if a.kind == "adaption" and a.affected(layer):
                return a.prompt_gate(layer)
        return None

    def num_virtual_tokens(self) -> int:
        return sum(a.config.num_virtual_tokens
                   for a in self.adapters() if a.kind in ("prompt", "ptuning"))

    # -- training surface -----------------------------------------------------

    def named_trainable(self) -> Iterator[tuple[str, Tensor]]:
        for slot, a in (("domain", self.domain), ("downstream", self.downstream)):
            if a is not None:
                for name, p in a.named_params():
                    if p.requires_grad:
                        yield f"{slot}.{name}", p
        if self.head is not None:
            for name, p in self.head.named_params():
                if p.requires_grad:
                    yield f"head.{name}", p

    def trainable_params(self) -> list[Tensor]:
        return [p for _, p in self.named_trainable()]


def compose(base: BaseModel, variant: str, domain: Adapter | None = None,
            downstream: Adapter | None = None, task: TaskSpec | None = None,
            head: ClassifierHead | None = None, head_seed: int = 0) -> AdapterStack:
    """Build the stack for a named variant and pin every freeze flag.

    The base is always frozen; the head (created from ``task`` unless one
    is passed in) is always trainable, even in the frozen-adapter variants.
    """
    try:
        spec = VARIANTS[variant]
    except KeyError:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANT_NAMES}") from None
    if spec.needs_domain and domain is None:
        raise ValueError(f"variant {variant!r} requires a domain adapter")
    if not spec.needs_domain and domain is not None:
        raise ValueError(f"variant {variant!r} does not take a domain adapter")
    if spec.needs_downstream and downstream is None:
        raise ValueError(f"variant {variant!r} requires a downstream adapter")
    if not spec.needs_downstream and downstream is not None:
        raise ValueError(f"variant {variant!r} does not take a downstream adapter")

    base.set_trainable(False)
    if domain is not None:
        domain.set_frozen(spec.domain_frozen)
    if downstream is not None:
        downstream.set_frozen(False)
    if head is None:
        if task is not None:
            head = ClassifierHead(base.config.d_model, task, seed=head_seed, dtype=base.dtype)
    if head is not None:
        head.set_trainable(True)
    return AdapterStack(domain=domain, downstream=downstream, head=head)


def count_trainable(obj, base) -> tuple[int, float]:
    """(trainable parameter count, fraction of the base parameter count).

    ``obj`` may be an AdapterStack (counts its currently-trainable leaves),
    an Adapter instance (counts all its parameters), or an adapter config
    (counts from the shape manifest without allocating). ``base`` is a
    BaseModel or a ModelConfig.
    """
    base_cfg = base.config if isinstance(base, BaseModel) else base
    if not isinstance(base_cfg, ModelConfig):
        raise TypeError(f"base must be a BaseModel or ModelConfig, got {type(base).__name__}")
    denom = BaseModel.param_count(base_cfg)

    if isinstance(obj, AdapterStack):
        count = sum(p.size for p in obj.trainable_params())
    elif isinstance(obj, Adapter):
        count = obj.param_count()
    else:
        count = adapter_param_count(obj, base_cfg)
    return count, count / denom


def format_fraction(fraction: float) -> str:
    """Render a trainable fraction the way parameter tables report it."""
    return f"{fraction * 100:.2f}%"


def merge_lora(base: BaseModel, adapter: LoraAdapter) -> BaseModel:
    """Fold a low-rank adapter into copied base weights.

    W <- W + (alpha/r) * (B A)^T per targeted projection, matching the
    dynamic path x W + (alpha/r) x A^T B^T. Only low-rank adapters have a
    weight-space representation, so anything else is rejected.
    """
    if not isinstance(adapter, LoraAdapter):
        raise ValueError(f"only low-rank adapters can be merged, got kind "
                         f"{getattr(adapter, 'kind', type(adapter).__name__)!r}")
    if adapter.model_config.d_model != base.config.d_model or \
            adapter.model_config.n_layers != base.config.n_layers:
        raise ValueError("adapter dimensions do not match the base model")

    merged = BaseModel(base.config, seed=0, dtype=base.dtype)
    for name, p in base.named_params():
        merged.params[name] = Tensor(p.data.copy())
    s = adapter.config.scaling
    for i in range(base.config.n_layers):
        for t in adapter.config.targets:
            a, b = adapter.pair(i, t)
            w = merged.params[f"layers.{i}.{t}"]
            w.data = w.data + (s * (b.data @ a.data)).T.astype(w.data.dtype)
    return merged
