"""The five parameter-efficient adapter families.

* low-rank (lora): per-projection A/B factor pairs added to attention
  projections, scaled by alpha/r, B zero-initialized so the delta starts
  at exactly zero.
* prefix: trainable key/value rows prepended to attention at every layer,
  optionally reparameterized through a shared embedding + two-layer MLP.
* prompt: trainable soft-prompt embeddings prepended to the input sequence
  only, initialized from token embeddings of a seed text or at random.
* ptuning: soft prompts produced by a trainable encoder (MLP or LSTM) over
  seed embeddings.
* adaption: per-layer prompt rows on the top layers whose attention
  contribution is scaled by a zero-initialized tanh gate.

Every adapter exposes named_params(), set_frozen(), and a shape manifest
so parameter counts can be computed without allocating anything.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .data import Vocab
from .model import ATTN_PROJECTIONS, BaseModel, ModelConfig
from .tensor import Tensor

DEFAULT_PROMPT_INIT_TEXT = "Finish this clinical note:"


# ---------------------------------------------------------------------------
# Configs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LoraConfig:
    r: int = 16
    alpha: float = 32.0
    dropout: float = 0.1
    targets: tuple[str, ...] = ("wq", "wv")

    def __post_init__(self):
        if self.r < 1:
            raise ValueError("rank must be >= 1")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if not self.targets:
            raise ValueError("a trainable adapter needs at least one target projection")
        bad = set(self.targets) - set(ATTN_PROJECTIONS)
        if bad:
            raise ValueError(f"unknown target projections {sorted(bad)}")
        object.__setattr__(self, "targets", tuple(self.targets))

    @property
    def scaling(self) -> float:
        return self.alpha / self.r


@dataclass(frozen=True)
class PrefixConfig:
    num_virtual_tokens: int = 10
    prefix_projection: bool = False

    def __post_init__(self):
        if self.num_virtual_tokens < 1:
            raise ValueError("num_virtual_tokens must be >= 1")


@dataclass(frozen=True)
class PromptConfig:
    num_virtual_tokens: int = 10
    init: str = "text"  # text | random
    init_text: str = DEFAULT_PROMPT_INIT_TEXT

    def __post_init__(self):
        if self.num_virtual_tokens < 1:
            raise ValueError("num_virtual_tokens must be >= 1")
        if self.init not in ("text", "random"):
            raise ValueError(f"unknown prompt init {self.init!r}")


@dataclass(frozen=True)
class PTuningConfig:
    num_virtual_tokens: int = 10
    reparameterisation: str = "MLP"  # MLP | LSTM
    hidden: int = 128
    num_layers: int = 2
    dropout: float = 0.1

    def __post_init__(self):
        if self.num_virtual_tokens < 1:
            raise ValueError("num_virtual_tokens must be >= 1")
        if self.reparameterisation not in ("MLP", "LSTM"):
            raise ValueError(f"unknown reparameterisation {self.reparameterisation!r}")
        if self.hidden < 1 or self.num_layers < 1:
            raise ValueError("hidden size and num_layers must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


@dataclass(frozen=True)
class AdaptionPromptConfig:
    adapter_length: int = 10
    adapter_layers: int = 30  # capped at the model's layer count

    def __post_init__(self):
        if self.adapter_length < 1 or self.adapter_layers < 1:
            raise ValueError("adapter_length and adapter_layers must be >= 1")


# ---------------------------------------------------------------------------
# Base plumbing
# ---------------------------------------------------------------------------


class Adapter:
    """Common surface: named tensors, freeze control, shape manifest."""

    kind: str = ""

    def __init__(self, config, model_config: ModelConfig):
        self.config = config
        self.model_config = model_config
        self._params: dict[str, Tensor] = {}

    def _add(self, name: str, t: Tensor) -> Tensor:
        t.requires_grad = True
        self._params[name] = t
        return t

    def named_params(self) -> Iterator[tuple[str, Tensor]]:
        yield from self._params.items()

    def set_frozen(self, flag: bool) -> None:
        for p in self._params.values():
            p.requires_grad = not flag

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self._params.values())

    def param_count(self) -> int:
        return sum(p.size for p in self._params.values())


def _manifest_count(manifest: list[tuple[str, tuple[int, ...]]]) -> int:
    return sum(int(np.prod(s)) for _, s in manifest)


# ---------------------------------------------------------------------------
# Low-rank adapter
# ---------------------------------------------------------------------------


class LoraAdapter(Adapter):
    kind = "lora"

    def __init__(self, config: LoraConfig, model_config: ModelConfig,
                 seed: int = 0, dtype=np.float32, init: bool = True):
        super().__init__(config, model_config)
        if config.r > model_config.d_model:
            raise ValueError(f"rank {config.r} exceeds d_model {model_config.d_model}")
        rng = T.make_rng(seed)
        for name, shape in self.param_manifest(config, model_config):
            if init and name.endswith(".A"):
                self._add(name, T.gaussian(shape, 0.0, 0.02, rng, dtype=dtype))
            else:
                self._add(name, T.zeros(shape, dtype=dtype))

    @staticmethod
    def param_manifest(config: LoraConfig, model_config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
        d = model_config.d_model
        out = []
        for i in range(model_config.n_layers):
            for t in config.targets:
                out.append((f"layers.{i}.{t}.A", (config.r, d)))
                out.append((f"layers.{i}.{t}.B", (d, config.r)))
        return out

    def targets(self, projection: str) -> bool:
        return projection in self.config.targets

    def pair(self, layer: int, projection: str) -> tuple[Tensor, Tensor]:
        return (self._params[f"layers.{layer}.{projection}.A"],
                self._params[f"layers.{layer}.{projection}.B"])

    def delta(self, layer: int, projection: str, x: Tensor,
              train: bool = False, rng=None) -> Tensor:
        """(alpha/r) * dropout(x) A^T B^T; dropout only active in training."""
        if not self.targets(projection):
            raise ValueError(f"projection {projection!r} is not targeted by this adapter")
        a, b = self.pair(layer, projection)
        xd = T.dropout(x, self.config.dropout, rng, training=train) if train else x
        low = T.matmul(xd, T.permute(a, (1, 0)))
        return T.scale(T.matmul(low, T.permute(b, (1, 0))), self.config.scaling)

    def max_abs_delta(self) -> float:
        """Largest |entry| over all materialized weight deltas."""
        worst = 0.0
        for i in range(self.model_config.n_layers):
            for t in self.config.targets:
                a, b = self.pair(i, t)
                worst = max(worst, float(np.abs(self.config.scaling * (b.data @ a.data)).max()))
        return worst


# ---------------------------------------------------------------------------
# Prefix adapter
# ---------------------------------------------------------------------------


class PrefixAdapter(Adapter):
    kind = "prefix"

    def __init__(self, config: PrefixConfig, model_config: ModelConfig,
                 seed: int = 0, dtype=np.float32, init: bool = True):
        super().__init__(config, model_config)
        rng = T.make_rng(seed)
        for name, shape in self.param_manifest(config, model_config):
            self._add(name, T.gaussian(shape, 0.0, 0.02, rng, dtype=dtype) if init
                      else T.zeros(shape, dtype=dtype))

    @staticmethod
    def param_manifest(config: PrefixConfig, model_config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
        d, n, nvt = model_config.d_model, model_config.n_layers, config.num_virtual_tokens
        if config.prefix_projection:
            return [("embed", (nvt, d)), ("w1", (d, d)), ("w2", (d, n * 2 * d))]
        out = []
        for i in range(n):
            out.append((f"layers.{i}.k", (nvt, d)))
            out.append((f"layers.{i}.v", (nvt, d)))
        return out

    def prefix_kv(self, layer: int) -> tuple[Tensor, Tensor]:
        """Key/value rows [num_virtual_tokens, d_model] for one layer."""
        if layer >= self.model_config.n_layers:
            raise ValueError(f"layer {layer} out of range")
        if not self.config.prefix_projection:
            return self._params[f"layers.{layer}.k"], self._params[f"layers.{layer}.v"]
        d = self.model_config.d_model
        h = T.tanh(T.matmul(self._params["embed"], self._params["w1"]))
        flat = T.matmul(h, self._params["w2"])  # [nvt, n_layers * 2 * d]
        base = layer * 2 * d
        return T.narrow(flat, 1, base, d), T.narrow(flat, 1, base + d, d)


# ---------------------------------------------------------------------------
# Prompt adapter
# ---------------------------------------------------------------------------


class PromptAdapter(Adapter):
    kind = "prompt"

    def __init__(self, config: PromptConfig, model_config: ModelConfig,
                 seed: int = 0, dtype=np.float32, init: bool = True,
                 base: BaseModel | None = None, vocab: Vocab | None = None):
        super().__init__(config, model_config)
        nvt = config.num_virtual_tokens
        if not init:
            self._add("rows", T.zeros((nvt, model_config.d_model), dtype=dtype))
            return
        if config.init == "random":
            rows = T.gaussian((nvt, model_config.d_model), 0.0, 0.02, T.make_rng(seed), dtype=dtype)
        else:
            if base is None or vocab is None:
                raise ValueError("text-initialized prompts need the base model and vocabulary")
            ids = vocab.encode(config.init_text)
            if not ids:
                raise ValueError("prompt init text tokenizes to zero tokens")
            cycled = [ids[i % len(ids)] for i in range(nvt)]
            rows = Tensor(base.params["embed.weight"].data[cycled].astype(dtype, copy=True))
        self._add("rows", rows)

    @staticmethod
    def param_manifest(config: PromptConfig, model_config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
        return [("rows", (config.num_virtual_tokens, model_config.d_model))]

    def virtual_rows(self, train: bool = False, rng=None) -> Tensor:
        return self._params["rows"]


# ---------------------------------------------------------------------------
# P-tuning adapter
# ---------------------------------------------------------------------------


class PTuningAdapter(Adapter):
    kind = "ptuning"

    def __init__(self, config: PTuningConfig, model_config: ModelConfig,
                 seed: int = 0, dtype=np.float32, init: bool = True):
        super().__init__(config, model_config)
        rng = T.make_rng(seed)
        for name, shape in self.param_manifest(config, model_config):
            if not init or name.endswith(".bias"):
                self._add(name, T.zeros(shape, dtype=dtype))
            else:
                self._add(name, T.gaussian(shape, 0.0, 0.02, rng, dtype=dtype))

    @staticmethod
    def param_manifest(config: PTuningConfig, model_config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
        d, h, nvt = model_config.d_model, config.hidden, config.num_virtual_tokens
        out: list[tuple[str, tuple[int, ...]]] = [("seed_embed", (nvt, d))]
        if config.reparameterisation == "MLP":
            out.append(("mlp.0.w", (d, h)))
            for j in range(1, config.num_layers):
                out.append((f"mlp.{j}.w", (h, h)))
        else:
            for j in range(config.num_layers):
                in_dim = d if j == 0 else h
                out.append((f"lstm.{j}.w_ih", (in_dim, 4 * h)))
                out.append((f"lstm.{j}.w_hh", (h, 4 * h)))
                out.append((f"lstm.{j}.bias", (4 * h,)))
        out.append(("w_out", (h, d)))
        return out

    def _encode_mlp(self, x: Tensor, train: bool, rng) -> Tensor:
        h = T.relu(T.matmul(x, self._params["mlp.0.w"]))
        for j in range(1, self.config.num_layers):
            h = T.dropout(h, self.config.dropout, rng, training=train)
            h = T.relu(T.matmul(h, self._params[f"mlp.{j}.w"]))
        return h

    def _encode_lstm(self, x: Tensor, train: bool, rng) -> Tensor:
        """Single-direction stacked LSTM over the seed rows."""
        hs = self.config.hidden
        nvt = x.shape[0]
        seq: list[Tensor] = [T.narrow(x, 0, t, 1) for t in range(nvt)]  # [1, d] each
        for j in range(self.config.num_layers):
            w_ih = self._params[f"lstm.{j}.w_ih"]
            w_hh = self._params[f"lstm.{j}.w_hh"]
            bias = self._params[f"lstm.{j}.bias"]
            h = T.zeros((1, hs), dtype=x.dtype)
            c = T.zeros((1, hs), dtype=x.dtype)
            outs: list[Tensor] = []
            for x_t in seq:
                gates = T.add(T.add(T.matmul(x_t, w_ih), T.matmul(h, w_hh)),
                              T.expand_leading(bias, (1,)))
                i_g = T.sigmoid(T.narrow(gates, 1, 0, hs))
                f_g = T.sigmoid(T.narrow(gates, 1, hs, hs))
                g_g = T.tanh(T.narrow(gates, 1, 2 * hs, hs))
                o_g = T.sigmoid(T.narrow(gates, 1, 3 * hs, hs))
                c = T.add(T.mul(f_g, c), T.mul(i_g, g_g))
                h = T.mul(o_g, T.tanh(c))
                outs.append(h)
            if train and self.config.dropout > 0 and j < self.config.num_layers - 1:
                outs = [T.dropout(o, self.config.dropout, rng, training=True) for o in outs]
            seq = outs
        return T.concat(seq, axis=0)  # [nvt, hidden]

    def virtual_rows(self, train: bool = False, rng=None) -> Tensor:
        x = self._params["seed_embed"]
        enc = (self._encode_mlp if self.config.reparameterisation == "MLP" else self._encode_lstm)
        return T.matmul(enc(x, train, rng), self._params["w_out"])


# ---------------------------------------------------------------------------
# Adaption-prompt adapter
# ---------------------------------------------------------------------------


class AdaptionPromptAdapter(Adapter):
    kind = "adaption"

    def __init__(self, config: AdaptionPromptConfig, model_config: ModelConfig,
                 seed: int = 0, dtype=np.float32, init: bool = True):
        super().__init__(config, model_config)
        rng = T.make_rng(seed)
        for name, shape in self.param_manifest(config, model_config):
            if init and name.endswith(".rows"):
                self._add(name, T.gaussian(shape, 0.0, 0.02, rng, dtype=dtype))
            else:
                self._add(name, T.zeros(shape, dtype=dtype))  # gates start at 0

    @staticmethod
    def affected_layers(config: AdaptionPromptConfig, model_config: ModelConfig) -> range:
        n = min(config.adapter_layers, model_config.n_layers)
        return range(model_config.n_layers - n, model_config.n_layers)

    @staticmethod
    def param_manifest(config: AdaptionPromptConfig, model_config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
        out = []
        for i in AdaptionPromptAdapter.affected_layers(config, model_config):
            out.append((f"layers.{i}.rows", (config.adapter_length, model_config.d_model)))
            out.append((f"layers.{i}.gate", (1,)))
        return out

    def affected(self, layer: int) -> bool:
        return layer in self.affected_layers(self.config, self.model_config)

    def prompt_gate(self, layer: int) -> tuple[Tensor, Tensor]:
        if not self.affected(layer):
            raise ValueError(f"layer {layer} is not in the adapted top layers")
        return self._params[f"layers.{layer}.rows"], self._params[f"layers.{layer}.gate"]


# ---------------------------------------------------------------------------
# Registry and factories
# ---------------------------------------------------------------------------

ADAPTER_CLASSES: dict[str, type[Adapter]] = {
    "lora": LoraAdapter,
    "prefix": PrefixAdapter,
    "prompt": PromptAdapter,
    "ptuning": PTuningAdapter,
    "adaption": AdaptionPromptAdapter,
}

CONFIG_CLASSES = {
    "lora": LoraConfig,
    "prefix": PrefixConfig,
    "prompt": PromptConfig,
    "ptuning": PTuningConfig,
    "adaption": AdaptionPromptConfig,
}

_CONFIG_KIND = {cls: kind for kind, cls in CONFIG_CLASSES.items()}


def adapter_kind_of_config(config) -> str:
    try:
        return _CONFIG_KIND[type(config)]
    except KeyError:
        raise ValueError(f"not an adapter config: {type(config).__name__}") from None


def adapter_param_count(config, model_config: ModelConfig) -> int:
    """Trainable parameter count from shapes alone (no allocation)."""
    kind = adapter_kind_of_config(config)
    return _manifest_count(ADAPTER_CLASSES[kind].param_manifest(config, model_config))


def make_adapter(kind: str, config, model_config: ModelConfig, seed: int = 0,
                 dtype=np.float32, base: BaseModel | None = None,
                 vocab: Vocab | None = None) -> Adapter:
    if kind not in ADAPTER_CLASSES:
        raise ValueError(f"unknown adapter kind {kind!r}")
    cls = ADAPTER_CLASSES[kind]
    if kind == "prompt":
        return cls(config, model_config, seed=seed, dtype=dtype, base=base, vocab=vocab)
    return cls(config, model_config, seed=seed, dtype=dtype)
