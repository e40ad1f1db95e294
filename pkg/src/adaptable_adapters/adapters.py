"""Adapter layers, adapter variants and the model that mounts them on the encoder."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import ClassVar, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import ConfigError, Encoder
from .rational import DEFAULT_ORDER, RationalCoefficients, init_named, rational_forward
from .rng import stream
from .switch import Decision, SwitchParams, gs_forward, gumbel_sample, hard_decision, mix

log = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "rational")
POSITIONS = ("ffn_output", "block_output")


@dataclass(frozen=True)
class AdapterConfig:
    reduction_factor: int = 16
    activation: str = "relu"
    skip_connection: bool = True
    position: str = "ffn_output"
    rational_init: str = "one"
    rational_order: tuple[int, int] = DEFAULT_ORDER
    tau: float = 0.1
    straight_through: bool = False
    init_std: float = 0.02

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.position not in POSITIONS:
            raise ConfigError(f"unknown adapter position {self.position!r}")
        if self.reduction_factor < 1:
            raise ConfigError("reduction_factor must be >= 1")
        object.__setattr__(self, "rational_order", tuple(self.rational_order))

    def hidden_size(self, d: int) -> int:
        if d % self.reduction_factor:
            raise ConfigError(f"reduction factor {self.reduction_factor} does not divide d={d}")
        return d // self.reduction_factor

    def to_dict(self) -> dict:
        out = asdict(self)
        out["rational_order"] = list(self.rational_order)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "AdapterConfig":
        return cls(**d)


def adapter_linear_count(d: int, r: int, bias: bool = True) -> int:
    """Parameters of one down/up projection pair: (d/r)*d*2 (+ (d/r) + d biases)."""
    if d % r:
        raise ConfigError(f"reduction factor {r} does not divide d={d}")
    n = d // r
    return n * d * 2 + ((n + d) if bias else 0)


def adapter_stack_count(d: int, r: int, num_layers: int, bias: bool = False) -> int:
    return num_layers * adapter_linear_count(d, r, bias)


# --------------------------------------------------------------------------
# variants


@dataclass(frozen=True)
class Baseline:
    kind: ClassVar[str] = "baseline"


@dataclass(frozen=True)
class AA:
    kind: ClassVar[str] = "aa"


@dataclass(frozen=True)
class SwitchOnly:
    """AA with ReLU in place of the rational."""
    kind: ClassVar[str] = "switch_only"


@dataclass(frozen=True)
class RationalOnly:
    """Standard skip adapters on every layer, rational activation."""
    kind: ClassVar[str] = "rational_only"


@dataclass(frozen=True)
class AAFocused:
    layers: tuple[int, ...] = ()
    activation: str = "rational"
    kind: ClassVar[str] = "aa_focused"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(sorted(set(int(i) for i in self.layers))))


@dataclass(frozen=True)
class AdapterDrop:
    train_drop_max: int | None = None
    infer_drop: int = 0
    kind: ClassVar[str] = "adapterdrop"


@dataclass(frozen=True)
class LastK:
    """Adapters on the last ``k`` layers only.

    ReLU gives standard skip adapters; rational gives the skip-free rational
    layers used by AA-focused, so ``LastK(k, "rational")`` equals AA-focused
    on the last k layers.
    """
    k: int = 0
    activation: str = "relu"
    kind: ClassVar[str] = "last_k"


AdapterVariant = Union[Baseline, AA, SwitchOnly, RationalOnly, AAFocused, AdapterDrop, LastK]
_VARIANTS = {v.kind: v for v in (Baseline, AA, SwitchOnly, RationalOnly, AAFocused, AdapterDrop, LastK)}


def variant_to_dict(v: AdapterVariant) -> dict:
    d = {"kind": v.kind, **asdict(v)}
    if "layers" in d:
        d["layers"] = list(d["layers"])
    return d


def variant_from_dict(d: dict) -> AdapterVariant:
    d = dict(d)
    kind = d.pop("kind")
    if kind not in _VARIANTS:
        raise ConfigError(f"unknown adapter variant {kind!r}")
    d.pop("name", None)
    try:
        return _VARIANTS[kind](**d)
    except TypeError as e:
        raise ConfigError(f"bad parameters for variant {kind!r}: {e}") from None


def variant_label(v: AdapterVariant) -> str:
    if isinstance(v, AAFocused):
        return "aa_focused[" + ",".join(map(str, v.layers)) + "]"
    if isinstance(v, AdapterDrop):
        return f"adapterdrop_drop{v.infer_drop}"
    if isinstance(v, LastK):
        return f"last{v.k}_{v.activation}"
    return v.kind


@dataclass(frozen=True)
class LayerSpec:
    switched: bool
    activation: str
    skip: bool


def layer_plan(variant: AdapterVariant, num_layers: int) -> dict[int, LayerSpec]:
    """Which encoder layers carry which kind of adapter layer."""
    L = num_layers
    std_relu = LayerSpec(False, "relu", True)
    focused = LayerSpec(False, "rational", False)
    if isinstance(variant, (Baseline, AdapterDrop)):
        return {i: std_relu for i in range(L)}
    if isinstance(variant, RationalOnly):
        return {i: LayerSpec(False, "rational", True) for i in range(L)}
    if isinstance(variant, AA):
        return {i: LayerSpec(True, "rational", False) for i in range(L)}
    if isinstance(variant, SwitchOnly):
        return {i: LayerSpec(True, "relu", False) for i in range(L)}
    if isinstance(variant, AAFocused):
        bad = [i for i in variant.layers if not 0 <= i < L]
        if bad:
            raise ConfigError(f"AA-focused layers {bad} outside [0, {L})")
        spec = focused if variant.activation == "rational" else LayerSpec(False, variant.activation, False)
        return {i: spec for i in variant.layers}
    if isinstance(variant, LastK):
        if not 0 <= variant.k <= L:
            raise ConfigError(f"LastK k={variant.k} outside [0, {L}]")
        spec = focused if variant.activation == "rational" else LayerSpec(False, variant.activation, True)
        return {i: spec for i in range(L - variant.k, L)}
    raise ConfigError(f"unsupported variant {variant!r}")


# --------------------------------------------------------------------------
# layers


class AdapterLayer:
    """Down-projection, activation, up-projection, optionally plus the input."""

    def __init__(self, d: int, cfg: AdapterConfig, rng: np.random.Generator):
        n = cfg.hidden_size(d)
        self.cfg = cfg
        self.w_down = Tensor(rng.normal(0.0, cfg.init_std, (d, n)), requires_grad=True)
        self.b_down = Tensor(np.zeros(n), requires_grad=True)
        self.w_up = Tensor(rng.normal(0.0, cfg.init_std, (n, d)), requires_grad=True)
        self.b_up = Tensor(np.zeros(d), requires_grad=True)
        self.rational: RationalCoefficients | None = None
        if cfg.activation == "rational":
            self.rational = init_named(cfg.rational_init, cfg.rational_order)

    def branch(self, h: Tensor) -> Tensor:
        z = ad.linear(h, self.w_down, self.b_down)
        z = rational_forward(z, self.rational) if self.rational is not None else ad.relu(z)
        return ad.linear(z, self.w_up, self.b_up)

    def __call__(self, h: Tensor) -> Tensor:
        out = self.branch(h)
        return ad.add(h, out) if self.cfg.skip_connection else out

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("w_down", self.w_down), ("b_down", self.b_down),
               ("w_up", self.w_up), ("b_up", self.b_up)]
        if self.rational is not None:
            out += [("rational.a", self.rational.a), ("rational.b", self.rational.b)]
        return out


class SwitchedAdapterLayer:
    """Gumbel-Softmax switch over {skip-free adapter, identity}."""

    def __init__(self, d: int, cfg: AdapterConfig, rng: np.random.Generator):
        self.adapter = AdapterLayer(d, replace(cfg, skip_connection=False), rng)
        self.switch = SwitchParams((0.0, 0.0), cfg.tau)
        self.straight_through = cfg.straight_through

    @property
    def rational(self):
        return self.adapter.rational

    def __call__(self, h: Tensor, training: bool, rng: np.random.Generator | None = None,
                 y: Tensor | None = None) -> Tensor:
        if y is None and not training:
            return self.adapter(h) if hard_decision(self.switch) is Decision.ADAPTER else h
        if y is None:
            y = gs_forward(self.switch, gumbel_sample(rng), self.straight_through)
        return mix(y, self.adapter(h), h)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return self.adapter.named_parameters() + [("switch.logits", self.switch.logits)]


# --------------------------------------------------------------------------
# model


class AdapterModel:
    """Frozen encoder + adapter layers per ``variant`` + linear classification head."""

    def __init__(self, encoder: Encoder, variant: AdapterVariant, adapter_cfg: AdapterConfig,
                 num_classes: int, seed: int, freeze_head: bool = False):
        self.encoder = encoder
        self.variant = variant
        self.adapter_cfg = adapter_cfg
        self.num_classes = num_classes
        self.seed = seed
        L, d = encoder.num_layers, encoder.cfg.model_dim
        adapter_cfg.hidden_size(d)
        self.plan = layer_plan(variant, L)
        self.layers: dict[int, AdapterLayer | SwitchedAdapterLayer] = {}
        for i, spec in sorted(self.plan.items()):
            cfg = replace(adapter_cfg, activation=spec.activation, skip_connection=spec.skip)
            rng = stream(seed, "adapter", i)
            self.layers[i] = SwitchedAdapterLayer(d, cfg, rng) if spec.switched else AdapterLayer(d, cfg, rng)
        hrng = stream(seed, "head")
        self.head_w = Tensor(hrng.normal(0.0, 0.02, (d, num_classes)), requires_grad=not freeze_head)
        self.head_b = Tensor(np.zeros(num_classes), requires_grad=not freeze_head)
        self.drop_prefix = 0
        self.forced_switches: dict[int, Tensor] = {}
        if isinstance(variant, AdapterDrop):
            if variant.infer_drop > L:
                log.warning("infer_drop %d > %d layers; clamped", variant.infer_drop, L)

    @property
    def num_layers(self) -> int:
        return self.encoder.num_layers

    @property
    def train_drop_max(self) -> int:
        v = self.variant
        return self.num_layers - 1 if v.train_drop_max is None else min(v.train_drop_max, self.num_layers)

    def begin_step(self, rng: np.random.Generator) -> None:
        """Per-iteration randomness that is not per-layer: the AdapterDrop prefix."""
        if isinstance(self.variant, AdapterDrop):
            self.drop_prefix = int(rng.integers(0, self.train_drop_max + 1))

    def _inference_drop(self) -> int:
        if isinstance(self.variant, AdapterDrop):
            return min(self.variant.infer_drop, self.num_layers)
        return 0

    def forward(self, ids: np.ndarray, mask: np.ndarray | None = None, training: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        drop = self.drop_prefix if training else self._inference_drop()

        def hook(i: int, h: Tensor) -> Tensor:
            layer = self.layers.get(i)
            if layer is None or i < drop:
                return h
            if isinstance(layer, SwitchedAdapterLayer):
                return layer(h, training, rng, self.forced_switches.get(i))
            return layer(h)

        pooled = self.encoder.forward(ids, mask, hook, self.adapter_cfg.position)
        return ad.linear(pooled, self.head_w, self.head_b)

    __call__ = forward

    def predict(self, ids: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        with ad.no_grad():
            return np.argmax(self.forward(ids, mask).values, axis=1)

    def switched_layers(self) -> dict[int, SwitchedAdapterLayer]:
        return {i: l for i, l in self.layers.items() if isinstance(l, SwitchedAdapterLayer)}

    def set_switch_logits(self, logits_by_layer: dict[int, tuple[float, float]]) -> None:
        for i, lg in logits_by_layer.items():
            self.switched_layers()[i].switch.logits.values[:] = lg

    def inference_layers(self) -> list[int]:
        """Layers whose adapter is active at inference time."""
        drop = self._inference_drop()
        out = []
        for i, layer in sorted(self.layers.items()):
            if i < drop:
                continue
            if isinstance(layer, SwitchedAdapterLayer) and hard_decision(layer.switch) is Decision.IDENTITY:
                continue
            out.append(i)
        return out

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in sorted(self.layers.items()):
            out += [(f"adapter{i}.{n}", t) for n, t in layer.named_parameters()]
        out += [("head.w", self.head_w), ("head.b", self.head_b)]
        return out

    def trainable_parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters() if t.requires_grad]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.values.copy() for n, t in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)}")
        for n, t in own.items():
            v = np.asarray(state[n], dtype=np.float64)
            if v.shape != t.shape:
                raise ad.ShapeError(f"{n}: stored shape {v.shape} vs model shape {t.shape}")
            t.values[...] = v

    def rationals(self) -> dict[int, RationalCoefficients]:
        return {i: l.rational for i, l in sorted(self.layers.items()) if l.rational is not None}


# --------------------------------------------------------------------------
# architecture extraction and parameter accounting


@dataclass
class ArchitectureSpec:
    selected_layers: tuple[int, ...]
    total_layers: int
    activation: str = "rational"
    provenance: dict = field(default_factory=dict)
    switch_probabilities: dict[int, list[float]] = field(default_factory=dict)

    def __post_init__(self):
        layers = tuple(sorted(set(int(i) for i in self.selected_layers)))
        bad = [i for i in layers if not 0 <= i < self.total_layers]
        if bad:
            raise ConfigError(f"selected layers {bad} outside [0, {self.total_layers})")
        self.selected_layers = layers

    def __len__(self) -> int:
        return len(self.selected_layers)

    def to_dict(self) -> dict:
        return {
            "selected_layers": list(self.selected_layers),
            "total_layers": self.total_layers,
            "activation": self.activation,
            "provenance": self.provenance,
            "switch_probabilities": {str(k): v for k, v in sorted(self.switch_probabilities.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        return cls(tuple(d["selected_layers"]), int(d["total_layers"]), d.get("activation", "rational"),
                   dict(d.get("provenance", {})),
                   {int(k): list(v) for k, v in d.get("switch_probabilities", {}).items()})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> "ArchitectureSpec":
        return cls.from_dict(json.loads(s))

    def focused_variant(self) -> AAFocused:
        return AAFocused(self.selected_layers, self.activation)


def extract_architecture(model: AdapterModel, provenance: dict | None = None) -> ArchitectureSpec:
    switched = model.switched_layers()
    if not switched:
        raise ConfigError(f"variant {variant_label(model.variant)} has no switches to read")
    selected = [i for i, l in switched.items() if hard_decision(l.switch) is Decision.ADAPTER]
    activation = "rational" if any(l.rational is not None for l in switched.values()) else "relu"
    probs = {i: l.switch.pi.tolist() for i, l in switched.items()}
    return ArchitectureSpec(tuple(selected), model.num_layers, activation, dict(provenance or {}), probs)


def make_sim_spec(count: int, total_layers: int, provenance: dict | None = None) -> ArchitectureSpec:
    """The last ``count`` layers."""
    if not 0 <= count <= total_layers:
        raise ValueError(f"count {count} outside [0, {total_layers}]")
    return ArchitectureSpec(tuple(range(total_layers - count, total_layers)), total_layers,
                            "rational", dict(provenance or {}))


def parameter_report(model: AdapterModel) -> dict[str, int]:
    d = model.encoder.cfg.model_dim
    r = model.adapter_cfg.reduction_factor
    linear = rational = switch = 0
    for layer in model.layers.values():
        if isinstance(layer, SwitchedAdapterLayer):
            switch += layer.switch.logits.size
            layer = layer.adapter
        linear += layer.w_down.size + layer.b_down.size + layer.w_up.size + layer.b_up.size
        if layer.rational is not None:
            rational += layer.rational.num_parameters
    head = model.head_w.size + model.head_b.size
    trainable = sum(t.size for t in model.trainable_parameters())
    return {
        "backbone_frozen": model.encoder.num_parameters(),
        "adapter_linear": linear,
        "adapter_linear_no_bias": len(model.layers) * adapter_linear_count(d, r, bias=False),
        "rational": rational,
        "switch": switch,
        "head": head,
        "adapter_total": linear + rational + switch,
        "trainable": int(trainable),
    }


def count_parameters(model: AdapterModel, trainable_only: bool = True) -> int:
    rep = parameter_report(model)
    return rep["trainable"] if trainable_only else rep["trainable"] + rep["backbone_frozen"] + (
        0 if model.head_w.requires_grad else rep["head"])
