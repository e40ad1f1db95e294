"""Frozen, randomly initialised transformer encoder used as the backbone."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import stream


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    num_layers: int = 8
    model_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 128
    vocab_size: int = 2048
    max_seq_len: int = 16
    backbone_seed: int = 0
    # optional masked-token pretext training before the weights are frozen
    pretrain_steps: int = 0
    pretrain_lr: float = 1e-3
    pretrain_mask_rate: float = 0.15

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.num_heads < 1 or self.model_dim % self.num_heads:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if min(self.model_dim, self.ffn_dim, self.vocab_size, self.max_seq_len) < 1:
            raise ConfigError(f"invalid backbone geometry: {self}")
        if self.pretrain_steps < 0 or not 0 < self.pretrain_mask_rate < 1:
            raise ConfigError(f"invalid pretraining settings: {self}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(**d)


def frozen_parameter_count(cfg: BackboneConfig) -> int:
    d, f = cfg.model_dim, cfg.ffn_dim
    embeddings = cfg.vocab_size * d + cfg.max_seq_len * d + 2 * d
    per_layer = 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d) + 2 * d
    return embeddings + cfg.num_layers * per_layer


# hook(layer_index, ffn_output_or_block_output) -> tensor of the same shape
Hook = Callable[[int, Tensor], Tensor]


class Encoder:
    """Post-LN encoder: embeddings, L x {attention, add+LN, FFN, add+LN}, mean pool.

    Adapters enter through ``hook``. With ``hook_position="ffn_output"`` the
    hook rewrites the feed-forward output before the block's second residual
    add; with ``"block_output"`` it rewrites the block output after the
    second layer norm.
    """

    def __init__(self, cfg: BackboneConfig):
        self.cfg = cfg
        rng = stream(cfg.backbone_seed, "backbone")
        d, f = cfg.model_dim, cfg.ffn_dim
        p: dict[str, Tensor] = {}

        def lin(name, fan_in, fan_out):
            p[name + ".w"] = Tensor(rng.normal(0.0, fan_in ** -0.5, (fan_in, fan_out)))
            p[name + ".b"] = Tensor(np.zeros(fan_out))

        def norm(name):
            p[name + ".g"] = Tensor(np.ones(d))
            p[name + ".b"] = Tensor(np.zeros(d))

        p["tok"] = Tensor(rng.normal(0.0, 1.0, (cfg.vocab_size, d)))
        p["pos"] = Tensor(rng.normal(0.0, 1.0, (cfg.max_seq_len, d)))
        norm("emb_ln")
        for i in range(cfg.num_layers):
            for part in ("q", "k", "v", "o"):
                lin(f"l{i}.attn.{part}", d, d)
            norm(f"l{i}.ln1")
            lin(f"l{i}.ffn1", d, f)
            lin(f"l{i}.ffn2", f, d)
            norm(f"l{i}.ln2")
        self.params = p

    @property
    def num_layers(self) -> int:
        return self.cfg.num_layers

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def embed(self, ids: np.ndarray) -> Tensor:
        p = self.params
        t = ids.shape[1]
        if t > self.cfg.max_seq_len:
            raise ConfigError(f"sequence length {t} exceeds max_seq_len {self.cfg.max_seq_len}")
        h = ad.add(ad.embedding(p["tok"], ids), ad.embedding(p["pos"], np.arange(t)))
        return ad.layer_norm(h, p["emb_ln.g"], p["emb_ln.b"])

    def attention(self, i: int, h: Tensor, key_mask: np.ndarray) -> Tensor:
        p = self.params
        b, t, d = h.shape
        nh = self.cfg.num_heads
        dh = d // nh

        def heads(name):
            x = ad.linear(h, p[f"l{i}.attn.{name}.w"], p[f"l{i}.attn.{name}.b"])
            return ad.transpose(ad.reshape(x, (b, t, nh, dh)), 1, 2)

        q, k, v = heads("q"), heads("k"), heads("v")
        scores = ad.scale(ad.matmul(q, ad.transpose(k, 2, 3)), dh ** -0.5)
        att = ad.masked_softmax(scores, key_mask[:, None, None, :])
        ctx = ad.reshape(ad.transpose(ad.matmul(att, v), 1, 2), (b, t, d))
        return ad.linear(ctx, p[f"l{i}.attn.o.w"], p[f"l{i}.attn.o.b"])

    def block(self, i: int, h: Tensor, key_mask: np.ndarray, hook: Hook | None = None,
              hook_position: str = "ffn_output") -> Tensor:
        p = self.params
        a = ad.layer_norm(ad.add(h, self.attention(i, h, key_mask)), p[f"l{i}.ln1.g"], p[f"l{i}.ln1.b"])
        ff = ad.linear(ad.relu(ad.linear(a, p[f"l{i}.ffn1.w"], p[f"l{i}.ffn1.b"])),
                       p[f"l{i}.ffn2.w"], p[f"l{i}.ffn2.b"])
        if hook is not None and hook_position == "ffn_output":
            ff = hook(i, ff)
        out = ad.layer_norm(ad.add(a, ff), p[f"l{i}.ln2.g"], p[f"l{i}.ln2.b"])
        if hook is not None and hook_position == "block_output":
            out = hook(i, out)
        return out

    def encode(self, ids: np.ndarray, mask: np.ndarray | None = None, hook: Hook | None = None,
               hook_position: str = "ffn_output") -> tuple[Tensor, np.ndarray]:
        """Per-token states (batch, seq, model_dim) and the boolean key mask."""
        ids = np.asarray(ids)
        if mask is None:
            mask = np.ones(ids.shape, dtype=bool)
        mask = np.asarray(mask, dtype=bool)
        h = self.embed(ids)
        for i in range(self.cfg.num_layers):
            h = self.block(i, h, mask, hook, hook_position)
        return h, mask

    def forward(self, ids: np.ndarray, mask: np.ndarray | None = None, hook: Hook | None = None,
                hook_position: str = "ffn_output") -> Tensor:
        """Pooled (batch, model_dim) features for integer ``ids`` of shape (batch, seq)."""
        h, mask = self.encode(ids, mask, hook, hook_position)
        return ad.mean_pool(h, mask)


def build_backbone(cfg: BackboneConfig) -> Encoder:
    return Encoder(cfg)


def pretrain_masked(encoder: Encoder, ids: np.ndarray, mask: np.ndarray, steps: int, lr: float = 1e-3,
                    mask_rate: float = 0.15, mask_token: int = 2, batch_size: int = 16,
                    seed: int = 0) -> list[float]:
    """Masked-token recovery on unlabeled ``ids``, then re-freeze the weights.

    Masked positions are replaced by ``mask_token`` and predicted through the
    transposed token embedding. Returns the loss per step.
    """
    from .optim import Adam

    ids = np.asarray(ids, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    params = encoder.parameters()
    for t in params:
        t.requires_grad = True
    opt = Adam(params, lr=lr)
    rng = stream(seed, "pretrain", encoder.cfg.backbone_seed)
    losses = []
    try:
        for _ in range(steps):
            rows = rng.choice(len(ids), size=min(batch_size, len(ids)), replace=False)
            x, m = ids[rows], mask[rows]
            pick = (rng.random(x.shape) < mask_rate) & m
            if not pick.any():
                pick[0, int(np.flatnonzero(m[0])[0])] = True
            targets = x[pick]
            x = np.where(pick, mask_token, x)
            h, _ = encoder.encode(x, m)
            flat = ad.reshape(h, (-1, h.shape[-1]))
            picked = ad.embedding(flat, np.flatnonzero(pick.reshape(-1)))
            logits = ad.matmul(picked, ad.transpose(encoder.params["tok"], 0, 1))
            loss = ad.softmax_cross_entropy(logits, targets)
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            losses.append(float(loss.values))
    finally:
        for t in params:
            t.requires_grad = False
            t.grad = None
    return losses
