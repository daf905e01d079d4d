"""Bi-modal concurrent learning encoder.

A learnable visual token cross-attends to the projected patch features for
``L`` layers. Layer-1 attention picks the patches used for knowledge
retrieval; the retrieved features are projected and a learnable textual token
cross-attends to them for ``L - 1`` layers. With the visual token disabled the
encoder falls back to plain self-attention over all patch tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bank import KnowledgeBank
from .nn import CrossAttnLayer, LayerNorm, Linear, Module, SelfAttnLayer, uniform_param
from .retrieval import RetrievalConfig, RetrievedKnowledge, retrieve_all


@dataclass(frozen=True)
class EncoderConfig:
    L: int = 3
    heads: int = 4
    d: int = 512
    ws: bool = True
    wsl: bool = True
    vtca: bool = True
    kr: bool = True
    ttca: bool = True
    ffn_mult: int = 4

    def __post_init__(self):
        if self.ttca and not self.kr:
            raise ValueError("invalid flags: ttca requires kr")
        if self.kr and not self.vtca:
            raise ValueError("invalid flags: kr requires vtca (selection uses layer-1 attention)")
        if self.ws and not self.ttca:
            raise ValueError("invalid flags: ws requires ttca (no knowledge branch to share with)")
        if self.ttca and self.L < 2:
            raise ValueError(f"invalid flags: ttca needs L >= 2, got L={self.L}")
        if self.L < 0 or (self.vtca and self.L < 1):
            raise ValueError(f"invalid layer count L={self.L}")
        if self.d % self.heads:
            raise ValueError(f"width {self.d} not divisible by {self.heads} heads")

    def flags(self) -> dict[str, bool]:
        return {k: getattr(self, k) for k in ("ws", "wsl", "vtca", "kr", "ttca")}


# Flag grid of the component ablation, rows 1-6.
ABLATION_ROWS: list[dict[str, bool]] = [
    dict(ws=False, wsl=False, vtca=False, kr=False, ttca=False),
    dict(ws=False, wsl=False, vtca=True, kr=False, ttca=False),
    dict(ws=False, wsl=True, vtca=True, kr=False, ttca=False),
    dict(ws=False, wsl=True, vtca=True, kr=True, ttca=False),
    dict(ws=False, wsl=True, vtca=True, kr=True, ttca=True),
    dict(ws=True, wsl=True, vtca=True, kr=True, ttca=True),
]


@dataclass
class EncoderOutput:
    memory: Tensor  # (B, n_mem, d), already normalized
    memory_mask: np.ndarray | None  # (B, n_mem) True = padding
    visual: Tensor | None  # V_L, (B, 1, d)
    textual: Tensor | None  # T_{L-1}, (B, 1, d)
    layer1_attention: list[np.ndarray]  # per case, length M_b
    attention_history: list[np.ndarray] = field(default_factory=list)  # per layer, (B, M)
    retrieved: list[RetrievedKnowledge | None] = field(default_factory=list)
    n_vtca: int = 0
    n_ttca: int = 0


def pad_stack(arrays: Sequence[np.ndarray], dtype) -> tuple[np.ndarray, np.ndarray]:
    """Stack (n_i, d) arrays into (B, max n, d) plus a (B, max n) padding mask."""
    n = max(len(a) for a in arrays)
    d = arrays[0].shape[1]
    out = np.zeros((len(arrays), n, d), dtype=dtype)
    mask = np.ones((len(arrays), n), dtype=bool)
    for i, a in enumerate(arrays):
        out[i, : len(a)] = a
        mask[i, : len(a)] = False
    return out, mask


class BiGenEncoder(Module):
    def __init__(self, cfg: EncoderConfig, d_in: int, d_bank: int, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        d = cfg.d
        bound = 1.0 / np.sqrt(d)
        self.patch_proj = Linear(d_in, d, rng, dtype)

        def layer():
            return CrossAttnLayer(d, cfg.heads, rng, dtype, cfg.ffn_mult)

        if cfg.vtca:
            self.visual_token = uniform_param(rng, (1, 1, d), bound, dtype)
            if cfg.wsl:
                shared = layer()
                self.vtca_layers = [shared] * cfg.L
            else:
                self.vtca_layers = [layer() for _ in range(cfg.L)]
        else:
            if cfg.wsl and cfg.L:
                shared_sa = SelfAttnLayer(d, cfg.heads, rng, dtype, cfg.ffn_mult)
                self.sa_layers = [shared_sa] * cfg.L
            else:
                self.sa_layers = [SelfAttnLayer(d, cfg.heads, rng, dtype, cfg.ffn_mult) for _ in range(cfg.L)]
        if cfg.kr:
            self.knowledge_proj = Linear(d_bank, d, rng, dtype)
        if cfg.ttca:
            self.text_token = uniform_param(rng, (1, 1, d), bound, dtype)
            if cfg.ws:
                self.ttca_layers = self.vtca_layers[: cfg.L - 1]
            elif cfg.wsl:
                shared_t = layer()
                self.ttca_layers = [shared_t] * (cfg.L - 1)
            else:
                self.ttca_layers = [layer() for _ in range(cfg.L - 1)]
        self.memory_norm = LayerNorm(d, dtype)
        self.dtype = dtype

    def layer_modules(self) -> list[Module]:
        mods: list[Module] = []
        for name in ("vtca_layers", "ttca_layers", "sa_layers"):
            mods.extend(getattr(self, name, []))
        return mods

    def layer_parameter_count(self) -> int:
        seen: set[int] = set()
        total = 0
        for mod in self.layer_modules():
            for _, p in mod.named_parameters():
                if id(p) not in seen:
                    seen.add(id(p))
                    total += p.data.size
        return total

    def _broadcast_token(self, token: Tensor, batch: int) -> Tensor:
        return ad.add(Tensor(np.zeros((batch, 1, self.cfg.d), dtype=self.dtype)), token)

    def vtca_layer(self, l: int, V_prev: Tensor, X: Tensor, key_mask=None):
        """One visual-token cross-attention layer; returns (V_l, head-averaged attention (B, M))."""
        V, w = self.vtca_layers[l](V_prev, X, key_mask)
        return V, w.data.mean(axis=1)[:, 0, :]

    def ttca_layer(self, l: int, T_prev: Tensor, R: Tensor, key_mask=None):
        T, w = self.ttca_layers[l](T_prev, R, key_mask)
        return T, w.data.mean(axis=1)[:, 0, :]

    def self_attention_baseline(self, X: Tensor, key_mask=None) -> Tensor:
        """L layers of self-attention over all patch tokens; the whole sequence is the decoder memory."""
        for layer in getattr(self, "sa_layers", []):
            X, _ = layer(X, key_mask)
        return X

    def encode(self, visual: Sequence[np.ndarray], retrieval: Sequence[np.ndarray] | None = None,
               bank: KnowledgeBank | None = None, rcfg: RetrievalConfig | None = None) -> EncoderOutput:
        cfg = self.cfg
        lengths = [len(v) for v in visual]
        if min(lengths) == 0:
            raise ValueError("case with zero patches")
        Xp, mask = pad_stack(visual, self.dtype)
        key_mask = mask if mask.any() else None
        B = len(visual)
        H = self.patch_proj(Tensor(Xp))
        if not cfg.vtca:
            H = self.self_attention_baseline(H, key_mask)
            return EncoderOutput(memory=self.memory_norm(H), memory_mask=key_mask, visual=None, textual=None,
                                 layer1_attention=[], retrieved=[None] * B)

        history = []
        V = self._broadcast_token(self.visual_token, B)
        V, a1 = self.vtca_layer(0, V, H, key_mask)
        history.append(a1)
        layer1 = [a1[i, :n].copy() for i, n in enumerate(lengths)]
        retrieved: list[RetrievedKnowledge | None] = [None] * B
        Rp = rmask = None
        if cfg.kr:
            if bank is None or retrieval is None:
                raise ValueError("knowledge retrieval enabled but no bank / retrieval embeddings given")
            rcfg = rcfg or RetrievalConfig()
            retrieved = [retrieve_all(retrieval[i], layer1[i], bank, rcfg) for i in range(B)]
            Rarr, rm = pad_stack([r.features for r in retrieved], self.dtype)
            rmask = rm if rm.any() else None
            Rp = self.knowledge_proj(Tensor(Rarr))
        n_vtca = 1
        for l in range(1, cfg.L):
            V, a = self.vtca_layer(l, V, H, key_mask)
            history.append(a)
            n_vtca += 1
        T = None
        n_ttca = 0
        parts = [V]
        if cfg.ttca:
            T = self._broadcast_token(self.text_token, B)
            for l in range(cfg.L - 1):
                T, _ = self.ttca_layer(l, T, Rp, rmask)
                n_ttca += 1
            parts.append(T)
        elif cfg.kr:
            counts = np.array([r.n_regions for r in retrieved], dtype=self.dtype)
            weights = (~rm).astype(self.dtype)[:, None, :] / counts[:, None, None]
            parts.append(ad.matmul(Tensor(weights), Rp))
        memory = parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)
        return EncoderOutput(memory=self.memory_norm(memory), memory_mask=None, visual=V, textual=T,
                             layer1_attention=layer1, attention_history=history, retrieved=retrieved,
                             n_vtca=n_vtca, n_ttca=n_ttca)
