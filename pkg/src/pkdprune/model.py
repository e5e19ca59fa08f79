"""Decoder-only transformer with structural gates and LoRA injection points.

Layout per layer: pre-RMSNorm causal multi-head attention, then a pre-RMSNorm
gated FFN ``W_D(silu(x W_G) * (x W_U))``.  Positions use a learned table.
Gates: ``z_head`` scales each head's attention output before the output
projection, ``z_int`` scales the FFN product before the down projection, and
the single shared ``z_hid`` scales the embedding output and every attention /
FFN module output before the residual add.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .arch import ModelConfig, maskable_param_count
from .autodiff import DTYPE, ShapeError, Tensor
from .l0 import MaskValues, binary_from_maskset, deterministic_masks, sample_masks
from .lightweight import LightweightModule
from .lora import LoraSet
from .lora import apply as lora_apply
from .lora import merge as lora_merge

__all__ = ["ModelConfig", "BaseWeights", "ForwardOutput", "init_base", "forward", "forward_params",
           "slice_pruned", "maskable_param_count"]

LAYER_KEYS = ("attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "wu", "wg", "wd")


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, V = cfg.d_model, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"tok_emb": (V, d), "pos_emb": (cfg.context_len, d)}
    for layer in range(cfg.n_layer):
        hd, di = cfg.heads(layer) * cfg.d_head, cfg.ints(layer)
        p = f"l{layer}."
        shapes.update({p + "attn_norm": (d,), p + "wq": (d, hd), p + "wk": (d, hd), p + "wv": (d, hd),
                       p + "wo": (hd, d), p + "ffn_norm": (d,), p + "wu": (d, di), p + "wg": (d, di),
                       p + "wd": (di, d)})
    shapes["final_norm"] = (d,)
    shapes["head"] = (d, V)
    return shapes


class BaseWeights:
    """Frozen dense parameters; arrays are made read-only on construction."""

    def __init__(self, cfg: ModelConfig, arrays: dict[str, np.ndarray]):
        shapes = param_shapes(cfg)
        if set(arrays) != set(shapes):
            missing, extra = set(shapes) - set(arrays), set(arrays) - set(shapes)
            raise ShapeError(f"BaseWeights: missing {sorted(missing)}, unexpected {sorted(extra)}")
        self.cfg = cfg
        self.arrays: dict[str, np.ndarray] = {}
        for name, shape in shapes.items():
            arr = np.array(arrays[name], dtype=DTYPE, copy=True)
            if arr.shape != shape:
                raise ShapeError(f"BaseWeights: {name} has shape {arr.shape}, expected {shape}")
            arr.flags.writeable = False
            self.arrays[name] = arr
        self._tensors = {k: Tensor(v) for k, v in self.arrays.items()}

    def tensors(self) -> dict[str, Tensor]:
        return self._tensors

    def num_params(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def checksum(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        for name in sorted(self.arrays):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.arrays[name]).tobytes())
        return h.hexdigest()


def init_base(cfg: ModelConfig, rng: np.random.Generator, std: float = 0.02) -> BaseWeights:
    arrays = {}
    resid_std = std / np.sqrt(2 * cfg.n_layer)
    for name, shape in param_shapes(cfg).items():
        if name.endswith("norm"):
            arrays[name] = np.ones(shape)
        elif name.endswith(("wo", "wd")):
            arrays[name] = rng.normal(0.0, resid_std, size=shape)
        else:
            arrays[name] = rng.normal(0.0, std, size=shape)
    return BaseWeights(cfg, arrays)


@dataclass
class ForwardOutput:
    logits: Tensor
    hidden_states: list[Tensor]
    masks: MaskValues | None = None


_causal_cache: dict[int, np.ndarray] = {}


def _causal(T: int) -> np.ndarray:
    m = _causal_cache.get(T)
    if m is None:
        m = np.triu(np.full((T, T), -np.inf), k=1)
        _causal_cache[T] = m
    return m


def forward_params(cfg: ModelConfig, P: dict[str, Tensor], tokens, z: MaskValues | None = None,
                   lora: LoraSet | None = None) -> ForwardOutput:
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    B, T = tokens.shape
    if T > cfg.context_len:
        raise ShapeError(f"forward: sequence length {T} exceeds context_len {cfg.context_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ShapeError(f"forward: token ids must lie in [0, {cfg.vocab_size})")

    dh, nd = cfg.d_head, cfg.rms_dim
    scale = lora.scale if lora is not None else 1.0

    def proj(layer, name, x):
        pair = lora.get(layer, name) if lora is not None else None
        return lora_apply(P[f"l{layer}.{name}"], pair, x, scale)

    x = ad.add(ad.embedding(P["tok_emb"], tokens), P["pos_emb"][:T])
    if z is not None:
        x = ad.mul(x, z.hid)
    mask = _causal(T)
    hiddens = []
    for layer in range(cfg.n_layer):
        p = f"l{layer}."
        H = cfg.heads(layer)
        if H > 0:
            xn = ad.rms_norm(x, P[p + "attn_norm"], nd)
            q = proj(layer, "wq", xn).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            k = proj(layer, "wk", xn).reshape(B, T, H, dh).transpose(0, 2, 3, 1)
            v = proj(layer, "wv", xn).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            scores = ad.add(ad.mul(ad.matmul(q, k), 1.0 / np.sqrt(dh)), mask)
            o = ad.matmul(ad.softmax(scores, axis=-1), v)
            if z is not None:
                o = ad.mul(o, z.head[layer].reshape(1, H, 1, 1))
            o = o.transpose(0, 2, 1, 3).reshape(B, T, H * dh)
            o = proj(layer, "wo", o)
            if z is not None:
                o = ad.mul(o, z.hid)
            x = ad.add(x, o)
        if cfg.ints(layer) > 0:
            xn = ad.rms_norm(x, P[p + "ffn_norm"], nd)
            a = ad.mul(ad.silu(proj(layer, "wg", xn)), proj(layer, "wu", xn))
            if z is not None:
                a = ad.mul(a, z.int[layer])
            f = proj(layer, "wd", a)
            if z is not None:
                f = ad.mul(f, z.hid)
            x = ad.add(x, f)
        hiddens.append(x)
    logits = ad.matmul(ad.rms_norm(x, P["final_norm"], nd), P["head"])
    return ForwardOutput(logits, hiddens, z)


def forward(base: BaseWeights, module: LightweightModule | None, tokens, mask_mode: str = "deterministic",
            rng: np.random.Generator | None = None) -> ForwardOutput:
    """Run the base model incorporated with ``module`` (or bare when ``module`` is None).

    ``mask_mode`` is ``"sampled"`` (hard-concrete noise from ``rng``) or
    ``"deterministic"``.
    """
    z = None
    lora = None
    if module is not None:
        if base.cfg.is_sliced:
            raise ShapeError("forward: lightweight modules apply to the dense base only")
        module.masks.check_shapes(base.cfg)
        _check_lora(module.lora, base)
        if mask_mode == "sampled":
            z = sample_masks(module.masks, rng)
        elif mask_mode == "deterministic":
            z = deterministic_masks(module.masks)
        else:
            raise ValueError(f"unknown mask_mode {mask_mode!r}")
        lora = module.lora
    return forward_params(base.cfg, base.tensors(), tokens, z, lora)


def _check_lora(lora: LoraSet, base: BaseWeights) -> None:
    for (layer, name), pair in lora.pairs.items():
        w = base.arrays.get(f"l{layer}.{name}")
        if w is None or pair.a.shape[0] != w.shape[0] or pair.b.shape[1] != w.shape[1]:
            raise ShapeError(f"LoRA pair ({layer}, {name}) does not fit the base weights")


def slice_pruned(base: BaseWeights, module: LightweightModule) -> tuple[BaseWeights, ModelConfig]:
    """Physically remove gated-off structure and merge LoRA into the survivors.

    Requires binary masks.  A layer with every head removed keeps only its
    FFN; removing every hidden channel is rejected.
    """
    cfg = base.cfg
    module.masks.check_shapes(cfg)
    bm = binary_from_maskset(module.masks)
    hid = np.flatnonzero(bm.hid)
    if hid.size == 0:
        raise ValueError("slice_pruned: all hidden channels pruned")
    A = base.arrays
    lora = module.lora
    out: dict[str, np.ndarray] = {
        "tok_emb": A["tok_emb"][:, hid],
        "pos_emb": A["pos_emb"][:, hid],
        "final_norm": A["final_norm"][hid],
        "head": A["head"][hid, :],
    }
    head_counts, int_dims = [], []
    for layer in range(cfg.n_layer):
        p = f"l{layer}."

        def merged(name):
            return lora_merge(A[p + name], lora.get(layer, name), lora.scale)

        heads = np.flatnonzero(bm.head[layer])
        cols = (heads[:, None] * cfg.d_head + np.arange(cfg.d_head)[None, :]).reshape(-1)
        ints = np.flatnonzero(bm.int[layer])
        out[p + "attn_norm"] = A[p + "attn_norm"][hid]
        out[p + "ffn_norm"] = A[p + "ffn_norm"][hid]
        for name in ("wq", "wk", "wv"):
            out[p + name] = merged(name)[np.ix_(hid, cols)]
        out[p + "wo"] = merged("wo")[np.ix_(cols, hid)]
        out[p + "wu"] = merged("wu")[np.ix_(hid, ints)]
        out[p + "wg"] = merged("wg")[np.ix_(hid, ints)]
        out[p + "wd"] = merged("wd")[np.ix_(ints, hid)]
        head_counts.append(int(heads.size))
        int_dims.append(int(ints.size))
    small = replace(cfg, d_model=int(hid.size), head_counts=tuple(head_counts), int_dims=tuple(int_dims),
                    norm_dim=cfg.rms_dim)
    return BaseWeights(small, out), small
