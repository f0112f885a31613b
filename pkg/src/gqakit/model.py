"""Toy pre-norm transformer classifier with grouping-aware attention.

The model is deliberately small: token + learned positional embeddings,
pre-norm blocks (bidirectional attention, ReLU MLP), a final layer norm,
mean pooling, and a linear classifier. Attention stores one key and one
value projection per *group*; a multi-head checkpoint is the special
case of one group per head. Forward, manual backward, and activation
capture all live here, in float64 throughout.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from gqakit.errors import CheckpointError, ConfigError, InputError
from gqakit.grouping import HeadGrouping
from gqakit.numerics import Rng

FORMAT_VERSION = 1
LN_EPS = 1e-5


@dataclass
class ModelConfig:
    n_layers: int
    n_heads: int
    head_dim: int
    d_model: int
    mlp_hidden: int
    vocab_size: int
    max_seq_len: int
    n_classes: int

    def validate(self) -> None:
        for name in ("n_layers", "n_heads", "head_dim", "d_model", "mlp_hidden",
                     "vocab_size", "max_seq_len", "n_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model != self.n_heads * self.head_dim:
            raise ConfigError(
                f"d_model ({self.d_model}) must equal n_heads * head_dim "
                f"({self.n_heads} * {self.head_dim})")

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "head_dim": self.head_dim,
            "d_model": self.d_model,
            "mlp_hidden": self.mlp_hidden,
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
            "n_classes": self.n_classes,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        cfg = ModelConfig(**{k: int(d[k]) for k in (
            "n_layers", "n_heads", "head_dim", "d_model", "mlp_hidden",
            "vocab_size", "max_seq_len", "n_classes")})
        cfg.validate()
        return cfg


@dataclass
class AttentionLayerWeights:
    """Per-layer attention projections.

    w_q is always per-head (n_heads, d_model, head_dim). w_k and w_v hold
    one tensor per key/value group; for an ungrouped layer that is one
    per head. No projection biases.
    """

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray


@dataclass
class LayerWeights:
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    attn: AttentionLayerWeights
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class Checkpoint:
    config: ModelConfig
    token_embedding: np.ndarray
    position_embedding: np.ndarray
    layers: list[LayerWeights]
    final_gamma: np.ndarray
    final_beta: np.ndarray
    classifier_w: np.ndarray
    classifier_b: np.ndarray
    # One (key_grouping, value_grouping) pair per layer; None for a pure
    # multi-head checkpoint.
    kv_grouping: Optional[list[tuple[HeadGrouping, HeadGrouping]]] = None
    format_version: int = FORMAT_VERSION

    def layer_maps(self, layer_index: int) -> tuple[np.ndarray, np.ndarray]:
        """Head -> key-group and head -> value-group index maps."""
        h = self.config.n_heads
        if self.kv_grouping is None:
            ident = np.arange(h, dtype=np.int64)
            return ident, ident
        kg, vg = self.kv_grouping[layer_index]
        return kg.head_to_group(), vg.head_to_group()


@dataclass
class ActivationCapture:
    """Per-head key/value projection outputs on a calibration batch,
    flattened over batch and sequence positions.

    provenance records the (key, value) group counts of every earlier
    layer at capture time, so tests can assert the sequential protocol:
    layers below the captured one were already merged.
    """

    layer_index: int
    k_act: list[np.ndarray]  # n_heads arrays of shape (n_tokens, head_dim)
    v_act: list[np.ndarray]
    provenance: tuple[tuple[int, int], ...] = ()


class MacCounter:
    """Counts multiply-accumulates actually executed in attention."""

    SITES = ("q_proj", "k_proj", "v_proj", "o_proj", "scores", "weighted")

    def __init__(self):
        self.by_site = {s: 0 for s in self.SITES}

    def add(self, site: str, macs: int) -> None:
        self.by_site[site] += int(macs)

    @property
    def total(self) -> int:
        return sum(self.by_site.values())


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def init_model(config: ModelConfig, seed: int) -> Checkpoint:
    """Fresh multi-head checkpoint, uniform(-1/sqrt(d_model), +1/sqrt(d_model))
    weights, deterministic per seed."""
    config.validate()
    rng = Rng(seed)
    bound = 1.0 / np.sqrt(config.d_model)
    d, h, dh = config.d_model, config.n_heads, config.head_dim

    def w(shape):
        return rng.uniform_array(shape, -bound, bound)

    token_embedding = w((config.vocab_size, d))
    position_embedding = w((config.max_seq_len, d))
    layers = []
    for _ in range(config.n_layers):
        layers.append(LayerWeights(
            ln1_gamma=np.ones(d), ln1_beta=np.zeros(d),
            attn=AttentionLayerWeights(
                w_q=w((h, d, dh)), w_k=w((h, d, dh)),
                w_v=w((h, d, dh)), w_o=w((d, d))),
            ln2_gamma=np.ones(d), ln2_beta=np.zeros(d),
            w1=w((d, config.mlp_hidden)), b1=np.zeros(config.mlp_hidden),
            w2=w((config.mlp_hidden, d)), b2=np.zeros(d),
        ))
    return Checkpoint(
        config=config,
        token_embedding=token_embedding,
        position_embedding=position_embedding,
        layers=layers,
        final_gamma=np.ones(d), final_beta=np.zeros(d),
        classifier_w=w((d, config.n_classes)),
        classifier_b=np.zeros(config.n_classes),
        kv_grouping=None,
    )


def copy_checkpoint(ckpt: Checkpoint) -> Checkpoint:
    return copy.deepcopy(ckpt)


# ---------------------------------------------------------------------------
# Layer norm
# ---------------------------------------------------------------------------


def _layernorm_fwd(x, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv_std
    return gamma * xhat + beta, (xhat, inv_std, gamma)


def _layernorm_bwd(dy, cache):
    xhat, inv_std, gamma = cache
    dgamma = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    dbeta = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * gamma
    dx = inv_std * (dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------


def _check_batch(config: ModelConfig, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch)
    if batch.ndim != 2 or batch.size == 0:
        raise InputError(f"batch must be a non-empty (batch, seq) matrix, got {batch.shape}")
    if not np.issubdtype(batch.dtype, np.integer):
        raise InputError("batch must contain integer token ids")
    if batch.shape[1] > config.max_seq_len:
        raise InputError(
            f"sequence length {batch.shape[1]} exceeds max_seq_len {config.max_seq_len}")
    if batch.min() < 0 or batch.max() >= config.vocab_size:
        raise InputError("token id out of range")
    return batch.astype(np.int64)


def _project_heads(x_flat: np.ndarray, w: np.ndarray, b_sz: int, t: int) -> np.ndarray:
    """(B*T, d) x (n, d, dh) -> (B, n, T, dh) for stacked projections."""
    n, d, dh = w.shape
    out = x_flat @ w.transpose(1, 0, 2).reshape(d, n * dh)
    return out.reshape(b_sz, t, n, dh).transpose(0, 2, 1, 3)


def forward(ckpt: Checkpoint, batch: np.ndarray,
            macs: Optional[MacCounter] = None,
            n_layers_limit: Optional[int] = None) -> tuple[np.ndarray, dict]:
    """Run the model on a token batch.

    Returns (logits, cache); the cache holds every intermediate the
    backward pass and activation capture need. `n_layers_limit` stops
    after that many blocks (logits are then None) -- used by activation
    capture to avoid computing layers that cannot influence the result.
    """
    cfg = ckpt.config
    batch = _check_batch(cfg, batch)
    b_sz, t = batch.shape
    d, h, dh = cfg.d_model, cfg.n_heads, cfg.head_dim
    scale = 1.0 / np.sqrt(dh)
    n_layers = cfg.n_layers if n_layers_limit is None else min(n_layers_limit, cfg.n_layers)

    x = ckpt.token_embedding[batch] + ckpt.position_embedding[:t]
    cache = {"batch": batch, "x0": x, "layers": []}

    for li in range(n_layers):
        lw = ckpt.layers[li]
        kmap, vmap = ckpt.layer_maps(li)
        xn1, ln1_cache = _layernorm_fwd(x, lw.ln1_gamma, lw.ln1_beta)
        xf = xn1.reshape(b_sz * t, d)

        q = _project_heads(xf, lw.attn.w_q, b_sz, t)              # (B, H, T, dh)
        k_groups = _project_heads(xf, lw.attn.w_k, b_sz, t)       # (B, Gk, T, dh)
        v_groups = _project_heads(xf, lw.attn.w_v, b_sz, t)       # (B, Gv, T, dh)
        k = k_groups[:, kmap]                                     # (B, H, T, dh)
        v = v_groups[:, vmap]

        scores = np.matmul(q, k.transpose(0, 1, 3, 2)) * scale    # (B, H, T, T)
        scores -= scores.max(axis=-1, keepdims=True)
        p = np.exp(scores)
        p /= p.sum(axis=-1, keepdims=True)
        ctx = np.matmul(p, v)                                     # (B, H, T, dh)
        concat = ctx.transpose(0, 2, 1, 3).reshape(b_sz, t, d)
        attn_out = concat @ lw.attn.w_o

        if macs is not None:
            macs.add("q_proj", b_sz * t * d * h * dh)
            macs.add("k_proj", b_sz * t * d * lw.attn.w_k.shape[0] * dh)
            macs.add("v_proj", b_sz * t * d * lw.attn.w_v.shape[0] * dh)
            macs.add("o_proj", b_sz * t * d * d)
            macs.add("scores", b_sz * h * t * t * dh)
            macs.add("weighted", b_sz * h * t * t * dh)

        res1 = x + attn_out
        xn2, ln2_cache = _layernorm_fwd(res1, lw.ln2_gamma, lw.ln2_beta)
        pre = xn2 @ lw.w1 + lw.b1
        act = np.maximum(pre, 0.0)
        x = res1 + act @ lw.w2 + lw.b2

        cache["layers"].append({
            "xn1": xn1, "ln1": ln1_cache, "q": q, "k": k, "v": v, "p": p,
            "concat": concat, "res1": res1, "xn2": xn2, "ln2": ln2_cache,
            "pre": pre, "act": act, "kmap": kmap, "vmap": vmap,
        })

    if n_layers < cfg.n_layers:
        return None, cache

    y, lnf_cache = _layernorm_fwd(x, ckpt.final_gamma, ckpt.final_beta)
    pooled = y.mean(axis=1)
    logits = pooled @ ckpt.classifier_w + ckpt.classifier_b
    cache.update({"x_final": x, "lnf": lnf_cache, "pooled": pooled})
    return logits, cache


# ---------------------------------------------------------------------------
# Loss and backward
# ---------------------------------------------------------------------------


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    n = logits.shape[0]
    loss = -float(logp[np.arange(n), labels].mean())
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, dlogits


def backward(ckpt: Checkpoint, batch: np.ndarray,
             labels: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy loss and gradients for every weight tensor.

    Gradients are keyed by the same names `named_tensors` uses. For a
    grouped layer, the gradient of a shared key/value tensor accumulates
    the contributions of every head in its group.
    """
    cfg = ckpt.config
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise InputError(f"labels must be 1-D, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= cfg.n_classes:
        raise InputError("label out of range")

    logits, cache = forward(ckpt, batch)
    batch = cache["batch"]
    b_sz, t = batch.shape
    d, h, dh = cfg.d_model, cfg.n_heads, cfg.head_dim
    scale = 1.0 / np.sqrt(dh)
    grads: dict[str, np.ndarray] = {}

    loss, dlogits = softmax_cross_entropy(logits, labels)
    grads["classifier.weight"] = cache["pooled"].T @ dlogits
    grads["classifier.bias"] = dlogits.sum(axis=0)
    dpooled = dlogits @ ckpt.classifier_w.T
    dy = np.repeat(dpooled[:, None, :], t, axis=1) / t
    dx, dgf, dbf = _layernorm_bwd(dy, cache["lnf"])
    grads["final_norm.gamma"] = dgf
    grads["final_norm.beta"] = dbf

    for li in reversed(range(cfg.n_layers)):
        lw = ckpt.layers[li]
        lc = cache["layers"][li]
        pfx = f"layers.{li}."

        # MLP: x_out = res1 + relu(xn2 @ w1 + b1) @ w2 + b2
        dmlp = dx
        act_flat = lc["act"].reshape(b_sz * t, -1)
        dmlp_flat = dmlp.reshape(b_sz * t, d)
        grads[pfx + "mlp.w2"] = act_flat.T @ dmlp_flat
        grads[pfx + "mlp.b2"] = dmlp_flat.sum(axis=0)
        dact = dmlp @ lw.w2.T
        dpre = dact * (lc["pre"] > 0.0)
        xn2_flat = lc["xn2"].reshape(b_sz * t, d)
        dpre_flat = dpre.reshape(b_sz * t, -1)
        grads[pfx + "mlp.w1"] = xn2_flat.T @ dpre_flat
        grads[pfx + "mlp.b1"] = dpre_flat.sum(axis=0)
        dxn2 = dpre @ lw.w1.T
        dres1_ln, dg2, db2 = _layernorm_bwd(dxn2, lc["ln2"])
        grads[pfx + "ln2.gamma"] = dg2
        grads[pfx + "ln2.beta"] = db2
        dres1 = dx + dres1_ln

        # attention: res1 = x_in + (concat @ w_o)
        dattn_out = dres1
        dattn_flat = dattn_out.reshape(b_sz * t, d)
        concat_flat = lc["concat"].reshape(b_sz * t, d)
        grads[pfx + "attn.w_o"] = concat_flat.T @ dattn_flat
        dconcat = dattn_out @ lw.attn.w_o.T
        dctx = dconcat.reshape(b_sz, t, h, dh).transpose(0, 2, 1, 3)

        p, q, k, v = lc["p"], lc["q"], lc["k"], lc["v"]
        dp = np.matmul(dctx, v.transpose(0, 1, 3, 2))
        dv_eff = np.matmul(p.transpose(0, 1, 3, 2), dctx)
        dscores = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        dq = np.matmul(dscores, k) * scale
        dk_eff = np.matmul(dscores.transpose(0, 1, 3, 2), q) * scale

        xn1_flat = lc["xn1"].reshape(b_sz * t, d)
        dxn1_flat = np.zeros_like(xn1_flat)

        def proj_grads(d_out, w):
            # d_out (B, n, T, dh) against stacked (n, d, dh) projections
            n = d_out.shape[1]
            d_out_flat = d_out.transpose(0, 2, 1, 3).reshape(b_sz * t, n * dh)
            w_flat = w.transpose(1, 0, 2).reshape(d, n * dh)
            dw = (xn1_flat.T @ d_out_flat).reshape(d, n, dh).transpose(1, 0, 2)
            dx_part = d_out_flat @ w_flat.T
            return dw, dx_part

        w_k_eff = lw.attn.w_k[lc["kmap"]]
        w_v_eff = lw.attn.w_v[lc["vmap"]]
        dwq, dxq = proj_grads(dq, lw.attn.w_q)
        dwk_eff, dxk = proj_grads(dk_eff, w_k_eff)
        dwv_eff, dxv = proj_grads(dv_eff, w_v_eff)
        dxn1_flat += dxq + dxk + dxv

        grads[pfx + "attn.w_q"] = dwq
        dwk = np.zeros_like(lw.attn.w_k)
        np.add.at(dwk, lc["kmap"], dwk_eff)
        grads[pfx + "attn.w_k"] = dwk
        dwv = np.zeros_like(lw.attn.w_v)
        np.add.at(dwv, lc["vmap"], dwv_eff)
        grads[pfx + "attn.w_v"] = dwv

        dxn1 = dxn1_flat.reshape(b_sz, t, d)
        dx_ln, dg1, db1 = _layernorm_bwd(dxn1, lc["ln1"])
        grads[pfx + "ln1.gamma"] = dg1
        grads[pfx + "ln1.beta"] = db1
        dx = dres1 + dx_ln

    grads["token_embedding"] = np.zeros_like(ckpt.token_embedding)
    np.add.at(grads["token_embedding"], batch, dx)
    grads["position_embedding"] = np.zeros_like(ckpt.position_embedding)
    grads["position_embedding"][:t] = dx.sum(axis=0)

    return loss, grads


# ---------------------------------------------------------------------------
# Activation capture
# ---------------------------------------------------------------------------


def capture_activations(ckpt: Checkpoint, calibration_batch: np.ndarray,
                        layer_index: int) -> ActivationCapture:
    """Per-head key/value projection outputs at one layer.

    Earlier layers run with the checkpoint's current groupings already in
    effect (the sequential conversion protocol); the captured layer uses
    its own per-head (or per-group, if already merged) projections.
    """
    cfg = ckpt.config
    if not (0 <= layer_index < cfg.n_layers):
        raise InputError(f"layer_index {layer_index} out of range")
    _, cache = forward(ckpt, calibration_batch, n_layers_limit=layer_index + 1)
    lc = cache["layers"][layer_index]
    h = cfg.n_heads
    b_sz, t = cache["batch"].shape
    k_act = [np.ascontiguousarray(lc["k"][:, i].reshape(b_sz * t, cfg.head_dim))
             for i in range(h)]
    v_act = [np.ascontiguousarray(lc["v"][:, i].reshape(b_sz * t, cfg.head_dim))
             for i in range(h)]
    if ckpt.kv_grouping is None:
        provenance = tuple((h, h) for _ in range(layer_index))
    else:
        provenance = tuple((kg.n_groups, vg.n_groups)
                           for kg, vg in ckpt.kv_grouping[:layer_index])
    return ActivationCapture(layer_index=layer_index, k_act=k_act, v_act=v_act,
                             provenance=provenance)


# ---------------------------------------------------------------------------
# Tensor naming and serialization
# ---------------------------------------------------------------------------


def named_tensors(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    """All weight tensors in canonical order. The arrays are the live
    checkpoint buffers, not copies."""
    out = [("token_embedding", ckpt.token_embedding),
           ("position_embedding", ckpt.position_embedding)]
    for i, lw in enumerate(ckpt.layers):
        pfx = f"layers.{i}."
        out += [
            (pfx + "ln1.gamma", lw.ln1_gamma), (pfx + "ln1.beta", lw.ln1_beta),
            (pfx + "attn.w_q", lw.attn.w_q), (pfx + "attn.w_k", lw.attn.w_k),
            (pfx + "attn.w_v", lw.attn.w_v), (pfx + "attn.w_o", lw.attn.w_o),
            (pfx + "ln2.gamma", lw.ln2_gamma), (pfx + "ln2.beta", lw.ln2_beta),
            (pfx + "mlp.w1", lw.w1), (pfx + "mlp.b1", lw.b1),
            (pfx + "mlp.w2", lw.w2), (pfx + "mlp.b2", lw.b2),
        ]
    out += [("final_norm.gamma", ckpt.final_gamma),
            ("final_norm.beta", ckpt.final_beta),
            ("classifier.weight", ckpt.classifier_w),
            ("classifier.bias", ckpt.classifier_b)]
    return out


def tensor_dict(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    return dict(named_tensors(ckpt))


def checkpoint_to_dict(ckpt: Checkpoint) -> dict:
    kv = None
    if ckpt.kv_grouping is not None:
        kv = [[kg.to_lists(), vg.to_lists()] for kg, vg in ckpt.kv_grouping]
    return {
        "format_version": ckpt.format_version,
        "config": ckpt.config.to_dict(),
        "kv_grouping": kv,
        "tensors": {name: arr.ravel().tolist() for name, arr in named_tensors(ckpt)},
    }


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    with open(path, "w") as f:
        json.dump(checkpoint_to_dict(ckpt), f, sort_keys=True)


def _expected_shapes(config: ModelConfig, n_key_groups: list[int],
                     n_value_groups: list[int]) -> dict[str, tuple]:
    d, h, dh = config.d_model, config.n_heads, config.head_dim
    shapes = {
        "token_embedding": (config.vocab_size, d),
        "position_embedding": (config.max_seq_len, d),
        "final_norm.gamma": (d,), "final_norm.beta": (d,),
        "classifier.weight": (d, config.n_classes),
        "classifier.bias": (config.n_classes,),
    }
    for i in range(config.n_layers):
        pfx = f"layers.{i}."
        shapes.update({
            pfx + "ln1.gamma": (d,), pfx + "ln1.beta": (d,),
            pfx + "attn.w_q": (h, d, dh),
            pfx + "attn.w_k": (n_key_groups[i], d, dh),
            pfx + "attn.w_v": (n_value_groups[i], d, dh),
            pfx + "attn.w_o": (d, d),
            pfx + "ln2.gamma": (d,), pfx + "ln2.beta": (d,),
            pfx + "mlp.w1": (d, config.mlp_hidden),
            pfx + "mlp.b1": (config.mlp_hidden,),
            pfx + "mlp.w2": (config.mlp_hidden, d),
            pfx + "mlp.b2": (d,),
        })
    return shapes


def checkpoint_from_dict(doc: dict) -> Checkpoint:
    if doc.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format_version {doc.get('format_version')!r}")
    config = ModelConfig.from_dict(doc["config"])
    h = config.n_heads

    kv_grouping = None
    if doc.get("kv_grouping") is not None:
        raw = doc["kv_grouping"]
        if len(raw) != config.n_layers:
            raise CheckpointError("kv_grouping must have one entry per layer")
        kv_grouping = [(HeadGrouping.from_groups(pair[0], h),
                        HeadGrouping.from_groups(pair[1], h)) for pair in raw]

    if kv_grouping is None:
        nk = [h] * config.n_layers
        nv = [h] * config.n_layers
    else:
        nk = [kg.n_groups for kg, _ in kv_grouping]
        nv = [vg.n_groups for _, vg in kv_grouping]
    shapes = _expected_shapes(config, nk, nv)

    tensors = {}
    for name, shape in shapes.items():
        if name not in doc["tensors"]:
            raise CheckpointError(f"missing tensor {name!r}")
        arr = np.asarray(doc["tensors"][name], dtype=np.float64)
        expect = int(np.prod(shape))
        if arr.size != expect:
            raise CheckpointError(
                f"tensor {name!r} has {arr.size} entries, expected {expect}")
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"tensor {name!r} contains non-finite entries")
        tensors[name] = arr.reshape(shape)

    layers = []
    for i in range(config.n_layers):
        pfx = f"layers.{i}."
        layers.append(LayerWeights(
            ln1_gamma=tensors[pfx + "ln1.gamma"], ln1_beta=tensors[pfx + "ln1.beta"],
            attn=AttentionLayerWeights(
                w_q=tensors[pfx + "attn.w_q"], w_k=tensors[pfx + "attn.w_k"],
                w_v=tensors[pfx + "attn.w_v"], w_o=tensors[pfx + "attn.w_o"]),
            ln2_gamma=tensors[pfx + "ln2.gamma"], ln2_beta=tensors[pfx + "ln2.beta"],
            w1=tensors[pfx + "mlp.w1"], b1=tensors[pfx + "mlp.b1"],
            w2=tensors[pfx + "mlp.w2"], b2=tensors[pfx + "mlp.b2"],
        ))
    return Checkpoint(
        config=config,
        token_embedding=tensors["token_embedding"],
        position_embedding=tensors["position_embedding"],
        layers=layers,
        final_gamma=tensors["final_norm.gamma"], final_beta=tensors["final_norm.beta"],
        classifier_w=tensors["classifier.weight"], classifier_b=tensors["classifier.bias"],
        kv_grouping=kv_grouping,
    )


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path) as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    return checkpoint_from_dict(doc)
