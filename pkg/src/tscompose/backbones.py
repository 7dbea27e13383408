"""Network architecture stage: MLP, GRU and Transformer-encoder backbones.

The Transformer hosts interchangeable attention mechanisms on two axes:
"series attention" mixes tokens along the sequence, "feature attention"
mixes channels at a fixed token index.  Both axes share one dispatcher.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .layers import LayerNorm, Linear, uniform_init
from .tensor import (
    Tensor,
    concat,
    parameter,
    rfft,
    irfft,
    stack,
    take_along_axis,
)

N_HEADS = 4
SPARSE_FACTOR = 5          # top-u query budget: u = ceil(5 ln n)
DEFAULT_FREQ_MODES = 16

SERIES_ATTENTION_CHOICES = (
    "Null", "SelfAttn", "AutoCorr", "SparseAttn", "FrequencyAttn", "DestationaryAttn",
)
FEATURE_ATTENTION_CHOICES = ("Null", "SelfAttn", "SparseAttn", "FrequencyAttn")
NETWORK_TYPES = ("MLP", "RNN", "Transformer")


@dataclass
class AttentionOutput:
    """Mixed values plus whatever weight structure the variant materializes.

    `weights` is the dense [B, H, n, n] softmax map for SelfAttn and
    DestationaryAttn; for SparseAttn only the selected query rows
    [B, H, u, n] (with `selected` giving their indices); for AutoCorr the
    per-delay weights [B, H, k] (`selected` = delays); None for FrequencyAttn.
    """

    values: Tensor
    weights: Tensor | None = None
    selected: np.ndarray | None = None


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).swapaxes(1, 2)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return x.swapaxes(1, 2).reshape(b, n, h * dh)


def _scaled_logits(q: Tensor, k: Tensor) -> Tensor:
    return (q @ k.swapaxes(-1, -2)) / math.sqrt(q.shape[-1])


def _self_attention(q: Tensor, k: Tensor, v: Tensor) -> AttentionOutput:
    weights = _scaled_logits(q, k).softmax(axis=-1)
    return AttentionOutput(values=_merge_heads(weights @ v), weights=weights)


def sparse_query_budget(n_tokens: int) -> int:
    return max(1, math.ceil(SPARSE_FACTOR * math.log(n_tokens)))


def _sparse_attention(q: Tensor, k: Tensor, v: Tensor) -> AttentionOutput:
    b, h, n, dh = q.shape
    u = sparse_query_budget(n)
    if u >= n:
        return _self_attention(q, k, v)

    logits = _scaled_logits(q, k)
    # sparsity score per query: peakedness of its attention row
    score = logits.data.max(axis=-1) - logits.data.mean(axis=-1)   # [B,H,n]
    order = np.argsort(-score, axis=-1, kind="stable")
    sel = np.sort(order[..., :u], axis=-1)                         # [B,H,u]

    sel_rows = np.broadcast_to(sel[..., None], (b, h, u, n))
    sel_logits = take_along_axis(logits, sel_rows, axis=2)
    sel_weights = sel_logits.softmax(axis=-1)
    sel_out = sel_weights @ v                                      # [B,H,u,dh]

    # inactive queries fall back to the average value vector
    scatter = np.zeros((b, h, n, u))
    bi, hi, ui = np.indices((b, h, u))
    scatter[bi, hi, sel, ui] = 1.0
    mask = scatter.sum(axis=-1, keepdims=True)                     # [B,H,n,1]
    fallback = v.mean(axis=2, keepdims=True) * Tensor(1.0 - mask)
    values = Tensor(scatter) @ sel_out + fallback
    return AttentionOutput(values=_merge_heads(values), weights=sel_weights, selected=sel)


def fft_correlation(q: Tensor, k: Tensor, axis: int = 2) -> Tensor:
    """Circular cross-correlation along `axis`: out[τ] = Σ_t q[t+τ mod n]·k[t]."""
    qr, qi = rfft(q, axis=axis)
    kr, ki = rfft(k, axis=axis)
    re = qr * kr + qi * ki
    im = qi * kr - qr * ki
    return irfft(re, im, q.shape[axis], axis=axis)


def autocorr_delay_count(n_tokens: int) -> int:
    return max(1, math.ceil(math.log(n_tokens)))


def _autocorrelation(q: Tensor, k: Tensor, v: Tensor) -> AttentionOutput:
    b, h, n, dh = q.shape
    corr = fft_correlation(q, k, axis=2).mean(axis=-1)             # [B,H,n]
    top = autocorr_delay_count(n)
    delays = np.argsort(-corr.data, axis=-1, kind="stable")[..., :top]  # [B,H,top]

    sel_corr = take_along_axis(corr, delays, axis=2)
    weights = sel_corr.softmax(axis=-1)                            # [B,H,top]

    values = None
    token_range = np.arange(n)
    for j in range(top):
        roll_idx = (token_range[None, None, :] + delays[..., j : j + 1]) % n
        gather = np.broadcast_to(roll_idx[..., None], (b, h, n, dh))
        rolled = take_along_axis(v, gather, axis=2)
        w_j = weights.narrow(2, j, 1).reshape(b, h, 1, 1)
        term = rolled * w_j
        values = term if values is None else values + term
    return AttentionOutput(values=_merge_heads(values), weights=weights, selected=delays)


def _frequency_attention(v: Tensor, kernel_re: Tensor, kernel_im: Tensor) -> AttentionOutput:
    b, h, n, dh = v.shape
    modes = kernel_re.shape[1]
    available = n // 2 + 1
    take = min(modes, available)

    re, im = rfft(v, axis=2)
    re_m = re.narrow(2, 0, take)
    im_m = im.narrow(2, 0, take)
    kr = kernel_re.narrow(1, 0, take)
    ki = kernel_im.narrow(1, 0, take)
    out_re = re_m * kr - im_m * ki
    out_im = re_m * ki + im_m * kr
    out_re = out_re.pad_axis(2, 0, available - take)
    out_im = out_im.pad_axis(2, 0, available - take)
    values = irfft(out_re, out_im, n, axis=2)
    return AttentionOutput(values=_merge_heads(values))


def _destationary_attention(q: Tensor, k: Tensor, v: Tensor,
                            tau: Tensor, delta: Tensor) -> AttentionOutput:
    b, h, n, dh = q.shape
    raw = q @ k.swapaxes(-1, -2)
    logits = (raw * tau.reshape(b, 1, 1, 1) + delta.reshape(b, 1, 1, n)) / math.sqrt(dh)
    weights = logits.softmax(axis=-1)
    return AttentionOutput(values=_merge_heads(weights @ v), weights=weights)


def attention(q: Tensor, k: Tensor, v: Tensor, variant: str,
              aux: dict | None = None) -> AttentionOutput:
    """One dispatcher, five behaviors; q,k,v arrive split per head [B,H,n,d_h]."""
    aux = aux or {}
    if variant == "SelfAttn":
        return _self_attention(q, k, v)
    if variant == "SparseAttn":
        return _sparse_attention(q, k, v)
    if variant == "AutoCorr":
        return _autocorrelation(q, k, v)
    if variant == "FrequencyAttn":
        return _frequency_attention(v, aux["kernel_re"], aux["kernel_im"])
    if variant == "DestationaryAttn":
        return _destationary_attention(q, k, v, aux["tau"], aux["delta"])
    raise ValueError(f"unknown attention variant {variant!r}")


class MultiHeadAttention:
    """Projection wrapper around the dispatcher for one attention axis."""

    def __init__(self, d_model: int, variant: str, rng: np.random.Generator,
                 n_tokens: int | None = None, stat_dim: int | None = None,
                 n_modes: int | None = None, heads: int = N_HEADS, name: str = "attn"):
        if d_model % heads:
            raise ValueError(f"d_model {d_model} not divisible by {heads} heads")
        self.variant = variant
        self.heads = heads
        self.name = name
        self.q_proj = Linear(d_model, d_model, rng, name=f"{name}.q")
        self.k_proj = Linear(d_model, d_model, rng, name=f"{name}.k")
        self.v_proj = Linear(d_model, d_model, rng, name=f"{name}.v")
        self.out_proj = Linear(d_model, d_model, rng, name=f"{name}.out")
        self.kernel_re = self.kernel_im = None
        self.tau_net = self.delta_net = None

        if variant == "FrequencyAttn":
            if n_modes is None:
                if n_tokens is None:
                    raise ValueError("FrequencyAttn needs n_tokens or n_modes")
                n_modes = min(DEFAULT_FREQ_MODES, max(1, n_tokens // 2))
            dh = d_model // heads
            self.kernel_re = parameter(np.ones((heads, n_modes, dh)))
            self.kernel_im = parameter(np.zeros((heads, n_modes, dh)))
        elif variant == "DestationaryAttn":
            if n_tokens is None or stat_dim is None:
                raise ValueError("DestationaryAttn needs n_tokens and stat_dim")
            self.tau_net = (Linear(stat_dim, d_model, rng, name=f"{name}.tau1"),
                            Linear(d_model, 1, rng, name=f"{name}.tau2"))
            self.delta_net = (Linear(stat_dim, d_model, rng, name=f"{name}.delta1"),
                              Linear(d_model, n_tokens, rng, name=f"{name}.delta2"))

    def _aux(self, x: Tensor, stats: Tensor | None) -> dict:
        if self.variant == "FrequencyAttn":
            return {"kernel_re": self.kernel_re, "kernel_im": self.kernel_im}
        if self.variant == "DestationaryAttn":
            if stats is None:
                raise ValueError("DestationaryAttn requires normalization statistics")
            t1, t2 = self.tau_net
            d1, d2 = self.delta_net
            tau = t2(t1(stats).gelu()).exp()
            delta = d2(d1(stats).gelu())
            return {"tau": tau, "delta": delta}
        return {}

    def __call__(self, x: Tensor, stats: Tensor | None = None) -> Tensor:
        q = _split_heads(self.q_proj(x), self.heads)
        k = _split_heads(self.k_proj(x), self.heads)
        v = _split_heads(self.v_proj(x), self.heads)
        out = attention(q, k, v, self.variant, self._aux(x, stats))
        return self.out_proj(out.values)

    def params(self) -> list[tuple[str, Tensor]]:
        out = []
        for lin in (self.q_proj, self.k_proj, self.v_proj, self.out_proj):
            out.extend(lin.params())
        if self.kernel_re is not None:
            out += [(f"{self.name}.kernel_re", self.kernel_re),
                    (f"{self.name}.kernel_im", self.kernel_im)]
        if self.tau_net is not None:
            for lin in (*self.tau_net, *self.delta_net):
                out.extend(lin.params())
        return out


class _FeedForward:
    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator, name: str):
        self.up = Linear(d_model, d_ff, rng, name=f"{name}.up")
        self.down = Linear(d_ff, d_model, rng, name=f"{name}.down")

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(self.up(x).gelu())

    def params(self):
        return self.up.params() + self.down.params()


class MLPBackbone:
    """Per-block: token-mixing linear over the sequence axis, then a
    position-wise feed-forward, each behind residual + layer norm."""

    def __init__(self, d_model: int, d_ff: int, n_layers: int, n_tokens: int,
                 rng: np.random.Generator, name: str = "mlp"):
        self.blocks = []
        for i in range(n_layers):
            self.blocks.append({
                "mix": Linear(n_tokens, n_tokens, rng, name=f"{name}.{i}.mix"),
                "ffn": _FeedForward(d_model, d_ff, rng, name=f"{name}.{i}.ffn"),
                "ln1": LayerNorm(d_model, name=f"{name}.{i}.ln1"),
                "ln2": LayerNorm(d_model, name=f"{name}.{i}.ln2"),
            })

    def __call__(self, tokens: Tensor, stats: Tensor | None = None,
                 groups: tuple[int, int] | None = None) -> Tensor:
        x = tokens
        for blk in self.blocks:
            mixed = blk["mix"](x.swapaxes(1, 2)).swapaxes(1, 2)
            x = blk["ln1"](x + mixed)
            x = blk["ln2"](x + blk["ffn"](x))
        return x

    def params(self):
        out = []
        for blk in self.blocks:
            out += blk["mix"].params() + blk["ffn"].params()
            out += blk["ln1"].params() + blk["ln2"].params()
        return out


class _GRULayer:
    """Gates: z = σ(W_z x + U_z h), r = σ(W_r x + U_r h),
    candidate ñ = tanh(W_n x + U_n (r⊙h)), update h' = (1−z)⊙h + z⊙ñ."""

    def __init__(self, d_in: int, d_hidden: int, rng: np.random.Generator, name: str):
        self.d_hidden = d_hidden
        self.wx = Linear(d_in, 3 * d_hidden, rng, name=f"{name}.wx")
        self.wh = Linear(d_hidden, 2 * d_hidden, rng, bias=False, name=f"{name}.wh")
        self.wn = Linear(d_hidden, d_hidden, rng, bias=False, name=f"{name}.wn")

    def step(self, x_t: Tensor, h: Tensor) -> Tensor:
        dh = self.d_hidden
        gx = self.wx(x_t)
        gh = self.wh(h)
        z = (gx.narrow(-1, 0, dh) + gh.narrow(-1, 0, dh)).sigmoid()
        r = (gx.narrow(-1, dh, dh) + gh.narrow(-1, dh, dh)).sigmoid()
        cand = (gx.narrow(-1, 2 * dh, dh) + self.wn(r * h)).tanh()
        return (Tensor(1.0) - z) * h + z * cand

    def __call__(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        h = Tensor(np.zeros((b, self.d_hidden)))
        outputs = []
        for t in range(n):
            h = self.step(x.narrow(1, t, 1).reshape(b, -1), h)
            outputs.append(h)
        return stack(outputs, axis=1)

    def params(self):
        return self.wx.params() + self.wh.params() + self.wn.params()


class GRUBackbone:
    def __init__(self, d_model: int, n_layers: int, rng: np.random.Generator,
                 name: str = "gru"):
        self.layers = [_GRULayer(d_model, d_model, rng, name=f"{name}.{i}")
                       for i in range(n_layers)]

    def __call__(self, tokens: Tensor, stats: Tensor | None = None,
                 groups: tuple[int, int] | None = None) -> Tensor:
        x = tokens
        for layer in self.layers:
            x = layer(x)
        return x

    def params(self):
        out = []
        for layer in self.layers:
            out += layer.params()
        return out


def _over_channel_axis(fn, tokens: Tensor, groups: tuple[int, int],
                       stats: Tensor | None) -> Tensor:
    """Apply an attention module across the channel axis: rows of `tokens`
    are (batch × channel) groups; regroup so channels become the sequence."""
    b, c = groups
    rows, n, d = tokens.shape
    if rows != b * c:
        raise ValueError(f"token rows {rows} do not factor into {b}x{c}")
    x = tokens.reshape(b, c, n, d).swapaxes(1, 2).reshape(b * n, c, d)
    y = fn(x, stats)
    return y.reshape(b, n, c, d).swapaxes(1, 2).reshape(rows, n, d)


class TransformerBackbone:
    """Post-norm encoder; optional second attention stage across channels."""

    def __init__(self, d_model: int, d_ff: int, n_layers: int,
                 series_attention: str, feature_attention: str,
                 n_tokens: int, rng: np.random.Generator,
                 channels: int = 1, stat_dim: int | None = None,
                 name: str = "tf"):
        if series_attention not in SERIES_ATTENTION_CHOICES:
            raise ValueError(f"unknown series attention {series_attention!r}")
        if feature_attention not in FEATURE_ATTENTION_CHOICES:
            raise ValueError(f"unknown feature attention {feature_attention!r}")
        self.layers = []
        for i in range(n_layers):
            layer = {
                "series": None, "feature": None,
                "ffn": _FeedForward(d_model, d_ff, rng, name=f"{name}.{i}.ffn"),
                "ln_f": LayerNorm(d_model, name=f"{name}.{i}.ln_f"),
            }
            if series_attention != "Null":
                layer["series"] = MultiHeadAttention(
                    d_model, series_attention, rng, n_tokens=n_tokens,
                    stat_dim=stat_dim, name=f"{name}.{i}.series")
                layer["ln_s"] = LayerNorm(d_model, name=f"{name}.{i}.ln_s")
            if feature_attention != "Null":
                layer["feature"] = MultiHeadAttention(
                    d_model, feature_attention, rng, n_tokens=channels,
                    name=f"{name}.{i}.feature")
                layer["ln_c"] = LayerNorm(d_model, name=f"{name}.{i}.ln_c")
            self.layers.append(layer)

    def __call__(self, tokens: Tensor, stats: Tensor | None = None,
                 groups: tuple[int, int] | None = None) -> Tensor:
        x = tokens
        for layer in self.layers:
            if layer["series"] is not None:
                x = layer["ln_s"](x + layer["series"](x, stats))
            if layer["feature"] is not None:
                if groups is None:
                    raise ValueError("feature attention needs (batch, channels) groups")
                x = layer["ln_c"](x + _over_channel_axis(layer["feature"], x, groups, None))
            x = layer["ln_f"](x + layer["ffn"](x))
        return x

    def params(self):
        out = []
        for layer in self.layers:
            if layer["series"] is not None:
                out += layer["series"].params() + layer["ln_s"].params()
            if layer["feature"] is not None:
                out += layer["feature"].params() + layer["ln_c"].params()
            out += layer["ffn"].params() + layer["ln_f"].params()
        return out


def build_backbone(network_type: str, *, d_model: int, d_ff: int, n_layers: int,
                   series_attention: str, feature_attention: str, n_tokens: int,
                   rng: np.random.Generator, channels: int = 1,
                   stat_dim: int | None = None):
    if network_type in ("MLP", "RNN"):
        if series_attention != "Null" or feature_attention != "Null":
            raise ValueError(f"{network_type} backbone excludes attention modules")
        if network_type == "MLP":
            return MLPBackbone(d_model, d_ff, n_layers, n_tokens, rng)
        return GRUBackbone(d_model, n_layers, rng)
    if network_type == "Transformer":
        return TransformerBackbone(d_model, d_ff, n_layers, series_attention,
                                   feature_attention, n_tokens, rng,
                                   channels=channels, stat_dim=stat_dim)
    raise ValueError(f"network type {network_type!r} is not instantiable")
