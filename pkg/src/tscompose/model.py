"""End-to-end forecaster assembled from one design-space configuration.

Data flow: normalize -> decompose -> [seasonal: multi-scale tokenize ->
backbone -> head] + [trend: linear map] -> denormalize.  Every learnable
piece is seeded from one generator, so identical (config, shape, seed)
always builds the identical model.
"""

from __future__ import annotations

import numpy as np

from .backbones import build_backbone
from .encoding import (
    PATCH_LEN,
    ForecastHead,
    InvertedTokenizer,
    PatchTokenizer,
    PointwiseTokenizer,
    TokenLayout,
    apply_channel_independence,
    fold_mark,
)
from .layers import Linear
from .preprocess import Decomposer, Normalizer, multiscale
from .space import PipelineConfig, config_from_text, default_space, validate_config
from .tensor import Tensor, concat

MULTISCALE_SET = (1, 2, 4)

_EMBED_MODES = {
    "Positional Encoding": "pointwise",
    "Series Patching": "patch",
    "Inverted Encoding": "inverted",
}


def _pool(arr: np.ndarray, scale: int) -> np.ndarray:
    """Average-pool [B, L, F] along time with stride == scale, tail-truncated."""
    if scale == 1:
        return arr
    b, l, f = arr.shape
    usable = (l // scale) * scale
    return arr[:, :usable].reshape(b, usable // scale, scale, f).mean(axis=2)


class ForecastModel:
    def __init__(self, config: PipelineConfig, channels: int, horizon: int,
                 has_timestamps: bool, seed: int):
        space = default_space()
        problems = validate_config(config, space)
        if problems:
            raise ValueError("invalid configuration: " + "; ".join(problems))

        self.config = config
        self.channels = channels
        self.horizon = horizon
        self.has_timestamps = has_timestamps
        self.seed = seed

        rng = np.random.default_rng(seed)
        L = config.seq_len()
        d_model, d_ff = config.widths()
        mode = _EMBED_MODES[config["Series Embedding"]]
        series_attn = config["Series Attention"]
        feature_attn = config["Feature Attention"]
        self.mode = mode
        self.lookback = L
        self.with_mark = config.with_timestamps() and has_timestamps
        # feature attention needs a channel axis to mix over, so a
        # channel-mixed pipeline is still tokenized per channel (shared
        # weights); cross-channel mixing then happens in the attention stage
        self.folded = config.channel_independent() or (
            feature_attn != "Null" and mode != "inverted")
        self.use_feature_attention = feature_attn != "Null"
        self.needs_stats = series_attn == "DestationaryAttn"

        self.normalizer = Normalizer(config["Series Normalization"], channels, L)
        self.decomposer = Decomposer(config["Series Decomposition"])

        scales = MULTISCALE_SET if config.multiscale() else (1,)
        if mode == "patch":  # a pooled window must still fit one patch
            scales = tuple(s for s in scales if L // s >= PATCH_LEN)
        self.scales = scales

        channels_in = 1 if self.folded else channels
        self.tokenizers = []
        token_counts = []
        for s in scales:
            pooled_len = L // s
            if mode == "pointwise":
                tok = PointwiseTokenizer(channels_in, d_model, pooled_len,
                                         self.with_mark, rng)
                token_counts.append(tok.n_tokens(pooled_len))
            elif mode == "patch":
                tok = PatchTokenizer(channels_in, d_model, pooled_len, rng)
                token_counts.append(tok.n_tokens(pooled_len))
            else:
                tok = InvertedTokenizer(pooled_len, d_model, self.with_mark, rng)
                token_counts.append(tok.n_tokens(channels))
            self.tokenizers.append(tok)

        n_total = token_counts[0]  # backbone sequence length (base scale)
        self.scale_mixers = {}
        for s, n_s in zip(scales, token_counts):
            if n_s != n_total:
                self.scale_mixers[s] = Linear(n_s, n_total, rng, name=f"mix{s}")

        stat_dim = None
        if self.needs_stats:
            stat_dim = 2 if self.folded else 2 * channels
        self.backbone = build_backbone(
            config["Network Type"], d_model=d_model, d_ff=d_ff,
            n_layers=config.encoder_layers(), series_attention=series_attn,
            feature_attention=feature_attn, n_tokens=n_total, rng=rng,
            channels=channels, stat_dim=stat_dim)

        mark_token = mode == "inverted" and self.with_mark
        layout_tokens = n_total - (1 if mark_token else 0)
        self.layout = TokenLayout(mode=mode, channels=channels, folded=self.folded,
                                  n_tokens=layout_tokens, mark_token=mark_token)
        self.head = ForecastHead(self.layout, d_model, horizon, rng)

        self.trend_proj = None
        if config["Series Decomposition"] != "None":
            self.trend_proj = Linear(L, horizon, rng, name="trend")

        names = [n for n, _ in self.params()]
        assert len(names) == len(set(names)), "parameter names must be unique"

    @classmethod
    def build(cls, config: PipelineConfig, channels: int, horizon: int,
              has_timestamps: bool = True, seed: int = 0) -> "ForecastModel":
        return cls(config, channels, horizon, has_timestamps, seed)

    # ------------------------------------------------------------- forward

    def __call__(self, x: np.ndarray, mark: np.ndarray | None = None) -> Tensor:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[1] != self.lookback or x.shape[2] != self.channels:
            raise ValueError(f"expected [B, {self.lookback}, {self.channels}], "
                             f"got {x.shape}")
        if self.with_mark and mark is None:
            raise ValueError("model built with calendar features but none supplied")
        batch = x.shape[0]

        normalized, state = self.normalizer.normalize(Tensor(x))
        decomp = self.decomposer.decompose(normalized)

        pooled = multiscale(decomp.seasonal, self.scales)
        tokens = None
        for scale, tok, xs in zip(self.scales, self.tokenizers, pooled):
            mark_s = _pool(mark, scale) if (self.with_mark and mark is not None) else None
            if self.folded:
                xs = apply_channel_independence(xs)
                if mark_s is not None:
                    mark_s = fold_mark(mark_s, self.channels)
            t = tok(xs, mark_s if self.with_mark else None)
            mixer = self.scale_mixers.get(scale)
            if mixer is not None:
                t = mixer(t.swapaxes(1, 2)).swapaxes(1, 2)
            tokens = t if tokens is None else tokens + t

        stats = self._stat_tensor(state) if self.needs_stats else None
        groups = (batch, self.channels) if self.use_feature_attention else None
        hidden = self.backbone(tokens, stats=stats, groups=groups)
        forecast = self.head(hidden)

        if self.trend_proj is not None:
            trend = self.trend_proj(decomp.trend.swapaxes(1, 2)).swapaxes(1, 2)
            forecast = forecast + trend
        return self.normalizer.denormalize(forecast, state)

    def _stat_tensor(self, state) -> Tensor:
        if not self.folded:
            return state.stat_features()
        b, _, c = state.mu.shape
        mu = state.mu.swapaxes(1, 2).reshape(b * c, 1)
        log_sigma = state.sigma.log().swapaxes(1, 2).reshape(b * c, 1)
        return concat([mu, log_sigma], axis=1)

    # ---------------------------------------------------------- parameters

    def params(self) -> list[tuple[str, Tensor]]:
        out = list(self.normalizer.params())
        out += self.decomposer.params()
        for s, tok in zip(self.scales, self.tokenizers):
            out += [(f"scale{s}.{name}", p) for name, p in tok.params()]
        for s in sorted(self.scale_mixers):
            out += self.scale_mixers[s].params()
        out += self.backbone.params()
        out += self.head.params()
        if self.trend_proj is not None:
            out += self.trend_proj.params()
        return out

    # ----------------------------------------------------------- save/load

    def save(self, path: str) -> None:
        arrays = {f"param:{name}": p.data for name, p in self.params()}
        arrays["meta:config"] = np.array(self.config.canonical_text())
        arrays["meta:shape"] = np.array([self.channels, self.horizon,
                                         int(self.has_timestamps), self.seed])
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path: str) -> "ForecastModel":
        blob = np.load(path, allow_pickle=False)
        config = config_from_text(str(blob["meta:config"]), default_space())
        channels, horizon, has_ts, seed = (int(v) for v in blob["meta:shape"])
        model = cls.build(config, channels, horizon, bool(has_ts), seed)
        saved = {k[len("param:"):]: blob[k] for k in blob.files if k.startswith("param:")}
        for name, p in model.params():
            if name not in saved:
                raise ValueError(f"checkpoint missing parameter {name!r}")
            if saved[name].shape != p.data.shape:
                raise ValueError(f"checkpoint shape mismatch for {name!r}")
            p.data = saved[name].copy()
        return model
