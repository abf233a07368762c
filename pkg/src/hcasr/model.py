"""Two-stream LSPC + LiGRU encoder, attention decoder and CTC head.

Tensors are batch-major: features ``(B, T, D)`` with a ``lengths`` vector.
Padded frames are zeroed after every convolution, so a padded batch gives the
same valid outputs as running each utterance alone.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError

CONTENT = "content"
LOCATION = "location"
# reserved: a recurrent location-aware variant whose structure is left open
LOCATION_LSTM = "location_lstm"


@dataclass
class LspcConfig:
    input_dim: int = 80
    conv1_channels: int = 16
    conv2_channels: int = 16
    parallel_kernel_sizes: tuple[int, ...] = (3, 5, 7)
    parallel_channels_each: int = 8
    pool_feature_size: int = 2
    pool_time_size: int = 2
    projection_dim: int = 1024

    def validate(self):
        ks = tuple(self.parallel_kernel_sizes)
        if len(ks) != 3 or any(k % 2 == 0 for k in ks) or list(ks) != sorted(set(ks)):
            raise ConfigError(f"parallel_kernel_sizes must be 3 strictly increasing odd ints, got {ks}")
        if self.input_dim % self.pool_feature_size:
            raise ConfigError(
                f"feature dimension {self.input_dim} not divisible by "
                f"pool_feature_size {self.pool_feature_size}"
            )
        for name in ("conv1_channels", "conv2_channels", "parallel_channels_each",
                     "pool_feature_size", "pool_time_size", "projection_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")


@dataclass
class VggConfig:
    input_dim: int = 80
    channels: tuple[int, int] = (64, 128)
    projection_dim: int = 1024

    def validate(self):
        if self.input_dim % 4:
            raise ConfigError(f"feature dimension {self.input_dim} not divisible by pooling factor 4")


@dataclass
class ModelConfig:
    vocab_size: int = 8
    extractor: str = "lspc"  # or "vgg"
    fbank: LspcConfig = field(default_factory=lambda: LspcConfig(input_dim=80, pool_feature_size=2))
    spectrogram: LspcConfig = field(
        default_factory=lambda: LspcConfig(input_dim=201, pool_feature_size=3)
    )
    fusion_mode: str = "trainable"  # or "fixed"
    fusion_beta: float = 0.3
    encoder_layers: int = 4
    encoder_hidden: int = 128
    post_hidden: int = 160
    post_activation: bool = True
    encoder_dim: int = 160
    decoder_embed: int = 32
    decoder_hidden: int = 128
    attention_dim: int = 128
    attention_variant: str = LOCATION
    location_channels: int = 8
    location_kernel: int = 15

    def validate(self):
        if self.vocab_size < 1:
            raise ConfigError("vocab_size must be >= 1")
        if self.extractor not in ("lspc", "vgg"):
            raise ConfigError(f"unknown extractor {self.extractor!r}")
        if self.extractor == "vgg":
            VggConfig(self.fbank.input_dim).validate()
            VggConfig(self.spectrogram.input_dim).validate()
        if self.extractor == "lspc":
            self.fbank.validate()
            self.spectrogram.validate()
            if self.fbank.pool_time_size != self.spectrogram.pool_time_size:
                raise ConfigError("both streams need the same pool_time_size")
            if self.fbank.projection_dim != self.spectrogram.projection_dim:
                raise ConfigError("both streams need the same projection_dim")
        if self.fusion_mode not in ("fixed", "trainable"):
            raise ConfigError(f"unknown fusion mode {self.fusion_mode!r}")
        if self.fusion_mode == "fixed" and not 0.0 <= self.fusion_beta <= 1.0:
            raise ConfigError("fixed beta must lie in [0, 1]")
        if self.attention_variant == LOCATION_LSTM:
            raise ConfigError("attention variant 'location_lstm' is reserved but not implemented")
        if self.attention_variant not in (CONTENT, LOCATION):
            raise ConfigError(f"unknown attention variant {self.attention_variant!r}")
        if self.location_kernel % 2 == 0:
            raise ConfigError("location_kernel must be odd")

    @property
    def time_reduction(self) -> int:
        return 4 if self.extractor == "vgg" else self.fbank.pool_time_size

    @property
    def projection_dim(self) -> int:
        return self.fbank.projection_dim

    def to_dict(self) -> dict:
        return asdict(self)


def length_mask(lengths: torch.Tensor, T: int) -> torch.Tensor:
    return torch.arange(T, device=lengths.device)[None, :] < lengths[:, None]


# -- feature extractors -------------------------------------------------------


class Lspc(nn.Module):
    """conv -> conv -> three parallel convs -> concat -> feature pool -> time pool -> linear."""

    def __init__(self, cfg: LspcConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.conv1 = nn.Conv2d(1, cfg.conv1_channels, 3, padding=1)
        self.conv2 = nn.Conv2d(cfg.conv1_channels, cfg.conv2_channels, 3, padding=1)
        # kernels vary along time; the frequency extent stays 3
        self.parallel = nn.ModuleList(
            nn.Conv2d(cfg.conv2_channels, cfg.parallel_channels_each, (k, 3), padding=(k // 2, 1))
            for k in cfg.parallel_kernel_sizes
        )
        flat = 3 * cfg.parallel_channels_each * (cfg.input_dim // cfg.pool_feature_size)
        self.proj = nn.Linear(flat, cfg.projection_dim)

    def forward(self, x, lengths):
        if x.shape[-1] != self.cfg.input_dim:
            raise ConfigError(f"expected feature dim {self.cfg.input_dim}, got {x.shape[-1]}")
        m = length_mask(lengths, x.shape[1])[:, None, :, None].to(x.dtype)
        h = x[:, None] * m
        h = F.relu(self.conv1(h)) * m
        h = F.relu(self.conv2(h)) * m
        h = torch.cat([F.relu(conv(h)) * m for conv in self.parallel], dim=1)
        h = F.max_pool2d(h, kernel_size=(1, self.cfg.pool_feature_size))
        h = F.max_pool2d(h, kernel_size=(self.cfg.pool_time_size, 1))
        B, C, T, D = h.shape
        h = h.permute(0, 2, 1, 3).reshape(B, T, C * D)
        return F.relu(self.proj(h)), lengths // self.cfg.pool_time_size


class VggExtractor(nn.Module):
    """Two (conv3x3, conv3x3, 2x2 max-pool) blocks, 1 -> 64 -> 128 channels."""

    def __init__(self, cfg: VggConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        c1, c2 = cfg.channels
        self.convs = nn.ModuleList([
            nn.Conv2d(1, c1, 3, padding=1),
            nn.Conv2d(c1, c1, 3, padding=1),
            nn.Conv2d(c1, c2, 3, padding=1),
            nn.Conv2d(c2, c2, 3, padding=1),
        ])
        self.proj = nn.Linear(c2 * (cfg.input_dim // 4), cfg.projection_dim)

    def forward(self, x, lengths):
        if x.shape[-1] != self.cfg.input_dim:
            raise ConfigError(f"expected feature dim {self.cfg.input_dim}, got {x.shape[-1]}")
        h = x[:, None]
        for i, conv in enumerate(self.convs):
            m = length_mask(lengths, h.shape[2])[:, None, :, None].to(x.dtype)
            h = F.relu(conv(h * m)) * m
            if i % 2 == 1:
                h = F.max_pool2d(h, 2)
                lengths = lengths // 2
        B, C, T, D = h.shape
        h = h.permute(0, 2, 1, 3).reshape(B, T, C * D)
        return F.relu(self.proj(h)), lengths


# -- fusion -------------------------------------------------------------------


class Fusion(nn.Module):
    """f = (1 - beta) * f1 + beta * f2.

    Trainable beta is ``sigmoid(b)`` with ``b`` starting at 0, i.e. beta = 0.5.
    """

    def __init__(self, mode: str = "trainable", beta: float = 0.3):
        super().__init__()
        self.mode = mode
        if mode == "trainable":
            self.b = nn.Parameter(torch.zeros(()))
        else:
            self.register_buffer("fixed_beta", torch.tensor(float(beta)))

    def beta(self) -> torch.Tensor:
        if self.mode == "trainable":
            return torch.sigmoid(self.b)
        return self.fixed_beta

    def forward(self, f1, f2):
        return fuse(f1, f2, self.beta())


def fuse(f1: torch.Tensor, f2: torch.Tensor, beta) -> torch.Tensor:
    if f1.shape != f2.shape:
        raise ValueError(f"fusion shape mismatch: {tuple(f1.shape)} vs {tuple(f2.shape)}")
    beta = torch.as_tensor(beta, dtype=f1.dtype)
    return (1.0 - beta) * f1 + beta * f2


# -- encoder ------------------------------------------------------------------


class LiGRUDirection(nn.Module):
    """Light GRU: one update gate, ReLU candidate, layer-normed input projections."""

    def __init__(self, input_dim: int, hidden: int):
        super().__init__()
        self.hidden = hidden
        self.w = nn.Linear(input_dim, 2 * hidden, bias=False)
        self.norm_z = nn.LayerNorm(hidden)
        self.norm_h = nn.LayerNorm(hidden)
        self.u_z = nn.Linear(hidden, hidden, bias=False)
        self.u_h = nn.Linear(hidden, hidden, bias=False)

    def forward(self, x):
        wz, wh = self.w(x).split(self.hidden, dim=-1)
        wz = self.norm_z(wz)
        wh = self.norm_h(wh)
        h = x.new_zeros(x.shape[0], self.hidden)
        out = []
        for t in range(x.shape[1]):
            h = ligru_cell(wz[:, t], wh[:, t], h, self.u_z.weight, self.u_h.weight)
            out.append(h)
        return torch.stack(out, dim=1)


def ligru_cell(wz_t, wh_t, h_prev, u_z, u_h):
    z = torch.sigmoid(wz_t + h_prev @ u_z.T)
    cand = F.relu(wh_t + h_prev @ u_h.T)
    return z * h_prev + (1.0 - z) * cand


def _reverse_padded(x, lengths):
    T = x.shape[1]
    t = torch.arange(T, device=x.device)[None, :]
    idx = torch.where(t < lengths[:, None], lengths[:, None] - 1 - t, t)
    return x.gather(1, idx[:, :, None].expand(-1, -1, x.shape[2]))


class BiLiGRU(nn.Module):
    def __init__(self, input_dim: int, hidden: int):
        super().__init__()
        self.fwd = LiGRUDirection(input_dim, hidden)
        self.bwd = LiGRUDirection(input_dim, hidden)

    def forward(self, x, lengths):
        forward = self.fwd(x)
        backward = _reverse_padded(self.bwd(_reverse_padded(x, lengths)), lengths)
        return torch.cat([forward, backward], dim=-1)


class Encoder(nn.Module):
    def __init__(self, input_dim, hidden, layers, post_hidden, out_dim, post_activation=True):
        super().__init__()
        self.layers = nn.ModuleList(
            BiLiGRU(input_dim if i == 0 else 2 * hidden, hidden) for i in range(layers)
        )
        self.lin1 = nn.Linear(2 * hidden, post_hidden)
        self.lin2 = nn.Linear(post_hidden, out_dim)
        self.post_activation = post_activation

    def forward(self, x, lengths):
        m = length_mask(lengths, x.shape[1])[:, :, None].to(x.dtype)
        h = x * m
        for layer in self.layers:
            h = layer(h, lengths) * m
        h = self.lin1(h)
        if self.post_activation:
            h = F.relu(h)
        return self.lin2(h) * m


# -- attention decoder --------------------------------------------------------


@dataclass
class AttentionState:
    hidden: torch.Tensor  # (B, decoder_hidden)
    weights: torch.Tensor  # (B, T), rows on the simplex over valid frames
    context: torch.Tensor | None = None

    def select(self, index: torch.Tensor) -> "AttentionState":
        ctx = None if self.context is None else self.context[index]
        return AttentionState(self.hidden[index], self.weights[index], ctx)


class GRUCell(nn.Module):
    def __init__(self, input_dim, hidden):
        super().__init__()
        self.hidden = hidden
        self.w = nn.Linear(input_dim, 3 * hidden)
        self.u = nn.Linear(hidden, 3 * hidden)

    def forward(self, x, h):
        wr, wz, wn = self.w(x).split(self.hidden, dim=-1)
        ur, uz, un = self.u(h).split(self.hidden, dim=-1)
        r = torch.sigmoid(wr + ur)
        z = torch.sigmoid(wz + uz)
        n = torch.tanh(wn + r * un)
        return (1.0 - z) * n + z * h


class AttentionDecoder(nn.Module):
    """Single-layer GRU decoder with content- or location-based attention.

    Token indices here are decoder-space: ``id - 1`` for characters, and
    ``vocab_size`` for eos. The eos row of the embedding doubles as sos.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.vocab_size = cfg.vocab_size
        self.eos = cfg.vocab_size
        self.variant = cfg.attention_variant
        self.embed = nn.Embedding(cfg.vocab_size + 1, cfg.decoder_embed)
        self.query = nn.Linear(cfg.decoder_hidden, cfg.attention_dim)
        self.key = nn.Linear(cfg.encoder_dim, cfg.attention_dim, bias=False)
        self.score = nn.Linear(cfg.attention_dim, 1, bias=False)
        if cfg.attention_variant == LOCATION:
            self.loc_conv = nn.Conv1d(
                1, cfg.location_channels, cfg.location_kernel,
                padding=cfg.location_kernel // 2, bias=False,
            )
            self.loc_proj = nn.Linear(cfg.location_channels, cfg.attention_dim, bias=False)
        self.cell = GRUCell(cfg.decoder_embed + cfg.encoder_dim, cfg.decoder_hidden)
        self.out = nn.Linear(cfg.decoder_hidden, cfg.vocab_size + 1)

    def init_state(self, h_enc, lengths) -> AttentionState:
        B, T, _ = h_enc.shape
        mask = length_mask(lengths, T).to(h_enc.dtype)
        return AttentionState(
            hidden=h_enc.new_zeros(B, self.cell.hidden),
            weights=mask / lengths[:, None].to(h_enc.dtype),
        )

    def step(self, state, h_enc, keys, mask, prev, variant=None):
        variant = variant or self.variant
        energy = self.query(state.hidden)[:, None, :] + keys
        if variant == LOCATION:
            loc = self.loc_conv(state.weights[:, None, :]).transpose(1, 2)
            energy = energy + self.loc_proj(loc)
        e = self.score(torch.tanh(energy)).squeeze(-1)
        e = e.masked_fill(~mask, float("-inf"))
        weights = torch.softmax(e, dim=-1)
        context = torch.bmm(weights[:, None, :], h_enc).squeeze(1)
        hidden = self.cell(torch.cat([self.embed(prev), context], dim=-1), state.hidden)
        return AttentionState(hidden, weights, context), self.out(hidden)

    def teacher_forced(self, h_enc, lengths, targets):
        """Logits for every step of ``[sos] + y`` predicting ``y + [eos]``.

        ``targets`` holds decoder-space indices padded arbitrarily; returns
        ``(B, U + 1, vocab_size + 1)``.
        """
        B, U = targets.shape
        keys = self.key(h_enc)
        mask = length_mask(lengths, h_enc.shape[1])
        state = self.init_state(h_enc, lengths)
        prev = torch.full((B,), self.eos, dtype=torch.long)
        logits = []
        for u in range(U + 1):
            state, out = self.step(state, h_enc, keys, mask, prev)
            logits.append(out)
            if u < U:
                prev = targets[:, u]
        return torch.stack(logits, dim=1)


def attention_step(state, h_enc, prev_token, decoder, variant=None, lengths=None):
    """One decoder step for a batch of hypotheses sharing ``h_enc``.

    ``prev_token`` is a decoder-space index tensor ``(B,)``; ``h_enc`` is
    ``(B, T, D)``. Returns the new state and logits over characters + eos.
    """
    prev_token = torch.as_tensor(prev_token, dtype=torch.long).reshape(-1)
    if prev_token.numel() and (prev_token.min() < 0 or prev_token.max() > decoder.eos):
        raise ValueError(f"token index out of vocabulary: {prev_token.tolist()}")
    if lengths is None:
        lengths = torch.full((h_enc.shape[0],), h_enc.shape[1], dtype=torch.long)
    mask = length_mask(lengths, h_enc.shape[1])
    return decoder.step(state, h_enc, decoder.key(h_enc), mask, prev_token, variant)


# -- full model ---------------------------------------------------------------


class HybridModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        if cfg.extractor == "lspc":
            self.extractor_fbank = Lspc(cfg.fbank)
            self.extractor_spec = Lspc(cfg.spectrogram)
        else:
            proj = cfg.projection_dim
            self.extractor_fbank = VggExtractor(VggConfig(cfg.fbank.input_dim, projection_dim=proj))
            self.extractor_spec = VggExtractor(
                VggConfig(cfg.spectrogram.input_dim, projection_dim=proj)
            )
        self.fusion = Fusion(cfg.fusion_mode, cfg.fusion_beta)
        self.encoder = Encoder(
            cfg.projection_dim, cfg.encoder_hidden, cfg.encoder_layers,
            cfg.post_hidden, cfg.encoder_dim, cfg.post_activation,
        )
        self.decoder = AttentionDecoder(cfg)
        self.ctc = nn.Linear(cfg.encoder_dim, cfg.vocab_size + 1)

    def encode(self, fbank, spec, lengths):
        f1, out_len = self.extractor_fbank(fbank, lengths)
        f2, out_len2 = self.extractor_spec(spec, lengths)
        if not torch.equal(out_len, out_len2):
            raise AssertionError("stream time lengths diverged")
        f = self.fusion(f1, f2)
        return self.encoder(f, out_len), out_len

    def ctc_log_probs(self, h_enc):
        return ctc_head(h_enc, self.ctc)


def ctc_head(h_enc, linear: nn.Linear):
    """Per-frame log-softmax over blank (index 0) and the characters."""
    return torch.log_softmax(linear(h_enc), dim=-1)


def lspc_forward(feat, extractor: Lspc):
    """Single-utterance convenience wrapper: ``(T, D)`` -> ``(T // pool, proj)``."""
    x = torch.as_tensor(feat, dtype=next(extractor.parameters()).dtype)[None]
    out, _ = extractor(x, torch.tensor([x.shape[1]]))
    return out[0]


def vgg_baseline_forward(feat, extractor: VggExtractor):
    x = torch.as_tensor(feat, dtype=next(extractor.parameters()).dtype)[None]
    out, _ = extractor(x, torch.tensor([x.shape[1]]))
    return out[0]


def encode(fused, encoder: Encoder):
    x = torch.as_tensor(fused)[None]
    return encoder(x, torch.tensor([x.shape[1]]))[0]


# -- parameters ---------------------------------------------------------------

_FILTERS = {
    "all": ("",),
    "extractors": ("extractor_fbank.", "extractor_spec."),
    "extractor_fbank": ("extractor_fbank.",),
    "extractor_spec": ("extractor_spec.",),
    "fusion": ("fusion.",),
    "encoder": ("encoder.",),
    "decoder": ("decoder.",),
    "ctc": ("ctc.",),
}


def count_parameters(module: nn.Module, which: str = "all") -> int:
    if which not in _FILTERS:
        raise KeyError(f"unknown parameter filter {which!r}; choose from {sorted(_FILTERS)}")
    prefixes = _FILTERS[which]
    return sum(
        p.numel() for name, p in module.named_parameters() if name.startswith(prefixes)
    )


def init_parameters(module: nn.Module, seed: int):
    """Xavier-uniform weights, zero biases, unit norm gains; fully seeded."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in module.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if isinstance(_owner(module, name), nn.LayerNorm):
                p.fill_(1.0 if leaf == "weight" else 0.0)
            elif leaf == "bias" or p.dim() == 0:
                p.zero_()
            else:
                fan_out = p.shape[0] * (p[0][0].numel() if p.dim() > 2 else 1)
                fan_in = p[0].numel()
                bound = math.sqrt(6.0 / (fan_in + fan_out))
                p.copy_(torch.rand(p.shape, generator=gen, dtype=p.dtype) * 2 * bound - bound)


def _owner(module, name):
    for part in name.split(".")[:-1]:
        module = getattr(module, part)
    return module


def build_model(cfg: ModelConfig, seed: int = 0, dtype=torch.float64) -> HybridModel:
    model = HybridModel(cfg).to(dtype)
    init_parameters(model, seed)
    return model
