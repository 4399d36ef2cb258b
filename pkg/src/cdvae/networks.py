"""Fully convolutional encoder/decoder/critic/classifier family.

All nets are 1-D FCNs over time: kernel width 3, stride 1, symmetric zero
padding, so output length always equals input length. Layer normalization is
per frame over channels. Blocks:

    ConvLReLU: conv(3) -> LN -> leaky ReLU        (encoders, critics)
    ConvGLU:   sigmoid(conv(3)->LN) * tanh(conv(3)->LN)   (decoders, classifier)

Encoders end in two positionwise linear heads (mu, log-variance). Decoders
concatenate the speaker code onto every block input and onto the final
projection input. Critics end in a positionwise linear head whose frame
scores are mean-pooled over non-masked frames. The speaker classifier is a
GLU stack over the latent sequence with a positionwise softmax head; it never
sees the speaker code.

Parameter init is drawn from a named numpy stream per parameter, so a
network's init depends only on (seed, its own name), not on which other
networks exist in the bundle.
"""

from __future__ import annotations

import dataclasses
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from .errors import CheckpointError, ShapeError, SpeakerLookupError
from .modes import Mode
from .rng import SeedTree

LRELU_SLOPE = 0.2
CHECKPOINT_FORMAT_VERSION = 1


@dataclasses.dataclass(frozen=True)
class ArchConfig:
    """Capacity knobs; channel lists may be empty (heads only, context-free)."""

    d_latent: int = 16
    d_speaker: int = 16
    input_dims: dict = dataclasses.field(default_factory=lambda: {"SP": 513, "MCC": 34})
    enc_channels: dict = dataclasses.field(
        default_factory=lambda: {"SP": (1024, 512, 256, 64, 32), "MCC": (512, 256, 128, 64, 32)})
    dec_channels: dict = dataclasses.field(
        default_factory=lambda: {"SP": (128, 256, 512, 1024), "MCC": (64, 128, 256, 512)})
    disc_channels: dict = dataclasses.field(
        default_factory=lambda: {"SP": (1024, 512, 256, 64, 32), "MCC": (512, 256, 128, 64, 32)})
    cls_channels: tuple = (128, 256, 512, 1024)

    def __post_init__(self):
        # normalize container types so configs loaded from YAML hash/compare equal
        object.__setattr__(self, "input_dims", {k: int(v) for k, v in self.input_dims.items()})
        for name in ("enc_channels", "dec_channels", "disc_channels"):
            object.__setattr__(self, name, {k: tuple(int(c) for c in v) for k, v in getattr(self, name).items()})
        object.__setattr__(self, "cls_channels", tuple(int(c) for c in self.cls_channels))

    @classmethod
    def desk_scale(cls, d_sp: int = 64, d_mcc: int = 16) -> "ArchConfig":
        return cls(
            d_latent=16,
            d_speaker=16,
            input_dims={"SP": d_sp, "MCC": d_mcc},
            enc_channels={"SP": (32, 16), "MCC": (24, 12)},
            dec_channels={"SP": (16, 32), "MCC": (12, 24)},
            disc_channels={"SP": (32, 16), "MCC": (24, 12)},
            cls_channels=(24, 12),
        )

    def to_dict(self) -> dict:
        return {
            "d_latent": self.d_latent,
            "d_speaker": self.d_speaker,
            "input_dims": dict(self.input_dims),
            "enc_channels": {k: list(v) for k, v in self.enc_channels.items()},
            "dec_channels": {k: list(v) for k, v in self.dec_channels.items()},
            "disc_channels": {k: list(v) for k, v in self.disc_channels.items()},
            "cls_channels": list(self.cls_channels),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ArchConfig":
        return cls(**doc)


class LatentSequence(NamedTuple):
    mu: torch.Tensor       # [B, d_latent, T]
    log_var: torch.Tensor  # [B, d_latent, T]


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis of [B, C, T] tensors."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = nn.Parameter(torch.ones(channels))
        self.beta = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        mean = x.mean(dim=1, keepdim=True)
        var = x.var(dim=1, keepdim=True, unbiased=False)
        y = (x - mean) / torch.sqrt(var + self.eps)
        return y * self.gamma[None, :, None] + self.beta[None, :, None]


class ConvLReLU(nn.Module):
    def __init__(self, d_in: int, d_out: int, slope: float = LRELU_SLOPE):
        super().__init__()
        self.conv = nn.Conv1d(d_in, d_out, kernel_size=3, padding=1)
        self.norm = ChannelLayerNorm(d_out)
        self.slope = slope

    def forward(self, x):
        return nn.functional.leaky_relu(self.norm(self.conv(x)), self.slope)


def glu_gate(gate_pre: torch.Tensor, feat_pre: torch.Tensor) -> torch.Tensor:
    """sigmoid(gate) * tanh(feature); a saturated gate (-inf) zeroes the block."""
    return torch.sigmoid(gate_pre) * torch.tanh(feat_pre)


class ConvGLU(nn.Module):
    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.conv_gate = nn.Conv1d(d_in, d_out, kernel_size=3, padding=1)
        self.norm_gate = ChannelLayerNorm(d_out)
        self.conv_feat = nn.Conv1d(d_in, d_out, kernel_size=3, padding=1)
        self.norm_feat = ChannelLayerNorm(d_out)

    def forward(self, x):
        return glu_gate(self.norm_gate(self.conv_gate(x)), self.norm_feat(self.conv_feat(x)))


class Encoder(nn.Module):
    def __init__(self, d_in: int, channels, d_latent: int):
        super().__init__()
        self.d_in = d_in
        stack = []
        prev = d_in
        for ch in channels:
            stack.append(ConvLReLU(prev, ch))
            prev = ch
        self.stack = nn.Sequential(*stack)
        self.head_mu = nn.Conv1d(prev, d_latent, kernel_size=1)
        self.head_logvar = nn.Conv1d(prev, d_latent, kernel_size=1)

    def forward(self, x) -> LatentSequence:
        h = self.stack(x)
        return LatentSequence(self.head_mu(h), self.head_logvar(h))


class Decoder(nn.Module):
    def __init__(self, d_latent: int, d_speaker: int, channels, d_out: int):
        super().__init__()
        self.d_speaker = d_speaker
        blocks = []
        prev = d_latent
        for ch in channels:
            blocks.append(ConvGLU(prev + d_speaker, ch))
            prev = ch
        self.blocks = nn.ModuleList(blocks)
        self.out = nn.Conv1d(prev + d_speaker, d_out, kernel_size=3, padding=1)

    def forward(self, z, y):
        # y: [B, d_speaker] broadcast over time and concatenated at every block
        ybar = y[:, :, None].expand(y.shape[0], y.shape[1], z.shape[2])
        h = z
        for block in self.blocks:
            h = block(torch.cat([h, ybar], dim=1))
        return self.out(torch.cat([h, ybar], dim=1))


class Critic(nn.Module):
    def __init__(self, d_in: int, channels):
        super().__init__()
        stack = []
        prev = d_in
        for ch in channels:
            stack.append(ConvLReLU(prev, ch))
            prev = ch
        self.stack = nn.Sequential(*stack)
        self.head = nn.Conv1d(prev, 1, kernel_size=1)

    def forward(self, x, mask=None):
        scores = self.head(self.stack(x))[:, 0, :]  # [B, T]
        if mask is None:
            return scores.mean(dim=1)
        m = mask.to(scores.dtype)
        return (scores * m).sum(dim=1) / m.sum(dim=1)


class SpeakerClassifier(nn.Module):
    def __init__(self, d_latent: int, channels, n_speakers: int):
        super().__init__()
        blocks = []
        prev = d_latent
        for ch in channels:
            blocks.append(ConvGLU(prev, ch))
            prev = ch
        self.blocks = nn.Sequential(*blocks)
        self.head = nn.Conv1d(prev, n_speakers, kernel_size=1)

    def forward(self, z):
        return self.head(self.blocks(z))  # logits [B, S, T]


class ModelBundle(nn.Module):
    """All networks of one system plus the speaker code table.

    Which parts exist depends on (mode, gan_domains); parameter roles:
    theta = encoders, phi = decoders + speaker table, psi = critics,
    cls = speaker classifier.
    """

    def __init__(self, arch: ArchConfig, mode: Mode, speakers, gan_domains=("MCC",)):
        super().__init__()
        self.arch = arch
        self.mode = mode
        self.speakers = list(speakers)
        self.gan_domains = tuple(gan_domains) if mode.has_gan else ()
        self.enc = nn.ModuleDict()
        self.dec = nn.ModuleDict()
        self.disc = nn.ModuleDict()
        for dom in mode.domains:
            d_in = arch.input_dims[dom]
            self.enc[dom] = Encoder(d_in, arch.enc_channels[dom], arch.d_latent)
            self.dec[dom] = Decoder(arch.d_latent, arch.d_speaker, arch.dec_channels[dom], d_in)
        for dom in self.gan_domains:
            if dom not in mode.domains:
                raise ShapeError(f"gan domain {dom} not among model domains {mode.domains}")
            self.disc[dom] = Critic(arch.input_dims[dom], arch.disc_channels[dom])
        self.cls = SpeakerClassifier(arch.d_latent, arch.cls_channels, len(self.speakers)) if mode.has_cls else None
        self.speaker_table = nn.Parameter(torch.zeros(len(self.speakers), arch.d_speaker))

    # -- role parameter groups ------------------------------------------------

    def theta_params(self):
        return [p for _, p in sorted(self.enc.named_parameters())]

    def phi_params(self):
        return [p for _, p in sorted(self.dec.named_parameters())] + [self.speaker_table]

    def psi_params(self):
        return [p for _, p in sorted(self.disc.named_parameters())]

    def cls_params(self):
        return [] if self.cls is None else [p for _, p in sorted(self.cls.named_parameters())]

    def role_parameters(self) -> dict:
        return {
            "theta": self.theta_params(),
            "phi": self.phi_params(),
            "psi": self.psi_params(),
            "cls": self.cls_params(),
        }

    # -- lookups ---------------------------------------------------------------

    def speaker_index(self, speaker_id: str) -> int:
        try:
            return self.speakers.index(speaker_id)
        except ValueError:
            raise SpeakerLookupError(f"speaker {speaker_id!r} not in table {self.speakers}") from None

    def speaker_code(self, idx) -> torch.Tensor:
        idx = torch.as_tensor(idx, dtype=torch.long)
        if idx.numel() == 0 or int(idx.min()) < 0 or int(idx.max()) >= len(self.speakers):
            raise SpeakerLookupError(f"speaker index out of range for table of {len(self.speakers)}")
        return self.speaker_table[idx]

    # -- forward paths -----------------------------------------------------------

    def _check_domain(self, dom: str, where: str):
        if dom not in self.enc:
            raise ShapeError(f"{where}: domain {dom} not built in mode {self.mode.name}")

    def encode(self, x: torch.Tensor, domain: str) -> LatentSequence:
        self._check_domain(domain, "encode")
        if x.ndim != 3 or x.shape[1] != self.arch.input_dims[domain]:
            raise ShapeError(
                f"encode expects [B, {self.arch.input_dims[domain]}, T], got {tuple(x.shape)}")
        return self.enc[domain](x)

    def decode(self, z: torch.Tensor, speaker_idx, domain: str) -> torch.Tensor:
        self._check_domain(domain, "decode")
        if z.ndim != 3 or z.shape[1] != self.arch.d_latent:
            raise ShapeError(f"decode expects [B, {self.arch.d_latent}, T], got {tuple(z.shape)}")
        return self.dec[domain](z, self.speaker_code(speaker_idx))

    def discriminate(self, x: torch.Tensor, domain: str, mask=None) -> torch.Tensor:
        if domain not in self.disc:
            raise ShapeError(f"no critic for domain {domain} (gan domains: {self.gan_domains})")
        return self.disc[domain](x, mask)

    def classify(self, z: torch.Tensor) -> torch.Tensor:
        if self.cls is None:
            raise ShapeError(f"mode {self.mode.name} has no speaker classifier")
        return self.cls(z)


def sample_latent(lat: LatentSequence, noise: torch.Tensor | None) -> torch.Tensor:
    """Reparameterized draw mu + exp(log_var / 2) * noise; noise=None means mu."""
    if noise is None:
        return lat.mu
    if noise.shape != lat.mu.shape:
        raise ShapeError(f"noise shape {tuple(noise.shape)} != mu shape {tuple(lat.mu.shape)}")
    return lat.mu + torch.exp(0.5 * lat.log_var) * noise


def classify_speaker(bundle: ModelBundle, z: torch.Tensor) -> torch.Tensor:
    """Per-frame speaker posteriors for one latent sequence [T, d_latent]."""
    if z.ndim != 2:
        raise ShapeError(f"classify_speaker expects [T, d_latent], got {tuple(z.shape)}")
    logits = bundle.classify(z.T[None])  # [1, S, T]
    return torch.softmax(logits[0], dim=0).T  # [T, S]


def init_parameters(bundle: ModelBundle, tree: SeedTree, dtype=torch.float64) -> ModelBundle:
    """Deterministic init from named streams; order-independent across modes.

    Conv/linear weights ~ N(0, 1/fan_in), biases 0, LN affine (1, 0), speaker
    table ~ N(0, 0.5^2). A given parameter name always gets the same values
    under the same seed regardless of which other networks exist.
    """
    bundle.to(dtype)
    with torch.no_grad():
        for name, param in sorted(bundle.named_parameters()):
            stream = tree.fresh("init", name)
            if name == "speaker_table":
                values = stream.normal(scale=0.5, size=tuple(param.shape))
            elif name.endswith(".weight") and param.ndim >= 2:
                fan_in = int(np.prod(param.shape[1:]))
                values = stream.normal(scale=1.0 / np.sqrt(fan_in), size=tuple(param.shape))
            elif name.endswith(".gamma"):
                values = np.ones(tuple(param.shape))
            else:  # biases, LN beta
                values = np.zeros(tuple(param.shape))
            param.copy_(torch.as_tensor(values, dtype=dtype))
    return bundle


def build_bundle(
    arch: ArchConfig,
    mode: Mode,
    speakers,
    gan_domains=("MCC",),
    seed_tree: SeedTree | None = None,
    dtype=torch.float64,
) -> ModelBundle:
    bundle = ModelBundle(arch, mode, speakers, gan_domains)
    if seed_tree is not None:
        init_parameters(bundle, seed_tree, dtype)
    else:
        bundle.to(dtype)
    return bundle


# ---------------------------------------------------------------------------
# bundle (de)serialization used by the training checkpoint container
# ---------------------------------------------------------------------------

def bundle_meta(bundle: ModelBundle) -> dict:
    return {
        "arch": bundle.arch.to_dict(),
        "mode": bundle.mode.name,
        "speakers": list(bundle.speakers),
        "gan_domains": list(bundle.gan_domains),
    }


def rebuild_bundle(meta: dict, state_dict: dict, dtype=torch.float64) -> ModelBundle:
    bundle = ModelBundle(
        ArchConfig.from_dict(meta["arch"]),
        Mode.from_name(meta["mode"]),
        meta["speakers"],
        tuple(meta["gan_domains"]),
    )
    bundle.to(dtype)
    try:
        bundle.load_state_dict(state_dict)
    except RuntimeError as exc:
        raise CheckpointError(f"parameter tensors do not match the recorded config: {exc}") from None
    return bundle
