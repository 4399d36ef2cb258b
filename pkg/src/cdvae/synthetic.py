"""Two-factor synthetic corpus: content trajectories mixed with speaker color.

Each content id owns a canonical channel trajectory; each (speaker, content)
utterance resamples it through a duplication-only timing warp, scales each
channel by the speaker's band gains, shifts it by the speaker's articulation
bias (plus a per-utterance drift), applies the speaker's spectral offset (plus
a per-utterance session ripple), loudness contour and a little texture noise,
and is written in both domain views:

    c   = traj(warp) * gain_s + bias_s + drift_u                    [T x q]
    SP  = exp(g_c B c + offset_s + session_u + loudness + noise)    [T x d_sp]
    MCC = [energy | tanh(gain * log(SP) Q)]                         [T x (d_mcc+1)]

B is a fixed banded content-to-spectrum basis, Q a fixed smooth zero-mean
projection of the log spectrum (a crude cepstrum, so the loudness contour
cancels out of the MCC core), both drawn once per corpus seed. The speaker
offset has a smooth part (which survives the low-pass Q, so MCC frames stay
speaker-separable) and a high-frequency ripple that mostly lives in the SP
view only. Duplication-only
warps cover every canonical frame, so parallel utterances always admit a
zero-cost frame alignment of their underlying content, and the ground-truth
warp can be looked up by regeneration.

Everything is deterministic in (seed, speaker, content): utterance-level
draws come from streams keyed by exactly those names.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .featureio import (
    CorpusManifest,
    Domain,
    FeatureSequence,
    UtteranceEntry,
    save_archive,
    save_manifest,
)
from .rng import SeedTree


@dataclasses.dataclass
class SynthConfig:
    n_speakers: int = 4
    n_contents: int = 24
    d_sp: int = 64
    d_mcc: int = 16
    base_frames: int = 40
    content_channels: int = 6
    content_bands: int = 3
    content_gain: float = 1.0
    speaker_gain_scale: float = 0.25
    content_bias_scale: float = 0.5
    content_drift_scale: float = 0.15
    utterance_filter_scale: float = 0.25
    dup_prob: float = 0.12
    dup_spread: float = 0.0
    noise_scale: float = 0.18
    offset_smooth_scale: float = 0.8
    offset_ripple_scale: float = 1.2
    loudness_wobble: float = 0.3
    edge_dip: float = 14.0
    proj_gain: float = 0.3
    val_contents: int = 3
    test_contents: int = 4

    def __post_init__(self):
        if self.n_speakers < 2 or self.n_contents < 2:
            raise ConfigError("synthetic corpus needs >= 2 speakers and >= 2 contents")
        if self.val_contents + self.test_contents >= self.n_contents:
            raise ConfigError("val_contents + test_contents must leave at least one training content")
        if self.d_sp < 4 or self.d_mcc < 2:
            raise ConfigError("d_sp >= 4 and d_mcc >= 2 required")


def speaker_id(i: int) -> str:
    return f"spk{i:02d}"


def content_id(j: int) -> str:
    return f"c{j:03d}"


def utterance_id(speaker_idx: int, content_idx: int) -> str:
    return f"{speaker_id(speaker_idx)}_{content_id(content_idx)}"


def speaker_gender(i: int) -> str:
    return "F" if i % 2 == 0 else "M"


def _smooth_columns(x: np.ndarray, width: int) -> np.ndarray:
    width = max(3, width)
    kernel = np.ones(width) / width
    out = np.empty_like(x)
    for j in range(x.shape[1]):
        out[:, j] = np.convolve(x[:, j], kernel, mode="same")
    return out


def _global_maps(cfg: SynthConfig, tree: SeedTree):
    """Fixed per-seed content basis B [d_sp x q] and SP->MCC projection Q.

    SP dims are grouped into a few contiguous bands (crude formants). The
    first channel of each band is a full-band carrier: band competition under
    the per-frame unit-sum view turns every dim into a two-level switching
    waveform, which keeps its variance through Min-Max scaling. Remaining
    channels add within-band fine structure at geometrically decaying
    amplitude, giving the content more degrees of freedom than a small latent
    code can carry losslessly.
    """
    g = tree.fresh("global")
    bands = max(1, min(cfg.content_bands, cfg.content_channels))
    edges = np.round(np.linspace(0.0, cfg.d_sp, bands + 1)).astype(int)
    b = np.zeros((cfg.d_sp, cfg.content_channels))
    for j in range(cfg.content_channels):
        lo, hi = edges[j % bands], edges[j % bands + 1]
        rank = j // bands
        if rank == 0:
            profile = np.ones(hi - lo)
        else:
            raw = _smooth_columns(g.normal(size=(hi - lo, 1)), max(2, (hi - lo) // 3))[:, 0]
            profile = raw / np.abs(raw).max()
        b[lo:hi, j] = profile * (0.6**rank)
    texture = _smooth_columns(g.normal(size=b.shape), max(2, cfg.d_sp // 16))
    b = b * (1.0 + 0.1 * texture / np.abs(texture).max(axis=0, keepdims=True))
    kern = np.ones(3) / 3.0
    b = np.apply_along_axis(lambda col: np.convolve(col, kern, mode="same"), 0, b)
    q = g.normal(size=(cfg.d_sp, cfg.d_mcc))
    q = _smooth_columns(q, cfg.d_sp // 8)
    q = q - q.mean(axis=0, keepdims=True)
    q = q / np.linalg.norm(q, axis=0, keepdims=True)
    return b, q


def _parity_signs(n_speakers: int, speaker_idx: int, channels: int, shift: int = 0) -> np.ndarray:
    """Sign pattern over channels from bit parities of the speaker index.

    Channel j takes the parity of speaker_idx & mask, with masks cycling over
    every nonzero subset of the index bits. Any two speakers then disagree on
    a fixed fraction of channels (4 speakers over 3 channels: exactly 2 of 3),
    so no pair collapses together when a single channel idles near zero.
    """
    n_bits = max(1, int(np.ceil(np.log2(max(n_speakers, 2)))))
    n_masks = (1 << n_bits) - 1
    signs = np.empty(channels)
    for j in range(channels):
        mask = ((j + shift) % n_masks) + 1
        signs[j] = 1.0 if bin(speaker_idx & mask).count("1") % 2 == 0 else -1.0
    return signs


def _speaker_params(cfg: SynthConfig, tree: SeedTree, speaker_idx: int):
    g = tree.fresh("speaker", speaker_idx)
    smooth = g.normal(size=cfg.d_sp)
    smooth = np.convolve(smooth, np.ones(9) / 9, mode="same")
    smooth = smooth / np.abs(smooth).max() * cfg.offset_smooth_scale
    rough = g.normal(size=cfg.d_sp)
    ripple = rough - np.convolve(rough, np.ones(9) / 9, mode="same")
    ripple = ripple / np.abs(ripple).max() * cfg.offset_ripple_scale
    base_lf0 = np.log(220.0) if speaker_gender(speaker_idx) == "F" else np.log(120.0)
    f0_mean = base_lf0 + g.normal() * 0.06
    f0_std = 0.12 + g.uniform() * 0.04
    # band gains: each speaker amplifies or damps each content channel by a
    # patterned factor. The gain multiplies the frame-varying content, so the
    # realized channel levels (which any reconstruction code must carry) wear
    # the speaker's magnitude signature on every dwell; a plain content code
    # stays speaker-readable until something trains the encoder to rescale.
    gain_signs = _parity_signs(cfg.n_speakers, speaker_idx, cfg.content_channels)
    band_gain = 1.0 + cfg.speaker_gain_scale * gain_signs * (0.8 + 0.4 * g.uniform(size=cfg.content_channels))
    # articulation bias: shifted channel baselines, with a sign pattern offset
    # from the gain pattern so the two signatures stay distinguishable. The
    # baseline is utterance-constant, so it mostly colors the raw views; the
    # seeded magnitude jitter breaks the symmetry between speakers.
    bias_signs = _parity_signs(cfg.n_speakers, speaker_idx, cfg.content_channels, shift=1)
    content_bias = cfg.content_bias_scale * bias_signs * (1.0 + 0.2 * g.uniform(-1.0, 1.0, size=cfg.content_channels))
    return {
        "offset": smooth + ripple,
        "f0_mean": f0_mean,
        "f0_std": f0_std,
        "band_gain": band_gain,
        "content_bias": content_bias,
    }


def canonical_content(cfg: SynthConfig, seed: int, content_idx: int) -> np.ndarray:
    """Canonical trajectory [T_k x q] shared by all speakers of this content."""
    tree = SeedTree(seed)
    g = tree.fresh("content", content_idx)
    t_k = cfg.base_frames + int(g.integers(0, 7))
    t = np.arange(t_k) / t_k
    traj = np.zeros((t_k, cfg.content_channels))
    for j in range(cfg.content_channels):
        for _ in range(3):
            amp = g.uniform(0.4, 1.0)
            freq = g.uniform(0.6, 2.8)
            phase = g.uniform(0.0, 2.0 * np.pi)
            traj[:, j] += amp * np.sin(2.0 * np.pi * freq * t + phase)
    # squash toward plateaus so each channel dwells at a high or low level
    # instead of wandering; dwell levels survive Min-Max scaling much better
    return 2.0 * np.tanh(0.9 * traj)


def warp_indices(cfg: SynthConfig, seed: int, speaker_idx: int, content_idx: int) -> np.ndarray:
    """Monotone duplication-only index map into the canonical trajectory.

    Every canonical frame appears at least once, so the map is a ground-truth
    alignment that DTW can recover. dup_spread tilts the duplication rate per
    speaker (a speaking-tempo signature that survives any frame-wise code).
    """
    tree = SeedTree(seed)
    t_k = canonical_content(cfg, seed, content_idx).shape[0]
    g = tree.fresh("warp", speaker_idx, content_idx)
    rate = cfg.dup_prob + cfg.dup_spread * (2.0 * speaker_idx / max(cfg.n_speakers - 1, 1) - 1.0)
    dups = g.uniform(size=t_k) < float(np.clip(rate, 0.0, 0.9))
    out = []
    for i in range(t_k):
        out.append(i)
        if dups[i]:
            out.append(i)
    return np.asarray(out, dtype=np.int64)


def build_utterance(cfg: SynthConfig, seed: int, speaker_idx: int, content_idx: int):
    """Deterministically build both views of one utterance.

    Returns (sp_seq, mcc_seq) with raw frames, consistent energy streams and
    all-True silence masks (masks are a loading-time decision).
    """
    tree = SeedTree(seed)
    b, q = _global_maps(cfg, tree)
    spk = _speaker_params(cfg, tree, speaker_idx)
    traj = canonical_content(cfg, seed, content_idx)
    warp = warp_indices(cfg, seed, speaker_idx, content_idx)

    g = tree.fresh("utt", speaker_idx, content_idx)
    # articulation baseline: the speaker's channel bias plus a per-utterance
    # drift in the same channels. The drift keeps the baseline from being a
    # pure speaker-table job, and the bias keeps raw frames linearly
    # speaker-separable even where gains agree.
    drift = g.normal(size=cfg.content_channels) * cfg.content_drift_scale
    content = traj[warp] * spk["band_gain"][None, :] + (spk["content_bias"] + drift)[None, :]
    t_u = content.shape[0]
    tt = np.arange(t_u) / t_u
    loudness = cfg.loudness_wobble * np.sin(2.0 * np.pi * g.uniform(0.4, 1.2) * tt + g.uniform(0, 2 * np.pi))
    n_lo = int(g.integers(2, 4))
    n_hi = int(g.integers(2, 4))
    loudness[:n_lo] -= cfg.edge_dip
    loudness[t_u - n_hi :] -= cfg.edge_dip
    noise = g.normal(size=(t_u, cfg.d_sp)) * cfg.noise_scale
    # session-style filter jitter: a ripple-shaped per-utterance perturbation
    # of the speaker's coloring. The unit-sum view keeps only within-band
    # ripple (smooth filters cancel like loudness does), so ripple is the part
    # a reconstruction code has to carry.
    raw = g.normal(size=cfg.d_sp)
    session = raw - np.convolve(raw, np.ones(9) / 9, mode="same")
    session = session / np.abs(session).max() * cfg.utterance_filter_scale

    log_sp = (
        cfg.content_gain * (content @ b.T)
        + (spk["offset"] + session)[None, :]
        + loudness[:, None]
        + noise
    )
    sp = np.exp(log_sp)
    energy = sp.sum(axis=1)

    mcc_core = np.tanh(cfg.proj_gain * (log_sp @ q))
    mcc = np.hstack([energy[:, None], mcc_core])

    voiced = content[:, 0] > -0.6
    jitter = g.normal(size=t_u) * 0.25
    lf0 = spk["f0_mean"] + spk["f0_std"] * (0.6 * content[:, 1] + jitter)
    f0 = np.where(voiced, np.exp(lf0), 0.0)

    uid = utterance_id(speaker_idx, content_idx)
    sid = speaker_id(speaker_idx)
    mask = np.ones(t_u, dtype=bool)
    sp_seq = FeatureSequence(sp, Domain.SP, energy, f0, mask, uid, sid)
    mcc_seq = FeatureSequence(mcc, Domain.MCC, energy, f0, mask, uid, sid)
    return sp_seq, mcc_seq


def _content_splits(cfg: SynthConfig, seed: int) -> dict:
    order = SeedTree(seed).fresh("splits").permutation(cfg.n_contents)
    split = {}
    for rank, idx in enumerate(order):
        if rank < cfg.test_contents:
            split[int(idx)] = "test"
        elif rank < cfg.test_contents + cfg.val_contents:
            split[int(idx)] = "val"
        else:
            split[int(idx)] = "train"
    return split


def generate_synthetic_corpus(cfg: SynthConfig, seed: int, out_dir) -> CorpusManifest:
    """Write all archives plus manifest.json under out_dir and return the manifest.

    Splits partition contents (not utterances), so every parallel group lives
    entirely inside one split.
    """
    out_dir = Path(out_dir)
    (out_dir / "archives").mkdir(parents=True, exist_ok=True)
    splits = _content_splits(cfg, seed)
    entries = []
    groups = {}
    for content_idx in range(cfg.n_contents):
        cid = content_id(content_idx)
        groups[cid] = []
        for speaker_idx in range(cfg.n_speakers):
            sp_seq, mcc_seq = build_utterance(cfg, seed, speaker_idx, content_idx)
            uid = sp_seq.utterance_id
            rel_sp = f"archives/{uid}.sp.cdvf"
            rel_mcc = f"archives/{uid}.mcc.cdvf"
            save_archive(sp_seq, out_dir / rel_sp)
            save_archive(mcc_seq, out_dir / rel_mcc)
            entries.append(
                UtteranceEntry(uid, sp_seq.speaker_id, {"SP": rel_sp, "MCC": rel_mcc}, splits[content_idx])
            )
            groups[cid].append(uid)
    manifest = CorpusManifest(
        utterances=entries,
        parallel_groups=groups,
        speakers={speaker_id(i): {"gender": speaker_gender(i)} for i in range(cfg.n_speakers)},
        root=out_dir,
    )
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest
