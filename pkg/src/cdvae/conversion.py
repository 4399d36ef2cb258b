"""Voice conversion paths and batch conversion with provenance.

A conversion encodes the source utterance in the input domain, decodes the
encoder mean with the target speaker's code in the output domain, and
denormalizes back to feature scale. Energy, silence mask and frame count pass
through from the source utterance (the output domain's own energy stream for
cross-domain paths); F0 is mapped by log-linear mean-variance matching. The
optional GV post-filter rescales each output dimension's variance toward the
target speaker's training statistics, in the denormalized energy-split view,
over non-silent frames only.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, PathUnavailableError
from .evaluation import gv
from .featureio import (
    DEFAULT_SILENCE_THRESHOLD_DB,
    Domain,
    FeatureSequence,
    convert_f0,
    denormalize,
    fit_f0_stats,
    load_utterance,
    merge_energy,
    normalize,
    save_archive,
    split_energy,
)

GV_FLOOR = 1e-12

PATHS = ("SP_SP", "MCC_MCC", "SP_MCC", "MCC_SP")


def parse_path(name: str) -> tuple:
    try:
        in_dom, out_dom = name.upper().split("_")
        Domain[in_dom], Domain[out_dom]
    except (ValueError, KeyError):
        raise ConfigError(f"conversion path must be one of {PATHS}, got {name!r}") from None
    return in_dom, out_dom


def speaker_f0_stats(manifest, split: str = "train") -> dict:
    """Per-speaker log-F0 statistics from one split (SP view's F0 stream)."""
    out = {}
    for spk in manifest.speaker_ids:
        seqs = [
            load_utterance(manifest, e.id, Domain.SP, silence_threshold_db=None)
            for e in manifest.split(split)
            if e.speaker == spk
        ]
        if seqs:
            out[spk] = fit_f0_stats(seqs)
    return out


def speaker_gv_stats(manifest, domain: str, split: str = "train",
                     silence_threshold_db: float = DEFAULT_SILENCE_THRESHOLD_DB) -> dict:
    """Per-speaker GV of the energy-split view over non-silent train frames."""
    out = {}
    for spk in manifest.speaker_ids:
        seqs = [
            split_energy(load_utterance(manifest, e.id, Domain[domain], silence_threshold_db))
            for e in manifest.split(split)
            if e.speaker == spk
        ]
        if seqs:
            out[spk] = gv(seqs)
    return out


def gv_postfilter(frames: np.ndarray, gv_target: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Variance-match each dimension to gv_target over masked frames.

    Dimensions whose own variance is below 1e-12 pass through unchanged;
    silent frames are never touched.
    """
    frames = np.array(frames, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return frames
    sub = frames[mask]
    mean = sub.mean(axis=0)
    var = sub.var(axis=0)
    scale = np.where(var < GV_FLOOR, 1.0, np.sqrt(np.asarray(gv_target, dtype=np.float64) / np.maximum(var, GV_FLOOR)))
    frames[mask] = scale * (sub - mean) + mean
    return frames


def convert_utterance(
    bundle,
    norm_stats,
    manifest,
    utterance_id: str,
    target_speaker: str,
    path: tuple = ("MCC", "MCC"),
    f0_stats: dict | None = None,
    gv_stats: dict | None = None,
    apply_gv: bool = False,
    silence_threshold_db: float = DEFAULT_SILENCE_THRESHOLD_DB,
) -> FeatureSequence:
    """Convert one utterance to the target speaker along (in_domain, out_domain)."""
    in_dom, out_dom = path
    for dom in (in_dom, out_dom):
        if dom not in bundle.mode.domains:
            raise PathUnavailableError(
                f"path {in_dom}->{out_dom} needs domain {dom}, but mode {bundle.mode.name} "
                f"only has {bundle.mode.domains}")
    tgt_idx = bundle.speaker_index(target_speaker)

    src = load_utterance(manifest, utterance_id, Domain[in_dom], silence_threshold_db)
    net_in = normalize(split_energy(src), norm_stats[in_dom])
    dtype = next(bundle.parameters()).dtype
    x = torch.as_tensor(net_in.frames.T[None], dtype=dtype)
    with torch.no_grad():
        mu = bundle.encode(x, in_dom).mu
        y_hat = bundle.decode(mu, torch.tensor([tgt_idx]), out_dom)[0].T.numpy()

    out_split = denormalize(
        FeatureSequence(y_hat, Domain[out_dom], src.energy, src.f0, src.silence_mask,
                        utterance_id, target_speaker),
        norm_stats[out_dom])

    if apply_gv:
        if gv_stats is None or target_speaker not in gv_stats:
            raise ConfigError(f"GV post-filter requested but no GV stats for {target_speaker!r}")
        out_split = out_split.replace(
            frames=gv_postfilter(out_split.frames, gv_stats[target_speaker], out_split.silence_mask))

    # passthrough energy comes from the source utterance's own output-domain view
    carrier = src if in_dom == out_dom else load_utterance(
        manifest, utterance_id, Domain[out_dom], silence_threshold_db)
    carrier_split = split_energy(carrier)

    f0 = src.f0
    if f0_stats is not None:
        src_speaker = manifest.by_id(utterance_id).speaker
        if src_speaker not in f0_stats or target_speaker not in f0_stats:
            raise ConfigError(f"missing F0 stats for {src_speaker!r} or {target_speaker!r}")
        f0 = convert_f0(src.f0, f0_stats[src_speaker], f0_stats[target_speaker])

    merged = merge_energy(out_split.replace(energy=carrier_split.energy), None)
    return merged.replace(
        f0=f0,
        silence_mask=carrier.silence_mask,
        utterance_id=f"{utterance_id}__{target_speaker}",
        speaker_id=target_speaker,
    )


def batch_convert(
    bundle,
    norm_stats,
    manifest,
    pairs,
    out_dir,
    path: tuple = ("MCC", "MCC"),
    apply_gv: bool = False,
    system: str = "",
    split: str = "test",
    silence_threshold_db: float = DEFAULT_SILENCE_THRESHOLD_DB,
) -> dict:
    """Convert every split utterance of each source speaker to each target.

    Writes archives under out_dir/<src>_to_<tgt>/ and a conversion manifest
    with full provenance; returns the manifest dict (with its root attached).
    """
    out_dir = Path(out_dir)
    in_dom, out_dom = path
    f0_stats = speaker_f0_stats(manifest)
    gv_stats = speaker_gv_stats(manifest, out_dom, silence_threshold_db=silence_threshold_db) if apply_gv else None

    entries = []
    for src_spk, tgt_spk in pairs:
        for entry in manifest.split(split):
            if entry.speaker != src_spk:
                continue
            seq = convert_utterance(
                bundle, norm_stats, manifest, entry.id, tgt_spk, path,
                f0_stats, gv_stats, apply_gv, silence_threshold_db)
            rel = f"{src_spk}_to_{tgt_spk}/{seq.utterance_id}.cdvf"
            save_archive(seq, out_dir / rel)
            entries.append({
                "id": seq.utterance_id,
                "source": entry.id,
                "source_speaker": src_spk,
                "target_speaker": tgt_spk,
                "domain": out_dom,
                "split": split,
                "path": {out_dom: rel},
            })
    doc = {
        "system": system or f"{bundle.mode.name}[{in_dom}->{out_dom}]",
        "mode": bundle.mode.name,
        "conversion_path": f"{in_dom}_{out_dom}",
        "gv_postfilter": bool(apply_gv),
        "entries": entries,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    doc["_root"] = str(out_dir)
    return doc
