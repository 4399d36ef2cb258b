"""Objective evaluation: DTW, MCD, GV, MS, MSD, DEM and report assembly.

Conventions shared by all metrics: silence is removed per sequence before
alignment (each side drops its own silent frames); DTW allows steps right,
down and diagonal with Euclidean local cost, accumulates the local cost of
every visited cell including (0, 0), and breaks ties preferring the diagonal
step, then advancing the first sequence; MCC metrics operate on energy-split
frames (the 0th coefficient never participates).
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from pathlib import Path

import numpy as np
import torch

from .errors import (
    ConfigError,
    DomainMismatchError,
    EmptySequenceError,
    NoFramesError,
    NotParallelError,
    ShapeError,
    TooShortError,
)
from .featureio import (
    DEFAULT_SILENCE_THRESHOLD_DB,
    Domain,
    FeatureSequence,
    detect_silence,
    load_archive,
    load_utterance,
    normalize,
    split_energy,
)

log = logging.getLogger("cdvae.evaluation")

MCD_CONST = 10.0 / math.log(10.0) * math.sqrt(2.0)  # ~6.1419 dB for a unit diff
MS_POWER_FLOOR = 1e-10
GV_EPS = 1e-12


def take_nonsilent(seq: FeatureSequence) -> np.ndarray:
    """Frames surviving the silence mask as a float64 array."""
    if seq.n_frames == 0:
        raise EmptySequenceError(f"{seq.utterance_id}: empty sequence")
    kept = seq.frames[seq.silence_mask].astype(np.float64)
    if kept.shape[0] == 0:
        raise NoFramesError(f"{seq.utterance_id}: no non-silent frames")
    return kept


# ---------------------------------------------------------------------------
# DTW
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class AlignmentPath:
    pairs: list    # [(i, j)] from (0, 0) to (Ta-1, Tb-1)
    cost: float    # summed local cost over visited cells


def dtw_align(a: np.ndarray, b: np.ndarray) -> AlignmentPath:
    """Boundary-complete DTW between frame matrices [Ta, D] and [Tb, D]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"dtw_align expects 2-D frame matrices, got {a.shape} and {b.shape}")
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise EmptySequenceError("dtw_align needs at least one frame on each side")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"frame dims differ: {a.shape[1]} vs {b.shape[1]}")
    ta, tb = a.shape[0], b.shape[0]
    # local Euclidean distances
    diff = a[:, None, :] - b[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=2))

    acc = np.full((ta, tb), np.inf)
    back = np.zeros((ta, tb), dtype=np.int8)  # 0 diag, 1 up (i-1,j), 2 left (i,j-1)
    acc[0, 0] = dist[0, 0]
    for j in range(1, tb):
        acc[0, j] = acc[0, j - 1] + dist[0, j]
        back[0, j] = 2
    for i in range(1, ta):
        acc[i, 0] = acc[i - 1, 0] + dist[i, 0]
        back[i, 0] = 1
        row = acc[i]
        prev = acc[i - 1]
        for j in range(1, tb):
            best = prev[j - 1]
            move = 0
            if prev[j] < best:
                best = prev[j]
                move = 1
            if row[j - 1] < best:
                best = row[j - 1]
                move = 2
            row[j] = best + dist[i, j]
            back[i, j] = move

    pairs = [(ta - 1, tb - 1)]
    i, j = ta - 1, tb - 1
    while (i, j) != (0, 0):
        move = back[i, j]
        if move == 0:
            i, j = i - 1, j - 1
        elif move == 1:
            i -= 1
        else:
            j -= 1
        pairs.append((i, j))
    pairs.reverse()
    return AlignmentPath(pairs=pairs, cost=float(acc[ta - 1, tb - 1]))


# ---------------------------------------------------------------------------
# spectral metrics
# ---------------------------------------------------------------------------

def _check_mcc(seq: FeatureSequence, who: str):
    if seq.domain != Domain.MCC:
        raise DomainMismatchError(f"{who} must be MCC-domain, got {seq.domain.name}")


def mcd(converted: FeatureSequence, target: FeatureSequence) -> float:
    """Mel-cepstral distortion in dB over DTW-aligned non-silent frames.

    Both inputs are energy-split MCC sequences; every remaining dimension
    participates (the energy coefficient is already gone).
    """
    _check_mcc(converted, "converted")
    _check_mcc(target, "target")
    c = take_nonsilent(converted)
    t = take_nonsilent(target)
    path = dtw_align(c, t)
    total = 0.0
    for i, j in path.pairs:
        total += MCD_CONST * math.sqrt(((c[i] - t[j]) ** 2).sum())
    return total / len(path.pairs)


def gv(sequences) -> np.ndarray:
    """Per-dimension population variance pooled over all non-silent frames."""
    frames = [take_nonsilent(seq) for seq in sequences]
    if not frames:
        raise EmptySequenceError("gv needs at least one sequence")
    stacked = np.vstack(frames)
    return stacked.var(axis=0)


def next_pow2(n: int) -> int:
    return 1 << max(0, (int(n) - 1).bit_length())


def ms_per_dim(frames: np.ndarray, fft_len: int) -> np.ndarray:
    """Log modulation power spectrum per dimension: [D, fft_len // 2 + 1].

    One transform over the whole mean-removed, zero-padded trajectory; the
    power spectrum is floored at 1e-10 before the log, so a constant
    trajectory sits at exactly -10 in every bin.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2:
        raise ShapeError(f"ms expects [T, D], got {frames.shape}")
    t = frames.shape[0]
    if t < 2:
        raise TooShortError(f"modulation spectrum needs T >= 2, got {t}")
    if fft_len < t:
        raise ConfigError(f"fft_len {fft_len} < T {t}")
    centered = frames - frames.mean(axis=0, keepdims=True)
    spec = np.fft.rfft(centered, n=fft_len, axis=0)
    power = np.maximum(np.abs(spec) ** 2, MS_POWER_FLOOR)
    return np.log10(power).T


def ms(frames: np.ndarray, fft_len: int) -> np.ndarray:
    """Modulation spectrum curve averaged over dimensions: [fft_len // 2 + 1]."""
    return ms_per_dim(frames, fft_len).mean(axis=0)


def msd(converted: FeatureSequence, target: FeatureSequence, fft_len: int | None = None) -> float:
    """RMS difference between per-dimension MS curves, averaged over dims.

    Sequences are masked, DTW-aligned (so both trajectories have the warped
    common length), transformed, then compared bin-wise per dimension.
    """
    _check_mcc(converted, "converted")
    _check_mcc(target, "target")
    c = take_nonsilent(converted)
    t = take_nonsilent(target)
    path = dtw_align(c, t)
    cw = np.stack([c[i] for i, _ in path.pairs])
    tw = np.stack([t[j] for _, j in path.pairs])
    if fft_len is None:
        fft_len = next_pow2(len(path.pairs))
    ms_c = ms_per_dim(cw, fft_len)
    ms_t = ms_per_dim(tw, fft_len)
    per_dim = np.sqrt(((ms_t - ms_c) ** 2).mean(axis=1))
    return float(per_dim.mean())


# ---------------------------------------------------------------------------
# latent-space evaluation
# ---------------------------------------------------------------------------

def _mean_latents(bundle, norm_stats, seq: FeatureSequence, domain: str) -> np.ndarray:
    net_view = split_energy(seq)
    normed = normalize(net_view, norm_stats[domain])
    dtype = next(bundle.parameters()).dtype
    x = torch.as_tensor(normed.frames.T[None], dtype=dtype)
    with torch.no_grad():
        mu = bundle.encode(x, domain).mu[0].T.numpy()
    return mu[seq.silence_mask]


def assert_parallel(manifest, utt_a: str, utt_b: str) -> str:
    """Return the parallel group id shared by the two utterances or raise."""
    for cid, utts in manifest.parallel_groups.items():
        if utt_a in utts and utt_b in utts:
            return cid
    raise NotParallelError(f"{utt_a!r} and {utt_b!r} share no parallel group")


def dem(bundle, norm_stats, seq_a: FeatureSequence, seq_b: FeatureSequence, domain: str) -> float:
    """Mean cosine similarity of DTW-aligned same-domain latent sequences.

    Latents are encoder means over whole utterances; silent frames are
    dropped before alignment. Zero-norm latent frames contribute similarity 0
    but are counted; their occurrence is logged.
    """
    za = _mean_latents(bundle, norm_stats, seq_a, domain)
    zb = _mean_latents(bundle, norm_stats, seq_b, domain)
    if za.shape[0] == 0 or zb.shape[0] == 0:
        raise NoFramesError("dem: no non-silent frames on one side")
    path = dtw_align(za, zb)
    total = 0.0
    zero_norm = 0
    for i, j in path.pairs:
        na = np.linalg.norm(za[i])
        nb = np.linalg.norm(zb[j])
        if na == 0.0 or nb == 0.0:
            zero_norm += 1
            continue
        total += float(za[i] @ zb[j]) / (na * nb)
    if zero_norm:
        log.info("dem: %d zero-norm latent frame pairs contributed similarity 0", zero_norm)
    return total / len(path.pairs)


# ---------------------------------------------------------------------------
# independent speaker probe (evaluation plumbing)
# ---------------------------------------------------------------------------

def fit_speaker_probe(x: np.ndarray, y: np.ndarray, seed: int = 0):
    """Deterministic multinomial logistic-regression probe on frame features."""
    from sklearn.linear_model import LogisticRegression

    probe = LogisticRegression(max_iter=1000, C=10.0, random_state=seed)
    probe.fit(x, y)
    return probe


def probe_accuracy(probe, x: np.ndarray, y: np.ndarray) -> float:
    return float((probe.predict(x) == np.asarray(y)).mean())


# ---------------------------------------------------------------------------
# report assembly
# ---------------------------------------------------------------------------

def load_conversion_manifest(path) -> dict:
    path = Path(path)
    doc = json.loads(path.read_text())
    doc["_root"] = str(path.parent)
    return doc


def _pair_class(genders: dict, src: str, tgt: str) -> str:
    gs = genders.get(src, {}).get("gender")
    gt = genders.get(tgt, {}).get("gender")
    if gs in ("F", "M") and gt in ("F", "M"):
        return f"{gs}-{gt}"
    return "?-?"


def report(
    corpus_manifest,
    conversion_manifest: dict,
    bundle=None,
    norm_stats=None,
    metrics=("mcd", "msd", "gv", "dem"),
    silence_threshold_db: float = DEFAULT_SILENCE_THRESHOLD_DB,
    split: str = "test",
) -> dict:
    """Aggregate metrics per conversion pair, per pair class, and overall.

    MCD/MSD/GV compare converted archives against the target speaker's real
    parallel utterances; DEM runs on the corpus's real parallel pairs and
    needs bundle + norm_stats. Unmatched conversions are listed, not fatal.
    All averages are plain arithmetic means over their components.
    """
    metrics = tuple(metrics)
    entries = conversion_manifest.get("entries", [])
    root = Path(conversion_manifest.get("_root", "."))
    out_domain = None

    content_of = {}
    for cid, utts in corpus_manifest.parallel_groups.items():
        for u in utts:
            content_of[u] = cid
    utt_by_speaker_content = {}
    for e in corpus_manifest.utterances:
        utt_by_speaker_content[(e.speaker, content_of.get(e.id))] = e.id

    pair_data = {}
    unmatched = []
    for ce in entries:
        src, tgt = ce["source_speaker"], ce["target_speaker"]
        domain = ce["domain"]
        out_domain = domain
        content = content_of.get(ce["source"])
        ref_id = utt_by_speaker_content.get((tgt, content))
        if ref_id is None:
            unmatched.append(ce["id"])
            continue
        conv_path = root / ce["path"][domain]
        pair_data.setdefault((src, tgt), []).append((conv_path, ref_id, domain))

    fft_len = None
    if "msd" in metrics and pair_data:
        longest = 0
        for plist in pair_data.values():
            for conv_path, ref_id, domain in plist:
                longest = max(longest, load_archive(conv_path).n_frames)
        fft_len = next_pow2(longest)

    pairs_out = {}
    for (src, tgt), plist in sorted(pair_data.items()):
        vals = {}
        mcds, msds = [], []
        conv_seqs, ref_seqs = [], []
        for conv_path, ref_id, domain in plist:
            conv = load_archive(conv_path)
            conv = conv.replace(silence_mask=detect_silence(conv.energy, silence_threshold_db))
            ref = load_utterance(corpus_manifest, ref_id, Domain[domain], silence_threshold_db)
            conv_split = split_energy(conv)
            ref_split = split_energy(ref)
            conv_seqs.append(conv_split)
            ref_seqs.append(ref_split)
            if domain == "MCC" and "mcd" in metrics:
                mcds.append(mcd(conv_split, ref_split))
            if domain == "MCC" and "msd" in metrics:
                msds.append(msd(conv_split, ref_split, fft_len))
        if mcds:
            vals["mcd"] = float(np.mean(mcds))
        if msds:
            vals["msd"] = float(np.mean(msds))
        if "gv" in metrics and conv_seqs:
            tgt_test = [
                load_utterance(corpus_manifest, e.id, Domain[plist[0][2]], silence_threshold_db)
                for e in corpus_manifest.utterances
                if e.speaker == tgt and e.split == split
            ]
            if tgt_test:
                gv_conv = gv(conv_seqs)
                gv_tgt = gv([split_energy(s) for s in tgt_test])
                vals["gv_ratio"] = float(np.mean(gv_conv / np.maximum(gv_tgt, GV_EPS)))
        if "dem" in metrics and bundle is not None and norm_stats is not None:
            dems = {dom: [] for dom in bundle.mode.domains}
            for cid, utts in corpus_manifest.parallel_groups.items():
                ua = utt_by_speaker_content.get((src, cid))
                ub = utt_by_speaker_content.get((tgt, cid))
                if ua is None or ub is None:
                    continue
                ea, eb = corpus_manifest.by_id(ua), corpus_manifest.by_id(ub)
                if ea.split != split or eb.split != split:
                    continue
                for dom in bundle.mode.domains:
                    sa = load_utterance(corpus_manifest, ua, Domain[dom], silence_threshold_db)
                    sb = load_utterance(corpus_manifest, ub, Domain[dom], silence_threshold_db)
                    dems[dom].append(dem(bundle, norm_stats, sa, sb, dom))
            for dom, dvals in dems.items():
                if dvals:
                    vals[f"dem_{dom}"] = float(np.mean(dvals))
        vals["n_utterances"] = len(plist)
        vals["class"] = _pair_class(corpus_manifest.speakers, src, tgt)
        pairs_out[f"{src}->{tgt}"] = vals

    metric_keys = sorted({k for v in pairs_out.values() for k in v if k not in ("n_utterances", "class")})
    classes = {}
    for pair, vals in pairs_out.items():
        classes.setdefault(vals["class"], []).append(vals)
    classes_out = {
        cname: {
            mk: float(np.mean([v[mk] for v in vlist if mk in v]))
            for mk in metric_keys
            if any(mk in v for v in vlist)
        }
        for cname, vlist in sorted(classes.items())
    }
    overall = {
        mk: float(np.mean([v[mk] for v in pairs_out.values() if mk in v]))
        for mk in metric_keys
        if any(mk in v for v in pairs_out.values())
    }
    return {
        "system": conversion_manifest.get("system", ""),
        "domain": out_domain,
        "pairs": pairs_out,
        "classes": classes_out,
        "overall": overall,
        "unmatched": sorted(unmatched),
    }


def save_report(rep: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")


def format_report_table(reports) -> str:
    """systems x pair-class table, one block per metric, mirroring the usual layout."""
    if isinstance(reports, dict):
        reports = [reports]
    class_names = sorted({c for r in reports for c in r["classes"]})
    metric_keys = sorted({k for r in reports for k in r["overall"]})
    lines = []
    for mk in metric_keys:
        lines.append(f"[{mk}]")
        header = ["system"] + class_names + ["Avg"]
        lines.append("  ".join(f"{h:>12}" for h in header))
        for r in reports:
            cells = [r["system"][:12] or "-"]
            for c in class_names:
                v = r["classes"].get(c, {}).get(mk)
                cells.append(f"{v:.4f}" if v is not None else "-")
            v = r["overall"].get(mk)
            cells.append(f"{v:.4f}" if v is not None else "-")
            lines.append("  ".join(f"{c:>12}" for c in cells))
        lines.append("")
    return "\n".join(lines)
