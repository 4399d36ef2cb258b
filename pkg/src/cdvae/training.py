"""Three-phase trainer: CDVAE, classifier pretraining, adversarial fine-tune.

Phase 1 minimizes the CDVAE objective for encoders, decoders and the speaker
table. Phase 2 trains the speaker classifier on frozen-encoder latents.
Phase 3 alternates per the mode's (critic_iters, gen_iters) schedule:
critic/classifier updates on fresh batches, then encoder/decoder updates with
the adversarial terms composed exactly as the role objectives demand.

Every random draw comes from named substreams of one SeedTree:
batch/{encdec,critic,cls}, sample/{domain}/{encdec,critic,cls}, gp/{domain};
parameter init uses init/{parameter name}. Role updates therefore never share
stream positions, which is what the mode-lattice and role-separation
invariants test. All updates check for non-finite losses and raise
DivergenceError pointing at the last good checkpoint.
"""

from __future__ import annotations

import dataclasses
import logging
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError, ConfigError, DivergenceError, EmptyCorpusError
from .featureio import (
    DEFAULT_SILENCE_THRESHOLD_DB,
    Domain,
    NormalizationStats,
    fit_minmax,
    load_utterance,
    normalize,
    split_energy,
)
from .modes import Mode
from .networks import ArchConfig, ModelBundle, build_bundle, rebuild_bundle, bundle_meta, sample_latent
from .objectives import LossWeights, breakdown_total, cdvae_terms, cls_loss, wgan_critic_objective
from .rng import SeedTree

log = logging.getLogger("cdvae.training")

CHECKPOINT_FORMAT_VERSION = 1


@dataclasses.dataclass
class TrainConfig:
    mode: Mode = Mode.CDVAE_CLS_GAN
    batch_size: int = 16
    learning_rate: float = 1e-4
    adam_betas: tuple = (0.9, 0.999)
    phase1_steps: int = 100000
    phase2_steps: int = 30000
    phase3_steps: int = 10000          # outer cycles of the alternating schedule
    gan_schedule: tuple = (5, 1)       # (critic_iters, gen_iters) without CLS
    clsgan_schedule: tuple = (1, 5)    # with CLS
    weights: LossWeights = dataclasses.field(default_factory=LossWeights)
    gan_domains: tuple = ("MCC",)
    silence_threshold_db: float = DEFAULT_SILENCE_THRESHOLD_DB
    val_interval: int = 200
    checkpoint_interval: int = 0       # steps between last-good checkpoints; 0 = off
    dtype: str = "float64"
    term_weights: dict | None = None   # testing affordance: rescales cdvae terms

    def torch_dtype(self):
        try:
            return {"float64": torch.float64, "float32": torch.float32}[self.dtype]
        except KeyError:
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}") from None

    @property
    def phase3_schedule(self) -> tuple:
        return self.clsgan_schedule if self.mode.has_cls else self.gan_schedule

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["mode"] = self.mode.name
        doc["weights"] = dataclasses.asdict(self.weights)
        doc["adam_betas"] = list(self.adam_betas)
        doc["gan_schedule"] = list(self.gan_schedule)
        doc["clsgan_schedule"] = list(self.clsgan_schedule)
        doc["gan_domains"] = list(self.gan_domains)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        doc["mode"] = Mode.from_name(doc.get("mode", "CDVAE_CLS_GAN"))
        doc["weights"] = LossWeights(**doc.get("weights", {}))
        for key in ("adam_betas", "gan_schedule", "clsgan_schedule", "gan_domains"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return cls(**doc)


@dataclasses.dataclass
class TrainState:
    bundle: ModelBundle
    optimizers: dict
    tree: SeedTree
    norm_stats: dict                  # domain name -> NormalizationStats
    counters: dict = dataclasses.field(
        default_factory=lambda: {"phase1": 0, "phase2": 0, "phase3": 0, "global": 0})
    phase: int = 0
    loss_log: list = dataclasses.field(default_factory=list)
    phase2_accuracy: float | None = None
    last_good_checkpoint: str | None = None


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------

def prepare_training_data(manifest, mode: Mode, silence_threshold_db=DEFAULT_SILENCE_THRESHOLD_DB):
    """Load, energy-split and min-max normalize every utterance.

    Normalization stats are fit on the train split only. Returns
    ({"train": [...], "val": [...], "test": [...]}, stats) where each item is
    {"id", "speaker", "speaker_idx", "frames": {domain: [T, D] float64},
    "silence": [T] bool}.
    """
    domains = mode.domains
    speakers = manifest.speaker_ids
    raw = {}
    for entry in manifest.utterances:
        views = {}
        for dom in domains:
            seq = load_utterance(manifest, entry.id, Domain[dom], silence_threshold_db)
            views[dom] = split_energy(seq)
        raw[entry.id] = views

    train_entries = manifest.split("train")
    if not train_entries:
        raise EmptyCorpusError("manifest has no train utterances")
    stats = {
        dom: fit_minmax([raw[e.id][dom] for e in train_entries], Domain[dom])
        for dom in domains
    }

    data = {"train": [], "val": [], "test": []}
    for entry in manifest.utterances:
        frames = {}
        for dom in domains:
            frames[dom] = normalize(raw[entry.id][dom], stats[dom]).frames
        data.setdefault(entry.split, []).append({
            "id": entry.id,
            "speaker": entry.speaker,
            "speaker_idx": speakers.index(entry.speaker),
            "frames": frames,
            "silence": raw[entry.id][domains[0]].silence_mask,
        })
    return data, stats


def _collate(items, domains, dtype):
    b = len(items)
    t_max = max(item["frames"][domains[0]].shape[0] for item in items)
    x = {}
    for dom in domains:
        d = items[0]["frames"][dom].shape[1]
        buf = torch.zeros(b, d, t_max, dtype=dtype)
        for i, item in enumerate(items):
            f = item["frames"][dom]
            buf[i, :, : f.shape[0]] = torch.as_tensor(f.T, dtype=dtype)
        x[dom] = buf
    mask = torch.zeros(b, t_max, dtype=dtype)
    for i, item in enumerate(items):
        mask[i, : item["frames"][domains[0]].shape[0]] = 1.0
    spk = torch.as_tensor([item["speaker_idx"] for item in items], dtype=torch.long)
    return x, mask, spk


def _draw_batch(data_list, batch_size, stream):
    idx = stream.integers(0, len(data_list), size=batch_size)
    return [data_list[int(i)] for i in idx]


def _noise(tree: SeedTree, role: str, domains, x, d_latent: int, dtype):
    """Reparameterization draws shaped like the latents [B, d_latent, T]."""
    out = {}
    for dom in domains:
        b, _, t = x[dom].shape
        eps = tree.stream("sample", dom, role).standard_normal(size=(b, d_latent, t))
        out[dom] = torch.as_tensor(eps, dtype=dtype)
    return out


# ---------------------------------------------------------------------------
# state setup
# ---------------------------------------------------------------------------

def init_state(arch: ArchConfig, config: TrainConfig, speakers, norm_stats, seed: int) -> TrainState:
    tree = SeedTree(seed)
    bundle = build_bundle(arch, config.mode, speakers, config.gan_domains, tree, config.torch_dtype())
    return TrainState(bundle=bundle, optimizers=_make_optimizers(bundle, config), tree=tree,
                      norm_stats=dict(norm_stats))


def _make_optimizers(bundle: ModelBundle, config: TrainConfig) -> dict:
    opts = {}
    for role, params in bundle.role_parameters().items():
        if params:
            opts[role] = torch.optim.Adam(params, lr=config.learning_rate, betas=config.adam_betas)
    return opts


def _check_finite(value: torch.Tensor, what: str, state: TrainState):
    if not torch.isfinite(value).all():
        raise DivergenceError(
            f"non-finite {what} at global step {state.counters['global']}",
            state.last_good_checkpoint)


def _record(state: TrainState, phase: int, update: str, fields: dict):
    rec = {"global_step": state.counters["global"], "phase": phase, "update": update}
    rec.update({k: float(v.detach() if torch.is_tensor(v) else v) for k, v in fields.items()})
    state.loss_log.append(rec)
    log.debug("%s", rec)


def _maybe_checkpoint(state, config, checkpoint_path):
    if checkpoint_path and config.checkpoint_interval > 0:
        if state.counters["global"] % config.checkpoint_interval == 0:
            checkpoint(state, config, checkpoint_path)
            state.last_good_checkpoint = str(checkpoint_path)


# ---------------------------------------------------------------------------
# updates
# ---------------------------------------------------------------------------

def _encdec_update(state: TrainState, data, config: TrainConfig, phase: int):
    bundle, tree = state.bundle, state.tree
    dtype = config.torch_dtype()
    domains = bundle.mode.domains
    items = _draw_batch(data["train"], config.batch_size, tree.stream("batch", "encdec"))
    x, mask, spk = _collate(items, domains, dtype)
    noise = _noise(tree, "encdec", domains, x, bundle.arch.d_latent, dtype)

    terms, aux = cdvae_terms(bundle, x, spk, mask, noise, config.term_weights)
    enc_obj = terms["cdvae_total"]
    dec_obj = terms["cdvae_total"]
    fields = {k: v for k, v in terms.items() if k != "cdvae_total"}

    adversarial = phase == 3
    if adversarial and bundle.mode.has_gan:
        w_parts = []
        for dom in bundle.gan_domains:
            w_parts.append(bundle.discriminate(x[dom], dom, mask).mean()
                           - bundle.discriminate(aux["recon"][(dom, dom)], dom, mask).mean())
        wgan_gen = sum(w_parts) / len(w_parts)
        enc_obj = enc_obj + config.weights.alpha * wgan_gen
        dec_obj = dec_obj + config.weights.alpha * wgan_gen
        fields["wgan"] = wgan_gen
    if adversarial and bundle.mode.has_cls:
        ce_parts = [cls_loss(torch.softmax(bundle.classify(aux["z"][dom]), dim=1), spk, mask)
                    for dom in domains]
        ce = sum(ce_parts) / len(ce_parts)
        enc_obj = enc_obj - config.weights.lam * ce
        fields["cls"] = ce

    _check_finite(enc_obj, "encoder objective", state)
    _check_finite(dec_obj, "decoder objective", state)

    theta = bundle.theta_params()
    phi = bundle.phi_params()
    theta_grads = torch.autograd.grad(enc_obj, theta, retain_graph=True, allow_unused=True)
    phi_grads = torch.autograd.grad(dec_obj, phi, allow_unused=True)
    for p, g in zip(theta, theta_grads):
        p.grad = torch.zeros_like(p) if g is None else g
    for p, g in zip(phi, phi_grads):
        p.grad = torch.zeros_like(p) if g is None else g
    state.optimizers["theta"].step()
    state.optimizers["phi"].step()
    for p in theta + phi:
        p.grad = None

    scalars = {k: float(v.detach() if torch.is_tensor(v) else v)
               for k, v in {**terms, **fields}.items()}
    fields["total"] = breakdown_total(scalars, config.weights, bundle.mode)
    state.counters["global"] += 1
    _record(state, phase, "encdec", fields)


def _critic_update(state: TrainState, data, config: TrainConfig):
    bundle, tree = state.bundle, state.tree
    dtype = config.torch_dtype()
    domains = bundle.mode.domains
    items = _draw_batch(data["train"], config.batch_size, tree.stream("batch", "critic"))
    x, mask, spk = _collate(items, domains, dtype)
    with torch.no_grad():
        noise = _noise(tree, "critic", domains, x, bundle.arch.d_latent, dtype)
        fakes = {}
        for dom in bundle.gan_domains:
            lat = bundle.encode(x[dom], dom)
            fakes[dom] = bundle.decode(sample_latent(lat, noise[dom]), spk, dom)

    objs, parts_log = [], {}
    for dom in bundle.gan_domains:
        u = torch.as_tensor(tree.stream("gp", dom).uniform(size=x[dom].shape[0]), dtype=dtype)
        obj, parts = wgan_critic_objective(
            lambda inp, m, _dom=dom: bundle.discriminate(inp, _dom, m),
            x[dom], fakes[dom], u, config.weights.gp_coeff, mask)
        objs.append(obj)
        parts_log[f"w_{dom}"] = parts["w"]
        parts_log[f"gp_{dom}"] = parts["gp"]
        parts_log[f"grad_norm_{dom}"] = parts["grad_norm"]
    loss = -(sum(objs) / len(objs))
    _check_finite(loss, "critic loss", state)

    opt = state.optimizers["psi"]
    opt.zero_grad()
    loss.backward()
    opt.step()
    opt.zero_grad()
    state.counters["global"] += 1
    _record(state, 3, "critic", {"critic_loss": loss, **parts_log})


def _classifier_update(state: TrainState, data, config: TrainConfig, phase: int):
    """One classifier step on frozen-encoder latents.

    Phase 2 trains on extracted mean latents (the codes the frozen encoder
    assigns, matching how the classifier is evaluated); phase 3 trains on the
    sampled posterior, the same latents the encoder update plays against.
    """
    bundle, tree = state.bundle, state.tree
    dtype = config.torch_dtype()
    domains = bundle.mode.domains
    items = _draw_batch(data["train"], config.batch_size, tree.stream("batch", "cls"))
    x, mask, spk = _collate(items, domains, dtype)
    with torch.no_grad():
        noise = _noise(tree, "cls", domains, x, bundle.arch.d_latent, dtype)
        zs = {dom: sample_latent(bundle.encode(x[dom], dom), noise[dom] if phase == 3 else None)
              for dom in domains}
    ce_parts = [cls_loss(torch.softmax(bundle.classify(zs[dom].detach()), dim=1), spk, mask)
                for dom in domains]
    loss = sum(ce_parts) / len(ce_parts)
    _check_finite(loss, "classifier loss", state)

    opt = state.optimizers["cls"]
    opt.zero_grad()
    loss.backward()
    opt.step()
    opt.zero_grad()
    state.counters["global"] += 1
    _record(state, phase, "cls", {"cls_loss": loss})


def _validate(state: TrainState, data, config: TrainConfig, phase: int):
    if not data.get("val"):
        return
    bundle = state.bundle
    dtype = config.torch_dtype()
    domains = bundle.mode.domains
    sums, count = {}, 0
    with torch.no_grad():
        for start in range(0, len(data["val"]), config.batch_size):
            items = data["val"][start : start + config.batch_size]
            x, mask, spk = _collate(items, domains, dtype)
            terms, _ = cdvae_terms(bundle, x, spk, mask, None, config.term_weights)
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + float(v) * len(items)
            count += len(items)
    fields = {f"val_{k}": v / count for k, v in sums.items()}
    _record(state, phase, "val", fields)


# ---------------------------------------------------------------------------
# phases
# ---------------------------------------------------------------------------

def train_phase1(state: TrainState, data, config: TrainConfig, steps: int | None = None,
                 checkpoint_path=None) -> TrainState:
    """CDVAE training of encoders, decoders and the speaker table."""
    target = config.phase1_steps if steps is None else steps
    state.phase = 1
    while state.counters["phase1"] < target:
        _encdec_update(state, data, config, phase=1)
        state.counters["phase1"] += 1
        if config.val_interval and state.counters["phase1"] % config.val_interval == 0:
            _validate(state, data, config, phase=1)
        _maybe_checkpoint(state, config, checkpoint_path)
    return state


def train_phase2(state: TrainState, data, config: TrainConfig, steps: int | None = None,
                 checkpoint_path=None) -> TrainState:
    """Classifier training on frozen-encoder latents; encoders stay bitwise put."""
    if not state.bundle.mode.has_cls:
        state.phase = 2
        return state
    target = config.phase2_steps if steps is None else steps
    state.phase = 2
    while state.counters["phase2"] < target:
        _classifier_update(state, data, config, phase=2)
        state.counters["phase2"] += 1
        _maybe_checkpoint(state, config, checkpoint_path)
    state.phase2_accuracy = classifier_accuracy(state, data, config, split="val")
    _record(state, 2, "phase2_accuracy", {"accuracy": state.phase2_accuracy})
    return state


def train_phase3(state: TrainState, data, config: TrainConfig, steps: int | None = None,
                 checkpoint_path=None) -> TrainState:
    """Alternating adversarial training per the mode's schedule."""
    mode = state.bundle.mode
    if not (mode.has_gan or mode.has_cls):
        state.phase = 3
        return state
    target = config.phase3_steps if steps is None else steps
    critic_iters, gen_iters = config.phase3_schedule
    state.phase = 3
    while state.counters["phase3"] < target:
        for _ in range(critic_iters):
            if mode.has_gan:
                _critic_update(state, data, config)
            if mode.has_cls:
                _classifier_update(state, data, config, phase=3)
        for _ in range(gen_iters):
            _encdec_update(state, data, config, phase=3)
        state.counters["phase3"] += 1
        if config.val_interval and state.counters["phase3"] % config.val_interval == 0:
            _validate(state, data, config, phase=3)
        _maybe_checkpoint(state, config, checkpoint_path)
    return state


def train(state: TrainState, data, config: TrainConfig, checkpoint_path=None) -> TrainState:
    """Run every phase the mode calls for, honoring already-recorded progress."""
    phases = state.bundle.mode.phases
    if 1 in phases:
        train_phase1(state, data, config, checkpoint_path=checkpoint_path)
    if 2 in phases:
        train_phase2(state, data, config, checkpoint_path=checkpoint_path)
    if 3 in phases:
        train_phase3(state, data, config, checkpoint_path=checkpoint_path)
    if checkpoint_path:
        checkpoint(state, config, checkpoint_path)
        state.last_good_checkpoint = str(checkpoint_path)
    return state


# ---------------------------------------------------------------------------
# diagnostics used by evaluation and the acceptance gate
# ---------------------------------------------------------------------------

def latent_frames(bundle: ModelBundle, items, domain: str, nonsilent_only: bool = True):
    """Stack per-frame mean latents [N, d_latent] with speaker labels [N]."""
    xs, ys = [], []
    dtype = next(bundle.parameters()).dtype
    with torch.no_grad():
        for item in items:
            f = torch.as_tensor(item["frames"][domain].T[None], dtype=dtype)
            mu = bundle.encode(f, domain).mu[0].T.numpy()  # [T, d_latent]
            keep = item["silence"] if nonsilent_only else np.ones(len(mu), dtype=bool)
            xs.append(mu[keep])
            ys.append(np.full(int(keep.sum()), item["speaker_idx"], dtype=np.int64))
    return np.concatenate(xs), np.concatenate(ys)


def classifier_accuracy(state: TrainState, data, config: TrainConfig, split: str = "val") -> float:
    """Frame accuracy of the bundle's own classifier on mean latents."""
    bundle = state.bundle
    items = data.get(split) or data["train"]
    hits, total = 0, 0
    dtype = config.torch_dtype()
    with torch.no_grad():
        for item in items:
            for dom in bundle.mode.domains:
                f = torch.as_tensor(item["frames"][dom].T[None], dtype=dtype)
                mu = bundle.encode(f, dom).mu
                pred = bundle.classify(mu)[0].argmax(dim=0).numpy()
                keep = item["silence"]
                hits += int((pred[keep] == item["speaker_idx"]).sum())
                total += int(keep.sum())
    return hits / max(total, 1)


def critic_gradient_health(state: TrainState, data, config: TrainConfig, n_batches: int = 8) -> dict:
    """Mean interpolate gradient norm per gan domain over fresh batches."""
    bundle, tree = state.bundle, state.tree
    dtype = config.torch_dtype()
    domains = bundle.mode.domains
    sums = {dom: 0.0 for dom in bundle.gan_domains}
    for b in range(n_batches):
        stream = tree.fresh("gp-health", b)
        items = _draw_batch(data["train"], config.batch_size, stream)
        x, mask, spk = _collate(items, domains, dtype)
        with torch.no_grad():
            fakes = {dom: bundle.decode(bundle.encode(x[dom], dom).mu, spk, dom)
                     for dom in bundle.gan_domains}
        for dom in bundle.gan_domains:
            u = torch.as_tensor(stream.uniform(size=x[dom].shape[0]), dtype=dtype)
            _, parts = wgan_critic_objective(
                lambda inp, m, _dom=dom: bundle.discriminate(inp, _dom, m),
                x[dom], fakes[dom], u, config.weights.gp_coeff, mask)
            sums[dom] += float(parts["grad_norm"].detach())
    return {dom: s / n_batches for dom, s in sums.items()}


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def checkpoint(state: TrainState, config: TrainConfig, path) -> None:
    """Versioned container: config, parameters, stats, counters, moments, RNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "bundle": bundle_meta(state.bundle),
        "state_dict": {k: v.detach().clone() for k, v in state.bundle.state_dict().items()},
        "norm_stats": {
            dom: {"minimum": s.minimum, "maximum": s.maximum, "domain": s.domain.name}
            for dom, s in state.norm_stats.items()
        },
        "optimizers": {role: opt.state_dict() for role, opt in state.optimizers.items()},
        "rng": state.tree.state_dict(),
        "counters": dict(state.counters),
        "phase": state.phase,
        "loss_log": list(state.loss_log),
        "phase2_accuracy": state.phase2_accuracy,
        "train_config": config.to_dict(),
    }
    torch.save(doc, path)


def restore(path, config: TrainConfig | None = None, expect_arch: ArchConfig | None = None) -> tuple:
    """Rebuild (state, config) from a checkpoint file.

    Raises CheckpointError on version mismatch, on a container that does not
    parse, or when expect_arch / config disagree with what was saved. A
    missing file raises FileNotFoundError untouched.
    """
    path = Path(path)
    try:
        doc = torch.load(path, weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint container: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format version "
                              f"{doc.get('format_version') if isinstance(doc, dict) else '<none>'}")

    saved_config = TrainConfig.from_dict(doc["train_config"])
    if config is not None and config.to_dict() != saved_config.to_dict():
        raise CheckpointError(f"{path}: checkpoint was written under a different train config")
    config = saved_config

    if expect_arch is not None and expect_arch.to_dict() != doc["bundle"]["arch"]:
        raise CheckpointError(f"{path}: checkpoint arch does not match the expected arch")

    bundle = rebuild_bundle(doc["bundle"], doc["state_dict"], config.torch_dtype())
    optimizers = _make_optimizers(bundle, config)
    for role, opt in optimizers.items():
        opt.load_state_dict(doc["optimizers"][role])
    norm_stats = {
        dom: NormalizationStats(Domain[v["domain"]], v["minimum"], v["maximum"])
        for dom, v in doc["norm_stats"].items()
    }
    state = TrainState(
        bundle=bundle,
        optimizers=optimizers,
        tree=SeedTree.from_state_dict(doc["rng"]),
        norm_stats=norm_stats,
        counters=dict(doc["counters"]),
        phase=doc["phase"],
        loss_log=list(doc["loss_log"]),
        phase2_accuracy=doc.get("phase2_accuracy"),
        last_good_checkpoint=str(path),
    )
    return state, config
