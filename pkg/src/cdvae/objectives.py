"""Loss terms and their composition into per-role objectives.

Sign convention: every function returns a quantity the named role *minimizes*
(the pseudocode's update lines hold verbatim), except wgan_critic_objective
which returns the critic's maximized objective W - gp_coeff * GP; the critic
minimizes its negation. Role composition:

    encoder    minimizes  L_cdvae + alpha * L_wgan - lam * L_cls
    decoder    minimizes  L_cdvae + alpha * L_wgan
    critic     minimizes  -(W - gp_coeff * GP)
    classifier minimizes  L_cls

with L_wgan = E[D(real)] - E[D(reconstruction)]. The classical JS-divergence
GAN objective (log D(real) + log(1 - D(fake)) with a sigmoid critic) is the
textbook alternative here; it is not implemented, the Wasserstein form with a
gradient penalty is what trains.

Reductions: losses are summed over feature dims per frame, averaged over
non-masked frames per utterance, then averaged over the batch. Inputs may be
batched [B, D, T] with mask [B, T], or single sequences [T, D] with mask [T].
"""

from __future__ import annotations

import dataclasses

import torch

from .errors import AlignmentError, IncompleteBreakdownError, ShapeError
from .modes import Mode

_PROB_FLOOR = 1e-12  # caps -log p; keeps the adversarial encoder objective finite


@dataclasses.dataclass
class LossWeights:
    alpha: float = 50.0     # wgan term weight in encoder/decoder objectives
    lam: float = 1000.0     # classifier term weight in the encoder objective
    gp_coeff: float = 10.0  # gradient penalty coefficient


@dataclasses.dataclass
class LossBreakdown:
    """Scalar values of every active term; inactive terms stay None."""

    recon_in: float | None = None
    kld: float | None = None
    recon_cross: float | None = None
    lat_sim: float | None = None
    wgan: float | None = None
    cls: float | None = None
    total: float | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _as_bdt(x: torch.Tensor, name: str):
    if x.ndim == 2:  # [T, D] single sequence
        return x.T.unsqueeze(0)
    if x.ndim == 3:
        return x
    raise ShapeError(f"{name}: expected [T, D] or [B, D, T], got {tuple(x.shape)}")


def _as_bt(mask, batch: int, t: int, device, dtype):
    if mask is None:
        return torch.ones(batch, t, device=device, dtype=dtype)
    mask = torch.as_tensor(mask)
    if mask.ndim == 1:
        mask = mask.unsqueeze(0)
    if mask.shape != (batch, t):
        raise ShapeError(f"mask shape {tuple(mask.shape)} != ({batch}, {t})")
    return mask.to(device=device, dtype=dtype)


def _frame_then_batch_mean(per_frame: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """per_frame, mask: [B, T] -> frame mean per utterance, then batch mean."""
    counts = mask.sum(dim=1)
    if (counts == 0).any():
        raise ShapeError("every utterance in a batch needs at least one unmasked frame")
    return ((per_frame * mask).sum(dim=1) / counts).mean()


def recon_loss(x_hat, x, mask=None) -> torch.Tensor:
    """Mean over unmasked frames of 0.5 * squared error summed over dims."""
    x_hat = _as_bdt(torch.as_tensor(x_hat), "x_hat")
    x = _as_bdt(torch.as_tensor(x), "x")
    if x_hat.shape != x.shape:
        raise AlignmentError(f"x_hat {tuple(x_hat.shape)} vs x {tuple(x.shape)}")
    per_frame = 0.5 * ((x_hat - x) ** 2).sum(dim=1)
    m = _as_bt(mask, x.shape[0], x.shape[2], x.device, x.dtype)
    return _frame_then_batch_mean(per_frame, m)


def kl_loss(mu, log_var, mask=None) -> torch.Tensor:
    """Closed-form KL(q || N(0, I)) averaged over unmasked frames."""
    mu = _as_bdt(torch.as_tensor(mu), "mu")
    log_var = _as_bdt(torch.as_tensor(log_var), "log_var")
    if mu.shape != log_var.shape:
        raise AlignmentError(f"mu {tuple(mu.shape)} vs log_var {tuple(log_var.shape)}")
    per_frame = 0.5 * (mu ** 2 + torch.exp(log_var) - 1.0 - log_var).sum(dim=1)
    m = _as_bt(mask, mu.shape[0], mu.shape[2], mu.device, mu.dtype)
    return _frame_then_batch_mean(per_frame, m)


def latent_sim_loss(mu_a, mu_b, mask=None) -> torch.Tensor:
    """Mean over unmasked frames of the L1 distance between the two means."""
    mu_a = _as_bdt(torch.as_tensor(mu_a), "mu_a")
    mu_b = _as_bdt(torch.as_tensor(mu_b), "mu_b")
    if mu_a.shape != mu_b.shape:
        raise AlignmentError(f"mu_a {tuple(mu_a.shape)} vs mu_b {tuple(mu_b.shape)}")
    per_frame = (mu_a - mu_b).abs().sum(dim=1)
    m = _as_bt(mask, mu_a.shape[0], mu_a.shape[2], mu_a.device, mu_a.dtype)
    return _frame_then_batch_mean(per_frame, m)


def cls_loss(probs, speaker_idx, mask=None) -> torch.Tensor:
    """Mean over unmasked frames of -log p[true speaker].

    probs: [T, S] or [B, S, T], rows/columns summing to 1 over speakers.
    """
    probs = torch.as_tensor(probs)
    if probs.ndim == 2:  # [T, S]
        probs = probs.T.unsqueeze(0)
    elif probs.ndim != 3:
        raise ShapeError(f"probs: expected [T, S] or [B, S, T], got {tuple(probs.shape)}")
    b, s, t = probs.shape
    idx = torch.as_tensor(speaker_idx, dtype=torch.long).reshape(-1)
    if idx.numel() == 1 and b > 1:
        idx = idx.expand(b)
    if idx.numel() != b:
        raise ShapeError(f"speaker_idx: {idx.numel()} labels for batch of {b}")
    if int(idx.min()) < 0 or int(idx.max()) >= s:
        raise ShapeError(f"speaker index out of range [0, {s})")
    picked = probs[torch.arange(b), idx, :]  # [B, T]
    per_frame = -torch.log(picked.clamp_min(_PROB_FLOOR))
    m = _as_bt(mask, b, t, probs.device, probs.dtype)
    return _frame_then_batch_mean(per_frame, m)


def wgan_critic_objective(critic_fn, real, fake, u, gp_coeff: float, mask=None):
    """Critic objective W - gp_coeff * GP with a per-utterance interpolate.

    critic_fn(x, mask) must return one score per utterance [B]. u: [B] draws
    in [0, 1); the interpolate is u * real + (1 - u) * fake. The penalty is
    mean((||grad_x D(x~)||_2 - 1)^2), the norm taken per utterance over the
    whole [D, T] tensor (padded frames included; they are part of the input).

    Returns (objective, parts) with parts carrying the W term, the raw GP and
    the mean interpolate gradient norm as floats-to-be (0-dim tensors).
    """
    real = _as_bdt(torch.as_tensor(real), "real")
    fake = _as_bdt(torch.as_tensor(fake), "fake")
    if real.shape != fake.shape:
        raise AlignmentError(f"real {tuple(real.shape)} vs fake {tuple(fake.shape)}")
    u = torch.as_tensor(u, dtype=real.dtype, device=real.device).reshape(-1)
    if u.numel() != real.shape[0]:
        raise ShapeError(f"u: {u.numel()} draws for batch of {real.shape[0]}")
    m = _as_bt(mask, real.shape[0], real.shape[2], real.device, real.dtype) if mask is not None else None

    w_term = critic_fn(real, m).mean() - critic_fn(fake, m).mean()

    mix = (u[:, None, None] * real + (1.0 - u[:, None, None]) * fake).detach().requires_grad_(True)
    scores = critic_fn(mix, m)
    grads = torch.autograd.grad(scores.sum(), mix, create_graph=True)[0]
    norms = grads.reshape(grads.shape[0], -1).norm(dim=1)
    gp = ((norms - 1.0) ** 2).mean()
    objective = w_term - gp_coeff * gp
    return objective, {"w": w_term, "gp": gp, "grad_norm": norms.mean()}


# ---------------------------------------------------------------------------
# CDVAE composition
# ---------------------------------------------------------------------------

def cdvae_terms(bundle, x: dict, speaker_idx, mask=None, noise: dict | None = None,
                term_weights: dict | None = None):
    """All reconstruction/KL/similarity terms for one batch.

    x: domain name -> [B, D, T]; noise: domain name -> eps tensor or None
    (None decodes the mean). Returns (terms, aux): terms holds 0-dim tensors
    recon_in / kld / recon_cross / lat_sim / cdvae_total (cross and sim only
    when both domains are present); aux holds latents, sampled codes and
    every reconstruction path for reuse by adversarial terms.

    term_weights rescales individual terms inside cdvae_total (testing
    affordance realizing the mode lattice; default all 1).
    """
    from .networks import sample_latent  # local import to avoid a cycle at module load

    domains = list(bundle.mode.domains)
    for dom in domains:
        if dom not in x:
            raise IncompleteBreakdownError(f"mode {bundle.mode.name} needs domain {dom} in the batch")

    lat = {dom: bundle.encode(x[dom], dom) for dom in domains}
    z = {dom: sample_latent(lat[dom], None if noise is None else noise.get(dom)) for dom in domains}
    recon = {}
    for d_in in domains:
        for d_out in domains:
            recon[(d_in, d_out)] = bundle.decode(z[d_in], speaker_idx, d_out)

    recon_in_parts = {d: recon_loss(recon[(d, d)], x[d], mask) for d in domains}
    kld_parts = {d: kl_loss(lat[d].mu, lat[d].log_var, mask) for d in domains}
    terms = {}
    terms["recon_in"] = sum(recon_in_parts.values())
    terms["kld"] = sum(kld_parts.values())
    if len(domains) == 2:
        terms["recon_cross"] = sum(
            recon_loss(recon[(d_in, d_out)], x[d_out], mask)
            for d_in in domains for d_out in domains if d_in != d_out)
        terms["lat_sim"] = latent_sim_loss(lat["SP"].mu, lat["MCC"].mu, mask)

    tw = term_weights or {}

    def weight(name, dom=None):
        # per-domain keys like recon_in_MCC win over the plain term name
        if dom is not None and f"{name}_{dom}" in tw:
            return float(tw[f"{name}_{dom}"])
        return float(tw.get(name, 1.0))

    total = sum(weight("recon_in", d) * v for d, v in recon_in_parts.items())
    total = total + sum(weight("kld", d) * v for d, v in kld_parts.items())
    if len(domains) == 2:
        total = total + weight("recon_cross") * terms["recon_cross"]
        total = total + weight("lat_sim") * terms["lat_sim"]
    terms["cdvae_total"] = total
    aux = {"lat": lat, "z": z, "recon": recon}
    return terms, aux


_ROLE_REQUIRES = {
    "recon_in": lambda m: True,
    "kld": lambda m: True,
    "recon_cross": lambda m: m is not Mode.VAE,
    "lat_sim": lambda m: m is not Mode.VAE,
    "wgan": lambda m: m.has_gan,
    "cls": lambda m: m.has_cls,
}


def total_objective(breakdown: LossBreakdown, weights: LossWeights, mode: Mode) -> dict:
    """Per-role objective values (minimized quantities) from a breakdown.

    Raises IncompleteBreakdownError when a term the mode needs is missing.
    The critic entry is -(W term); its gradient penalty lives inside the
    critic update, not in the breakdown.
    """
    vals = breakdown.to_dict()
    for name, needed in _ROLE_REQUIRES.items():
        if needed(mode) and vals.get(name) is None:
            raise IncompleteBreakdownError(f"mode {mode.name} requires term {name!r}")
    cdvae = vals["recon_in"] + vals["kld"]
    if mode is not Mode.VAE:
        cdvae += vals["recon_cross"] + vals["lat_sim"]
    roles = {}
    enc = dec = cdvae
    if mode.has_gan:
        enc = enc + weights.alpha * vals["wgan"]
        dec = dec + weights.alpha * vals["wgan"]
        roles["critic"] = -vals["wgan"]
    if mode.has_cls:
        enc = enc - weights.lam * vals["cls"]
        roles["classifier"] = vals["cls"]
    roles["encoder"] = enc
    roles["decoder"] = dec
    return roles


def breakdown_total(vals: dict, weights: LossWeights, mode: Mode) -> float:
    """Logged total: cdvae + alpha * wgan + lam * cls over the active terms."""
    total = vals["recon_in"] + vals["kld"]
    if mode is not Mode.VAE:
        total += vals["recon_cross"] + vals["lat_sim"]
    if mode.has_gan and vals.get("wgan") is not None:
        total += weights.alpha * vals["wgan"]
    if mode.has_cls and vals.get("cls") is not None:
        total += weights.lam * vals["cls"]
    return total
