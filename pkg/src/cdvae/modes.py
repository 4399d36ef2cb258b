"""Training/system modes and what each one switches on.

The lattice is VAE < CDVAE < {CDVAE_GAN, CDVAE_CLS} < CDVAE_CLS_GAN: every
smaller mode is the larger one with terms zeroed out (and, for VAE, the MCC
branch absent entirely).
"""

from __future__ import annotations

import enum


class Mode(enum.Enum):
    VAE = "VAE"
    CDVAE = "CDVAE"
    CDVAE_GAN = "CDVAE_GAN"
    CDVAE_CLS = "CDVAE_CLS"
    CDVAE_CLS_GAN = "CDVAE_CLS_GAN"

    @classmethod
    def from_name(cls, name: str) -> "Mode":
        try:
            return cls[name.upper()]
        except KeyError:
            from .errors import ConfigError

            raise ConfigError(f"unknown mode {name!r}; choose from {[m.name for m in cls]}") from None

    @property
    def domains(self) -> tuple:
        # the plain VAE is the single-domain (SP) baseline
        return ("SP",) if self is Mode.VAE else ("SP", "MCC")

    @property
    def has_gan(self) -> bool:
        return self in (Mode.CDVAE_GAN, Mode.CDVAE_CLS_GAN)

    @property
    def has_cls(self) -> bool:
        return self in (Mode.CDVAE_CLS, Mode.CDVAE_CLS_GAN)

    @property
    def phases(self) -> tuple:
        if self in (Mode.VAE, Mode.CDVAE):
            return (1,)
        if self is Mode.CDVAE_GAN:
            return (1, 3)
        return (1, 2, 3)
