"""Loss terms and the assembled discriminator/generator objectives.

Every term is a pure function of network outputs and sampled codes;
expectations are approximated by minibatch means. Reconstruction terms use
the mean absolute difference (L1 gives sharper images than L2 here).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import torch
from torch.nn import functional as F


class ConfigError(ValueError):
    """Invalid or incomplete configuration; the message lists every violation."""


@dataclass(frozen=True)
class LossWeights:
    lambda_s_rec: float = 10.0
    lambda_cyc: float = 10.0
    lambda_kl: float = 0.1
    lambda_iso: float = 0.1
    lambda_perc: float = 0.0   # 0.1 when the perceptual term is enabled

    def __post_init__(self):
        bad = [f.name for f in fields(self) if getattr(self, f.name) < 0]
        if bad:
            raise ConfigError(f"loss weights must be >= 0: {bad}")


def _same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _l1(a, b):
    _same_shape(a, b)
    return (a - b).abs().mean()


def loss_self_rec(x, x_hat):
    """L1 between an image and its reconstruction from its own codes."""
    return _l1(x, x_hat)


def loss_content_rec(c, c_rec):
    """L1 between a content code and the one re-extracted after translation."""
    return _l1(c, c_rec)


def loss_attr_rec(z, z_rec):
    """L1 between a sampled attribute code and the one re-extracted."""
    return _l1(z, z_rec)


def loss_cycle(x, x_cyc):
    """L1 between an image and its round trip through a foreign domain."""
    return _l1(x, x_cyc)


def loss_iso(z, z_prime, a, a_prime):
    """Isometry penalty: | ||a - a'||_1 - ||z - z'||_1 | averaged over the batch.

    a, a' are the codes re-extracted from images generated with z, z'.
    """
    _same_shape(z, z_prime)
    _same_shape(a, a_prime)
    dz = (z - z_prime).abs().flatten(1).sum(dim=1)
    da = (a - a_prime).abs().flatten(1).sum(dim=1)
    return (da - dz).abs().mean()


def loss_kl(mean, logvar, comp_mean, comp_sigma):
    """Batch mean of KL(posterior || own-domain component).

    ``comp_mean`` and ``comp_sigma`` are per-row (or broadcastable) component
    parameters; ``comp_sigma`` is a per-coordinate standard deviation.
    """
    comp_mean = torch.as_tensor(comp_mean, dtype=mean.dtype, device=mean.device)
    comp_sigma = torch.as_tensor(comp_sigma, dtype=mean.dtype, device=mean.device)
    if torch.any(comp_sigma <= 0):
        raise ValueError("component scale must be positive")
    var = torch.exp(logvar)
    s2 = comp_sigma**2
    per_dim = var / s2 + (comp_mean - mean) ** 2 / s2 - 1.0 + torch.log(s2) - logvar
    return 0.5 * per_dim.sum(dim=1).mean()


def loss_domain(logits, target_bits, mode: str = "categorical"):
    """Domain classification loss.

    categorical: negative log-softmax of the true class (one-hot targets).
    multilabel: mean binary cross-entropy per attribute bit.
    The real-image instance trains only the discriminator, the generated-image
    instance only the generator; callers enforce that by which parameters they
    step, see the training loop.
    """
    target_bits = torch.as_tensor(target_bits, dtype=logits.dtype, device=logits.device)
    _same_shape(logits, target_bits)
    if mode == "categorical":
        if torch.any(target_bits.sum(dim=1) != 1):
            raise ValueError("categorical domain labels must be one-hot")
        return -(F.log_softmax(logits, dim=1) * target_bits).sum(dim=1).mean()
    if mode == "multilabel":
        return F.binary_cross_entropy_with_logits(logits, target_bits)
    raise ValueError(f"unknown domain loss mode {mode!r}")


def loss_adv(rf_real, rf_fake, side: str, flavor: str = "nonsaturating"):
    """Patch adversarial loss on real/fake score maps (logits).

    discriminator: mean[-ln s(real)] + mean[-ln(1 - s(fake))]
    generator, saturating: mean[ln(1 - s(fake))]
    generator, nonsaturating: mean[-ln s(fake)]
    """
    if side == "discriminator":
        return (-F.logsigmoid(rf_real)).mean() + (-F.logsigmoid(-rf_fake)).mean()
    if side == "generator":
        if flavor == "saturating":
            return F.logsigmoid(-rf_fake).mean()
        if flavor == "nonsaturating":
            return (-F.logsigmoid(rf_fake)).mean()
        raise ValueError(f"unknown adversarial flavor {flavor!r}")
    raise ValueError(f"unknown adversarial side {side!r}")


def instance_norm_features(f, eps=1e-5):
    mean = f.mean(dim=(2, 3), keepdim=True)
    var = f.var(dim=(2, 3), unbiased=False, keepdim=True)
    return (f - mean) / torch.sqrt(var + eps)


def loss_perceptual(x_a, x_b, extractor):
    """Mean squared distance between instance-normalized extractor features."""
    if extractor is None:
        raise ConfigError("perceptual loss requires a feature extractor")
    _same_shape(x_a, x_b)
    feats_a = extractor(x_a)
    feats_b = extractor(x_b)
    if torch.is_tensor(feats_a):
        feats_a, feats_b = [feats_a], [feats_b]
    total = 0.0
    for fa, fb in zip(feats_a, feats_b):
        total = total + ((instance_norm_features(fa) - instance_norm_features(fb)) ** 2).mean()
    return total / len(feats_a)


GENERATOR_TERMS = ("adv_g", "s_rec", "c_rec", "a_rec", "cyc", "kl", "iso", "dom_fake")
DISCRIMINATOR_TERMS = ("adv_d", "dom_real")


def total_objectives(terms, weights: LossWeights) -> tuple[float, float]:
    """Assemble (L_D, L_G) from named scalar terms.

    L_D = adv_d + dom_real
    L_G = adv_g + lambda_s_rec * s_rec + c_rec + a_rec + lambda_cyc * cyc
          + lambda_kl * kl + lambda_iso * iso + dom_fake [+ lambda_perc * perc]
    """
    missing = [k for k in DISCRIMINATOR_TERMS + GENERATOR_TERMS if k not in terms]
    if missing:
        raise ConfigError(f"missing loss terms: {missing}")
    l_d = math.fsum([float(terms["adv_d"]), float(terms["dom_real"])])
    parts = [
        float(terms["adv_g"]),
        weights.lambda_s_rec * float(terms["s_rec"]),
        float(terms["c_rec"]),
        float(terms["a_rec"]),
        weights.lambda_cyc * float(terms["cyc"]),
        weights.lambda_kl * float(terms["kl"]),
        weights.lambda_iso * float(terms["iso"]),
        float(terms["dom_fake"]),
    ]
    if weights.lambda_perc:
        parts.append(weights.lambda_perc * float(terms.get("perc", 0.0)))
    return l_d, math.fsum(parts)


REPORT_TERMS = DISCRIMINATOR_TERMS + GENERATOR_TERMS + ("perc",)


@dataclass
class LossReport:
    """Per-iteration record: every term, the two totals, and the sampled
    target domains / attribute draws needed to recompute the step offline."""

    iteration: int
    terms: dict[str, float]
    l_d: float
    l_g: float
    lr: float = 0.0
    flags: list[str] = field(default_factory=list)
    target_bits: list[tuple[int, ...]] = field(default_factory=list)
    z_draws: list[list[float]] = field(default_factory=list)

    CSV_FIELDS = ("iteration", "lr") + REPORT_TERMS + ("l_d", "l_g", "flags")

    @classmethod
    def csv_header(cls) -> str:
        return ",".join(cls.CSV_FIELDS)

    def csv_row(self) -> str:
        cells = [str(self.iteration), repr(self.lr)]
        cells += [repr(float(self.terms.get(k, 0.0))) for k in REPORT_TERMS]
        cells += [repr(self.l_d), repr(self.l_g), ";".join(self.flags)]
        return ",".join(cells)
