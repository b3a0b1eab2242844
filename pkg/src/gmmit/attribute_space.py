"""Structured Gaussian mixture over attribute codes.

Each visual domain is one spherical Gaussian component (categorical mode), or
one on/off two-component sub-mixture owning a block of the code (factorized
mode, for datasets labelled with several binary attributes). Component means
sit on the vertices of a regular simplex so that domains are equidistant in
code space.

All sampling takes an explicit ``numpy.random.Generator``; nothing in this
module holds mutable state.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

_WEIGHT_TOL = 1e-9


class LabelError(ValueError):
    """A domain label inconsistent with the mixture layout."""


@dataclass(frozen=True)
class DomainLabel:
    """Binary attribute vector naming a domain or attribute combination."""

    bits: tuple[int, ...]
    name: str = ""

    def __post_init__(self):
        if not all(b in (0, 1) for b in self.bits):
            raise LabelError(f"label bits must be 0/1, got {self.bits}")

    @property
    def n(self) -> int:
        return len(self.bits)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.bits, dtype=np.float64)


@dataclass(frozen=True)
class AttributeBlock:
    """One attribute's slice of the full code, with its off/on sub-components."""

    name: str
    start: int
    stop: int
    off_mean: np.ndarray
    on_mean: np.ndarray
    off_scale: float
    on_scale: float
    off_weight: float = 0.5
    on_weight: float = 0.5

    @property
    def width(self) -> int:
        return self.stop - self.start


def build_simplex_means(k: int, z: int, radius: float) -> np.ndarray:
    """Vertices of a regular (k-1)-simplex embedded in R^z.

    Every vertex has norm ``radius``; for k >= 2 the centroid is the origin
    and all pairwise distances are equal. Deterministic, no RNG. k=1 returns
    the single zero vector (the degenerate one-component prior).
    """
    if k < 1 or z < 1:
        raise ValueError(f"need k >= 1 and z >= 1, got k={k}, z={z}")
    if k > z + 1:
        raise ValueError(f"a regular simplex with {k} vertices needs dimension >= {k - 1}, got {z}")
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    means = np.zeros((k, z))
    if k == 1:
        return means
    # Center the k standard basis vectors of R^k, then express them in the
    # Helmert orthonormal basis of the zero-sum hyperplane.
    centered = np.eye(k) - 1.0 / k
    helmert = np.zeros((k - 1, k))
    for j in range(1, k):
        helmert[j - 1, :j] = 1.0
        helmert[j - 1, j] = -float(j)
        helmert[j - 1] /= math.sqrt(j * (j + 1))
    coords = centered @ helmert.T  # (k, k-1), all rows same norm
    coords *= radius / np.linalg.norm(coords[0])
    means[:, : k - 1] = coords
    return means


def _as_weights(weights, k: int) -> np.ndarray:
    if weights is None:
        return np.full(k, 1.0 / k)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (k,):
        raise ValueError(f"expected {k} weights, got shape {w.shape}")
    if np.any(w < 0) or abs(float(w.sum()) - 1.0) > _WEIGHT_TOL:
        raise ValueError(f"weights must be nonnegative and sum to 1, got {w}")
    return w


@dataclass(frozen=True)
class AttributeGmm:
    """Mixture prior over attribute codes.

    ``mode='categorical'``: one component per domain over the full code.
    ``mode='factorized'``: the code is partitioned into per-attribute blocks,
    each carrying its own two-component (off/on) sub-mixture.
    """

    dim: int
    z_dim: int
    style_mult: int
    mode: str
    names: tuple[str, ...]
    radius: float
    # categorical layout
    means: np.ndarray | None = None
    scales: np.ndarray | None = None
    weights: np.ndarray | None = None
    # factorized layout
    blocks: tuple[AttributeBlock, ...] = ()
    exclusive_groups: tuple[tuple[str, ...], ...] = field(default=())

    def __post_init__(self):
        if self.mode not in ("categorical", "factorized"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.dim != self.z_dim * self.style_mult:
            raise ValueError("dim must equal z_dim * style_mult")
        if self.mode == "categorical":
            if self.means is None or self.scales is None or self.weights is None:
                raise ValueError("categorical mode needs means, scales and weights")
            if self.means.shape != (self.n_components, self.dim):
                raise ValueError(f"means shape {self.means.shape} != ({self.n_components}, {self.dim})")
            if np.any(self.scales < 0):
                raise ValueError("component scales must be >= 0")
            _as_weights(self.weights, self.n_components)
        else:
            if not self.blocks:
                raise ValueError("factorized mode needs at least one attribute block")
            stop = 0
            for b in self.blocks:
                if b.start != stop or b.stop <= b.start:
                    raise ValueError("blocks must partition the code contiguously")
                if min(b.off_scale, b.on_scale) < 0 or min(b.off_weight, b.on_weight) < 0:
                    raise ValueError("block scales and weights must be >= 0")
                if abs(b.off_weight + b.on_weight - 1.0) > _WEIGHT_TOL:
                    raise ValueError(f"block {b.name!r} weights must sum to 1")
                stop = b.stop
            if stop != self.dim:
                raise ValueError(f"blocks cover {stop} dims, code has {self.dim}")
            known = set(self.names)
            for group in self.exclusive_groups:
                unknown = set(group) - known
                if unknown:
                    raise ValueError(f"exclusive group names {unknown} are not attributes")

    @property
    def n_components(self) -> int:
        return len(self.names)

    @property
    def n_attributes(self) -> int:
        return len(self.names)

    @property
    def deterministic(self) -> bool:
        """True for the Sigma=0 ablation: every scale is exactly zero."""
        if self.mode == "categorical":
            return bool(np.all(self.scales == 0.0))
        return all(b.off_scale == 0.0 and b.on_scale == 0.0 for b in self.blocks)

    # -- labels ------------------------------------------------------------

    def validate_label(self, label: DomainLabel) -> None:
        if label.n != len(self.names):
            raise LabelError(f"label has {label.n} bits, mixture declares {len(self.names)}")
        if self.mode == "categorical":
            if sum(label.bits) != 1:
                raise LabelError(f"categorical labels must be one-hot, got {label.bits}")
        else:
            index = {name: i for i, name in enumerate(self.names)}
            for group in self.exclusive_groups:
                on = sum(label.bits[index[name]] for name in group)
                if on != 1:
                    raise LabelError(f"exclusive group {group} needs exactly one set bit, got {on}")

    def label_for(self, name: str) -> DomainLabel:
        """One-hot label of the named domain (categorical mode)."""
        if name not in self.names:
            raise LabelError(f"unknown domain {name!r}; have {self.names}")
        bits = tuple(int(n == name) for n in self.names)
        return DomainLabel(bits=bits, name=name)

    def label_from_bits(self, bits) -> DomainLabel:
        label = DomainLabel(bits=tuple(int(b) for b in bits))
        self.validate_label(label)
        return label

    def random_label(self, rng: np.random.Generator) -> DomainLabel:
        """Uniform random target label (respecting exclusive groups)."""
        if self.mode == "categorical":
            k = int(rng.integers(self.n_components))
            return self.label_for(self.names[k])
        bits = [int(b) for b in rng.integers(0, 2, size=len(self.names))]
        index = {name: i for i, name in enumerate(self.names)}
        for group in self.exclusive_groups:
            for name in group:
                bits[index[name]] = 0
            bits[index[group[int(rng.integers(len(group)))]]] = 1
        return self.label_from_bits(bits)

    # -- component lookup ----------------------------------------------------

    def component_index(self, label: DomainLabel) -> int:
        if self.mode != "categorical":
            raise LabelError("component_index is only defined in categorical mode")
        self.validate_label(label)
        return label.bits.index(1)

    def domain_component(self, label: DomainLabel) -> tuple[np.ndarray, np.ndarray]:
        """Per-coordinate (mean, std) of the component selected by ``label``."""
        self.validate_label(label)
        if self.mode == "categorical":
            k = label.bits.index(1)
            return self.means[k].copy(), np.full(self.dim, float(self.scales[k]))
        mean = np.empty(self.dim)
        sigma = np.empty(self.dim)
        for bit, block in zip(label.bits, self.blocks):
            sub_mean = block.on_mean if bit else block.off_mean
            sub_scale = block.on_scale if bit else block.off_scale
            mean[block.start : block.stop] = sub_mean
            sigma[block.start : block.stop] = sub_scale
        return mean, sigma

    # -- density and sampling ------------------------------------------------

    def density(self, z: np.ndarray) -> float:
        """Mixture probability density at ``z``."""
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (self.dim,):
            raise ValueError(f"code has shape {z.shape}, mixture dimension is {self.dim}")
        if self.mode == "categorical":
            if np.any(self.scales == 0.0):
                raise ValueError("density is undefined for the deterministic (zero-scale) ablation")
            return float(np.exp(_logsumexp(
                np.log(self.weights) + _sph_logpdf(z, self.means, self.scales))))
        total = 0.0
        for bit_block in self.blocks:
            if bit_block.off_scale == 0.0 or bit_block.on_scale == 0.0:
                raise ValueError("density is undefined for the deterministic (zero-scale) ablation")
            zb = z[bit_block.start : bit_block.stop]
            sub_means = np.stack([bit_block.off_mean, bit_block.on_mean])
            sub_scales = np.array([bit_block.off_scale, bit_block.on_scale])
            sub_w = np.array([bit_block.off_weight, bit_block.on_weight])
            total += _logsumexp(np.log(sub_w) + _sph_logpdf(zb, sub_means, sub_scales))
        return float(np.exp(total))

    def sample_component(self, k: int, rng: np.random.Generator) -> np.ndarray:
        """Draw from component k; returns the mean exactly when its scale is 0."""
        if self.mode != "categorical":
            raise ValueError("sample_component addresses categorical components")
        if not 0 <= k < self.n_components:
            raise ValueError(f"component index {k} out of range [0, {self.n_components})")
        noise = rng.standard_normal(self.dim)
        return self.means[k] + float(self.scales[k]) * noise

    def sample_mixture(self, rng: np.random.Generator):
        """Draw (component index, code) from the full mixture.

        With a single component no selection randomness is consumed, so the
        stream state matches ``sample_component(0, rng)``. In factorized mode
        the "index" is the tuple of sampled on/off bits.
        """
        if self.mode == "categorical":
            if self.n_components == 1:
                k = 0
            else:
                k = int(rng.choice(self.n_components, p=self.weights))
            return k, self.sample_component(k, rng)
        bits = []
        parts = []
        for block in self.blocks:
            on = int(rng.random() < block.on_weight)
            bits.append(on)
            mean = block.on_mean if on else block.off_mean
            scale = block.on_scale if on else block.off_scale
            parts.append(mean + scale * rng.standard_normal(block.width))
        return tuple(bits), np.concatenate(parts)

    def sample_for_label(self, label: DomainLabel, rng: np.random.Generator) -> np.ndarray:
        """Draw a code from the component(s) selected by ``label``."""
        mean, sigma = self.domain_component(label)
        return mean + sigma * rng.standard_normal(self.dim)


def _sph_logpdf(z: np.ndarray, means: np.ndarray, scales: np.ndarray) -> np.ndarray:
    """Log N(z; mean_k, scale_k^2 I) for each row of ``means``."""
    d = z.shape[-1]
    sq = np.sum((z[None, :] - means) ** 2, axis=1)
    return -0.5 * d * math.log(2.0 * math.pi) - d * np.log(scales) - sq / (2.0 * scales**2)


def _logsumexp(a: np.ndarray) -> float:
    m = float(np.max(a))
    return m + math.log(float(np.sum(np.exp(a - m))))


def gmm_density(z, gmm: AttributeGmm) -> float:
    return gmm.density(np.asarray(z, dtype=np.float64))


def kl_diag_gaussian(m, logv, mu, sigma) -> float:
    """KL( N(m, diag(e^logv)) || N(mu, sigma^2 I) ), in nats.

    ``sigma`` may be a positive scalar or a per-coordinate vector.
    """
    m = np.asarray(m, dtype=np.float64)
    logv = np.asarray(logv, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if m.shape != logv.shape or m.shape != mu.shape:
        raise ValueError("m, logv and mu must have matching shapes")
    if not (np.all(np.isfinite(m)) and np.all(np.isfinite(logv))
            and np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
        raise ValueError("kl_diag_gaussian needs finite inputs")
    if np.any(sigma <= 0):
        raise ValueError("component scale must be positive")
    var = np.exp(logv)
    s2 = sigma**2
    terms = var / s2 + (mu - m) ** 2 / s2 - 1.0 + np.log(s2) - logv
    return 0.5 * float(np.sum(terms))


def interpolate_codes(z_a, z_b, t: float) -> np.ndarray:
    """(1-t) z_a + t z_b. t outside [0, 1] extrapolates (logged, not an error)."""
    z_a = np.asarray(z_a, dtype=np.float64)
    z_b = np.asarray(z_b, dtype=np.float64)
    if z_a.shape != z_b.shape:
        raise ValueError(f"endpoint shapes differ: {z_a.shape} vs {z_b.shape}")
    if t == 0.0:
        return z_a.copy()
    if t == 1.0:
        return z_b.copy()
    if t < 0.0 or t > 1.0:
        log.debug("extrapolating attribute codes at t=%s (outside [0, 1])", t)
    return (1.0 - t) * z_a + t * z_b


# -- constructors -------------------------------------------------------------


def categorical_gmm(domain_names, z_dim: int, style_mult: int = 1, radius: float = 1.0,
                    sigma: float = 0.5, weights=None, means=None) -> AttributeGmm:
    """One spherical component per domain, means on a regular simplex.

    ``sigma=0`` builds the deterministic ablation (sampling returns means,
    density is rejected). Custom ``means`` override the simplex layout.
    """
    names = tuple(domain_names)
    k = len(names)
    dim = z_dim * style_mult
    if means is None:
        means = build_simplex_means(k, dim, radius)
    else:
        means = np.asarray(means, dtype=np.float64)
    scales = np.full(k, float(sigma))
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    return AttributeGmm(
        dim=dim, z_dim=z_dim, style_mult=style_mult, mode="categorical",
        names=names, radius=float(radius), means=means, scales=scales,
        weights=_as_weights(weights, k))


def factorized_gmm(attribute_names, z_dim: int, style_mult: int = 1, radius: float = 1.0,
                   sigma: float = 0.5, exclusive_groups=(), on_weight: float = 0.5) -> AttributeGmm:
    """Per-attribute on/off sub-mixtures over equal-as-possible code blocks.

    Within its block each attribute puts the "off" mean at -radius and the
    "on" mean at +radius along the block's first coordinate.
    """
    names = tuple(attribute_names)
    if not names:
        raise ValueError("need at least one attribute")
    dim = z_dim * style_mult
    if dim < len(names):
        raise ValueError(f"code dimension {dim} cannot host {len(names)} attribute blocks")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    bounds = np.linspace(0, dim, len(names) + 1).round().astype(int)
    blocks = []
    for i, name in enumerate(names):
        start, stop = int(bounds[i]), int(bounds[i + 1])
        width = stop - start
        direction = np.zeros(width)
        direction[0] = 1.0
        blocks.append(AttributeBlock(
            name=name, start=start, stop=stop,
            off_mean=-radius * direction, on_mean=radius * direction,
            off_scale=float(sigma), on_scale=float(sigma),
            off_weight=1.0 - on_weight, on_weight=on_weight))
    return AttributeGmm(
        dim=dim, z_dim=z_dim, style_mult=style_mult, mode="factorized",
        names=names, radius=float(radius), blocks=tuple(blocks),
        exclusive_groups=tuple(tuple(g) for g in exclusive_groups))


# -- serialization -------------------------------------------------------------
#
# Flat key = value text. Floats are written with repr() so the round trip is
# bit-exact.


def _fmt_vec(v) -> str:
    return ",".join(repr(float(x)) for x in np.asarray(v).ravel())


def _parse_vec(s: str) -> np.ndarray:
    s = s.strip()
    if not s:
        return np.zeros(0)
    return np.array([float(tok) for tok in s.split(",")])


def gmm_to_text(gmm: AttributeGmm) -> str:
    lines = [
        "format = gmm-spec.v1",
        f"mode = {gmm.mode}",
        f"z_dim = {gmm.z_dim}",
        f"style_mult = {gmm.style_mult}",
        f"radius = {repr(gmm.radius)}",
        f"names = {','.join(gmm.names)}",
    ]
    if gmm.mode == "categorical":
        lines.append(f"weights = {_fmt_vec(gmm.weights)}")
        lines.append(f"scales = {_fmt_vec(gmm.scales)}")
        for i in range(gmm.n_components):
            lines.append(f"mean.{i} = {_fmt_vec(gmm.means[i])}")
    else:
        for i, b in enumerate(gmm.blocks):
            lines.append(f"block.{i}.span = {b.start},{b.stop}")
            lines.append(f"block.{i}.off_mean = {_fmt_vec(b.off_mean)}")
            lines.append(f"block.{i}.on_mean = {_fmt_vec(b.on_mean)}")
            lines.append(f"block.{i}.scales = {repr(b.off_scale)},{repr(b.on_scale)}")
            lines.append(f"block.{i}.weights = {repr(b.off_weight)},{repr(b.on_weight)}")
        groups = ";".join("|".join(g) for g in gmm.exclusive_groups)
        lines.append(f"groups = {groups}")
    return "\n".join(lines) + "\n"


def gmm_from_text(text: str) -> AttributeGmm:
    kv: dict[str, str] = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        kv[key.strip()] = value.strip()
    if kv.get("format") != "gmm-spec.v1":
        raise ValueError(f"unsupported gmm spec format {kv.get('format')!r}")
    mode = kv["mode"]
    z_dim = int(kv["z_dim"])
    style_mult = int(kv["style_mult"])
    radius = float(kv["radius"])
    names = tuple(n for n in kv["names"].split(",") if n)
    dim = z_dim * style_mult
    if mode == "categorical":
        weights = _parse_vec(kv["weights"])
        scales = _parse_vec(kv["scales"])
        means = np.stack([_parse_vec(kv[f"mean.{i}"]) for i in range(len(names))])
        return AttributeGmm(dim=dim, z_dim=z_dim, style_mult=style_mult, mode=mode,
                            names=names, radius=radius, means=means, scales=scales,
                            weights=weights)
    blocks = []
    for i, name in enumerate(names):
        start, stop = (int(x) for x in kv[f"block.{i}.span"].split(","))
        off_scale, on_scale = (float(x) for x in kv[f"block.{i}.scales"].split(","))
        off_w, on_w = (float(x) for x in kv[f"block.{i}.weights"].split(","))
        blocks.append(AttributeBlock(
            name=name, start=start, stop=stop,
            off_mean=_parse_vec(kv[f"block.{i}.off_mean"]),
            on_mean=_parse_vec(kv[f"block.{i}.on_mean"]),
            off_scale=off_scale, on_scale=on_scale,
            off_weight=off_w, on_weight=on_w))
    groups = tuple(tuple(g.split("|")) for g in kv.get("groups", "").split(";") if g)
    return AttributeGmm(dim=dim, z_dim=z_dim, style_mult=style_mult, mode=mode,
                        names=names, radius=radius, blocks=tuple(blocks),
                        exclusive_groups=groups)
