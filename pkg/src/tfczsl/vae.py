"""Cross-modal twin VAE (CADA-style) and its training losses.

Two encoders map visual features ``x`` and class attributes ``a`` into a
shared diagonal-Gaussian latent space; two decoders map latents back to each
modality. The training objective is

    L = L_re + beta*L_kl + gamma*L_ca + delta*L_da + alpha*L_kd

with within-modality reconstruction (``L_re``), the KL prior term, cross
reconstruction (``L_ca``), the Wasserstein-2 distance between the two
latent Gaussians (``L_da``) and the dark-knowledge distillation term
(``L_kd``) computed against encoder statistics stored in replay memory.

All per-sample terms are averaged over the batch; ``L_kd`` is averaged over
the replayed rows only. :func:`loss_and_grads` returns exact gradients for
every parameter of the four networks with the reparameterization noise held
fixed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import nncore
from .errors import CheckpointError, ShapeError
from .nncore import DenseNet

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0

TERMS = ("re", "kl", "ca", "da", "kd")


@dataclass
class GaussianLatent:
    """Diagonal Gaussian; ``mean``/``log_var`` are [d_z] or [n, d_z]."""

    mean: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.log_var = np.asarray(self.log_var, dtype=np.float64)
        if self.mean.shape != self.log_var.shape:
            raise ShapeError(f"mean {self.mean.shape} and log_var {self.log_var.shape} differ")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def std(self) -> np.ndarray:
        return np.exp(0.5 * self.log_var)

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.log_var)

    def row(self, i: int) -> "GaussianLatent":
        return GaussianLatent(self.mean[i], self.log_var[i])


@dataclass
class Warmup:
    """Linear ramp from 0 at ``start`` to 1 at ``end`` (optimizer steps)."""

    start: int = 0
    end: int = 0

    def factor(self, step: int) -> float:
        if self.end <= self.start:
            return 1.0 if step >= self.start else 0.0
        return float(np.clip((step - self.start) / (self.end - self.start), 0.0, 1.0))


@dataclass
class LossWeights:
    beta: float = 1.0
    gamma: float = 1.0
    delta: float = 1.0
    alpha: float = 1.0
    warmup: dict[str, Warmup] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("beta", "gamma", "delta", "alpha"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")
        unknown = set(self.warmup) - {"beta", "gamma", "delta", "alpha"}
        if unknown:
            raise ValueError(f"warm-up given for unknown weights {sorted(unknown)}")

    def at(self, step: int) -> dict[str, float]:
        """Effective weights after applying any warm-up at ``step``."""
        out = {}
        for name in ("beta", "gamma", "delta", "alpha"):
            w = getattr(self, name)
            ramp = self.warmup.get(name)
            out[name] = w * ramp.factor(step) if ramp is not None else w
        return out


class CadaVae:
    def __init__(
        self,
        visual_encoder: DenseNet,
        attribute_encoder: DenseNet,
        visual_decoder: DenseNet,
        attribute_decoder: DenseNet,
    ):
        d_z2 = visual_encoder.out_dim
        if d_z2 % 2 or attribute_encoder.out_dim != d_z2:
            raise ShapeError("encoders must both emit 2*d_z outputs")
        d_z = d_z2 // 2
        if visual_decoder.in_dim != d_z or attribute_decoder.in_dim != d_z:
            raise ShapeError("decoders must take d_z inputs")
        if visual_decoder.out_dim != visual_encoder.in_dim:
            raise ShapeError("visual decoder output must match feature dimension")
        if attribute_decoder.out_dim != attribute_encoder.in_dim:
            raise ShapeError("attribute decoder output must match attribute dimension")
        self.visual_encoder = visual_encoder
        self.attribute_encoder = attribute_encoder
        self.visual_decoder = visual_decoder
        self.attribute_decoder = attribute_decoder

    @classmethod
    def create(cls, feature_dim, attribute_dim, latent_dim, rng, hidden=(64,), attr_hidden=None):
        hidden = list(hidden)
        attr_hidden = hidden if attr_hidden is None else list(attr_hidden)
        return cls(
            DenseNet.create([feature_dim, *hidden, 2 * latent_dim], rng),
            DenseNet.create([attribute_dim, *attr_hidden, 2 * latent_dim], rng),
            DenseNet.create([latent_dim, *hidden[::-1], feature_dim], rng),
            DenseNet.create([latent_dim, *attr_hidden[::-1], attribute_dim], rng),
        )

    @property
    def latent_dim(self) -> int:
        return self.visual_decoder.in_dim

    @property
    def feature_dim(self) -> int:
        return self.visual_encoder.in_dim

    @property
    def attribute_dim(self) -> int:
        return self.attribute_encoder.in_dim

    def nets(self) -> dict[str, DenseNet]:
        return {
            "visual_encoder": self.visual_encoder,
            "attribute_encoder": self.attribute_encoder,
            "visual_decoder": self.visual_decoder,
            "attribute_decoder": self.attribute_decoder,
        }

    def copy(self) -> "CadaVae":
        return CadaVae(*(net.copy() for net in self.nets().values()))

    def all_finite(self) -> bool:
        return all(net.all_finite() for net in self.nets().values())

    def encode_visual(self, x) -> GaussianLatent:
        return _split(nncore.forward(self.visual_encoder, x)[0])

    def encode_attribute(self, a) -> GaussianLatent:
        return _split(nncore.forward(self.attribute_encoder, a)[0])

    # serialization
    def to_arrays(self) -> tuple[dict, dict]:
        arrays, meta = {}, {}
        for name, net in self.nets().items():
            arr, m = nncore.net_arrays(net, name)
            arrays.update(arr)
            meta[name] = m
        return arrays, meta

    @classmethod
    def from_arrays(cls, arrays, meta) -> "CadaVae":
        try:
            return cls(**{name: nncore.net_from_arrays(arrays, meta[name], name) for name in (
                "visual_encoder", "attribute_encoder", "visual_decoder", "attribute_decoder")})
        except KeyError as exc:
            raise CheckpointError(f"model checkpoint lacks {exc}") from None

    def save(self, path) -> None:
        arrays, meta = self.to_arrays()
        nncore.write_npz(path, arrays, {"kind": "cada_vae", "model": meta})

    @classmethod
    def load(cls, path) -> "CadaVae":
        arrays, meta = nncore.read_npz(path)
        if meta.get("kind") != "cada_vae":
            raise CheckpointError(f"{path} is not a model checkpoint")
        return cls.from_arrays(arrays, meta["model"])


def _split(h: np.ndarray) -> GaussianLatent:
    d = h.shape[-1] // 2
    return GaussianLatent(h[..., :d], h[..., d:])


def encode_visual(model: CadaVae, x) -> GaussianLatent:
    return model.encode_visual(x)


def encode_attribute(model: CadaVae, a) -> GaussianLatent:
    return model.encode_attribute(a)


def reparameterize(g: GaussianLatent, rng: np.random.Generator = None, eps=None) -> np.ndarray:
    """``mean + std * eps`` with ``eps ~ N(0, I)`` unless given explicitly."""
    if eps is None:
        eps = rng.standard_normal(g.mean.shape)
    return g.mean + g.std * eps


def kl_loss(g: GaussianLatent):
    """KL(N(mean, var) || N(0, I)), summed over latent dimensions."""
    return -0.5 * np.sum(1.0 + g.log_var - g.mean**2 - np.exp(g.log_var), axis=-1)


def reconstruction_loss(target, reconstruction):
    """Mean absolute error over the last axis."""
    target = np.asarray(target, dtype=np.float64)
    reconstruction = np.asarray(reconstruction, dtype=np.float64)
    if target.shape != reconstruction.shape:
        raise ShapeError(f"target {target.shape} vs reconstruction {reconstruction.shape}")
    return np.mean(np.abs(target - reconstruction), axis=-1)


def distribution_alignment_loss(gv: GaussianLatent, ga: GaussianLatent):
    """2-Wasserstein distance between two diagonal Gaussians."""
    if gv.mean.shape != ga.mean.shape:
        raise ShapeError(f"latent shapes differ: {gv.mean.shape} vs {ga.mean.shape}")
    return np.sqrt(
        np.sum((ga.mean - gv.mean) ** 2, axis=-1) + np.sum((ga.std - gv.std) ** 2, axis=-1)
    )


@dataclass
class DarkKnowledge:
    """Encoder statistics captured when a sample entered replay memory."""

    mu_vf: np.ndarray
    log_var_vf: np.ndarray
    mu_af: np.ndarray
    log_var_af: np.ndarray

    def __post_init__(self):
        for name in ("mu_vf", "log_var_vf", "mu_af", "log_var_af"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        shapes = {self.mu_vf.shape, self.log_var_vf.shape, self.mu_af.shape, self.log_var_af.shape}
        if len(shapes) != 1:
            raise ShapeError(f"dark knowledge vectors disagree in shape: {sorted(shapes)}")

    @property
    def dim(self) -> int:
        return self.mu_vf.shape[-1]

    @classmethod
    def stack(cls, items) -> "DarkKnowledge":
        return cls(*(np.stack([getattr(d, f) for d in items]) for f in
                     ("mu_vf", "log_var_vf", "mu_af", "log_var_af")))


def dark_kd_loss(current_attr: GaussianLatent, current_vis: GaussianLatent,
                 stored: DarkKnowledge, symmetric: bool = False):
    """L1 pull of the current attribute mean and visual variance toward stored values.

    With ``symmetric`` the visual mean and attribute variance are pulled too.
    """
    if stored.dim != current_attr.dim or stored.dim != current_vis.dim:
        raise ShapeError(f"stored d_z {stored.dim} does not match current latents")
    loss = np.sum(np.abs(current_attr.mean - stored.mu_af), axis=-1) + np.sum(
        np.abs(current_vis.var - np.exp(stored.log_var_vf)), axis=-1
    )
    if symmetric:
        loss = loss + np.sum(np.abs(current_vis.mean - stored.mu_vf), axis=-1) + np.sum(
            np.abs(current_attr.var - np.exp(stored.log_var_af)), axis=-1
        )
    return loss


def cross_alignment_loss(model: CadaVae, x, a, rng=None, eps_v=None, eps_a=None, use_mean=False):
    """Cross reconstruction: attributes from the visual latent and vice versa."""
    gv = model.encode_visual(x)
    ga = model.encode_attribute(a)
    zv = gv.mean if use_mean else reparameterize(gv, rng, eps_v)
    za = ga.mean if use_mean else reparameterize(ga, rng, eps_a)
    return reconstruction_loss(a, model.attribute_decoder(zv)) + reconstruction_loss(
        x, model.visual_decoder(za)
    )


@dataclass
class Batch:
    """A joint training batch. Rows with ``kd_mask`` set carry dark knowledge."""

    x: np.ndarray
    a: np.ndarray
    kd_mask: Optional[np.ndarray] = None
    dark: Optional[DarkKnowledge] = None  # rows aligned with x; ignored where mask is False

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        self.a = np.atleast_2d(np.asarray(self.a, dtype=np.float64))
        if len(self.x) == 0:
            raise ShapeError("empty batch")
        if len(self.x) != len(self.a):
            raise ShapeError("x and a must have the same number of rows")
        if self.kd_mask is None:
            self.kd_mask = np.zeros(len(self.x), dtype=bool)
        self.kd_mask = np.asarray(self.kd_mask, dtype=bool)
        if self.kd_mask.any() and self.dark is None:
            raise ShapeError("kd_mask set but no dark knowledge given")

    def __len__(self):
        return len(self.x)


@dataclass
class LossOptions:
    kd_symmetric: bool = False
    ca_use_mean: bool = False
    clamp: bool = True


def loss_and_grads(model: CadaVae, batch: Batch, weights: LossWeights, step: int = 0,
                   rng: np.random.Generator = None, noise=None,
                   options: LossOptions = LossOptions(), need_grads: bool = True):
    """Total loss, per-term breakdown and parameter gradients.

    ``noise`` is an optional ``(eps_v, eps_a)`` pair of [n, d_z] arrays; when
    omitted it is drawn from ``rng``. Returns ``(total, terms, grads)`` where
    ``grads`` maps each network name to its list of ``(dW, db)`` pairs (or is
    ``None`` when ``need_grads`` is false).
    """
    n = len(batch)
    d_z = model.latent_dim
    if batch.x.shape[1] != model.feature_dim or batch.a.shape[1] != model.attribute_dim:
        raise ShapeError("batch dimensions do not match the model")
    w = weights.at(step)
    if noise is None:
        eps_v = rng.standard_normal((n, d_z))
        eps_a = rng.standard_normal((n, d_z))
    else:
        eps_v, eps_a = (np.asarray(e, dtype=np.float64).reshape(n, d_z) for e in noise)

    X, A = batch.x, batch.a
    hv, cache_ev = nncore.forward(model.visual_encoder, X)
    ha, cache_ea = nncore.forward(model.attribute_encoder, A)
    mu_v, lv_raw = hv[:, :d_z], hv[:, d_z:]
    mu_a, la_raw = ha[:, :d_z], ha[:, d_z:]
    if options.clamp:
        lv = np.clip(lv_raw, LOGVAR_MIN, LOGVAR_MAX)
        la = np.clip(la_raw, LOGVAR_MIN, LOGVAR_MAX)
    else:
        lv, la = lv_raw, la_raw
    s_v, s_a = np.exp(0.5 * lv), np.exp(0.5 * la)
    z_v = mu_v + s_v * eps_v
    z_a = mu_a + s_a * eps_a
    cross_v = mu_v if options.ca_use_mean else z_v
    cross_a = mu_a if options.ca_use_mean else z_a

    # Decoders run once each on [own latent; other modality's latent].
    out_dv, cache_dv = nncore.forward(model.visual_decoder, np.vstack([z_v, cross_a]))
    out_da, cache_da = nncore.forward(model.attribute_decoder, np.vstack([z_a, cross_v]))
    x_rec, x_cross = out_dv[:n], out_dv[n:]
    a_rec, a_cross = out_da[:n], out_da[n:]

    re_rows = reconstruction_loss(X, x_rec) + reconstruction_loss(A, a_rec)
    gv, ga = GaussianLatent(mu_v, lv), GaussianLatent(mu_a, la)
    kl_rows = kl_loss(gv) + kl_loss(ga)
    ca_rows = reconstruction_loss(A, a_cross) + reconstruction_loss(X, x_cross)
    da_rows = distribution_alignment_loss(gv, ga)

    mask = batch.kd_mask
    n_kd = int(mask.sum())
    kd = 0.0
    if n_kd:
        st = batch.dark
        st_var_v = np.exp(np.clip(st.log_var_vf[mask], LOGVAR_MIN, LOGVAR_MAX))
        st_var_a = np.exp(np.clip(st.log_var_af[mask], LOGVAR_MIN, LOGVAR_MAX))
        var_v, var_a = s_v[mask] ** 2, s_a[mask] ** 2
        d_mu_a = mu_a[mask] - st.mu_af[mask]
        d_var_v = var_v - st_var_v
        kd_rows = np.abs(d_mu_a).sum(axis=1) + np.abs(d_var_v).sum(axis=1)
        if options.kd_symmetric:
            d_mu_v = mu_v[mask] - st.mu_vf[mask]
            d_var_a = var_a - st_var_a
            kd_rows = kd_rows + np.abs(d_mu_v).sum(axis=1) + np.abs(d_var_a).sum(axis=1)
        kd = float(kd_rows.mean())

    terms = {
        "re": float(re_rows.mean()),
        "kl": float(kl_rows.mean()),
        "ca": float(ca_rows.mean()),
        "da": float(da_rows.mean()),
        "kd": kd,
    }
    total = (terms["re"] + w["beta"] * terms["kl"] + w["gamma"] * terms["ca"]
             + w["delta"] * terms["da"] + w["alpha"] * terms["kd"])
    if not need_grads:
        return total, terms, None

    # Gradients w.r.t. decoder outputs (L1 terms; sign(0) = 0).
    dx, da_ = X.shape[1], A.shape[1]
    g_dv = np.empty_like(out_dv)
    g_dv[:n] = -np.sign(X - x_rec) / (dx * n)
    g_dv[n:] = -w["gamma"] * np.sign(X - x_cross) / (dx * n)
    g_da = np.empty_like(out_da)
    g_da[:n] = -np.sign(A - a_rec) / (da_ * n)
    g_da[n:] = -w["gamma"] * np.sign(A - a_cross) / (da_ * n)
    grads_dv, gin_dv = nncore.backward(model.visual_decoder, cache_dv, g_dv)
    grads_da, gin_da = nncore.backward(model.attribute_decoder, cache_da, g_da)

    g_zv, g_za = gin_dv[:n], gin_da[:n]
    if options.ca_use_mean:
        g_mu_v = g_zv + gin_da[n:]
        g_mu_a = g_za + gin_dv[n:]
    else:
        g_zv = g_zv + gin_da[n:]
        g_za = g_za + gin_dv[n:]
        g_mu_v, g_mu_a = g_zv.copy(), g_za.copy()
    # z = mu + exp(lv/2) * eps
    g_lv = g_zv * eps_v * 0.5 * s_v
    g_la = g_za * eps_a * 0.5 * s_a

    # KL
    b = w["beta"] / n
    g_mu_v += b * mu_v
    g_mu_a += b * mu_a
    g_lv += b * 0.5 * (np.exp(lv) - 1.0)
    g_la += b * 0.5 * (np.exp(la) - 1.0)

    # Distribution alignment
    diff_mu = mu_a - mu_v
    diff_s = s_a - s_v
    safe = np.where(da_rows > 0, da_rows, 1.0)
    coef = np.where(da_rows > 0, w["delta"] / (n * safe), 0.0)[:, None]
    g_mu_a += coef * diff_mu
    g_mu_v -= coef * diff_mu
    g_la += coef * diff_s * 0.5 * s_a
    g_lv -= coef * diff_s * 0.5 * s_v

    # Dark-knowledge distillation; d var / d lv = var.
    if n_kd and w["alpha"] != 0.0:
        c = w["alpha"] / n_kd
        g_mu_a[mask] += c * np.sign(d_mu_a)
        g_lv[mask] += c * np.sign(d_var_v) * var_v
        if options.kd_symmetric:
            g_mu_v[mask] += c * np.sign(d_mu_v)
            g_la[mask] += c * np.sign(d_var_a) * var_a

    if options.clamp:
        g_lv = g_lv * ((lv_raw > LOGVAR_MIN) & (lv_raw < LOGVAR_MAX))
        g_la = g_la * ((la_raw > LOGVAR_MIN) & (la_raw < LOGVAR_MAX))
    grads_ev, _ = nncore.backward(model.visual_encoder, cache_ev, np.hstack([g_mu_v, g_lv]))
    grads_ea, _ = nncore.backward(model.attribute_encoder, cache_ea, np.hstack([g_mu_a, g_la]))
    grads = {
        "visual_encoder": grads_ev,
        "attribute_encoder": grads_ea,
        "visual_decoder": grads_dv,
        "attribute_decoder": grads_da,
    }
    return total, terms, grads


def total_loss(model: CadaVae, batch: Batch, weights: LossWeights, step: int = 0,
               rng=None, noise=None, options: LossOptions = LossOptions()):
    """Scalar objective and per-term breakdown (no gradients)."""
    total, terms, _ = loss_and_grads(model, batch, weights, step, rng, noise, options,
                                     need_grads=False)
    return total, terms


def cada_loss(model: CadaVae, x, a, weights: LossWeights, noise, ca_use_mean=False):
    """The KD-free objective assembled from the standalone loss functions.

    Independent of :func:`loss_and_grads`; used to cross-check it.
    """
    w = weights.at(0)
    gv, ga = model.encode_visual(x), model.encode_attribute(a)
    gv = GaussianLatent(gv.mean, np.clip(gv.log_var, LOGVAR_MIN, LOGVAR_MAX))
    ga = GaussianLatent(ga.mean, np.clip(ga.log_var, LOGVAR_MIN, LOGVAR_MAX))
    zv = reparameterize(gv, eps=noise[0])
    za = reparameterize(ga, eps=noise[1])
    re = reconstruction_loss(x, model.visual_decoder(zv)) + reconstruction_loss(
        a, model.attribute_decoder(za))
    kl = kl_loss(gv) + kl_loss(ga)
    cv, ca_ = (gv.mean, ga.mean) if ca_use_mean else (zv, za)
    ca = reconstruction_loss(a, model.attribute_decoder(cv)) + reconstruction_loss(
        x, model.visual_decoder(ca_))
    da = distribution_alignment_loss(gv, ga)
    return float(np.mean(re + w["beta"] * kl + w["gamma"] * ca + w["delta"] * da))


class VaeOptimizer:
    """One Adam state per network, stepped together."""

    def __init__(self, model: CadaVae, lr: float = 1e-3):
        self.model = model
        self.states = {name: nncore.OptimizerState.for_net(net, lr) for name, net in model.nets().items()}

    @property
    def step_count(self) -> int:
        return next(iter(self.states.values())).step

    def step(self, grads: dict) -> None:
        nets = self.model.nets()
        # Refuse the whole update if any network's gradient is bad.
        for name, g in grads.items():
            for dW, db in g:
                if not (np.isfinite(dW).all() and np.isfinite(db).all()):
                    raise nncore.OptimizerError(f"non-finite gradient in {name}; step refused")
        for name, net in nets.items():
            nncore.adam_step(net, grads[name], self.states[name])
