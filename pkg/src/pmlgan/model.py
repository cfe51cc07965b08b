"""PML-GAN: predictor F, disambiguator D~, generator G, discriminator D.

The disambiguator marks candidate labels as noise, ``z = relu(y - D~(x))``;
F is fit to ``z`` by cross-entropy, G decodes ``z`` back into feature space and
is also trained adversarially against D on samples from a label prior.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import entr, xlogy

from . import nn
from .nn import EVAL, TRAIN, Network, ShapeError

PROB_EPS = 1e-7
HIDDEN = 100

LOSS_TERMS = ("cls", "gen", "adv")


def _clamp(p):
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def _clamp_mask(p):
    return ((p >= PROB_EPS) & (p <= 1.0 - PROB_EPS)).astype(np.float64)


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# label disambiguation

def disambiguate(y, delta) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    _same_shape(y, delta, "disambiguate")
    return np.maximum(y - delta, 0.0)


def disambiguate_grad(y, delta, grad_z) -> np.ndarray:
    """Backprop ``dL/dz`` to ``dL/ddelta``; the subgradient is 0 where ``y - delta <= 0``."""
    y, delta, grad_z = (np.asarray(a, dtype=np.float64) for a in (y, delta, grad_z))
    return -grad_z * ((y - delta) > 0)


# ---------------------------------------------------------------------------
# losses; each ``*_grads`` returns derivatives of the matching value

def classification_loss(f, z) -> float:
    f = np.asarray(f, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    _same_shape(f, z, "classification_loss")
    if f.shape[0] == 0:
        raise ShapeError("classification_loss on an empty batch")
    fc = _clamp(f)
    per = -(z * np.log(fc) + (1.0 - z) * np.log(1.0 - fc)).sum(axis=1)
    return float(per.mean())


def classification_loss_grads(f, z):
    """Gradients with respect to the prediction ``f`` and the target ``z``."""
    f = np.asarray(f, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    m = f.shape[0]
    fc = _clamp(f)
    df = (-z / fc + (1.0 - z) / (1.0 - fc)) * _clamp_mask(f) / m
    dz = np.log((1.0 - fc) / fc) / m
    return df, dz


def generation_loss(x_hat, x) -> float:
    x_hat = np.asarray(x_hat, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    _same_shape(x_hat, x, "generation_loss")
    if x.shape[0] == 0:
        raise ShapeError("generation_loss on an empty batch")
    return float(((x_hat - x) ** 2).sum(axis=1).mean())


def generation_loss_grad(x_hat, x):
    return 2.0 * (x_hat - x) / x.shape[0]


def _check_nonempty(*vs):
    for v in vs:
        if np.asarray(v).size == 0:
            raise ValueError("discriminator outputs must be nonempty")


def discriminator_loss(d_real, d_fake) -> float:
    """``mean log D(x) + mean log(1 - D(G(z_hat)))``; the discriminator ascends it."""
    _check_nonempty(d_real, d_fake)
    d_real = _clamp(np.asarray(d_real, dtype=np.float64))
    d_fake = _clamp(np.asarray(d_fake, dtype=np.float64))
    return float(np.log(d_real).mean() + np.log(1.0 - d_fake).mean())


def discriminator_loss_grads(d_real, d_fake):
    dr = 1.0 / _clamp(d_real) * _clamp_mask(d_real) / d_real.size
    dfk = -1.0 / (1.0 - _clamp(d_fake)) * _clamp_mask(d_fake) / d_fake.size
    return dr, dfk


def generator_adv_loss(d_fake, non_saturating: bool = False) -> float:
    _check_nonempty(d_fake)
    d_fake = _clamp(np.asarray(d_fake, dtype=np.float64))
    if non_saturating:
        return float(-np.log(d_fake).mean())
    return float(np.log(1.0 - d_fake).mean())


def generator_adv_loss_grad(d_fake, non_saturating: bool = False):
    mask = _clamp_mask(d_fake) / d_fake.size
    if non_saturating:
        return -1.0 / _clamp(d_fake) * mask
    return -1.0 / (1.0 - _clamp(d_fake)) * mask


# ---------------------------------------------------------------------------
# the model

@dataclass
class PmlGanModel:
    predictor: Network
    disambiguator: Network
    generator: Network
    discriminator: Network
    beta: float = 1.0
    non_saturating: bool = False

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        d, L = self.predictor.n_in, self.predictor.n_out
        ok = (self.disambiguator.n_in == d and self.disambiguator.n_out == L
              and self.generator.n_in == L and self.generator.n_out == d
              and self.discriminator.n_in == d and self.discriminator.n_out == 1)
        if not ok:
            raise ShapeError("component networks disagree on feature/label widths")

    @property
    def n_features(self) -> int:
        return self.predictor.n_in

    @property
    def n_labels(self) -> int:
        return self.predictor.n_out

    def networks(self) -> dict[str, Network]:
        return {"predictor": self.predictor, "disambiguator": self.disambiguator,
                "generator": self.generator, "discriminator": self.discriminator}


def build_model(n_features: int, n_labels: int, beta: float = 1.0, hidden: int = HIDDEN,
                seed: int = 0, non_saturating: bool = False,
                disambiguator_bias: float = 0.0) -> PmlGanModel:
    """Fresh model. ``disambiguator_bias`` initializes D~'s output bias; a large
    negative value starts training from ``z ~= y``."""
    rng = np.random.default_rng(seed)
    d, L, h = n_features, n_labels, hidden
    model = PmlGanModel(
        predictor=nn.mlp([d, h, h, L], "sigmoid", rng),
        disambiguator=nn.mlp([d, h, h, L], "sigmoid", rng),
        # five affine maps; batch norm on the middle three
        generator=nn.mlp([L, h, h, h, h, d], "tanh", rng, batchnorm_hidden={1, 2, 3}),
        discriminator=nn.mlp([d, h, h, 1], "sigmoid", rng),
        beta=beta,
        non_saturating=non_saturating,
    )
    model.disambiguator.layers[-2].b[:] = disambiguator_bias
    return model


def predict(model: PmlGanModel, x) -> np.ndarray:
    return model.predictor.forward(x, EVAL)


@dataclass
class GenSideResult:
    loss: float
    cls: float
    gen: float
    adv: float
    grads: dict[str, list[np.ndarray]] = field(default_factory=dict)


def _zero_grads(net: Network):
    return [np.zeros_like(p) for p in net.params()]


def joint_generator_side_loss(model: PmlGanModel, x, y, prior_z=None,
                              terms=LOSS_TERMS, use_disambiguator: bool = True,
                              with_grads: bool = True,
                              target_gradient: bool = True) -> GenSideResult:
    """Value (and gradients for F, D~, G) of ``l_c + l_g + beta * adv``.

    D is held constant: its parameters get no gradient here, but G's
    adversarial gradient flows through it. With ``use_disambiguator=False``
    the targets are the raw candidates (``z = y``).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    terms = set(terms)
    F, Dt, G, D = model.predictor, model.disambiguator, model.generator, model.discriminator

    if use_disambiguator:
        delta, c_dt = Dt.forward_cached(x, TRAIN)
        z = disambiguate(y, delta)
    else:
        z = y
    f, c_f = F.forward_cached(x, TRAIN)
    cls = classification_loss(f, z)
    df, dz = classification_loss_grads(f, z)
    if not target_gradient:
        dz = np.zeros_like(dz)

    gen = 0.0
    adv = 0.0
    g_grads = _zero_grads(G)
    if "gen" in terms:
        x_hat, c_g = G.forward_cached(z, TRAIN)
        gen = generation_loss(x_hat, x)
        if with_grads:
            dz_g, gg = G.backward(generation_loss_grad(x_hat, x), c_g)
            dz = dz + dz_g
            g_grads = [a + b for a, b in zip(g_grads, gg)]
    if "adv" in terms:
        if prior_z is None:
            raise ValueError("adversarial term needs prior samples")
        x_fake, c_gp = G.forward_cached(prior_z, TRAIN)
        d_fake, c_d = D.forward_cached(x_fake, TRAIN)
        adv = generator_adv_loss(d_fake, model.non_saturating)
        if with_grads:
            dd = model.beta * generator_adv_loss_grad(d_fake, model.non_saturating)
            dx_fake, _ = D.backward(dd, c_d)
            _, gg = G.backward(dx_fake, c_gp)
            g_grads = [a + b for a, b in zip(g_grads, gg)]

    result = GenSideResult(loss=cls + gen + model.beta * adv, cls=cls, gen=gen, adv=adv)
    if not with_grads:
        return result
    _, f_grads = F.backward(df, c_f)
    if use_disambiguator:
        _, dt_grads = Dt.backward(disambiguate_grad(y, delta, dz), c_dt)
    else:
        dt_grads = _zero_grads(Dt)
    result.grads = {"predictor": f_grads, "disambiguator": dt_grads, "generator": g_grads}
    return result


def discriminator_objective(model: PmlGanModel, x_real, prior_z, with_grads: bool = True):
    """``beta * discriminator_loss`` and its gradient for D's parameters (to ascend)."""
    D = model.discriminator
    x_fake, _ = model.generator.forward_cached(prior_z, TRAIN)
    d_real, c_r = D.forward_cached(x_real, TRAIN)
    d_fake, c_f = D.forward_cached(x_fake, TRAIN)
    raw = discriminator_loss(d_real, d_fake)
    if not with_grads:
        return model.beta * raw, raw, None
    dr, dfk = discriminator_loss_grads(d_real, d_fake)
    _, gr = D.backward(model.beta * dr, c_r)
    _, gf = D.backward(model.beta * dfk, c_f)
    return model.beta * raw, raw, [a + b for a, b in zip(gr, gf)]


# ---------------------------------------------------------------------------
# optimal-discriminator theory on finite supports

def entropy_binomial(z) -> float:
    z = np.asarray(z, dtype=np.float64)
    return float((entr(z) + entr(1.0 - z)).sum())


def _check_distribution(p, name):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or np.any(p < 0) or not np.isclose(p.sum(), 1.0, atol=1e-9):
        raise ValueError(f"{name} is not a probability vector")
    return p


def optimal_discriminator(p_s, p_g) -> np.ndarray:
    p_s = _check_distribution(p_s, "p_s")
    p_g = _check_distribution(p_g, "p_g")
    _same_shape(p_s, p_g, "optimal_discriminator")
    total = p_s + p_g
    if np.any(total == 0):
        raise ValueError("support point with zero mass under both distributions")
    return p_s / total


def adv_value_at_optimum(p_s, p_g) -> float:
    """Adversarial value with D at its optimum; points with no mass are dropped."""
    p_s = _check_distribution(p_s, "p_s")
    p_g = _check_distribution(p_g, "p_g")
    _same_shape(p_s, p_g, "adv_value_at_optimum")
    keep = (p_s + p_g) > 0
    p_s, p_g = p_s[keep], p_g[keep]
    d_star = optimal_discriminator(p_s, p_g)
    return float(xlogy(p_s, d_star).sum() + xlogy(p_g, 1.0 - d_star).sum())


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout (all integers little-endian):
#   8 bytes   magic b"PMLGAN\x00\x01" (last byte = format version)
#   uint64    header length H
#   H bytes   UTF-8 JSON header: beta, flags, per-network layer descriptions,
#             and an ordered list of array entries {"name", "shape"}
#   payload   the arrays in header order, float64 little-endian, C order

MAGIC = b"PMLGAN\x00\x01"


def _layer_spec(layer):
    if isinstance(layer, nn.Affine):
        return {"kind": "affine", "shape": list(layer.W.shape), "bias": layer.bias}
    if isinstance(layer, nn.BatchNorm):
        return {"kind": "batchnorm", "width": layer.width,
                "momentum": layer.momentum, "eps": layer.eps}
    return {"kind": "activation", "fn": layer.kind, "slope": layer.slope}


def _layer_arrays(layer):
    if isinstance(layer, nn.Affine):
        return {"W": layer.W, "b": layer.b} if layer.bias else {"W": layer.W}
    if isinstance(layer, nn.BatchNorm):
        return {"gamma": layer.gamma, "shift": layer.shift,
                "running_mean": layer.running_mean, "running_var": layer.running_var}
    return {}


def _build_layer(spec):
    if spec["kind"] == "affine":
        return nn.Affine(*spec["shape"], bias=spec["bias"])
    if spec["kind"] == "batchnorm":
        return nn.BatchNorm(spec["width"], spec["momentum"], spec["eps"])
    return nn.Activation(spec["fn"], spec["slope"])


def save_checkpoint(model: PmlGanModel, path, optimizers: dict | None = None,
                    extra: dict | None = None) -> None:
    """Write ``model`` (and optionally Adam states, keyed by name) to ``path``."""
    arrays: list[tuple[str, np.ndarray]] = []
    nets = {}
    for net_name, net in model.networks().items():
        nets[net_name] = [_layer_spec(layer) for layer in net.layers]
        for i, layer in enumerate(net.layers):
            for k, a in _layer_arrays(layer).items():
                arrays.append((f"{net_name}.{i}.{k}", a))
    opt_meta = {}
    for opt_name, opt in (optimizers or {}).items():
        st = opt.state
        opt_meta[opt_name] = {"lr": st.lr, "beta1": st.beta1, "beta2": st.beta2,
                              "eps": st.eps, "t": st.t, "n": len(st.m)}
        for j, (m, v) in enumerate(zip(st.m, st.v)):
            arrays.append((f"opt.{opt_name}.m.{j}", m))
            arrays.append((f"opt.{opt_name}.v.{j}", v))
    header = {"beta": model.beta, "non_saturating": model.non_saturating,
              "networks": nets, "optimizers": opt_meta, "extra": extra or {},
              "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays]}
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Return ``(model, optimizer_states, extra)`` from a file written by ``save_checkpoint``."""
    data = Path(path).read_bytes()
    if data[:6] != MAGIC[:6]:
        raise ValueError(f"{path}: not a PML-GAN checkpoint")
    if data[6:8] != MAGIC[6:8]:
        raise ValueError(f"{path}: unsupported checkpoint version {data[6:8]!r}")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen])
    offset = 16 + hlen
    store = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        store[entry["name"]] = np.frombuffer(data, dtype="<f8", count=count,
                                             offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * count
    nets = {}
    for net_name, specs in header["networks"].items():
        layers = [_build_layer(s) for s in specs]
        for i, layer in enumerate(layers):
            for k in _layer_arrays(layer):
                setattr(layer, k, store[f"{net_name}.{i}.{k}"].copy())
        nets[net_name] = Network(layers)
    model = PmlGanModel(beta=header["beta"], non_saturating=header["non_saturating"], **nets)
    opt_states = {}
    for opt_name, meta in header["optimizers"].items():
        st = nn.AdamState(lr=meta["lr"], beta1=meta["beta1"], beta2=meta["beta2"],
                          eps=meta["eps"], t=meta["t"])
        st.m = [store[f"opt.{opt_name}.m.{j}"].copy() for j in range(meta["n"])]
        st.v = [store[f"opt.{opt_name}.v.{j}"].copy() for j in range(meta["n"])]
        opt_states[opt_name] = st
    return model, opt_states, header["extra"]
