"""Finite-difference verification of every gradient path used in training.

``run_gradchecks`` is what the ``gradcheck`` command executes; each check
returns the max relative error between backprop and central differences.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .model import (
    build_model,
    classification_loss,
    classification_loss_grads,
    disambiguate,
    disambiguate_grad,
    discriminator_loss,
    discriminator_loss_grads,
    discriminator_objective,
    generation_loss,
    generation_loss_grad,
    joint_generator_side_loss,
)
from .nn import gradient_check, numeric_grad, relative_error, roundoff_floor

H = 1e-5
TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float = TOL

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.error) and self.error <= self.tol)


def _random_net(rng, act, use_bn):
    n_in, width, n_out = (int(v) for v in rng.integers(1, 9, size=3))
    layers = [nn.Affine(n_in, width, rng, bias=not use_bn)]
    if use_bn:
        bn = nn.BatchNorm(width)
        bn.gamma[:] = rng.uniform(0.5, 2.0, size=width)
        bn.shift[:] = rng.normal(size=width)
        layers.append(bn)
    layers += [nn.Activation(act), nn.Affine(width, n_out, rng), nn.Activation("sigmoid")]
    for layer in (layers[0], layers[-2]):
        if layer.bias:
            layer.b[:] = rng.normal(size=n_out if layer is layers[-2] else width)
    return nn.Network(layers)


def layer_checks(seed: int = 0, trials: int = 4) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for act in ("sigmoid", "tanh", "relu", "leaky_relu"):
        for use_bn in (False, True):
            err = 0.0
            for _ in range(trials):
                net = _random_net(rng, act, use_bn)
                m = int(rng.integers(3, 5))
                x = rng.normal(size=(m, net.n_in))
                target = rng.uniform(size=(m, net.n_out))
                err = max(err, gradient_check(
                    net, lambda o, t=target: (0.5 * float(((o - t) ** 2).sum()), o - t), x, H))
            out.append(CheckResult(f"layers[{act}{'+bn' if use_bn else ''}]", err))
    return out


def _fixture(seed):
    rng = np.random.default_rng(seed)
    d, L, m, n = int(rng.integers(3, 11)), int(rng.integers(2, 7)), 4, 4
    model = build_model(d, L, beta=float(rng.uniform(0.5, 2.0)), hidden=7, seed=seed)
    # nonzero biases everywhere so no check rides on a symmetric start
    for net in model.networks().values():
        for layer in net.layers:
            if isinstance(layer, nn.Affine) and layer.bias:
                layer.b[:] = rng.normal(scale=0.3, size=layer.b.shape)
            if isinstance(layer, nn.BatchNorm):
                layer.gamma[:] = rng.uniform(0.5, 2.0, size=layer.width)
                layer.shift[:] = rng.normal(scale=0.3, size=layer.width)
    x = rng.uniform(-1, 1, size=(m, d))
    y = (rng.random((m, L)) < 0.5).astype(float)
    y[:, 0] = 1.0
    prior = rng.uniform(0, 1, size=(n, L))
    return model, x, y, prior, rng


def component_checks(seed: int = 0) -> list[CheckResult]:
    model, x, y, prior, rng = _fixture(seed)
    F, Dt, G, D = model.predictor, model.disambiguator, model.generator, model.discriminator
    z = rng.uniform(0, 1, size=y.shape) * y

    def cls_loss(o):
        return classification_loss(o, z), classification_loss_grads(o, z)[0]

    def dis_loss(o):
        # CE of a fixed prediction against relu(y - delta), seen as a function of delta
        f = np.full_like(o, 0.3)
        zz = disambiguate(y, o)
        return classification_loss(f, zz), disambiguate_grad(y, o, classification_loss_grads(f, zz)[1])

    def gen_loss(o):
        return generation_loss(o, x), generation_loss_grad(o, x)

    def disc_loss(o):
        m = x.shape[0]
        dr, dfk = discriminator_loss_grads(o[:m], o[m:])
        return discriminator_loss(o[:m], o[m:]), np.vstack([dr, dfk])

    fake = np.tanh(rng.normal(size=(prior.shape[0], x.shape[1])))
    return [
        CheckResult("predictor/classification_loss", gradient_check(F, cls_loss, x, H)),
        CheckResult("disambiguator/classification_loss", gradient_check(Dt, dis_loss, x, H)),
        CheckResult("generator/generation_loss", gradient_check(G, gen_loss, z, H)),
        CheckResult("discriminator/discriminator_loss",
                    gradient_check(D, disc_loss, np.vstack([x, fake]), H)),
    ]


def joint_check(seed: int = 0, terms=("cls", "gen", "adv")) -> CheckResult:
    """All F, D~, G parameters of the joint generator-side loss, target path included."""
    model, x, y, prior, _ = _fixture(seed)
    res = joint_generator_side_loss(model, x, y, prior, terms)

    def value():
        return joint_generator_side_loss(model, x, y, prior, terms, with_grads=False).loss

    atol = roundoff_floor(res.loss, H)
    err = 0.0
    for name in ("predictor", "disambiguator", "generator"):
        for p, g in zip(model.networks()[name].params(), res.grads[name]):
            err = max(err, relative_error(g, numeric_grad(value, p, H), atol))
    return CheckResult(f"joint_generator_side_loss[{'+'.join(terms)}]", err)


def discriminator_step_check(seed: int = 0) -> CheckResult:
    model, x, _, prior, _ = _fixture(seed)
    obj, _, grads = discriminator_objective(model, x, prior)

    def value():
        return discriminator_objective(model, x, prior, with_grads=False)[0]

    atol = roundoff_floor(obj, H)
    err = max(relative_error(g, numeric_grad(value, p, H), atol)
              for p, g in zip(model.discriminator.params(), grads))
    return CheckResult("discriminator_objective", err)


def run_gradchecks(seed: int = 0, n_fixtures: int = 3) -> list[CheckResult]:
    results = layer_checks(seed)
    for s in range(seed, seed + n_fixtures):
        results += component_checks(s)
        results.append(joint_check(s))
        results.append(discriminator_step_check(s))
    return results
