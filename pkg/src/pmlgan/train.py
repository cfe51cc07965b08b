"""Alternating minibatch training of PML-GAN, beta selection, and ablation variants."""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .data import MultiLabelDataset
from .model import (
    EVAL,
    PmlGanModel,
    build_model,
    disambiguate,
    discriminator_objective,
    joint_generator_side_loss,
)

log = logging.getLogger(__name__)

VARIANTS = {
    "PML-GAN": frozenset({"cls", "gen", "adv"}),
    "CLS-GEN": frozenset({"cls", "gen"}),
    "CLS-GAN": frozenset({"cls", "adv"}),
    "CLS-ML": frozenset({"cls"}),
    # plain multi-label net on raw candidates, no disambiguator
    "RAW": frozenset({"cls"}),
}
PRIOR_KINDS = ("empirical_disambiguated", "bernoulli_marginal")
DEFAULT_BETA_GRID = (0.001, 0.01, 0.1, 1.0, 10.0)


class TrainingDiverged(RuntimeError):
    pass


def make_variant(variant: str) -> frozenset:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    return VARIANTS[variant]


@dataclass
class TrainConfig:
    batch_size: int = 64
    prior_samples: int = 1024
    disc_steps: int = 1
    beta_grid: tuple = DEFAULT_BETA_GRID
    beta: float | None = None          # fixed beta; skips selection when set
    epochs: int = 100
    learning_rate: float = 1e-3
    hidden: int = 100
    disambiguator_bias: float = -4.0
    target_gradient: bool = True
    prior_kind: str = "empirical_disambiguated"
    variant: str = "PML-GAN"
    non_saturating: bool = False
    seed: int = 0

    def __post_init__(self):
        self.beta_grid = tuple(float(b) for b in self.beta_grid)
        self.validate()

    def validate(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.prior_samples < 1:
            raise ValueError("prior_samples must be >= 1")
        if self.disc_steps < 1:
            raise ValueError("disc_steps must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.beta_grid:
            raise ValueError("beta_grid must be nonempty")
        if any(b < 0 for b in self.beta_grid) or (self.beta is not None and self.beta < 0):
            raise ValueError("beta values must be nonnegative")
        if self.prior_kind not in PRIOR_KINDS:
            raise ValueError(f"prior_kind must be one of {PRIOR_KINDS}")
        make_variant(self.variant)


# ---------------------------------------------------------------------------
# config files: one ``key = value`` per line, '#' starts a comment,
# lists are comma separated. Keys are the TrainConfig field names.

def _coerce(name: str, raw: str):
    kind = {f.name: f.type for f in dataclasses.fields(TrainConfig)}.get(name)
    if kind is None:
        raise KeyError(name)
    raw = raw.strip()
    if name == "beta_grid":
        return tuple(float(v) for v in raw.split(",") if v.strip())
    if name == "beta":
        return None if raw.lower() in ("", "none") else float(raw)
    if kind == "bool":
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{name}: not a boolean: {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def config_from_mapping(values: dict, base: TrainConfig | None = None) -> TrainConfig:
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    kwargs = dataclasses.asdict(base) if base else {}
    for key, val in values.items():
        if key not in known:
            raise ValueError(f"unknown config key {key!r}")
        kwargs[key] = _coerce(key, val) if isinstance(val, str) else val
    return TrainConfig(**kwargs)


def config_to_text(cfg: TrainConfig) -> str:
    lines = []
    for key, val in dataclasses.asdict(cfg).items():
        if isinstance(val, tuple):
            val = ", ".join(repr(v) for v in val)
        lines.append(f"{key} = {'none' if val is None else val}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    cls: float
    gen: float
    disc: float
    gen_adv: float
    seconds: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)

    @property
    def final_cls(self) -> float:
        return self.epochs[-1].cls

    def column(self, name: str) -> list[float]:
        return [getattr(e, name) for e in self.epochs]


@dataclass
class StepRecord:
    cls: float
    gen: float
    disc: float
    gen_adv: float


class Trainer:
    """Owns one model, its two Adam optimizers, and the run's RNG."""

    def __init__(self, model: PmlGanModel, config: TrainConfig, rng: np.random.Generator | None = None):
        self.model = model
        self.config = config
        self.terms = make_variant(config.variant)
        self.use_disambiguator = config.variant != "RAW"
        # separate streams: minibatch order is identical across variants at a given seed
        shuffle_ss, prior_ss = np.random.SeedSequence(config.seed).spawn(2)
        self.rng = rng if rng is not None else np.random.default_rng(shuffle_ss)
        self.prior_rng = np.random.default_rng(prior_ss)
        lr = config.learning_rate
        self.opt_main = nn.Adam(self.main_params(), lr=lr)
        self.opt_disc = nn.Adam(model.discriminator.params(), lr=lr)

    def main_params(self) -> list[np.ndarray]:
        m = self.model
        return m.predictor.params() + m.disambiguator.params() + m.generator.params()

    def optimizers(self) -> dict:
        return {"main": self.opt_main, "disc": self.opt_disc}


def sample_prior(dataset: MultiLabelDataset, model: PmlGanModel, n: int, kind: str,
                 rng: np.random.Generator) -> np.ndarray:
    if n < 1:
        raise ValueError("need n >= 1 prior samples")
    if dataset.n == 0:
        raise ValueError("cannot sample a prior from an empty dataset")
    if kind == "empirical_disambiguated":
        idx = rng.integers(0, dataset.n, size=n)
        # eval-mode forward: no cache, so no gradient path back into D~
        delta = model.disambiguator.forward_cached(dataset.X[idx], EVAL)[0]
        return disambiguate(dataset.Y[idx], delta)
    if kind == "bernoulli_marginal":
        freq = dataset.Y.mean(axis=0)
        return (rng.random((n, dataset.n_labels)) < freq).astype(np.float64)
    raise ValueError(f"unknown prior kind {kind!r}")


def train_step(trainer: Trainer, x, y, prior_z=None, disc_priors=()) -> StepRecord:
    """One outer iteration: descend on F, D~, G, then ascend on D once per disc prior.

    ``disc_priors`` is iterated only after the first update, so a lazy iterable
    samples its priors from the updated disambiguator.
    """
    model, terms = trainer.model, trainer.terms
    res = joint_generator_side_loss(model, x, y, prior_z, terms, trainer.use_disambiguator,
                                    target_gradient=trainer.config.target_gradient)
    grads = res.grads
    main_grads = grads["predictor"] + grads["disambiguator"] + grads["generator"]
    # frozen components keep their exact values and Adam moments
    uses_g = "gen" in terms or "adv" in terms
    touched = ([True] * len(grads["predictor"])
               + [trainer.use_disambiguator] * len(grads["disambiguator"])
               + [uses_g] * len(grads["generator"]))
    _masked_adam(trainer.opt_main, main_grads, touched)

    disc = 0.0
    if "adv" in terms:
        values = []
        for prior in disc_priors:
            raw_scaled, _, dgrads = discriminator_objective(model, x, prior)
            trainer.opt_disc.step(dgrads, ascend=True)
            values.append(raw_scaled)
        disc = float(np.mean(values)) if values else 0.0
    return StepRecord(cls=res.cls, gen=res.gen, disc=disc, gen_adv=res.adv)


def _masked_adam(opt: nn.Adam, grads, touched):
    params = [p for p, t in zip(opt.params, touched) if t]
    sub = [g for g, t in zip(grads, touched) if t]
    st = opt.state
    if not st.m:
        st.m = [np.zeros_like(p) for p in opt.params]
        st.v = [np.zeros_like(p) for p in opt.params]
    view = nn.AdamState(lr=st.lr, beta1=st.beta1, beta2=st.beta2, eps=st.eps, t=st.t,
                        m=[m for m, t in zip(st.m, touched) if t],
                        v=[v for v, t in zip(st.v, touched) if t])
    nn.adam_step(params, sub, view)
    st.t = view.t


def _check_finite(rec: StepRecord, epoch: int, batch: int):
    for name in ("cls", "gen", "disc", "gen_adv"):
        v = getattr(rec, name)
        if not np.isfinite(v):
            raise TrainingDiverged(f"{name} loss became {v} at epoch {epoch}, batch {batch}")


def train_epochs(trainer: Trainer, train_set: MultiLabelDataset, epochs: int | None = None,
                 history: TrainHistory | None = None) -> TrainHistory:
    cfg = trainer.config
    history = history or TrainHistory()
    epochs = cfg.epochs if epochs is None else epochs
    m = cfg.batch_size
    adv = "adv" in trainer.terms
    rng = trainer.rng

    def prior():
        return sample_prior(train_set, trainer.model, cfg.prior_samples, cfg.prior_kind,
                            trainer.prior_rng)

    for epoch in range(epochs):
        start = time.perf_counter()
        perm = rng.permutation(train_set.n)
        recs = []
        for b, lo in enumerate(range(0, train_set.n, m)):
            idx = perm[lo:lo + m]
            if idx.size < 2:
                continue  # batch norm needs two rows
            x, y = train_set.X[idx], train_set.Y[idx]
            prior_z = prior() if adv else None
            disc_priors = (prior() for _ in range(cfg.disc_steps)) if adv else ()
            rec = train_step(trainer, x, y, prior_z, disc_priors)
            _check_finite(rec, len(history.epochs) + 1, b)
            recs.append(rec)
        if not recs:
            raise ValueError("training set too small for a single minibatch")
        history.epochs.append(EpochRecord(
            cls=float(np.mean([r.cls for r in recs])),
            gen=float(np.mean([r.gen for r in recs])),
            disc=float(np.mean([r.disc for r in recs])),
            gen_adv=float(np.mean([r.gen_adv for r in recs])),
            seconds=time.perf_counter() - start,
        ))
    return history


def new_model(train_set: MultiLabelDataset, config: TrainConfig, beta: float) -> PmlGanModel:
    return build_model(train_set.n_features, train_set.n_labels, beta=beta,
                       hidden=config.hidden, seed=config.seed,
                       non_saturating=config.non_saturating,
                       disambiguator_bias=config.disambiguator_bias)


def train(model: PmlGanModel, train_set: MultiLabelDataset, config: TrainConfig) -> TrainHistory:
    return train_epochs(Trainer(model, config), train_set)


@dataclass
class BetaSelection:
    best_beta: float
    histories: dict
    model: PmlGanModel
    failures: dict = field(default_factory=dict)


def select_beta(train_set: MultiLabelDataset, config: TrainConfig) -> BetaSelection:
    """Train one model per grid value with identical seeds; keep the lowest final L_c.

    Variants without an adversarial term do not depend on beta, so they train once.
    """
    grid = sorted(config.beta_grid)
    if config.beta is not None:
        grid = [config.beta]
    elif "adv" not in make_variant(config.variant):
        grid = grid[:1]
    histories, models, failures = {}, {}, {}
    for beta in grid:
        model = new_model(train_set, config, beta)
        try:
            histories[beta] = train(model, train_set, config)
            models[beta] = model
        except TrainingDiverged as exc:
            log.warning("beta=%g diverged: %s", beta, exc)
            failures[beta] = str(exc)
    if not histories:
        raise TrainingDiverged(f"every beta diverged: {failures}")
    best = pick_beta({b: h.final_cls for b, h in histories.items()})
    return BetaSelection(best, histories, models[best], failures)


def pick_beta(final_cls: dict) -> float:
    """Argmin of final L_c; ties go to the smaller beta."""
    return min(final_cls, key=lambda b: (final_cls[b], b))


def load_config(path, overrides: dict | None = None) -> TrainConfig:
    values = parse_config_text(Path(path).read_text())
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return config_from_mapping(values)
