"""End-to-end orchestration: self-supervised source pretraining followed by
active adaptation cycles, plus linear-probe evaluation and metrics logging.

Stage 0 trains encoder and prototypes on the source domain with the swap
prediction loss alone. Each of the remaining n_cycles - 1 stages scores the
unlabeled target pool (mutual information from the dropout-sampled rotation
model plus cluster-distance diversity on current embeddings), moves the
top-k of the next pool batch into the core-set, trains the target model on
the core-set with the combined objective, and retrains the rotation model
on rotations of the core-set.

Only the evaluator ever sees target labels: ``pretrain_source`` and
``adapt`` accept raw sample matrices and an optional accuracy callback, so
label arrays cannot reach the training path by construction.

All randomness flows from per-phase generators seeded by (config.seed,
phase index); identical configs reproduce checkpoints and metrics bitwise.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import active, alignment, data, models, ssl_swap
from . import autodiff as ad
from .autodiff import Tensor
from .container import (MAGIC_EMBEDDINGS, check_magic, read_tensor_map,
                        write_tensor_map)
from .errors import ConfigError, ContractError, NumericError

# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

SCHEDULES = ("cosine", "multistep")


@dataclass(frozen=True)
class OptimSpec:
    """SGD-with-momentum settings for one training phase.

    The schedule is evaluated on fractional progress through the phase:
    cosine decays smoothly to zero, multistep multiplies by gamma at each
    milestone fraction.
    """

    lr: float
    momentum: float = 0.9
    weight_decay: float = 1e-6
    schedule: str = "cosine"
    milestones: tuple[float, ...] = (0.5, 0.75)
    gamma: float = 0.1

    def __post_init__(self) -> None:
        if not (math.isfinite(self.lr) and self.lr > 0):
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(
                f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.schedule!r}; expected "
                              f"one of {', '.join(SCHEDULES)}")

    def lr_at(self, progress: float) -> float:
        p = min(max(progress, 0.0), 1.0)
        if self.schedule == "cosine":
            return self.lr * 0.5 * (1.0 + math.cos(math.pi * p))
        drops = sum(1 for m in self.milestones if p >= m)
        return self.lr * self.gamma ** drops


class Sgd:
    """SGD with momentum and L2 weight decay over a named parameter dict.

    ``step`` consumes the gradients assigned by the last backward pass and
    clears them afterwards so stale gradients can never be applied twice.
    """

    def __init__(self, spec: OptimSpec, params: dict[str, Tensor]):
        self.spec = spec
        self.params = params
        self.velocity = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self, progress: float) -> None:
        lr = self.spec.lr_at(progress)
        for name, t in self.params.items():
            if t.grad is None:
                continue
            g = t.grad + self.spec.weight_decay * t.data
            v = self.velocity[name]
            v *= self.spec.momentum
            v += g
            t.data -= lr * v
            t.grad = None


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

LOSS_VARIANTS = ("consolidated", "dal_vat", "entropy")


def parse_widths(text: str) -> tuple[int, ...]:
    try:
        widths = tuple(int(part) for part in text.split(","))
    except ValueError as exc:
        raise ConfigError(
            f"encoder_widths must be comma-separated ints, got {text!r}") from exc
    if not widths or any(w < 1 for w in widths):
        raise ConfigError(f"encoder_widths must be positive, got {text!r}")
    return widths


@dataclass(frozen=True)
class RunConfig:
    """Flat run settings; field names double as config-file keys."""

    # data generation
    n_classes: int = 10
    samples_per_class: int = 100
    image_side: int = 16
    intensity_scale: float = 0.7
    noise_sigma: float = 0.15
    translation_px: int = 0
    contrast_gamma: float = 1.25
    data_seed: int = 0
    # architecture
    encoder_widths: str = "128,128"
    embed_dim: int = 32
    k_prototypes: int = 16
    domain_hidden: int = 64
    dropout_rate: float = 0.25
    # swap prediction
    tau: float = 0.1
    sinkhorn_epsilon: float = 0.05
    sinkhorn_iters: int = 3
    # alignment objective
    lambda1: float = 0.25
    lambda2: float = 0.02
    grl_lambda: float = 1.0
    vat_xi: float = 1e-6
    vat_eps_radius: float = 1.0
    vat_power_iters: int = 1
    loss_variant: str = "consolidated"
    # acquisition
    acquisition: str = "hybrid"
    beta: float = 1.0
    t_passes: int = 10
    kmeans_k: int = 16
    kmeans_max_iter: int = 100
    budget_total: int = 900
    n_cycles: int = 4
    rescore_each_cycle: bool = True
    # training
    pretrain_epochs: int = 30
    target_epochs: int = 30
    rotation_epochs: int = 5
    batch_size: int = 64
    # flips mirror classes onto each other, so views keep orientation
    augment_flip: bool = False
    ssl_lr: float = 0.01
    target_lr: float = 0.01
    rotation_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-6
    # cold-started cycles retrain from the source checkpoint on the grown
    # core-set, which keeps runs insensitive to early-cycle batch composition
    warm_start: bool = False
    # frozen prototypes keep the source cluster anchors fixed while the
    # encoder adapts onto them
    freeze_prototypes: bool = True
    # bookkeeping
    seed: int = 0
    real_clock: bool = False

    def __post_init__(self) -> None:
        parse_widths(self.encoder_widths)
        positive = ("n_classes", "samples_per_class", "image_side", "embed_dim",
                    "domain_hidden", "tau", "sinkhorn_epsilon", "sinkhorn_iters",
                    "beta", "kmeans_k", "kmeans_max_iter", "budget_total",
                    "batch_size", "ssl_lr", "target_lr", "rotation_lr",
                    "vat_xi", "vat_eps_radius", "vat_power_iters")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(
                    f"{name} must be positive, got {getattr(self, name)}")
        nonneg = ("intensity_scale", "noise_sigma", "translation_px",
                  "contrast_gamma", "lambda1", "lambda2", "grl_lambda",
                  "weight_decay", "pretrain_epochs", "target_epochs",
                  "rotation_epochs")
        for name in nonneg:
            if getattr(self, name) < 0:
                raise ConfigError(
                    f"{name} must be >= 0, got {getattr(self, name)}")
        if self.k_prototypes < 2:
            raise ConfigError(
                f"k_prototypes must be >= 2, got {self.k_prototypes}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(
                f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(
                f"momentum must lie in [0, 1), got {self.momentum}")
        if self.t_passes < 2:
            raise ConfigError(f"t_passes must be >= 2, got {self.t_passes}")
        if self.n_cycles < 2:
            raise ConfigError(
                f"n_cycles must be >= 2 (one pretraining stage plus at least "
                f"one adaptation stage), got {self.n_cycles}")
        if self.budget_total % (self.n_cycles - 1) != 0:
            raise ConfigError(
                f"budget_total {self.budget_total} must split evenly across "
                f"{self.n_cycles - 1} adaptation cycles")
        if self.acquisition not in active.SCORING_MODES:
            raise ConfigError(
                f"unknown acquisition {self.acquisition!r}; expected one of "
                f"{', '.join(active.SCORING_MODES)}")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ConfigError(
                f"unknown loss_variant {self.loss_variant!r}; expected one of "
                f"{', '.join(LOSS_VARIANTS)}")

    @property
    def widths(self) -> tuple[int, ...]:
        return parse_widths(self.encoder_widths)

    @property
    def in_dim(self) -> int:
        return self.image_side * self.image_side

    def domain_spec(self) -> data.DomainSpec:
        shift = data.ShiftSpec(self.intensity_scale, self.noise_sigma,
                               self.translation_px, self.contrast_gamma)
        return data.DomainSpec(self.n_classes, self.samples_per_class,
                               self.image_side, shift, self.data_seed)

    def augment_config(self) -> data.AugmentConfig:
        return data.AugmentConfig(flip=self.augment_flip)


def canonical_text(config: RunConfig) -> str:
    """Sorted ``key = value`` rendering; doubles as a loadable config file."""
    lines = []
    for f in sorted(dataclasses.fields(config), key=lambda f: f.name):
        v = getattr(config, f.name)
        if isinstance(v, bool):
            rendered = "true" if v else "false"
        elif isinstance(v, float):
            rendered = repr(v)
        else:
            rendered = str(v)
        lines.append(f"{f.name} = {rendered}")
    return "\n".join(lines) + "\n"


def config_fingerprint(config: RunConfig) -> int:
    return models.fnv1a64(canonical_text(config))


def parse_config_text(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    pairs: dict[str, str] = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(
                f"config line {ln}: expected 'key = value', got {raw!r}")
        pairs[key.strip()] = value.strip()
    return pairs


def _coerce(key: str, raw: str, kind: str):
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(
            f"config key {key!r}: cannot parse {raw!r} as {kind}") from exc


def config_from_pairs(pairs: dict[str, str],
                      base: RunConfig | None = None) -> RunConfig:
    """Apply string overrides to a base config; unknown keys are hard errors."""
    base = RunConfig() if base is None else base
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    updates = {}
    for key, raw in pairs.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        updates[key] = _coerce(key, raw, str(fields[key].type))
    return dataclasses.replace(base, **updates)


def load_config(path: str | Path,
                overrides: dict[str, str] | None = None) -> RunConfig:
    pairs = parse_config_text(Path(path).read_text(encoding="utf-8"))
    if overrides:
        pairs.update(overrides)
    return config_from_pairs(pairs)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass
class MetricsRecord:
    """One training epoch: loss components, core-set size, probe accuracies.

    Accuracies are -1.0 when no evaluator was supplied; wall_clock_ms is 0.0
    unless the run enables real_clock, keeping logs reproducible.
    """

    stage: int
    epoch: int
    swap: float
    dal: float
    ent: float
    vat: float
    total: float
    coreset_size: int
    source_probe_acc: float
    target_acc: float
    wall_clock_ms: float


def write_metrics(path: str | Path, records: list[MetricsRecord]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(dataclasses.asdict(r)) + "\n")


def read_metrics(path: str | Path) -> list[MetricsRecord]:
    records = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            records.append(MetricsRecord(**json.loads(line)))
    return records


# ---------------------------------------------------------------------------
# Linear-probe evaluation
# ---------------------------------------------------------------------------

PROBE_STEPS = 200
PROBE_LR = 0.1
EVAL_SPLIT_SEED = 1729
EVAL_HOLDOUT_FRAC = 0.2

Evaluator = Callable[[models.ModelParams], tuple[float, float]]


def _embed(enc: models.EncoderParams, x: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        return models.encode(enc, x, normalize=True).data


def fit_probe(feats: np.ndarray, labels: np.ndarray, n_classes: int,
              steps: int = PROBE_STEPS, lr: float = PROBE_LR):
    """Multinomial logistic regression: zero init, full-batch descent."""
    x = np.asarray(feats, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n = x.shape[0]
    w = np.zeros((x.shape[1], n_classes))
    b = np.zeros(n_classes)
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y] = 1.0
    for _ in range(steps):
        logits = x @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        p = e / e.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        w -= lr * (x.T @ g)
        b -= lr * g.sum(axis=0)
    return w, b


def probe_accuracy(w: np.ndarray, b: np.ndarray, feats: np.ndarray,
                   labels: np.ndarray) -> float:
    pred = np.argmax(np.asarray(feats) @ w + b, axis=1)
    return float(np.mean(pred == np.asarray(labels, dtype=np.int64)))


def evaluate(ckpt: models.Checkpoint | models.ModelParams,
             bundle: data.DatasetBundle) -> dict[str, float]:
    """Probe accuracies of a model on a bundle.

    Fits the probe on frozen encoder embeddings of a fixed 80% source
    split, then scores the held-out 20% and the full target set. This is
    the only routine in the package that reads target_y_eval.
    """
    mp = ckpt.models() if isinstance(ckpt, models.Checkpoint) else ckpt
    src_z = _embed(mp.encoder, bundle.source_x)
    tgt_z = _embed(mp.encoder, bundle.target_x)
    n_classes = int(np.max(bundle.source_y)) + 1
    perm = np.random.default_rng(EVAL_SPLIT_SEED).permutation(src_z.shape[0])
    n_hold = max(1, int(round(src_z.shape[0] * EVAL_HOLDOUT_FRAC)))
    hold, fit = perm[:n_hold], perm[n_hold:]
    w, b = fit_probe(src_z[fit], bundle.source_y[fit], n_classes)
    return {
        "source_probe_acc": probe_accuracy(w, b, src_z[hold],
                                           bundle.source_y[hold]),
        "target_acc": probe_accuracy(w, b, tgt_z, bundle.target_y_eval),
    }


def make_evaluator(bundle: data.DatasetBundle) -> Evaluator:
    def evaluator(mp: models.ModelParams) -> tuple[float, float]:
        accs = evaluate(mp, bundle)
        return accs["source_probe_acc"], accs["target_acc"]
    return evaluator


# ---------------------------------------------------------------------------
# Shared training helpers
# ---------------------------------------------------------------------------

PHASE_PRETRAIN = 0
PHASE_ADAPT = 1


def _phase_seeder(seed: int, phase: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, phase]))


def _draw_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2 ** 63))


def _minibatches(n: int, batch_size: int, rng: np.random.Generator,
                 min_size: int) -> list[np.ndarray]:
    """Shuffled index chunks; a trailing chunk below min_size is dropped."""
    order = rng.permutation(n)
    chunks = []
    for start in range(0, n, batch_size):
        chunk = order[start:start + batch_size]
        if chunk.shape[0] >= min_size:
            chunks.append(chunk)
    return chunks


def _steps_per_epoch(n: int, batch_size: int, min_size: int) -> int:
    full, rem = divmod(n, batch_size)
    return full + (1 if rem >= min_size else 0)


def _check_input_matrix(x: np.ndarray, config: RunConfig, what: str) -> None:
    if x.ndim != 2:
        raise ContractError(f"{what} must be a 2-D sample matrix, got {x.shape}")
    if x.shape[0] == 0:
        raise ContractError(f"{what} is empty")
    if x.shape[1] != config.in_dim:
        raise ConfigError(
            f"{what} has {x.shape[1]} features but the config expects "
            f"image_side**2 = {config.in_dim}")


def _init_models(config: RunConfig, rng: np.random.Generator,
                 in_dim: int) -> models.ModelParams:
    enc = models.init_encoder(rng, in_dim, config.widths, config.embed_dim)
    return models.ModelParams(
        encoder=enc,
        prototypes=models.init_prototypes(rng, config.k_prototypes,
                                          config.embed_dim),
        domain=models.init_domain_classifier(rng, config.embed_dim,
                                             config.domain_hidden),
        rotation=models.init_rotation_classifier(rng, enc,
                                                 config.dropout_rate),
    )


def _check_compat(mp: models.ModelParams, config: RunConfig,
                  x: np.ndarray) -> None:
    enc = mp.encoder
    if enc.in_dim != x.shape[1]:
        raise ConfigError(
            f"checkpoint encoder expects {enc.in_dim} features, data has "
            f"{x.shape[1]}")
    if enc.embed_dim != config.embed_dim:
        raise ConfigError(
            f"checkpoint embed_dim {enc.embed_dim} != config embed_dim "
            f"{config.embed_dim}")
    if mp.prototypes.vectors.shape[0] != config.k_prototypes:
        raise ConfigError(
            f"checkpoint has {mp.prototypes.vectors.shape[0]} prototypes, "
            f"config expects {config.k_prototypes}")
    widths = tuple(w.shape[0] for w, _ in enc.layers)
    if widths != config.widths:
        raise ConfigError(
            f"checkpoint encoder widths {widths} != config widths "
            f"{config.widths}")


def _encoder_param_group(mp: models.ModelParams) -> dict[str, Tensor]:
    group = models.encoder_tensor_map("encoder", mp.encoder)
    group["prototypes.vectors"] = mp.prototypes.vectors
    return group


def _prob_fn(mp: models.ModelParams, tau: float) -> alignment.ModelFn:
    def fn(x: Tensor) -> Tensor:
        z = models.encode(mp.encoder, x, normalize=True)
        return ad.softmax(models.prototype_scores(z, mp.prototypes, tau),
                          axis=1)
    return fn


def _attach_last_good(exc: NumericError, ckpt: models.Checkpoint) -> None:
    if not hasattr(exc, "last_good"):
        exc.last_good = ckpt


# ---------------------------------------------------------------------------
# Stage 0: source pretraining
# ---------------------------------------------------------------------------

def pretrain_source(config: RunConfig, source_x: np.ndarray,
                    evaluator: Evaluator | None = None
                    ) -> tuple[models.Checkpoint, list[MetricsRecord]]:
    """Swap-prediction pretraining of encoder and prototypes on source data.

    Returns the final checkpoint (stage 0) and one MetricsRecord per epoch.
    On a non-finite loss the raised NumericError carries the checkpoint of
    the last completed epoch in its ``last_good`` attribute.
    """
    x = np.asarray(source_x, dtype=np.float64)
    _check_input_matrix(x, config, "source_x")
    fp = config_fingerprint(config)
    seeder = _phase_seeder(config.seed, PHASE_PRETRAIN)
    mp = _init_models(config, np.random.default_rng(_draw_seed(seeder)),
                      x.shape[1])
    opt = Sgd(OptimSpec(config.ssl_lr, config.momentum, config.weight_decay,
                        "cosine"), _encoder_param_group(mp))
    min_size = max(2, config.k_prototypes)
    total = max(1, config.pretrain_epochs
                * _steps_per_epoch(x.shape[0], config.batch_size, min_size))
    aug = config.augment_config()
    records: list[MetricsRecord] = []
    last_good = models.Checkpoint.of(mp, fp, 0)
    step = 0
    try:
        for epoch in range(config.pretrain_epochs):
            t0 = time.perf_counter()
            loss_sum, n_steps = 0.0, 0
            for chunk in _minibatches(x.shape[0], config.batch_size, seeder,
                                      min_size):
                va, vb = data.augment_two_views(x[chunk], _draw_seed(seeder),
                                                aug)
                z_a = models.encode(mp.encoder, va, normalize=True)
                z_b = models.encode(mp.encoder, vb, normalize=True)
                loss = ssl_swap.swap_loss(z_a, z_b, mp.prototypes, config.tau,
                                          config.sinkhorn_epsilon,
                                          config.sinkhorn_iters)
                val = loss.item()
                if not math.isfinite(val):
                    raise NumericError(
                        f"pretraining diverged at epoch {epoch}: loss {val}")
                ad.backward(loss)
                opt.step(step / total)
                ssl_swap.prototype_normalize(mp.prototypes)
                loss_sum += val
                n_steps += 1
                step += 1
            mean = loss_sum / n_steps if n_steps else 0.0
            s_acc, t_acc = evaluator(mp) if evaluator else (-1.0, -1.0)
            ms = (time.perf_counter() - t0) * 1e3 if config.real_clock else 0.0
            records.append(MetricsRecord(
                stage=0, epoch=epoch, swap=mean, dal=0.0, ent=0.0, vat=0.0,
                total=mean, coreset_size=0, source_probe_acc=s_acc,
                target_acc=t_acc, wall_clock_ms=ms))
            last_good = models.Checkpoint.of(mp, fp, 0)
    except NumericError as exc:
        _attach_last_good(exc, last_good)
        raise
    return models.Checkpoint.of(mp, fp, 0), records


# ---------------------------------------------------------------------------
# Rotation-model training
# ---------------------------------------------------------------------------

def _train_rotation(config: RunConfig, rot: models.RotationClassifierParams,
                    pool_x: np.ndarray, seeder: np.random.Generator) -> None:
    """Cross-entropy training of the rotation model on a 4x rotation pool."""
    rx, ry = active.build_rotation_pool(pool_x, _draw_seed(seeder))
    mask_rng = np.random.default_rng(_draw_seed(seeder))
    params = models.encoder_tensor_map("rotation.trunk", rot.trunk)
    params["rotation.head.weight"] = rot.head_w
    params["rotation.head.bias"] = rot.head_b
    opt = Sgd(OptimSpec(config.rotation_lr, config.momentum,
                        config.weight_decay, "multistep"), params)
    onehot = np.eye(4)[ry]
    keep = 1.0 - rot.dropout_rate
    total = max(1, config.rotation_epochs
                * _steps_per_epoch(rx.shape[0], config.batch_size, 2))
    step = 0
    for _ in range(config.rotation_epochs):
        for chunk in _minibatches(rx.shape[0], config.batch_size, seeder, 2):
            if rot.dropout_rate == 0.0:
                mask = np.ones((chunk.shape[0], rot.trunk.embed_dim))
            else:
                mask = (mask_rng.random((chunk.shape[0], rot.trunk.embed_dim))
                        < keep).astype(np.float64) / keep
            probs = models.rotation_predict(rot, rx[chunk], mask=mask)
            picked = ad.tsum(ad.mul(ad.log(ad.clamp(probs, 1e-7, 1.0)),
                                    Tensor(onehot[chunk])), axis=1)
            loss = ad.neg(ad.tmean(picked))
            if not math.isfinite(loss.item()):
                raise NumericError("rotation-model training diverged")
            ad.backward(loss)
            opt.step(step / total)
            step += 1


# ---------------------------------------------------------------------------
# Pool scoring
# ---------------------------------------------------------------------------

def _score_indices(config: RunConfig, mp: models.ModelParams,
                   x_t: np.ndarray, indices: list[int],
                   seeder: np.random.Generator) -> list[active.AcquisitionRecord]:
    idx = np.asarray(indices, dtype=np.int64)
    xs = x_t[idx]
    seed_mc = _draw_seed(seeder)
    seed_kmeans = _draw_seed(seeder)
    seed_mode = _draw_seed(seeder)
    stack = active.mc_dropout_probs(mp.rotation, xs, config.t_passes, seed_mc)
    unc = [active.bald_mutual_info(stack[i]) for i in range(idx.shape[0])]
    emb = _embed(mp.encoder, xs)
    k = min(config.kmeans_k, idx.shape[0])
    centroids, _, _ = active.kmeans(emb, k, config.kmeans_max_iter,
                                    seed=seed_kmeans)
    div = active.diversity_distances(emb, centroids)
    return active.score_pool(idx.tolist(), unc, div, config.acquisition,
                             config.beta, seed_mode)


# ---------------------------------------------------------------------------
# Embedding dumps
# ---------------------------------------------------------------------------

def dump_embeddings(path: str | Path, mp: models.ModelParams,
                    source_x: np.ndarray | None,
                    target_x: np.ndarray) -> None:
    """Write current embeddings of both domains with 0/1 domain tags."""
    if source_x is not None and len(source_x):
        zs = _embed(mp.encoder, np.asarray(source_x, dtype=np.float64))
    else:
        zs = np.zeros((0, mp.encoder.embed_dim))
    zt = _embed(mp.encoder, target_x)
    tags = np.concatenate([np.zeros(zs.shape[0]), np.ones(zt.shape[0])])
    with open(path, "wb") as f:
        f.write(MAGIC_EMBEDDINGS)
        write_tensor_map(f, {"source_embeddings": zs,
                             "target_embeddings": zt,
                             "domain_tags": tags})


def load_embeddings(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        check_magic(f, MAGIC_EMBEDDINGS)
        return read_tensor_map(f)


# ---------------------------------------------------------------------------
# Active adaptation
# ---------------------------------------------------------------------------

def adapt(config: RunConfig, source_ckpt: models.Checkpoint,
          target_x: np.ndarray, source_x: np.ndarray | None = None,
          evaluator: Evaluator | None = None,
          out_dir: str | Path | None = None
          ) -> tuple[models.Checkpoint, active.CoreSet, list[MetricsRecord]]:
    """Runs the n_cycles - 1 active adaptation stages from a source checkpoint.

    Per cycle: score the remaining pool, partition by score, move the top-k
    of the first batch into the core-set, train the target model on core-set
    minibatches with the combined objective, then retrain the rotation model
    on core-set rotations. The source model stays frozen throughout and only
    supplies detached embeddings to the domain adversarial loss. source_x is
    optional and only enriches the per-cycle embedding dumps.

    Returns the final checkpoint, the finished core-set, and per-epoch
    metrics for every adaptation stage.
    """
    x_t = np.asarray(target_x, dtype=np.float64)
    _check_input_matrix(x_t, config, "target_x")
    n_pool = x_t.shape[0]
    n_stages = config.n_cycles - 1
    if config.budget_total > n_pool:
        raise ConfigError(
            f"budget_total {config.budget_total} exceeds target pool size "
            f"{n_pool}")
    k_cycle = config.budget_total // n_stages

    src = source_ckpt.models()
    _check_compat(src, config, x_t)
    fp = config_fingerprint(config)
    seeder = _phase_seeder(config.seed, PHASE_ADAPT)
    tgt = source_ckpt.models()
    tgt.rotation = models.init_rotation_classifier(
        np.random.default_rng(_draw_seed(seeder)), src.encoder,
        config.dropout_rate)

    weights = alignment.AlignmentWeights(config.lambda1, config.lambda2,
                                         config.grl_lambda)
    vat_cfg = alignment.VatConfig(config.vat_xi, config.vat_eps_radius,
                                  config.vat_power_iters)
    use_dal = config.loss_variant in ("consolidated", "dal_vat")
    use_vat = use_dal
    use_ent = config.loss_variant in ("consolidated", "entropy")

    out_path: Path | None = None
    if out_dir is not None:
        out_path = Path(out_dir)
        out_path.mkdir(parents=True, exist_ok=True)

    core = active.CoreSet(budget_total=config.budget_total)
    remaining = list(range(n_pool))
    static_partition: active.PoolPartition | None = None
    static_map: dict[int, active.AcquisitionRecord] = {}
    records: list[MetricsRecord] = []
    last_good = models.Checkpoint.of(tgt, fp, 0)
    min_size = max(2, config.k_prototypes)
    aug = config.augment_config()

    try:
        # Initial pretext fit on the full pool so stage-0 uncertainty scores
        # come from a model that has actually seen the target domain.
        _train_rotation(config, tgt.rotation, x_t, seeder)

        for cyc in range(n_stages):
            stage = cyc + 1
            if cyc > 0 and not config.warm_start:
                fresh = source_ckpt.models()
                tgt.encoder = fresh.encoder
                tgt.prototypes = fresh.prototypes
                tgt.domain = fresh.domain

            # acquisition
            if config.rescore_each_cycle:
                recs = _score_indices(config, tgt, x_t, remaining, seeder)
                rec_map = {r.sample_index: r for r in recs}
                batch_ids = active.partition_pool(recs,
                                                  n_stages - cyc).batches[0]
            else:
                if cyc == 0:
                    recs = _score_indices(config, tgt, x_t, remaining, seeder)
                    static_map = {r.sample_index: r for r in recs}
                    static_partition = active.partition_pool(recs, n_stages)
                rec_map = static_map
                batch_ids = static_partition.batches[cyc]
            core = active.select_topk([rec_map[i] for i in batch_ids], core,
                                      k_cycle)
            core = dataclasses.replace(core, stage=stage)
            selected = set(core.selected)
            remaining = [i for i in remaining if i not in selected]

            # target-model training on the accumulated core-set
            core_x = x_t[np.asarray(core.selected, dtype=np.int64)]
            group = _encoder_param_group(tgt)
            if config.freeze_prototypes:
                del group["prototypes.vectors"]
            group["domain.fc.weight"] = tgt.domain.w1
            group["domain.fc.bias"] = tgt.domain.b1
            group["domain.logit.weight"] = tgt.domain.w2
            group["domain.logit.bias"] = tgt.domain.b2
            opt = Sgd(OptimSpec(config.target_lr, config.momentum,
                                config.weight_decay, "cosine"), group)
            # The schedule restarts each cycle so the growing core-set always
            # gets a full annealing sweep; the last (largest) cycle dominates.
            cycle_total = max(1, config.target_epochs
                              * _steps_per_epoch(core_x.shape[0],
                                                 config.batch_size, min_size))
            cycle_step = 0
            for epoch in range(config.target_epochs):
                t0 = time.perf_counter()
                sums = {"swap": 0.0, "dal": 0.0, "ent": 0.0, "vat": 0.0,
                        "total": 0.0}
                n_steps = 0
                for chunk in _minibatches(core_x.shape[0], config.batch_size,
                                          seeder, min_size):
                    xb = core_x[chunk]
                    va, vb = data.augment_two_views(xb, _draw_seed(seeder),
                                                    aug)
                    vat_seed = _draw_seed(seeder)
                    z_a = models.encode(tgt.encoder, va, normalize=True)
                    z_b = models.encode(tgt.encoder, vb, normalize=True)
                    swap = ssl_swap.swap_loss(z_a, z_b, tgt.prototypes,
                                              config.tau,
                                              config.sinkhorn_epsilon,
                                              config.sinkhorn_iters)
                    zero = Tensor(0.0)
                    fn = _prob_fn(tgt, config.tau)
                    ent = alignment.entropy_loss(fn(Tensor(xb))) if use_ent \
                        else zero
                    if use_vat:
                        r_adv = alignment.vat_perturbation(fn, xb, vat_cfg,
                                                           vat_seed)
                        vat = alignment.vat_loss(fn, xb, r_adv)
                    else:
                        vat = zero
                    if use_dal:
                        z_src = Tensor(_embed(src.encoder, xb))
                        z_tgt = models.encode(tgt.encoder, xb, normalize=True)
                        dal = alignment.dal_loss(tgt.domain, z_src, z_tgt,
                                                 config.grl_lambda)
                    else:
                        dal = zero
                    loss = alignment.total_loss(swap, dal, ent, vat, weights)
                    ad.backward(loss)
                    opt.step(cycle_step / cycle_total)
                    if not config.freeze_prototypes:
                        ssl_swap.prototype_normalize(tgt.prototypes)
                    sums["swap"] += swap.item()
                    sums["dal"] += dal.item()
                    sums["ent"] += ent.item()
                    sums["vat"] += vat.item()
                    sums["total"] += loss.item()
                    n_steps += 1
                    cycle_step += 1
                means = {k: (v / n_steps if n_steps else 0.0)
                         for k, v in sums.items()}
                s_acc, t_acc = evaluator(tgt) if evaluator else (-1.0, -1.0)
                ms = (time.perf_counter() - t0) * 1e3 if config.real_clock \
                    else 0.0
                records.append(MetricsRecord(
                    stage=stage, epoch=epoch, swap=means["swap"],
                    dal=means["dal"], ent=means["ent"], vat=means["vat"],
                    total=means["total"], coreset_size=core.budget_used,
                    source_probe_acc=s_acc, target_acc=t_acc,
                    wall_clock_ms=ms))

            # rotation-model retraining on the core-set
            _train_rotation(config, tgt.rotation, core_x, seeder)

            if out_path is not None:
                dump_embeddings(out_path / f"embeds_stage{stage}.bin", tgt,
                                source_x, x_t)
            last_good = models.Checkpoint.of(tgt, fp, stage)
    except NumericError as exc:
        _attach_last_good(exc, last_good)
        raise
    return models.Checkpoint.of(tgt, fp, n_stages), core, records
