"""Training regimes: supervised, FixMatch-style, UniMatch-lite and SupMix + SUFD.

All four share one step function; a variant is a bundle of toggles. Every
random decision draws from a substream keyed by (seed, step, purpose), so
variants that differ only in loss weights consume identical randomness and
produce bit-identical trajectories when the extra weights are zero.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import augment, mixing
from .data import LABELED, TEST, UNLABELED, DatasetManifest, load_split
from .evaluation import evaluate_model
from .numerics import (
    IGNORE_INDEX,
    LrSchedule,
    OptimizerState,
    Tensor,
    bce,
    log_softmax,
    poly_lr,
    sgd_step,
    softmax_ce,
)
from .segnet import PatchDiscriminator, SegModel, save_checkpoint

log = logging.getLogger(__name__)

VARIANTS = ("supervised", "fixmatch", "unimatch", "ours")
STRONG_MIXES = ("none", "cutmix", "classmix", "supmix")

_VARIANT_DEFAULTS = {
    "supervised": dict(strong_mix="none", use_sufd=False),
    "fixmatch": dict(strong_mix="cutmix", use_sufd=False),
    "unimatch": dict(strong_mix="cutmix", use_sufd=False),
    "ours": dict(strong_mix="supmix", use_sufd=True),
}

# substream purposes
_PERM_U, _PERM_L, _AUG_L, _AUG_U, _STRONG, _MIX, _PAIR, _DROP, _PAIR_IDX = range(9)


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    variant: str = "ours"
    epochs: int = 100
    batch_size: int = 4
    lr_init: float = 4e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    tau: float = 0.95
    lambda_u: float | None = None
    lambda_adv: float | None = None
    crop_size: int = 32
    seed: int = 0
    strong_mix: str | None = None
    use_supmix: bool | None = None
    use_sufd: bool | None = None
    mix_prob: float = 0.5
    cutmix_area: tuple[float, float] = (0.1, 0.5)
    feature_dropout: float = 0.5
    width: int = 16
    disc_width: int = 16
    sufd_tap: str = "features"
    disc_per_image: bool = False
    background: int = 0
    dtype: str = "float32"
    eval_every: int = 0
    unsup_norm: str = "all"

    def resolved(self) -> "TrainConfig":
        """Fill variant defaults and check toggle consistency."""
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant: unknown value {self.variant!r}; expected one of {VARIANTS}")
        d = asdict(self)
        defaults = _VARIANT_DEFAULTS[self.variant]
        if d["use_supmix"] is not None and d["strong_mix"] is not None:
            if d["use_supmix"] != (d["strong_mix"] == "supmix"):
                raise ConfigError("use_supmix: contradicts strong_mix")
        if d["strong_mix"] is None:
            if d["use_supmix"]:
                d["strong_mix"] = "supmix"
            elif d["use_supmix"] is False and defaults["strong_mix"] == "supmix":
                d["strong_mix"] = "cutmix"
            else:
                d["strong_mix"] = defaults["strong_mix"]
        d["use_supmix"] = d["strong_mix"] == "supmix"
        if d["use_sufd"] is None:
            d["use_sufd"] = defaults["use_sufd"]
        sup = self.variant == "supervised"
        if d["lambda_u"] is None:
            d["lambda_u"] = 0.0 if sup else 1.0
        if d["lambda_adv"] is None:
            d["lambda_adv"] = 0.01 if d["use_sufd"] else 0.0
        cfg = TrainConfig(**d)
        cfg.cutmix_area = tuple(cfg.cutmix_area)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.strong_mix not in STRONG_MIXES:
            raise ConfigError(f"strong_mix: unknown value {self.strong_mix!r}")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError(f"tau: must lie in (0, 1], got {self.tau}")
        for key in ("lambda_u", "lambda_adv", "lr_init", "weight_decay", "momentum", "mix_prob"):
            v = getattr(self, key)
            if v is not None and v < 0:
                raise ConfigError(f"{key}: must be non-negative, got {v}")
        if self.variant == "supervised":
            if self.lambda_u:
                raise ConfigError("lambda_u: supervised variant requires 0")
            if self.lambda_adv:
                raise ConfigError("lambda_adv: supervised variant requires 0")
            if self.use_sufd:
                raise ConfigError("use_sufd: supervised variant has no discriminator")
        if self.lambda_adv and not self.use_sufd:
            raise ConfigError("lambda_adv: positive weight needs use_sufd")
        if self.epochs < 0:
            raise ConfigError("epochs: must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be positive")
        if self.crop_size % 8:
            raise ConfigError("crop_size: must be divisible by 8")
        if self.sufd_tap not in ("features", "logits"):
            raise ConfigError(f"sufd_tap: unknown value {self.sufd_tap!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype: unknown value {self.dtype!r}")
        if self.unsup_norm not in ("all", "valid"):
            raise ConfigError(f"unsup_norm: unknown value {self.unsup_norm!r}")
        if not 0.0 <= self.feature_dropout < 1.0:
            raise ConfigError("feature_dropout: must lie in [0, 1)")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown config key")
        return cls(**d)


@dataclass
class TrainState:
    model: SegModel
    disc: PatchDiscriminator | None
    opt: OptimizerState
    disc_opt: OptimizerState | None
    schedule: LrSchedule | None
    step: int = 0
    trace: list[dict] = field(default_factory=list)
    epoch_trace: list[dict] = field(default_factory=list)
    eval_trace: list[dict] = field(default_factory=list)

    def checkpoint_tensors(self):
        out = self.model.state_dict()
        if self.disc is not None:
            out.update(self.disc.state_dict())
        return out


@dataclass
class Batch:
    """One step's inputs after weak/strong augmentation (before any mixing)."""

    x_l: np.ndarray  # N_l x 3 x c x c
    y_l: np.ndarray  # N_l x c x c
    x_w: np.ndarray | None = None  # N_u x 3 x c x c
    x_s: np.ndarray | None = None
    x_pair: np.ndarray | None = None  # labeled source per unlabeled sample (SupMix)
    y_pair: np.ndarray | None = None

    @property
    def has_unlabeled(self) -> bool:
        return self.x_w is not None and len(self.x_w) > 0


def step_rng(seed: int, step: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, purpose])


def init_state(cfg: TrainConfig, num_classes: int, total_steps: int) -> TrainState:
    dt = cfg.np_dtype
    model = SegModel(num_classes, width=cfg.width, seed=cfg.seed, dtype=dt)
    disc = disc_opt = None
    if cfg.use_sufd:
        in_ch = model.feature_channels if cfg.sufd_tap == "features" else num_classes
        disc = PatchDiscriminator(in_ch, cfg.disc_width, seed=cfg.seed + 7919, per_image=cfg.disc_per_image, dtype=dt)
        disc_opt = OptimizerState.for_params(disc.parameters(), cfg.momentum, cfg.weight_decay)
    opt = OptimizerState.for_params(model.parameters(), cfg.momentum, cfg.weight_decay)
    sched = LrSchedule(cfg.lr_init, total_steps) if total_steps > 0 else None
    return TrainState(model, disc, opt, disc_opt, sched)


# ----------------------------------------------------------------- primitives


def softmax_np(logits: np.ndarray, axis: int) -> np.ndarray:
    return np.exp(log_softmax(logits, axis))


def pseudo_label(logits, tau: float, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """Argmax class where the max softmax probability reaches tau, else ignore_index."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    axis = data.ndim - 3
    prob = softmax_np(data.astype(np.float64), axis)
    conf = prob.max(axis=axis)
    cls = prob.argmax(axis=axis).astype(np.uint8)
    return np.where(conf >= tau, cls, np.uint8(ignore_index)).astype(np.uint8)


def sufd_losses(o_u: Tensor, o_l: Tensor) -> tuple[Tensor, Tensor]:
    """(generator, discriminator) halves of B(o_u,1) + 1/2 (B(o_u,0) + B(o_l,1))."""
    gen = bce(o_u, 1)
    disc = (bce(o_u, 0) + bce(o_l, 1)) * 0.5
    return gen, disc


def discriminator_loss(disc: PatchDiscriminator, feat_u: Tensor, feat_l: Tensor) -> Tensor:
    """Discriminator half of SUFD on detached features; never reaches the segmenter."""
    _, loss = sufd_losses(disc(feat_u.detach()), disc(feat_l.detach()))
    return loss


def unsup_ce(logits: Tensor, target: np.ndarray, norm: str = "all") -> Tensor:
    """Consistency CE. ``norm="all"`` divides the confident-pixel sum by every pixel
    (low-confidence pixels count as zero loss); ``"valid"`` is the plain mean."""
    loss = softmax_ce(logits, target)
    if norm == "valid":
        return loss
    valid = int(np.count_nonzero(target != IGNORE_INDEX))
    return loss * (valid / target.size)


def mix_unlabeled(batch: Batch, pseudo: np.ndarray, argmax: np.ndarray, cfg: TrainConfig, rng) -> tuple[np.ndarray, np.ndarray]:
    """Apply the configured strong mix per unlabeled sample (each with prob mix_prob)."""
    x = batch.x_s.copy()
    y = pseudo.copy()
    n = len(x)
    for i in range(n):
        fire = rng.random() < cfg.mix_prob
        j = (i + 1) % n
        if cfg.strong_mix == "none" or not fire:
            continue
        if cfg.strong_mix == "cutmix":
            res = mixing.cutmix(batch.x_s[j], pseudo[j], batch.x_s[i], pseudo[i], rng, cfg.cutmix_area)
        elif cfg.strong_mix == "classmix":
            res = mixing.classmix_from_labels(batch.x_s[j], pseudo[j], batch.x_s[i], pseudo[i], rng, mask_source=argmax[j])
        else:
            res = mixing.supmix(batch.x_pair[i], batch.y_pair[i], batch.x_s[i], pseudo[i], cfg.background, rng)
        x[i], y[i] = res.image, res.label
    return x, y


def _disc_input(cfg, logits, features):
    return features if cfg.sufd_tap == "features" else logits


def train_step(batch: Batch, state: TrainState, cfg: TrainConfig) -> dict:
    """One model step (plus one discriminator step when SUFD is on)."""
    step = state.step
    lr = poly_lr(step, state.schedule) if state.schedule else 0.0
    state.opt.set_lr(lr)
    model, disc = state.model, state.disc
    model.zero_grad()

    dt = cfg.np_dtype
    logits_l, feat_l = model(Tensor(batch.x_l.astype(dt)))
    loss_sup = softmax_ce(logits_l, batch.y_l)
    total = loss_sup
    loss_unsup = loss_gen = None
    feat_w = logits_w = None

    unsup = cfg.variant != "supervised" and batch.has_unlabeled
    if unsup:
        logits_w, feat_w = model(Tensor(batch.x_w.astype(dt)))
        pseudo = pseudo_label(logits_w, cfg.tau)
        argmax = logits_w.data.argmax(axis=1).astype(np.uint8)
        x_mix, y_mix = mix_unlabeled(batch, pseudo, argmax, cfg, step_rng(cfg.seed, step, _MIX))
        logits_s, _ = model(Tensor(x_mix.astype(dt)))
        loss_unsup = unsup_ce(logits_s, y_mix, cfg.unsup_norm)
        if cfg.variant == "unimatch":
            logits_fp, _ = model(
                Tensor(batch.x_w.astype(dt)), feature_dropout=cfg.feature_dropout, rng=step_rng(cfg.seed, step, _DROP)
            )
            loss_unsup = (loss_unsup + unsup_ce(logits_fp, pseudo, cfg.unsup_norm)) * 0.5
        total = total + loss_unsup * cfg.lambda_u
        if disc is not None:
            o_u = disc(_disc_input(cfg, logits_w, feat_w))
            loss_gen = bce(o_u, 1)
            total = total + loss_gen * cfg.lambda_adv

    total.backward()
    sgd_step(model.parameters(), [p.grad for p in model.parameters()], state.opt)

    loss_disc = None
    if disc is not None and unsup:
        state.disc_opt.set_lr(lr)
        disc.zero_grad()
        loss_disc = discriminator_loss(disc, _disc_input(cfg, logits_w, feat_w), _disc_input(cfg, logits_l, feat_l))
        loss_disc.backward()
        sgd_step(disc.parameters(), [p.grad for p in disc.parameters()], state.disc_opt)
        disc.zero_grad()

    record = {
        "step": step,
        "lr": lr,
        "loss_sup": loss_sup.item(),
        "loss_unsup": loss_unsup.item() if loss_unsup is not None else 0.0,
        "loss_gen": loss_gen.item() if loss_gen is not None else 0.0,
        "loss_disc": loss_disc.item() if loss_disc is not None else 0.0,
        "loss_total": total.item(),
    }
    for k, v in record.items():
        if not math.isfinite(v):
            raise FloatingPointError(f"non-finite {k} at step {step}")
    state.trace.append(record)
    state.step += 1
    return record


def _require(cfg: TrainConfig, *variants: str) -> None:
    if cfg.variant not in variants:
        raise ConfigError(f"variant: step function expects {variants}, config says {cfg.variant!r}")


def train_step_supervised(batch: Batch, state: TrainState, cfg: TrainConfig) -> dict:
    _require(cfg, "supervised")
    return train_step(batch, state, cfg)


def train_step_fixmatch(batch: Batch, state: TrainState, cfg: TrainConfig) -> dict:
    _require(cfg, "fixmatch")
    return train_step(batch, state, cfg)


def train_step_unimatch_lite(batch: Batch, state: TrainState, cfg: TrainConfig) -> dict:
    _require(cfg, "unimatch")
    return train_step(batch, state, cfg)


def train_step_ours(batch: Batch, state: TrainState, cfg: TrainConfig) -> dict:
    _require(cfg, "ours")
    return train_step(batch, state, cfg)


# -------------------------------------------------------------------- loop


class Sampler:
    """Index streams: unlabeled reshuffled per epoch, labeled cycled forever."""

    def __init__(self, n_l: int, n_u: int, batch_size: int, seed: int):
        self.n_l, self.n_u, self.bs, self.seed = n_l, n_u, batch_size, seed
        self._cursor = 0

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil((self.n_u if self.n_u else self.n_l) / self.bs)

    def unlabeled(self, epoch: int, k: int) -> list[int]:
        if not self.n_u:
            return []
        perm = np.random.default_rng([self.seed, epoch, _PERM_U]).permutation(self.n_u)
        return perm[k * self.bs : (k + 1) * self.bs].tolist()

    def pairs(self, step: int, count: int) -> list[int]:
        """SupMix sources: uniform with replacement from the labeled pool."""
        return np.random.default_rng([self.seed, step, _PAIR_IDX]).integers(0, self.n_l, count).tolist()

    def labeled(self, count: int) -> list[int]:
        out = []
        for _ in range(count):
            cycle, pos = divmod(self._cursor, self.n_l)
            perm = np.random.default_rng([self.seed, cycle, _PERM_L]).permutation(self.n_l)
            out.append(int(perm[pos]))
            self._cursor += 1
        return out


def assemble_batch(
    step: int,
    idx_l: list[int],
    idx_u: list[int],
    idx_pair: list[int],
    labeled: tuple[list, list],
    unlabeled: list,
    cfg: TrainConfig,
) -> Batch:
    imgs_l, lbls_l = labeled
    rng_l = step_rng(cfg.seed, step, _AUG_L)
    xl, yl = zip(*(augment.weak_augment(imgs_l[i], lbls_l[i], cfg.crop_size, rng_l) for i in idx_l))
    batch = Batch(np.stack(xl), np.stack(yl))
    if idx_u:
        rng_u = step_rng(cfg.seed, step, _AUG_U)
        dummy = np.zeros(unlabeled[0].shape[1:], np.uint8)
        xw = np.stack([augment.weak_augment(unlabeled[i], dummy, cfg.crop_size, rng_u)[0] for i in idx_u])
        rng_s = step_rng(cfg.seed, step, _STRONG)
        xs = np.stack([augment.strong_augment(x, rng_s) for x in xw])
        rng_p = step_rng(cfg.seed, step, _PAIR)
        pairs = [augment.weak_augment(imgs_l[i], lbls_l[i], cfg.crop_size, rng_p) for i in idx_pair]
        batch.x_w, batch.x_s = xw, xs
        batch.x_pair = np.stack([p[0] for p in pairs])
        batch.y_pair = np.stack([p[1] for p in pairs])
    return batch


def write_trace_csv(path, trace: list[dict]) -> None:
    cols = ["step", "lr", "loss_sup", "loss_unsup", "loss_gen", "loss_disc"]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in trace:
            w.writerow([r["step"]] + [repr(float(r[c])) for c in cols[1:]])


def read_trace_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


def run_training(cfg: TrainConfig, manifest: DatasetManifest, out_dir=None) -> TrainState:
    """Full training run; writes checkpoint, loss trace and resolved config when out_dir is given."""
    cfg = cfg.resolved()
    imgs_l, lbls_l = load_split(manifest, LABELED)
    imgs_u, _ = load_split(manifest, UNLABELED)
    if not imgs_l:
        raise ConfigError("manifest: no labeled-train samples (run split first)")
    if cfg.use_sufd and not imgs_u:
        raise ConfigError("use_sufd: SUFD needs unlabeled-train samples")
    sampler = Sampler(len(imgs_l), len(imgs_u), cfg.batch_size, cfg.seed)
    total = cfg.epochs * sampler.steps_per_epoch
    state = init_state(cfg, manifest.num_classes, total)

    test = load_split(manifest, TEST) if cfg.eval_every else None
    for epoch in range(cfg.epochs):
        start = len(state.trace)
        for k in range(sampler.steps_per_epoch):
            idx_u = sampler.unlabeled(epoch, k)
            n_l = cfg.batch_size
            idx_l = sampler.labeled(n_l)
            idx_pair = sampler.pairs(state.step, len(idx_u))
            batch = assemble_batch(state.step, idx_l, idx_u, idx_pair, (imgs_l, lbls_l), imgs_u, cfg)
            train_step(batch, state, cfg)
        rows = state.trace[start:]
        state.epoch_trace.append(
            {"epoch": epoch, **{k: float(np.mean([r[k] for r in rows])) for k in ("loss_sup", "loss_unsup", "loss_gen", "loss_disc")}}
        )
        if test and test[0] and ((epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs):
            rep = evaluate_model(state.model, test[0], test[1], manifest.class_names)
            state.eval_trace.append({"epoch": epoch + 1, "miou": rep.miou, "iou": rep.iou})
        log.debug("epoch %d %s", epoch, state.epoch_trace[-1])

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "checkpoint.bin", state.checkpoint_tensors())
        write_trace_csv(out / "loss_trace.csv", state.trace)
        (out / "config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")
        if state.eval_trace:
            (out / "eval_trace.json").write_text(json.dumps(state.eval_trace, indent=2) + "\n")
    return state
