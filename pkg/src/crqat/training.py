"""Joint student/EMA-teacher training with consistency regularization.

Each iteration: draw a mixed labeled/unlabeled batch, augment every sample
into two views, forward view 1 through the student and view 2 through the
teacher (teacher under stop-gradient), combine cross-entropy on the student's
labeled logits with the two-pair consistency loss weighted by the warm-up
schedule, take one SGD step, then refresh the teacher as an exponential
moving average of the student. Setting the consistency strength to zero
reduces the loop to plain quantization-aware training with the identical
batch, augmentation, and update sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff
from .augmentation import AugmentationPolicy, augment_batch_two_views
from .autodiff import Tensor, cross_entropy, kl_div_loss, mse_loss
from .data import Dataset, normalize_images
from .errors import ConfigError, NonFiniteError, StateError, TrainingDiverged, UsageError
from .models import ModelState, copy_into_teacher
from .quantization import integer_levels

DIVERGENCES = ("mse", "kl")


@dataclass
class TrainConfig:
    """Hyperparameters of one training run."""

    epochs: int = 30
    batch_size: int = 256
    labeled_ratio: int = 1
    unlabeled_ratio: int = 7
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    ema_momentum: float = 0.999          # EMA smoothing toward the old teacher
    cr_strength: float = 1.0             # consistency intensity at full warm-up
    warmup_epochs: int = 4
    divergence: str = "mse"
    step_lr_scale: float = 0.1           # lr multiplier for learned step sizes
    seed: int = 0
    trace_every: int = 1                 # 0 disables latent-weight tracing
    check_teacher_hull: bool = False

    def __post_init__(self):
        if not 0.0 < self.ema_momentum < 1.0:
            raise ConfigError(
                f"ema_momentum must lie in (0, 1), got {self.ema_momentum}"
            )
        if self.cr_strength < 0:
            raise ConfigError(f"cr_strength must be >= 0, got {self.cr_strength}")
        if self.warmup_epochs < 1:
            raise ConfigError(f"warmup_epochs must be >= 1, got {self.warmup_epochs}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.labeled_ratio < 1 or self.unlabeled_ratio < 0:
            raise ConfigError(
                "batch mix ratio needs a positive labeled part and a "
                f"non-negative unlabeled part, got "
                f"{self.labeled_ratio}:{self.unlabeled_ratio}"
            )
        if self.divergence not in DIVERGENCES:
            raise ConfigError(
                f"divergence must be one of {DIVERGENCES}, got '{self.divergence}'"
            )
        parts = self.labeled_ratio + self.unlabeled_ratio
        if self.batch_size % parts != 0:
            raise ConfigError(
                f"batch_size {self.batch_size} is not divisible by the "
                f"ratio total {parts}"
            )

    @property
    def labeled_per_batch(self) -> int:
        return self.batch_size // (self.labeled_ratio + self.unlabeled_ratio) \
            * self.labeled_ratio

    @property
    def unlabeled_per_batch(self) -> int:
        return self.batch_size - self.labeled_per_batch


@dataclass
class StepRecord:
    iteration: int
    epoch: int
    lam: float
    ce: float
    cr: float
    total: float
    lr: float

    def validate(self):
        vals = (self.lam, self.ce, self.cr, self.total, self.lr)
        if not all(math.isfinite(v) for v in vals):
            raise TrainingDiverged(
                f"non-finite loss at iteration {self.iteration}", record=self
            )
        if self.lam < 0:
            raise ConfigError(f"negative lambda {self.lam}")


def lambda_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Exponential warm-up: ``str * exp(-5 * (1 - (beta/E)^2))``.

    ``beta = clip(epoch, 0, warmup_epochs)``; the value is nondecreasing in
    the epoch and equals the full strength from ``warmup_epochs`` onward.
    """
    if cfg.warmup_epochs == 0:
        raise ConfigError("warmup_epochs must be positive")
    if epoch < 0:
        raise UsageError(f"epoch must be >= 0, got {epoch}")
    beta = min(max(epoch, 0), cfg.warmup_epochs)
    frac = beta / cfg.warmup_epochs
    return cfg.cr_strength * math.exp(-5.0 * (1.0 - frac * frac))


def cosine_lr(epoch: int, cfg: TrainConfig) -> float:
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / cfg.epochs))


def cr_loss(z_s_l: Tensor, z_t_l: Tensor, z_s_u: Tensor | None = None,
            z_t_u: Tensor | None = None, divergence: str = "mse") -> Tensor:
    """Consistency loss over the unlabeled and labeled student/teacher pairs.

    Teacher logits must already be detached from the graph (stop-gradient).
    With no unlabeled pair the loss is the labeled term alone.
    """
    if divergence not in DIVERGENCES:
        raise ConfigError(f"divergence must be one of {DIVERGENCES}")
    for name, t in (("z_t_l", z_t_l), ("z_t_u", z_t_u)):
        if t is not None and t.requires_grad:
            raise UsageError(f"{name} must be detached (teacher is stop-gradient)")
    if (z_s_u is None) != (z_t_u is None):
        raise UsageError("unlabeled logits must be supplied for both models or neither")
    pair = mse_loss if divergence == "mse" else kl_div_loss
    loss = pair(z_s_l, z_t_l)
    if z_s_u is not None:
        loss = autodiff.add(pair(z_s_u, z_t_u), loss)
    return loss


def total_loss(ce: Tensor, cr: Tensor, lam: float) -> Tensor:
    """Cross-entropy plus ``lam`` times the consistency term."""
    if lam < 0:
        raise UsageError(f"lambda must be >= 0, got {lam}")
    return autodiff.add(ce, autodiff.mul_scalar(cr, lam))


# ---------------------------------------------------------------------------
# optimizer and EMA
# ---------------------------------------------------------------------------


class SGD:
    """SGD with momentum.

    Parameters come in two groups: regular weights (with weight decay) and
    learned quantizer step sizes (no decay, scaled learning rate). Step sizes
    are projected back into a fixed band around their calibrated value after
    every update: a step that drifts to zero or flips sign would collapse the
    quantization grid outright, and the band keeps the quantizer in a sane
    regime at the aggressive learning rates these small BN-free models need.
    """

    STEP_BAND = 8.0

    def __init__(self, params_decay, params_steps, momentum=0.9,
                 weight_decay=0.0, step_lr_scale=1.0):
        self.groups = [(t, weight_decay, 1.0, None) for t in params_decay]
        self.groups += [
            (t, 0.0, step_lr_scale, np.abs(t.data).copy()) for t in params_steps
        ]
        self.momentum = momentum
        self.velocity = [np.zeros_like(t.data) for t, _, _, _ in self.groups]

    def zero_grad(self):
        for t, _, _, _ in self.groups:
            t.zero_grad()

    def step(self, lr: float):
        for (t, wd, scale, step_init), v in zip(self.groups, self.velocity):
            if t.grad is None:
                continue
            g = t.grad
            if wd:
                g = g + wd * t.data
            v *= self.momentum
            v += g
            t.data = t.data - (lr * scale) * v
            if step_init is not None:
                np.clip(t.data, step_init / self.STEP_BAND,
                        step_init * self.STEP_BAND, out=t.data)


def _ema_pairs(teacher: ModelState, student: ModelState):
    t_params = teacher.parameters()
    s_params = student.parameters()
    if len(t_params) != len(s_params):
        raise StateError(
            f"teacher has {len(t_params)} parameters, student {len(s_params)}"
        )
    pairs = list(zip(t_params, s_params))
    t_steps = teacher.learnable_steps()
    s_steps = student.learnable_steps()
    if len(t_steps) != len(s_steps):
        raise StateError(
            f"teacher has {len(t_steps)} learnable steps, student {len(s_steps)}"
        )
    pairs += list(zip(t_steps, s_steps))
    for t, s in pairs:
        if t.shape != s.shape:
            raise StateError(
                f"teacher/student parameter shapes differ: {t.shape} vs {s.shape}"
            )
    return pairs


def ema_update(teacher: ModelState, student: ModelState, alpha: float) -> None:
    """``teacher = alpha * teacher + (1 - alpha) * student`` on every latent
    weight, bias, and learnable step size. Zero points and other integers are
    untouched. The combination is evaluated in float64 and rounded once, so a
    teacher value can never leave the hull of its history.
    """
    for t, s in _ema_pairs(teacher, student):
        mixed = alpha * t.data.astype(np.float64) + (1.0 - alpha) * s.data.astype(np.float64)
        t.data = mixed.astype(t.data.dtype)


# ---------------------------------------------------------------------------
# batch mixing
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    labeled_images: np.ndarray
    labels: np.ndarray
    labeled_indices: np.ndarray
    unlabeled_images: np.ndarray | None
    unlabeled_indices: np.ndarray | None


class _Shuffler:
    """Without-replacement index stream that reshuffles when exhausted."""

    def __init__(self, n: int, rng):
        self.n = n
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0

    def draw(self, k: int) -> np.ndarray:
        out = np.empty(k, dtype=np.int64)
        filled = 0
        while filled < k:
            take = min(k - filled, self.n - self.pos)
            out[filled : filled + take] = self.order[self.pos : self.pos + take]
            self.pos += take
            filled += take
            if self.pos == self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
        return out


class BatchMixer:
    """Draws mixed batches at the configured exact labeled:unlabeled ratio.

    When the provided unlabeled pool is empty the labeled images, with labels
    dropped, serve as the unlabeled stream.
    """

    def __init__(self, labeled: Dataset, unlabeled_images: np.ndarray | None,
                 cfg: TrainConfig):
        if labeled.labels is None:
            raise UsageError("labeled dataset carries no labels")
        self.labeled = labeled
        if unlabeled_images is None or len(unlabeled_images) == 0:
            unlabeled_images = labeled.images
        self.unlabeled_images = unlabeled_images
        self.n_labeled = cfg.labeled_per_batch
        self.n_unlabeled = cfg.unlabeled_per_batch
        ss_l, ss_u = np.random.SeedSequence([cfg.seed, 0x6D69]).spawn(2)
        self._labeled_stream = _Shuffler(len(labeled), np.random.default_rng(ss_l))
        self._unlabeled_stream = _Shuffler(
            len(unlabeled_images), np.random.default_rng(ss_u)
        )

    @property
    def steps_per_epoch(self) -> int:
        """One epoch is one pass over the larger (unlabeled) stream."""
        if self.n_unlabeled > 0:
            return max(1, math.ceil(len(self.unlabeled_images) / self.n_unlabeled))
        return max(1, math.ceil(len(self.labeled) / self.n_labeled))

    def next_batch(self) -> Batch:
        li = self._labeled_stream.draw(self.n_labeled)
        if self.n_unlabeled > 0:
            ui = self._unlabeled_stream.draw(self.n_unlabeled)
            u_images = self.unlabeled_images[ui]
        else:
            ui, u_images = None, None
        return Batch(
            labeled_images=self.labeled.images[li],
            labels=self.labeled.labels[li],
            labeled_indices=li,
            unlabeled_images=u_images,
            unlabeled_indices=ui,
        )


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainData:
    labeled: Dataset
    unlabeled_images: np.ndarray | None
    policy: AugmentationPolicy


@dataclass
class TrainResult:
    student: ModelState
    teacher: ModelState
    records: list
    traces: dict = field(default_factory=dict)   # role -> [iters, n_tracked] levels
    tracked_site: str = ""
    hull_violations: int = 0


class _LevelTracker:
    """Per-iteration integer levels of the first conv's first out-channel."""

    def __init__(self, model: ModelState):
        convs = model.conv_layers()
        self.layer = convs[0] if convs else None
        self.rows: list[np.ndarray] = []

    @property
    def site_name(self) -> str:
        return "" if self.layer is None else f"{self.layer.name}.weight[ch0]"

    def record(self):
        if self.layer is None or self.layer.weight_site.spec is None:
            return
        levels = integer_levels(self.layer.weight.data, self.layer.weight_site.spec)
        self.rows.append(levels[0].reshape(-1).copy())

    def trace(self) -> np.ndarray:
        if not self.rows:
            return np.empty((0, 0), dtype=np.int64)
        return np.stack(self.rows)


class _HullChecker:
    def __init__(self, teacher: ModelState, student: ModelState):
        self.pairs = _ema_pairs(teacher, student)
        self.lo = [t.data.astype(np.float64).copy() for t, _ in self.pairs]
        self.hi = [t.data.astype(np.float64).copy() for t, _ in self.pairs]
        self.violations = 0

    def absorb_student(self):
        for (_, s), lo, hi in zip(self.pairs, self.lo, self.hi):
            np.minimum(lo, s.data, out=lo)
            np.maximum(hi, s.data, out=hi)

    def check_teacher(self):
        for (t, _), lo, hi in zip(self.pairs, self.lo, self.hi):
            if (t.data < lo).any() or (t.data > hi).any():
                self.violations += 1
                return


def train(student: ModelState, cfg: TrainConfig, data: TrainData) -> TrainResult:
    """Run the full consistency-regularized QAT loop (teacher built inside).

    The student must already be calibrated. Within each iteration the
    optimizer step strictly precedes the teacher EMA update.
    """
    autodiff.tune_allocator()
    if not student.calibrated:
        raise StateError("student must be calibrated before training")
    teacher = copy_into_teacher(student)
    mixer = BatchMixer(data.labeled, data.unlabeled_images, cfg)
    opt = SGD(
        params_decay=student.parameters(),
        params_steps=student.learnable_steps(),
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
        step_lr_scale=cfg.step_lr_scale,
    )
    mean, std = data.labeled.channel_mean, data.labeled.channel_std
    records: list[StepRecord] = []
    s_tracker = _LevelTracker(student)
    t_tracker = _LevelTracker(teacher)
    hull = _HullChecker(teacher, student) if cfg.check_teacher_hull else None

    iteration = 0
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg)
        lam = lambda_schedule(epoch, cfg)
        for _ in range(mixer.steps_per_epoch):
            batch = mixer.next_batch()
            # one mixed forward per model: labeled rows first, unlabeled after
            n_l = len(batch.labeled_images)
            if batch.unlabeled_images is not None:
                images = np.concatenate([batch.labeled_images,
                                         batch.unlabeled_images])
                indices = np.concatenate([batch.labeled_indices,
                                          batch.unlabeled_indices])
            else:
                images, indices = batch.labeled_images, batch.labeled_indices
            x1, x2 = augment_batch_two_views(images, indices, data.policy,
                                             iteration)
            try:
                z_s = student.forward(normalize_images(x1, mean, std))
                with autodiff.no_grad():
                    z_t = teacher.forward(normalize_images(x2, mean, std))
                z_s_l = autodiff.slice_rows(z_s, 0, n_l)
                z_t_l = autodiff.slice_rows(z_t, 0, n_l)
                z_s_u = z_t_u = None
                if batch.unlabeled_images is not None:
                    z_s_u = autodiff.slice_rows(z_s, n_l, z_s.shape[0])
                    z_t_u = autodiff.slice_rows(z_t, n_l, z_t.shape[0])
                ce = cross_entropy(z_s_l, batch.labels)
                cr = cr_loss(z_s_l, z_t_l, z_s_u, z_t_u, cfg.divergence)
                loss = total_loss(ce, cr, lam)
                record = StepRecord(
                    iteration=iteration, epoch=epoch, lam=lam,
                    ce=ce.item(), cr=cr.item(), total=loss.item(), lr=lr,
                )
                record.validate()
                student.zero_grad()
                autodiff.backward(loss)
                opt.step(lr)
            except NonFiniteError as exc:
                diag = StepRecord(iteration, epoch, lam, float("nan"),
                                  float("nan"), float("nan"), lr)
                raise TrainingDiverged(str(exc), record=diag) from exc

            ema_update(teacher, student, cfg.ema_momentum)
            if hull is not None:
                hull.absorb_student()
                hull.check_teacher()
            if cfg.trace_every and iteration % cfg.trace_every == 0:
                s_tracker.record()
                t_tracker.record()
            records.append(record)
            iteration += 1

    return TrainResult(
        student=student,
        teacher=teacher,
        records=records,
        traces={"student": s_tracker.trace(), "teacher": t_tracker.trace()},
        tracked_site=s_tracker.site_name,
        hull_violations=0 if hull is None else hull.violations,
    )
