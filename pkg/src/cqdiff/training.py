"""Two-stage training: teacher forcing on physics labels, then student forcing on real data.

The teacher stage fits the noise estimator to labels whose RSRP column is the
shadowing-free theoretical value. The student stage fits real labels and adds
a physical-correction term that pulls the implied clean estimate toward the
teacher label. Both stages share one parameter set.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from .denoiser import Denoiser, DenoiserConfig, EpsAdapter, NormStats, condition_features
from .diffusion import NoiseSchedule, eps_loss, forward_sample, make_schedule, predict_x0, sample
from .metrics import DEFAULT_BINS, metric_report, nrmse
from .scenario import AOI, DatasetRecord

log = logging.getLogger(__name__)

STAGE_KINDS = ("teacher", "student")
PHYSICAL_WEIGHTINGS = ("alpha_bar", "none")


class NumericalError(ArithmeticError):
    """A loss or gradient became non-finite during training."""


@dataclass(frozen=True)
class Stage:
    kind: str
    patience: int

    def __post_init__(self):
        if self.kind not in STAGE_KINDS:
            raise ValueError(f"stage kind must be one of {STAGE_KINDS}, got {self.kind!r}")
        if self.patience < 0:
            raise ValueError(f"patience must be >= 0, got {self.patience}")


@dataclass(frozen=True)
class StagePlan:
    stages: tuple[Stage, ...]
    gamma: float = 0.8
    delta: float = 0.2
    physical_weighting: str = "alpha_bar"

    def __post_init__(self):
        if self.physical_weighting not in PHYSICAL_WEIGHTINGS:
            raise ValueError(f"physical_weighting must be one of {PHYSICAL_WEIGHTINGS}, got {self.physical_weighting!r}")
        stages = tuple(s if isinstance(s, Stage) else Stage(**s) for s in self.stages)
        object.__setattr__(self, "stages", stages)
        if not stages:
            raise ValueError("a stage plan needs at least one stage")
        if self.gamma < 0 or self.delta < 0:
            raise ValueError("gamma and delta must be >= 0")
        if abs(self.gamma + self.delta - 1.0) > 1e-9:
            raise ValueError(f"gamma + delta must equal 1, got {self.gamma} + {self.delta}")

    @classmethod
    def t0s5(cls, gamma: float = 1.0, delta: float = 0.0, **kw) -> "StagePlan":
        return cls((Stage("student", 5),), gamma, delta, **kw)

    @classmethod
    def t1s4(cls, gamma: float = 0.8, delta: float = 0.2, **kw) -> "StagePlan":
        return cls((Stage("teacher", 1), Stage("student", 4)), gamma, delta, **kw)

    @property
    def label(self) -> str:
        """Short name such as T1S4: patience summed per stage kind."""
        n_t = sum(s.patience for s in self.stages if s.kind == "teacher")
        n_s = sum(s.patience for s in self.stages if s.kind == "student")
        return f"T{n_t}S{n_s}"

    def to_dict(self) -> dict:
        return {"stages": [asdict(s) for s in self.stages], "gamma": self.gamma, "delta": self.delta,
                "physical_weighting": self.physical_weighting, "label": self.label}


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    max_epochs: int = 100
    validation_fraction: float = 0.1
    validation_repeats: int = 4
    finetune_learning_rate: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.validation_repeats < 1:
            raise ValueError("batch_size, max_epochs and validation_repeats must be >= 1")
        if self.learning_rate <= 0 or self.finetune_learning_rate <= 0:
            raise ValueError("learning rates must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("optimizer moment decays must lie in [0, 1)")
        if not 0 < self.validation_fraction <= 0.5:
            raise ValueError("validation_fraction must lie in (0, 0.5]")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- data


def build_labels(record: DatasetRecord, stage_kind: str) -> np.ndarray:
    """Unnormalized T x 2 label: teacher uses theoretical RSRP, both use real SINR."""
    if stage_kind == "teacher":
        return np.stack([record.theoretical_rsrp_dbm, record.real.sinr_db], axis=1)
    if stage_kind == "student":
        return record.real.as_matrix()
    raise ValueError(f"unknown stage kind {stage_kind!r}")


@dataclass
class TensorData:
    """Normalized tensors for a list of records."""

    real: torch.Tensor  # (N, T, 2)
    teacher: torch.Tensor  # (N, T, 2)
    cond: torch.Tensor  # (N, T, 7)

    def __len__(self):
        return self.real.shape[0]

    def subset(self, idx) -> "TensorData":
        return TensorData(self.real[idx], self.teacher[idx], self.cond[idx])

    @classmethod
    def from_records(cls, records: list[DatasetRecord], norm: NormStats, dtype=torch.float32) -> "TensorData":
        if not records:
            raise ValueError("no records")

        def stack(fn):
            return torch.as_tensor(np.stack([fn(r) for r in records]), dtype=dtype)

        return cls(
            stack(lambda r: norm.normalize_target(build_labels(r, "student"))),
            stack(lambda r: norm.normalize_target(build_labels(r, "teacher"))),
            stack(lambda r: condition_features(r.conditions, norm)),
        )


def split_by_user(records: list[DatasetRecord], fraction: float, seed) -> tuple[list, list]:
    """Hold out ``fraction`` of users per AOI (at least one when the AOI has two or more)."""
    rng = np.random.default_rng(seed)
    train, held = [], []
    for aoi in AOI:
        group = [r for r in records if r.aoi == aoi]
        if not group:
            continue
        users = np.array(sorted({r.user_id for r in group}))
        n_held = min(len(users) - 1, max(1, int(round(fraction * len(users))))) if len(users) > 1 else 0
        chosen = set(rng.permutation(users)[:n_held].tolist())
        for r in group:
            (held if r.user_id in chosen else train).append(r)
    return train, held


# ---------------------------------------------------------------- losses


def _draw_noise(x0: torch.Tensor, schedule: NoiseSchedule, gen: torch.Generator):
    t = torch.randint(1, schedule.steps + 1, (x0.shape[0],), generator=gen)
    eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
    return t, eps


def teacher_loss(batch: TensorData, model, schedule: NoiseSchedule, rng: torch.Generator, t=None, eps=None):
    """Noise-prediction loss against the teacher label."""
    if t is None or eps is None:
        t, eps = _draw_noise(batch.teacher, schedule, rng)
    return eps_loss(batch.teacher, batch.cond, model, t, eps, schedule)


def student_loss(batch: TensorData, model, schedule: NoiseSchedule, rng: torch.Generator, gamma: float, delta: float,
                 t=None, eps=None, physical_weighting: str = "alpha_bar"):
    """gamma * noise MSE + delta * MSE between the implied clean series and the teacher label.

    x_t is always noised from the real label. At delta = 0 this is exactly the
    noise-prediction loss on real labels. With ``physical_weighting="alpha_bar"``
    each squared error is scaled by alpha_bar_t: inverting the forward marginal
    multiplies noise-estimate errors by sqrt((1 - alpha_bar_t) / alpha_bar_t),
    which is in the hundreds at the last steps of a coarse schedule.
    """
    if gamma < 0 or delta < 0 or abs(gamma + delta - 1.0) > 1e-9:
        raise ValueError(f"need gamma, delta >= 0 with gamma + delta = 1, got {gamma}, {delta}")
    if t is None or eps is None:
        t, eps = _draw_noise(batch.real, schedule, rng)
    if delta == 0:
        return eps_loss(batch.real, batch.cond, model, t, eps, schedule)
    x_t = forward_sample(batch.real, t, eps, schedule)
    eps_hat = model(x_t, t, batch.cond)
    true_term = ((eps - eps_hat) ** 2).mean()
    x0_hat = predict_x0(x_t, t, eps_hat, schedule)
    sq = (x0_hat - batch.teacher) ** 2
    if physical_weighting == "alpha_bar":
        sq = torch.as_tensor(schedule.alpha_bar[np.asarray(t) - 1], dtype=sq.dtype)[:, None, None] * sq
    elif physical_weighting != "none":
        raise ValueError(f"unknown physical_weighting {physical_weighting!r}")
    physical_term = sq.mean()
    return gamma * true_term + delta * physical_term


def _stage_loss(kind: str, batch, model, schedule, plan: StagePlan, rng, t=None, eps=None):
    if kind == "teacher":
        return teacher_loss(batch, model, schedule, rng, t, eps)
    return student_loss(batch, model, schedule, rng, plan.gamma, plan.delta, t, eps, plan.physical_weighting)


# ---------------------------------------------------------------- loops


def _seeded_generator(*keys) -> torch.Generator:
    state = np.random.SeedSequence(list(keys)).generate_state(2, dtype=np.uint32)
    return torch.Generator().manual_seed(int(state[0]) << 32 | int(state[1]))


def _validation_loss(kind, data: TensorData, model, schedule, plan, config: TrainConfig) -> float:
    # identical noise every epoch so validation losses are comparable
    gen = _seeded_generator(config.seed, 0xEA1)
    total, count = 0.0, 0
    model.eval()
    with torch.no_grad():
        for _ in range(config.validation_repeats):
            for start in range(0, len(data), 256):
                batch = data.subset(slice(start, start + 256))
                total += float(_stage_loss(kind, batch, model, schedule, plan, gen)) * len(batch)
                count += len(batch)
    return total / count


def run_stage(model: Denoiser, train: TensorData, val: TensorData, stage: Stage, plan: StagePlan,
              config: TrainConfig, schedule: NoiseSchedule, stage_index: int = 0) -> dict:
    """Train one stage with early stopping; the best-validation parameters are restored in place.

    Candidates are the parameters after each epoch and the parameters the stage started from.
    """
    if len(train) == 0 or len(val) == 0:
        raise ValueError("training and validation data must be non-empty")
    gen = _seeded_generator(config.seed, stage_index)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=(config.beta1, config.beta2))
    history = {"kind": stage.kind, "patience": stage.patience, "train_loss": [], "val_loss": []}
    # the starting parameters compete too, so a stage never leaves a pretrained model worse on validation
    start_val = _validation_loss(stage.kind, val, model, schedule, plan, config)
    history["initial_val_loss"] = start_val
    best_val, best_state, stale = math.inf, None, 0
    if math.isfinite(start_val):
        best_val, best_state = start_val, copy.deepcopy(model.state_dict())
    # dropout draws from the global torch RNG; fork it so stages are reproducible
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(np.random.SeedSequence([int(config.seed), stage_index, 0xD0]).generate_state(1)[0]))
        for epoch in range(config.max_epochs):
            model.train()
            order = torch.randperm(len(train), generator=gen)
            running, seen = 0.0, 0
            for start in range(0, len(train), config.batch_size):
                batch = train.subset(order[start : start + config.batch_size])
                loss = _stage_loss(stage.kind, batch, model, schedule, plan, gen)
                if not torch.isfinite(loss):
                    raise NumericalError(f"non-finite {stage.kind} loss at stage {stage_index}, epoch {epoch}, batch offset {start}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                running += loss.item() * len(batch)
                seen += len(batch)
            val_loss = _validation_loss(stage.kind, val, model, schedule, plan, config)
            if not math.isfinite(val_loss):
                raise NumericalError(f"non-finite validation loss at stage {stage_index}, epoch {epoch}")
            history["train_loss"].append(running / seen)
            history["val_loss"].append(val_loss)
            log.info("stage %d (%s) epoch %d: train %.5f val %.5f", stage_index, stage.kind, epoch, running / seen, val_loss)
            if val_loss < best_val:
                best_val, best_state, stale = val_loss, copy.deepcopy(model.state_dict()), 0
            else:
                stale += 1
            if stale >= stage.patience:
                break
    model.load_state_dict(best_state)
    history["best_val_loss"] = best_val
    history["epochs"] = len(history["val_loss"])
    return history


def new_model(config: DenoiserConfig, norm: NormStats, seed) -> Denoiser:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(np.random.SeedSequence([int(seed), 0x1417]).generate_state(1)[0]))
        return Denoiser(config, norm)


@dataclass
class TrainResult:
    model: Denoiser
    schedule: NoiseSchedule
    histories: list[dict]
    train_records: list[DatasetRecord] = field(repr=False)
    val_records: list[DatasetRecord] = field(repr=False)


def run_plan(records: list[DatasetRecord], plan: StagePlan, config: TrainConfig,
             schedule: NoiseSchedule | None = None, denoiser_config: DenoiserConfig | None = None,
             model: Denoiser | None = None, val_records: list[DatasetRecord] | None = None) -> TrainResult:
    """Run the stages of ``plan`` in order on one shared model.

    Unless ``val_records`` is given, a validation split is held out by user and
    stratified by AOI. A fresh model normalizes with statistics of the training
    split; a supplied model keeps its own.
    """
    schedule = schedule or make_schedule()
    if val_records is None:
        train_records, val_records = split_by_user(records, config.validation_fraction, config.seed)
    else:
        train_records = records
    if not train_records or not val_records:
        raise ValueError("need at least one training and one validation record")
    if model is None:
        model = new_model(denoiser_config or DenoiserConfig(), NormStats.fit(train_records), config.seed)
    train = TensorData.from_records(train_records, model.norm)
    val = TensorData.from_records(val_records, model.norm)
    histories = [run_stage(model, train, val, stage, plan, config, schedule, i) for i, stage in enumerate(plan.stages)]
    model.eval()
    return TrainResult(model, schedule, histories, train_records, val_records)


# ---------------------------------------------------------------- evaluation


def generate(model: Denoiser, schedule: NoiseSchedule, records: list[DatasetRecord], n_samples: int, seed,
             chunk: int = 512) -> np.ndarray:
    """Denormalized samples of shape (N, K, T, 2) for each record's conditions."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    model.eval()
    cond = np.stack([condition_features(r.conditions, model.norm) for r in records])
    n, length = cond.shape[:2]
    flat = np.repeat(cond, n_samples, axis=0)
    rng = np.random.default_rng(seed)
    out = np.empty((n * n_samples, length, 2))
    for start in range(0, len(flat), chunk):
        block = flat[start : start + chunk]
        out[start : start + len(block)] = sample(None, EpsAdapter(model, block), schedule, rng, shape=(len(block), length, 2))
    return model.norm.denormalize_target(out).reshape(n, n_samples, length, 2)


def real_matrix(records: list[DatasetRecord]) -> np.ndarray:
    return np.stack([r.real.as_matrix() for r in records])


def evaluate(model: Denoiser, schedule: NoiseSchedule, records: list[DatasetRecord], n_samples: int = 10,
             seed=0, bins: int = DEFAULT_BINS) -> list[dict]:
    """Metric rows; NRMSE uses the per-element median of the generated samples."""
    return metric_report(real_matrix(records), generate(model, schedule, records, n_samples, seed), bins=bins)


def mean_predictor_nrmse(train_records: list[DatasetRecord], eval_records: list[DatasetRecord], channel: int = 0) -> float:
    """NRMSE of predicting the training mean at every step."""
    mean = real_matrix(train_records)[..., channel].mean()
    real = real_matrix(eval_records)[..., channel]
    return nrmse(real, np.full_like(real, mean))


# ---------------------------------------------------------------- transfer


def few_shot_split(records: list[DatasetRecord], target_aoi, seed) -> tuple[list, list, list]:
    """(source records, target evaluation half, target fine-tuning pool), split by user."""
    target_aoi = AOI(target_aoi)
    source = [r for r in records if r.aoi != target_aoi]
    target = [r for r in records if r.aoi == target_aoi]
    if not source or len(target) < 2:
        raise ValueError(f"need source records and at least two {target_aoi.value} records")
    users = np.random.default_rng(seed).permutation(sorted({r.user_id for r in target}))
    eval_users = set(users[: len(users) // 2].tolist())
    return source, [r for r in target if r.user_id in eval_users], [r for r in target if r.user_id not in eval_users]


def few_shot_protocol(records: list[DatasetRecord], target_aoi, mode: str, fraction: float, plan: StagePlan,
                      config: TrainConfig, schedule: NoiseSchedule | None = None,
                      denoiser_config: DenoiserConfig | None = None, source_model: Denoiser | None = None,
                      n_samples: int = 10, bins: int = DEFAULT_BINS) -> dict:
    """Train on the other AOIs, then evaluate on half of the target AOI's users.

    few mode fine-tunes a copy of the source model with one student stage on
    ``fraction`` of the target AOI's records, drawn from the half not used for
    evaluation, at ``config.finetune_learning_rate``. zero mode (or fraction 0) skips fine-tuning.
    """
    if mode not in ("zero", "few"):
        raise ValueError(f"mode must be 'zero' or 'few', got {mode!r}")
    if not 0 <= fraction <= 0.5:
        raise ValueError(f"fraction must lie in [0, 0.5], got {fraction}")
    schedule = schedule or make_schedule()
    source, eval_set, pool = few_shot_split(records, target_aoi, config.seed)
    if source_model is None:
        source_model = run_plan(source, plan, config, schedule, denoiser_config).model
    model = source_model
    n_tune = 0
    if mode == "few" and fraction > 0:
        n_target = len(eval_set) + len(pool)
        n_tune = int(math.floor(fraction * n_target))
        if n_tune < 1:
            raise ValueError(f"fraction {fraction} of {n_target} target records yields no fine-tuning record")
        perm = np.random.default_rng([config.seed, 0xF5]).permutation(len(pool))
        subset = [pool[i] for i in perm[:n_tune]]
        # a tenth of the subset validates; a single record validates on itself
        n_val = max(1, len(subset) // 10) if len(subset) > 1 else 0
        tune, val = (subset[n_val:], subset[:n_val]) if n_val else (subset, subset)
        model = copy.deepcopy(source_model)
        student = StagePlan((Stage("student", plan.stages[-1].patience),), plan.gamma, plan.delta, plan.physical_weighting)
        # a converged model is easily knocked off by full-size Adam steps on a few records
        tune_config = replace(config, learning_rate=config.finetune_learning_rate)
        run_plan(tune, student, tune_config, schedule, model=model, val_records=val)
    rows = evaluate(model, schedule, eval_set, n_samples, config.seed, bins)
    return {
        "target_aoi": AOI(target_aoi).value,
        "mode": "few" if n_tune else "zero",
        "fraction": fraction if n_tune else 0.0,
        "n_finetune": n_tune,
        "n_eval": len(eval_set),
        "plan": plan.label,
        "gamma": plan.gamma,
        "delta": plan.delta,
        "metrics": rows,
    }
