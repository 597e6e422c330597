"""Teacher training, student distillation, evaluation, ablation and sweeps."""

from __future__ import annotations

import dataclasses
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from l2d.data import ConfigError, Dataset, SceneSpec, augment
from l2d.losses import DistillConfig, l2d_loss
from l2d.metrics import MetricsReport, compute_report, correlation_diff, correlation_matrix
from l2d.model import ModelConfig, MultiLabelNet
from l2d.optim import AdamState, NumericalError, adam_step, one_cycle_lr
from l2d.tensor import no_grad

log = logging.getLogger(__name__)

LOSSES = ("vanilla", "mld", "l2d", "mse", "ps")
AUGMENT_MODES = ("none", "weak", "strong")
STEP_COLUMNS = ("step", "epoch", "lr", "L_BCE", "L_MLD", "L_CD", "L_ID", "L_BASE", "total")
EPOCH_COLUMNS = ("epoch", "train_loss", "val_mAP", "val_OF1", "val_CF1", "lr")

# (row name, use MLD, use CD, use ID)
ABLATION_ROWS = (
    ("none", False, False, False),
    ("MLD", True, False, False),
    ("MLD+CD", True, True, False),
    ("MLD+ID", True, False, True),
    ("MLD+CD+ID", True, True, True),
)


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 30
    max_lr: float = 3e-3
    weight_decay: float = 1e-4
    warmup_frac: float = 0.3
    div_factor: float = 25.0
    final_div: float = 1e4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    augment: str = "weak"
    loss: str = "vanilla"
    distill: DistillConfig = field(default_factory=DistillConfig)
    val_fraction: float = 0.1
    threshold: float = 0.5
    independent_views: bool = False
    eval_batch_size: int = 128

    def __post_init__(self):
        if isinstance(self.distill, dict):
            self.distill = DistillConfig.from_dict(self.distill)
        self.validate()

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (class-aware pairs need two instances)")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.augment not in AUGMENT_MODES:
            raise ConfigError(f"augment must be one of {AUGMENT_MODES}")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")
        if self.max_lr <= 0 or self.weight_decay < 0:
            raise ConfigError("max_lr must be > 0 and weight_decay >= 0")

    def effective_distill(self) -> DistillConfig:
        """The loss weights actually used for the selected loss."""
        d = self.distill
        base = dict(normalize_pairs=d.normalize_pairs, normalize_embeddings=d.normalize_embeddings,
                    ps_temperature=d.ps_temperature, baseline_weight=d.baseline_weight)
        if self.loss == "vanilla":
            return DistillConfig(0.0, 0.0, 0.0, **base)
        if self.loss == "mld":
            return DistillConfig(d.lambda_mld, 0.0, 0.0, **base)
        if self.loss == "l2d":
            return DistillConfig(d.lambda_mld, d.lambda_cd, d.lambda_id, **base)
        return DistillConfig(0.0, 0.0, 0.0, baseline=self.loss, **base)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["distill"] = self.distill.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ExperimentConfig:
    """Everything a CLI run needs; serialises to ``config.json``."""

    scene: SceneSpec = field(default_factory=SceneSpec)
    n_train: int = 2000
    n_test: int = 500
    teacher: ModelConfig = field(default_factory=ModelConfig.teacher)
    student: ModelConfig = field(default_factory=ModelConfig.student)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return {"scene": self.scene.to_dict(), "n_train": self.n_train, "n_test": self.n_test,
                "teacher": self.teacher.to_dict(), "student": self.student.to_dict(),
                "train": self.train.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - {"scene", "n_train", "n_test", "teacher", "student", "train"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        try:
            scene = SceneSpec.from_dict(d.get("scene", {}))
            q = scene.num_classes
            teacher = {"capacity": "teacher", "widths": list(ModelConfig.teacher().widths), "num_classes": q}
            teacher.update(d.get("teacher", {}))
            student = {"capacity": "student", "num_classes": q}
            student.update(d.get("student", {}))
            return cls(scene=scene, n_train=int(d.get("n_train", 2000)), n_test=int(d.get("n_test", 500)),
                       teacher=ModelConfig.from_dict(teacher), student=ModelConfig.from_dict(student),
                       train=TrainConfig.from_dict(d.get("train", {})))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return ExperimentConfig(
            scene=self.scene, n_train=self.n_train, n_test=self.n_test,
            teacher=dataclasses.replace(self.teacher, seed=seed),
            student=dataclasses.replace(self.student, seed=seed),
            train=dataclasses.replace(self.train, seed=seed),
        )


@dataclass
class TrainResult:
    model: MultiLabelNet              # best-validation checkpoint
    final_model: MultiLabelNet        # weights after the last epoch
    best_epoch: int
    epochs: list[dict]
    steps: list[dict]
    config: TrainConfig


# ---------------------------------------------------------------------------
# forward helpers
# ---------------------------------------------------------------------------


@dataclass
class Outputs:
    logits: np.ndarray
    probs: np.ndarray
    embeddings: np.ndarray


def predict(model: MultiLabelNet, x: np.ndarray, batch_size: int = 128) -> Outputs:
    """Batched gradient-free forward pass."""
    logits, probs, embs = [], [], []
    with no_grad():
        for i in range(0, len(x), batch_size):
            out = model(x[i:i + batch_size])
            logits.append(out.predictions.logits.data)
            probs.append(out.predictions.probs.data)
            embs.append(out.embeddings.data)
    return Outputs(np.concatenate(logits), np.concatenate(probs), np.concatenate(embs))


def evaluate(model: MultiLabelNet, dataset: Dataset, threshold: float = 0.5, batch_size: int = 128,
             with_correlation: bool = False) -> MetricsReport:
    """Deterministic full pass without augmentation."""
    if model.cfg.num_classes != dataset.num_classes:
        raise ConfigError(f"model has {model.cfg.num_classes} classes, dataset {dataset.num_classes}")
    out = predict(model, dataset.x, batch_size)
    return compute_report(out.probs, dataset.y, threshold, dataset.class_names, with_correlation)


def split_validation(ds: Dataset, fraction: float) -> tuple[Dataset, Dataset | None]:
    n_val = int(math.ceil(fraction * len(ds))) if fraction > 0 else 0
    if n_val == 0 or n_val >= len(ds):
        return ds, None
    cut = len(ds) - n_val
    return ds.subset(slice(0, cut)), ds.subset(slice(cut, None))


class _TeacherCache:
    """Frozen-teacher outputs for each training example, plain and flipped.

    Valid when the only augmentation is a horizontal flip (``none``/``weak``)
    and teacher and student share the view.
    """

    def __init__(self, teacher: MultiLabelNet, x: np.ndarray, batch_size: int, need_flip: bool):
        self.plain = predict(teacher, x, batch_size)
        self.flipped = predict(teacher, np.ascontiguousarray(x[:, :, ::-1, :]), batch_size) if need_flip else None

    def lookup(self, idx: np.ndarray, flips: np.ndarray) -> Outputs:
        def pick(name):
            a = getattr(self.plain, name)[idx]
            if self.flipped is not None and flips.any():
                a = np.where(flips.reshape((-1,) + (1,) * (a.ndim - 1)), getattr(self.flipped, name)[idx], a)
            return a
        return Outputs(pick("logits"), pick("probs"), pick("embeddings"))


def _augment_batch(x: np.ndarray, mode: str, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    if mode == "none":
        return x, np.zeros(len(x), dtype=bool)
    if mode == "weak":
        flips = rng.random(len(x)) < 0.5
        out = np.where(flips[:, None, None, None], x[:, :, ::-1, :], x)
        return np.ascontiguousarray(out), flips
    out = np.stack([augment(xi, "strong", rng) for xi in x])
    return out, np.zeros(len(x), dtype=bool)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def fit(model: MultiLabelNet, dataset: Dataset, cfg: TrainConfig, teacher: MultiLabelNet | None = None,
        val: Dataset | None = None) -> TrainResult:
    """Train ``model`` in place with the loss selected by ``cfg``.

    ``dataset`` is split into fit / validation parts unless ``val`` is
    given.  The last incomplete batch is dropped.  Returns the
    best-validation-mAP weights alongside the final ones.
    """
    cfg.validate()
    dcfg = cfg.effective_distill()
    if dcfg.uses_teacher:
        if teacher is None:
            raise ConfigError(f"loss {cfg.loss!r} needs a teacher")
        if teacher.cfg.num_classes != model.cfg.num_classes:
            raise ConfigError(f"teacher has {teacher.cfg.num_classes} classes, student {model.cfg.num_classes}")
    if model.cfg.num_classes != dataset.num_classes:
        raise ConfigError(f"model has {model.cfg.num_classes} classes, dataset {dataset.num_classes}")

    if val is None:
        train, val = split_validation(dataset, cfg.val_fraction)
    else:
        train = dataset
    n = len(train)
    steps_per_epoch = n // cfg.batch_size
    if steps_per_epoch == 0:
        raise ConfigError(f"{n} training examples is fewer than one batch of {cfg.batch_size}")
    total_steps = steps_per_epoch * cfg.epochs
    rng = np.random.default_rng([cfg.seed & 0xFFFFFFFF, 7])
    view_rng = np.random.default_rng([cfg.seed & 0xFFFFFFFF, 11])

    cache = None
    if dcfg.uses_teacher and cfg.augment in ("none", "weak") and not cfg.independent_views:
        cache = _TeacherCache(teacher, train.x, cfg.eval_batch_size, need_flip=cfg.augment == "weak")

    params = model.parameters()
    state = AdamState(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    steps: list[dict] = []
    epochs: list[dict] = []
    best = (-math.inf, 0, None)
    step = 0
    lr = cfg.max_lr / cfg.div_factor
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        losses = []
        for b in range(steps_per_epoch):
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            xb, flips = _augment_batch(train.x[idx], cfg.augment, rng)
            yb = train.y[idx]
            t_out = None
            if dcfg.uses_teacher:
                if cache is not None:
                    t_out = cache.lookup(idx, flips)
                else:
                    xt = _augment_batch(train.x[idx], cfg.augment, view_rng)[0] if cfg.independent_views else xb
                    t_out = predict(teacher, xt, cfg.eval_batch_size)
            out = model(xb)
            total, parts = l2d_loss(
                out.predictions.probs, yb,
                None if t_out is None else t_out.probs,
                None if t_out is None else t_out.embeddings,
                out.embeddings, dcfg,
                logits_t=None if t_out is None else t_out.logits,
                logits_s=out.predictions.logits,
            )
            if not np.isfinite(parts["total"]):
                raise NumericalError(f"non-finite loss at step {step}: {parts}")
            lr = one_cycle_lr(step, total_steps, cfg.max_lr, cfg.warmup_frac, cfg.div_factor, cfg.final_div)
            model.zero_grad()
            total.backward()
            try:
                adam_step([p.data for p in params], [p.grad for p in params], state, lr, cfg.weight_decay)
            except NumericalError as exc:
                log.error("step %d: %s", step, exc)
                raise
            steps.append({"step": step, "epoch": epoch, "lr": lr, "L_BCE": parts["bce"], "L_MLD": parts["mld"],
                          "L_CD": parts["cd"], "L_ID": parts["id"], "L_BASE": parts["baseline"],
                          "total": parts["total"]})
            losses.append(parts["total"])
            step += 1
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "lr": lr,
               "val_mAP": float("nan"), "val_OF1": float("nan"), "val_CF1": float("nan")}
        score = -epoch  # without validation, the last epoch wins
        if val is not None:
            rep = evaluate(model, val, cfg.threshold, cfg.eval_batch_size)
            row.update(val_mAP=rep.mAP, val_OF1=rep.OF1, val_CF1=rep.CF1)
            score = rep.mAP
        if val is None or score > best[0]:
            best = (score, epoch, {k: v.copy() for k, v in model.state_dict().items()})
        epochs.append(row)
        log.info("epoch %d loss %.4f val mAP %.4f", epoch, row["train_loss"], row["val_mAP"])

    final_model = model.copy()
    best_model = model.copy()
    best_model.load_state_dict(best[2])
    return TrainResult(best_model, final_model, best[1], epochs, steps, cfg)


def train_teacher(dataset: Dataset, model_cfg: ModelConfig, cfg: TrainConfig) -> TrainResult:
    """Plain BCE training; used for teachers and for undistilled students."""
    if cfg.loss != "vanilla":
        raise ConfigError("train_teacher only runs the vanilla (BCE) loss")
    return fit(MultiLabelNet(model_cfg), dataset, cfg)


def distill_student(teacher: MultiLabelNet, dataset: Dataset, student_cfg: ModelConfig, cfg: TrainConfig,
                    init: MultiLabelNet | None = None) -> TrainResult:
    """Train a student under the loss selected by ``cfg`` with a frozen teacher.

    Works for any capacity ordering, including a teacher smaller than the
    student.  ``init`` optionally seeds the student with existing weights.
    """
    if teacher.cfg.num_classes != student_cfg.num_classes:
        raise ConfigError(f"teacher has {teacher.cfg.num_classes} classes, student {student_cfg.num_classes}")
    student = MultiLabelNet(student_cfg)
    if init is not None:
        student.load_state_dict(init.state_dict())
    frozen = teacher.copy()
    for p in frozen.parameters():
        p.requires_grad = False
    return fit(student, dataset, cfg, teacher=frozen)


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------


def _row_config(base: TrainConfig, use_mld: bool, use_cd: bool, use_id: bool, seed: int) -> TrainConfig:
    d = base.distill
    distill = dataclasses.replace(d, lambda_mld=d.lambda_mld if use_mld else 0.0,
                                  lambda_cd=d.lambda_cd if use_cd else 0.0,
                                  lambda_id=d.lambda_id if use_id else 0.0, baseline="none")
    loss = "l2d" if (use_mld or use_cd or use_id) else "vanilla"
    return dataclasses.replace(base, distill=distill, loss=loss, seed=seed)


def _limit_threads():
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(1)
    except ImportError:  # pragma: no cover
        pass


def _run_job(job):
    kind, payload = job
    if kind == "student":
        teacher_state, teacher_cfg, train, test, student_cfg, cfg = payload
        teacher = MultiLabelNet(teacher_cfg)
        teacher.load_state_dict(teacher_state)
        res = distill_student(teacher, train, student_cfg, cfg)
    else:
        train, test, model_cfg, cfg = payload
        res = train_teacher(train, model_cfg, cfg)
    rep = evaluate(res.model, test, cfg.threshold, cfg.eval_batch_size, with_correlation=True)
    return res, rep


def _map_jobs(jobs: list, workers: int):
    if workers <= 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers, initializer=_limit_threads) as pool:
        return list(pool.map(_run_job, jobs))


@dataclass
class AblationResult:
    rows: list[dict]                            # one per (seed, row name)
    teachers: dict[int, tuple[TrainResult, MetricsReport]]
    students: dict[tuple[int, str], tuple[TrainResult, MetricsReport]]

    def table(self) -> list[dict]:
        """Mean (and std across seeds) of mAP/OF1/CF1 per configuration row."""
        names = [r[0] for r in ABLATION_ROWS if any(x["row"] == r[0] for x in self.rows)]
        out = []
        for name in names:
            spec = next(r for r in ABLATION_ROWS if r[0] == name)
            sel = [x for x in self.rows if x["row"] == name]
            row = {"row": name, "MLD": spec[1], "CD": spec[2], "ID": spec[3], "seeds": len(sel)}
            for metric in ("mAP", "OF1", "CF1"):
                vals = np.array([x[metric] for x in sel])
                row[metric] = float(vals.mean())
                row[f"{metric}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
            out.append(row)
        return out


def run_ablation(train: Dataset, test: Dataset, teacher_cfg: ModelConfig, student_cfg: ModelConfig,
                 base: TrainConfig, seeds: Iterable[int] = (0,), rows: Sequence[str] | None = None,
                 teacher: MultiLabelNet | None = None, workers: int = 1) -> AblationResult:
    """Train the ablation loss configurations under identical seeds.

    Without a ``teacher`` one is trained per seed (vanilla loss, teacher
    config with that seed).  Student model seeds follow the run seed.
    """
    seeds = list(seeds)
    wanted = [r for r in ABLATION_ROWS if rows is None or r[0] in rows]
    teachers: dict[int, tuple[TrainResult, MetricsReport]] = {}
    if teacher is None:
        jobs = [("teacher", (train, test, dataclasses.replace(teacher_cfg, seed=s),
                             dataclasses.replace(base, loss="vanilla", seed=s))) for s in seeds]
        for s, res in zip(seeds, _map_jobs(jobs, workers)):
            teachers[s] = res
    jobs, keys = [], []
    for s in seeds:
        t_model = teacher if teacher is not None else teachers[s][0].model
        for name, use_mld, use_cd, use_id in wanted:
            cfg = _row_config(base, use_mld, use_cd, use_id, s)
            jobs.append(("student", (t_model.state_dict(), t_model.cfg, train, test,
                                     dataclasses.replace(student_cfg, seed=s), cfg)))
            keys.append((s, name))
    students = dict(zip(keys, _map_jobs(jobs, workers)))
    table_rows = []
    for (s, name), (_res, rep) in students.items():
        table_rows.append({"seed": s, "row": name, "mAP": rep.mAP, "OF1": rep.OF1, "CF1": rep.CF1})
    return AblationResult(table_rows, teachers, students)


def run_sweep(train: Dataset, test: Dataset, teacher: MultiLabelNet, student_cfg: ModelConfig,
              base: TrainConfig, parameter: str, values: Sequence[float], workers: int = 1) -> list[dict]:
    """One full-L2D distillation per value of a single balancing weight."""
    if parameter not in ("lambda_mld", "lambda_cd", "lambda_id"):
        raise ConfigError(f"cannot sweep {parameter!r}")
    jobs = []
    for v in values:
        v = float(v)
        if not np.isfinite(v) or v <= 0:
            raise ConfigError(f"sweep values must be positive and finite, got {v}")
        cfg = dataclasses.replace(base, loss="l2d", distill=dataclasses.replace(base.distill, **{parameter: v}))
        jobs.append(("student", (teacher.state_dict(), teacher.cfg, train, test, student_cfg, cfg)))
    rows = []
    for v, (res, rep) in zip(values, _map_jobs(jobs, workers)):
        d = res.config.distill
        rows.append({"parameter": parameter, "value": float(v), "lambda_mld": d.lambda_mld,
                     "lambda_cd": d.lambda_cd, "lambda_id": d.lambda_id,
                     "mAP": rep.mAP, "OF1": rep.OF1, "CF1": rep.CF1})
    return rows


def correlation_report(teacher_probs: np.ndarray, student_probs: dict[str, np.ndarray]) -> dict:
    """Teacher / student prediction correlation matrices and their Frobenius gaps."""
    ct = correlation_matrix(teacher_probs)
    out = {"teacher": {"matrix": ct.tolist(), "diff": correlation_diff(ct, ct)}}
    for name, p in student_probs.items():
        cs = correlation_matrix(p)
        out[name] = {"matrix": cs.tolist(), "diff": correlation_diff(cs, ct)}
    return out


__all__ = [
    "ABLATION_ROWS", "AblationResult", "ExperimentConfig", "Outputs", "TrainConfig", "TrainResult",
    "correlation_report", "distill_student", "evaluate", "fit", "predict", "run_ablation", "run_sweep",
    "split_validation", "train_teacher",
]
