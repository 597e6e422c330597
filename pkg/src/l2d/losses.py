"""Training objectives: BCE, multi-label logits distillation (MLD), class- and
instance-aware label-wise embedding distillation (CD / ID), their weighted
combination, and the MSE / partial-softmax logit baselines.

Teacher inputs are always detached here, so no gradient reaches the teacher.
Probabilities are clamped to ``[EPS, 1 - EPS]`` before any log.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from l2d import _kernels
from l2d.tensor import (
    ShapeError,
    Tensor,
    clamp,
    custom_op,
    huber as huber_op,
    l2_distance,
    log_softmax_lastdim,
)

EPS = 1e-7
BASELINES = ("none", "mse", "ps")
# none: plain sum over ordered pairs; valid: divide by the number of valid
# pairs; all: divide by the size of the summation index set (q*b*b for CD,
# b*q*q for ID), i.e. a mean in which masked terms count as zero
PAIR_NORMALIZATION = ("none", "valid", "all")

DEFAULT_LAMBDA_MLD = 10.0
DEFAULT_LAMBDA_CD = 100.0
DEFAULT_LAMBDA_ID = 1000.0


@dataclass
class DistillConfig:
    """Balancing weights for the distillation terms and baseline selection."""

    lambda_mld: float = DEFAULT_LAMBDA_MLD
    lambda_cd: float = DEFAULT_LAMBDA_CD
    lambda_id: float = DEFAULT_LAMBDA_ID
    baseline: str = "none"
    baseline_weight: float = 1.0
    ps_temperature: float = 1.0
    normalize_pairs: str = "none"
    normalize_embeddings: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.normalize_pairs is True or self.normalize_pairs is False:
            self.normalize_pairs = "valid" if self.normalize_pairs else "none"
        if self.normalize_pairs not in PAIR_NORMALIZATION:
            raise ValueError(f"normalize_pairs must be one of {PAIR_NORMALIZATION}, got {self.normalize_pairs!r}")
        for name in ("lambda_mld", "lambda_cd", "lambda_id", "baseline_weight"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if self.baseline not in BASELINES:
            raise ValueError(f"baseline must be one of {BASELINES}, got {self.baseline!r}")
        if self.ps_temperature <= 0:
            raise ValueError("ps_temperature must be > 0")
        if self.baseline != "none" and (self.lambda_mld or self.lambda_cd or self.lambda_id):
            raise ValueError("a baseline run cannot also enable MLD/CD/ID terms")

    @property
    def uses_teacher(self) -> bool:
        return self.baseline != "none" or bool(self.lambda_mld or self.lambda_cd or self.lambda_id)

    @property
    def uses_embeddings(self) -> bool:
        return bool(self.lambda_cd or self.lambda_id)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        return cls(**d)


def _t(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else np.asarray(x, dtype=np.float64))


def _check_same(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes differ {a.shape} vs {b.shape}")


def _labels(y, like: Tensor) -> np.ndarray:
    y = np.asarray(y.data if isinstance(y, Tensor) else y)
    if y.shape != like.shape[: y.ndim] or y.ndim != 2:
        raise ShapeError(f"label matrix {y.shape} does not match {like.shape}")
    return y.astype(like.dtype)


def bce_loss(probs: Tensor, y) -> Tensor:
    """-(1/b) sum_i sum_k [y log p + (1-y) log(1-p)]; classes summed, not averaged."""
    probs = _t(probs)
    yy = _labels(y, probs)
    if yy.shape != probs.shape:
        raise ShapeError(f"bce_loss: probs {probs.shape} vs labels {yy.shape}")
    p = clamp(probs, EPS, 1 - EPS)
    b = probs.shape[0]
    ll = p.log() * yy + (1 - p).log() * (1 - yy)
    return ll.sum() * (-1.0 / b)


def binary_kl(p_t, p_s) -> Tensor:
    """KL([p_t, 1-p_t] || [p_s, 1-p_s]) in nats, elementwise."""
    p_s = _t(p_s)
    p_t = _t(p_t, p_s).detach()
    pt = np.clip(p_t.data, EPS, 1 - EPS)
    ps = clamp(p_s, EPS, 1 - EPS)
    const = pt * np.log(pt) + (1 - pt) * np.log(1 - pt)
    return (ps.log() * (-pt) - (1 - ps).log() * (1 - pt)) + const


def mld_loss(probs_t, probs_s) -> Tensor:
    """(1/b) sum_i sum_k binary_kl(teacher_ik, student_ik)."""
    probs_s = _t(probs_s)
    probs_t = _t(probs_t, probs_s)
    _check_same(probs_t, probs_s, "mld_loss")
    return binary_kl(probs_t, probs_s).sum() * (1.0 / probs_s.shape[0])


def huber(a, b) -> Tensor:
    """Unit-threshold Huber penalty: 0.5 r^2 if |r| <= 1 else |r| - 0.5."""
    return huber_op(a, b)


def phi(e_a, e_b, y_a, y_b) -> Tensor:
    """Masked distance between two embeddings.

    Returns ``||e_a - e_b||`` when both labels are positive, exactly 0
    otherwise.  The same form serves intra-class (CD) and inter-class (ID)
    relations; only the choice of pairs differs.
    """
    d = l2_distance(e_a, e_b)
    m = (np.asarray(y_a) == 1) & (np.asarray(y_b) == 1)
    return d * m.astype(d.dtype)


phi_cd = phi
phi_id = phi


def _maybe_normalize(e: Tensor, enabled: bool) -> Tensor:
    if not enabled:
        return e
    n = ((e * e).sum(axis=-1, keepdims=True) + EPS).sqrt()
    return e / n


def _pair_scale(mode: str, n_valid: int, shape) -> float:
    if mode == "valid":
        return 1.0 / n_valid if n_valid else 1.0
    if mode == "all":
        g, n = shape[0], shape[1]
        return 1.0 / (g * n * n)
    return 1.0


def _relation_loss_fused(t: np.ndarray, s: Tensor, mask: np.ndarray, normalize_pairs: str) -> Tensor:
    loss, grad, n_pairs = _kernels.relation_huber(t, s.data, mask)
    scale = _pair_scale(normalize_pairs, n_pairs, s.shape)
    out = np.asarray(loss * scale, dtype=s.dtype)
    grad = grad * np.asarray(scale, dtype=grad.dtype)
    return custom_op(out, (s,), lambda g: (grad * g,), "relation_huber")


def _relation_loss_composed(t: np.ndarray, s: Tensor, mask: np.ndarray, normalize_pairs: str) -> Tensor:
    # groups along axis 0, members along axis 1: all ordered member pairs
    pair = (mask[:, :, None] == 1) & (mask[:, None, :] == 1)
    pm = pair.astype(s.dtype)
    tt = Tensor(t.astype(s.dtype))
    n = s.shape[1]
    a_idx, b_idx = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    rt = l2_distance(tt[:, a_idx], tt[:, b_idx]) * pm
    rs = l2_distance(s[:, a_idx], s[:, b_idx]) * pm
    total = huber_op(rt, rs).sum()
    count = int(pair.sum() - np.trace(pair, axis1=1, axis2=2).sum())
    scale = _pair_scale(normalize_pairs, count, s.shape)
    return total * scale if scale != 1.0 else total


def _structural(embs_t, embs_s, y, by_class: bool, cfg: DistillConfig | None, fused: bool) -> Tensor:
    embs_s = _t(embs_s)
    embs_t = _t(embs_t, embs_s).detach()
    _check_same(embs_t, embs_s, "structural loss")
    if embs_s.ndim != 3:
        raise ShapeError(f"embeddings must be [b, q, d], got {embs_s.shape}")
    yy = np.asarray(y.data if isinstance(y, Tensor) else y)
    if yy.shape != embs_s.shape[:2]:
        raise ShapeError(f"labels {yy.shape} do not match embeddings {embs_s.shape}")
    normalize_emb = bool(cfg and cfg.normalize_embeddings)
    normalize_pairs = cfg.normalize_pairs if cfg else "none"
    s = _maybe_normalize(embs_s, normalize_emb)
    t = _maybe_normalize(embs_t, normalize_emb).data
    mask = (yy == 1).astype(np.uint8)
    if by_class:
        s = s.transpose(1, 0, 2)
        t = t.transpose(1, 0, 2)
        mask = mask.T
    fn = _relation_loss_fused if fused else _relation_loss_composed
    return fn(np.ascontiguousarray(t), s, np.ascontiguousarray(mask), normalize_pairs)


def cd_loss(embs_t, embs_s, y, cfg: DistillConfig | None = None, fused: bool = True) -> Tensor:
    """Class-aware consistency: for every class, Huber between teacher and
    student distances over all ordered instance pairs of the batch."""
    return _structural(embs_t, embs_s, y, True, cfg, fused)


def id_loss(embs_t, embs_s, y, cfg: DistillConfig | None = None, fused: bool = True) -> Tensor:
    """Instance-aware consistency: for every instance, Huber between teacher
    and student distances over all ordered class pairs."""
    return _structural(embs_t, embs_s, y, False, cfg, fused)


def mse_baseline(logits_t, logits_s) -> Tensor:
    logits_s = _t(logits_s)
    logits_t = _t(logits_t, logits_s).detach()
    _check_same(logits_t, logits_s, "mse_baseline")
    d = logits_t - logits_s
    return (d * d).mean()


def ps_baseline(logits_t, logits_s, y, temperature: float = 1.0) -> Tensor:
    """Partial-softmax KL baseline.

    For each instance i and positive class k the distribution is a softmax
    over ``{z_ik} U {z_ij : y_ij = 0}`` at the given temperature.  KL(teacher
    || student) is averaged over the (instance, positive) pairs; instances
    without negatives are skipped.
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    logits_s = _t(logits_s)
    logits_t = _t(logits_t, logits_s).detach()
    _check_same(logits_t, logits_s, "ps_baseline")
    yy = np.asarray(y.data if isinstance(y, Tensor) else y) == 1
    b, q = logits_s.shape
    # include[i, k, j]: class j enters the distribution built for (i, k)
    include = np.eye(q, dtype=bool)[None, :, :] | ~yy[:, None, :]
    weight = yy & (~yy).any(axis=1, keepdims=True)
    count = int(weight.sum())
    if count == 0:
        return (logits_s * 0.0).sum()
    offset = np.where(include, 0.0, -1e9).astype(logits_s.dtype)

    def dist(z: Tensor) -> Tensor:
        zz = z.reshape(b, 1, q) * (1.0 / temperature) + offset
        return log_softmax_lastdim(zz)

    log_pt = dist(logits_t).data
    pt = np.exp(log_pt) * include
    log_ps = dist(logits_s)
    kl = ((log_ps * -1.0 + log_pt) * pt).sum(axis=-1)          # [b, q]
    return (kl * weight.astype(logits_s.dtype)).sum() * (1.0 / count)


def l2d_loss(probs_s, y, probs_t, embs_t, embs_s, cfg: DistillConfig,
             logits_t=None, logits_s=None) -> tuple[Tensor, dict[str, float]]:
    """BCE + weighted distillation terms.

    Returns the total and a breakdown of the unweighted terms (plus
    ``total``).  Terms with zero weight are skipped and reported as 0.
    """
    bce = bce_loss(probs_s, y)
    zero = np.zeros((), dtype=bce.dtype)
    parts = {"bce": bce}
    if cfg.lambda_mld:
        parts["mld"] = mld_loss(probs_t, probs_s)
    if cfg.lambda_cd:
        parts["cd"] = cd_loss(embs_t, embs_s, y, cfg)
    if cfg.lambda_id:
        parts["id"] = id_loss(embs_t, embs_s, y, cfg)
    if cfg.baseline == "mse":
        parts["baseline"] = mse_baseline(logits_t, logits_s)
    elif cfg.baseline == "ps":
        parts["baseline"] = ps_baseline(logits_t, logits_s, y, cfg.ps_temperature)
    weights = {"mld": cfg.lambda_mld, "cd": cfg.lambda_cd, "id": cfg.lambda_id, "baseline": cfg.baseline_weight}
    total = bce
    for name in ("mld", "cd", "id", "baseline"):
        if name in parts:
            total = total + parts[name] * np.asarray(weights[name], dtype=bce.dtype)
    breakdown = {name: float(parts.get(name, Tensor(zero)).data) for name in ("bce", "mld", "cd", "id", "baseline")}
    breakdown["total"] = float(total.data)
    return total, breakdown
