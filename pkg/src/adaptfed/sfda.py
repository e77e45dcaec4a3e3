"""Federated source-free domain adaptation.

The server pre-trains on its labelled source pool, augmenting batches with
the feature-moment "styles" that clients report.  After that the source pool
is dropped: each client adapts a student copy on its unlabelled data with
pseudo-labels from a teacher, a distillation term towards that teacher, and
a teacher kept as the running mean of periodic student snapshots.

Styles are per-feature means and standard deviations; restyling maps each
feature through ``std_t * (x - mean_s) / std_s + mean_t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, is_dataclass, replace

import numpy as np

from .datagen import ClientData, LabeledPool, SyntheticTaskSpec, make_pool, make_synthetic
from .model import (Arch, Batch, ModelParams, backward_stacked, cross_entropy, evaluate_batch,
                    forward_stacked, init_params, loss_and_grad, sgd_step)
from .numcore import ConfigurationError, ProtocolError, log_softmax, make_rng, softmax


@dataclass
class StyleDescriptor:
    mean: np.ndarray
    std: np.ndarray


@dataclass
class SfdaConfig:
    kd_weight: float = 1.0
    confidence: float = 0.9
    temperature: float = 2.0
    omega: int = 5
    t_start: int = 10
    rounds: int = 30
    local_epochs: int = 1
    lr: float = 0.05
    batch_size: int = 32
    pretrain_epochs: int = 30
    pretrain_lr: float = 0.05
    aggregate: bool = True

    def __post_init__(self):
        if self.kd_weight < 0:
            raise ConfigurationError("kd_weight must be non-negative")
        if not 0 <= self.confidence <= 1:
            raise ConfigurationError("confidence threshold must lie in [0, 1]")
        if self.temperature <= 0:
            raise ConfigurationError("temperature must be positive")
        if self.omega < 1 or self.t_start < 0:
            raise ConfigurationError("omega must be >= 1 and t_start >= 0")


def extract_style(inputs: np.ndarray) -> StyleDescriptor:
    inputs = np.asarray(inputs, dtype=np.float64)
    return StyleDescriptor(inputs.mean(axis=0), inputs.std(axis=0))


def apply_style(inputs: np.ndarray, style: StyleDescriptor,
                source: StyleDescriptor | None = None) -> np.ndarray:
    """Re-standardise ``inputs`` from the source moments to ``style``.

    ``source`` defaults to the moments of ``inputs``.  Features with zero
    source spread pass through unchanged.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    source = extract_style(inputs) if source is None else source
    flat = source.std == 0
    safe = np.where(flat, 1.0, source.std)
    out = style.std * (inputs - source.mean) / safe + style.mean
    return np.where(flat, inputs, out)


def select_confident(logits: np.ndarray, confidence: float) -> tuple[np.ndarray, np.ndarray]:
    """Indices whose max softmax probability is at least ``confidence``, and their argmax labels."""
    probs = softmax(logits)
    keep = np.flatnonzero(probs.max(axis=1) >= confidence)
    return keep, np.argmax(probs[keep], axis=1)


def pseudo_labels(teacher: ModelParams, arch: Arch, inputs: np.ndarray, confidence: float):
    logits, _ = forward_stacked(teacher.map(lambda a: a[None]), arch, np.asarray(inputs)[None])
    return select_confident(logits[0], confidence)


def kd_loss(student_logits: np.ndarray, teacher_logits: np.ndarray, temperature: float) -> float:
    """``T^2 * KL(softmax(teacher/T) || softmax(student/T))``, averaged over rows."""
    return kd_loss_and_grad(student_logits, teacher_logits, temperature)[0]


def kd_loss_and_grad(student_logits, teacher_logits, temperature):
    t = float(temperature)
    log_p = log_softmax(np.asarray(teacher_logits, dtype=np.float64) / t)
    log_q = log_softmax(np.asarray(student_logits, dtype=np.float64) / t)
    p = np.exp(log_p)
    n = p.shape[0]
    loss = t * t * float((p * (log_p - log_q)).sum() / n)
    grad = t * (np.exp(log_q) - p) / n
    return max(loss, 0.0), grad


@dataclass
class TeacherState:
    weights: ModelParams
    count: int = 0
    omega: int = 5
    t_start: int = 10

    def due(self, t: int) -> bool:
        return t >= self.t_start and (t - self.t_start) % self.omega == 0


def swa_update(teacher: TeacherState, student: ModelParams, t: int) -> TeacherState:
    """Running mean: ``w <- (w * n + student) / (n + 1)``, ``n <- n + 1``."""
    if not teacher.due(t):
        raise ProtocolError(f"teacher update at t={t} is off the schedule "
                            f"(t_start={teacher.t_start}, omega={teacher.omega})")
    n = teacher.count
    weights = teacher.weights.map(lambda w, s: (w * n + s) / (n + 1), student)
    return TeacherState(weights, n + 1, teacher.omega, teacher.t_start)


def sfda_loss_and_grad(student: ModelParams, arch: Arch, inputs: np.ndarray, teacher_logits: np.ndarray,
                       keep: np.ndarray, labels: np.ndarray, cfg: SfdaConfig):
    """Total loss ``pseudo + kd_weight * kd`` on one batch and its gradient.

    ``keep``/``labels`` index the confident rows of ``inputs``.
    """
    single = student.map(lambda a: a[None])
    logits, cache = forward_stacked(single, arch, np.asarray(inputs, dtype=np.float64)[None])
    logits = logits[0]
    dlogits = np.zeros_like(logits)
    pseudo = 0.0
    if keep.size:
        full_labels = np.zeros(logits.shape[0], dtype=np.int64)
        full_labels[keep] = labels
        w = np.zeros(logits.shape[0])
        w[keep] = 1.0 / keep.size
        loss, d = cross_entropy(logits, full_labels, w)
        pseudo = float(loss)
        dlogits += d
    kd = 0.0
    if cfg.kd_weight > 0:
        kd, dk = kd_loss_and_grad(logits, teacher_logits, cfg.temperature)
        dlogits += cfg.kd_weight * dk
    grad = backward_stacked(single, arch, cache, dlogits[None]).map(lambda a: a[0])
    return pseudo + cfg.kd_weight * kd, grad, {"pseudo_loss": pseudo, "kd_loss": kd}


def _logits(params: ModelParams, arch: Arch, inputs: np.ndarray) -> np.ndarray:
    return forward_stacked(params.map(lambda a: a[None]), arch, np.asarray(inputs)[None])[0][0]


def sfda_round(student: ModelParams, teacher: TeacherState, arch: Arch, inputs: np.ndarray,
               cfg: SfdaConfig, t: int, rng: np.random.Generator):
    """One round of local adaptation on unlabelled ``inputs``.

    Pseudo-labels come from the current teacher once per round.  Returns
    ``(student, teacher, stats)``.
    """
    teacher_logits = _logits(teacher.weights, arch, inputs)
    keep_all, labels_all = select_confident(teacher_logits, cfg.confidence)
    label_of = np.full(inputs.shape[0], -1)
    label_of[keep_all] = labels_all
    stats = {"pseudo_kept_frac": keep_all.size / inputs.shape[0], "pseudo_loss": 0.0, "kd_loss": 0.0}
    steps = 0
    for _ in range(cfg.local_epochs):
        order = rng.permutation(inputs.shape[0])
        for k in range(0, order.size, cfg.batch_size):
            idx = order[k:k + cfg.batch_size]
            keep = np.flatnonzero(label_of[idx] >= 0)
            if keep.size == 0 and cfg.kd_weight == 0:
                continue
            _, grad, parts = sfda_loss_and_grad(student, arch, inputs[idx], teacher_logits[idx],
                                                keep, label_of[idx][keep], cfg)
            student = sgd_step(student, grad, cfg.lr)
            stats["pseudo_loss"] += parts["pseudo_loss"]
            stats["kd_loss"] += parts["kd_loss"]
            steps += 1
    if steps:
        stats["pseudo_loss"] /= steps
        stats["kd_loss"] /= steps
    if teacher.due(t):
        teacher = swa_update(teacher, student, t)
    return student, teacher, stats


def pretrain_source(pool: LabeledPool, styles: list[StyleDescriptor], arch: Arch, cfg: SfdaConfig,
                    seed: int = 0) -> ModelParams:
    """Supervised training on the source pool; each batch is restyled to a random client style.

    Index 0 of the style choice keeps the batch unchanged.
    """
    rng = make_rng(seed, "sfda-pretrain")
    params = init_params(arch, make_rng(seed, "init-model"))
    src = extract_style(pool.inputs)
    for _ in range(cfg.pretrain_epochs):
        order = rng.permutation(len(pool))
        for k in range(0, order.size, cfg.batch_size):
            idx = order[k:k + cfg.batch_size]
            x = pool.inputs[idx]
            choice = int(rng.integers(0, len(styles) + 1))
            if choice:
                x = apply_style(x, styles[choice - 1], src)
            _, grad = loss_and_grad(params, arch, Batch(x, pool.labels[idx]))
            params = sgd_step(params, grad, cfg.pretrain_lr)
    return params


@dataclass
class SfdaPhase:
    """Everything the adaptation phase holds; built without the source pool."""

    arch: Arch
    pretrained: ModelParams
    students: list[ModelParams]
    teachers: list[TeacherState]
    clients: list[ClientData] = field(repr=False)


def start_adaptation(pretrained: ModelParams, arch: Arch, clients: list[ClientData],
                     cfg: SfdaConfig) -> SfdaPhase:
    students = [pretrained.copy() for _ in clients]
    teachers = [TeacherState(pretrained.copy(), 0, cfg.omega, cfg.t_start) for _ in clients]
    return SfdaPhase(arch, pretrained.copy(), students, teachers, clients)


def holds_reference(obj, targets: list[np.ndarray], _seen=None) -> bool:
    """True if ``obj`` reaches any array sharing memory with one of ``targets``."""
    seen = set() if _seen is None else _seen
    if id(obj) in seen:
        return False
    seen.add(id(obj))
    if isinstance(obj, np.ndarray):
        return any(np.shares_memory(obj, t) for t in targets)
    if isinstance(obj, LabeledPool):
        return True
    if is_dataclass(obj) and not isinstance(obj, type):
        return any(holds_reference(getattr(obj, f.name), targets, seen) for f in fields(obj))
    if isinstance(obj, dict):
        return any(holds_reference(v, targets, seen) for v in obj.values())
    if isinstance(obj, (list, tuple)):
        return any(holds_reference(v, targets, seen) for v in obj)
    return False


def adaptation_accuracy(phase: SfdaPhase, which: str = "students") -> float:
    """Sample-weighted test accuracy of students, teachers or the frozen model."""
    accs, sizes = [], []
    for k, c in enumerate(phase.clients):
        params = {"students": phase.students[k], "teachers": phase.teachers[k].weights,
                  "pretrained": phase.pretrained}[which]
        accs.append(evaluate_batch(params, phase.arch, c.test)[1])
        sizes.append(len(c.test))
    return float(np.average(accs, weights=sizes))


def run_adaptation(phase: SfdaPhase, cfg: SfdaConfig, seed: int = 0, sink=None) -> SfdaPhase:
    """``cfg.rounds`` adaptation rounds over all clients (train labels are never read)."""
    for t in range(1, cfg.rounds + 1):
        for k, c in enumerate(phase.clients):
            rng = make_rng(seed, "sfda-batch", t, c.id)
            phase.students[k], phase.teachers[k], stats = sfda_round(
                phase.students[k], phase.teachers[k], phase.arch, c.train.inputs, cfg, t, rng)
            if sink is not None:
                sink({"round": t, "client": c.id, "strategy": "sfda", **stats})
        if cfg.aggregate:
            sizes = np.array([c.m for c in phase.clients], dtype=np.float64)
            w = sizes / sizes.sum()
            avg = phase.students[0].map(lambda a: a * w[0])
            for k in range(1, len(phase.students)):
                avg = avg.map(lambda a, b, wk=w[k]: a + wk * b, phase.students[k])
            phase.students = [avg.copy() for _ in phase.students]
    return phase


# --- synthetic two-domain shift -----------------------------------------------------

@dataclass
class DomainShift:
    """Target domain = per-feature affine map plus a rotation mixing pairs of features."""

    scale: np.ndarray
    shift: np.ndarray
    rotation: np.ndarray

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (x @ self.rotation.T) * self.scale + self.shift


def make_domain_shift(dim: int, seed: int, angle: float = 0.9, scale_spread: float = 0.5,
                      shift_std: float = 1.0) -> DomainShift:
    rng = make_rng(seed, "sfda-shift")
    rot = np.eye(dim)
    perm = rng.permutation(dim)
    c, s = np.cos(angle), np.sin(angle)
    for a, b in zip(perm[0::2], perm[1::2]):
        rot[[a, a, b, b], [a, b, a, b]] = [c, -s, s, c]
    scale = np.exp(scale_spread * rng.uniform(-1, 1, dim))
    return DomainShift(scale, shift_std * rng.standard_normal(dim), rot)


def make_sfda_task(spec: SyntheticTaskSpec, source_size: int, shift: DomainShift):
    """Labelled source pool, shifted target clients and the targets' style descriptors.

    Source and targets share cluster means and labels; only the targets'
    inputs pass through ``shift``.
    """
    plain = replace(spec, shift="none")
    pool = make_pool(plain, source_size, stream="sfda-source")
    clients = []
    for c in make_synthetic(plain):
        clients.append(ClientData(c.id, Batch(shift(c.train.inputs), c.train.labels),
                                  Batch(shift(c.test.inputs), c.test.labels), c.group, dict(c.meta)))
    return pool, clients, [extract_style(c.train.inputs) for c in clients]
