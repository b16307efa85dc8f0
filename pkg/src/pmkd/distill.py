"""Pacemaker distillation: losses, ensemble forward, phases, pipeline.

The combined objective is

    loss = rho * L_FKD + alpha * L_LKD + (1 - alpha) * L_CE

where L_FKD is the mean over taps of the per-tap feature MSE against the
teacher role, L_LKD the temperature-softened KL toward the teacher
logits, and L_CE plain cross-entropy on ground truth. The pipeline runs
it three times: teacher -> pacemaker ensemble, pacemaker -> student,
then teacher -> student with the student re-seeded from the pacemaker's
row-filter member.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .checkpoint import save_checkpoint
from .data import AugmentPolicy, DatasetContainer, minibatches
from .models import ArchSpec, Model, build, build_tap_plan, init_weights
from .optim import SGD, lr_at_epoch
from .tensor import (
    Tape,
    Tensor,
    backward,
    cross_entropy,
    kl_div_temperature,
    ln,
    mse,
    record_on,
    scale,
    softmax_temperature,
)

PACEMAKER_MODES = ("ensemble", "column_only")
ENSEMBLE_AVERAGES = ("logits", "probs")


@dataclass
class DistillConfig:
    """Hyperparameters of one distillation run."""

    tau: float = 4.0
    alpha: float = 0.9
    rho: float = 1.0
    epochs: int = 200
    batch_size: int = 128
    base_lr: float = 0.1
    milestones: tuple = (60, 120, 160)
    factor: float = 0.2
    momentum: float = 0.9
    weight_decay: float = 1e-5
    tau_square_scaling: bool = True
    pacemaker_mode: str = "ensemble"
    ensemble_average: str = "logits"
    phase1_feature_loss: bool = True
    phase1_joint: bool = True

    def validate(self) -> "DistillConfig":
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0,1], got {self.alpha}")
        if self.rho != 0.0 and not 0.01 <= self.rho <= 5.0:
            raise ValueError(f"rho must be 0 (disabled) or in [0.01, 5], "
                             f"got {self.rho}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.pacemaker_mode not in PACEMAKER_MODES:
            raise ValueError(f"pacemaker_mode must be one of {PACEMAKER_MODES}")
        if self.ensemble_average not in ENSEMBLE_AVERAGES:
            raise ValueError(f"ensemble_average must be one of "
                             f"{ENSEMBLE_AVERAGES}")
        return self


@dataclass
class ForwardOutput:
    logits: Tensor
    features: list


@dataclass
class EpochRecord:
    phase: int
    epoch: int
    lr: float
    fkd: float
    lkd: float
    ce: float
    total: float
    test_acc: float


@dataclass
class PhaseReport:
    phase: int
    records: list = field(default_factory=list)
    checkpoint: str | None = None

    @property
    def final_test_acc(self) -> float:
        return self.records[-1].test_acc if self.records else float("nan")


def forward_with_taps(model: Model, x: Tensor, training: bool) -> ForwardOutput:
    """Logits plus tapped activations, in tap order.

    Recording follows the ambient tape: run inside ``record_on`` for a
    trainee, outside it for a frozen teacher role.
    """
    logits, taps = model.forward(x, training, collect_taps=True)
    return ForwardOutput(logits, taps)


def ensemble_forward(row: Model | None, col: Model, x: Tensor,
                     training: bool = False, pacemaker_mode: str = "ensemble",
                     average: str = "logits") -> ForwardOutput:
    """Combine the row- and column-filter members of a pacemaker.

    Logits and per-tap features are elementwise means. With
    ``average="probs"`` the class scores are combined after a softmax
    instead, and log-probabilities act as the ensemble logits. In
    ``column_only`` mode the column member's output is returned alone.
    """
    if pacemaker_mode == "column_only":
        return forward_with_taps(col, x, training)
    if row is None:
        raise ValueError("ensemble mode needs a row member")
    ro = forward_with_taps(row, x, training)
    co = forward_with_taps(col, x, training)
    if len(ro.features) != len(co.features):
        raise ValueError(f"ensemble members tap counts differ: "
                         f"{len(ro.features)} vs {len(co.features)}")
    for i, (a, b) in enumerate(zip(ro.features, co.features)):
        if a.shape != b.shape:
            raise ValueError(f"ensemble member tap {i} shapes differ: "
                             f"{a.shape} vs {b.shape}")
    if average == "logits":
        logits = scale(ro.logits + co.logits, 0.5)
    else:
        p = scale(softmax_temperature(ro.logits, 1.0)
                  + softmax_temperature(co.logits, 1.0), 0.5)
        logits = ln(p)
    feats = [scale(a + b, 0.5) for a, b in zip(ro.features, co.features)]
    return ForwardOutput(logits, feats)


class Ensemble:
    """A pacemaker: row + column members acting as one model."""

    def __init__(self, row: Model | None, col: Model,
                 pacemaker_mode: str = "ensemble", average: str = "logits"):
        if pacemaker_mode not in PACEMAKER_MODES:
            raise ValueError(f"unknown pacemaker mode {pacemaker_mode!r}")
        if pacemaker_mode == "ensemble" and row is None:
            raise ValueError("ensemble mode needs a row member")
        self.row = row if pacemaker_mode == "ensemble" else None
        self.col = col
        self.pacemaker_mode = pacemaker_mode
        self.average = average

    def forward_with_taps(self, x: Tensor, training: bool) -> ForwardOutput:
        return ensemble_forward(self.row, self.col, x, training,
                                self.pacemaker_mode, self.average)

    def members(self) -> list[tuple[str, Model]]:
        out = []
        if self.row is not None:
            out.append(("row", self.row))
        out.append(("col", self.col))
        return out

    def tap_count(self) -> int:
        return len(self.col.tap_indices)

    def parameters(self):
        return [(f"{tag}.{name}", p) for tag, m in self.members()
                for name, p in m.parameters()]

    def state_items(self):
        return [(f"{tag}.{name}", a) for tag, m in self.members()
                for name, a in m.state_items()]

    def zero_grad(self):
        for _, m in self.members():
            m.zero_grad()


def _tap_count(role) -> int:
    if isinstance(role, Ensemble):
        return role.tap_count()
    return len(role.tap_indices)


# ---------------------------------------------------------------------------
# losses

def loss_fkd(teacher_feats, student_feats) -> Tensor:
    """Mean over taps of the per-tap mean squared difference."""
    n = len(teacher_feats)
    if n != len(student_feats):
        raise ValueError(f"tap counts differ: {n} vs {len(student_feats)}")
    if n == 0:
        raise ValueError("no tapped features")
    acc = None
    for t, s in zip(teacher_feats, student_feats):
        term = mse(t.detach() if isinstance(t, Tensor) else Tensor(t), s)
        acc = term if acc is None else acc + term
    return scale(acc, 1.0 / n)


def loss_lkd(teacher_logits, student_logits: Tensor, tau: float,
             tau_square_scaling: bool = True) -> Tensor:
    """Temperature-softened KL(teacher || student); teacher detached."""
    return kl_div_temperature(teacher_logits, student_logits, tau,
                              tau_square_scaling)


def total_loss(fkd: Tensor, lkd: Tensor, ce: Tensor,
               cfg: DistillConfig) -> Tensor:
    """rho * L_FKD + alpha * L_LKD + (1 - alpha) * L_CE, exactly."""
    return scale(fkd, cfg.rho) + scale(lkd, cfg.alpha) + scale(ce, 1.0 - cfg.alpha)


# ---------------------------------------------------------------------------
# evaluation and training

def evaluate(role, container: DatasetContainer, batch_size: int = 256) -> float:
    """Top-1 accuracy, eval mode, deterministic batch order."""
    hits = 0
    for x, y in minibatches(container, batch_size, seed=0, shuffle=False):
        out = _role_forward(role, Tensor(x), training=False)
        pred = np.argmax(out.logits.data, axis=1)
        hits += int((pred == y).sum())
    return hits / container.count


def _role_forward(role, x: Tensor, training: bool) -> ForwardOutput:
    if isinstance(role, Ensemble):
        return role.forward_with_taps(x, training)
    return forward_with_taps(role, x, training)


def _phase_loss(teacher_out, trainee_out, y, cfg: DistillConfig,
                use_fkd: bool) -> tuple[Tensor, float, float, float]:
    ce = cross_entropy(trainee_out.logits, y)
    if teacher_out is None:
        fkd = Tensor(np.float32(0.0))
        lkd = Tensor(np.float32(0.0))
    else:
        fkd = loss_fkd(teacher_out.features, trainee_out.features) if use_fkd \
            else Tensor(np.float32(0.0))
        lkd = loss_lkd(teacher_out.logits, trainee_out.logits, cfg.tau,
                       cfg.tau_square_scaling)
    total = total_loss(fkd, lkd, ce, cfg)
    return total, fkd.item(), lkd.item(), ce.item()


def run_phase(teacher_role, trainee, train_data: DatasetContainer,
              test_data: DatasetContainer, cfg: DistillConfig, phase_id: int,
              seed: int, policy: AugmentPolicy | None = None,
              on_epoch: Callable[[EpochRecord], None] | None = None
              ) -> PhaseReport:
    """Train `trainee` against a frozen `teacher_role` for cfg.epochs.

    With ``teacher_role=None`` (plain supervised training: the teacher
    and baseline rows) rho and alpha must both be zero. A pacemaker
    trainee trains both members jointly through the averaged outputs
    unless ``cfg.phase1_joint`` is off, in which case each member gets
    its own loss against the teacher.
    """
    cfg.validate()
    if teacher_role is None and (cfg.rho != 0.0 or cfg.alpha != 0.0):
        raise ValueError("supervised training (no teacher role) requires "
                         "rho == 0 and alpha == 0")
    if teacher_role is not None and _tap_count(teacher_role) != _tap_count(trainee):
        raise ValueError(
            f"tap-count mismatch: teacher role has {_tap_count(teacher_role)}, "
            f"trainee has {_tap_count(trainee)}")

    independent_members = (isinstance(trainee, Ensemble)
                           and trainee.pacemaker_mode == "ensemble"
                           and not cfg.phase1_joint)
    use_fkd = cfg.phase1_feature_loss if phase_id == 1 else True
    opt = SGD(trainee.parameters(), cfg.momentum, cfg.weight_decay)
    report = PhaseReport(phase_id)

    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(epoch, cfg.base_lr, cfg.milestones, cfg.factor)
        sums = np.zeros(4)
        steps = 0
        for x, y in minibatches(train_data, cfg.batch_size,
                                seed=(seed, phase_id), epoch=epoch,
                                policy=policy):
            xt = Tensor(x)
            teacher_out = None
            if teacher_role is not None:
                teacher_out = _role_forward(teacher_role, xt, training=False)
            tape = Tape()
            with record_on(tape):
                if independent_members:
                    parts = [_phase_loss(teacher_out,
                                         forward_with_taps(m, xt, True),
                                         y, cfg, use_fkd)
                             for _, m in trainee.members()]
                    total = parts[0][0] + parts[1][0]
                    comps = np.mean([p[1:] for p in parts], axis=0)
                else:
                    trainee_out = _role_forward(trainee, xt, training=True)
                    total, *comps = _phase_loss(teacher_out, trainee_out, y,
                                                cfg, use_fkd)
            backward(tape, total)
            opt.step(lr)
            opt.zero_grad()
            sums += (*comps, total.item())
            steps += 1
        steps = max(steps, 1)
        acc = evaluate(trainee, test_data)
        rec = EpochRecord(phase_id, epoch, lr, sums[0] / steps, sums[1] / steps,
                          sums[2] / steps, sums[3] / steps, acc)
        report.records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return report


def transplant_weights(pacemaker_row_member: Model, student: Model) -> Model:
    """Copy the row member's state bitwise into the student.

    Both must be row-student builds of the same spec; batchnorm running
    statistics transfer too, so the student forward is bit-identical to
    the member's afterwards.
    """
    if pacemaker_row_member.spec != student.spec:
        raise ValueError(f"spec mismatch: {pacemaker_row_member.spec.name} vs "
                         f"{student.spec.name}")
    if pacemaker_row_member.mode != "row_student" or student.mode != "row_student":
        raise ValueError("transplant requires row_student builds on both sides")
    src = pacemaker_row_member.state_items()
    dst = student.state_items()
    for (sn, sa), (dn, da) in zip(src, dst):
        if sn != dn:
            raise ValueError(f"parameter name mismatch: {sn!r} vs {dn!r}")
        if sa.shape != da.shape:
            raise ValueError(f"parameter {sn}: shape {sa.shape} vs {da.shape}")
        da[...] = sa
    return student


def run_pipeline(spec: ArchSpec, teacher: Model, train_data: DatasetContainer,
                 test_data: DatasetContainer, cfg: DistillConfig, seed: int,
                 out_dir=None, policy: AugmentPolicy | None = None,
                 on_epoch: Callable[[EpochRecord], None] | None = None,
                 surgery: str = "keep-edges"):
    """The three-stage distillation chain.

    1. teacher -> pacemaker (randomly initialized ensemble);
    2. pacemaker -> student (randomly initialized);
    3. teacher -> student, where the student is first transplanted from
       the pacemaker's trained row member (in column-only ablation mode
       there is no row member, so the phase-2 student carries on).

    Emits one checkpoint per phase into out_dir when given. Returns
    (student, [three PhaseReports]).
    """
    cfg.validate()
    if _tap_count(teacher) != len(build_tap_plan(spec, surgery)):
        raise ValueError("teacher tap plan does not match the student build")

    row = None
    if cfg.pacemaker_mode == "ensemble":
        row = init_weights(build(spec, "row_student", surgery), seed + 1)
    col = init_weights(build(spec, "column", surgery), seed + 2)
    pacemaker = Ensemble(row, col, cfg.pacemaker_mode, cfg.ensemble_average)

    reports = []
    rep1 = run_phase(teacher, pacemaker, train_data, test_data, cfg,
                     phase_id=1, seed=seed, policy=policy, on_epoch=on_epoch)
    rep1.checkpoint = _maybe_save(out_dir, "phase1_pacemaker.pmkd", pacemaker)
    reports.append(rep1)

    student = init_weights(build(spec, "row_student", surgery), seed + 3)
    rep2 = run_phase(pacemaker, student, train_data, test_data, cfg,
                     phase_id=2, seed=seed, policy=policy, on_epoch=on_epoch)
    rep2.checkpoint = _maybe_save(out_dir, "phase2_student.pmkd", student)
    reports.append(rep2)

    if cfg.pacemaker_mode == "ensemble":
        transplant_weights(row, student)
    rep3 = run_phase(teacher, student, train_data, test_data, cfg,
                     phase_id=3, seed=seed, policy=policy, on_epoch=on_epoch)
    rep3.checkpoint = _maybe_save(out_dir, "phase3_student.pmkd", student)
    reports.append(rep3)
    return student, reports


def _maybe_save(out_dir, filename, model) -> str | None:
    if out_dir is None:
        return None
    from pathlib import Path

    path = Path(out_dir) / filename
    save_checkpoint(model, path)
    return str(path)


def supervised_config(cfg: DistillConfig) -> DistillConfig:
    """The same run configuration with distillation terms disabled."""
    return replace(cfg, rho=0.0, alpha=0.0)
