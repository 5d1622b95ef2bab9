"""Online distillation: losses, the co-training loop, and teacher traces.

Per batch the teacher trains first on its own augmented view; its logits are
captured BEFORE its optimizer step and handed to the student as plain
arrays, so no gradient ever reaches teacher parameters through the student
loss. The student minimizes cross-entropy plus alpha times the softened
KL divergence at temperature T (scaled by T^2 to keep gradient magnitude
comparable across temperatures).

Determinism layout: teacher and student draw initialization and
augmentation from disjoint RNG streams and the batch order stream depends
only on (seed, epoch). Two consequences are tested: a run with alpha = 0
is bitwise identical to a run without any teacher, and a teacher trajectory
can be recorded once (a "trace") and replayed for any number of student
configurations with results bitwise equal to live co-training.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng as rng_streams
from . import tensor as T
from .data import (CropBlurAugmentConfig, CropBlurView, GeometricAugmentConfig,
                   GeometricView, to_float)
from .errors import ConfigError, ContractError, DataError, FormatError, ShapeError, \
    TrainingDivergedError
from .models import Backbone, ModelConfig, build_model, save_checkpoint
from .optim import AdamW, cosine_lr, onecycle_lr
from .tensor import Tape, Tensor, no_grad

CSV_HEADER = ("epoch,teacher_loss,student_ce,student_kd,student_total,"
              "train_acc,test_acc,lr_teacher,lr_student")


# ---------------------------------------------------------------------- losses

def _check_labels(labels: np.ndarray, num_classes: int):
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ShapeError(f"labels must be 1-D, got {labels.shape}")
    bad = np.nonzero((labels < 0) | (labels >= num_classes))[0]
    if bad.size:
        raise DataError(f"sample {int(bad[0])} has label {int(labels[bad[0]])}, "
                        f"valid range is 0..{num_classes - 1}")
    return labels


def ce_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy from raw logits (N, K) against int labels (N,)."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (N, K), got {logits.shape}")
    n, k = logits.shape
    labels = _check_labels(labels, k)
    if labels.shape[0] != n:
        raise ShapeError(f"{n} logit rows vs {labels.shape[0]} labels")
    onehot = np.zeros((n, k), dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1
    lp = T.log_softmax(logits, axis=1)
    picked = T.tsum(T.mul(lp, Tensor(onehot, constant=True)), axes=(1,))
    return T.neg(T.tmean(picked))


def kd_loss(student_logits: Tensor, teacher_logits, temperature: float) -> Tensor:
    """T^2-scaled KL(softened teacher || softened student), mean over batch.

    The teacher side is treated as a constant: pass raw arrays (or a tensor,
    whose data is taken as-is). Exactly zero when the logits agree, because
    both log-probabilities run through the same formula.
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if student_logits.ndim != 2 or t.shape != student_logits.shape:
        raise ShapeError(f"logit shapes differ: student {student_logits.shape}, "
                         f"teacher {t.shape}")
    inv = np.asarray(1.0 / temperature, dtype=t.dtype)
    tz = t * inv
    tz = tz - tz.max(axis=1, keepdims=True)
    t_logp = tz - np.log(np.exp(tz).sum(axis=1, keepdims=True))
    p = np.exp(t_logp)
    self_term = (p * t_logp).sum(axis=1)            # sum_k p ln p, per sample
    q_log = T.log_softmax(T.scale(student_logits, float(1.0 / temperature)), axis=1)
    cross = T.tsum(T.mul(q_log, Tensor(p, constant=True)), axes=(1,))
    kl = T.add(Tensor(self_term, constant=True), T.neg(cross))
    return T.scale(T.tmean(kl), float(temperature) ** 2)


# ----------------------------------------------------------------- evaluation

def predict_logits(model: Backbone, images: np.ndarray,
                   batch_size: int = 64) -> np.ndarray:
    """Eval-mode logits for u8 or float images (M, H, W); restores the
    previous training flag."""
    was_training = model.training
    model.eval()
    outs = []
    try:
        x = to_float(images) if images.dtype == np.uint8 else np.asarray(images, np.float32)
        with no_grad():
            for i in range(0, x.shape[0], batch_size):
                xb = x[i:i + batch_size][:, None]
                outs.append(model(Tensor(xb, constant=True)).data.copy())
    finally:
        model.train(was_training)
    return np.concatenate(outs, axis=0)


def evaluate_accuracy(model: Backbone, images: np.ndarray, labels: np.ndarray,
                      batch_size: int = 64) -> float:
    logits = predict_logits(model, images, batch_size)
    return float((logits.argmax(axis=1) == np.asarray(labels)).mean())


# -------------------------------------------------------------- teacher trace

@dataclass
class TeacherTrace:
    """Recorded per-batch pre-step teacher logits for one (seed, data,
    teacher-settings) combination, replayable in place of a live teacher."""

    fingerprint: str
    logits: np.ndarray        # (epochs, nbatches, batch, classes), zero padded
    sizes: np.ndarray         # (nbatches,) actual batch sizes
    indices: np.ndarray       # (epochs, nbatches, batch) i64, -1 padded
    teacher_loss: np.ndarray  # (epochs,)
    lr_teacher: np.ndarray    # (epochs,)

    def save(self, path):
        np.savez_compressed(path, fingerprint=np.frombuffer(
            self.fingerprint.encode(), dtype=np.uint8),
            logits=self.logits, sizes=self.sizes, indices=self.indices,
            teacher_loss=self.teacher_loss, lr_teacher=self.lr_teacher)

    @staticmethod
    def load(path) -> "TeacherTrace":
        with np.load(path, allow_pickle=False) as z:
            try:
                return TeacherTrace(
                    fingerprint=z["fingerprint"].tobytes().decode(),
                    logits=z["logits"], sizes=z["sizes"], indices=z["indices"],
                    teacher_loss=z["teacher_loss"], lr_teacher=z["lr_teacher"])
            except KeyError as exc:
                raise FormatError(f"trace file misses array {exc}") from exc


def trace_fingerprint(teacher_config: ModelConfig, seed: int, epochs: int,
                      batch_size: int, lr_teacher: float, weight_decay: float,
                      aug: GeometricAugmentConfig, train_images: np.ndarray,
                      train_labels: np.ndarray, same_view: bool = False,
                      student_aug: CropBlurAugmentConfig | None = None) -> str:
    parts = [teacher_config.canonical_json(), str(seed), str(epochs),
             str(batch_size), repr(lr_teacher), repr(weight_decay), repr(aug)]
    if same_view:
        # same-view targets are taken on the student's view, so they depend
        # on the student augmentation recipe as well
        parts += ["same_view", repr(student_aug)]
    h = hashlib.sha256()
    for part in parts:
        h.update(part.encode())
        h.update(b"\x00")
    h.update(np.ascontiguousarray(train_images).tobytes())
    h.update(np.ascontiguousarray(train_labels).tobytes())
    return h.hexdigest()


def settings_fingerprint(teacher_config: ModelConfig, seed: int,
                         settings: "TrainSettings", train_images: np.ndarray,
                         train_labels: np.ndarray) -> str:
    s = settings
    return trace_fingerprint(teacher_config, seed, s.epochs, s.batch_size,
                             s.lr_teacher, s.weight_decay, s.teacher_aug,
                             train_images, train_labels, s.same_view,
                             s.student_aug)


# ------------------------------------------------------------------- settings

@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 300
    batch_size: int = 64
    lr_teacher: float = 2.5e-4
    lr_student: float = 2.5e-3
    weight_decay: float = 0.01
    kd_enabled: bool = True
    temperature: float = 3.0
    alpha: float = 0.5
    same_view: bool = False
    eval_every: int = 1  # test-set eval cadence in epochs; 0 = last epoch only
    teacher_aug: GeometricAugmentConfig = field(default_factory=GeometricAugmentConfig)
    student_aug: CropBlurAugmentConfig = field(default_factory=CropBlurAugmentConfig)

    def validated(self) -> "TrainSettings":
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr_teacher <= 0 or self.lr_student <= 0:
            raise ConfigError("learning rates must be positive")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.eval_every < 0:
            raise ConfigError("eval_every must be >= 0")
        return self


@dataclass
class TrainResult:
    rows: list
    student: Backbone
    teacher: Backbone | None
    trace: TeacherTrace | None
    final_train_acc: float
    final_test_acc: float


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".10g")


def write_metrics_csv(path, rows: list[dict]):
    cols = CSV_HEADER.split(",")
    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    for row in rows:
        buf.write(",".join(_fmt(row[c]) for c in cols) + "\n")
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


# ------------------------------------------------------------------ the loop

def _batches(n: int, batch_size: int):
    return [(i, min(i + batch_size, n)) for i in range(0, n, batch_size)]


def train_online(student_config: ModelConfig,
                 teacher_config: ModelConfig | None,
                 train_images: np.ndarray, train_labels: np.ndarray,
                 test_images: np.ndarray, test_labels: np.ndarray, *,
                 settings: TrainSettings, seed: int,
                 csv_path=None, ckpt_path=None,
                 teacher_trace: TeacherTrace | None = None,
                 record_trace: bool = False) -> TrainResult:
    """Run the co-training (or plain student) loop. See the module docstring
    for the determinism contract.

    teacher_trace replaces the live teacher with recorded logits; it must
    have been recorded with the same teacher settings, seed, and data
    (enforced via fingerprint). record_trace=True captures a trace from the
    live teacher for later replay.
    """
    s = settings.validated()
    kd_active = s.kd_enabled and (teacher_config is not None or teacher_trace is not None)
    if record_trace and (teacher_config is None or teacher_trace is not None):
        raise ConfigError("recording a trace needs a live teacher")
    n = train_images.shape[0]
    if n < 1:
        raise DataError("empty training set")
    _check_labels(train_labels, student_config.num_classes)
    _check_labels(test_labels, student_config.num_classes)

    student = build_model(student_config, seed,
                          rng=rng_streams.stream(seed, rng_streams.INIT_STUDENT))
    student_opt = AdamW(student.parameters(), lr=s.lr_student,
                        weight_decay=s.weight_decay)
    student_view = CropBlurView(s.student_aug)

    teacher = None
    teacher_opt = None
    teacher_view = None
    if kd_active and teacher_trace is None:
        teacher = build_model(teacher_config, seed,
                              rng=rng_streams.stream(seed, rng_streams.INIT_TEACHER))
        teacher_opt = AdamW(teacher.parameters(), lr=s.lr_teacher,
                            weight_decay=s.weight_decay)
        teacher_view = GeometricView(s.teacher_aug)
    if teacher_trace is not None:
        if teacher_config is not None:
            expect = settings_fingerprint(teacher_config, seed, s,
                                          train_images, train_labels)
            if teacher_trace.fingerprint != expect:
                raise ContractError("teacher trace does not match this run "
                                    "(different settings, seed, or data)")
        if teacher_trace.logits.shape[0] < s.epochs:
            raise ContractError(f"trace covers {teacher_trace.logits.shape[0]} "
                                f"epochs, run wants {s.epochs}")

    spans = _batches(n, s.batch_size)
    total_iters = s.epochs * len(spans)
    it = 0
    rows: list[dict] = []
    rec_logits = np.zeros((s.epochs, len(spans), s.batch_size,
                           student_config.num_classes), dtype=np.float32) \
        if record_trace else None
    rec_indices = np.full((s.epochs, len(spans), s.batch_size), -1, dtype=np.int64) \
        if record_trace else None
    rec_tloss = np.zeros(s.epochs, dtype=np.float64) if record_trace else None
    rec_lr = np.zeros(s.epochs, dtype=np.float64) if record_trace else None

    train_f32 = to_float(train_images) if train_images.dtype == np.uint8 \
        else np.asarray(train_images, dtype=np.float32)

    for epoch in range(s.epochs):
        order = rng_streams.stream(seed, rng_streams.BATCH_ORDER, epoch).permutation(n)
        rng_t = rng_streams.stream(seed, rng_streams.AUG_TEACHER, epoch)
        rng_s = rng_streams.stream(seed, rng_streams.AUG_STUDENT, epoch)
        lr_t = cosine_lr(epoch, s.epochs, s.lr_teacher) if kd_active else None
        tloss_sum = 0.0
        ce_sum = kd_sum = tot_sum = 0.0
        hits = 0
        lr_s = None
        for bi, (lo, hi) in enumerate(spans):
            idx = order[lo:hi]
            raw = train_f32[idx]
            labels = train_labels[idx].astype(np.int64)
            s_batch = student_view.apply_batch(raw, rng_s)[:, None]

            t_logits_data = None
            if teacher is not None:
                t_batch = teacher_view.apply_batch(raw, rng_t)[:, None]
                with Tape() as tape:
                    t_logits = teacher(Tensor(t_batch, constant=True))
                    t_ce = ce_loss(t_logits, labels)
                t_ce_val = t_ce.item()
                if not np.isfinite(t_ce_val):
                    raise TrainingDivergedError(
                        f"teacher loss became {t_ce_val} at epoch {epoch} step {bi}",
                        epoch, bi)
                if s.same_view:
                    # distillation targets on the student's own view, still
                    # captured before the teacher step
                    teacher.eval()
                    with no_grad():
                        t_logits_data = teacher(Tensor(s_batch, constant=True)) \
                            .data.copy()
                    teacher.train()
                else:
                    t_logits_data = t_logits.data.copy()
                teacher.zero_grad()
                tape.backward(t_ce)
                teacher_opt.step(lr_t)
                tloss_sum += t_ce_val * len(idx)
                if record_trace:
                    rec_logits[epoch, bi, :len(idx)] = t_logits_data
                    rec_indices[epoch, bi, :len(idx)] = idx
            elif teacher_trace is not None:
                stored = teacher_trace.indices[epoch, bi, :hi - lo]
                if not np.array_equal(stored, idx):
                    raise ContractError(
                        f"trace batch order diverges at epoch {epoch} step {bi}")
                t_logits_data = teacher_trace.logits[epoch, bi, :hi - lo].copy()
            lr_s = onecycle_lr(it, total_iters, s.lr_student)
            with Tape() as tape:
                s_logits = student(Tensor(s_batch, constant=True))
                ce = ce_loss(s_logits, labels)
                if kd_active:
                    kd = kd_loss(s_logits, t_logits_data, s.temperature)
                    # alpha == 0 keeps the kd value for the log but leaves the
                    # loss graph identical to the no-teacher run
                    total = T.add(ce, T.scale(kd, s.alpha)) if s.alpha != 0.0 else ce
                else:
                    kd = None
                    total = ce
            tot_val = total.item()
            if not np.isfinite(tot_val):
                raise TrainingDivergedError(
                    f"student loss became {tot_val} at epoch {epoch} step {bi}",
                    epoch, bi)
            student.zero_grad()
            tape.backward(total)
            student_opt.step(lr_s)
            it += 1

            ce_sum += ce.item() * len(idx)
            if kd is not None:
                kd_sum += kd.item() * len(idx)
            tot_sum += tot_val * len(idx)
            hits += int((s_logits.data.argmax(axis=1) == labels).sum())

        last = epoch == s.epochs - 1
        test_acc = None
        if last or (s.eval_every and (epoch + 1) % s.eval_every == 0):
            test_acc = evaluate_accuracy(student, test_images, test_labels,
                                         s.batch_size)
        teacher_loss = None
        if teacher is not None:
            teacher_loss = tloss_sum / n
        elif teacher_trace is not None:
            teacher_loss = float(teacher_trace.teacher_loss[epoch])
        if record_trace:
            rec_tloss[epoch] = teacher_loss
            rec_lr[epoch] = lr_t
        rows.append({
            "epoch": epoch,
            "teacher_loss": teacher_loss,
            "student_ce": ce_sum / n,
            "student_kd": (kd_sum / n) if kd_active else None,
            "student_total": tot_sum / n,
            "train_acc": hits / n,
            "test_acc": test_acc,
            "lr_teacher": lr_t,
            "lr_student": lr_s,
        })

    trace = None
    if record_trace:
        sizes = np.array([hi - lo for lo, hi in spans], dtype=np.int64)
        fp = settings_fingerprint(teacher_config, seed, s,
                                  train_images, train_labels)
        trace = TeacherTrace(fingerprint=fp, logits=rec_logits, sizes=sizes,
                             indices=rec_indices, teacher_loss=rec_tloss,
                             lr_teacher=rec_lr)

    if csv_path is not None:
        write_metrics_csv(csv_path, rows)
    if ckpt_path is not None:
        save_checkpoint(ckpt_path, student, seed)
    return TrainResult(rows=rows, student=student, teacher=teacher, trace=trace,
                       final_train_acc=rows[-1]["train_acc"],
                       final_test_acc=rows[-1]["test_acc"])
