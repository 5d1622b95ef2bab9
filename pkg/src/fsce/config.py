"""Plain `key = value` run configuration.

Lines hold one dotted key each; `#` starts a comment, blank lines are
skipped. Every key has a default, unknown or repeated keys are rejected
with their line number, and values are parsed against the type of the
default. A parsed config can be echoed back in canonical (sorted) form so
runs can log exactly what they used.
"""

from __future__ import annotations

import dataclasses

from .data import CropBlurAugmentConfig, GeometricAugmentConfig
from .distill import TrainSettings
from .errors import ConfigError
from .models import DsafSettings, ModelConfig, get_preset

DEFAULTS: dict[str, object] = {
    "seed": 0,
    "model.preset": "student-M",
    "model.num_classes": 4,
    "model.in_channels": 1,
    "model.insertion": "s1",
    "model.branches": "both",
    "model.kernel_sizes": (3, 5, 7, 9),
    "model.cbam_reduction": 8,
    "model.cbam_legacy_order": False,
    "model.wt_kernel": 3,
    "train.epochs": 300,
    "train.batch_size": 64,
    "train.lr_teacher": 2.5e-4,
    "train.lr_student": 2.5e-3,
    "train.weight_decay": 0.01,
    "kd.enabled": True,
    "kd.T": 3.0,
    "kd.alpha": 0.5,
    "kd.same_view": False,
    "kd.teacher_preset": "teacher-S",
    "aug.teacher.hflip": 0.5,
    "aug.teacher.vflip": 0.5,
    "aug.teacher.rotate_deg": 15.0,
    "aug.teacher.translate_frac": 0.08,
    "aug.teacher.shear_deg": 8.0,
    "aug.teacher.perspective": 0.08,
    "aug.teacher.erase_p": 0.25,
    "aug.teacher.erase_frac": 0.10,
    "aug.student.hflip": 0.5,
    "aug.student.crop_min": 0.7,
    "aug.student.crop_max": 1.0,
    "aug.student.blur_sigma_max": 1.1,
    "aug.student.gray_p": 0.2,
}


def _parse_value(key: str, raw: str, line_no: int):
    default = DEFAULTS[key]
    where = f"line {line_no}: key {key!r}"
    if isinstance(default, bool):
        if raw in ("true", "false"):
            return raw == "true"
        raise ConfigError(f"{where} wants true or false, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{where} wants an integer, got {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{where} wants a number, got {raw!r}") from None
    if isinstance(default, tuple):
        try:
            return tuple(int(p.strip()) for p in raw.split(","))
        except ValueError:
            raise ConfigError(f"{where} wants comma-separated integers, "
                              f"got {raw!r}") from None
    return raw


def parse_config(text: str) -> dict:
    """Parse config text into a fully populated {key: value} dict."""
    values = dict(DEFAULTS)
    seen = set()
    for line_no, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {line_no}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in body.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"line {line_no}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {line_no}: key {key!r} set twice")
        seen.add(key)
        values[key] = _parse_value(key, raw, line_no)
    return values


def load_config(path) -> dict:
    with open(path, "r") as fh:
        return parse_config(fh.read())


def canonical_lines(values: dict) -> list[str]:
    """Sorted `key = value` lines, suitable for logging the effective config."""
    out = []
    for key in sorted(values):
        v = values[key]
        if isinstance(v, bool):
            s = "true" if v else "false"
        elif isinstance(v, tuple):
            s = ",".join(str(p) for p in v)
        else:
            s = repr(v) if isinstance(v, float) else str(v)
        out.append(f"{key} = {s}")
    return out


def student_config(values: dict) -> ModelConfig:
    base = get_preset(values["model.preset"])
    dsaf = DsafSettings(
        kernel_sizes=tuple(values["model.kernel_sizes"]),
        cbam_reduction=values["model.cbam_reduction"],
        branches=values["model.branches"],
        legacy_cbam=values["model.cbam_legacy_order"],
        wt_kernel=values["model.wt_kernel"],
    )
    return dataclasses.replace(
        base, num_classes=values["model.num_classes"],
        in_channels=values["model.in_channels"],
        insertion=values["model.insertion"], dsaf=dsaf)


def teacher_config(values: dict) -> ModelConfig | None:
    """The teacher backbone: the named preset, no enhancement block."""
    if not values["kd.enabled"]:
        return None
    base = get_preset(values["kd.teacher_preset"])
    return dataclasses.replace(
        base, num_classes=values["model.num_classes"],
        in_channels=values["model.in_channels"], insertion="none")


def train_settings(values: dict) -> TrainSettings:
    teacher_aug = GeometricAugmentConfig(
        hflip=values["aug.teacher.hflip"],
        vflip=values["aug.teacher.vflip"],
        rotate_deg=values["aug.teacher.rotate_deg"],
        translate_frac=values["aug.teacher.translate_frac"],
        shear_deg=values["aug.teacher.shear_deg"],
        perspective=values["aug.teacher.perspective"],
        erase_p=values["aug.teacher.erase_p"],
        erase_frac=values["aug.teacher.erase_frac"],
    )
    student_aug = CropBlurAugmentConfig(
        hflip=values["aug.student.hflip"],
        crop_min=values["aug.student.crop_min"],
        crop_max=values["aug.student.crop_max"],
        blur_sigma_max=values["aug.student.blur_sigma_max"],
        gray_p=values["aug.student.gray_p"],
    )
    return TrainSettings(
        epochs=values["train.epochs"],
        batch_size=values["train.batch_size"],
        lr_teacher=values["train.lr_teacher"],
        lr_student=values["train.lr_student"],
        weight_decay=values["train.weight_decay"],
        kd_enabled=values["kd.enabled"],
        temperature=values["kd.T"],
        alpha=values["kd.alpha"],
        same_view=values["kd.same_view"],
        teacher_aug=teacher_aug,
        student_aug=student_aug,
    ).validated()
