"""VHL local objective: natural CE + virtual CE + lambda * feature calibration.

Virtual class j is paired with natural class j for calibration, and is
classified on its own head output ``natural_classes + j``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ConfigurationError

MODES = ("full", "naive", "vfa", "off")
CE_WEIGHTINGS = ("joint_mean", "separate_mean")


@dataclass(frozen=True)
class VhlConfig:
    lam: float = 1.0
    calibration_layer: int = -1
    virtual_batch_size: int = 64
    mode: str = "full"
    detach_virtual: bool = True
    ce_weighting: str = "joint_mean"
    temperature: float = 0.07

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown vhl mode {self.mode!r}")
        if self.ce_weighting not in CE_WEIGHTINGS:
            raise ConfigurationError(f"unknown ce_weighting {self.ce_weighting!r}")
        if self.lam < 0:
            raise ConfigurationError("lambda must be non-negative")
        if self.virtual_batch_size < 0:
            raise ConfigurationError("virtual_batch_size must be non-negative")
        if not self.temperature > 0:
            raise ConfigurationError("temperature must be positive")

    @property
    def uses_virtual(self) -> bool:
        return self.mode != "off" and self.virtual_batch_size > 0


@dataclass
class Calibration:
    value: float
    natural_grad: np.ndarray
    virtual_grad: np.ndarray
    active: bool
    class_distances: dict = field(default_factory=dict)


def _normalized(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def calibration_penalty(natural_features, natural_labels, virtual_features, virtual_labels,
                        temperature=0.07, detach_virtual=True, skip_zero_rows=False) -> Calibration:
    """SupCon over the joint natural+virtual batch with aligned labels.

    Virtual rows are frozen when ``detach_virtual`` so only natural
    features are pulled. If no class appears on both sides the penalty is
    inactive and zero. Zero-norm rows raise unless ``skip_zero_rows``, in
    which case they are left out and get a zero gradient (dead ReLU units
    can zero a whole row mid-training).
    """
    nat = np.asarray(natural_features, dtype=np.float64)
    virt = np.asarray(virtual_features, dtype=np.float64)
    y_nat = np.asarray(natural_labels)
    y_virt = np.asarray(virtual_labels)
    if skip_zero_rows:
        keep_n = np.linalg.norm(nat, axis=1) > 0
        keep_v = np.linalg.norm(virt, axis=1) > 0
        if not (keep_n.all() and keep_v.all()):
            sub = calibration_penalty(nat[keep_n], y_nat[keep_n], virt[keep_v], y_virt[keep_v],
                                      temperature, detach_virtual)
            g_n, g_v = np.zeros_like(nat), np.zeros_like(virt)
            g_n[keep_n], g_v[keep_v] = sub.natural_grad, sub.virtual_grad
            return Calibration(sub.value, g_n, g_v, sub.active, sub.class_distances)
    shared = np.intersect1d(y_nat, y_virt)
    if shared.size == 0 or nat.shape[0] + virt.shape[0] < 2:
        return Calibration(0.0, np.zeros_like(nat), np.zeros_like(virt), False)
    joint = np.vstack([nat, virt])
    labels = np.concatenate([y_nat, y_virt])
    frozen = np.zeros(labels.size, dtype=bool)
    if detach_virtual:
        frozen[nat.shape[0]:] = True
    loss, grad = nn.supcon_loss(joint, labels, temperature, frozen)
    zn, zv = _normalized(nat), _normalized(virt)
    distances = {
        int(c): float(np.linalg.norm(zn[y_nat == c].mean(axis=0) - zv[y_virt == c].mean(axis=0)))
        for c in shared
    }
    n = nat.shape[0]
    return Calibration(loss, grad[:n], grad[n:], True, distances)


@dataclass
class StepResult:
    loss: float
    grad: nn.Gradient
    diagnostics: dict


def vhl_step_loss(spec: nn.MlpSpec, params: nn.ModelParams, x, y, vx=None, vy=None,
                  config: VhlConfig = VhlConfig()) -> StepResult:
    """Loss and parameter gradient of one VHL training step.

    In ``vfa`` mode ``vx`` holds feature vectors injected at the calibration
    layer rather than network inputs.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = x.shape[0]
    mode = config.mode
    has_virtual = vx is not None and len(vx) > 0
    if mode in ("full", "naive", "vfa") and not has_virtual:
        raise ConfigurationError(f"mode {mode!r} needs a non-empty virtual batch")
    diag = {"ce": 0.0, "penalty": 0.0, "calibration_active": False, "class_distances": {}}

    if mode in ("off", "vfa"):
        trace = nn.forward(spec, params, x)
        ce, g_logits = nn.cross_entropy(trace.logits, y)
        diag["ce"] = ce
        total = ce
        feature_grads = None
        if mode == "vfa":
            layer = spec.resolve_layer(config.calibration_layer)
            cal = calibration_penalty(trace.features[layer], y, vx, vy, config.temperature, True, skip_zero_rows=True)
            total += config.lam * cal.value
            feature_grads = {layer: config.lam * cal.natural_grad}
            diag.update(penalty=cal.value, calibration_active=cal.active, class_distances=cal.class_distances)
        grad = nn.backward(spec, params, trace, g_logits, feature_grads)
        return StepResult(total, grad, diag)

    vx = np.asarray(vx, dtype=np.float64)
    vy = np.asarray(vy, dtype=np.int64)
    if spec.virtual_classes == 0 or vy.max() >= spec.virtual_classes:
        raise ConfigurationError("virtual labels exceed the model's virtual head outputs")
    trace = nn.forward(spec, params, np.vstack([x, vx]))
    offset_labels = vy + spec.natural_classes
    if config.ce_weighting == "joint_mean":
        ce, g_logits = nn.cross_entropy(trace.logits, np.concatenate([y, offset_labels]))
    else:
        ce_nat, g_nat = nn.cross_entropy(trace.logits[:n], y)
        ce_virt, g_virt = nn.cross_entropy(trace.logits[n:], offset_labels)
        ce, g_logits = ce_nat + ce_virt, np.vstack([g_nat, g_virt])
    diag["ce"] = ce
    total = ce
    feature_grads = None
    if mode == "full":
        layer = spec.resolve_layer(config.calibration_layer)
        feats = trace.features[layer]
        cal = calibration_penalty(feats[:n], y, feats[n:], vy, config.temperature, config.detach_virtual,
                                  skip_zero_rows=True)
        total += config.lam * cal.value
        feature_grads = {layer: config.lam * np.vstack([cal.natural_grad, cal.virtual_grad])}
        diag.update(penalty=cal.value, calibration_active=cal.active, class_distances=cal.class_distances)
    grad = nn.backward(spec, params, trace, g_logits, feature_grads)
    return StepResult(total, grad, diag)
