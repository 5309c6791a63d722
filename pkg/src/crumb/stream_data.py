"""Task schedules, sample orderings and data sources for stream learning."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor_nn import load_tensor

PROTOCOLS = ("class_instance", "class_iid")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass
class Sample:
    image: np.ndarray
    class_id: int
    object_id: int
    instance_id: int
    frame_index: int
    sample_id: int = -1

    @property
    def clip(self):
        return (self.object_id, self.instance_id)


@dataclass
class Task:
    classes: list
    samples: list


@dataclass
class TaskSchedule:
    tasks: list
    protocol: str
    first_task_epochs: int = 1
    seed: int = 0

    def epochs(self, t):
        """Ordered samples for every pass over task ``t``."""
        task = self.tasks[t]
        if t > 0 or self.first_task_epochs == 1:
            return [task.samples]
        rng = np.random.default_rng([self.seed, 7919])
        passes = [task.samples]
        for _ in range(self.first_task_epochs - 1):
            passes.append(order_samples(task.samples, self.protocol, rng))
        return passes

    def stream(self, t):
        return [s for p in self.epochs(t) for s in p]

    @property
    def classes_seen(self):
        out, acc = [], []
        for task in self.tasks:
            acc = acc + list(task.classes)
            out.append(list(acc))
        return out


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def order_class_iid(samples, seed):
    """Uniform random permutation (Fisher-Yates driven by ``seed``)."""
    rng = _rng(seed)
    perm = rng.permutation(len(samples))
    return [samples[i] for i in perm]


def order_class_instance(samples, seed):
    """Shuffle whole clips; frames within a clip stay in temporal order."""
    rng = _rng(seed)
    clips = {}
    seen = set()
    for s in samples:
        key = (s.class_id, s.object_id, s.instance_id, s.frame_index)
        if key in seen:
            raise DataError(f"duplicate frame {key}")
        seen.add(key)
        clips.setdefault((s.class_id, s.object_id, s.instance_id), []).append(s)
    keys = sorted(clips)
    order = rng.permutation(len(keys))
    out = []
    for i in order:
        out.extend(sorted(clips[keys[i]], key=lambda s: s.frame_index))
    return out


def order_samples(samples, protocol, seed):
    if protocol == "class_iid":
        return order_class_iid(samples, seed)
    if protocol == "class_instance":
        return order_class_instance(samples, seed)
    raise ValueError(f"unknown protocol {protocol!r}")


def build_tasks(class_ids, classes_per_task, protocol, seed, samples=None, first_task_epochs=1):
    """Partition classes into tasks in seeded random order.

    With ``samples`` given, each task also receives its samples ordered by
    ``protocol``; the last task takes any remainder of classes.
    """
    class_ids = list(class_ids)
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}")
    if classes_per_task < 1 or len(class_ids) < classes_per_task:
        raise ValueError(f"cannot form tasks of {classes_per_task} classes from {len(class_ids)}")
    rng = np.random.default_rng(seed)
    shuffled = [class_ids[i] for i in rng.permutation(len(class_ids))]
    groups = [shuffled[i:i + classes_per_task] for i in range(0, len(shuffled), classes_per_task)]
    tasks = []
    for group in groups:
        members = set(group)
        chosen = [s for s in (samples or []) if s.class_id in members]
        tasks.append(Task(sorted(group), order_samples(chosen, protocol, rng) if chosen else []))
    return TaskSchedule(tasks, protocol, first_task_epochs, seed)


# --- synthetic video streams -------------------------------------------------------

@dataclass
class SynthConfig:
    """Desk-scale stand-in for a video object dataset.

    Each class has a smooth random base pattern, each object a perturbed
    copy, and each instance is a clip whose frames drift as an AR(1)
    process with coefficient ``rho`` plus white noise.
    """

    classes: int = 10
    class_offset: int = 0
    objects_per_class: int = 3
    instances_per_object: int = 6
    test_instances_per_object: int = 2
    frames_per_instance: int = 8
    image_side: int = 56
    channels: int = 3
    rho: float = 0.9
    drift_scale: float = 0.25
    noise_scale: float = 0.05
    object_scale: float = 0.35
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.rho < 1:
            raise ValueError("rho must lie in [0, 1)")
        if min(self.classes, self.objects_per_class, self.instances_per_object,
               self.frames_per_instance, self.image_side, self.channels) < 1:
            raise ValueError("synthetic dataset dimensions must be positive")
        if not 0 <= self.test_instances_per_object < self.instances_per_object:
            raise ValueError("need at least one training instance per object")


def smooth_field(rng, channels, side, cells=4):
    """Random low-frequency pattern: a coarse grid upsampled bilinearly."""
    coarse = rng.standard_normal((channels, cells + 1, cells + 1))
    t = np.linspace(0, cells, side)
    i0 = np.minimum(t.astype(int), cells - 1)
    f = t - i0
    rows = coarse[:, i0, :] * (1 - f)[None, :, None] + coarse[:, i0 + 1, :] * f[None, :, None]
    return rows[:, :, i0] * (1 - f)[None, None, :] + rows[:, :, i0 + 1] * f[None, None, :]


def class_pattern(cfg, class_id):
    rng = np.random.default_rng([cfg.seed, 1, class_id])
    return smooth_field(rng, cfg.channels, cfg.image_side, cells=3) + 0.5 * smooth_field(
        rng, cfg.channels, cfg.image_side, cells=7)


def synth_clip(cfg, base, rng):
    """Frames of one instance and the AR(1) drift fields that produced them."""
    c, side = cfg.channels, cfg.image_side
    drift = np.zeros((c, side, side))
    innovation = np.sqrt(1 - cfg.rho ** 2)
    frames, drifts = [], []
    for t in range(cfg.frames_per_instance):
        step = smooth_field(rng, c, side, cells=4)
        drift = step if t == 0 else cfg.rho * drift + innovation * step
        img = base + cfg.drift_scale * drift + cfg.noise_scale * rng.standard_normal((c, side, side))
        frames.append(np.clip(0.5 + 0.25 * img, 0, 1).astype(np.float32))
        drifts.append(drift)
    return frames, drifts


def synth_stream_generate(cfg, return_drift=False):
    """Generate (train, test) sample lists; ``return_drift`` adds the drift fields."""
    train, test, drift_out = [], [], []
    sid = 0
    for k in range(cfg.classes):
        class_id = cfg.class_offset + k
        base_c = class_pattern(cfg, class_id)
        for obj in range(cfg.objects_per_class):
            rng = np.random.default_rng([cfg.seed, 2, class_id, obj])
            base_o = base_c + cfg.object_scale * smooth_field(rng, cfg.channels, cfg.image_side, cells=5)
            test_ids = set(rng.choice(cfg.instances_per_object, cfg.test_instances_per_object, replace=False).tolist())
            for inst in range(cfg.instances_per_object):
                frames, drifts = synth_clip(cfg, base_o, rng)
                split = test if inst in test_ids else train
                for t, img in enumerate(frames):
                    split.append(Sample(img, class_id, class_id * 1000 + obj, inst, t, sid))
                    sid += 1
                if return_drift:
                    drift_out.append(drifts)
    if return_drift:
        return train, test, drift_out
    return train, test


# --- manifests ------------------------------------------------------------------

MANIFEST_HEADER = ["path", "class_id", "object_id", "instance_id", "frame_index"]


class ManifestError(DataError):
    def __init__(self, line, message):
        super().__init__(f"line {line}: {message}")
        self.line = line


def load_manifest(path, frames_per_instance=None):
    """Read samples listed in a CSV manifest of CRTN image tensors.

    Paths are resolved relative to the manifest.  ``frames_per_instance``
    bounds ``frame_index`` when given.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest {path} not found")
    samples, shape = [], None
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if [h.strip() for h in header] != MANIFEST_HEADER:
            raise ManifestError(1, f"expected header {','.join(MANIFEST_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 5:
                raise ManifestError(lineno, f"expected 5 fields, got {len(row)}")
            try:
                class_id, object_id, instance_id, frame = (int(v) for v in row[1:])
            except ValueError:
                raise ManifestError(lineno, "ids must be integers") from None
            if min(class_id, object_id, instance_id, frame) < 0:
                raise ManifestError(lineno, "ids must be non-negative")
            if frames_per_instance is not None and frame >= frames_per_instance:
                raise ManifestError(lineno, f"frame_index {frame} >= frames per instance {frames_per_instance}")
            img_path = path.parent / row[0].strip()
            if not img_path.exists():
                raise ManifestError(lineno, f"image file {row[0]} not found")
            try:
                img = load_tensor(img_path)
            except ValueError as e:
                raise ManifestError(lineno, str(e)) from None
            if img.ndim != 3:
                raise ManifestError(lineno, f"image must be c x w x h, got shape {img.shape}")
            if shape is None:
                shape = img.shape
            elif img.shape != shape:
                raise ManifestError(lineno, f"image shape {img.shape} differs from {shape}")
            samples.append(Sample(img, class_id, object_id, instance_id, frame, len(samples)))
    return samples
