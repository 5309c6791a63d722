"""Accuracy metrics, paired t-tests over test batches, run filtering, and
block-activation maps."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betainc

from .codebook import quantize
from .tensor_nn import forward

FILTER_THRESHOLDS = (0.8, 0.6, 0.4)


def top1(predictions, labels):
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if labels.size == 0:
        raise ValueError("empty test set")
    return float(np.mean(predictions == labels))


def top1_all_seen(predict_fn, samples, seen_classes=None):
    """Fraction of ``samples`` (optionally restricted to ``seen_classes``)
    whose prediction matches the label."""
    if seen_classes is not None:
        seen = set(seen_classes)
        samples = [s for s in samples if s.class_id in seen]
    if not samples:
        raise ValueError("empty test set")
    images = np.stack([s.image for s in samples])
    return top1(predict_fn(images), [s.class_id for s in samples])


@dataclass
class AccuracyMatrix:
    """``rows[t][j]``: accuracy on task j's test data after training task t."""

    rows: list = field(default_factory=list)
    all_seen: list = field(default_factory=list)

    def __getitem__(self, key):
        t, j = key
        return self.rows[t][j]

    @property
    def tasks(self):
        return len(self.rows)

    def csv_rows(self, run_id):
        for t, row in enumerate(self.rows):
            for j, a in enumerate(row):
                yield [run_id, t + 1, j + 1, f"{a:.6f}"]
            yield [run_id, t + 1, "all", f"{self.all_seen[t]:.6f}"]


def accuracy_matrix(predictors, task_test_sets):
    """Fill the lower-triangular matrix from one predictor per completed task.

    ``predictors[t]`` maps an image batch to class ids using the model as it
    stood after task t; ``task_test_sets[j]`` holds task j's test samples.
    """
    if len(predictors) > len(task_test_sets):
        raise ValueError("more checkpoints than tasks")
    m = AccuracyMatrix()
    for t, predict_fn in enumerate(predictors):
        if predict_fn is None:
            raise ValueError(f"missing checkpoint for task {t + 1}")
        row = [top1_all_seen(predict_fn, task_test_sets[j]) for j in range(t + 1)]
        seen = [s for j in range(t + 1) for s in task_test_sets[j]]
        m.rows.append(row)
        m.all_seen.append(top1_all_seen(predict_fn, seen))
    return m


def batch_partition(n, batch_size=100, seed=0):
    """Fixed random split of ``n`` test indices into full batches.

    The trailing partial batch is dropped so that every batch has the same
    size.
    """
    perm = np.random.default_rng(seed).permutation(n)
    k = n // batch_size
    return [perm[i * batch_size:(i + 1) * batch_size] for i in range(k)]


def batch_accuracies(predictions, labels, partition):
    correct = np.asarray(predictions) == np.asarray(labels)
    return [float(correct[b].mean()) for b in partition]


def _flatten(series):
    if len(series) and np.ndim(series[0]) > 0:
        return np.concatenate([np.asarray(s, dtype=np.float64) for s in series])
    return np.asarray(series, dtype=np.float64)


def t_sf_two_sided(t, df):
    """Two-sided tail probability of Student's t via the regularized
    incomplete beta function."""
    if math.isinf(t):
        return 0.0
    x = df / (df + t * t)
    return float(betainc(df / 2.0, 0.5, x))


def batch_paired_ttest(series_a, series_b):
    """Paired t-test on per-batch accuracies, pooling batches across runs.

    Each argument is either a flat list of batch accuracies or a list of
    runs, each a list of batch accuracies over the same partition.  Returns
    (t, df, two-sided p).  All-zero differences give t = 0 and p = 1.
    """
    if len(series_a) != len(series_b):
        raise ValueError("series lengths differ")
    for ra, rb in zip(series_a, series_b):
        if np.ndim(ra) > 0 and len(ra) != len(rb):
            raise ValueError("per-run batch counts differ")
    a, b = _flatten(series_a), _flatten(series_b)
    if a.size != b.size:
        raise ValueError("series lengths differ")
    if a.size < 2:
        raise ValueError("need at least two paired batches")
    diff = a - b
    df = diff.size - 1
    mean = diff.mean()
    sd = diff.std(ddof=1)
    if sd == 0:
        if mean == 0:
            return 0.0, df, 1.0
        t = math.copysign(math.inf, mean)
        return t, df, 0.0
    t = mean / (sd / math.sqrt(diff.size))
    return float(t), df, t_sf_two_sided(t, df)


def filter_runs(runs, thresholds=FILTER_THRESHOLDS, key="first_task_accuracy"):
    """Keep runs whose first-task accuracy reaches the first threshold any
    run reaches; keep everything if none does."""
    runs = list(runs)
    if not runs:
        return []
    for th in thresholds:
        kept = [r for r in runs if _first_task(r, key) >= th]
        if kept:
            return kept
    return runs


def _first_task(run, key):
    return run[key] if isinstance(run, dict) else getattr(run, key)


def block_activation_map(net, book, geom, image, slab=0):
    """Block index chosen at every spatial position of one channel slab.

    Returns a (w, h) integer grid for ``image``'s feature map.
    """
    if not 0 <= slab < geom.slabs:
        raise IndexError(f"slab {slab} outside [0, {geom.slabs})")
    image = np.asarray(image, dtype=np.float32)
    z = forward(net, image[None], 0, net.split_index)[-1][0]
    m, _ = quantize(z, book, geom)
    return m.indices[slab].astype(np.int64)


# --- CSV reports ---------------------------------------------------------------

def write_matrix_csv(path, matrices):
    """``matrices``: iterable of (run_id, AccuracyMatrix)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run_id", "task", "eval_task", "accuracy"])
        for run_id, m in matrices:
            w.writerows(m.csv_rows(run_id))


def write_tests_csv(path, tests):
    """``tests``: iterable of (comparison, t, df, p)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["comparison", "t", "df", "p"])
        for name, t, df, p in tests:
            w.writerow([name, f"{t:.6f}", df, f"{p:.6g}"])


def write_grid_csv(path, grid):
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(np.asarray(grid).tolist())
