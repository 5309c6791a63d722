"""Reproducible pretrain / stream / report runs writing self-describing directories."""
from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .codebook import Codebook
from .evaluation import (
    batch_accuracies,
    batch_paired_ttest,
    batch_partition,
    filter_runs,
    write_matrix_csv,
    write_tests_csv,
    AccuracyMatrix,
)
from .replay_buffer import ExemplarStore
from .stream_data import DataError, build_tasks, load_manifest, synth_stream_generate
from .tensor_nn import (
    ShapeError,
    build_network,
    load_checkpoint,
    load_network_state,
    network_from_description,
    network_state,
    save_checkpoint,
)
from .trainer import Learner, predict

log = logging.getLogger(__name__)

FORMAT_VERSION = 1

PRETRAIN_KEYS = (
    "seed", "pretrain_dataset", "pretrain_classes", "objects_per_class", "instances_per_object",
    "test_instances_per_object", "frames_per_instance", "image_side", "rho", "drift_scale", "noise_scale",
    "object_scale", "learning_rate", "batch_size", "n_blocks", "block_dim", "codebook_init",
    "codebook_zero_fraction", "pretrain_alpha", "pretrain_beta", "pretrain_epochs",
    "pretrain_warmup_epochs", "freeze_codebook",
)


class RunError(RuntimeError):
    """A run directory is missing, incomplete or inconsistent."""


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise RunError(f"{path} not found") from None


def _write_jsonl(path, records, mode="w"):
    with open(path, mode) as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def pretrain_fingerprint(values):
    text = "\n".join(f"{k}={values[k]}" for k in PRETRAIN_KEYS)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# --- data ----------------------------------------------------------------------

def _split_manifest(samples, test_instances):
    """Hold out the highest ``test_instances`` instance ids of every object."""
    by_obj = {}
    for s in samples:
        by_obj.setdefault((s.class_id, s.object_id), set()).add(s.instance_id)
    held = {k: set(sorted(v)[-test_instances:]) if test_instances else set() for k, v in by_obj.items()}
    train = [s for s in samples if s.instance_id not in held[(s.class_id, s.object_id)]]
    test = [s for s in samples if s.instance_id in held[(s.class_id, s.object_id)]]
    return train, test


def load_data(values, which):
    source = values["dataset"] if which == "stream" else values["pretrain_dataset"]
    if source == "synthetic":
        return synth_stream_generate(cfgmod.synth_config(values, which))
    samples = load_manifest(source)
    if not samples:
        raise DataError(f"manifest {source} lists no samples")
    return _split_manifest(samples, values["test_instances_per_object"])


# --- pretrain --------------------------------------------------------------------

def run_pretrain(values, out_dir):
    """Pretrain on disjoint classes; writes checkpoint/ plus logs and metrics."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.ini").write_text(cfgmod.dump(values))
    train, test = load_data(values, "pretrain")
    classes = sorted({s.class_id for s in train})
    tc = cfgmod.train_config(values)
    image_shape = train[0].image.shape
    rng = np.random.default_rng([tc.seed, 3])
    net = build_network(len(classes), rng, image_side=image_shape[1], in_channels=image_shape[0])
    learner = Learner(net, None, tc, rng=np.random.default_rng([tc.seed, 11]))
    learner.pretrain(train, classes)
    inverse = np.array(classes)
    metrics = {
        "format_version": FORMAT_VERSION,
        "train_top1": _acc(net, train, inverse),
        "test_top1": _acc(net, test, inverse) if test else None,
        "classes": classes,
        "steps": learner.steps,
        "fingerprint": pretrain_fingerprint(values),
    }
    _write_jsonl(out / "pretrain_log.jsonl", learner.log)
    _write_json(out / "pretrain_metrics.json", metrics)
    save_pretrained(out / "checkpoint", net, learner.book)
    return metrics


def _acc(net, samples, inverse):
    pred = predict(net, np.stack([s.image for s in samples]), inverse)
    return round(float(np.mean(pred == np.array([s.class_id for s in samples]))), 6)


def save_pretrained(directory, net, book):
    state = network_state(net)
    state["codebook.blocks"] = book.blocks.data
    save_checkpoint(directory, state)
    _write_json(Path(directory) / "network.json", net.describe())


def load_pretrained(directory):
    directory = Path(directory)
    if not (directory / "manifest.txt").exists():
        raise RunError(f"no checkpoint in {directory}")
    net = network_from_description(_read_json(directory / "network.json"))
    state = load_checkpoint(directory)
    load_network_state(net, state)
    book = Codebook(state["codebook.blocks"])
    return net, book


# --- stream ---------------------------------------------------------------------

def _checkpoint_dir(out, t):
    return Path(out) / "checkpoints" / f"task_{t:02d}"


def run_stream(values, pretrain_dir, out_dir, resume=False, stop_after_task=None):
    """Run the whole task schedule from a pretrained checkpoint.

    With ``resume`` the last completed task checkpoint in ``out_dir`` is
    restored and the schedule continues from there.  ``stop_after_task``
    ends the run early (used to simulate interruptions).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tc = cfgmod.train_config(values)
    pre_dir = Path(pretrain_dir)
    ckpt = pre_dir / "checkpoint" if (pre_dir / "checkpoint").exists() else pre_dir
    net, book = load_pretrained(ckpt)
    if net.feature_shape[0] % tc.block_dim or book.d != tc.block_dim:
        raise ShapeError(
            f"pretrained codebook block length {book.d} / configured block_dim {tc.block_dim} "
            f"incompatible with {net.feature_shape[0]} feature channels")
    book.frozen = tc.freeze_codebook
    net.freeze_features()
    train, test = load_data(values, "stream")
    if train[0].image.shape != net.input_shape:
        raise ShapeError(f"images {train[0].image.shape} do not match network input {net.input_shape}")
    classes = sorted({s.class_id for s in train})
    schedule = build_tasks(classes, values["classes_per_task"], values["protocol"], values["seed"],
                           train, first_task_epochs=tc.first_task_epochs)
    task_tests = [[s for s in test if s.class_id in set(task.classes)] for task in schedule.tasks]

    learner = Learner(net, book, tc, rng=np.random.default_rng([tc.seed, 11]))
    learner.reset_head()
    matrix = AccuracyMatrix()
    start = 0
    if resume:
        start = _restore(learner, out, matrix, {s.sample_id: s for s in train})
    else:
        (out / "config.resolved.ini").write_text(cfgmod.dump(values))
        _write_jsonl(out / "log.jsonl", [])
    for t in range(start, len(schedule.tasks)):
        task = schedule.tasks[t]
        learner.begin_task(task.classes)
        first = len(learner.log)
        learner.stream_task(schedule.epochs(t))
        _write_jsonl(out / "log.jsonl", learner.log[first:], mode="a")
        fn = _predictor(learner)
        matrix.rows.append([_top1(fn, task_tests[j]) for j in range(t + 1)])
        matrix.all_seen.append(_top1(fn, [s for j in range(t + 1) for s in task_tests[j]]))
        _save_task(learner, out, t, matrix)
        log.info("task %d/%d all-seen accuracy %.4f", t + 1, len(schedule.tasks), matrix.all_seen[-1])
        if stop_after_task is not None and t + 1 >= stop_after_task and t + 1 < len(schedule.tasks):
            return None
    return _finish(learner, out, values, matrix, test)


def _top1(fn, samples):
    if not samples:
        return float("nan")
    pred = fn(np.stack([s.image for s in samples]))
    return round(float(np.mean(pred == np.array([s.class_id for s in samples]))), 6)


def _predictor(learner):
    inverse = np.array(sorted(learner.label_index, key=learner.label_index.get))
    return lambda images: predict(learner.net, images, inverse)


def _save_task(learner, out, t, matrix):
    d = _checkpoint_dir(out, t + 1)
    state = network_state(learner.net)
    state["codebook.blocks"] = learner.book.blocks.data
    save_checkpoint(d, state)
    _write_json(d / "network.json", learner.net.describe())
    learner.store.save(d / "buffer")
    _write_json(d / "state.json", {
        "task": learner.task,
        "steps": learner.steps,
        "replay_steps": learner.replay_steps,
        "label_index": [[int(c), i] for c, i in learner.label_index.items()],
        "rng_state": learner.rng.bit_generator.state,
        "log_records": len(learner.log),
        "matrix_rows": matrix.rows,
        "all_seen": matrix.all_seen,
        "seen_sample_ids": [s.sample_id for s in learner.seen_samples],
    })


def _restore(learner, out, matrix, train_by_id):
    done = sorted((out / "checkpoints").glob("task_*")) if (out / "checkpoints").exists() else []
    if not done:
        raise RunError(f"nothing to resume in {out}")
    d = done[-1]
    state = _read_json(d / "state.json")
    tensors = load_checkpoint(d)
    load_network_state(learner.net, tensors)
    learner.net.freeze_features()
    learner.book.blocks.data = tensors["codebook.blocks"].astype(np.float32)
    learner.store = ExemplarStore.load(d / "buffer")
    learner.task = state["task"]
    learner.steps = state["steps"]
    learner.replay_steps = state["replay_steps"]
    learner.label_index = {c: i for c, i in state["label_index"]}
    learner.rng.bit_generator.state = state["rng_state"]
    learner.seen_samples = [train_by_id[i] for i in state["seen_sample_ids"]]
    lines = (out / "log.jsonl").read_text().splitlines()[:state["log_records"]]
    learner.log = [json.loads(line) for line in lines]
    _write_jsonl(out / "log.jsonl", learner.log)
    matrix.rows[:] = state["matrix_rows"]
    matrix.all_seen[:] = state["all_seen"]
    return learner.task


def _finish(learner, out, values, matrix, test):
    fn = _predictor(learner)
    test = sorted(test, key=lambda s: s.sample_id)
    labels = np.array([s.class_id for s in test])
    pred = fn(np.stack([s.image for s in test]))
    partition = batch_partition(len(test), values["eval_batch_size"], values["eval_partition_seed"])
    series = [round(a, 6) for a in batch_accuracies(pred, labels, partition)]
    fp = hashlib.sha256()
    for b in partition:
        fp.update(np.array([test[i].sample_id for i in b], dtype=np.int64).tobytes())
    metrics = {
        "format_version": FORMAT_VERSION,
        "label": values["label"] or out.name,
        "mode": values["mode"],
        "seed": values["seed"],
        "protocol": values["protocol"],
        "first_task_accuracy": matrix.rows[0][0],
        "final_all_seen": matrix.all_seen[-1],
        "final_top1_test": round(float(np.mean(pred == labels)), 6),
        "accuracy_matrix": matrix.rows,
        "all_seen": matrix.all_seen,
        "batch_accuracies": series,
        "partition_fingerprint": fp.hexdigest()[:16],
        "buffer_size": len(learner.store),
        "stored_bytes": learner.store.stored_bytes(),
        "buffer_kind": learner.store.kind,
        "steps": learner.steps,
        "replay_steps": learner.replay_steps,
    }
    _write_json(out / "metrics.json", metrics)
    write_matrix_csv(out / "accuracy_matrix.csv", [(metrics["label"], matrix)])
    with open(out / "batch_accuracy.csv", "w") as fh:
        fh.write("batch,accuracy\n")
        fh.writelines(f"{i},{a:.6f}\n" for i, a in enumerate(series))
    learner.store.save(out / "buffer")
    return metrics


# --- report ---------------------------------------------------------------------

def load_run(run_dir):
    m = _read_json(Path(run_dir) / "metrics.json")
    m["run_dir"] = str(run_dir)
    return m


def run_report(run_dirs, out_dir, apply_filter=False):
    """Aggregate runs: accuracy matrices, per-label summary, paired t-tests.

    Runs sharing a label are replicate runs; every pair of labels is
    compared by pooling per-batch accuracy pairs over runs matched in seed
    order.
    """
    runs = [load_run(d) for d in run_dirs]
    if not runs:
        raise RunError("report needs at least one run")
    prints = {r["partition_fingerprint"] for r in runs}
    if len(prints) > 1:
        raise DataError("runs were evaluated on incompatible test batch partitions")
    if apply_filter:
        runs = filter_runs(runs)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    matrices = []
    for r in runs:
        m = AccuracyMatrix(r["accuracy_matrix"], r["all_seen"])
        matrices.append((f"{r['label']}/seed{r['seed']}", m))
    write_matrix_csv(out / "accuracy_matrix.csv", matrices)

    groups = {}
    for r in sorted(runs, key=lambda r: (r["label"], r["seed"], r["run_dir"])):
        groups.setdefault(r["label"], []).append(r)
    with open(out / "summary.csv", "w") as fh:
        fh.write("label,runs,mean_final_all_seen,std_final_all_seen\n")
        for label, rs in groups.items():
            acc = np.array([r["final_all_seen"] for r in rs])
            fh.write(f"{label},{len(rs)},{acc.mean():.6f},{acc.std(ddof=1) if len(rs) > 1 else 0.0:.6f}\n")
    tests = []
    labels = list(groups)
    for i, a in enumerate(labels):
        for b in labels[i + 1:]:
            pairs = list(zip(groups[a], groups[b]))
            t, df, p = batch_paired_ttest([x["batch_accuracies"] for x, _ in pairs],
                                          [y["batch_accuracies"] for _, y in pairs])
            tests.append((f"{a} vs {b}", t, df, p))
    write_tests_csv(out / "ttests.csv", tests)
    summary = {"runs": len(runs), "labels": labels, "tests": [list(t) for t in tests]}
    _write_json(out / "report.json", summary)
    return summary


# --- ablation grid ---------------------------------------------------------------

def run_ablation(values, grid, out_dir):
    """Pretrain (cached per pretraining settings) and stream every grid point."""
    out = Path(out_dir)
    children = []
    for name, child in cfgmod.expand_grid(values, grid):
        if not child["label"]:
            child["label"] = ",".join(p for p in name.split(",") if not p.startswith("seed=")) or "base"
        pre = out / "_pretrain" / pretrain_fingerprint(child)
        if not (pre / "checkpoint" / "manifest.txt").exists():
            run_pretrain(child, pre)
        run_stream(child, pre, out / name)
        children.append(out / name)
    return run_report(children, out / "report", apply_filter=values["filter_runs"])
