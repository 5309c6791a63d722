"""Pretraining and stream training with compositional feature-map replay.

Training steps follow the weighted two-path loss: a direct path P(Z) with
weight ``alpha`` and a codebook-out path P(Z~) with weight ``beta``.  During
replay only Z~ exists, so replay steps always use alpha = 0.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codebook import Geometry, IndexMap, init_codebook, quantize_batch, reconstruct_batch, route_gradients
from .replay_buffer import Exemplar, ExemplarStore, bytes_to_image, image_to_bytes
from .tensor_nn import (
    NonFiniteError,
    backward,
    build_network,
    cross_entropy_batch,
    forward,
    grow_classifier,
    sgd_step,
)

MODES = ("crumb", "no_replay", "image_replay", "early_feature_replay", "upper_bound")


@dataclass
class TrainConfig:
    mode: str = "crumb"
    learning_rate: float = 0.01
    batch_size: int = 16
    replay_batch_size: int = 0          # 0: same as batch_size
    first_task_epochs: int = 10
    buffer_capacity: int = 100
    n_blocks: int = 64
    block_dim: int = 8
    freeze_codebook: bool = False
    codebook_init: str = "matched_sparse"
    codebook_zero_fraction: float = 0.64
    pretrain_alpha: float = 1.0
    pretrain_beta: float = 1.0
    stream_alpha: float = 0.0
    stream_beta: float = 1.0
    pretrain_epochs: int = 8
    pretrain_warmup_epochs: int = 4
    upper_bound_epochs: int = 4
    early_feature_layer: int = 3
    joint_replay_step: bool = False
    record_without_replay: bool = False
    rebalance_at_task_end: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")
        for a, b, phase in ((self.pretrain_alpha, self.pretrain_beta, "pretrain"),
                            (self.stream_alpha, self.stream_beta, "stream")):
            if a < 0 or b < 0 or a == b == 0:
                raise ValueError(f"{phase} loss weights must be non-negative and not both zero")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1 or self.first_task_epochs < 1:
            raise ValueError("batch_size and first_task_epochs must be >= 1")

    @property
    def replay_batch(self):
        return self.replay_batch_size or self.batch_size


def stack_images(samples):
    return np.stack([s.image for s in samples]).astype(np.float32, copy=False)


def batches(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i:i + size]


class Learner:
    """Network, codebook, replay store and counters for one run."""

    def __init__(self, net, book, config, rng=None):
        self.net = net
        self.book = book
        self.cfg = config
        self.geom = Geometry.for_features(net.feature_shape, book.d) if book is not None else None
        self.rng = rng if rng is not None else np.random.default_rng([config.seed, 11])
        self.store = ExemplarStore(config.buffer_capacity, seed=np.random.default_rng([config.seed, 13]))
        self.label_index = {}           # class id -> logit index, in order of appearance
        self.task = 0                   # tasks completed
        self.steps = 0
        self.replay_steps = 0
        self.log = []
        self.seen_samples = []          # upper_bound only

    # --- bookkeeping -------------------------------------------------------------

    @property
    def seen_classes(self):
        return len(self.label_index)

    def targets(self, samples):
        return np.array([self.label_index[s.class_id] for s in samples])

    def params(self):
        ps = [t for _, t in self.net.parameters()]
        if self.book is not None:
            ps.append(self.book.blocks)
        return ps

    def step(self):
        sgd_step(self.params(), self.cfg.learning_rate)
        self.steps += 1

    def features(self, x):
        return forward(self.net, x, 0, self.net.split_index)

    # --- loss ------------------------------------------------------------------------

    def compute_loss(self, z, indices, z_tilde, y, alpha, beta, skip_direct=False, feature_acts=None):
        """Accumulate gradients of alpha * CE(P(z)) + beta * CE(P(z_tilde)).

        The codebook-out gradient at the split is routed into the selected
        blocks.  With ``feature_acts`` (the forward record of the feature
        extractor for ``z``) the direct-path gradient continues into it.
        Returns (loss, direct CE, codebook-out CE); direct CE is None when
        the direct path was skipped.
        """
        split = self.net.split_index
        loss_direct = None
        if not skip_direct and z is not None:
            acts = forward(self.net, z, from_layer=split)
            loss_direct, g = cross_entropy_batch(acts[-1], y)
            gz = backward(self.net, acts, g * np.asarray(alpha, g.dtype))
            if feature_acts is not None and alpha != 0:
                backward(self.net, feature_acts, gz)
        acts = forward(self.net, z_tilde, from_layer=split)
        loss_book, g = cross_entropy_batch(acts[-1], y)
        gzt = backward(self.net, acts, g * np.asarray(beta, g.dtype))
        if self.book is not None:
            route_gradients(indices, gzt, self.book, self.geom)
        total = beta * loss_book + (alpha * loss_direct if loss_direct is not None else 0.0)
        if not np.isfinite(total):
            raise NonFiniteError("non-finite loss")
        return total, loss_direct, loss_book

    def _record(self, **fields):
        rec = dict(task=self.task + 1, **fields, buffer_size=len(self.store), seen_classes=self.seen_classes)
        self.log.append(rec)
        return rec

    # --- pretraining -------------------------------------------------------------------

    def pretrain(self, samples, classes):
        """Train F, P and the codebook on a disjoint pretraining set.

        A warm-up phase fits F and P on the direct path alone; the codebook
        is then initialized from the resulting feature maps (unless one was
        supplied) and everything trains jointly with the pretraining loss
        weights.  F is frozen afterwards.
        """
        cfg = self.cfg
        self.label_index = {c: i for i, c in enumerate(sorted(classes))}
        grow_classifier(self.net, len(classes), self.rng)
        order = list(samples)
        for epoch in range(cfg.pretrain_warmup_epochs):
            order = [order[i] for i in self.rng.permutation(len(order))]
            for b, batch in enumerate(batches(order, cfg.batch_size)):
                x, y = stack_images(batch), self.targets(batch)
                facts = self.features(x)
                acts = forward(self.net, facts[-1], from_layer=self.net.split_index)
                loss, g = cross_entropy_batch(acts[-1], y)
                if not np.isfinite(loss):
                    raise NonFiniteError("non-finite loss")
                backward(self.net, facts, backward(self.net, acts, g))
                sgd_step([t for _, t in self.net.parameters()], cfg.learning_rate)
                self.steps += 1
                self._record(phase="warmup", epoch=epoch, batch=b, loss_direct=round(loss, 6), loss_codebook=None)
        if self.book is None:
            self.book = self._init_codebook(order)
        self.book.frozen = cfg.freeze_codebook
        for epoch in range(cfg.pretrain_epochs):
            order = [order[i] for i in self.rng.permutation(len(order))]
            for b, batch in enumerate(batches(order, cfg.batch_size)):
                x, y = stack_images(batch), self.targets(batch)
                facts = self.features(x)
                z = facts[-1]
                idx, zt = quantize_batch(z, self.book, self.geom)
                _, ld, lb = self.compute_loss(z, idx, zt, y, cfg.pretrain_alpha, cfg.pretrain_beta,
                                              feature_acts=facts)
                self.step()
                self._record(phase="pretrain", epoch=epoch, batch=b, loss_direct=round(ld, 6),
                             loss_codebook=round(lb, 6))
        self.net.freeze_features()
        return self

    def _init_codebook(self, samples):
        cfg = self.cfg
        ref = self.features(stack_images(samples[:64]))[-1]
        book = init_codebook(cfg.codebook_init, cfg.n_blocks, cfg.block_dim, list(ref),
                             seed=np.random.default_rng([cfg.seed, 17]),
                             zero_fraction=cfg.codebook_zero_fraction)
        self.geom = Geometry.for_features(self.net.feature_shape, book.d)
        return book

    # --- stream learning ---------------------------------------------------------------

    def reset_head(self):
        """Replace the output layer by an empty-width one before streaming."""
        head = self.net.layers[-1]
        head.hyper["out_features"] = 0
        fan_in = head.hyper["in_features"]
        head.params["weight"].data = np.zeros((0, fan_in), head.params["weight"].data.dtype)
        head.params["bias"].data = np.zeros(0, head.params["bias"].data.dtype)
        self.label_index = {}

    def begin_task(self, classes):
        for c in classes:
            if c in self.label_index:
                raise ValueError(f"class {c} already seen; tasks must bring new classes")
            self.label_index[c] = len(self.label_index)
        grow_classifier(self.net, self.seen_classes, self.rng)

    def stream_task(self, passes):
        """Train on one task given as a list of ordered passes over its samples."""
        cfg = self.cfg
        if not passes or not any(passes):
            raise ValueError("empty task")
        replaying = self.task > 0 and cfg.mode in ("crumb", "image_replay", "early_feature_replay")
        recording = cfg.mode in ("crumb", "image_replay", "early_feature_replay") or (
            cfg.mode == "no_replay" and cfg.record_without_replay)
        b = 0
        for epoch, order in enumerate(passes):
            for batch in batches(order, cfg.batch_size):
                x, y = stack_images(batch), self.targets(batch)
                facts = self.features(x)
                z = facts[-1]
                idx, zt = quantize_batch(z, self.book, self.geom)
                loss, ld, lb = self.compute_loss(z, idx, zt, y, cfg.stream_alpha, cfg.stream_beta)
                if not (cfg.joint_replay_step and replaying and len(self.store)):
                    self.step()
                rec = dict(phase="stream", epoch=epoch, batch=b, loss_direct=round(ld, 6),
                           loss_codebook=round(lb, 6))
                if recording:
                    self._insert(batch, idx, facts)
                if replaying and len(self.store):
                    rec["loss_replay"] = round(self._replay_step(), 6)
                self._record(**rec)
                b += 1
        if cfg.mode == "upper_bound":
            self.seen_samples.extend(passes[0])
            self._retrain_all()
        if cfg.rebalance_at_task_end:
            self.store.rebalance()
        self.task += 1

    def _insert(self, batch, idx, facts):
        mode = self.cfg.mode
        for i, s in enumerate(batch):
            if mode == "image_replay":
                payload = image_to_bytes(s.image)
            elif mode == "early_feature_replay":
                layer = self.cfg.early_feature_layer
                payload = (facts.input if layer == 0 else facts[layer - 1])[i].copy()
            else:
                payload = IndexMap(idx[i].astype(self.book.index_dtype), self.geom)
            self.store.insert(Exemplar(s.class_id, payload))

    def _replay_step(self):
        cfg = self.cfg
        picked = self.store.sample_batch(cfg.replay_batch)
        y = np.array([self.label_index[e.label] for e in picked])
        if cfg.mode == "crumb":
            idx = np.stack([e.payload.indices for e in picked]).astype(np.int64)
            zt = reconstruct_batch(idx, self.book, self.geom)
        else:
            if cfg.mode == "image_replay":
                x = np.stack([bytes_to_image(e.payload) for e in picked])
                start = 0
            else:
                x = np.stack([e.payload for e in picked])
                start = cfg.early_feature_layer
            z = forward(self.net, x, start, self.net.split_index)[-1] if start < self.net.split_index else x
            idx, zt = quantize_batch(z, self.book, self.geom)
        _, _, lb = self.compute_loss(None, idx, zt, y, 0.0, 1.0, skip_direct=True)
        self.step()
        self.replay_steps += 1
        return lb

    def _retrain_all(self):
        """Upper bound: retrain on every sample seen so far, shuffled."""
        cfg = self.cfg
        data = list(self.seen_samples)
        for epoch in range(cfg.upper_bound_epochs):
            order = [data[i] for i in self.rng.permutation(len(data))]
            for batch in batches(order, cfg.batch_size):
                x, y = stack_images(batch), self.targets(batch)
                z = self.features(x)[-1]
                idx, zt = quantize_batch(z, self.book, self.geom)
                self.compute_loss(z, idx, zt, y, cfg.pretrain_alpha, cfg.pretrain_beta)
                self.step()

    # --- inference -----------------------------------------------------------------

    def predict(self, images):
        """Class ids from the direct path P(F(x)); no quantization."""
        return predict(self.net, images, sorted(self.label_index, key=self.label_index.get))

def predict(net, images, label_of=None):
    """Arg-max of P(F(images)) as logit indices (or mapped through ``label_of``)."""
    images = np.asarray(images, dtype=np.float32)
    single = images.ndim == 3
    if single:
        images = images[None]
    out = np.concatenate([np.argmax(forward(net, c)[-1], axis=1) for c in batches(images, 256)])
    if label_of is not None:
        out = np.asarray(label_of)[out]
    return int(out[0]) if single else out


def new_learner(config, image_shape, pretrain_classes):
    rng = np.random.default_rng([config.seed, 3])
    c, side, _ = image_shape
    net = build_network(pretrain_classes, rng, image_side=side, in_channels=c)
    return Learner(net, None, config, rng=np.random.default_rng([config.seed, 11]))
