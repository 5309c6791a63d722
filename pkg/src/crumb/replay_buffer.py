"""Class-balanced bounded exemplar store and memory-budget arithmetic."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .codebook import IndexMap, decode_index_map, encode_index_map
from .tensor_nn import decode_tensor, encode_tensor

PAYLOAD_KINDS = ("index_map", "image", "feature_map")


def capacity_from_budget(n_r, w_i, h_i, b, d, s, w, h):
    """How many index maps fit in the memory of ``n_r`` raw RGB images.

    Budget and payloads are counted in 8-bit values; the b x d codebook is
    charged against the budget.
    """
    if (s * w * h) % d:
        raise ValueError(f"s*w*h = {s * w * h} is not divisible by d = {d}")
    per_example = s * w * h // d
    return max(0, (n_r * 3 * w_i * h_i - b * d) // per_example)


@dataclass
class Exemplar:
    label: int
    payload: object


def payload_kind(payload):
    if isinstance(payload, IndexMap):
        return "index_map"
    return "image" if np.asarray(payload).dtype == np.uint8 else "feature_map"


def payload_bytes(payload):
    if isinstance(payload, IndexMap):
        return payload.nbytes
    return np.asarray(payload).nbytes


def image_to_bytes(image):
    """Store a [0, 1] image as 8-bit values, the way raw images are budgeted."""
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)


def bytes_to_image(stored):
    return stored.astype(np.float32) / 255


class ExemplarStore:
    """At most ``capacity`` exemplars, kept balanced across seen classes.

    When full, an insert evicts a uniformly chosen exemplar of the largest
    class.  If the incoming class is among the largest it loses the
    exemplar itself, otherwise the lowest class id among the largest does.
    """

    def __init__(self, capacity, seed=None, kind=None):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        self.capacity = capacity
        self.kind = kind
        self.per_class = {}
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    @property
    def seen_classes(self):
        return len(self.per_class)

    def __len__(self):
        return sum(len(v) for v in self.per_class.values())

    def counts(self):
        return {c: len(v) for c, v in sorted(self.per_class.items())}

    def exemplars(self):
        return [e for c in sorted(self.per_class) for e in self.per_class[c]]

    def insert(self, exemplar):
        kind = payload_kind(exemplar.payload)
        if self.kind is None:
            self.kind = kind
        elif kind != self.kind:
            raise TypeError(f"store holds {self.kind} payloads, got {kind}")
        label = int(exemplar.label)
        bucket = self.per_class.setdefault(label, [])
        if self.capacity == 0:
            return
        if len(self) >= self.capacity:
            self._evict_one(label)
        bucket.append(exemplar)

    def _evict_one(self, incoming):
        largest = max(len(v) for v in self.per_class.values())
        if len(self.per_class[incoming]) == largest:
            victim = incoming
        else:
            victim = min(c for c, v in self.per_class.items() if len(v) == largest)
        bucket = self.per_class[victim]
        bucket.pop(int(self.rng.integers(len(bucket))))

    def quotas(self):
        """Per-class caps: floor(capacity / C), plus one for the first
        ``capacity mod C`` classes in order of first appearance."""
        c = self.seen_classes
        if c == 0:
            return {}
        q, r = divmod(self.capacity, c)
        return {label: q + (i < r) for i, label in enumerate(self.per_class)}

    def rebalance(self):
        """Trim every class above its quota by uniform random eviction."""
        for label, cap in self.quotas().items():
            bucket = self.per_class[label]
            while len(bucket) > cap:
                bucket.pop(int(self.rng.integers(len(bucket))))

    def sample_batch(self, batch_size):
        """``batch_size`` uniform draws with replacement over all exemplars."""
        pool = self.exemplars()
        if not pool:
            raise ValueError("cannot sample from an empty store")
        picks = self.rng.integers(len(pool), size=batch_size)
        return [pool[i] for i in picks]

    def stored_bytes(self):
        return sum(payload_bytes(e.payload) for e in self.exemplars())

    # --- persistence -----------------------------------------------------------

    def save(self, directory):
        """Concatenated payload records plus a JSON sidecar."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        chunks, labels = [], []
        for e in self.exemplars():
            labels.append(int(e.label))
            if self.kind == "index_map":
                chunks.append(encode_index_map(e.payload, int(e.label)))
            else:
                chunks.append(encode_tensor(np.asarray(e.payload, np.float32)))
        (directory / "exemplars.bin").write_bytes(b"".join(chunks))
        d = None
        if self.kind == "index_map" and len(self):
            d = self.exemplars()[0].payload.geometry.d
        sidecar = {
            "capacity": self.capacity,
            "kind": self.kind,
            "chunk_length": d,
            "seen_classes": self.seen_classes,
            "class_order": list(self.per_class),
            "per_class_counts": {str(c): len(v) for c, v in self.per_class.items()},
            "labels": labels,
            "rng_state": self.rng.bit_generator.state,
        }
        (directory / "store.json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        meta = json.loads((directory / "store.json").read_text())
        store = cls(meta["capacity"], kind=meta["kind"])
        store.rng.bit_generator.state = meta["rng_state"]
        for label in meta["class_order"]:
            store.per_class[int(label)] = []
        buf = (directory / "exemplars.bin").read_bytes()
        offset = 0
        for label in meta["labels"]:
            if store.kind == "index_map":
                m, rec_label, offset = decode_index_map(buf, meta["chunk_length"], offset)
                if rec_label != label:
                    raise ValueError("exemplar record label disagrees with sidecar")
                payload = m
            else:
                arr, offset = decode_tensor(buf, offset)
                payload = arr.astype(np.uint8) if store.kind == "image" else arr
            store.per_class[int(label)].append(Exemplar(int(label), payload))
        if offset != len(buf):
            raise ValueError("trailing bytes in exemplar file")
        return store
