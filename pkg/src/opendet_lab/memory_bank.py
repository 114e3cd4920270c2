"""Class-balanced exemplar memory for the instance contrastive loss."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .latent_core import ClassSpace

SNAPSHOT_HEADER = "# opendet-lab memory bank v1"


@dataclass
class MemoryBankConfig:
    capacity: int = 256  # Q, per class
    sample_size: int = 16  # q, admissions per class per iteration
    memory_iou: float = 0.7  # T_m
    batch_iou: float = 0.5  # T_b

    def __post_init__(self):
        if not 1 <= self.sample_size <= self.capacity:
            raise ValueError(
                f"need 1 <= sample_size <= capacity, got q={self.sample_size}, Q={self.capacity}")
        if not 0.0 <= self.batch_iou <= self.memory_iou <= 1.0:
            raise ValueError(
                f"need 0 <= batch_iou <= memory_iou <= 1, got T_b={self.batch_iou}, T_m={self.memory_iou}")


@dataclass
class Proposal:
    features: np.ndarray
    gt_class: int
    iou_with_gt: float
    is_foreground: bool
    embedding: np.ndarray | None = None

    def __post_init__(self):
        if not 0.0 <= self.iou_with_gt <= 1.0:
            raise ValueError(f"iou_with_gt must lie in [0, 1], got {self.iou_with_gt}")


@dataclass
class AdmissionReport:
    admitted: dict[int, list[int]] = field(default_factory=dict)  # class -> proposal indices
    evicted: dict[int, list[int]] = field(default_factory=dict)  # class -> timestamps

    @property
    def num_admitted(self) -> int:
        return sum(len(v) for v in self.admitted.values())


class MemoryBank:
    """Per-class FIFO queues of unit-norm embeddings.

    Admission picks the candidates whose largest cosine similarity to the
    current exemplars of their class is smallest.
    """

    def __init__(self, num_known: int, dim: int, config: MemoryBankConfig | None = None):
        self.space = ClassSpace(num_known)
        self.dim = dim
        self.config = config or MemoryBankConfig()
        self._vecs = [np.zeros((0, dim)) for _ in range(num_known)]
        self._stamps = [np.zeros(0, dtype=np.int64) for _ in range(num_known)]
        self._clock = 0
        self._flat = None

    @property
    def num_known(self) -> int:
        return self.space.num_known

    def __len__(self) -> int:
        return sum(len(v) for v in self._vecs)

    def size(self, c: int) -> int:
        return len(self._vecs[c])

    def exemplars(self, c: int) -> np.ndarray:
        return self._vecs[c]

    def timestamps(self, c: int) -> np.ndarray:
        return self._stamps[c]

    def others(self, c: int) -> np.ndarray:
        """Union of every queue except class ``c``."""
        parts = [v for j, v in enumerate(self._vecs) if j != c]
        return np.concatenate(parts) if parts else np.zeros((0, self.dim))

    def flat(self) -> tuple[np.ndarray, np.ndarray]:
        """All exemplars stacked, with their class labels."""
        if self._flat is None:
            labels = np.concatenate(
                [np.full(len(v), c, dtype=np.int64) for c, v in enumerate(self._vecs)])
            self._flat = (np.concatenate(self._vecs), labels)
        return self._flat

    # ------------------------------------------------------------ admission

    def enqueue_arrays(self, embeddings, classes, ious, is_foreground=None) -> AdmissionReport:
        z = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
        classes = np.asarray(classes, dtype=np.int64)
        ious = np.asarray(ious, dtype=np.float64)
        fg = np.ones(len(classes), dtype=bool) if is_foreground is None else np.asarray(is_foreground, bool)
        report = AdmissionReport()
        if len(classes) == 0:
            return report
        if z.shape[1] != self.dim:
            raise ValueError(f"embedding dim {z.shape[1]} != bank dim {self.dim}")

        eligible = fg & (ious > self.config.memory_iou) & (classes >= 0) & (classes < self.num_known)
        q, cap = self.config.sample_size, self.config.capacity
        for c in np.unique(classes[eligible]):
            cand = np.flatnonzero(eligible & (classes == c))
            norms = np.linalg.norm(z[cand], axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise ValueError("memory bank only stores unit-norm embeddings")
            current = self._vecs[c]
            if len(current) == 0:
                chosen = cand[:q]
            else:
                max_sim = (z[cand] @ current.T).max(axis=1)
                chosen = cand[np.argsort(max_sim, kind="stable")[:q]]
            stamps = self._clock + np.arange(len(chosen))
            self._clock += len(chosen)
            vecs = np.concatenate([current, z[chosen]])
            all_stamps = np.concatenate([self._stamps[c], stamps])
            overflow = len(vecs) - cap
            if overflow > 0:
                report.evicted[int(c)] = all_stamps[:overflow].tolist()
                vecs, all_stamps = vecs[overflow:], all_stamps[overflow:]
            self._vecs[c] = vecs
            self._stamps[c] = all_stamps
            report.admitted[int(c)] = chosen.tolist()
        if report.admitted:
            self._flat = None
        return report

    def enqueue(self, proposals: list[Proposal]) -> AdmissionReport:
        if not proposals:
            return AdmissionReport()
        missing = [i for i, p in enumerate(proposals) if p.embedding is None]
        if missing:
            raise ValueError(f"proposals {missing} carry no embedding")
        return self.enqueue_arrays(
            np.stack([p.embedding for p in proposals]),
            [p.gt_class for p in proposals],
            [p.iou_with_gt for p in proposals],
            [p.is_foreground for p in proposals],
        )

    # ------------------------------------------------------------ snapshots

    def to_text(self) -> str:
        lines = [SNAPSHOT_HEADER,
                 f"# num_known={self.num_known} dim={self.dim} capacity={self.config.capacity} "
                 f"sample_size={self.config.sample_size} memory_iou={self.config.memory_iou!r} "
                 f"batch_iou={self.config.batch_iou!r} clock={self._clock}"]
        for c in range(self.num_known):
            for stamp, v in zip(self._stamps[c], self._vecs[c]):
                lines.append(" ".join([str(c), str(int(stamp))] + [repr(float(x)) for x in v]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MemoryBank":
        lines = text.splitlines()
        if not lines or lines[0] != SNAPSHOT_HEADER:
            raise ValueError("not a memory bank snapshot")
        meta = dict(kv.split("=") for kv in lines[1].lstrip("# ").split())
        config = MemoryBankConfig(int(meta["capacity"]), int(meta["sample_size"]),
                                  float(meta["memory_iou"]), float(meta["batch_iou"]))
        bank = cls(int(meta["num_known"]), int(meta["dim"]), config)
        rows: dict[int, list] = {c: [] for c in range(bank.num_known)}
        for lineno, line in enumerate(lines[2:], start=3):
            parts = line.split()
            if len(parts) != 2 + bank.dim:
                raise ValueError(f"line {lineno}: expected {2 + bank.dim} fields, got {len(parts)}")
            rows[int(parts[0])].append((int(parts[1]), [float(x) for x in parts[2:]]))
        for c, recs in rows.items():
            if recs:
                bank._stamps[c] = np.array([r[0] for r in recs], dtype=np.int64)
                bank._vecs[c] = np.array([r[1] for r in recs])
        bank._clock = int(meta["clock"])
        return bank

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "MemoryBank":
        return cls.from_text(Path(path).read_text())


def ic_anchor_mask(ious, is_foreground, config: MemoryBankConfig) -> np.ndarray:
    return np.asarray(is_foreground, bool) & (np.asarray(ious, dtype=np.float64) > config.batch_iou)


def select_ic_anchors(proposals: list[Proposal], config: MemoryBankConfig) -> list[Proposal]:
    """Foreground proposals whose IoU strictly exceeds ``batch_iou``."""
    return [p for p in proposals if p.is_foreground and p.iou_with_gt > config.batch_iou]
