"""Run configuration: one dataclass describing a full experiment.

Configs load from JSON files whose keys mirror the field names.  Dataset
entries under ``data`` are either ``{"path": ...}`` (the portable dataset
format) or ``{"synth": {...}}`` with :func:`fewshot_ibp.episodes.synth_dataset`
keyword arguments.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

from .episodes import Dataset, TaskSpec, load_dataset, synth_dataset

LEARNERS = ("protonet", "maml")
OBJECTIVES = (
    "vanilla",
    "ibp",
    "ibpi",
    "ibpi_no_bound_loss",
    "mixup_input",
    "mixup_embedding",
)
SCHEMA_VERSION = 1

# tuned defaults: softmax temperature differs per learner
DEFAULT_GAMMA = {"maml": 0.1, "protonet": 1.0}


@dataclass
class RunConfig:
    learner: str
    objective: str
    layers: list = field(default_factory=list)
    split_index: int = 1
    data: dict = field(default_factory=dict)
    train_ways: int = 5
    train_shots: int = 1
    train_query_shots: int = 15
    eval_ways: int = 5
    eval_shots: int = 1
    eval_query_shots: int = 15
    max_steps: int = 2000
    meta_batch: int = 4
    meta_lr: float = 0.001
    inner_lr: float = 0.01
    inner_steps: int = 5
    eval_inner_steps: int = 10
    first_order: bool = True
    epsilon: float = 0.1
    gamma: float | None = None
    static_weights: list | None = None
    alpha: float = 0.5
    beta: float = 0.5
    shared_mix_coeffs: bool = True
    interp_probability: float | None = None
    bounds_on_adapted: bool = True
    distance: str = "sqeuclidean"
    seed: int = 0
    eval_interval: int = 200
    n_val_tasks: int = 100
    n_eval_tasks: int = 600
    out_dir: str | None = None

    def __post_init__(self):
        if self.learner not in LEARNERS:
            raise ValueError(f"learner must be one of {LEARNERS}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.max_steps <= 0:
            raise ValueError("max_steps must be positive")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.meta_batch < 1:
            raise ValueError("meta_batch must be at least 1")
        if not self.layers:
            raise ValueError("config needs a network layer list")
        if not 0 < self.split_index <= len(self.layers):
            raise ValueError("split_index outside the layer range")
        if self.static_weights is not None and len(self.static_weights) != 3:
            raise ValueError("static_weights needs exactly three entries")

    @property
    def gamma_value(self) -> float:
        return DEFAULT_GAMMA[self.learner] if self.gamma is None else self.gamma

    def train_spec(self) -> TaskSpec:
        return TaskSpec(self.train_ways, self.train_shots, self.train_query_shots)

    def eval_spec(self) -> TaskSpec:
        return TaskSpec(self.eval_ways, self.eval_shots, self.eval_query_shots)

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        """Stable digest of everything except seed and output location."""
        d = self.to_dict()
        d.pop("seed")
        d.pop("out_dir")
        blob = json.dumps(d, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def resolve_dataset(entry: dict) -> Dataset:
    """Materialize one ``data`` entry: a file path or synth parameters."""
    if "path" in entry:
        return load_dataset(entry["path"])
    if "synth" in entry:
        return synth_dataset(**entry["synth"])
    raise ValueError(f"dataset entry needs 'path' or 'synth', got {sorted(entry)}")


def resolve_data(config: RunConfig) -> dict[str, Dataset]:
    """Datasets for the splits named in the config (train required)."""
    if "train" not in config.data:
        raise ValueError("config data section needs at least a 'train' entry")
    return {split: resolve_dataset(entry) for split, entry in config.data.items()}
