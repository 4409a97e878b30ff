"""Full-network training, progressive shrinking and checkpoints.

Stages run in a fixed order. Each one unlocks one more elastic dimension;
every optimisation step samples a single subnet over the dimensions unlocked
so far (the rest stay at their maximum) and updates the shared store through
it. Channels are sorted by importance once, when the width stage starts.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .arch_space import ArchConfig, SearchSpace, sample_uniform
from .data import StereoSample, to_tensors
from .loss import LossWeights, total_loss
from .network import ElasticStereoNet, StaticStereoNet

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

STAGE_ORDER = ("full", "kernel", "depth", "width", "scale", "refine")
STAGE_DIMS = {
    "full": (),
    "kernel": ("kernel",),
    "depth": ("kernel", "depth"),
    "width": ("kernel", "depth", "width"),
    "scale": ("kernel", "depth", "width", "scale"),
    "refine": ("kernel", "depth", "width", "scale", "refine"),
}
SHRINK_STAGES = STAGE_ORDER[1:]


class StageOrderError(RuntimeError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class OptimizerConfig:
    """Adam settings; defaults are the published ones apart from batch size."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 4
    decay_every: int | None = None   # epochs between halvings
    decay_factor: float = 0.5

    def lr_at(self, epoch: int) -> float:
        if not self.decay_every:
            return self.lr
        return self.lr * self.decay_factor ** (epoch // self.decay_every)


@dataclass
class StageSpec:
    name: str
    epochs: int
    optimizer: OptimizerConfig
    max_iterations: int | None = None

    @property
    def dims(self) -> tuple:
        return STAGE_DIMS[self.name]


@dataclass
class ShrinkSchedule:
    stages: list = field(default_factory=list)

    def __post_init__(self):
        names = [s.name for s in self.stages]
        if names != list(STAGE_ORDER[:len(names)]):
            raise ValueError(f"stages must follow {STAGE_ORDER}, got {names}")

    def __getitem__(self, name: str) -> StageSpec:
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(name)

    @classmethod
    def paper(cls, batch_size: int = 16) -> "ShrinkSchedule":
        """64 epochs at 1e-3, then five 25-epoch stages starting at 5e-4 and
        halving every 10 epochs."""
        full = StageSpec("full", 64, OptimizerConfig(lr=1e-3, batch_size=batch_size))
        rest = [StageSpec(n, 25, OptimizerConfig(lr=5e-4, batch_size=batch_size, decay_every=10))
                for n in SHRINK_STAGES]
        return cls([full] + rest)

    @classmethod
    def desk(cls, full_iterations: int = 2000, stage_iterations: int = 300,
             batch_size: int = 2) -> "ShrinkSchedule":
        """Scaled-down schedule bounded by iteration counts."""
        full = StageSpec("full", 10 ** 6, OptimizerConfig(lr=1e-3, batch_size=batch_size),
                         max_iterations=full_iterations)
        rest = [StageSpec(n, 10 ** 6, OptimizerConfig(lr=5e-4, batch_size=batch_size),
                          max_iterations=stage_iterations) for n in SHRINK_STAGES]
        return cls([full] + rest)

    def to_dict(self) -> dict:
        return {"stages": [asdict(s) for s in self.stages]}

    @classmethod
    def from_dict(cls, d: dict) -> "ShrinkSchedule":
        return cls([StageSpec(s["name"], s["epochs"], OptimizerConfig(**s["optimizer"]),
                              s.get("max_iterations")) for s in d["stages"]])


class TensorDataset:
    """In-memory stereo batches kept as tensors."""

    def __init__(self, samples: list, dtype=None):
        if not samples:
            raise ValueError("empty dataset")
        self.left, self.right, self.disp, self.valid = to_tensors(samples, dtype)

    def __len__(self) -> int:
        return self.left.shape[0]

    def batch(self, idx):
        idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        return self.left[idx], self.right[idx], self.disp[idx], self.valid[idx]

    @property
    def image_hw(self) -> tuple[int, int]:
        return tuple(self.left.shape[-2:])


def as_dataset(data, dtype=None) -> TensorDataset:
    if isinstance(data, TensorDataset):
        return data
    return TensorDataset(list(data), dtype)


class Trainer:
    """Owns the store, the optimiser and all training randomness.

    ``rng`` drives batch order and subnet sampling; together with the store,
    the optimiser state and the stage position it is saved in checkpoints so
    a resumed run continues bit-exactly.
    """

    def __init__(self, store: ElasticStereoNet, dataset, schedule: ShrinkSchedule | None = None,
                 seed: int = 0, log_path=None, loss_weights: LossWeights | None = None):
        self.store = store
        self.dataset = as_dataset(dataset) if dataset is not None else None
        self.schedule = ShrinkSchedule.desk() if schedule is None else schedule
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.log_path = Path(log_path) if log_path is not None else None
        self.loss_weights = loss_weights
        self.completed: list[str] = []
        self.stage: str | None = None
        self.optimizer: torch.optim.Adam | None = None
        self.stage_iteration = 0
        self.epoch = 0
        self._perm: np.ndarray | None = None
        self._pos = 0
        self._epoch_loss: list[float] = []
        self._epoch_epe: list[float] = []
        self.history: list[dict] = []

    # -- stage bookkeeping -------------------------------------------------

    @property
    def next_stage(self) -> str | None:
        done = len(self.completed)
        return STAGE_ORDER[done] if done < len(STAGE_ORDER) else None

    def begin_stage(self, name: str) -> None:
        if self.stage == name:
            return
        if self.stage is not None:
            raise StageOrderError(f"stage {self.stage!r} still in progress")
        if name != self.next_stage:
            raise StageOrderError(
                f"cannot run stage {name!r}; next stage is {self.next_stage!r} "
                f"(completed: {self.completed})")
        if name == "width":
            self.store.sort_channels()
        spec = self.schedule[name]
        opt = spec.optimizer
        self.optimizer = torch.optim.Adam(self.store.parameters(), lr=opt.lr,
                                          betas=(opt.beta1, opt.beta2))
        self.stage = name
        self.stage_iteration = 0
        self.epoch = 0
        self._perm, self._pos = None, 0
        self._epoch_loss, self._epoch_epe = [], []

    def end_stage(self) -> None:
        if self.stage is None:
            return
        if self._epoch_loss:
            self._log_epoch(partial=True)
        self.completed.append(self.stage)
        self.stage = None
        self.optimizer = None

    # -- steps -------------------------------------------------------------

    def _next_indices(self, batch_size: int) -> np.ndarray:
        n = len(self.dataset)
        out = []
        while len(out) < batch_size:
            if self._perm is None or self._pos >= n:
                if self._perm is not None:
                    self._log_epoch()
                    self.epoch += 1
                self._perm = self.rng.permutation(n)
                self._pos = 0
            take = min(batch_size - len(out), n - self._pos)
            out.extend(self._perm[self._pos:self._pos + take].tolist())
            self._pos += take
        return np.asarray(out)

    def sample_config(self) -> ArchConfig:
        return sample_uniform(self.store.space, self.rng, STAGE_DIMS[self.stage])

    def step(self) -> float:
        """One optimisation step of the current stage on a sampled subnet."""
        spec = self.schedule[self.stage]
        idx = self._next_indices(spec.optimizer.batch_size)
        config = self.sample_config()
        lr = spec.optimizer.lr_at(self.epoch)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        left, right, disp, valid = self.dataset.batch(idx)
        dtype = next(self.store.parameters()).dtype
        left, right, disp = left.to(dtype), right.to(dtype), disp.to(dtype)

        self.store.train()
        self.optimizer.zero_grad(set_to_none=True)
        out = self.store(left, right, config)
        weights = self.loss_weights
        if weights is not None and len(weights.scales) != config.scale:
            weights = None
        loss = total_loss(out, disp, valid, weights)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(
                f"non-finite loss {float(loss.detach())} in stage {self.stage!r} at iteration "
                f"{self.stage_iteration} (config {config.to_json()}, lr {lr})")
        loss.backward()
        self.optimizer.step()
        self.stage_iteration += 1
        with torch.no_grad():
            err = (out.final() - disp).abs()[valid].mean()
        self._epoch_loss.append(float(loss.detach()))
        self._epoch_epe.append(float(err))
        return self._epoch_loss[-1]

    def _log_epoch(self, partial: bool = False) -> None:
        if not self._epoch_loss:
            return
        spec = self.schedule[self.stage]
        rec = {"stage": self.stage, "epoch": self.epoch,
               "lr": spec.optimizer.lr_at(self.epoch),
               "loss": float(np.mean(self._epoch_loss)),
               "epe": float(np.mean(self._epoch_epe)),
               "iterations": self.stage_iteration, "partial": partial}
        self.history.append(rec)
        log.info(json.dumps(rec))
        if self.log_path is not None:
            with open(self.log_path, "a") as f:
                f.write(json.dumps(rec) + "\n")
        self._epoch_loss, self._epoch_epe = [], []

    def train_iterations(self, n: int) -> list[float]:
        if self.stage is None:
            raise StageOrderError("no stage in progress")
        return [self.step() for _ in range(n)]

    def _stage_budget(self, spec: StageSpec) -> int:
        per_epoch = math.ceil(len(self.dataset) / spec.optimizer.batch_size)
        total = spec.epochs * per_epoch
        if spec.max_iterations is not None:
            total = min(total, spec.max_iterations)
        return total

    def run_stage(self, name: str, iterations: int | None = None) -> ElasticStereoNet:
        """Run (or finish) stage ``name`` and mark it completed."""
        self.begin_stage(name)
        spec = self.schedule[name]
        budget = self._stage_budget(spec) if iterations is None else iterations
        remaining = max(0, budget - self.stage_iteration)
        if remaining:
            self.train_iterations(remaining)
        self.end_stage()
        return self.store

    def train_full(self, epochs: int | None = None, iterations: int | None = None):
        if epochs is not None:
            spec = self.schedule["full"]
            spec.epochs, spec.max_iterations = epochs, None
        return self.run_stage("full", iterations)

    def run_all_shrinking(self) -> ElasticStereoNet:
        for name in SHRINK_STAGES:
            if name not in self.completed:
                self.run_stage(name)
        return self.store

    # -- checkpoints -------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "space": self.store.space.to_dict(),
            "store": self.store.state_dict(),
            "schedule": self.schedule.to_dict(),
            "seed": self.seed,
            "completed": list(self.completed),
            "stage": self.stage,
            "stage_iteration": self.stage_iteration,
            "epoch": self.epoch,
            "perm": None if self._perm is None else self._perm.tolist(),
            "pos": self._pos,
            "epoch_loss": list(self._epoch_loss),
            "epoch_epe": list(self._epoch_epe),
            "optimizer": None if self.optimizer is None else self.optimizer.state_dict(),
            "rng": self.rng.bit_generator.state,
            "torch_rng": torch.get_rng_state(),
            "history": list(self.history),
            "dtype": str(next(self.store.parameters()).dtype),
        }

    def save(self, path) -> None:
        torch.save(self.state_dict(), path)

    @classmethod
    def load(cls, path, dataset=None, log_path=None) -> "Trainer":
        ckpt = torch.load(path, weights_only=False)
        if ckpt.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {ckpt.get('format_version')}")
        store = ElasticStereoNet(SearchSpace.from_dict(ckpt["space"]))
        if ckpt["dtype"] == "torch.float64":
            store = store.double()
        store.load_state_dict(ckpt["store"])
        tr = cls(store, dataset, ShrinkSchedule.from_dict(ckpt["schedule"]),
                 seed=ckpt["seed"], log_path=log_path)
        tr.completed = list(ckpt["completed"])
        tr.rng.bit_generator.state = ckpt["rng"]
        torch.set_rng_state(ckpt["torch_rng"])
        tr.history = list(ckpt["history"])
        if ckpt["stage"] is not None:
            name = ckpt["stage"]
            spec = tr.schedule[name]
            tr.optimizer = torch.optim.Adam(store.parameters(), lr=spec.optimizer.lr,
                                            betas=(spec.optimizer.beta1, spec.optimizer.beta2))
            tr.optimizer.load_state_dict(ckpt["optimizer"])
            tr.stage = name
            tr.stage_iteration = ckpt["stage_iteration"]
            tr.epoch = ckpt["epoch"]
            tr._perm = None if ckpt["perm"] is None else np.asarray(ckpt["perm"])
            tr._pos = ckpt["pos"]
            tr._epoch_loss = list(ckpt["epoch_loss"])
            tr._epoch_epe = list(ckpt["epoch_epe"])
        return tr


def load_store(path) -> ElasticStereoNet:
    """Supernet weights from a trainer checkpoint."""
    return Trainer.load(path).store


# -- functional entry points --------------------------------------------------

def train_full(store: ElasticStereoNet, dataset, opt: OptimizerConfig | None = None,
               epochs: int = 1, iterations: int | None = None, seed: int = 0,
               log_path=None) -> ElasticStereoNet:
    opt = OptimizerConfig() if opt is None else opt
    schedule = ShrinkSchedule.desk()
    schedule.stages[0] = StageSpec("full", epochs, opt, iterations)
    tr = Trainer(store, dataset, schedule, seed=seed, log_path=log_path)
    tr.run_stage("full")
    return store


def extract_subnet(store: ElasticStereoNet, config: ArchConfig) -> StaticStereoNet:
    return store.extract(config)


@torch.no_grad()
def evaluate(model, samples, config: ArchConfig | None = None, batch_size: int = 8) -> list:
    """Per-sample EPE of ``model`` (supernet with ``config``, or a subnet)."""
    data = as_dataset(samples)
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        left, right, disp, valid = data.batch(idx)
        pred = model.predict(left.to(dtype), right.to(dtype), config)
        err = (pred - disp.to(dtype)).abs()
        for i in range(len(idx)):
            out.append(float(err[i][valid[i]].mean()))
    return out


def mean_epe(model, samples, config: ArchConfig | None = None) -> float:
    return float(np.mean(evaluate(model, samples, config)))
