"""Episodic training: one optimizer step per sampled task.

The trainer walks a StreamPlan episode by episode (sample -> embed ->
prototypes -> loss -> Adam step), validates periodically on unseen
validation classes, and keeps the checkpoint with the best validation
accuracy.
"""

import copy
import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .alphabet import AlphabetTable
from .dataset import IMAGES_PER_CHARACTER, DatasetIndex, PreprocessConfig
from .episodes import (
    METHODS,
    MIX_MODES,
    STREAM_TRAIN,
    STREAM_VAL,
    STREAM_TEST,
    EpisodeSpec,
    Granularity,
    derive_rng,
    make_stream_plan,
    sample_episode,
)
from .evaluation import RunResult, evaluate, task_accuracies
from .protonet import ProtoNet, forward_episode, save_checkpoint


class TrainingDiverged(RuntimeError):
    """Loss became NaN/inf; aborting beats silently skipping episodes."""


@dataclass(frozen=True)
class TrainConfig:
    method: str = "baseline"
    way: int = 5
    shot: int = 1
    queries_per_class: int = 2
    total_episodes: int = 20000
    learning_rate: float = 1e-3
    validation_every: int = 500
    validation_tasks: int = 200
    seed: int = 0
    backbone: str = "conv4"
    mix_mode: str = "alternate"
    deterministic: bool = True
    device: str = "cpu"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}, expected one of {METHODS}")
        if self.mix_mode not in MIX_MODES:
            raise ValueError(f"unknown mix_mode {self.mix_mode!r}")
        if self.total_episodes < 1:
            raise ValueError(f"total_episodes must be >= 1, got {self.total_episodes}")
        if self.learning_rate <= 0 or not np.isfinite(self.learning_rate):
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.shot + self.queries_per_class > IMAGES_PER_CHARACTER:
            raise ValueError(
                f"shot + queries_per_class = {self.shot + self.queries_per_class} exceeds the "
                f"{IMAGES_PER_CHARACTER}-images-per-character budget"
            )

    def base_spec(self) -> EpisodeSpec:
        return EpisodeSpec(
            way=self.way,
            shot=self.shot,
            queries_per_class=self.queries_per_class,
            granularity=Granularity.CHARACTER,
        )


@dataclass
class TrainHistory:
    losses: list = field(default_factory=list)  # one per episode
    validations: list = field(default_factory=list)  # (episode_index, accuracy)
    best_episode: int | None = None
    best_accuracy: float | None = None


def validate(
    model: ProtoNet,
    index: DatasetIndex,
    table: AlphabetTable,
    n_tasks: int,
    spec: EpisodeSpec,
    seed: int,
    split: str = "val",
    device="cpu",
) -> float:
    """Mean query accuracy over freshly sampled tasks; no parameter updates."""
    if n_tasks < 1:
        raise ValueError(f"n_tasks must be >= 1, got {n_tasks}")
    if spec.granularity is not Granularity.CHARACTER:
        raise ValueError("validation tasks are character granularity only")
    return float(
        task_accuracies(model, index, table, split, n_tasks, spec, seed, STREAM_VAL, device).mean()
    )


def _substream_seed(base_seed: int, *path: int) -> int:
    return int(np.random.SeedSequence([int(base_seed) & 0xFFFFFFFF, *path]).generate_state(1)[0])


def _write_history(run_dir: Path, history: TrainHistory):
    with open(run_dir / "history.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["episode_index", "loss"])
        for i, loss in enumerate(history.losses):
            w.writerow([i, repr(loss)])
    with open(run_dir / "val.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["episode_index", "accuracy"])
        for i, acc in history.validations:
            w.writerow([i, repr(acc)])


def train(config: TrainConfig, index: DatasetIndex, table: AlphabetTable, run_dir=None):
    """Run the full episodic loop; returns (best model, TrainHistory).

    When run_dir is given, writes config.json, history.csv, val.csv,
    best.ckpt and final.ckpt there (checkpoint writes are atomic).
    """
    prev_det = torch.are_deterministic_algorithms_enabled()
    if config.deterministic:
        torch.use_deterministic_algorithms(True)
    try:
        torch.manual_seed(config.seed)
        model = ProtoNet.from_descriptor(config.backbone)
        device = torch.device(config.device)
        model.to(device)
        optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
        base_spec = config.base_spec()
        plan = make_stream_plan(
            config.method, config.total_episodes, base_spec, config.mix_mode, seed=config.seed
        )
        val_spec = base_spec
        train_chars = set(table.split_classes("train"))
        preprocess_cfg = PreprocessConfig.for_backbone(config.backbone)
        history = TrainHistory()
        best_state = None

        if run_dir is not None:
            run_dir = Path(run_dir)
            run_dir.mkdir(parents=True, exist_ok=True)
            with open(run_dir / "config.json", "w") as f:
                json.dump(asdict(config), f, indent=2)

        for i, granularity in enumerate(plan.schedule):
            rng = derive_rng(config.seed, STREAM_TRAIN, i)
            ep = sample_episode(index, "train", base_spec.with_granularity(granularity), rng)
            chars = {g.char_label for g, _ in ep.support + ep.query}
            if not chars <= train_chars:
                raise RuntimeError(
                    f"episode {i} sampled characters outside the train split: {sorted(chars - train_chars)}"
                )
            model.train()
            loss, _, _ = forward_episode(model, ep, device)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss {loss.item()} at episode {i} "
                    f"(granularity={granularity.value}, lr={config.learning_rate}); "
                    f"check preprocessing and learning rate"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            history.losses.append(loss.item())

            if config.validation_every and (i + 1) % config.validation_every == 0:
                round_idx = (i + 1) // config.validation_every
                acc = validate(
                    model,
                    index,
                    table,
                    config.validation_tasks,
                    val_spec,
                    seed=_substream_seed(config.seed, STREAM_VAL, round_idx),
                    device=device,
                )
                history.validations.append((i + 1, acc))
                if history.best_accuracy is None or acc > history.best_accuracy:
                    history.best_accuracy = acc
                    history.best_episode = i + 1
                    best_state = copy.deepcopy(model.backbone.state_dict())

        if run_dir is not None:
            save_checkpoint(
                model,
                run_dir / "final.ckpt",
                preprocess_cfg,
                extra={"episode": config.total_episodes, "config": asdict(config)},
            )
        if best_state is not None:
            model.backbone.load_state_dict(best_state)
        if run_dir is not None:
            save_checkpoint(
                model,
                run_dir / "best.ckpt",
                preprocess_cfg,
                extra={
                    "episode": history.best_episode or config.total_episodes,
                    "val_accuracy": history.best_accuracy,
                    "config": asdict(config),
                },
            )
            _write_history(run_dir, history)
        return model, history
    finally:
        torch.use_deterministic_algorithms(prev_det)


def run_experiment(
    config: TrainConfig,
    seeds,
    index: DatasetIndex,
    table: AlphabetTable,
    test_tasks: int = 1000,
    run_root=None,
) -> RunResult:
    """Train once per seed, evaluate each on the test split, average.

    Exactly three seeds, mirroring the 3-run averaging protocol of the
    reference results.
    """
    seeds = list(seeds)
    if len(seeds) != 3:
        raise ValueError(f"exactly 3 seeds required, got {len(seeds)}")
    seed_accs = []
    pooled = []
    for s in seeds:
        cfg = replace(config, seed=int(s))
        run_dir = None if run_root is None else Path(run_root) / f"seed_{s}"
        model, _ = train(cfg, index, table, run_dir=run_dir)
        result = evaluate(
            model,
            index,
            table,
            split="test",
            n_tasks=test_tasks,
            spec=config.base_spec(),
            seed=_substream_seed(int(s), STREAM_TEST),
            device=cfg.device,
        )
        seed_accs.append(result.accuracy)
        pooled.extend(result.task_accuracies)
    return RunResult.from_runs(
        method=config.method,
        shot=config.shot,
        seeds=seeds,
        seed_accuracies=seed_accs,
        pooled_task_accuracies=pooled,
        n_tasks=test_tasks,
    )
