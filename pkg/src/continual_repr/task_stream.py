from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Literal

import torch
from torch.utils.data import DataLoader, Dataset
from torchvision.transforms import v2

from .datasets import DatasetStore, ImageSet, get_dataset_info
from .errors import EmptyTaskError, NotDivisibleError, ShapeMismatchError
from .models import AugmentationPolicy, TaskSequence, TaskSpec
from .utils import seeded

_SPLIT_RE = re.compile(r"^\s*([A-Za-z0-9_]+)\s*/\s*(\d+)\s*$")
_ARROW_RE = re.compile(r"\s*(?:->|→)\s*")


@dataclass(frozen=True)
class SequenceSpec:
    kind: Literal["class-incremental", "dataset-shift"]
    datasets: tuple[str, ...]
    n_tasks: int


def parse_sequence_spec(text: str) -> SequenceSpec:
    """Parse `"C100/5"` (class split) or `"C10->SVHN"` (dataset shift) notation."""
    m = _SPLIT_RE.match(text)
    if m:
        name, n = m.group(1), int(m.group(2))
        get_dataset_info(name)
        if n < 1:
            raise ValueError(f"Task count must be >= 1 in {text!r}")
        return SequenceSpec(kind="class-incremental", datasets=(name,), n_tasks=n)

    names = tuple(p for p in _ARROW_RE.split(text.strip()) if p)
    if not names or any(not re.fullmatch(r"[A-Za-z0-9_]+", n) for n in names):
        raise ValueError(f"Malformed sequence notation: {text!r}")
    for n in names:
        get_dataset_info(n)
    return SequenceSpec(kind="dataset-shift", datasets=names, n_tasks=len(names))


def build_class_split_sequence(dataset_name: str, n_tasks: int, seed: int) -> TaskSequence:
    info = get_dataset_info(dataset_name)
    if n_tasks < 1 or info.num_classes % n_tasks != 0:
        raise NotDivisibleError(
            f"{dataset_name} has {info.num_classes} classes, not divisible into {n_tasks} tasks"
        )

    g = torch.Generator().manual_seed(seed)
    order = torch.randperm(info.num_classes, generator=g).tolist()
    per_task = info.num_classes // n_tasks

    tasks = tuple(
        TaskSpec(
            task_id=t,
            dataset_name=dataset_name,
            class_ids=tuple(sorted(order[t * per_task : (t + 1) * per_task])),
        )
        for t in range(n_tasks)
    )
    return TaskSequence(tasks=tasks, kind="class-incremental", notation=f"{dataset_name}/{n_tasks}")


def build_shift_sequence(dataset_names: list[str] | tuple[str, ...]) -> TaskSequence:
    if not dataset_names:
        raise ValueError("A shift sequence needs at least one dataset")

    # Each dataset owns a contiguous global label range, assigned on first appearance.
    offsets: dict[str, int] = {}
    next_offset = 0
    tasks: list[TaskSpec] = []
    for t, name in enumerate(dataset_names):
        info = get_dataset_info(name)
        if name not in offsets:
            offsets[name] = next_offset
            next_offset += info.num_classes
        off = offsets[name]
        tasks.append(
            TaskSpec(
                task_id=t,
                dataset_name=name,
                class_ids=tuple(range(off, off + info.num_classes)),
                label_offset=off,
            )
        )
    return TaskSequence(tasks=tuple(tasks), kind="dataset-shift", notation="->".join(dataset_names))


def build_sequence(text: str, *, seed: int = 0) -> TaskSequence:
    spec = parse_sequence_spec(text)
    if spec.kind == "class-incremental":
        return build_class_split_sequence(spec.datasets[0], spec.n_tasks, seed)
    return build_shift_sequence(list(spec.datasets))


def ssl_policy(dataset_name: str) -> AugmentationPolicy:
    info = get_dataset_info(dataset_name)
    return AugmentationPolicy(
        view_count=2,
        image_size=info.image_size,
        crop="resized",
        crop_scale=(0.2, 1.0),
        flip_p=0.5,
        color_jitter=(0.4, 0.4, 0.4, 0.1),
        color_jitter_p=0.8,
        grayscale_p=0.2,
        mean=info.mean,
        std=info.std,
    )


def light_policy(dataset_name: str) -> AugmentationPolicy:
    info = get_dataset_info(dataset_name)
    return AugmentationPolicy(
        view_count=1,
        image_size=info.image_size,
        crop="padded",
        flip_p=0.5,
        mean=info.mean,
        std=info.std,
    )


def eval_policy(dataset_name: str) -> AugmentationPolicy:
    info = get_dataset_info(dataset_name)
    return AugmentationPolicy(
        view_count=1,
        image_size=info.image_size,
        crop="none",
        flip_p=0.0,
        mean=info.mean,
        std=info.std,
    )


def policy_for(dataset_name: str, *, two_views: bool) -> AugmentationPolicy:
    return ssl_policy(dataset_name) if two_views else light_policy(dataset_name)


def build_transform(policy: AugmentationPolicy) -> v2.Compose:
    ops: list = []
    if policy.crop == "resized":
        ops.append(v2.RandomResizedCrop(policy.image_size, scale=policy.crop_scale, antialias=True))
    elif policy.crop == "padded":
        ops.append(v2.RandomCrop(policy.image_size, padding=policy.crop_padding))
    if policy.flip_p > 0:
        ops.append(v2.RandomHorizontalFlip(p=policy.flip_p))
    if policy.color_jitter_p > 0 and any(policy.color_jitter):
        b, c, s, h = policy.color_jitter
        ops.append(
            v2.RandomApply(
                [v2.ColorJitter(brightness=b, contrast=c, saturation=s, hue=h)],
                p=policy.color_jitter_p,
            )
        )
    if policy.grayscale_p > 0:
        ops.append(v2.RandomGrayscale(p=policy.grayscale_p))
    ops.append(v2.ToDtype(torch.float32, scale=True))
    ops.append(v2.Normalize(mean=list(policy.mean), std=list(policy.std)))
    return v2.Compose(ops)


@dataclass(frozen=True)
class LabeledBatch:
    views: tuple[torch.Tensor, ...]
    labels: torch.Tensor

    def __post_init__(self) -> None:
        if not self.views:
            raise ShapeMismatchError("a batch needs at least one view")
        shape = self.views[0].shape
        if any(v.shape != shape for v in self.views):
            raise ShapeMismatchError("all views must share one shape")
        if self.labels.shape[0] != shape[0]:
            raise ShapeMismatchError("labels must align with the batch dimension")

    @property
    def view_count(self) -> int:
        return len(self.views)

    def to(self, device: torch.device) -> LabeledBatch:
        return LabeledBatch(
            views=tuple(v.to(device, non_blocking=True) for v in self.views),
            labels=self.labels.to(device, non_blocking=True),
        )


class TaskDataset(Dataset):
    """Samples of one task with global labels; every item yields `view_count` augmented views."""

    def __init__(self, task: TaskSpec, data: ImageSet, policy: AugmentationPolicy) -> None:
        if len(data) == 0:
            raise EmptyTaskError(f"Task {task.task_id} ({task.dataset_name}) has no samples")
        self.task = task
        self.policy = policy
        self.images = data.images
        self.labels = data.labels + task.label_offset
        self.transform = build_transform(policy)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def __getitem__(self, index: int) -> tuple[tuple[torch.Tensor, ...], int]:
        img = self.images[index]
        views = tuple(self.transform(img) for _ in range(self.policy.view_count))
        return views, int(self.labels[index])


def _collate(items: list[tuple[tuple[torch.Tensor, ...], int]]) -> LabeledBatch:
    n_views = len(items[0][0])
    views = tuple(torch.stack([it[0][v] for it in items]) for v in range(n_views))
    labels = torch.as_tensor([it[1] for it in items], dtype=torch.int64)
    return LabeledBatch(views=views, labels=labels)


def task_dataset(
    task: TaskSpec,
    policy: AugmentationPolicy,
    *,
    store: DatasetStore,
    max_per_class: int | None = None,
    subsample_seed: int = 0,
) -> TaskDataset:
    data = store.classes(
        task.dataset_name,
        task.split,
        task.local_class_ids(),
        max_per_class=max_per_class,
        seed=subsample_seed,
    )
    return TaskDataset(task, data, policy)


def make_batch(
    task: TaskSpec,
    policy: AugmentationPolicy,
    batch_size: int,
    rng: torch.Generator,
    *,
    store: DatasetStore,
    max_per_class: int | None = None,
) -> LabeledBatch:
    """Draw one augmented batch; the result depends only on `rng`'s state."""
    ds = task_dataset(task, policy, store=store, max_per_class=max_per_class)
    n = len(ds)
    reps = -(-batch_size // n)
    index = torch.cat([torch.randperm(n, generator=rng) for _ in range(reps)])[:batch_size]
    aug_seed = int(torch.randint(0, 2**62, (1,), generator=rng))
    with seeded(aug_seed):
        items = [ds[int(i)] for i in index]
    return _collate(items)


def task_loader(
    ds: TaskDataset,
    *,
    batch_size: int,
    generator: torch.Generator,
    num_workers: int = 0,
    shuffle: bool = True,
) -> DataLoader:
    # Batch norm cannot train on a batch of one; drop the ragged tail past the first batch.
    drop_last = shuffle and len(ds) > batch_size
    return DataLoader(
        ds,
        batch_size=batch_size,
        shuffle=shuffle,
        drop_last=drop_last,
        num_workers=num_workers,
        generator=generator,
        collate_fn=_collate,
        persistent_workers=False,
    )
