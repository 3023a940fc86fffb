from __future__ import annotations

import logging
import os
import threading
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torchvision import datasets as tv_datasets
from torchvision.transforms import v2

from .errors import DatasetLoadError, UnknownDatasetError
from .models import Split

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ImageSet:
    images: torch.Tensor  # uint8, N x C x H x W
    labels: torch.Tensor  # int64, N, dataset-local class ids

    def __post_init__(self) -> None:
        if self.images.ndim != 4:
            raise ValueError(f"images must be N x C x H x W, got {tuple(self.images.shape)}")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.images.shape[0]:
            raise ValueError("labels must be a vector aligned with images")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, index: torch.Tensor) -> ImageSet:
        return ImageSet(images=self.images[index], labels=self.labels[index])


Loader = Callable[[Path, Split, bool], ImageSet]


@dataclass(frozen=True)
class DatasetInfo:
    name: str
    num_classes: int
    image_size: int
    mean: tuple[float, float, float]
    std: tuple[float, float, float]
    loader: Loader = field(repr=False, compare=False)
    channels: int = 3


_REGISTRY: dict[str, DatasetInfo] = {}


def register_dataset(info: DatasetInfo, *, replace: bool = False) -> None:
    if info.name in _REGISTRY and not replace:
        raise ValueError(f"Dataset already registered: {info.name}")
    _REGISTRY[info.name] = info


def unregister_dataset(name: str) -> None:
    _REGISTRY.pop(name, None)


def get_dataset_info(name: str) -> DatasetInfo:
    info = _REGISTRY.get(name)
    if info is None:
        known = ", ".join(sorted(_REGISTRY))
        raise UnknownDatasetError(f"Unknown dataset: {name!r} (registered: {known})")
    return info


def registered_datasets() -> list[str]:
    return sorted(_REGISTRY)


def _from_hwc(data, targets) -> ImageSet:
    images = torch.as_tensor(data).permute(0, 3, 1, 2).contiguous()
    return ImageSet(images=images, labels=torch.as_tensor(targets, dtype=torch.int64))


def _load_cifar10(root: Path, split: Split, download: bool) -> ImageSet:
    ds = tv_datasets.CIFAR10(str(root), train=split == "train", download=download)
    return _from_hwc(ds.data, ds.targets)


def _load_cifar100(root: Path, split: Split, download: bool) -> ImageSet:
    ds = tv_datasets.CIFAR100(str(root), train=split == "train", download=download)
    return _from_hwc(ds.data, ds.targets)


def _load_svhn(root: Path, split: Split, download: bool) -> ImageSet:
    ds = tv_datasets.SVHN(str(root / "svhn"), split=split, download=download)
    return ImageSet(
        images=torch.as_tensor(ds.data).contiguous(),
        labels=torch.as_tensor(ds.labels, dtype=torch.int64),
    )


def _imagenet100_loader(image_size: int) -> Loader:
    def _load(root: Path, split: Split, download: bool) -> ImageSet:  # noqa: ARG001
        folder = root / "imagenet100" / ("train" if split == "train" else "val")
        transform = v2.Compose(
            [v2.PILToTensor(), v2.Resize(image_size, antialias=True), v2.CenterCrop(image_size)]
        )
        ds = tv_datasets.ImageFolder(str(folder), transform=transform)
        images = torch.stack([img for img, _ in ds])
        return ImageSet(images=images, labels=torch.as_tensor(ds.targets, dtype=torch.int64))

    return _load


def _register_builtin() -> None:
    register_dataset(
        DatasetInfo(
            name="C10",
            num_classes=10,
            image_size=32,
            mean=(0.4914, 0.4822, 0.4465),
            std=(0.2470, 0.2435, 0.2616),
            loader=_load_cifar10,
        ),
        replace=True,
    )
    register_dataset(
        DatasetInfo(
            name="C100",
            num_classes=100,
            image_size=32,
            mean=(0.5071, 0.4865, 0.4409),
            std=(0.2673, 0.2564, 0.2762),
            loader=_load_cifar100,
        ),
        replace=True,
    )
    register_dataset(
        DatasetInfo(
            name="SVHN",
            num_classes=10,
            image_size=32,
            mean=(0.4377, 0.4438, 0.4728),
            std=(0.1980, 0.2010, 0.1970),
            loader=_load_svhn,
        ),
        replace=True,
    )
    in100_size = int(os.environ.get("CONTINUAL_REPR_IN100_SIZE", "96"))
    register_dataset(
        DatasetInfo(
            name="IN100",
            num_classes=100,
            image_size=in100_size,
            mean=(0.485, 0.456, 0.406),
            std=(0.229, 0.224, 0.225),
            loader=_imagenet100_loader(in100_size),
        ),
        replace=True,
    )


_register_builtin()


def subsample_per_class(images: ImageSet, max_per_class: int, *, seed: int) -> ImageSet:
    """Keep at most `max_per_class` samples of every class, chosen by a fixed seed."""
    g = torch.Generator().manual_seed(seed)
    keep: list[torch.Tensor] = []
    for c in torch.unique(images.labels).tolist():
        idx = torch.nonzero(images.labels == c, as_tuple=False).flatten()
        if idx.numel() > max_per_class:
            idx = idx[torch.randperm(idx.numel(), generator=g)[:max_per_class]]
        keep.append(idx)
    if not keep:
        return images
    index, _ = torch.sort(torch.cat(keep))
    return images.subset(index)


class DatasetStore:
    """Loads registered datasets from disk once and serves class-filtered views."""

    def __init__(self, root: str | Path | None = None, *, download: bool = False) -> None:
        if root is None:
            root = os.environ.get("CONTINUAL_REPR_DATA", "./data")
        self.root = Path(root)
        self.download = download
        self._cache: dict[tuple[str, Split], ImageSet] = {}
        self._lock = threading.Lock()

    def get(self, name: str, split: Split) -> ImageSet:
        info = get_dataset_info(name)
        key = (name, split)
        with self._lock:
            cached = self._cache.get(key)
            if cached is not None:
                return cached
            try:
                loaded = info.loader(self.root, split, self.download)
            except Exception as e:  # noqa: BLE001
                raise DatasetLoadError(f"Failed to load {name}/{split} from {self.root}") from e
            self._cache[key] = loaded
        logger.info(
            "dataset_loaded",
            extra={"dataset": name, "split": split, "samples": len(loaded)},
        )
        return loaded

    def classes(
        self,
        name: str,
        split: Split,
        local_class_ids: list[int] | None = None,
        *,
        max_per_class: int | None = None,
        seed: int = 0,
    ) -> ImageSet:
        data = self.get(name, split)
        if local_class_ids is not None:
            wanted = torch.as_tensor(local_class_ids, dtype=torch.int64)
            data = data.subset(torch.nonzero(torch.isin(data.labels, wanted)).flatten())
        if max_per_class is not None:
            data = subsample_per_class(data, max_per_class, seed=seed)
        return data
