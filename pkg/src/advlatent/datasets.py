"""Desk-scale datasets: MNIST (IDX files) and CIFAR-10 (python pickle batches).

Data is read from ``$ADVLATENT_DATA`` (default ``~/.cache/advlatent``)::

    <root>/mnist/{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]
    <root>/cifar-10-batches-py/{data_batch_1..5,test_batch}

Nothing is downloaded implicitly; :func:`fetch_mnist` does it on request.
"""

from __future__ import annotations

import gzip
import io
import os
import pickle
import urllib.request
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}

# A PyPI wheel that ships the four raw MNIST IDX files.
MNIST_WHEEL_URL = (
    "https://files.pythonhosted.org/packages/5c/42/"
    "504919bf729ad48c424afee77c993f727add4b333b3941125ad657a5c445/"
    "MNIST_dir-0.2.0-py3-none-any.whl"
)


class DatasetUnavailable(FileNotFoundError):
    pass


@dataclass
class Dataset:
    """Images as float32 in [0, 1] (N, C, H, W) and int64 labels."""

    name: str
    train_x: torch.Tensor
    train_y: torch.Tensor
    test_x: torch.Tensor
    test_y: torch.Tensor

    @property
    def num_classes(self) -> int:
        return int(self.train_y.max()) + 1

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.train_x.shape[1:])


def data_root() -> Path:
    return Path(os.environ.get("ADVLATENT_DATA", Path.home() / ".cache" / "advlatent"))


def _read_idx(path: Path) -> np.ndarray:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        raw = f.read()
    if raw[:2] != b"\x00\x00" or raw[2] != 0x08:
        raise ValueError(f"{path} is not an unsigned-byte IDX file")
    ndim = raw[3]
    dims = np.frombuffer(raw, dtype=">u4", count=ndim, offset=4).astype(int)
    data = np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim)
    if data.size != int(np.prod(dims)):
        raise ValueError(f"{path}: payload does not match header dims {tuple(dims)}")
    return data.reshape(dims)


def _find(directory: Path, stem: str) -> Path:
    for cand in (directory / stem, directory / f"{stem}.gz", directory / stem.replace("-idx", ".idx")):
        if cand.exists():
            return cand
    raise DatasetUnavailable(f"missing {stem}[.gz] under {directory}")


def load_mnist(root: Path | None = None) -> Dataset:
    d = (root or data_root()) / "mnist"
    arrays = {k: _read_idx(_find(d, v)) for k, v in MNIST_FILES.items()}

    def imgs(a):
        return torch.from_numpy(a.astype(np.float32) / 255.0).unsqueeze(1)

    return Dataset(
        "mnist",
        imgs(arrays["train_images"]),
        torch.from_numpy(arrays["train_labels"].astype(np.int64)),
        imgs(arrays["test_images"]),
        torch.from_numpy(arrays["test_labels"].astype(np.int64)),
    )


def load_cifar10(root: Path | None = None) -> Dataset:
    d = (root or data_root()) / "cifar-10-batches-py"
    if not (d / "test_batch").exists():
        raise DatasetUnavailable(f"CIFAR-10 python batches not found under {d}")

    def batch(name):
        with open(d / name, "rb") as f:
            entry = pickle.load(f, encoding="latin1")
        x = np.asarray(entry["data"], dtype=np.uint8).reshape(-1, 3, 32, 32)
        return x, np.asarray(entry["labels"], dtype=np.int64)

    parts = [batch(f"data_batch_{i}") for i in range(1, 6)]
    tx, ty = batch("test_batch")
    x = np.concatenate([p[0] for p in parts])
    y = np.concatenate([p[1] for p in parts])
    return Dataset(
        "cifar10",
        torch.from_numpy(x.astype(np.float32) / 255.0),
        torch.from_numpy(y),
        torch.from_numpy(tx.astype(np.float32) / 255.0),
        torch.from_numpy(ty),
    )


LOADERS = {"mnist": load_mnist, "cifar10": load_cifar10}


def load_dataset(name: str, root: Path | None = None) -> Dataset:
    try:
        loader = LOADERS[name]
    except KeyError:
        raise ValueError(f"unknown dataset {name!r}; expected one of {sorted(LOADERS)}") from None
    return loader(root)


def available(name: str) -> bool:
    try:
        load_dataset(name)
    except (DatasetUnavailable, ValueError):
        return False
    return True


def fetch_mnist(root: Path | None = None, url: str = MNIST_WHEEL_URL) -> Path:
    """Download MNIST into ``<root>/mnist`` as gzipped IDX files."""
    dest = (root or data_root()) / "mnist"
    dest.mkdir(parents=True, exist_ok=True)
    with urllib.request.urlopen(url) as resp:
        blob = resp.read()
    with zipfile.ZipFile(io.BytesIO(blob)) as zf:
        for member in zf.namelist():
            base = os.path.basename(member)
            if member.startswith("__MACOSX") or not base.endswith("ubyte"):
                continue
            stem = base.replace(".idx", "-idx")
            with zf.open(member) as src, gzip.open(dest / f"{stem}.gz", "wb") as out:
                out.write(src.read())
    return dest
