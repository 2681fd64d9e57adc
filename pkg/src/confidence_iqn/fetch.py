"""
Dataset Fetching

Streams the MNIST IDX files and the CIFAR binary archives into the layout
`data_io.dataset_files` expects:

    <data_dir>/mnist/{train,t10k}-{images-idx3,labels-idx1}-ubyte.gz
    <data_dir>/cifar-10-batches-bin/...
    <data_dir>/cifar-100-binary/...

MNIST stays gzip-compressed (the loader decompresses transparently); the CIFAR
tarballs are unpacked and removed.
"""

import logging
import tarfile
from pathlib import Path

import httpx
from tqdm import tqdm

from .data_io import DatasetKind
from .errors import ConfidenceIqnError

logger = logging.getLogger(__name__)

MNIST_BASE_URL = "https://ossci-datasets.s3.amazonaws.com/mnist/"
MNIST_FILES = (
    "train-images-idx3-ubyte.gz",
    "train-labels-idx1-ubyte.gz",
    "t10k-images-idx3-ubyte.gz",
    "t10k-labels-idx1-ubyte.gz",
)
CIFAR_ARCHIVES = {
    DatasetKind.CIFAR10: "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz",
    DatasetKind.CIFAR100: "https://www.cs.toronto.edu/~kriz/cifar-100-binary.tar.gz",
}


class FetchError(ConfidenceIqnError):
    """Raised when a download fails or returns something unusable."""


class DatasetFetcher:
    """
    Downloads dataset files over HTTP.

    Usage:
        with DatasetFetcher() as fetcher:
            fetcher.fetch(DatasetKind.MNIST, Path("data"))
    """

    def __init__(self, client: httpx.Client | None = None, timeout: float = 60.0, progress: bool = True):
        self._client = client or httpx.Client(timeout=timeout, follow_redirects=True)
        self._owns_client = client is None
        self.progress = progress

    def __enter__(self) -> "DatasetFetcher":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def close(self) -> None:
        if self._owns_client:
            self._client.close()

    def download(self, url: str, dest: Path, overwrite: bool = False) -> Path:
        """Stream `url` to `dest` through a temporary `.part` file."""
        if dest.exists() and not overwrite:
            logger.info("%s already present, skipping", dest)
            return dest
        dest.parent.mkdir(parents=True, exist_ok=True)
        partial = dest.with_name(dest.name + ".part")
        try:
            with self._client.stream("GET", url) as response:
                if response.status_code != 200:
                    raise FetchError(f"GET {url} returned HTTP {response.status_code}")
                total = int(response.headers.get("content-length", 0)) or None
                with partial.open("wb") as out, tqdm(
                    total=total, unit="B", unit_scale=True, desc=dest.name, disable=not self.progress
                ) as bar:
                    for chunk in response.iter_bytes():
                        out.write(chunk)
                        bar.update(len(chunk))
        except httpx.HTTPError as exc:
            partial.unlink(missing_ok=True)
            raise FetchError(f"GET {url} failed: {exc}") from exc
        except FetchError:
            partial.unlink(missing_ok=True)
            raise
        partial.replace(dest)
        logger.info("downloaded %s", dest)
        return dest

    def fetch(self, kind: DatasetKind, data_dir: Path, overwrite: bool = False) -> list[Path]:
        data_dir = Path(data_dir)
        if kind is DatasetKind.MNIST:
            return [self.download(MNIST_BASE_URL + name, data_dir / "mnist" / name, overwrite) for name in MNIST_FILES]

        url = CIFAR_ARCHIVES[kind]
        archive = self.download(url, data_dir / url.rsplit("/", 1)[-1], overwrite)
        try:
            with tarfile.open(archive, "r:gz") as tar:
                tar.extractall(data_dir, filter="data")
                members = [data_dir / m.name for m in tar.getmembers() if m.isfile()]
        except tarfile.TarError as exc:
            raise FetchError(f"{archive} is not a valid tar.gz archive: {exc}") from exc
        archive.unlink()
        return members
