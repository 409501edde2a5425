"""``MCCL`` sidecar files holding one concept latent per dataset timestep."""

from __future__ import annotations

import os
from typing import Sequence

import numpy as np

from .container import read_container, write_container
from .errors import ValidationError

LABEL_MAGIC = b"MCCL"
LABEL_VERSION = 1


def write_labels(labels: Sequence[np.ndarray], path: str | os.PathLike, provenance: dict) -> None:
    """``provenance`` records at least the dataset and checkpoint fingerprints."""
    arrs = [np.ascontiguousarray(a, dtype="<f4") for a in labels]
    dims = {a.shape[1] for a in arrs}
    if len(dims) > 1:
        raise ValidationError(f"inconsistent label dims {sorted(dims)}")
    header = {"lengths": [a.shape[0] for a in arrs], "dim": dims.pop() if dims else 0, "provenance": provenance}
    write_container(path, LABEL_MAGIC, LABEL_VERSION, header, b"".join(a.tobytes() for a in arrs))


def read_labels(path: str | os.PathLike) -> tuple[list[np.ndarray], dict]:
    _, header, payload = read_container(path, LABEL_MAGIC, (LABEL_VERSION,))
    dim, lengths = header["dim"], header["lengths"]
    flat = np.frombuffer(payload, dtype="<f4")
    if flat.size != dim * sum(lengths):
        raise ValidationError(f"label payload holds {flat.size} values, header implies {dim * sum(lengths)}")
    out, off = [], 0
    for n in lengths:
        out.append(flat[off:off + n * dim].reshape(n, dim).astype(np.float32))
        off += n * dim
    return out, header["provenance"]
