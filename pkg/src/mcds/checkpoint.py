"""``MCCK`` checkpoint files: named tensors plus a JSON header.

The header records the iteration counter, a config fingerprint, the numpy
bit-generator state and whatever configuration is needed to rebuild the
networks. Optimizer moments are stored as ``optim.<param>.<slot>``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .container import pack_arrays, read_container, unpack_arrays, write_container
from .errors import FingerprintMismatch

CKPT_MAGIC = b"MCCK"
CKPT_VERSION = 1


@dataclass
class CheckpointBundle:
    params: dict[str, np.ndarray]
    optim: dict[str, np.ndarray] = field(default_factory=dict)
    iteration: int = 0
    fingerprint: str = ""
    rng_state: dict | None = None
    meta: dict = field(default_factory=dict)

    def check_fingerprint(self, expected: str, what: str = "checkpoint") -> None:
        if expected != self.fingerprint:
            raise FingerprintMismatch(
                f"{what} fingerprint {self.fingerprint[:12]} does not match the current config ({expected[:12]}); "
                "the networks were trained under different settings"
            )


def _to_numpy(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().copy()


def capture(model: torch.nn.Module, optimizer: torch.optim.Optimizer | None, *, iteration: int,
            fingerprint: str, rng: np.random.Generator | None, meta: dict) -> CheckpointBundle:
    params = {k: _to_numpy(v) for k, v in model.state_dict().items()}
    optim = {}
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                for slot, val in optimizer.state.get(p, {}).items():
                    optim[f"optim.{names[id(p)]}.{slot}"] = _to_numpy(torch.as_tensor(val))
    return CheckpointBundle(
        params=params,
        optim=optim,
        iteration=iteration,
        fingerprint=fingerprint,
        rng_state=None if rng is None else rng.bit_generator.state,
        meta=meta,
    )


def restore(bundle: CheckpointBundle, model: torch.nn.Module, optimizer: torch.optim.Optimizer | None = None) -> None:
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in bundle.params.items()})
    if optimizer is None or not bundle.optim:
        return
    for name, p in model.named_parameters():
        prefix = f"optim.{name}."
        state = {k[len(prefix):]: torch.from_numpy(v.copy()) for k, v in bundle.optim.items() if k.startswith(prefix)}
        if state:
            optimizer.state[p] = state


def restore_rng(bundle: CheckpointBundle) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = bundle.rng_state
    return rng


def save_checkpoint(bundle: CheckpointBundle, path: str | os.PathLike) -> None:
    arrays = dict(bundle.params)
    arrays.update(bundle.optim)
    table, payload = pack_arrays(arrays)
    header = {
        "tensors": table,
        "param_names": list(bundle.params),
        "iteration": bundle.iteration,
        "fingerprint": bundle.fingerprint,
        "rng_state": bundle.rng_state,
        "meta": bundle.meta,
    }
    write_container(path, CKPT_MAGIC, CKPT_VERSION, header, payload)


def load_checkpoint(path: str | os.PathLike) -> CheckpointBundle:
    _, header, payload = read_container(path, CKPT_MAGIC, (CKPT_VERSION,))
    arrays = unpack_arrays(header["tensors"], payload)
    names = set(header["param_names"])
    return CheckpointBundle(
        params={k: v for k, v in arrays.items() if k in names},
        optim={k: v for k, v in arrays.items() if k not in names},
        iteration=int(header["iteration"]),
        fingerprint=header["fingerprint"],
        rng_state=header["rng_state"],
        meta=header["meta"],
    )
