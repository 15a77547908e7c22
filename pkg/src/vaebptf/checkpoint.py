"""Deterministic binary checkpoints for fitted models.

Layout: a magic line, one line of canonical JSON describing the model and
every stored array, then the arrays back to back as little-endian float64.
No timestamps or platform-dependent padding are written, so two fits with
the same seed produce byte-identical files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoders import PARAM_KINDS, EncoderBank, EncoderNet
from .engine import FactorState, ModelConfig
from .errors import DataError

__all__ = ["MAGIC", "FORMAT_VERSION", "Checkpoint", "dumps", "loads",
           "save_checkpoint", "load_checkpoint"]

MAGIC = b"vaebptf-checkpoint\n"
FORMAT_VERSION = 1
MODELS = ("vae-bptf", "gibbs-bptf")


@dataclass
class Checkpoint:
    model: str
    config: ModelConfig
    means: list                      # posterior-mean factor matrix per mode
    state: FactorState
    bank: EncoderBank | None = None  # None for the Gibbs baseline
    info: dict = field(default_factory=dict)

    @property
    def mode_sizes(self):
        return tuple(z.shape[0] for z in self.means)


def _net_arrays(prefix, net):
    out = []
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        out.append((f"{prefix}/W{l}", w))
        out.append((f"{prefix}/b{l}", b))
    out.append((f"{prefix}/w_out", net.out_weights))
    out.append((f"{prefix}/b_out", net.out_bias))
    return out


def _arrays(ckpt):
    out = []
    for group in ("means", "factors", "post_shape", "post_rate"):
        mats = ckpt.means if group == "means" else getattr(ckpt.state, group)
        out.extend((f"{group}/{m}", a) for m, a in enumerate(mats))
    if ckpt.bank is not None:
        for m, k, kind in ckpt.bank.keys():
            out.extend(_net_arrays(f"net/{m}/{k}/{kind}", ckpt.bank.net(m, k, kind)))
    return out


def dumps(ckpt):
    if ckpt.model not in MODELS:
        raise DataError(f"unknown model {ckpt.model!r}")
    arrays = _arrays(ckpt)
    header = {
        "format_version": FORMAT_VERSION,
        "model": ckpt.model,
        "config": ckpt.config.to_dict(),
        "info": ckpt.info,
        "arrays": [[name, list(np.shape(a))] for name, a in arrays],
    }
    parts = [MAGIC, json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n"]
    parts.extend(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    return b"".join(parts)


def loads(blob):
    if not blob.startswith(MAGIC):
        raise DataError("not a checkpoint file (bad magic)")
    end = blob.index(b"\n", len(MAGIC))
    try:
        header = json.loads(blob[len(MAGIC):end])
    except ValueError:
        raise DataError("corrupt checkpoint header") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint version {header.get('format_version')}")
    pos = end + 1
    arrays = {}
    for name, shape in header["arrays"]:
        n = int(np.prod(shape)) if shape else 1
        chunk = blob[pos:pos + 8 * n]
        if len(chunk) != 8 * n:
            raise DataError("truncated checkpoint")
        arrays[name] = np.frombuffer(chunk, dtype="<f8").astype(float).reshape(shape)
        pos += 8 * n
    if pos != len(blob):
        raise DataError("trailing bytes in checkpoint")

    cfg = ModelConfig.from_dict(header["config"])
    n_modes = sum(1 for name in arrays if name.startswith("means/"))
    group = lambda g: [arrays[f"{g}/{m}"] for m in range(n_modes)]
    state = FactorState(group("factors"), group("post_shape"), group("post_rate"))
    bank = None
    if header["model"] == "vae-bptf":
        bank = EncoderBank()
        for m in range(n_modes):
            for k in range(cfg.K):
                for kind in PARAM_KINDS:
                    p = f"net/{m}/{k}/{kind}"
                    bank.nets[(m, k, kind)] = EncoderNet(
                        [arrays[f"{p}/W{l}"] for l in range(cfg.L)],
                        [arrays[f"{p}/b{l}"] for l in range(cfg.L)],
                        arrays[f"{p}/w_out"],
                        arrays[f"{p}/b_out"],
                        cfg.hidden_activation,
                        cfg.output_activation,
                    )
    return Checkpoint(header["model"], cfg, group("means"), state, bank, header["info"])


def save_checkpoint(ckpt, path):
    try:
        Path(path).write_bytes(dumps(ckpt))
    except OSError as exc:
        raise DataError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path):
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(blob)
