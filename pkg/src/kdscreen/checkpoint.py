"""Self-describing checkpoint container (.npz with a JSON metadata entry).

The zip entries carry a fixed timestamp so that identical content yields
identical bytes.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn.models import Classifier, ModelSpec
from .nn.optim import AdamState
from .windowing import ChannelStats, WindowingConfig

FORMAT = "kdscreen-checkpoint/1"
_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    spec: ModelSpec
    params: dict[str, np.ndarray]
    stats: ChannelStats
    windowing: WindowingConfig
    epoch: int
    opt_state: AdamState | None = None
    meta: dict = field(default_factory=dict)

    def build(self) -> Classifier:
        model = Classifier(self.spec)
        model.parameters.load(self.params)
        return model

    @classmethod
    def capture(cls, model: Classifier, stats, windowing, epoch, opt_state=None, **meta) -> "Checkpoint":
        opt = None
        if opt_state is not None:
            opt = AdamState(opt_state.step,
                            {k: v.copy() for k, v in opt_state.m.items()},
                            {k: v.copy() for k, v in opt_state.v.items()})
        return cls(model.spec, model.parameters.state(), stats, windowing, epoch, opt, dict(meta))


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": FORMAT,
        "spec": ckpt.spec.to_dict(),
        "stats": ckpt.stats.to_dict(),
        "windowing": ckpt.windowing.to_dict(),
        "epoch": ckpt.epoch,
        "param_names": list(ckpt.params),
        "meta": ckpt.meta,
    }
    arrays = {f"param.{k}": v for k, v in ckpt.params.items()}
    if ckpt.opt_state is not None:
        arrays.update(ckpt.opt_state.to_arrays())
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("meta.json", date_time=_EPOCH)
        zf.writestr(info, json.dumps(meta, sort_keys=True, indent=1))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=_EPOCH), buf.getvalue())
    return path


def load_checkpoint(path) -> Checkpoint:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format") != FORMAT:
            raise ValueError(f"{path}: not a {FORMAT} file")
        arrays = {}
        for name in zf.namelist():
            if name.endswith(".npy"):
                arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
    params = {k: arrays[f"param.{k}"] for k in meta["param_names"]}
    opt = AdamState.from_arrays(arrays) if "opt.step" in arrays else None
    return Checkpoint(
        ModelSpec.from_dict(meta["spec"]),
        params,
        ChannelStats.from_dict(meta["stats"]),
        WindowingConfig(**meta["windowing"]),
        meta["epoch"],
        opt,
        meta["meta"],
    )
