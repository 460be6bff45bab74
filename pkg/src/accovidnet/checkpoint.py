"""Checkpoint container.

A checkpoint is an uncompressed zip archive with fixed member timestamps:

``meta.json``
    ``format_version`` (int), the producing ``config``, stage counters, the
    encoder digest after freezing, the loss history, ``rng_state``, the ordered
    ``parameters`` index (name -> shape, dtype) and the optimizer
    hyperparameters plus per-parameter step counts.
``params/<name>.npy``
    One array per parameter, e.g. ``params/encoder.stage1.pepx1.conv1.weight.npy``.
``optim/<name>.exp_avg.npy``, ``optim/<name>.exp_avg_sq.npy``
    Adam moment estimates for parameters that have been stepped.

Writing the same state twice yields identical bytes.
"""

from __future__ import annotations

import io
import json
import os
import zipfile
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .errors import CheckpointError, ConfigurationError
from .model.networks import Classifier, Encoder, ProjectionHead
from .training import TrainState, make_optimizer

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)
_MODULES = ("encoder", "projection", "classifier")


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def _write_member(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def _optimizer_meta(state: TrainState):
    opt = state.optimizer
    if opt is None:
        return None, {}
    names = state.optimized_parameter_names()
    sd = opt.state_dict()
    group = {k: v for k, v in sd["param_groups"][0].items() if k != "params"}
    group = json.loads(json.dumps(group))
    per_param, arrays = {}, {}
    for idx, name in enumerate(names):
        s = sd["state"].get(idx)
        if not s:
            continue
        per_param[name] = {"step": float(s["step"])}
        arrays[f"optim/{name}.exp_avg.npy"] = s["exp_avg"].detach().cpu().numpy()
        arrays[f"optim/{name}.exp_avg_sq.npy"] = s["exp_avg_sq"].detach().cpu().numpy()
    return {"param_names": names, "group": group, "state": per_param}, arrays


def save_checkpoint(state: TrainState, path: str | os.PathLike) -> Path:
    path = Path(path)
    params = {}
    for prefix in _MODULES:
        module = getattr(state, prefix)
        if module is None:
            continue
        for name, p in module.named_parameters():
            params[f"{prefix}.{name}"] = p.detach().cpu().numpy()
    optim_meta, optim_arrays = _optimizer_meta(state)
    meta = {
        "format_version": FORMAT_VERSION,
        "config": state.config.to_dict(),
        "modules": [m for m in _MODULES if getattr(state, m) is not None],
        "stage": state.stage,
        "epoch": state.epoch,
        "batch_in_epoch": state.batch_in_epoch,
        "step": state.step,
        "stage1_complete": state.stage1_complete,
        "encoder_digest": state.encoder_digest,
        "history": state.history,
        "rng_state": state.rng_state,
        "parameters": {k: {"shape": list(v.shape), "dtype": str(v.dtype)} for k, v in params.items()},
        "optimizer": optim_meta,
    }
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _write_member(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=1).encode())
        for name, arr in params.items():
            _write_member(zf, f"params/{name}.npy", _npy_bytes(arr))
        for name, arr in optim_arrays.items():
            _write_member(zf, name, _npy_bytes(arr))
    os.replace(tmp, path)
    return path


def _open(path: str | os.PathLike) -> tuple[zipfile.ZipFile, dict]:
    try:
        zf = zipfile.ZipFile(path)
        meta = json.loads(zf.read("meta.json"))
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint {path} does not exist") from exc
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, OSError) as exc:
        raise CheckpointError(f"corrupt checkpoint container {path}: {exc}") from exc
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        zf.close()
        raise CheckpointError(
            f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
        )
    return zf, meta


def _read_array(zf: zipfile.ZipFile, member: str) -> np.ndarray:
    try:
        return np.lib.format.read_array(io.BytesIO(zf.read(member)), allow_pickle=False)
    except KeyError:
        raise
    except (ValueError, OSError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"corrupt array {member}: {exc}") from exc


def _fill(module: torch.nn.Module, prefix: str, zf: zipfile.ZipFile, meta: dict) -> None:
    index = meta["parameters"]
    with torch.no_grad():
        for name, p in module.named_parameters():
            key = f"{prefix}.{name}"
            if key not in index:
                raise CheckpointError(f"checkpoint is missing parameter key {key!r}")
            shape = tuple(index[key]["shape"])
            if shape != tuple(p.shape):
                raise CheckpointError(
                    f"shape mismatch for parameter {key!r}: checkpoint {shape}, model {tuple(p.shape)}"
                )
            try:
                arr = _read_array(zf, f"params/{key}.npy")
            except KeyError:
                raise CheckpointError(f"checkpoint is missing parameter key {key!r}") from None
            p.data = torch.from_numpy(arr.copy())


def load_checkpoint(path: str | os.PathLike, config: RunConfig | None = None) -> TrainState:
    """Rebuild a :class:`TrainState` exactly as it was saved.

    If ``config`` is given the modules are built from it instead of the stored
    config, and any parameter whose shape disagrees is reported by name.
    """
    zf, meta = _open(path)
    with zf:
        try:
            stored = RunConfig.from_dict(meta["config"])
        except (ConfigurationError, KeyError) as exc:
            raise CheckpointError(f"checkpoint config is invalid: {exc}") from exc
        cfg = config or stored
        present = meta.get("modules", [])
        factories = {
            "encoder": lambda: Encoder(cfg.model.encoder),
            "projection": lambda: ProjectionHead(cfg.model.projection),
            "classifier": lambda: Classifier(cfg.model.classifier),
        }
        modules = {}
        for name in _MODULES:
            if name in present:
                modules[name] = factories[name]()
                _fill(modules[name], name, zf, meta)
        if "encoder" not in modules:
            raise CheckpointError("checkpoint is missing parameter key 'encoder.stem.weight'")
        state = TrainState(
            config=cfg,
            encoder=modules["encoder"],
            projection=modules.get("projection"),
            classifier=modules.get("classifier"),
            optimizer=None,
            stage=meta["stage"],
            epoch=meta["epoch"],
            batch_in_epoch=meta["batch_in_epoch"],
            step=meta["step"],
            stage1_complete=meta["stage1_complete"],
            encoder_digest=meta["encoder_digest"],
            history=meta["history"],
        )
        if state.stage == "stage2":
            state.encoder.requires_grad_(False)
        _restore_optimizer(state, zf, meta.get("optimizer"))
    return state


def _restore_optimizer(state: TrainState, zf: zipfile.ZipFile, om: dict | None) -> None:
    if om is None:
        return
    named = dict(state.all_named_parameters())
    try:
        params = [named[n] for n in om["param_names"]]
    except KeyError as exc:
        raise CheckpointError(f"optimizer refers to unknown parameter {exc.args[0]!r}") from None
    opt = make_optimizer(params, om["group"]["lr"], state.config.train)
    per_state = {}
    for idx, name in enumerate(om["param_names"]):
        if name not in om["state"]:
            continue
        try:
            m = _read_array(zf, f"optim/{name}.exp_avg.npy")
            v = _read_array(zf, f"optim/{name}.exp_avg_sq.npy")
        except KeyError:
            raise CheckpointError(f"checkpoint is missing optimizer moments for {name!r}") from None
        per_state[idx] = {
            "step": torch.tensor(om["state"][name]["step"], dtype=torch.float32),
            "exp_avg": torch.from_numpy(m.copy()),
            "exp_avg_sq": torch.from_numpy(v.copy()),
        }
    group = dict(om["group"])
    if "betas" in group:
        group["betas"] = tuple(group["betas"])  # JSON turned it into a list
    group["params"] = list(range(len(params)))
    opt.load_state_dict({"state": per_state, "param_groups": [group]})
    state.optimizer = opt


def load_encoder_weights(encoder: Encoder, path: str | os.PathLike, strict: bool = True) -> list[str]:
    """Copy ``encoder.*`` parameters from a checkpoint into ``encoder`` by name.

    Returns the names that were loaded. With ``strict=False`` names absent from
    the checkpoint are left untouched.
    """
    zf, meta = _open(path)
    loaded = []
    with zf, torch.no_grad():
        index = meta["parameters"]
        for name, p in encoder.named_parameters():
            key = f"encoder.{name}"
            if key not in index:
                if strict:
                    raise CheckpointError(f"checkpoint is missing parameter key {key!r}")
                continue
            shape = tuple(index[key]["shape"])
            if shape != tuple(p.shape):
                raise CheckpointError(
                    f"shape mismatch for parameter {key!r}: checkpoint {shape}, model {tuple(p.shape)}"
                )
            arr = _read_array(zf, f"params/{key}.npy")
            p.copy_(torch.from_numpy(arr).to(p.dtype))
            loaded.append(key)
    return loaded
