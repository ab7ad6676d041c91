"""Alternating GAN optimization for single-stage and stacked models.

Each iteration runs, in order: forward Stage I, forward Stage II, update
D1, update D2, update G1, update G2. Stage II sees a detached copy of the
Stage-I output, so each generator is driven only by its own objective.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import losses
from .datamodel import Manifest, Sample, load_samples
from .errors import CheckpointError, ConfigError, DataError, DivergedError, NumericalError, ShapeError, StageError
from .networks import NetConfig, build_discriminator, build_generator, parameter_count

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
BLOB_MAGIC = b"CAGT"
DIRECTIONS = ("photo2sketch", "sketch2photo")
LOG_COLUMNS = ("iteration", "stage", "loss", "value")
LOSS_NAMES = ("recon", "l1_global", "adv_g", "adv_d")


@dataclass
class TrainConfig:
    direction: str = "photo2sketch"
    stages: int = 2
    epochs: int = 700
    batch_size: int = 1
    learning_rate: float = 2e-4
    d_learning_rate: float | None = None
    beta1: float = 0.5
    beta2: float = 0.999
    lam: float = 100.0
    alpha: float = 0.7
    epsilon_mass: float = 1e-6
    seed: int = 0
    image_size: int = 64
    base_width: int = 64
    components: int = 8
    log_every: int = 50

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ConfigError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if self.stages not in (1, 2):
            raise ConfigError(f"stages must be 1 or 2, got {self.stages}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        losses.LossWeights(self.alpha, self.lam, self.epsilon_mass)

    @property
    def weights(self) -> losses.LossWeights:
        return losses.LossWeights(self.alpha, self.lam, self.epsilon_mass)

    @property
    def source_channels(self) -> int:
        return 3 if self.direction == "photo2sketch" else 1

    @property
    def target_channels(self) -> int:
        return 1 if self.direction == "photo2sketch" else 3

    def net_config(self, stage: int) -> NetConfig:
        return NetConfig(
            image_size=self.image_size,
            in_channels_appearance=self.source_channels,
            in_channels_composition=self.components,
            out_channels=self.target_channels,
            base_width=self.base_width,
            stage="one" if stage == 1 else "two",
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainState:
    cfg: TrainConfig
    nets: dict[str, torch.nn.Module]
    optims: dict[str, torch.optim.Adam]
    epoch: int = 0
    position: int = 0
    iteration: int = 0
    logs: dict[str, list[float]] = field(default_factory=dict)

    @property
    def network_names(self) -> list[str]:
        return ["g1", "d1", "g2", "d2"] if self.cfg.stages == 2 else ["g1", "d1"]


def init_state(cfg: TrainConfig) -> TrainState:
    nets: dict[str, torch.nn.Module] = {}
    for stage in range(1, cfg.stages + 1):
        ncfg = cfg.net_config(stage)
        # distinct, seed-derived initializations per network
        nets[f"g{stage}"] = build_generator(ncfg, seed=cfg.seed * 4 + 2 * (stage - 1))
        nets[f"d{stage}"] = build_discriminator(ncfg, seed=cfg.seed * 4 + 2 * (stage - 1) + 1)
    d_lr = cfg.learning_rate if cfg.d_learning_rate is None else cfg.d_learning_rate
    optims = {
        name: torch.optim.Adam(
            net.parameters(), lr=d_lr if name.startswith("d") else cfg.learning_rate, betas=(cfg.beta1, cfg.beta2)
        )
        for name, net in nets.items()
    }
    logs = {f"{n}{s}": [] for s in range(1, cfg.stages + 1) for n in LOSS_NAMES}
    return TrainState(cfg, nets, optims, logs=logs)


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    source: torch.Tensor
    masks: torch.Tensor
    target: torch.Tensor


def _chw(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.moveaxis(arr, -1, 0), dtype=np.float32))


def sample_tensors(sample: Sample, direction: str) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    src, tgt = (sample.photo, sample.sketch) if direction == "photo2sketch" else (sample.sketch, sample.photo)
    return _chw(src), _chw(sample.masks), _chw(tgt)


class SampleBank:
    """All training samples stacked once as channel-first tensors."""

    def __init__(self, samples: Sequence[Sample], cfg: TrainConfig):
        if not samples:
            raise DataError("no training samples")
        size = (cfg.image_size, cfg.image_size)
        for s in samples:
            if s.size != size:
                raise ShapeError(f"sample {s.id} is {s.size}, expected {size}; pad it first")
            if s.masks.shape[-1] != cfg.components:
                raise ShapeError(f"sample {s.id} has {s.masks.shape[-1]} mask components, expected {cfg.components}")
        parts = [sample_tensors(s, cfg.direction) for s in samples]
        self.source = torch.stack([p[0] for p in parts])
        self.masks = torch.stack([p[1] for p in parts])
        self.target = torch.stack([p[2] for p in parts])
        self.ids = [s.id for s in samples]

    def __len__(self):
        return len(self.ids)

    def batch(self, idx) -> Batch:
        idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        return Batch(self.source[idx], self.masks[idx], self.target[idx])


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Sample visiting order for one epoch; a pure function of (seed, epoch)."""
    return np.random.default_rng([seed, epoch]).permutation(n)


# ---------------------------------------------------------------------------
# one iteration
# ---------------------------------------------------------------------------


def _set_requires_grad(net, flag):
    for p in net.parameters():
        p.requires_grad_(flag)


def _check(state, name, value):
    if not math.isfinite(value):
        raise DivergedError(state.iteration, name, value)


def train_step(state: TrainState, batch: Batch, on_substep: Callable[[str, TrainState], None] | None = None) -> dict:
    """One alternating update of every network; returns the logged losses."""
    try:
        return _train_step(state, batch, on_substep)
    except DivergedError:
        raise
    except NumericalError as exc:
        raise DivergedError(state.iteration, "loss", str(exc)) from exc


def _train_step(state, batch, on_substep):
    cfg = state.cfg
    nets, opts = state.nets, state.optims
    x, m, y = batch.source, batch.masks, batch.target
    weights = cfg.weights
    stages = range(1, cfg.stages + 1)

    outputs = {1: nets["g1"](x, m)}
    initial = {1: None}
    if cfg.stages == 2:
        initial[2] = outputs[1].detach()
        outputs[2] = nets["g2"](x, m, initial[2])

    record = {}
    for s in stages:
        d = nets[f"d{s}"]
        _set_requires_grad(d, True)
        opts[f"d{s}"].zero_grad(set_to_none=True)
        loss_d = losses.discriminator_loss_from_logits(
            d(x, m, y, initial[s]), d(x, m, outputs[s].detach(), initial[s])
        )
        loss_d.backward()
        opts[f"d{s}"].step()
        record[f"adv_d{s}"] = loss_d.item()
        if on_substep:
            on_substep(f"d{s}", state)

    for s in stages:
        d = nets[f"d{s}"]
        _set_requires_grad(d, False)
        opts[f"g{s}"].zero_grad(set_to_none=True)
        adv_g = losses.generator_adv_loss_from_logits(d(x, m, outputs[s], initial[s]))
        recon = losses.mixed_reconstruction_loss(y, outputs[s], m, weights)
        losses.generator_objective(adv_g, recon, weights).backward()
        opts[f"g{s}"].step()
        _set_requires_grad(d, True)
        with torch.no_grad():
            record[f"l1_global{s}"] = losses.global_l1(y, outputs[s]).item()
        record[f"adv_g{s}"] = adv_g.item()
        record[f"recon{s}"] = recon.item()
        if on_substep:
            on_substep(f"g{s}", state)

    for name, value in record.items():
        _check(state, name, value)
    for name in state.logs:
        state.logs[name].append(record[name])
    state.iteration += 1
    return record


def train(
    cfg: TrainConfig,
    data: Manifest | Sequence[Sample],
    state: TrainState | None = None,
    max_iterations: int | None = None,
    on_substep: Callable[[str, TrainState], None] | None = None,
) -> TrainState:
    """Run (or resume) training until ``cfg.epochs`` are done or ``max_iterations`` more steps ran."""
    if isinstance(data, Manifest):
        data = load_samples(data, split="train")
    else:
        data = [s for s in data if s.split == "train"]
    if not data:
        raise DataError("empty training split")
    bank = SampleBank(data, cfg)
    state = state or init_state(cfg)
    n = len(bank)
    done = 0
    while state.epoch < cfg.epochs:
        order = epoch_order(cfg.seed, state.epoch, n)
        while state.position < n:
            if max_iterations is not None and done >= max_iterations:
                return state
            idx = order[state.position : state.position + cfg.batch_size]
            rec = train_step(state, bank.batch(idx), on_substep)
            state.position += len(idx)
            done += 1
            if cfg.log_every and state.iteration % cfg.log_every == 0:
                log.info("epoch %d iter %d %s", state.epoch, state.iteration,
                         " ".join(f"{k}={v:.4f}" for k, v in sorted(rec.items())))
        state.epoch += 1
        state.position = 0
    return state


@torch.no_grad()
def synthesize(state: TrainState, source: np.ndarray, masks: np.ndarray, stage: int | None = None) -> np.ndarray:
    """Translate one padded ``(H, W, d)`` input; returns ``(H, W, out)`` in [-1, 1].

    ``stage`` picks the output of Stage I or II; default is the last stage.
    """
    cfg = state.cfg
    stage = cfg.stages if stage is None else stage
    if stage not in range(1, cfg.stages + 1):
        raise StageError(f"stage {stage} not available in a {cfg.stages}-stage model")
    size = (cfg.image_size, cfg.image_size)
    if source.shape[:2] != size or masks.shape[:2] != size:
        raise ShapeError(f"inputs must be {size}, got {source.shape[:2]} and {masks.shape[:2]}")
    if source.shape[-1] != cfg.source_channels:
        raise ShapeError(f"expected {cfg.source_channels} input channels, got {source.shape[-1]}")
    x = _chw(source)[None]
    m = _chw(masks)[None]
    out = state.nets["g1"](x, m)
    if stage == 2:
        out = state.nets["g2"](x, m, out)
    return out[0].permute(1, 2, 0).numpy()


def smooth_curve(values: Sequence[float], window: int = 40) -> list[float]:
    """Average non-overlapping blocks of ``window`` values (last block may be short)."""
    if window < 1:
        raise ValueError("window must be >= 1")
    vals = list(values)
    return [sum(vals[i : i + window]) / len(vals[i : i + window]) for i in range(0, len(vals), window)]


# ---------------------------------------------------------------------------
# loss logs
# ---------------------------------------------------------------------------


def write_loss_log(state: TrainState, path) -> None:
    """Long-format CSV: one row per (iteration, stage, loss)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for it in range(state.iteration):
            for s in range(1, state.cfg.stages + 1):
                for name in LOSS_NAMES:
                    w.writerow([it, s, name, repr(state.logs[f"{name}{s}"][it])])


def read_loss_log(path) -> dict[tuple[int, str], list[float]]:
    """Read ``log.csv`` into ``{(stage, loss): values ordered by iteration}``."""
    rows: dict[tuple[int, str], list[tuple[int, float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != LOG_COLUMNS:
            raise DataError(f"{path}: expected columns {LOG_COLUMNS}, got {reader.fieldnames}")
        for row in reader:
            rows.setdefault((int(row["stage"]), row["loss"]), []).append((int(row["iteration"]), float(row["value"])))
    return {k: [v for _, v in sorted(vals)] for k, vals in rows.items()}


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_DTYPES = {"float32": (torch.float32, "<f4"), "float64": (torch.float64, "<f8"), "int64": (torch.int64, "<i8")}


def write_blob(path, tensors: dict[str, torch.Tensor]) -> None:
    """Named tensors as ``magic | version | header length | JSON header | raw little-endian data``."""
    header, chunks = [], []
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        dtype = str(t.dtype).removeprefix("torch.")
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        header.append({"name": name, "shape": list(t.shape), "dtype": dtype})
        chunks.append(t.numpy().astype(_DTYPES[dtype][1], copy=False).tobytes())
    head = json.dumps(header, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(BLOB_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(head)) + head)
        for c in chunks:
            fh.write(c)


def read_blob(path) -> dict[str, torch.Tensor]:
    data = Path(path).read_bytes()
    if data[:4] != BLOB_MAGIC:
        raise CheckpointError(f"{path}: not a weight blob")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: blob version {version}, expected {CHECKPOINT_VERSION}")
    header = json.loads(data[12 : 12 + hlen])
    offset = 12 + hlen
    out = {}
    for item in header:
        torch_dtype, np_dtype = _DTYPES[item["dtype"]]
        count = int(np.prod(item["shape"], dtype=np.int64))
        nbytes = count * np.dtype(np_dtype).itemsize
        if offset + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated at tensor {item['name']}")
        arr = np.frombuffer(data, dtype=np_dtype, count=count, offset=offset).reshape(item["shape"])
        out[item["name"]] = torch.from_numpy(arr.copy()).to(torch_dtype)
        offset += nbytes
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    return out


def _optim_tensors(state: TrainState) -> dict[str, torch.Tensor]:
    out = {}
    for name, opt in state.optims.items():
        sd = opt.state_dict()
        for pid, pstate in sorted(sd["state"].items()):
            for key in ("step", "exp_avg", "exp_avg_sq"):
                t = torch.as_tensor(pstate[key])
                out[f"{name}.{pid}.{key}"] = t.to(torch.float64) if key == "step" else t
    return out


def _load_optim(state: TrainState, tensors: dict[str, torch.Tensor]) -> None:
    for name, opt in state.optims.items():
        sd = opt.state_dict()
        new_state = {}
        for pid in range(len(sd["param_groups"][0]["params"])):
            if f"{name}.{pid}.step" not in tensors:
                continue
            new_state[pid] = {
                "step": tensors[f"{name}.{pid}.step"].to(torch.float32),
                "exp_avg": tensors[f"{name}.{pid}.exp_avg"],
                "exp_avg_sq": tensors[f"{name}.{pid}.exp_avg_sq"],
            }
        sd["state"] = new_state
        opt.load_state_dict(sd)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_checkpoint(state: TrainState, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "cagan-checkpoint",
        "version": CHECKPOINT_VERSION,
        "train_config": state.cfg.to_dict(),
        "networks": {
            name: {
                "config": state.cfg.net_config(int(name[1])).to_dict(),
                "kind": "generator" if name.startswith("g") else "discriminator",
                "parameter_count": sum(p.numel() for p in state.nets[name].parameters()),
            }
            for name in state.network_names
        },
        "progress": {"epoch": state.epoch, "position": state.position, "iteration": state.iteration},
        "loss_columns": list(LOG_COLUMNS),
    }
    files = ["config.json"]
    (d / "config.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    for name in state.network_names:
        write_blob(d / f"{name}.bin", dict(state.nets[name].state_dict()))
        files.append(f"{name}.bin")
    write_blob(d / "optim.bin", _optim_tensors(state))
    write_loss_log(state, d / "log.csv")
    files += ["optim.bin", "log.csv"]
    (d / "CHECKSUMS").write_text("".join(f"{_sha256(d / f)}  {f}\n" for f in files))
    return d


def verify_checksums(directory) -> None:
    d = Path(directory)
    sums = d / "CHECKSUMS"
    if not sums.is_file():
        raise CheckpointError(f"{d}: missing CHECKSUMS")
    for line in sums.read_text().splitlines():
        digest, _, name = line.partition("  ")
        if not (d / name).is_file():
            raise CheckpointError(f"{d}: missing {name}")
        if _sha256(d / name) != digest:
            raise CheckpointError(f"{d}: checksum mismatch for {name} (corrupt or truncated)")


def load_checkpoint(directory, expected: TrainConfig | None = None) -> TrainState:
    """Restore a training state; ``expected`` rejects checkpoints of a different architecture."""
    d = Path(directory)
    verify_checksums(d)
    manifest = json.loads((d / "config.json").read_text())
    if manifest.get("format") != "cagan-checkpoint" or manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{d}: unsupported checkpoint {manifest.get('format')} v{manifest.get('version')}, "
            f"expected v{CHECKPOINT_VERSION}"
        )
    cfg = TrainConfig.from_dict(manifest["train_config"])
    if expected is not None:
        for name, info in manifest["networks"].items():
            stage = int(name[1])
            if stage > expected.stages:
                raise CheckpointError(f"{d}: checkpoint has {name} but expected {expected.stages} stage(s)")
            want = parameter_count(expected.net_config(stage), info["kind"])
            if want != info["parameter_count"]:
                raise CheckpointError(
                    f"{d}: parameter_count mismatch for {name}: checkpoint {info['parameter_count']}, expected {want}"
                )
    state = init_state(cfg)
    for name in state.network_names:
        tensors = read_blob(d / f"{name}.bin")
        try:
            state.nets[name].load_state_dict(tensors, strict=True)
        except RuntimeError as exc:
            raise CheckpointError(f"{d}: {name}.bin does not match its config: {exc}") from exc
    _load_optim(state, read_blob(d / "optim.bin"))
    prog = manifest["progress"]
    state.epoch, state.position, state.iteration = prog["epoch"], prog["position"], prog["iteration"]
    logged = read_loss_log(d / "log.csv")
    for s in range(1, cfg.stages + 1):
        for n in LOSS_NAMES:
            state.logs[f"{n}{s}"] = logged.get((s, n), [])
    if any(len(v) != state.iteration for v in state.logs.values()):
        raise CheckpointError(f"{d}: loss log length does not match iteration counter {state.iteration}")
    return state
