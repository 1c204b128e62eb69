"""The two feature-mapping networks: training, inference and checkpoints.

``clip2nerf`` maps a 512-d CLIP embedding to a 1024-d NeRF embedding;
``nerf2clip`` goes the other way. Both are ``in -> 768 -> out`` MLPs with a
GELU hidden layer, trained to maximise cosine similarity with their target.
"""

import enum
import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ._crc64 import crc64
from .dataset import ViewSource, select_view_indices
from .errors import (
    ConfigMismatch,
    CorruptCheckpoint,
    DimensionMismatch,
    EmptyDataset,
    MissingCaption,
    ParseError,
    VersionError,
)
from .optim import OneCycleSchedule, adamw_step, init_adamw, one_cycle_lr
from .rng import Xoshiro256, XoshiroLanes, derive_seed
from .tensor import MlpParams, cosine_loss_batch, mlp_backward, mlp_forward

CHECKPOINT_MAGIC = b"NFBCKPT"
CHECKPOINT_VERSION = 1
HIDDEN_DIM = 768


class MapperDirection(str, enum.Enum):
    CLIP2NERF = "clip2nerf"
    NERF2CLIP = "nerf2clip"

    @property
    def layer_dims(self):
        if self is MapperDirection.CLIP2NERF:
            return [512, HIDDEN_DIM, 1024]
        return [1024, HIDDEN_DIM, 512]

    @property
    def input_dim(self):
        return self.layer_dims[0]

    @property
    def output_dim(self):
        return self.layer_dims[-1]


_DEFAULT_EPOCHS = {MapperDirection.CLIP2NERF: 150, MapperDirection.NERF2CLIP: 100}
_DEFAULT_LR = {MapperDirection.CLIP2NERF: 1e-5, MapperDirection.NERF2CLIP: 1e-3}


@dataclass
class MapperConfig:
    """Training recipe. ``epochs`` and ``max_lr`` default per direction.

    ``n_views=None`` uses every view matching ``view_sources``.
    """

    direction: MapperDirection
    n_views: int = None
    view_sources: tuple = (ViewSource.GROUND_TRUTH,)
    multimodal: bool = False
    caption_repeat: int = 1
    epochs: int = None
    max_lr: float = None
    weight_decay: float = 1e-2
    batch_size: int = 64
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        self.direction = MapperDirection(self.direction)
        if isinstance(self.view_sources, (str, ViewSource)):
            self.view_sources = (self.view_sources,)
        self.view_sources = tuple(sorted({ViewSource(s) for s in self.view_sources},
                                         key=lambda s: s.value))
        if self.epochs is None:
            self.epochs = _DEFAULT_EPOCHS[self.direction]
        if self.max_lr is None:
            self.max_lr = _DEFAULT_LR[self.direction]
        if self.n_views is not None and self.n_views < 1:
            raise ValueError("n_views must be at least 1")
        if self.epochs < 0 or self.batch_size < 1 or self.caption_repeat < 0:
            raise ValueError("epochs, batch_size and caption_repeat must be non-negative")
        if self.multimodal and self.direction is MapperDirection.NERF2CLIP:
            raise ConfigMismatch("multimodal training applies to clip2nerf only")

    def to_dict(self):
        d = asdict(self)
        d["direction"] = self.direction.value
        d["view_sources"] = [s.value for s in self.view_sources]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class Checkpoint:
    config: MapperConfig
    params: MlpParams  # lowest validation loss
    final_params: MlpParams
    metadata: dict = field(default_factory=dict)

    @property
    def direction(self):
        return self.config.direction


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


def init_params(direction, seed):
    """Kaiming-uniform fan-in weights in ``+-sqrt(6 / fan_in)``, zero biases, float32."""
    dims = MapperDirection(direction).layer_dims
    weights, biases = [], []
    for k in range(len(dims) - 1):
        fan_in, fan_out = dims[k], dims[k + 1]
        bound = math.sqrt(6.0 / fan_in)
        lanes = XoshiroLanes([derive_seed(seed, "init", k, row) for row in range(fan_out)])
        u = lanes.uniform(fan_in)
        weights.append(((2.0 * u - 1.0) * bound).astype(np.float32))
        biases.append(np.zeros(fan_out, dtype=np.float32))
    return MlpParams(dims, weights, biases)


# --------------------------------------------------------------------------
# training data


def _view_filter(config):
    return set(config.view_sources)


def _n_for(record, config):
    if config.n_views is not None:
        return config.n_views
    return sum(s in config.view_sources for s in record.view_sources)


def build_samples(records, config):
    """``(inputs, targets)`` arrays for one split under ``config``.

    clip2nerf: one ``(view, nerf)`` row per selected view, plus
    ``caption_repeat`` caption rows per object when multimodal.
    nerf2clip: one ``(nerf, mean of selected views)`` row per object.
    View choice is fixed for the run by ``config.seed``.
    """
    seed = derive_seed(config.seed, "train-views")
    sources = _view_filter(config)
    xs, ys = [], []
    for rec in records:
        idx = select_view_indices(rec, _n_for(rec, config), sources, seed)
        views = rec.views[idx].astype(np.float64)
        nerf = rec.nerf_embedding.astype(np.float64)
        if config.direction is MapperDirection.CLIP2NERF:
            xs.append(views)
            ys.append(np.repeat(nerf[None, :], len(idx), axis=0))
            if config.multimodal and config.caption_repeat:
                if rec.caption_embedding is None:
                    raise MissingCaption(f"record {rec.id!r} has no caption embedding", rec.id)
                cap = rec.caption_embedding.astype(np.float64)[None, :]
                xs.append(np.repeat(cap, config.caption_repeat, axis=0))
                ys.append(np.repeat(nerf[None, :], config.caption_repeat, axis=0))
        else:
            xs.append(nerf[None, :])
            ys.append(views.mean(axis=0)[None, :])
    if not xs:
        d = config.direction
        return np.zeros((0, d.input_dim)), np.zeros((0, d.output_dim))
    return np.concatenate(xs), np.concatenate(ys)


def fingerprint(*arrays):
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def evaluate_loss(params, inputs, targets, batch_size=1024):
    """Mean cosine loss over all rows (NaN for an empty set)."""
    if len(inputs) == 0:
        return float("nan")
    total = 0.0
    for start in range(0, len(inputs), batch_size):
        out, _ = mlp_forward(params, inputs[start:start + batch_size])
        losses, _ = cosine_loss_batch(out, targets[start:start + batch_size])
        total += float(losses.sum())
    return total / len(inputs)


def train(dataset, config, expected=None):
    """Train a mapper on ``dataset``'s train split. Returns ``(checkpoint, trace)``.

    The checkpoint's ``params`` are those of the epoch with the lowest
    validation loss (the last epoch when there is no validation split);
    ``final_params`` are the last epoch's.
    """
    if expected is not None and config.direction is not MapperDirection(expected):
        raise ConfigMismatch(f"config direction {config.direction.value}, expected {expected}")
    d = config.direction
    dims = (dataset.clip_dim, dataset.nerf_dim)
    if d is MapperDirection.NERF2CLIP:
        dims = dims[::-1]
    if dims != (d.input_dim, d.output_dim):
        raise DimensionMismatch(f"dataset dims {dims} do not fit {d.value}")
    train_records = dataset.split("train")
    if not train_records:
        raise EmptyDataset("training split is empty")
    x_train, y_train = build_samples(train_records, config)
    x_val, y_val = build_samples(dataset.split("val"), config)

    params = init_params(d, derive_seed(config.seed, "init"))
    state = init_adamw(params, config.beta1, config.beta2, config.eps)
    n = len(x_train)
    steps_per_epoch = -(-n // config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    schedule = None
    if total_steps:
        schedule = OneCycleSchedule(config.max_lr, total_steps, config.pct_start,
                                    config.div_factor, config.final_div_factor)

    trace = []
    best = params
    best_val = math.inf
    best_epoch = 0
    step = 0
    lr = 0.0
    for epoch in range(config.epochs):
        order = Xoshiro256(derive_seed(config.seed, "shuffle", epoch)).permutation(n)
        order = np.array(order, dtype=np.intp)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            out, cache = mlp_forward(params, x_train[idx])
            losses, grad = cosine_loss_batch(out, y_train[idx])
            epoch_loss += float(losses.sum())
            grads = mlp_backward(params, cache, grad / len(idx))
            lr = one_cycle_lr(schedule, step)
            params, state = adamw_step(params, grads, state, lr, config.weight_decay)
            step += 1
        val_loss = evaluate_loss(params, x_val, y_val)
        stats = EpochStats(epoch + 1, epoch_loss / n, val_loss, lr)
        trace.append(stats)
        score = val_loss if not math.isnan(val_loss) else stats.train_loss
        if len(x_val) == 0 or score < best_val:
            best_val, best, best_epoch = score, params, epoch + 1

    metadata = {
        "epochs_run": config.epochs,
        "best_epoch": best_epoch,
        "steps": step,
        "steps_per_epoch": steps_per_epoch,
        "samples_per_epoch": n,
        "train_objects": len(train_records),
        "final_train_loss": trace[-1].train_loss if trace else None,
        "final_val_loss": trace[-1].val_loss if trace else None,
        "best_val_loss": best_val if trace and len(x_val) else None,
        "dataset_fingerprint": fingerprint(x_train, y_train, x_val, y_val),
        "trace": [asdict(t) for t in trace],
    }
    return Checkpoint(config, best, params, metadata), trace


def train_clip2nerf(dataset, config):
    return train(dataset, config, expected=MapperDirection.CLIP2NERF)


def train_nerf2clip(dataset, config):
    return train(dataset, config, expected=MapperDirection.NERF2CLIP)


def infer(checkpoint, x, final=False):
    """Forward pass for one vector (returns a vector) or a batch (returns rows)."""
    params = checkpoint.final_params if final else checkpoint.params
    x = np.asarray(x)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if batch.ndim != 2 or batch.shape[1] != params.layer_dims[0]:
        raise DimensionMismatch(
            f"{checkpoint.direction.value} expects {params.layer_dims[0]}-d input, got {x.shape}"
        )
    out, _ = mlp_forward(params, batch)
    return out[0] if single else out


# --------------------------------------------------------------------------
# checkpoint file
#
#   b"NFBCKPT" | u32 version | u64 json length | json | float32 params | u64 crc64
#
# The JSON block holds config, metadata and layer dims. Params are the best
# set followed by the final set, each as W0, b0, W1, b1, ... in row-major
# little-endian float32. The CRC covers every preceding byte.


def _header_json(cp):
    return json.dumps({
        "config": cp.config.to_dict(),
        "layer_dims": cp.params.layer_dims,
        "param_sets": ["best", "final"],
        "metadata": cp.metadata,
    }, sort_keys=True, separators=(",", ":")).encode("utf-8")


def checkpoint_bytes(cp):
    header = _header_json(cp)
    parts = [CHECKPOINT_MAGIC, struct.pack("<IQ", CHECKPOINT_VERSION, len(header)), header]
    for p in (cp.params, cp.final_params):
        for a in p.arrays():
            parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", crc64(body))


def save_checkpoint(cp, path):
    Path(path).write_bytes(checkpoint_bytes(cp))


def read_checkpoint_header(data):
    """Parse magic, version and the JSON block without touching params."""
    fixed = len(CHECKPOINT_MAGIC) + 12
    if len(data) < fixed + 8 or data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ParseError("not a nerfbridge checkpoint")
    version, hlen = struct.unpack_from("<IQ", data, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    if fixed + hlen + 8 > len(data):
        raise CorruptCheckpoint("header length exceeds file size")
    try:
        header = json.loads(data[fixed:fixed + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"unreadable header ({exc})") from exc
    return header, fixed + hlen


def checkpoint_from_bytes(data):
    header, offset = read_checkpoint_header(data)
    (stored,) = struct.unpack_from("<Q", data, len(data) - 8)
    if crc64(data[:-8]) != stored:
        raise CorruptCheckpoint("checksum mismatch")
    config = MapperConfig.from_dict(header["config"])
    dims = header["layer_dims"]
    if dims != config.direction.layer_dims:
        raise CorruptCheckpoint(f"layer dims {dims} do not match {config.direction.value}")
    sets = []
    for _ in header["param_sets"]:
        arrays = []
        for k in range(len(dims) - 1):
            for shape in ((dims[k + 1], dims[k]), (dims[k + 1],)):
                count = int(np.prod(shape))
                if offset + 4 * count > len(data) - 8:
                    raise CorruptCheckpoint("parameter block truncated")
                a = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
                arrays.append(a.astype(np.float32).reshape(shape))
                offset += 4 * count
        sets.append(MlpParams(dims, arrays[0::2], arrays[1::2]))
    if offset != len(data) - 8:
        raise CorruptCheckpoint("trailing bytes after parameters")
    return Checkpoint(config, sets[0], sets[1], header["metadata"])


def load_checkpoint(path):
    return checkpoint_from_bytes(Path(path).read_bytes())

