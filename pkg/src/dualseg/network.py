"""One encoder-decoder segmentation stream: build, train, checkpoint.

The stream is a toy SegNet: each encoder stage is convs_per_stage 3x3
conv+relu blocks followed by 2x2 max pooling with stored indices; the decoder
mirrors it with index-based unpooling, and a final 3x3 conv maps to class
scores. Output spatial size always equals input spatial size.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tape, Tensor


class CheckpointError(Exception):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 3
    num_classes: int = 5
    stage_widths: tuple = (16, 32)
    convs_per_stage: int = 2
    tap_stage: int = 0  # decoder stage exporting fusion features; 0 = full resolution

    def validate(self):
        if len(self.stage_widths) < 1:
            raise ValueError("need at least one encoder stage")
        if any(w <= 0 for w in self.stage_widths):
            raise ValueError("stage widths must be positive")
        if self.in_channels <= 0 or self.num_classes < 2:
            raise ValueError("bad channel/class count")
        if self.convs_per_stage < 1:
            raise ValueError("convs_per_stage must be >= 1")
        if not (0 <= self.tap_stage < len(self.stage_widths)):
            raise ValueError(f"tap_stage {self.tap_stage} outside [0, {len(self.stage_widths)})")

    def to_dict(self):
        return {
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
            "stage_widths": list(self.stage_widths),
            "convs_per_stage": self.convs_per_stage,
            "tap_stage": self.tap_stage,
        }

    @staticmethod
    def from_dict(d):
        return NetworkConfig(
            in_channels=int(d["in_channels"]),
            num_classes=int(d["num_classes"]),
            stage_widths=tuple(int(w) for w in d["stage_widths"]),
            convs_per_stage=int(d["convs_per_stage"]),
            tap_stage=int(d["tap_stage"]),
        )


@dataclass
class TrainSchedule:
    epochs: int = 10
    base_lr: float = 0.1
    decay_factor: float = 10.0
    decay_epoch: int = 5
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.decay_epoch >= self.epochs:
            raise ValueError("decay_epoch must be < epochs")
        if self.epochs < 1 or self.batch_size < 1 or self.base_lr <= 0:
            raise ValueError("bad schedule")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based epoch; a single division after decay_epoch."""
        return self.base_lr / self.decay_factor if epoch > self.decay_epoch else self.base_lr


def _conv_specs(cfg: NetworkConfig):
    """(name, cin, cout) for every conv in forward order."""
    widths = cfg.stage_widths
    specs = []
    prev = cfg.in_channels
    for s, w in enumerate(widths):
        for i in range(cfg.convs_per_stage):
            specs.append((f"enc{s}_conv{i}", prev, w))
            prev = w
    for s in reversed(range(len(widths))):
        w = widths[s]
        out_w = widths[s - 1] if s > 0 else widths[0]
        for i in range(cfg.convs_per_stage):
            cout = out_w if i == cfg.convs_per_stage - 1 else w
            specs.append((f"dec{s}_conv{i}", prev, cout))
            prev = cout
    specs.append(("cls", prev, cfg.num_classes))
    return specs


class Network:
    """Parameter collection plus the fixed topology derived from its config."""

    def __init__(self, config: NetworkConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def parameters(self):
        return list(self.params.values())

    def freeze(self):
        for p in self.params.values():
            p.frozen = True

    def all_frozen(self):
        return all(p.frozen for p in self.params.values())

    def param_bytes(self):
        return b"".join(p.data.tobytes() for p in self.params.values())


def build_stream(cfg: NetworkConfig, seed: int = 0, zero_init: bool = False,
                 dtype=np.float32) -> Network:
    """Initialize one stream; deterministic given the seed.

    Weights are uniform in +-sqrt(6 / (fan_in + fan_out)), biases zero.
    ``zero_init`` is a test hook producing all-zero parameters.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, cin, cout in _conv_specs(cfg):
        if zero_init:
            w = np.zeros((cout, cin, 3, 3), dtype=dtype)
        else:
            limit = np.sqrt(6.0 / (cin * 9 + cout * 9))
            w = rng.uniform(-limit, limit, size=(cout, cin, 3, 3)).astype(dtype)
        params[f"{name}_w"] = Tensor(w)
        params[f"{name}_b"] = Tensor(np.zeros(cout, dtype=dtype))
    return Network(cfg, params)


def parameter_count(cfg: NetworkConfig) -> int:
    return sum(cout * cin * 9 + cout for _, cin, cout in _conv_specs(cfg))


def _conv_block(net, name, x, tape):
    return T.relu(T.conv2d(x, net.params[f"{name}_w"], net.params[f"{name}_b"], tape), tape)


def forward_with_taps(net: Network, batch: Tensor, tape: Tape | None = None):
    """Run the stream; returns (logits, tap features at the configured decoder stage)."""
    cfg = net.config
    xv = batch.data
    if xv.ndim != 4 or xv.shape[1] != cfg.in_channels:
        raise ValueError(f"batch must be (N, {cfg.in_channels}, H, W), got {xv.shape}")
    n_stages = len(cfg.stage_widths)
    if xv.shape[2] % (2 ** n_stages) or xv.shape[3] % (2 ** n_stages):
        raise ValueError(f"spatial dims must be divisible by {2 ** n_stages}")

    x = batch
    pool_meta = []
    for s in range(n_stages):
        for i in range(cfg.convs_per_stage):
            x = _conv_block(net, f"enc{s}_conv{i}", x, tape)
        h, w = x.data.shape[2], x.data.shape[3]
        x, idx = T.maxpool2(x, tape)
        pool_meta.append((idx, h, w))

    tap = None
    for s in reversed(range(n_stages)):
        idx, h, w = pool_meta[s]
        x = T.maxunpool2(x, idx, h, w, tape)
        for i in range(cfg.convs_per_stage):
            x = _conv_block(net, f"dec{s}_conv{i}", x, tape)
        if s == cfg.tap_stage:
            tap = x
    logits = T.conv2d(x, net.params["cls_w"], net.params["cls_b"], tape)
    return logits, tap


def forward(net: Network, batch: Tensor, tape: Tape | None = None) -> Tensor:
    return forward_with_taps(net, batch, tape)[0]


def _iter_batches(n_items, batch_size, order):
    for start in range(0, n_items, batch_size):
        yield order[start:start + batch_size]


def patch_accuracy(net: Network, dataset, batch_size: int = 16) -> float:
    """Plain pixel accuracy over non-void pixels, on (image, labels) patches."""
    correct = 0
    total = 0
    for sel in _iter_batches(len(dataset), batch_size, np.arange(len(dataset))):
        x = np.stack([dataset[i][0] for i in sel])
        y = np.stack([dataset[i][1] for i in sel])
        logits = forward(net, Tensor(x), None)
        pred = logits.data.argmax(axis=1)
        valid = y != 255
        correct += int((pred[valid] == y[valid]).sum())
        total += int(valid.sum())
    return correct / total if total else 0.0


def train_stream(net: Network, train_set, val_set, schedule: TrainSchedule):
    """SGD training under the fixed decay schedule; deterministic per seed.

    train_set / val_set: sequences of (image (C,H,W) float32, labels (H,W) uint8)
    with 255 marking void pixels. Returns [(epoch, mean_loss, val_oa), ...].
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("train_stream needs non-empty train and validation sets")
    rng = np.random.default_rng(schedule.seed)
    history = []
    params = net.parameters()
    for epoch in range(1, schedule.epochs + 1):
        lr = schedule.lr_at(epoch)
        order = rng.permutation(len(train_set))
        losses = []
        for sel in _iter_batches(len(train_set), schedule.batch_size, order):
            x = np.stack([train_set[i][0] for i in sel])
            y = np.stack([train_set[i][1] for i in sel]).astype(np.int64)
            tape = Tape()
            logits = forward(net, Tensor(x), tape)
            loss = T.cross_entropy(logits, y, y == 255, tape)
            T.backward(loss, tape)
            T.sgd_step(params, lr)
            tape.clear()
            losses.append(float(loss.data))
        val_oa = patch_accuracy(net, val_set, schedule.batch_size)
        history.append((epoch, float(np.mean(losses)), val_oa))
    return history


def history_csv(history) -> str:
    lines = ["epoch,loss,val_oa"]
    for epoch, loss, val_oa in history:
        lines.append(f"{epoch},{loss:.6f},{val_oa:.4f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# checkpoint format: magic "CKPT" | version u8 | config record (u32 length +
# payload) | param count u32 | per parameter: name length u32, UTF-8 name,
# ndim u32, dims u32 each, float32 little-endian values. All integers LE.

CKPT_MAGIC = b"CKPT"
CKPT_VERSION = 1


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointTruncatedError(f"checkpoint truncated while reading {what}")
    return buf


def _write_params(f, params: dict[str, Tensor]):
    f.write(struct.pack("<I", len(params)))
    for name, p in params.items():
        nb = name.encode("utf-8")
        f.write(struct.pack("<I", len(nb)))
        f.write(nb)
        f.write(struct.pack("<I", p.data.ndim))
        for d in p.data.shape:
            f.write(struct.pack("<I", d))
        f.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def _read_params(f) -> dict[str, Tensor]:
    (count,) = struct.unpack("<I", _read_exact(f, 4, "parameter count"))
    params: dict[str, Tensor] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", _read_exact(f, 4, "name length"))
        name = _read_exact(f, nlen, "name").decode("utf-8")
        (ndim,) = struct.unpack("<I", _read_exact(f, 4, "ndim"))
        dims = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, "dims"))
        n_vals = int(np.prod(dims)) if ndim else 1
        raw = _read_exact(f, 4 * n_vals, f"values of {name}")
        params[name] = Tensor(np.frombuffer(raw, dtype="<f4").reshape(dims).copy())
    return params


def write_checkpoint_record(f, config_payload: bytes, params: dict[str, Tensor]):
    f.write(CKPT_MAGIC)
    f.write(struct.pack("<B", CKPT_VERSION))
    f.write(struct.pack("<I", len(config_payload)))
    f.write(config_payload)
    _write_params(f, params)


def read_checkpoint_record(path):
    """Low-level reader: returns (config payload bytes, params dict)."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != CKPT_MAGIC:
            raise CheckpointMagicError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<B", _read_exact(f, 1, "version"))
        if version != CKPT_VERSION:
            raise CheckpointVersionError(f"unsupported checkpoint version {version}")
        (clen,) = struct.unpack("<I", _read_exact(f, 4, "config length"))
        payload = _read_exact(f, clen, "config record")
        params = _read_params(f)
        if f.read(1):
            raise CheckpointError("trailing bytes after last parameter")
    return payload, params


def save_checkpoint(net: Network, path, window: int | None = None):
    record = {"kind": "stream", "config": net.config.to_dict()}
    if window is not None:
        record["window"] = window
    with open(path, "wb") as f:
        write_checkpoint_record(f, json.dumps(record, sort_keys=True).encode("utf-8"), net.params)


def load_checkpoint(path) -> Network:
    payload, params = read_checkpoint_record(path)
    record = json.loads(payload.decode("utf-8"))
    if record.get("kind") != "stream":
        raise CheckpointError(f"not a stream checkpoint: kind={record.get('kind')!r}")
    cfg = NetworkConfig.from_dict(record["config"])
    expected = {f"{name}_{suffix}" for name, _, _ in _conv_specs(cfg) for suffix in ("w", "b")}
    if expected != set(params):
        raise CheckpointError("parameter names do not match the embedded config")
    net = Network(cfg, params)
    net.window = record.get("window")
    return net
