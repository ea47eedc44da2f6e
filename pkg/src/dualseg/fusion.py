"""Fusion of two stream predictions: averaging and residual correction.

The correction head is three 3x3/pad-1 convs (relu after the first two)
over the channel-concatenated decoder taps of both streams. Its last layer
starts at zero, so a fresh correction model reproduces the averaging
baseline exactly; fine-tuning only ever touches the head, never the streams.
"""

from __future__ import annotations

import json

import numpy as np

from . import network as N
from . import tensor as T
from .network import CheckpointError, Network, NetworkConfig
from .tensor import Tape, Tensor

MODE_AVERAGE = "average"
MODE_CORRECTION = "correction"
_MODE_BYTES = {MODE_AVERAGE: b"\x01", MODE_CORRECTION: b"\x02"}
_BYTE_MODES = {v: k for k, v in _MODE_BYTES.items()}


class CorrectionNet:
    """3-conv residual head producing an additive correction term."""

    def __init__(self, in_channels: int, num_classes: int, hidden: int = 32,
                 seed: int = 0, zero_last: bool = True, dtype=np.float32):
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.hidden = hidden
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        specs = [(in_channels, hidden), (hidden, hidden), (hidden, num_classes)]
        for i, (cin, cout) in enumerate(specs):
            last = i == len(specs) - 1
            if last and zero_last:
                w = np.zeros((cout, cin, 3, 3), dtype=dtype)
            else:
                limit = np.sqrt(6.0 / (cin * 9 + cout * 9))
                w = rng.uniform(-limit, limit, size=(cout, cin, 3, 3)).astype(dtype)
            self.params[f"conv{i}_w"] = Tensor(w)
            self.params[f"conv{i}_b"] = Tensor(np.zeros(cout, dtype=dtype))

    def parameters(self):
        return list(self.params.values())

    def forward(self, x: Tensor, tape: Tape | None = None) -> Tensor:
        h = T.relu(T.conv2d(x, self.params["conv0_w"], self.params["conv0_b"], tape), tape)
        h = T.relu(T.conv2d(h, self.params["conv1_w"], self.params["conv1_b"], tape), tape)
        return T.conv2d(h, self.params["conv2_w"], self.params["conv2_b"], tape)


class FusionModel:
    """Two frozen streams plus a fusion rule fixed at construction."""

    def __init__(self, stream_a: Network, stream_b: Network, mode: str,
                 corr: CorrectionNet | None = None, corr_seed: int = 0, hidden: int = 32):
        if mode not in (MODE_AVERAGE, MODE_CORRECTION):
            raise ValueError(f"unknown fusion mode {mode!r}")
        if stream_a.config.num_classes != stream_b.config.num_classes:
            raise ValueError("streams disagree on class count")
        self.stream_a = stream_a
        self.stream_b = stream_b
        self.mode = mode
        stream_a.freeze()
        stream_b.freeze()
        if mode == MODE_CORRECTION:
            if corr is None:
                corr = CorrectionNet(
                    _tap_channels(stream_a.config) + _tap_channels(stream_b.config),
                    stream_a.config.num_classes, hidden=hidden, seed=corr_seed)
            self.corr = corr
        else:
            self.corr = None

    def fused_scores(self, batch_a: Tensor, batch_b: Tensor, tape: Tape | None = None) -> Tensor:
        """Fused per-pixel class scores: mean probabilities, plus the
        correction term in correction mode. Stream passes never join the tape."""
        logits_a, tap_a = N.forward_with_taps(self.stream_a, batch_a, None)
        logits_b, tap_b = N.forward_with_taps(self.stream_b, batch_b, None)
        p_a = T.softmax_channels(logits_a, None)
        p_b = T.softmax_channels(logits_b, None)
        p_avg = average_fusion([p_a, p_b], None)
        if self.mode == MODE_AVERAGE:
            return p_avg
        return fuse_correct(p_avg, tap_a, tap_b, self.corr, tape)


def _tap_channels(cfg: NetworkConfig) -> int:
    s = cfg.tap_stage
    return cfg.stage_widths[s - 1] if s > 0 else cfg.stage_widths[0]


def average_fusion(probs, tape: Tape | None = None) -> Tensor:
    """Elementwise mean of per-pixel probability maps; stays a simplex."""
    if len(probs) == 0:
        raise ValueError("average_fusion needs at least one input")
    shape = probs[0].data.shape
    for p in probs[1:]:
        if p.data.shape != shape:
            raise ValueError(f"shape mismatch in average_fusion: {p.data.shape} vs {shape}")
    acc = probs[0]
    for p in probs[1:]:
        acc = T.add(acc, p, tape)
    return T.scale(acc, 1.0 / len(probs), tape)


def fuse_correct(p_avg: Tensor, tap_a: Tensor, tap_b: Tensor, corr: CorrectionNet,
                 tape: Tape | None = None) -> Tensor:
    """Averaged prediction plus the correction head's output (a raw score map)."""
    if tap_a.data.shape[2:] != p_avg.data.shape[2:] or tap_b.data.shape[2:] != p_avg.data.shape[2:]:
        raise ValueError("taps not spatially aligned with averaged prediction")
    c = corr.forward(T.concat_channels(tap_a, tap_b, tape), tape)
    return T.add(p_avg, c, tape)


def train_fusion(model: FusionModel, train_set, epochs: int = 1, lr: float = 0.01,
                 batch_size: int = 16, seed: int = 0):
    """Fine-tune the correction head only; stream parameters stay bit-identical.

    train_set: sequence of (image_a (Ca,H,W), image_b (Cb,H,W), labels (H,W)).
    Returns [(epoch, mean_loss), ...].
    """
    if model.mode != MODE_CORRECTION:
        raise ValueError("train_fusion requires a correction-mode model")
    if not (model.stream_a.all_frozen() and model.stream_b.all_frozen()):
        raise ValueError("unfrozen stream detected")
    if len(train_set) == 0:
        raise ValueError("train_fusion needs a non-empty training set")
    rng = np.random.default_rng(seed)
    params = model.corr.parameters()
    history = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(train_set))
        losses = []
        for start in range(0, len(train_set), batch_size):
            sel = order[start:start + batch_size]
            xa = np.stack([train_set[i][0] for i in sel])
            xb = np.stack([train_set[i][1] for i in sel])
            y = np.stack([train_set[i][2] for i in sel]).astype(np.int64)
            tape = Tape()
            scores = model.fused_scores(Tensor(xa), Tensor(xb), tape)
            loss = T.cross_entropy(scores, y, y == 255, tape)
            T.backward(loss, tape)
            T.sgd_step(params, lr)
            tape.clear()
            losses.append(float(loss.data))
        history.append((epoch, float(np.mean(losses))))
    return history


def residual_stats(model: FusionModel, dataset, batch_size: int = 16):
    """Mean/std of averaged-prediction values and of correction values.

    Returns (m_avg, s_avg, m_corr, s_corr) over all pixels, channels, samples.
    """
    if model.mode != MODE_CORRECTION:
        raise ValueError("residual_stats requires a correction-mode model")
    if len(dataset) == 0:
        raise ValueError("residual_stats needs a non-empty dataset")
    sums = np.zeros(2)
    sqs = np.zeros(2)
    count = 0
    for start in range(0, len(dataset), batch_size):
        chunk = dataset[start:start + batch_size]
        xa = Tensor(np.stack([c[0] for c in chunk]))
        xb = Tensor(np.stack([c[1] for c in chunk]))
        logits_a, tap_a = N.forward_with_taps(model.stream_a, xa, None)
        logits_b, tap_b = N.forward_with_taps(model.stream_b, xb, None)
        p_avg = average_fusion([T.softmax_channels(logits_a, None),
                                T.softmax_channels(logits_b, None)], None)
        c = model.corr.forward(T.concat_channels(tap_a, tap_b, None), None)
        av = p_avg.data.astype(np.float64)
        cv = c.data.astype(np.float64)
        sums += [av.sum(), cv.sum()]
        sqs += [(av ** 2).sum(), (cv ** 2).sum()]
        count += av.size
    m_avg, m_corr = sums / count
    s_avg = float(np.sqrt(max(sqs[0] / count - m_avg ** 2, 0.0)))
    s_corr = float(np.sqrt(max(sqs[1] / count - m_corr ** 2, 0.0)))
    return float(m_avg), s_avg, float(m_corr), s_corr


# ---------------------------------------------------------------------------
# fusion checkpoints: the stream checkpoint format, with both streams' (and
# the head's) parameters name-prefixed and a mode marker byte appended to the
# embedded config record.


def save_fusion(model: FusionModel, path):
    record = {
        "kind": "fusion",
        "stream_a": model.stream_a.config.to_dict(),
        "stream_b": model.stream_b.config.to_dict(),
    }
    if model.corr is not None:
        record["hidden"] = model.corr.hidden
    payload = json.dumps(record, sort_keys=True).encode("utf-8") + _MODE_BYTES[model.mode]
    params: dict[str, Tensor] = {}
    for prefix, group in (("a", model.stream_a.params), ("b", model.stream_b.params)):
        for name, p in group.items():
            params[f"{prefix}.{name}"] = p
    if model.corr is not None:
        for name, p in model.corr.params.items():
            params[f"corr.{name}"] = p
    with open(path, "wb") as f:
        N.write_checkpoint_record(f, payload, params)


def load_fusion(path) -> FusionModel:
    payload, params = N.read_checkpoint_record(path)
    mode = _BYTE_MODES.get(payload[-1:])
    if mode is None:
        raise CheckpointError("fusion checkpoint lacks a valid mode marker byte")
    record = json.loads(payload[:-1].decode("utf-8"))
    if record.get("kind") != "fusion":
        raise CheckpointError(f"not a fusion checkpoint: kind={record.get('kind')!r}")

    def split(prefix):
        return {k[len(prefix) + 1:]: v for k, v in params.items() if k.startswith(prefix + ".")}

    stream_a = Network(NetworkConfig.from_dict(record["stream_a"]), split("a"))
    stream_b = Network(NetworkConfig.from_dict(record["stream_b"]), split("b"))
    corr = None
    if mode == MODE_CORRECTION:
        cp = split("corr")
        corr = CorrectionNet(_tap_channels(stream_a.config) + _tap_channels(stream_b.config),
                             stream_a.config.num_classes, hidden=int(record["hidden"]))
        if set(cp) != set(corr.params):
            raise CheckpointError("correction parameters do not match the embedded config")
        corr.params = cp
    return FusionModel(stream_a, stream_b, mode, corr=corr)


def load_model(path):
    """Load either a stream or a fusion checkpoint, by the embedded kind."""
    payload, _ = N.read_checkpoint_record(path)
    try:
        record = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        record = None
    if record is not None and record.get("kind") == "stream":
        return N.load_checkpoint(path)
    return load_fusion(path)
