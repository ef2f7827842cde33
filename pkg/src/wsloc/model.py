"""Multiscale residual CNN producing a per-sample class map, trained from
record-level label sets through an aggregation layer.
"""

from __future__ import annotations

import copy
import hashlib
import io
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nn
from .aggregation import AggregationSpec, aggregate, aggregate_backward

log = logging.getLogger(__name__)

FORMAT_MAGIC = "WSLOC-MODEL"
FORMAT_VERSION = 1
# the class projection starts small so an untrained map is close to uniform
CLASSIFIER_INIT_SCALE = 0.03


@dataclass
class ModelConfig:
    depth: int = 7
    classes: int = 2
    channels: int = 1
    filters: int = 32
    kernel: int = 32
    dropout: float = 0.25
    head_filters: int = 32
    aggregation: AggregationSpec = field(default_factory=AggregationSpec)
    seed: int = 0
    dtype: str = "float32"
    labels: tuple = ()

    def __post_init__(self):
        if isinstance(self.aggregation, str):
            self.aggregation = AggregationSpec.parse(self.aggregation)
        self.labels = tuple(self.labels)
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if self.filters < 1 or self.kernel < 1 or self.head_filters < 1 or self.channels < 1:
            raise ValueError("filters, kernel, head_filters and channels must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.labels and len(self.labels) != self.classes:
            raise ValueError("labels must have one entry per class")


class ResidualBlock:
    """Two convolutions with a residual add, then max pooling by 2.

    Type 1: conv, BN, ReLU, dropout, conv.
    Type 2: (BN, ReLU, dropout, conv) twice.
    A 1x1 convolution projects the skip path when channel counts differ.
    """

    def __init__(self, kind, in_ch, cfg: ModelConfig, rng, dtype):
        f, K, rate = cfg.filters, cfg.kernel, cfg.dropout
        if kind == 1:
            self.main = nn.Sequential(
                nn.Conv1D(in_ch, f, K, rng, dtype), nn.BatchNorm(f, dtype), nn.ReLU(),
                nn.Dropout(rate), nn.Conv1D(f, f, K, rng, dtype),
            )
        else:
            self.main = nn.Sequential(
                nn.BatchNorm(in_ch, dtype), nn.ReLU(), nn.Dropout(rate), nn.Conv1D(in_ch, f, K, rng, dtype),
                nn.BatchNorm(f, dtype), nn.ReLU(), nn.Dropout(rate), nn.Conv1D(f, f, K, rng, dtype),
            )
        self.proj = nn.Conv1D(in_ch, f, 1, rng, dtype) if in_ch != f else None

    def layers(self):
        out = [(f"main.{i}", layer) for i, layer in enumerate(self.main.layers)]
        if self.proj is not None:
            out.append(("proj", self.proj))
        return out

    def forward(self, x, train, rng):
        h = self.main.forward(x, train, rng)
        skip = self.proj.forward(x, train, rng) if self.proj is not None else x
        y, self._sel = nn.maxpool2_forward(h + skip)
        return y

    def backward(self, dy):
        dsum = nn.maxpool2_backward(dy, self._sel)
        dx = self.main.backward(dsum)
        dx += self.proj.backward(dsum) if self.proj is not None else dsum
        return dx


class Model:
    def __init__(self, config: ModelConfig):
        self.config = config
        dtype = np.dtype(config.dtype)
        self.dtype = dtype
        rng = np.random.default_rng(config.seed)
        self.blocks = [
            ResidualBlock(1 if i == 0 else 2, config.channels if i == 0 else config.filters, config, rng, dtype)
            for i in range(config.depth)
        ]
        width = config.depth * config.filters
        self.head = nn.Sequential(
            nn.Conv1D(width, config.head_filters, 1, rng, dtype), nn.ReLU(),
            nn.Conv1D(config.head_filters, config.classes, 1, rng, dtype, CLASSIFIER_INIT_SCALE),
        )
        self.dropout_rng = np.random.default_rng([config.seed, 1])
        self._named = []
        for b, block in enumerate(self.blocks):
            self._named += [(f"block{b + 1}.{name}", layer) for name, layer in block.layers()]
        self._named += [(f"head.{i}", layer) for i, layer in enumerate(self.head.layers)]

    # -- parameter access -------------------------------------------------

    def params(self) -> dict[str, np.ndarray]:
        return {f"{p}.{k}": v for p, layer in self._named for k, v in layer.params.items()}

    def grads(self) -> dict[str, np.ndarray]:
        return {f"{p}.{k}": v for p, layer in self._named for k, v in layer.grads.items()}

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{p}.{k}": v for p, layer in self._named for k, v in layer.buffers.items()}

    def state(self) -> dict[str, np.ndarray]:
        """Parameters and running statistics in a fixed order."""
        out = {}
        for p, layer in self._named:
            for k, v in layer.params.items():
                out[f"{p}.{k}"] = v
            for k, v in layer.buffers.items():
                out[f"{p}.{k}"] = v
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state().items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in self.state().items():
            v[...] = snap[k]

    def zero_grad(self):
        for _, layer in self._named:
            layer.zero_grad()

    def weight_hash(self) -> str:
        h = hashlib.sha256()
        for k, v in self.state().items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()

    @property
    def feature_width(self) -> int:
        return self.config.depth * self.config.filters

    def parameter_count(self) -> int:
        return sum(v.size for v in self.params().values())

    # -- forward / backward -------------------------------------------------

    def forward(self, x, train: bool = False) -> np.ndarray:
        """(B, n, c) signals -> (B, n, m) row-stochastic local prediction maps."""
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 2:
            x = x[None]
        B, n, c = x.shape
        if n == 0:
            raise nn.ShapeError("input has zero length")
        if c != self.config.channels:
            raise nn.ShapeError(f"model expects {self.config.channels} channels, got {c}")
        unit = 2 ** self.config.depth
        pad = (-n) % unit
        if pad:
            x = np.pad(x, ((0, 0), (pad, 0), (0, 0)))
        rng = self.dropout_rng
        feats = []
        h = x
        for i, block in enumerate(self.blocks):
            h = block.forward(h, train, rng)
            feats.append(nn.upsample_repeat(h, 2 ** (i + 1)))
        z = nn.concat_channels(feats)
        probs = nn.softmax_channels(self.head.forward(z, train, rng))
        self._cache = (pad, probs)
        return probs[:, pad:, :]

    def backward(self, dprobs) -> None:
        """Accumulate parameter gradients given dLoss/dMap for the last forward."""
        pad, probs = self._cache
        full = np.zeros_like(probs)
        full[:, pad:, :] = dprobs
        dz = self.head.backward(nn.softmax_backward(full, probs))
        parts = nn.concat_channels_backward(dz, [self.config.filters] * self.config.depth)
        carry = None
        for i in reversed(range(self.config.depth)):
            d = nn.upsample_repeat_backward(parts[i], 2 ** (i + 1))
            if carry is not None:
                d = d + carry
            carry = self.blocks[i].backward(d)
        self._cache = None


def build_model(config: ModelConfig) -> Model:
    return Model(config)


def forward_local(model: Model, signal, mode: str = "infer") -> np.ndarray:
    """Local prediction map for one signal (n, c) -> (n, m), or a batch."""
    x = np.asarray(signal)
    single = x.ndim <= 2
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[-2] == 0:
        raise nn.ShapeError("input has zero length")
    out = model.forward(x, train=(mode == "train"))
    return out[0] if single else out


# ---------------------------------------------------------------------------
# loss and training
# ---------------------------------------------------------------------------


def batch_loss(model: Model, x, targets, masks=None, train: bool = True, backward: bool = True):
    """Mean record loss over a batch; accumulates gradients when ``backward``."""
    spec = model.config.aggregation
    maps = model.forward(x, train=train)
    B = maps.shape[0]
    masks = masks if masks is not None else [None] * B
    total = 0.0
    dmaps = np.zeros_like(maps) if backward else None
    for b in range(B):
        S = aggregate(maps[b], spec, masks[b], training=train)
        loss, dS = nn.bce_loss(S.astype(np.float64), targets[b])
        total += loss
        if backward:
            dmaps[b] = aggregate_backward(maps[b], spec, (dS / B).astype(maps.dtype), masks[b], training=train)
    if backward:
        model.backward(dmaps)
    return total / B


@dataclass
class TrainParams:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    patience: int = 10
    batch_size: int = 32
    max_epochs: int = 100
    seed: int = 0


@dataclass
class TrainResult:
    model: Model
    history: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0


def _batches(n, size, rng):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    return [order[i : i + size] for i in range(0, n, size)]


def dataset_arrays(segments, labels: Sequence[str], masked: bool):
    """Stack segment signals, multi-hot targets and peak masks."""
    index = {lab: i for i, lab in enumerate(labels)}
    x = np.stack([s.signal for s in segments])
    t = np.zeros((len(segments), len(labels)))
    for i, s in enumerate(segments):
        for lab in s.label_set:
            t[i, index[lab]] = 1.0
    masks = [np.asarray(s.peaks(), dtype=np.intp) for s in segments] if masked else [None] * len(segments)
    return x, t, masks


def evaluate_loss(model: Model, segments, labels, batch_size: int = 64) -> float:
    if not segments:
        return float("nan")
    x, t, masks = dataset_arrays(segments, labels, model.config.aggregation.masked)
    total = 0.0
    for i in range(0, len(segments), batch_size):
        sl = slice(i, i + batch_size)
        total += batch_loss(model, x[sl], t[sl], masks[sl], train=False, backward=False) * len(t[sl])
    return total / len(segments)


def train(
    model: Model,
    train_segments,
    val_segments,
    params: TrainParams | None = None,
    labels: Sequence[str] | None = None,
    val_loss_fn: Callable[[Model, int], float] | None = None,
    on_epoch_end: Callable[[int, Model], None] | None = None,
) -> TrainResult:
    """Adam on the aggregated BCE loss with early stopping on validation loss.

    Stops once ``patience`` epochs pass without a new best validation loss
    and restores the best weights. ``val_loss_fn(model, epoch)`` replaces the
    built-in validation pass when given.
    """
    params = params or TrainParams()
    labels = list(labels or model.config.labels)
    if not train_segments:
        raise ValueError("empty training set")
    lengths = {s.length for s in train_segments}
    if len(lengths) != 1:
        raise ValueError(f"training segments must share one length, got {sorted(lengths)}")
    masked = model.config.aggregation.masked
    x, t, masks = dataset_arrays(train_segments, labels, masked)
    if masked and any(len(m) == 0 for m in masks):
        raise ValueError("masked aggregation needs R peaks in every training segment")

    opt = nn.Adam(params.lr, params.beta1, params.beta2)
    rng = np.random.default_rng([params.seed, 2])
    result = TrainResult(model)
    best, best_snap, since = math.inf, model.snapshot(), 0
    for epoch in range(1, params.max_epochs + 1):
        losses = []
        for idx in _batches(len(t), params.batch_size, rng):
            model.zero_grad()
            losses.append(batch_loss(model, x[idx], t[idx], [masks[i] for i in idx]) * len(idx))
            opt.step(model.params(), model.grads())
        train_loss = sum(losses) / len(t)
        if val_loss_fn is not None:
            val_loss = float(val_loss_fn(model, epoch))
        elif val_segments:
            val_loss = evaluate_loss(model, val_segments, labels)
        else:
            val_loss = train_loss
        result.history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        log.info("epoch %d train %.4f val %.4f", epoch, train_loss, val_loss)
        if on_epoch_end is not None:
            on_epoch_end(epoch, model)
        if val_loss < best:
            best, best_snap, since = val_loss, model.snapshot(), 0
            result.best_epoch = epoch
        else:
            since += 1
        result.stopped_epoch = epoch
        if since >= params.patience:
            break
    model.restore(best_snap)
    return result


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------


def predict_maps(model: Model, signals, batch_size: int = 64) -> list[np.ndarray]:
    """Maps for a list of (n, c) signals; equal lengths are batched together."""
    out: list = [None] * len(signals)
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(signals):
        by_len.setdefault(len(s), []).append(i)
    for idx in by_len.values():
        for j in range(0, len(idx), batch_size):
            chunk = idx[j : j + batch_size]
            maps = model.forward(np.stack([np.asarray(signals[i]).reshape(len(signals[i]), -1) for i in chunk]))
            for i, m in zip(chunk, maps):
                out[i] = m
    return out


def predict_beats(D, mask) -> list[tuple[int, int]]:
    """(position, class index) at every R peak; ties go to the lower index."""
    rows = np.asarray(mask, dtype=np.intp)
    return [(int(p), int(np.argmax(D[p]))) for p in rows]


def predict_record(score, threshold: float = 0.5) -> list[int]:
    return [i for i, s in enumerate(np.asarray(score)) if s >= threshold]


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def _config_line(cfg: ModelConfig) -> str:
    d = asdict(cfg)
    d["aggregation"] = cfg.aggregation.kind
    d["lse_r"] = cfg.aggregation.r
    d["labels"] = ",".join(cfg.labels)
    return " ".join(f"{k}={v}" for k, v in d.items())


def _parse_config_line(text: str) -> ModelConfig:
    d = dict(item.split("=", 1) for item in text.split())
    return ModelConfig(
        depth=int(d["depth"]), classes=int(d["classes"]), channels=int(d["channels"]),
        filters=int(d["filters"]), kernel=int(d["kernel"]), dropout=float(d["dropout"]),
        head_filters=int(d["head_filters"]),
        aggregation=AggregationSpec(d["aggregation"], float(d["lse_r"])),
        seed=int(d["seed"]), dtype=d["dtype"],
        labels=tuple(x for x in d.get("labels", "").split(",") if x),
    )


def save_model(model: Model, path) -> None:
    """Text manifest then little-endian float32 arrays in manifest order."""
    state = model.state()
    lines = [FORMAT_MAGIC, f"version {FORMAT_VERSION}", f"config {_config_line(model.config)}",
             f"seed {model.config.seed}"]
    for name, arr in state.items():
        lines.append(f"array {name} {'x'.join(map(str, arr.shape))}")
    lines.append("end")
    buf = io.BytesIO()
    buf.write(("\n".join(lines) + "\n").encode())
    for arr in state.values():
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


class ModelFormatError(ValueError):
    pass


def load_model(path) -> Model:
    data = Path(path).read_bytes()
    marker = b"\nend\n"
    cut = data.find(marker)
    if cut < 0:
        raise ModelFormatError("model manifest not terminated")
    head = data[:cut].decode().splitlines()
    body = data[cut + len(marker):]
    if not head or head[0] != FORMAT_MAGIC:
        raise ModelFormatError("not a model file")
    fields = dict(line.split(" ", 1) for line in head[1:] if not line.startswith("array "))
    if int(fields.get("version", -1)) != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {fields.get('version')}")
    model = Model(_parse_config_line(fields["config"]))
    state = model.state()
    arrays = [line.split()[1:] for line in head if line.startswith("array ")]
    if [a[0] for a in arrays] != list(state):
        raise ModelFormatError("layer list does not match the configured architecture")
    offset = 0
    for (name, shape_text), target in zip(arrays, state.values()):
        shape = tuple(int(s) for s in shape_text.split("x")) if shape_text else ()
        if shape != target.shape:
            raise ModelFormatError(f"shape mismatch for {name}: file {shape}, model {target.shape}")
        count = int(np.prod(shape))
        chunk = np.frombuffer(body, dtype="<f4", count=count, offset=offset)
        target[...] = chunk.reshape(shape)
        offset += 4 * count
    if offset != len(body):
        raise ModelFormatError("trailing or missing array data")
    return model


def clone(model: Model) -> Model:
    return copy.deepcopy(model)


def with_aggregation(config: ModelConfig, spec: AggregationSpec) -> ModelConfig:
    return replace(config, aggregation=spec)
