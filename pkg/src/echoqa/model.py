"""Four-stream CNN + LSTM quality regressor.

Each stream maps a clip ``[T, C, H, W]`` to one score in (0, 1):

    per frame: (conv3x3 -> batchnorm -> relu -> [maxpool 2x2] -> dropout) x L
    flatten each frame, run the T-step sequence through an LSTM,
    final hidden state -> (dense -> batchnorm -> relu -> dropout) x D
    -> dense(1) -> sigmoid

Streams share only the input.  Output order is fixed to ATTRIBUTES.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ATTRIBUTES
from .layers import LSTM, BatchNorm, Conv2d, Dense, Dropout, MaxPool2x2, ReLU, Sigmoid
from .tensor import SeededRng, read_tensor, write_tensor

CHECKPOINT_MAGIC = b"QANETCK\x00"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class InputSpec:
    frames: int = 3
    channels: int = 1
    height: int = 64
    width: int = 64

    def __post_init__(self):
        if min(self.frames, self.channels, self.height, self.width) < 1:
            raise ValueError(f"invalid input spec {self}")

    @property
    def clip_shape(self):
        return (self.frames, self.channels, self.height, self.width)


@dataclass(frozen=True)
class StreamConfig:
    attribute: str
    conv_channel_plan: tuple = (32, 32, 32, 64)
    pool_plan: tuple = (True, True, False, True)
    lstm_hidden: int = 32
    dense_plan: tuple = (64, 16)
    dropout_p: float = 0.5
    # std multiplier for weights that feed a batch norm; the norm makes the
    # output scale-free, so a small init raises the effective step size
    init_scale: float = 0.03

    def __post_init__(self):
        object.__setattr__(self, "conv_channel_plan", tuple(int(c) for c in self.conv_channel_plan))
        object.__setattr__(self, "pool_plan", tuple(bool(p) for p in self.pool_plan))
        object.__setattr__(self, "dense_plan", tuple(int(d) for d in self.dense_plan))
        if self.attribute not in ATTRIBUTES:
            raise ValueError(f"unknown attribute {self.attribute!r}")
        if len(self.pool_plan) != len(self.conv_channel_plan) or not self.conv_channel_plan:
            raise ValueError("pool_plan needs one entry per conv layer")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must lie in [0, 1)")
        if self.lstm_hidden < 1:
            raise ValueError("lstm_hidden must be positive")
        if not self.init_scale > 0:
            raise ValueError("init_scale must be positive")


def default_stream_configs(lstm_hidden=32, dense_plan=(64, 16), dropout_p=0.5, init_scale=0.03):
    """The published layout: 4 conv layers (32,32,32,64), no pooling after the
    third; the clarity stream has 3 conv layers (32,32,64) pooling after the
    first and third."""
    out = []
    for attr in ATTRIBUTES:
        if attr == "clarity":
            plan, pools = (32, 32, 64), (True, False, True)
        else:
            plan, pools = (32, 32, 32, 64), (True, True, False, True)
        out.append(StreamConfig(attr, plan, pools, lstm_hidden, tuple(dense_plan), dropout_p, init_scale))
    return out


def size_chain(config: StreamConfig, height: int, width: int):
    """Spatial sizes after every conv and pool stage, input first."""
    chain = [(height, width)]
    h, w = height, width
    for pool in config.pool_plan:
        h, w = h - 2, w - 2
        chain.append((h, w))
        if pool:
            h, w = h // 2, w // 2
            chain.append((h, w))
    return chain


@dataclass
class QualityScores:
    visibility: float
    clarity: float
    depth_gain: float
    foreshortening: float
    aggregate: float = field(default=None)

    def __post_init__(self):
        if self.aggregate is None:
            self.aggregate = aggregate_score(self.as_tuple())

    def as_tuple(self):
        return (self.visibility, self.clarity, self.depth_gain, self.foreshortening)

    @classmethod
    def from_array(cls, values, weights=None):
        vals = [float(v) for v in values]
        return cls(*vals, aggregate=aggregate_score(vals, weights))


def aggregate_score(values, weights=None) -> float:
    vals = np.asarray(values, dtype=np.float64)
    if weights is None:
        return float(vals.mean())
    w = np.asarray(weights, dtype=np.float64)
    return float((vals * w).sum() / w.sum())


class Stream:
    def __init__(self, config: StreamConfig, spec: InputSpec, rng: SeededRng, dtype=np.float32):
        self.config = config
        self.spec = spec
        self.chain = size_chain(config, spec.height, spec.width)
        h, w = self.chain[-1]
        if h < 1 or w < 1:
            raise ValueError(
                f"input {spec.height}x{spec.width} too small for the {config.attribute} conv/pool plan")
        self.blocks = []
        cin = spec.channels
        for i, (cout, pool) in enumerate(zip(config.conv_channel_plan, config.pool_plan)):
            conv = Conv2d(cin, cout, 3, rng=rng.child(i), dtype=dtype, scale=config.init_scale)
            if i == 0:
                conv.need_input_grad = False
            block = [conv, BatchNorm(cout, dtype=dtype), ReLU()]
            if pool:
                block.append(MaxPool2x2())
            block.append(Dropout(config.dropout_p))
            self.blocks.append(block)
            cin = cout
        self.flatten_size = cin * h * w
        k = len(self.blocks)
        self.lstm = LSTM(self.flatten_size, config.lstm_hidden, rng=rng.child(k), dtype=dtype)
        self.head = []
        width_in = config.lstm_hidden
        for j, width_out in enumerate(config.dense_plan):
            self.head += [Dense(width_in, width_out, rng=rng.child(k + 1 + j), dtype=dtype,
                                gain=2.0 * config.init_scale ** 2),
                          BatchNorm(width_out, dtype=dtype), ReLU(), Dropout(config.dropout_p)]
            width_in = width_out
        self.out = Dense(width_in, 1, rng=rng.child(k + 1 + len(config.dense_plan)), dtype=dtype, gain=1.0)
        self.sigmoid = Sigmoid()

    def layers(self):
        for block in self.blocks:
            yield from block
        yield self.lstm
        yield from self.head
        yield self.out
        yield self.sigmoid

    def named_layers(self):
        for i, block in enumerate(self.blocks):
            for j, layer in enumerate(block):
                yield f"conv{i}.{j}.{type(layer).__name__.lower()}", layer
        yield "lstm", self.lstm
        for j, layer in enumerate(self.head):
            yield f"head{j}.{type(layer).__name__.lower()}", layer
        yield "out.dense", self.out

    def conv_features(self, frames, train=False, rng=None, stop_after=None):
        """frames: [N, H, W, C] channels-last."""
        x = frames
        for i, block in enumerate(self.blocks):
            for j, layer in enumerate(block):
                x = layer.forward(x, train, rng.child(i) if rng is not None else None)
                if stop_after == i and isinstance(layer, ReLU):
                    return x
        return x

    def logits(self, frames, batch, steps, train=False, rng=None):
        feats = self.conv_features(frames, train, rng)
        seq = np.ascontiguousarray(feats.reshape(batch, steps, -1).transpose(1, 0, 2))
        h = self.lstm.forward(seq, train)
        for j, layer in enumerate(self.head):
            h = layer.forward(h, train, rng.child(100 + j) if rng is not None else None)
        return self.out.forward(h, train)[:, 0]

    def forward(self, frames, batch, steps, train=False, rng=None):
        return self.sigmoid.forward(self.logits(frames, batch, steps, train, rng))

    def backward(self, dscore):
        g = self.sigmoid.backward(dscore)[:, None]
        g = self.out.backward(g)
        for layer in reversed(self.head):
            g = layer.backward(g)
        g = self.lstm.backward(g)  # [T, B, F]
        T, B, _ = g.shape
        g = np.ascontiguousarray(g.transpose(1, 0, 2)).reshape((B * T,) + self._final_shape())
        for block in reversed(self.blocks):
            for layer in reversed(block):
                g = layer.backward(g)
                if g is None:
                    break

    def _final_shape(self):
        h, w = self.chain[-1]
        return (h, w, self.config.conv_channel_plan[-1])


class QaNetModel:
    def __init__(self, spec: InputSpec, configs: Sequence[StreamConfig], rng: SeededRng,
                 dtype=np.float32, aggregate_weights=None):
        attrs = [c.attribute for c in configs]
        if tuple(attrs) != ATTRIBUTES:
            raise ValueError(f"need one stream per attribute in order {ATTRIBUTES}, got {attrs}")
        self.spec = spec
        self.configs = list(configs)
        self.dtype = np.dtype(dtype)
        self.aggregate_weights = None if aggregate_weights is None else tuple(aggregate_weights)
        self.streams = [Stream(c, spec, rng.child(i), dtype=self.dtype) for i, c in enumerate(configs)]

    @property
    def flatten_sizes(self):
        return {s.config.attribute: s.flatten_size for s in self.streams}

    def _frames(self, clips):
        clips = np.asarray(clips)
        if clips.ndim != 5 or clips.shape[1:] != self.spec.clip_shape:
            raise ValueError(f"expected clips [B, {', '.join(map(str, self.spec.clip_shape))}], got {clips.shape}")
        B, T = clips.shape[:2]
        frames = clips.reshape((B * T,) + clips.shape[2:]).astype(self.dtype, copy=False)
        return np.ascontiguousarray(frames.transpose(0, 2, 3, 1)), B, T

    def forward(self, clips, train=False, rng: SeededRng | None = None, parallel=False):
        """clips [B, T, C, H, W] -> scores [B, 4]."""
        frames, B, T = self._frames(clips)
        if train and rng is None:
            raise ValueError("training forward needs an rng")

        def run(i):
            r = rng.child(i) if rng is not None else None
            return self.streams[i].forward(frames, B, T, train, r)

        if parallel:
            with ThreadPoolExecutor(len(self.streams)) as pool:
                cols = list(pool.map(run, range(len(self.streams))))
        else:
            cols = [run(i) for i in range(len(self.streams))]
        return np.stack(cols, axis=1)

    def backward(self, dscores):
        for i, s in enumerate(self.streams):
            s.backward(np.ascontiguousarray(dscores[:, i]))

    def named_parameters(self):
        for s in self.streams:
            for lname, layer in s.named_layers():
                for pname, arr in layer.params.items():
                    yield f"{s.config.attribute}.{lname}.{pname}", arr

    def named_gradients(self):
        for s in self.streams:
            for lname, layer in s.named_layers():
                for pname in layer.params:
                    yield f"{s.config.attribute}.{lname}.{pname}", layer.grads.get(pname)

    def named_buffers(self):
        for s in self.streams:
            for lname, layer in s.named_layers():
                for bname, arr in layer.buffers().items():
                    yield f"{s.config.attribute}.{lname}.{bname}", arr

    def state(self):
        return dict(self.named_parameters()) | dict(self.named_buffers())


def build_model(spec: InputSpec | None = None, configs=None, rng: SeededRng | None = None,
                dtype=np.float32, zero_head=False, aggregate_weights=None) -> QaNetModel:
    spec = spec or InputSpec()
    configs = configs if configs is not None else default_stream_configs()
    rng = rng if rng is not None else SeededRng(0)
    model = QaNetModel(spec, configs, rng, dtype=dtype, aggregate_weights=aggregate_weights)
    if zero_head:
        for s in model.streams:
            s.out.params["weights"][...] = 0
            s.out.params["bias"][...] = 0
    return model


def forward_clip(model: QaNetModel, clip, parallel=False) -> QualityScores:
    clip = np.asarray(clip)
    if clip.ndim != 4 or clip.shape[0] < 1:
        raise ValueError(f"expected a clip [T, C, H, W] with T >= 1, got {clip.shape}")
    scores = model.forward(clip[None], parallel=parallel)[0]
    return QualityScores.from_array(scores, model.aggregate_weights)


def forward_batch(model: QaNetModel, clips, parallel=False) -> list[QualityScores]:
    if isinstance(clips, (list, tuple)):
        shapes = {np.shape(c) for c in clips}
        if len(shapes) > 1:
            raise ValueError(f"ragged clip shapes: {sorted(shapes)}")
        clips = np.stack(clips) if clips else np.zeros((0,) + model.spec.clip_shape)
    scores = model.forward(clips, parallel=parallel)
    return [QualityScores.from_array(row, model.aggregate_weights) for row in scores]


def dump_feature_maps(model: QaNetModel, clip, stream, layer_index):
    """Post-ReLU feature map of conv layer ``layer_index`` as [T, C, H', W']."""
    if isinstance(stream, str):
        if stream not in ATTRIBUTES:
            raise IndexError(f"unknown stream {stream!r}")
        stream = ATTRIBUTES.index(stream)
    if not 0 <= stream < len(model.streams):
        raise IndexError(f"stream index {stream} out of range")
    s = model.streams[stream]
    if not 0 <= layer_index < len(s.blocks):
        raise IndexError(f"layer index {layer_index} out of range for {len(s.blocks)} conv layers")
    frames, _, _ = model._frames(np.asarray(clip)[None])
    fmap = s.conv_features(frames, train=False, stop_after=layer_index)
    return np.ascontiguousarray(fmap.transpose(0, 3, 1, 2))


# checkpoint: magic, u32 version, u32 manifest length, JSON manifest, then
# tensors (tensor binary format) in manifest["tensors"] order

def _manifest(model: QaNetModel):
    return {
        "format_version": CHECKPOINT_VERSION,
        "dtype": model.dtype.name,
        "input_spec": asdict(model.spec),
        "streams": [dict(asdict(c), conv_channel_plan=list(c.conv_channel_plan),
                         pool_plan=list(c.pool_plan), dense_plan=list(c.dense_plan))
                    for c in model.configs],
        "aggregate_weights": None if model.aggregate_weights is None else list(model.aggregate_weights),
        "tensors": [name for name in model.state()],
    }


def checkpoint_bytes(model: QaNetModel) -> bytes:
    buf = io.BytesIO()
    manifest = json.dumps(_manifest(model), sort_keys=True, separators=(",", ":")).encode()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(manifest)))
    buf.write(manifest)
    for arr in model.state().values():
        write_tensor(buf, arr)
    return buf.getvalue()


def save_checkpoint(model: QaNetModel, path) -> str:
    data = checkpoint_bytes(model)
    Path(path).write_bytes(data)
    return checkpoint_id(data)


def checkpoint_id(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()[:16]


def load_checkpoint(path) -> QaNetModel:
    with open(path, "rb") as f:
        if f.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a QA-Net checkpoint")
        version, n = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        manifest = json.loads(f.read(n))
        spec = InputSpec(**manifest["input_spec"])
        configs = [StreamConfig(**c) for c in manifest["streams"]]
        model = QaNetModel(spec, configs, SeededRng(0), dtype=manifest["dtype"],
                           aggregate_weights=manifest["aggregate_weights"])
        state = model.state()
        for name in manifest["tensors"]:
            arr = read_tensor(f, manifest["dtype"])
            if name not in state or state[name].shape != arr.shape:
                raise ValueError(f"{path}: tensor {name} does not match the model layout")
            state[name][...] = arr
        if f.read(1):
            raise ValueError(f"{path}: trailing bytes after tensors")
    return model
