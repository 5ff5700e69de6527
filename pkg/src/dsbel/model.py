"""SB-BR-STM network: split-transform-merge blocks, channel boosting, fusion head.

Two mirrored stems (``main`` and ``aux``) each run three STM blocks.  A block
splits its input into four paths of ``s`` channels:

* boundary: 3x3 max-pool (stride 1, pad 1) -> 1x1 conv
* region:   3x3 avg-pool (stride 1, pad 1) -> 1x1 conv
* dilated-1: 3x3 conv, dilation 1, pad 1
* dilated-2: 3x3 conv, dilation 2, pad 2

Each path ends in ReLU; the paths are concatenated (``4*s`` channels) and
downsampled by a 2x2/2 max-pool.  The last two block outputs of both stems are
aligned on the final grid and concatenated (aux first), fused by a 1x1 conv
(block F) and classified by global-average-pool -> dropout -> dense -> softmax.

The aux stem is pretrained on a surrogate texture task and then frozen.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .ingestion import LabeledDataset
from .optim import SGD
from .tensor import (
    ConfigError, ConvSpec, DenseSpec, PoolSpec, Tensor, concat_channels, conv2d, dense, dropout,
    global_avg_pool, no_grad, pool2d, relu, softmax, softmax_xent,
)

log = logging.getLogger(__name__)

PATHS = ("boundary", "region", "dilated1", "dilated2")
STEMS = ("main", "aux")

_BOUNDARY_POOL = PoolSpec(3, 1, 1, "max")
_REGION_POOL = PoolSpec(3, 1, 1, "avg")
_DOWNSAMPLE = PoolSpec(2, 2, 0, "max")


@dataclass(frozen=True)
class STMBlockConfig:
    in_channels: int
    squeeze: int

    @property
    def merged(self) -> int:
        return 4 * self.squeeze

    def path_convs(self) -> dict:
        """Geometry of the four path convolutions (kernel, dilation, padding)."""
        return {
            "boundary": ((1, 1), 1, 0),
            "region": ((1, 1), 1, 0),
            "dilated1": ((3, 3), 1, 1),
            "dilated2": ((3, 3), 2, 2),
        }


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1
    side: int = 64
    stm_widths: tuple = (32, 64, 128)
    fusion_width: int = 512
    num_classes: int = 2
    dropout: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "stm_widths", tuple(int(w) for w in self.stm_widths))
        if len(self.stm_widths) != 3:
            raise ConfigError(f"exactly three STM blocks required, got widths {self.stm_widths}")
        if min(self.stm_widths) < 1 or self.fusion_width < 1 or self.in_channels < 1:
            raise ConfigError("widths must be positive")
        if self.side < 8:
            raise ConfigError("input side must be >= 8 to survive three 2x downsamplings")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")

    def blocks(self) -> list:
        out, c = [], self.in_channels
        for s in self.stm_widths:
            out.append(STMBlockConfig(c, s))
            c = 4 * s
        return out

    @property
    def merged_widths(self) -> list:
        return [b.merged for b in self.blocks()]

    @property
    def boosted_channels(self) -> int:
        """Block-F input: last two merged widths from each stem."""
        return 2 * sum(self.merged_widths[1:])

    def to_json(self) -> str:
        d = asdict(self)
        d["stm_widths"] = list(self.stm_widths)
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def parameter_count(config: ModelConfig) -> int:
    """Closed form: per block 2*(c*s + s) for the 1x1 paths and 2*(9*c*s + s) for the dilated ones."""
    per_stem = sum(20 * b.in_channels * b.squeeze + 4 * b.squeeze for b in config.blocks())
    fusion = config.boosted_channels * config.fusion_width + config.fusion_width
    head = config.fusion_width * config.num_classes + config.num_classes
    return 2 * per_stem + fusion + head


def _he_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Model:
    """Parameter store plus the forward pass.

    ``params`` is ordered; that order is the checkpoint traversal order.
    """

    def __init__(self, config: ModelConfig, convs: dict, head: DenseSpec, aux_frozen: bool = False):
        self.config = config
        self.convs = convs
        self.head = head
        self.aux_frozen = aux_frozen
        self.aux_pretrain_loss: list = []

    # -- parameters -------------------------------------------------------

    @property
    def params(self) -> dict:
        out = {}
        for name, spec in self.convs.items():
            out[f"{name}.weight"] = spec.weight
            out[f"{name}.bias"] = spec.bias
        out["head.weight"] = self.head.weight
        out["head.bias"] = self.head.bias
        return out

    @property
    def dtype(self):
        return self.head.weight.dtype

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def is_frozen(self, name: str) -> bool:
        return self.aux_frozen and name.startswith("aux.")

    def trainable(self) -> list:
        return [(n, t) for n, t in self.params.items() if not self.is_frozen(n)]

    def set_requires_grad(self):
        for name, t in self.params.items():
            t.requires_grad = not self.is_frozen(name)

    def freeze_aux(self):
        self.aux_frozen = True
        self.set_requires_grad()

    def stem_bytes(self, stem: str) -> bytes:
        return b"".join(t.data.tobytes() for n, t in self.params.items() if n.startswith(stem + "."))

    def astype(self, dtype) -> "Model":
        m = copy.deepcopy(self)
        for t in m.params.values():
            t.data = t.data.astype(dtype)
            t.grad = None
        return m

    def copy(self) -> "Model":
        return self.astype(self.dtype)

    # -- forward ----------------------------------------------------------

    def _check_input(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        c = self.config
        if x.data.ndim != 4 or x.shape[1:] != (c.in_channels, c.side, c.side):
            raise ConfigError(f"batch shape {x.shape} does not match (n, {c.in_channels}, {c.side}, {c.side})")
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype))
        return x

    def _stm_block(self, x: Tensor, prefix: str) -> Tensor:
        cv = self.convs
        paths = [
            relu(conv2d(pool2d(x, _BOUNDARY_POOL), cv[f"{prefix}.boundary"])),
            relu(conv2d(pool2d(x, _REGION_POOL), cv[f"{prefix}.region"])),
            relu(conv2d(x, cv[f"{prefix}.dilated1"])),
            relu(conv2d(x, cv[f"{prefix}.dilated2"])),
        ]
        return pool2d(concat_channels(paths), _DOWNSAMPLE)

    def stem(self, x: Tensor, stem: str) -> list:
        outs = []
        for k in range(len(self.config.stm_widths)):
            x = self._stm_block(x, f"{stem}.stm{k + 1}")
            outs.append(x)
        return outs

    def boosted(self, x: Tensor) -> Tensor:
        """Block-F activations: ReLU(1x1 conv of [aux2, aux3, main2, main3])."""
        if self.aux_frozen:
            with no_grad():
                aux = self.stem(x, "aux")
        else:
            aux = self.stem(x, "aux")
        main = self.stem(x, "main")
        parts = [pool2d(aux[1], _DOWNSAMPLE), aux[2], pool2d(main[1], _DOWNSAMPLE), main[2]]
        return relu(conv2d(concat_channels(parts), self.convs["fuse"]))

    def feature_tensor(self, x) -> Tensor:
        return global_avg_pool(self.boosted(self._check_input(x)))

    def forward(self, x, train: bool = False, rng: Optional[np.random.Generator] = None):
        """Return ``(logits, probabilities)``; dropout is active only when ``train``."""
        if not train:
            with no_grad():
                logits = dense(self.feature_tensor(x), self.head)
            return logits, softmax(logits.data)
        h = dropout(self.feature_tensor(x), self.config.dropout, rng, train=True)
        logits = dense(h, self.head)
        return logits, softmax(logits.data)

    def extract_features(self, x, batch_size: int = 32) -> np.ndarray:
        """Pre-head, inference-mode features: one ``fusion_width`` row per image."""
        x = np.asarray(x.data if isinstance(x, Tensor) else x)
        rows = []
        with no_grad():
            for lo in range(0, len(x), batch_size):
                rows.append(self.feature_tensor(x[lo:lo + batch_size]).data)
        if not rows:
            return np.zeros((0, self.config.fusion_width), dtype=self.dtype)
        return np.concatenate(rows)

    def predict_proba(self, x, batch_size: int = 32) -> np.ndarray:
        x = np.asarray(x)
        out = [self.forward(x[lo:lo + batch_size])[1] for lo in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.config.num_classes))


def build_model(config: ModelConfig, rng: Optional[np.random.Generator] = None,
                dtype=np.float32) -> Model:
    """He-uniform weights (bound sqrt(6/fan_in)), zero biases; seeded by ``config.seed``."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    convs = {}
    for stem in STEMS:
        for k, blk in enumerate(config.blocks(), start=1):
            for path, (kernel, dil, pad) in blk.path_convs().items():
                shape = (blk.squeeze, blk.in_channels) + kernel
                fan_in = blk.in_channels * kernel[0] * kernel[1]
                name = f"{stem}.stm{k}.{path}"
                convs[name] = ConvSpec(
                    blk.in_channels, blk.squeeze, kernel, 1, dil, pad,
                    weight=Tensor(_he_uniform(rng, shape, fan_in, dtype), requires_grad=True, name=name),
                    bias=Tensor(np.zeros(blk.squeeze, dtype), requires_grad=True),
                )
    cin, cout = config.boosted_channels, config.fusion_width
    convs["fuse"] = ConvSpec(
        cin, cout, (1, 1),
        weight=Tensor(_he_uniform(rng, (cout, cin, 1, 1), cin, dtype), requires_grad=True, name="fuse"),
        bias=Tensor(np.zeros(cout, dtype), requires_grad=True),
    )
    head = DenseSpec(
        cout, config.num_classes,
        weight=Tensor(_he_uniform(rng, (cout, config.num_classes), cout, dtype), requires_grad=True, name="head"),
        bias=Tensor(np.zeros(config.num_classes, dtype), requires_grad=True),
    )
    return Model(config, convs, head)


def images_to_input(pixels: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 ``(n, h, w)`` -> ``(n, 1, h, w)`` scaled to [0, 1]."""
    return (pixels.astype(dtype) / np.dtype(dtype).type(255.0))[:, None]


def pretrain_auxiliary(model: Model, surrogate: LabeledDataset, epochs: int, *, lr: float = 1e-3,
                       momentum: float = 0.95, batch_size: int = 16, seed: int = 0) -> Model:
    """Train the aux stem on ``surrogate`` through a throwaway linear head, then freeze it.

    The main stem, fusion conv and classification head are untouched.  Per-epoch
    mean surrogate losses are left in ``model.aux_pretrain_loss``.
    """
    if len(surrogate) == 0:
        raise ConfigError("surrogate dataset is empty")
    cfg = model.config
    rng = np.random.default_rng(seed)
    n_classes = max(2, int(surrogate.labels.max()) + 1)
    width = cfg.merged_widths[-1]
    temp_head = DenseSpec(
        width, n_classes,
        weight=Tensor(_he_uniform(rng, (width, n_classes), width, model.dtype), requires_grad=True),
        bias=Tensor(np.zeros(n_classes, model.dtype), requires_grad=True),
    )
    aux_params = [t for n, t in model.params.items() if n.startswith("aux.")]
    for t in aux_params:
        t.requires_grad = True
    opt = SGD(aux_params + [temp_head.weight, temp_head.bias], lr=lr, momentum=momentum)

    pixels = surrogate.to_batch(cfg.side)
    labels = surrogate.labels
    model.aux_pretrain_loss = []
    for epoch in range(epochs):
        order = rng.permutation(len(surrogate))
        total = 0.0
        for lo in range(0, len(order), batch_size):
            idx = order[lo:lo + batch_size]
            x = Tensor(images_to_input(pixels[idx], model.dtype))
            feats = global_avg_pool(model.stem(x, "aux")[-1])
            _, loss = softmax_xent(dense(feats, temp_head), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.data) * len(idx)
        model.aux_pretrain_loss.append(total / len(order))
        log.info("aux pretrain epoch %d: loss %.4f", epoch + 1, model.aux_pretrain_loss[-1])
    for t in aux_params:
        t.grad = None
    model.freeze_aux()
    return model
