"""The desk-scale encoder/decoder segmentation network.

Every encoder stage is two residual conv blocks followed by a sequence block
over the flattened feature map; stride-2 convs downsample between stages.
The decoder mirrors it with stride-2 transposed convs, channel-concat skip
connections, a 1x1 reduction, and one residual block per stage, ending in a
1x1 conv + softmax head.  All parameters live in a flat named ParamSet so the
optimizers and the checkpoint format stay trivial.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor
from .blocks import (
    ConvUnit,
    MambaBlockParams,
    ResidualBlockParams,
    SsmParams,
    conv1x1,
    mamba_block,
    residual_block,
)
from .kernels import conv2d, conv_transpose2d
from .losses import (
    LossConfig,
    UncertaintyWeights,
    ce_value,
    component_loss,
    dice_value,
    focal_value,
    uncertainty_aware_loss,
)
from .optim import ParamSet, SamConfig, evaluate_loss_and_grads, sam_step, sgd_step

UNCERTAINTY_PARAM = "uncertainty.log_var"


class TrainingError(Exception):
    pass


@dataclass
class ModelConfig:
    in_channels: int = 1
    classes: int = 4
    stages: int = 3
    base_width: int = 16
    d_state: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.stages < 2:
            raise ValueError(f"need at least 2 stages, got {self.stages}")
        if self.classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.classes}")
        if self.base_width < 1 or self.in_channels < 1 or self.d_state < 1:
            raise ValueError("widths and channel counts must be positive")

    @property
    def widths(self) -> list[int]:
        return [self.base_width * (1 << i) for i in range(self.stages)]

    @property
    def spatial_divisor(self) -> int:
        return 1 << (self.stages - 1)


@dataclass
class SegModel:
    cfg: ModelConfig
    params: ParamSet


# -- initialization ----------------------------------------------------------

A_INIT_SCALE = 0.9   # keeps the scan contractive over long sequences
A_INIT_NOISE = 0.01


def _init_params(cfg: ModelConfig) -> ParamSet:
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    out: dict[str, np.ndarray] = {}

    def conv_w(name, kh, kw, cin, cout):
        # He fan-in scaling
        std = np.sqrt(2.0 / (kh * kw * cin))
        out[name + ".w"] = rng.normal(0.0, std, (kh, kw, cin, cout))
        out[name + ".b"] = np.zeros(cout)

    def norm(name, c):
        out[name + ".gamma"] = np.ones(c)
        out[name + ".beta"] = np.zeros(c)

    def linear(name, cin, cout):
        out[name + ".w"] = rng.normal(0.0, np.sqrt(1.0 / cin), (cin, cout))
        out[name + ".b"] = np.zeros(cout)

    def res_block(name, cin, cout):
        conv_w(name + ".conv1", 3, 3, cin, cout)
        norm(name + ".norm1", cout)
        conv_w(name + ".conv2", 3, 3, cout, cout)
        norm(name + ".norm2", cout)
        if cin != cout:
            out[name + ".skip.w"] = rng.normal(0.0, np.sqrt(1.0 / cin), (cin, cout))

    def seq_block(name, c, d):
        norm(name + ".norm", c)
        linear(name + ".in_ssm", c, c)
        out[name + ".mix.w"] = rng.normal(0.0, np.sqrt(1.0 / 3.0), (3, c))
        out[name + ".mix.b"] = np.zeros(c)
        out[name + ".ssm.a"] = A_INIT_SCALE * np.eye(d) + rng.normal(0.0, A_INIT_NOISE, (d, d))
        out[name + ".ssm.b"] = rng.normal(0.0, np.sqrt(1.0 / c), (d, c))
        out[name + ".ssm.c"] = rng.normal(0.0, np.sqrt(1.0 / d), (c, d))
        out[name + ".ssm.d"] = rng.normal(0.0, np.sqrt(1.0 / c), (c, c))
        linear(name + ".gate", c, c)
        linear(name + ".out", c, c)

    widths = cfg.widths
    for i, w in enumerate(widths):
        cin = cfg.in_channels if i == 0 else w
        res_block(f"enc{i}.rb1", cin, w)
        res_block(f"enc{i}.rb2", w, w)
        seq_block(f"enc{i}.seq", w, cfg.d_state)
        if i + 1 < len(widths):
            conv_w(f"down{i}", 2, 2, w, widths[i + 1])
    for j in range(cfg.stages - 2, -1, -1):
        conv_w(f"dec{j}.up", 2, 2, widths[j + 1], widths[j])
        linear(f"dec{j}.reduce", 2 * widths[j], widths[j])
        res_block(f"dec{j}.rb", widths[j], widths[j])
    linear("head", widths[0], cfg.classes)
    return ParamSet(out)


def build_model(cfg: ModelConfig) -> SegModel:
    """Deterministic in cfg.seed: same config gives identical parameter bytes."""
    return SegModel(cfg=cfg, params=_init_params(cfg))


def parameter_count(model: SegModel) -> int:
    return model.params.n_scalars()


# -- forward pass ------------------------------------------------------------


def bind_params(graph: Graph, params: ParamSet) -> dict[str, Tensor]:
    return {name: graph.leaf(arr, requires_grad=True) for name, arr in params.items()}


def _res_params(leaves, name) -> ResidualBlockParams:
    return ResidualBlockParams(
        unit1=ConvUnit(
            w=leaves[name + ".conv1.w"],
            b=leaves[name + ".conv1.b"],
            gamma=leaves[name + ".norm1.gamma"],
            beta=leaves[name + ".norm1.beta"],
        ),
        unit2=ConvUnit(
            w=leaves[name + ".conv2.w"],
            b=leaves[name + ".conv2.b"],
            gamma=leaves[name + ".norm2.gamma"],
            beta=leaves[name + ".norm2.beta"],
        ),
        skip_w=leaves.get(name + ".skip.w"),
    )


def _seq_params(leaves, name, graph, d_state) -> MambaBlockParams:
    return MambaBlockParams(
        norm_gamma=leaves[name + ".norm.gamma"],
        norm_beta=leaves[name + ".norm.beta"],
        w_ssm_in=leaves[name + ".in_ssm.w"],
        b_ssm_in=leaves[name + ".in_ssm.b"],
        mix_w=leaves[name + ".mix.w"],
        mix_b=leaves[name + ".mix.b"],
        ssm=SsmParams(
            a=leaves[name + ".ssm.a"],
            b=leaves[name + ".ssm.b"],
            c=leaves[name + ".ssm.c"],
            d=leaves[name + ".ssm.d"],
            x0=graph.constant(np.zeros(d_state)),
        ),
        w_gate=leaves[name + ".gate.w"],
        b_gate=leaves[name + ".gate.b"],
        w_out=leaves[name + ".out.w"],
        b_out=leaves[name + ".out.b"],
    )


def _encoder_stage(x, leaves, graph, i, cfg):
    x = residual_block(x, _res_params(leaves, f"enc{i}.rb1"))
    x = residual_block(x, _res_params(leaves, f"enc{i}.rb2"))
    b, h, w, c = x.shape
    seq = ad.reshape(x, (b, h * w, c))  # row-major spatial scan order
    seq = mamba_block(seq, _seq_params(leaves, f"enc{i}.seq", graph, cfg.d_state))
    return ad.reshape(seq, (b, h, w, c))


def model_forward(cfg: ModelConfig, leaves: dict[str, Tensor], x: Tensor) -> Tensor:
    """Image batch (B,H,W,Cin) -> class probabilities (B,H,W,classes)."""
    graph = x.graph
    if x.ndim != 4 or x.shape[3] != cfg.in_channels:
        raise ad.ShapeError(f"expected (B,H,W,{cfg.in_channels}) input, got {x.shape}")
    if x.shape[1] % cfg.spatial_divisor or x.shape[2] % cfg.spatial_divisor:
        raise ad.ShapeError(
            f"spatial size {x.shape[1]}x{x.shape[2]} not divisible by {cfg.spatial_divisor}"
        )
    skips = []
    for i in range(cfg.stages):
        x = _encoder_stage(x, leaves, graph, i, cfg)
        if i + 1 < cfg.stages:
            skips.append(x)
            x = conv2d(x, leaves[f"down{i}.w"], leaves[f"down{i}.b"], stride=2)
    for j in range(cfg.stages - 2, -1, -1):
        x = conv_transpose2d(x, leaves[f"dec{j}.up.w"], leaves[f"dec{j}.up.b"])
        x = ad.concat([skips[j], x], axis=3)
        x = conv1x1(x, leaves[f"dec{j}.reduce.w"], leaves[f"dec{j}.reduce.b"])
        x = residual_block(x, _res_params(leaves, f"dec{j}.rb"))
    logits = conv1x1(x, leaves["head.w"], leaves["head.b"])
    return ad.softmax(logits, axis=3)


def _images_to_batch(images) -> np.ndarray:
    # (N,1,H,W) float -> (N,H,W,1) float64
    arr = np.asarray(images, dtype=np.float64)
    return np.ascontiguousarray(arr.transpose(0, 2, 3, 1))


def predict(model: SegModel, image: np.ndarray) -> np.ndarray:
    """Single image (H,W) or (1,H,W) -> probability map (classes,H,W)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    probs = predict_batch(model, image[None])
    return probs[0]


def predict_batch(model: SegModel, images: np.ndarray) -> np.ndarray:
    """(N,1,H,W) images -> (N,classes,H,W) probabilities."""
    graph = Graph(validate=False)
    leaves = bind_params(graph, model.params)
    x = graph.leaf(_images_to_batch(images))
    probs = model_forward(model.cfg, leaves, x)
    return np.ascontiguousarray(probs.data.transpose(0, 3, 1, 2))


# -- training ----------------------------------------------------------------


@dataclass
class OptimizerConfig:
    kind: str = "sam"  # "sgd" or "sam"
    lr: float = 5e-3
    rho: float = 0.05
    zero_grad_policy: str = "plain_step"

    def __post_init__(self):
        if self.kind not in ("sgd", "sam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")

    def sam(self) -> SamConfig:
        return SamConfig(rho=self.rho, lr=self.lr, zero_grad_policy=self.zero_grad_policy)


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    component_means: dict[str, float]
    sigmas: np.ndarray  # current sigma_m^2 values, empty when not training UA
    n_batches: int


@dataclass
class TrainSettings:
    epochs: int = 50
    batch_size: int = 8
    seed: int = 0
    objective: str = "ua"  # "ce" for the plain cross-entropy baseline
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.objective not in ("ce", "ua"):
            raise ValueError(f"unknown objective {self.objective!r}")


def ensure_uncertainty_params(model: SegModel, settings: TrainSettings):
    if settings.objective == "ua" and UNCERTAINTY_PARAM not in model.params:
        model.params[UNCERTAINTY_PARAM] = np.zeros(len(settings.loss.components))


def _batch_loss_fn(cfg, settings, images, labels, diag):
    """Returns the optimizer-protocol loss_fn closed over one batch.

    The first call per batch records diagnostic component values (all three
    losses evaluated with plain numpy on the forward probabilities).
    """

    def loss_fn(params: ParamSet):
        graph = Graph(validate=False)
        leaves = bind_params(graph, params)
        x = graph.leaf(images)
        probs_nhwc = model_forward(cfg, leaves, x)
        probs = ad.transpose(probs_nhwc, (0, 3, 1, 2))
        if settings.objective == "ce":
            loss = component_loss("ce", probs, labels, settings.loss)
        else:
            components = [
                component_loss(name, probs, labels, settings.loss)
                for name in settings.loss.components
            ]
            weights = UncertaintyWeights(log_var=leaves[UNCERTAINTY_PARAM])
            loss = uncertainty_aware_loss(components, weights)
        if diag is not None and "loss" not in diag:
            p = probs.data
            diag["loss"] = loss.item()
            diag["dice"] = dice_value(p, labels, settings.loss.dice_per_class)
            diag["ce"] = ce_value(p, labels)
            diag["focal"] = focal_value(p, labels, settings.loss.gamma)
        return loss, leaves

    return loss_fn


def train_epoch(model: SegModel, samples, settings: TrainSettings, epoch: int) -> EpochStats:
    """One seeded-shuffle pass over ``samples``; parameters update in place.

    A non-finite loss aborts with a diagnostic naming the batch index.
    """
    if not samples:
        raise ValueError("empty dataset")
    ensure_uncertainty_params(model, settings)
    rng = np.random.default_rng(np.random.SeedSequence((settings.seed, epoch)))
    order = rng.permutation(len(samples))
    images = np.stack([samples[i].image for i in order]).astype(np.float64)
    labels = np.stack([samples[i].mask for i in order])
    totals = {"loss": 0.0, "dice": 0.0, "ce": 0.0, "focal": 0.0}
    n_batches = 0
    for start in range(0, len(samples), settings.batch_size):
        stop = min(start + settings.batch_size, len(samples))
        batch_x = _images_to_batch(images[start:stop])
        batch_y = labels[start:stop]
        diag: dict[str, float] = {}
        loss_fn = _batch_loss_fn(model.cfg, settings, batch_x, batch_y, diag)
        try:
            if settings.optimizer.kind == "sam":
                sam_step(model.params, loss_fn, settings.optimizer.sam())
            else:
                _, grads = evaluate_loss_and_grads(model.params, loss_fn)
                sgd_step(model.params, grads, settings.optimizer.lr)
        except ad.NonFiniteError as exc:
            raise TrainingError(
                f"non-finite loss at epoch {epoch}, batch {n_batches}: {exc}"
            ) from exc
        if not np.isfinite(diag["loss"]):
            raise TrainingError(f"non-finite loss at epoch {epoch}, batch {n_batches}")
        for key in totals:
            totals[key] += diag[key]
        n_batches += 1
    sigmas = (
        np.exp(model.params[UNCERTAINTY_PARAM])
        if settings.objective == "ua"
        else np.zeros(0)
    )
    return EpochStats(
        epoch=epoch,
        mean_loss=totals["loss"] / n_batches,
        component_means={k: totals[k] / n_batches for k in ("dice", "ce", "focal")},
        sigmas=sigmas,
        n_batches=n_batches,
    )


def train(model: SegModel, samples, settings: TrainSettings, on_epoch=None) -> list[EpochStats]:
    ensure_uncertainty_params(model, settings)
    history = []
    for epoch in range(settings.epochs):
        stats = train_epoch(model, samples, settings, epoch)
        history.append(stats)
        if on_epoch is not None:
            on_epoch(stats)
    return history


# -- checkpoint format -------------------------------------------------------

CKPT_MAGIC = b"SEGLCKPT"
CKPT_VERSION = 1


class CheckpointFormatError(Exception):
    pass


class CheckpointBadMagicError(CheckpointFormatError):
    pass


class CheckpointBadVersionError(CheckpointFormatError):
    pass


class CheckpointTruncatedError(CheckpointFormatError):
    pass


def _config_lines(cfg: ModelConfig) -> bytes:
    text = "".join(
        f"{k} = {getattr(cfg, k)}\n"
        for k in ("in_channels", "classes", "stages", "base_width", "d_state", "seed")
    )
    return text.encode("utf-8")


def _parse_config_block(blob: bytes) -> ModelConfig:
    fields = {}
    for line in blob.decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        fields[key.strip()] = int(value.strip())
    return ModelConfig(**fields)


def save_checkpoint(model: SegModel, path):
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        cfg_blob = _config_lines(model.cfg)
        f.write(struct.pack("<I", len(cfg_blob)))
        f.write(cfg_blob)
        f.write(struct.pack("<I", len(model.params)))
        for name, arr in model.params.items():
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> SegModel:
    with open(path, "rb") as f:
        raw = f.read()
    view = memoryview(raw)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointTruncatedError(f"checkpoint ends inside {what}")
        piece = view[pos : pos + n]
        pos += n
        return piece

    if bytes(take(len(CKPT_MAGIC), "magic")) != CKPT_MAGIC:
        raise CheckpointBadMagicError("bad checkpoint magic")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CKPT_VERSION:
        raise CheckpointBadVersionError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", take(4, "config length"))
    cfg = _parse_config_block(bytes(take(cfg_len, "config block")))
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = bytes(take(name_len, "name")).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        nbytes = int(np.prod(dims)) * 8
        data = np.frombuffer(take(nbytes, f"tensor {name!r}"), dtype="<f8").reshape(dims)
        params[name] = data.copy()
    if pos != len(raw):
        raise CheckpointFormatError(f"{len(raw) - pos} trailing bytes after last tensor")
    return SegModel(cfg=cfg, params=ParamSet(params))
