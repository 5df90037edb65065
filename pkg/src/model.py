#!/usr/bin/env python3
"""
MSVL Toolkit — Multispectral-View Graph Model and Baselines

gnn_msvl: every band of the cube is a view. One shared grouped-conv residual
encoder turns each view into a D-vector, an attention gate rescales it, the
gated vectors are the nodes of a cross-spectral graph, one 4-head GAT layer
aggregates them and the mean node feature goes to a two-logit classifier.
single_band / rgb_baseline run the same encoder on one view / the RGB image
and feed the classifier directly.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

import autograd as ag
from autograd import Tensor
from reconstruction import LinearRgbImage
from spectral import BAND_COUNT, GRID, SpectralCube
from topology import GraphTopology
from utils.errors import RejectedInputError

logger = logging.getLogger(__name__)

GAT_HEADS = 4
GAT_SLOPE = 0.2
POSITIVE_CLASS = 1  # "DMI"


class Arch(Enum):
    RGB_BASELINE = "rgb_baseline"
    SINGLE_BAND = "single_band"
    GNN_MSVL = "gnn_msvl"

    @classmethod
    def parse(cls, value: Union[str, "Arch"]) -> "Arch":
        if isinstance(value, cls):
            return value
        for a in cls:
            if a.value == value:
                return a
        raise RejectedInputError(f"Unknown architecture {value!r}")

    @property
    def in_channels(self) -> int:
        return 3 if self is Arch.RGB_BASELINE else 1


@dataclass(frozen=True)
class EncoderConfig:
    stem_channels: int = 8
    stem_kernel: int = 7
    stem_stride: int = 2
    stage_channels: Tuple[int, ...] = (16, 32)
    stage_strides: Tuple[int, ...] = (1, 2)
    kernel_size: int = 3
    cardinality: int = 4
    output_dim: int = 64

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "stage_strides", tuple(int(s) for s in self.stage_strides))
        if self.output_dim < 1:
            raise RejectedInputError(f"Encoder output_dim must be >= 1, got {self.output_dim}")
        if not self.stage_channels:
            raise RejectedInputError("Encoder needs at least one residual stage")
        if len(self.stage_strides) != len(self.stage_channels):
            raise RejectedInputError("stage_strides must have one entry per stage")
        for c in self.stage_channels:
            if c < 1 or c % self.cardinality:
                raise RejectedInputError(f"Cardinality {self.cardinality} must divide stage channels {c}")
        if self.stem_channels < 1 or self.stem_stride < 1 or min(self.stage_strides) < 1:
            raise RejectedInputError("Encoder channel counts and strides must be positive")
        if self.kernel_size % 2 == 0 or self.stem_kernel % 2 == 0:
            raise RejectedInputError("Encoder kernel sizes must be odd")


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    gat_dim: Optional[int] = None  # defaults to encoder.output_dim
    attention_reduction: int = 4
    classifier_hidden: int = 32

    @property
    def layer2_dim(self) -> int:
        return self.gat_dim if self.gat_dim is not None else self.encoder.output_dim

    def __post_init__(self):
        if self.layer2_dim % GAT_HEADS:
            raise RejectedInputError(f"GAT width {self.layer2_dim} must be divisible by {GAT_HEADS} heads")
        if self.attention_reduction < 1 or self.classifier_hidden < 1:
            raise RejectedInputError("attention_reduction and classifier_hidden must be >= 1")

    def to_json(self) -> dict:
        payload = asdict(self)
        payload["encoder"]["stage_channels"] = list(self.encoder.stage_channels)
        payload["encoder"]["stage_strides"] = list(self.encoder.stage_strides)
        return payload

    @classmethod
    def from_json(cls, payload: dict) -> "ModelConfig":
        payload = dict(payload or {})
        encoder = dict(payload.pop("encoder", None) or {})
        unknown = sorted(set(payload) - {f.name for f in fields(cls)})
        unknown += [f"encoder.{k}" for k in sorted(set(encoder) - {f.name for f in fields(EncoderConfig)})]
        if unknown:
            raise RejectedInputError(f"Unknown model config keys: {unknown}")
        try:
            return cls(encoder=EncoderConfig(**encoder), **payload)
        except RejectedInputError:
            raise
        except (TypeError, ValueError) as e:
            raise RejectedInputError(f"Bad model config value: {e}") from e


@dataclass
class ModelParams:
    arch: Arch
    config: ModelConfig
    tensors: Dict[str, Tensor]
    topology: Optional[GraphTopology] = None
    band: Optional[int] = None
    seed: int = 0

    def parameters(self) -> List[Tensor]:
        return list(self.tensors.values())

    def names(self) -> List[str]:
        return list(self.tensors.keys())

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def copy(self) -> "ModelParams":
        tensors = {k: Tensor(v.data.copy(), requires_grad=True, op="param") for k, v in self.tensors.items()}
        return ModelParams(self.arch, self.config, tensors, self.topology, self.band, self.seed)

    def groups(self) -> Dict[str, List[str]]:
        out: Dict[str, List[str]] = {}
        for name in self.tensors:
            out.setdefault(name.split(".")[0], []).append(name)
        return out


@dataclass(frozen=True)
class PredictionScore:
    probabilities: Tuple[float, float]

    @property
    def score(self) -> float:
        """Probability of the positive ("DMI") class."""
        return self.probabilities[POSITIVE_CLASS]


# -------------------------------
# Initialization
# -------------------------------
def _conv(rng, tensors, name, cout, cin_per_group, k, relu_after=True):
    fan_in = cin_per_group * k * k
    if relu_after:
        tensors[f"{name}.w"] = ag.he_uniform(rng, (cout, cin_per_group, k, k), fan_in)
    else:
        tensors[f"{name}.w"] = ag.xavier_uniform(rng, (cout, cin_per_group, k, k), fan_in, cout * k * k)
    tensors[f"{name}.b"] = ag.zeros((cout,))


def _fc(rng, tensors, name, fin, fout, relu_after=True):
    if relu_after:
        tensors[f"{name}.w"] = ag.he_uniform(rng, (fin, fout), fin)
    else:
        tensors[f"{name}.w"] = ag.xavier_uniform(rng, (fin, fout), fin, fout)
    tensors[f"{name}.b"] = ag.zeros((fout,))


def init_params(
    arch: Union[str, Arch],
    config: Optional[ModelConfig] = None,
    topology: Optional[GraphTopology] = None,
    band: Optional[int] = None,
    seed: int = 0,
) -> ModelParams:
    arch = Arch.parse(arch)
    config = config or ModelConfig()
    if arch is Arch.GNN_MSVL:
        if topology is None:
            raise RejectedInputError("gnn_msvl needs a graph topology")
        if topology.node_count != BAND_COUNT:
            raise RejectedInputError(f"Topology has {topology.node_count} nodes, model has {BAND_COUNT} views")
    if arch is Arch.SINGLE_BAND and (band is None or not 0 <= band < BAND_COUNT):
        raise RejectedInputError(f"single_band needs a band index in 0..{BAND_COUNT - 1}, got {band}")

    rng = np.random.default_rng(seed)
    enc = config.encoder
    t: Dict[str, Tensor] = {}

    _conv(rng, t, "encoder.stem", enc.stem_channels, arch.in_channels, enc.stem_kernel)
    cin = enc.stem_channels
    for s, (c, stride) in enumerate(zip(enc.stage_channels, enc.stage_strides)):
        prefix = f"encoder.stage{s}"
        _conv(rng, t, f"{prefix}.reduce", c, cin, 1)
        _conv(rng, t, f"{prefix}.grouped", c, c // enc.cardinality, enc.kernel_size)
        _conv(rng, t, f"{prefix}.expand", c, c, 1, relu_after=False)
        if stride != 1 or cin != c:
            _conv(rng, t, f"{prefix}.shortcut", c, cin, 1, relu_after=False)
        cin = c
    _fc(rng, t, "encoder.proj", cin, enc.output_dim, relu_after=False)

    feature_dim = enc.output_dim
    if arch is Arch.GNN_MSVL:
        hidden = max(1, enc.output_dim // config.attention_reduction)
        _fc(rng, t, "attention.fc1", enc.output_dim, hidden)
        _fc(rng, t, "attention.fc2", hidden, enc.output_dim, relu_after=False)
        per_head = config.layer2_dim // GAT_HEADS
        for h in range(GAT_HEADS):
            t[f"gat.head{h}.w"] = ag.xavier_uniform(rng, (enc.output_dim, per_head), enc.output_dim, per_head)
            t[f"gat.head{h}.a_src"] = ag.xavier_uniform(rng, (per_head, 1), 2 * per_head, 1)
            t[f"gat.head{h}.a_dst"] = ag.xavier_uniform(rng, (per_head, 1), 2 * per_head, 1)
        feature_dim = config.layer2_dim

    _fc(rng, t, "classifier.fc1", feature_dim, config.classifier_hidden)
    _fc(rng, t, "classifier.fc2", config.classifier_hidden, 2, relu_after=False)

    params = ModelParams(arch=arch, config=config, tensors=t, topology=topology, band=band, seed=seed)
    logger.debug("Initialized %s with %d weights", arch.value, sum(v.data.size for v in t.values()))
    return params


# -------------------------------
# Blocks
# -------------------------------
def _conv_block(params: ModelParams, name: str, x: Tensor, stride=1, padding=0, groups=1) -> Tensor:
    return ag.conv2d(x, params[f"{name}.w"], params[f"{name}.b"], stride=stride, padding=padding, groups=groups)


def encoder_forward(params: ModelParams, views: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, D) through stem, residual grouped stages, pooling and projection."""
    enc = params.config.encoder
    if views.data.ndim != 4 or views.shape[1] != params.arch.in_channels:
        raise RejectedInputError(
            f"Encoder expects (N, {params.arch.in_channels}, H, W) input, got {views.shape}"
        )
    x = ag.relu(_conv_block(params, "encoder.stem", views, stride=enc.stem_stride, padding=enc.stem_kernel // 2))
    for s, stride in enumerate(enc.stage_strides):
        prefix = f"encoder.stage{s}"
        h = ag.relu(_conv_block(params, f"{prefix}.reduce", x))
        h = ag.relu(_conv_block(params, f"{prefix}.grouped", h, stride=stride,
                                padding=enc.kernel_size // 2, groups=enc.cardinality))
        h = _conv_block(params, f"{prefix}.expand", h)
        if f"{prefix}.shortcut.w" in params.tensors:
            shortcut = _conv_block(params, f"{prefix}.shortcut", x, stride=stride)
        else:
            shortcut = x
        x = ag.relu(ag.add(h, shortcut))
    pooled = ag.global_average_pool(x)
    return ag.fully_connected(pooled, params["encoder.proj.w"], params["encoder.proj.b"])


def encode_views(params: ModelParams, cube: SpectralCube) -> Tensor:
    """24 view features (24, D); the same encoder weights process every band."""
    if params.arch is not Arch.GNN_MSVL:
        raise RejectedInputError(f"encode_views needs a gnn_msvl model, got {params.arch.value}")
    if cube.bands != BAND_COUNT:
        raise RejectedInputError(f"Expected a {BAND_COUNT}-band cube, got {cube.bands}")
    views = Tensor(cube.data.astype(np.float64)[:, None, :, :])
    return encoder_forward(params, views)


def attention_module(params: ModelParams, feature: Union[Tensor, np.ndarray]) -> Tensor:
    """feature * sigmoid(FC2(relu(FC1(feature)))) over the last axis; a single D-vector stays a D-vector."""
    feature = ag.as_tensor(feature)
    d = params["attention.fc1.w"].shape[0]
    if feature.data.ndim < 1 or feature.shape[-1] != d:
        raise RejectedInputError(f"Attention module expects feature width {d}, got {feature.shape}")
    if feature.data.ndim == 1:
        return ag.reshape(attention_module(params, ag.reshape(feature, (1, d))), (d,))
    hidden = ag.relu(ag.fully_connected(feature, params["attention.fc1.w"], params["attention.fc1.b"]))
    gate = ag.sigmoid(ag.fully_connected(hidden, params["attention.fc2.w"], params["attention.fc2.b"]))
    return ag.mul(feature, gate)


def _gat_head(params: ModelParams, h: int, nodes: Tensor, mask: np.ndarray) -> Tuple[Tensor, Tensor]:
    wx = ag.matmul(nodes, params[f"gat.head{h}.w"])  # (..., V, D'h)
    src = ag.matmul(wx, params[f"gat.head{h}.a_src"])  # (..., V, 1)
    dst = ag.matmul(wx, params[f"gat.head{h}.a_dst"])  # (..., V, 1)
    scores = ag.leaky_relu(ag.add(src, ag.transpose(dst)), GAT_SLOPE)  # (..., V, V): e_ij
    alpha = ag.softmax(scores, axis=-1, mask=mask)
    return ag.matmul(alpha, wx), alpha


def _check_nodes(nodes: Tensor, topology: GraphTopology) -> None:
    if nodes.data.ndim not in (2, 3) or nodes.shape[-2] != topology.node_count:
        raise RejectedInputError(
            f"Node features {nodes.shape} do not match a {topology.node_count}-node topology"
        )


def gat_conv(params: ModelParams, nodes: Tensor, topology: GraphTopology) -> Tensor:
    """relu(concat over 4 heads of sum_j alpha_ij W_h x_j), j over neighbors plus self."""
    _check_nodes(nodes, topology)
    mask = topology.adjacency_mask(self_loops=True)
    heads = [_gat_head(params, h, nodes, mask)[0] for h in range(GAT_HEADS)]
    return ag.relu(ag.concat(heads, axis=-1))


def attention_weights(params: ModelParams, nodes: Tensor, topology: GraphTopology) -> np.ndarray:
    """Per-head attention coefficients, shape (4, ..., V, V)."""
    _check_nodes(nodes, topology)
    mask = topology.adjacency_mask(self_loops=True)
    return np.stack([_gat_head(params, h, nodes, mask)[1].data for h in range(GAT_HEADS)])


def _head_logits(params: ModelParams, features: Tensor) -> Tensor:
    hidden = ag.relu(ag.fully_connected(features, params["classifier.fc1.w"], params["classifier.fc1.b"]))
    return ag.fully_connected(hidden, params["classifier.fc2.w"], params["classifier.fc2.b"])


def _score(logits: Tensor) -> PredictionScore:
    p = ag.softmax(logits, axis=-1).data.reshape(-1)
    return PredictionScore(probabilities=(float(p[0]), float(p[1])))


def classify(params: ModelParams, layer2: Tensor) -> PredictionScore:
    """Mean over nodes -> FC -> relu -> FC -> softmax."""
    width = params["classifier.fc1.w"].shape[0]
    if layer2.data.ndim != 2 or layer2.shape[1] != width:
        raise RejectedInputError(f"Classifier expects (nodes, {width}) input, got {layer2.shape}")
    readout = ag.mean(layer2, axis=0)
    return _score(_head_logits(params, ag.reshape(readout, (1, width))))


# -------------------------------
# Whole model
# -------------------------------
def model_input(params: ModelParams, sample) -> np.ndarray:
    """Single input -> (C, H, W) float64 array in the layout `forward_logits` batches."""
    arch = params.arch
    if arch is Arch.GNN_MSVL:
        if not isinstance(sample, SpectralCube):
            raise RejectedInputError("gnn_msvl takes a SpectralCube")
        return sample.data.astype(np.float64)
    if arch is Arch.SINGLE_BAND:
        if isinstance(sample, SpectralCube):
            sample = sample.data[params.band]
        view = np.asarray(sample, dtype=np.float64)
        if view.ndim != 2:
            raise RejectedInputError(f"single_band takes one (H, W) view image, got shape {view.shape}")
        return view[None, :, :]
    if not isinstance(sample, LinearRgbImage):
        raise RejectedInputError("rgb_baseline takes a LinearRgbImage")
    return np.transpose(sample.data, (2, 0, 1)).astype(np.float64)


def forward_logits(params: ModelParams, batch: np.ndarray) -> Tensor:
    """(B, C, H, W) batch -> (B, 2) logits."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 4:
        raise RejectedInputError(f"Expected a (B, C, H, W) batch, got shape {batch.shape}")
    b, c, h, w = batch.shape
    if params.arch is Arch.GNN_MSVL:
        if c != BAND_COUNT:
            raise RejectedInputError(f"gnn_msvl batch needs {BAND_COUNT} bands, got {c}")
        feats = encoder_forward(params, Tensor(batch.reshape(b * c, 1, h, w)))
        nodes = ag.reshape(feats, (b, c, feats.shape[-1]))
        layer1 = attention_module(params, nodes)
        layer2 = gat_conv(params, layer1, params.topology)
        return _head_logits(params, ag.mean(layer2, axis=1))
    return _head_logits(params, encoder_forward(params, Tensor(batch)))


def model_forward(params: ModelParams, sample) -> PredictionScore:
    return _score(forward_logits(params, model_input(params, sample)[None]))


def predict_scores(params: ModelParams, inputs: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Positive-class probabilities for a stacked (N, C, H, W) input array."""
    out = []
    for start in range(0, len(inputs), batch_size):
        logits = forward_logits(params, inputs[start:start + batch_size])
        out.append(ag.softmax(logits, axis=-1).data[:, POSITIVE_CLASS])
    return np.concatenate(out) if out else np.zeros(0)


# -------------------------------
# Model variants
# -------------------------------
@dataclass(frozen=True)
class Variant:
    key: str
    name: str
    arch: Arch
    band: Optional[int] = None
    topology: Optional[str] = None


def table_variants(include_ring: bool = False) -> List[Variant]:
    """CFP baseline, one model per band, GNN ring / full / jumper N=2..6."""
    variants = [Variant("cfp", "CFP baseline", Arch.RGB_BASELINE)]
    for k, nm in enumerate(GRID.wavelengths_nm):
        variants.append(Variant(f"cmi-{int(nm)}", f"CMI {int(nm)}nm", Arch.SINGLE_BAND, band=k))
    variants.append(Variant("ring", "GNN ring", Arch.GNN_MSVL, topology="ring"))
    variants.append(Variant("full", "GNN full", Arch.GNN_MSVL, topology="full"))
    suffix = "+ring" if include_ring else ""
    for n in range(2, 7):
        variants.append(Variant(f"jumper-{n}{suffix}", f"GNN jumper (N={n})", Arch.GNN_MSVL,
                                topology=f"jumper-{n}{suffix}"))
    return variants
