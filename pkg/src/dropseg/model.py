"""Miniature dilated-convolution segmentation network.

The network maps a stacked (H, W, C) slab to logits for the slab's centre
slice: four 3x3 convolutions with dilations 1, 2, 4, 8 (relu after each)
followed by a 1x1 projection to a single channel.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensorcore as tc
from .errors import (
    CorruptCheckpoint,
    MissingGroundTruth,
    MissingSequence,
    ShapeMismatch,
    TrainingDiverged,
)
from .seqdropout import CensorMask, DropoutPolicy, censor, inference_mask, sample_mask
from .volgrid import (
    ALL_SEQUENCES,
    SLAB_DEPTH,
    MultiSequenceStudy,
    ProbabilityVolume,
    SequenceId,
    assemble_input,
    normalize_study,
)

log = logging.getLogger(__name__)

BASELINE_SEQUENCES = (SequenceId.PreGdT1, SequenceId.PostGdT1, SequenceId.Flair)
LOSS_WINDOW = 50


@dataclass(frozen=True)
class NetSpec:
    input_channels: int = 20
    hidden_channels: int = 32
    dilations: tuple[int, ...] = (1, 2, 4, 8)
    kernel_size: int = 3
    sequences: tuple[str, ...] = tuple(s.key for s in ALL_SEQUENCES)
    precision: str = "f32"

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        object.__setattr__(self, "sequences", tuple(self.sequences))
        if not self.dilations or min(self.dilations) < 1:
            raise ValueError("dilations must be positive")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel size must be odd")
        if self.input_channels != SLAB_DEPTH * len(self.sequences):
            raise ValueError(
                f"{self.input_channels} input channels do not match {len(self.sequences)} sequences"
            )
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"precision must be f32 or f64, got {self.precision!r}")

    @property
    def sequence_ids(self) -> tuple[SequenceId, ...]:
        return tuple(SequenceId.from_key(k) for k in self.sequences)

    @property
    def full_input(self) -> bool:
        """True when the net consumes all four sequence blocks (dropout-capable)."""
        return self.sequence_ids == ALL_SEQUENCES

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def layer_shapes(self) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
        """(kernel shape, bias shape) per layer, in forward order."""
        k, hid = self.kernel_size, self.hidden_channels
        shapes = []
        cin = self.input_channels
        for _ in self.dilations:
            shapes.append(((k, k, cin, hid), (hid,)))
            cin = hid
        shapes.append(((1, 1, hid, 1), (1,)))
        return shapes

    @property
    def parameter_count(self) -> int:
        return sum(math.prod(ks) + math.prod(bs) for ks, bs in self.layer_shapes())


class DilatedNet:
    def __init__(self, spec: NetSpec, params: Sequence[tc.Tensor]):
        shapes = [s for pair in spec.layer_shapes() for s in pair]
        if [tuple(p.shape) for p in params] != shapes:
            raise ShapeMismatch("parameter shapes do not match the network spec")
        self.spec = spec
        self.params = list(params)

    @classmethod
    def initialize(cls, spec: NetSpec, rng: np.random.Generator, prior: float = 0.01):
        """He-normal kernels, zero biases, output bias at the logit of ``prior``."""
        params = []
        layers = spec.layer_shapes()
        for n, (ks, bs) in enumerate(layers):
            fan_in = ks[0] * ks[1] * ks[2]
            std = math.sqrt(2.0 / fan_in) if n < len(layers) - 1 else math.sqrt(1.0 / fan_in)
            params.append(tc.Tensor(rng.normal(0.0, std, ks).astype(spec.dtype), True))
            b = np.zeros(bs, spec.dtype)
            if n == len(layers) - 1:
                b[:] = math.log(prior / (1.0 - prior))
            params.append(tc.Tensor(b, True))
        return cls(spec, params)

    @classmethod
    def zeros(cls, spec: NetSpec):
        shapes = [s for pair in spec.layer_shapes() for s in pair]
        return cls(spec, [tc.Tensor(np.zeros(s, spec.dtype), True) for s in shapes])

    def forward(self, x) -> tc.Tensor:
        """Logits (H, W) for the centre slice of an (H, W, C) slab."""
        if not isinstance(x, tc.Tensor):
            x = tc.Tensor(np.asarray(x, dtype=self.spec.dtype))
        if x.data.ndim != 3 or x.shape[2] != self.spec.input_channels:
            raise ShapeMismatch(
                f"input {x.shape} does not have {self.spec.input_channels} channels"
            )
        h = x
        p = self.params
        for n, d in enumerate(self.spec.dilations):
            h = tc.relu(tc.conv2d(h, p[2 * n], p[2 * n + 1], d))
        h = tc.conv2d(h, p[-2], p[-1], 1)
        return tc.reshape(h, h.shape[:2])

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.data.reshape(-1) for p in self.params])

    @classmethod
    def from_flat(cls, spec: NetSpec, flat: np.ndarray):
        params, pos = [], 0
        for ks, bs in spec.layer_shapes():
            for shape in (ks, bs):
                n = math.prod(shape)
                params.append(tc.Tensor(flat[pos : pos + n].reshape(shape).astype(spec.dtype), True))
                pos += n
        return cls(spec, params)

    def receptive_radius(self) -> int:
        half = self.spec.kernel_size // 2
        return sum(half * d for d in self.spec.dilations)

    def prepare_input(self, study: MultiSequenceStudy, z: int) -> np.ndarray:
        """Network input for slice ``z``: censored 20-channel stack or a fixed subset."""
        x = assemble_input(study, z)
        if self.spec.full_input:
            x = censor(x, inference_mask(study))
        else:
            missing = [s.key for s in self.spec.sequence_ids if s not in study.volumes]
            if missing:
                raise MissingSequence(
                    f"{study.case_id}: model needs {', '.join(missing)} which the study lacks"
                )
            x = x[:, :, _subset_channels(self.spec.sequence_ids)]
        return x.astype(self.spec.dtype, copy=False)


def _subset_channels(seqs: Sequence[SequenceId]) -> list[int]:
    return [SLAB_DEPTH * s + o for s in seqs for o in range(SLAB_DEPTH)]


# --------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"MDSC"
CKPT_VERSION = 1


@dataclass(eq=False)
class Checkpoint:
    spec: NetSpec
    parameters: np.ndarray  # flat float32, declared layer order
    metadata: dict = field(default_factory=dict)
    version: int = CKPT_VERSION

    def __post_init__(self):
        self.parameters = np.ascontiguousarray(self.parameters, dtype="<f4").reshape(-1)
        if self.parameters.size != self.spec.parameter_count:
            raise CorruptCheckpoint(
                f"payload has {self.parameters.size} values, spec implies {self.spec.parameter_count}"
            )

    def network(self, precision: Optional[str] = None) -> DilatedNet:
        spec = self.spec
        if precision is not None and precision != spec.precision:
            spec = NetSpec(**{**asdict(spec), "precision": precision})
        return DilatedNet.from_flat(spec, self.parameters)

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (
            self.version == other.version
            and self.spec == other.spec
            and self.metadata == other.metadata
            and self.parameters.tobytes() == other.parameters.tobytes()
        )


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    header = {
        "spec": asdict(ckpt.spec),
        "metadata": ckpt.metadata,
        "parameter_count": int(ckpt.parameters.size),
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return (
        CKPT_MAGIC
        + bytes([ckpt.version])
        + struct.pack("<I", len(hb))
        + hb
        + ckpt.parameters.astype("<f4").tobytes()
    )


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < 9 or buf[:4] != CKPT_MAGIC:
        raise CorruptCheckpoint("bad checkpoint magic")
    if buf[4] != CKPT_VERSION:
        raise CorruptCheckpoint(f"unsupported checkpoint version {buf[4]} (expected {CKPT_VERSION})")
    (hlen,) = struct.unpack_from("<I", buf, 5)
    if 9 + hlen > len(buf):
        raise CorruptCheckpoint("truncated checkpoint header")
    try:
        header = json.loads(buf[9 : 9 + hlen].decode("utf-8"))
        spec = NetSpec(**header["spec"])
        count = int(header["parameter_count"])
        metadata = header["metadata"]
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise CorruptCheckpoint(f"bad checkpoint header: {exc}") from None
    payload = buf[9 + hlen :]
    if count != spec.parameter_count or len(payload) != 4 * count:
        raise CorruptCheckpoint(
            f"payload is {len(payload)} bytes, header declares {count} float32 values"
        )
    return Checkpoint(spec, np.frombuffer(payload, dtype="<f4"), metadata)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


# --------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    steps: int = 2000
    seed: int = 0
    dropout_enabled: bool = True
    p_pos: float = 0.5
    hidden_channels: int = 32
    # sequences fed to the baseline (dropout disabled) network
    sequences: tuple[str, ...] = tuple(s.key for s in BASELINE_SEQUENCES)
    prior: float = 0.01

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.p_pos <= 1:
            raise ValueError("p_pos must lie in [0, 1]")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        self.sequences = tuple(self.sequences)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: list[float]
    masks: list[str]


def _check_training_set(studies: Sequence[MultiSequenceStudy]):
    if not studies:
        raise MissingSequence("empty training set")
    for s in studies:
        missing = [q.key for q in ALL_SEQUENCES if q not in s.volumes]
        if missing:
            raise MissingSequence(f"{s.case_id}: training study lacks {', '.join(missing)}")
        if s.gt is None:
            raise MissingGroundTruth(f"{s.case_id}: training study has no ground truth")


def train(
    studies: Sequence[MultiSequenceStudy],
    val: Sequence[MultiSequenceStudy] = (),
    cfg: TrainConfig = TrainConfig(),
    policy: Optional[DropoutPolicy] = None,
) -> TrainResult:
    """SGD with momentum on pixel-wise BCE over randomly drawn slabs.

    With ``cfg.dropout_enabled`` every step censors a mask drawn from
    ``policy`` (uniform over the 15 admissible masks by default). Otherwise the
    network is a baseline restricted to ``cfg.sequences``.
    """
    _check_training_set(studies)
    if cfg.dropout_enabled:
        policy = policy or DropoutPolicy.uniform()
        seq_keys = tuple(s.key for s in ALL_SEQUENCES)
    else:
        if policy is not None:
            raise ValueError("a dropout policy was given but dropout is disabled")
        seq_keys = tuple(s.key for s in sorted(SequenceId.from_key(k) for k in cfg.sequences))
    spec = NetSpec(
        input_channels=SLAB_DEPTH * len(seq_keys),
        hidden_channels=cfg.hidden_channels,
        sequences=seq_keys,
    )
    rng = np.random.default_rng(cfg.seed)
    mask_rng = np.random.default_rng([cfg.seed, 1])
    net = DilatedNet.initialize(spec, rng, cfg.prior)
    subset = _subset_channels(spec.sequence_ids)

    studies = [normalize_study(s) for s in studies]
    positive = [np.flatnonzero(s.gt.voxels.any(axis=(1, 2))) for s in studies]
    velocity = [np.zeros_like(p.data) for p in net.params]
    lr = spec.dtype(cfg.learning_rate)
    mu = spec.dtype(cfg.momentum)

    losses, masks = [], []
    for step in range(cfg.steps):
        i = int(rng.integers(len(studies)))
        study = studies[i]
        nz = study.dims[2]
        if len(positive[i]) and rng.random() < cfg.p_pos:
            z = int(positive[i][rng.integers(len(positive[i]))])
        else:
            z = int(rng.integers(nz))
        x = assemble_input(study, z)
        if cfg.dropout_enabled:
            mask = sample_mask(mask_rng, policy)
            x = censor(x, mask)
        else:
            mask = CensorMask.of(s for s in ALL_SEQUENCES if s not in spec.sequence_ids)
            x = x[:, :, subset]
        for p in net.params:
            p.zero_grad()
        with tc.Tape() as tape:
            loss = tc.bce_with_logits(net.forward(tc.Tensor(x)), study.gt.voxels[z])
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        tc.backward(tape, loss)
        for p, v in zip(net.params, velocity):
            v *= mu
            v += p.grad
            p.data -= lr * v
        losses.append(value)
        masks.append(mask.to_string())

    if len(losses) >= 2 * LOSS_WINDOW:
        first = float(np.mean(losses[:LOSS_WINDOW]))
        last = float(np.mean(losses[-LOSS_WINDOW:]))
        if not last <= 0.99 * first:
            raise TrainingDiverged(
                f"trailing loss {last:.4g} did not improve 1% over initial {first:.4g}"
            )

    metadata = {
        "seed": cfg.seed,
        "steps": cfg.steps,
        "dropout": cfg.dropout_enabled,
        "learning_rate": cfg.learning_rate,
        "momentum": cfg.momentum,
        "p_pos": cfg.p_pos,
        "mask_histogram": dict(sorted(Counter(masks).items())),
        "final_loss": float(np.mean(losses[-LOSS_WINDOW:])),
    }
    if val:
        metadata["val_loss"] = validation_loss(net, val)
    ckpt = Checkpoint(spec, net.flat_parameters(), metadata)
    return TrainResult(ckpt, losses, masks)


def validation_loss(net: DilatedNet, studies: Sequence[MultiSequenceStudy]) -> float:
    """Mean BCE over every slice of the given studies (with their own missing-sequence masks)."""
    total, n = 0.0, 0
    for s in studies:
        if s.gt is None:
            continue
        s = normalize_study(s)
        for z in range(s.dims[2]):
            logits = net.forward(net.prepare_input(s, z))
            total += tc.bce_with_logits(logits, s.gt.voxels[z]).item()
            n += 1
    return total / n if n else float("nan")


# --------------------------------------------------------------------------
# inference


def infer_study(net: DilatedNet, study: MultiSequenceStudy) -> ProbabilityVolume:
    """Probability map for every axial slice of a normalised study."""
    nx, ny, nz = study.dims
    out = np.empty((nz, ny, nx), dtype=np.float32)
    for z in range(nz):
        logits = net.forward(net.prepare_input(study, z))
        out[z] = tc.sigmoid(logits).data
    return ProbabilityVolume(np.clip(out, 0.0, 1.0), study.spacing_mm)
