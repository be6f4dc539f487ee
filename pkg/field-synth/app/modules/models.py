import math
from datetime import datetime, timezone
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, ValidationInfo, field_validator, model_validator

from app.modules.constants import CLASS_INDEX, NOISE_INTENSITY_SCALE, NUM_CLASSES, TOOL_VERSION
from app.modules.exceptions import ArgumentError


def _read_only(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


class Volume(BaseModel):
    """3D scalar grid with voxel spacing (mm) and a voxel-to-world affine."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: Optional[np.ndarray] = Field(default=None, validate_default=True)

    @field_validator("data", mode="before")
    @classmethod
    def validate_data(cls, value):
        array = np.asarray(value, dtype=np.float32)
        if array.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {array.shape}")
        if array.size == 0:
            raise ValueError("volume data must be non-empty")
        return _read_only(array)

    @field_validator("spacing")
    @classmethod
    def validate_spacing(cls, value):
        if any(not math.isfinite(s) or s <= 0 for s in value):
            raise ValueError(f"spacing must be strictly positive, got {value}")
        return tuple(float(s) for s in value)

    @field_validator("affine", mode="before")
    @classmethod
    def validate_affine(cls, value, info: ValidationInfo):
        if value is None:
            spacing = info.data.get("spacing", (1.0, 1.0, 1.0))
            value = np.diag([*spacing, 1.0])
        array = np.asarray(value, dtype=np.float64)
        if array.shape != (4, 4):
            raise ValueError(f"affine must be 4x4, got {array.shape}")
        return _read_only(array)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    def with_data(self, data) -> "Volume":
        return Volume(data=data, spacing=self.spacing, affine=self.affine)

    def rescaled_geometry(self, scale) -> Tuple[Tuple[float, float, float], np.ndarray]:
        """Spacing and affine of a grid whose voxel size is divided by `scale` per axis.

        Voxel centres stay aligned: the world position of the first output voxel
        centre is shifted by half the difference in voxel size.
        """
        scale = np.broadcast_to(np.asarray(scale, dtype=np.float64), (3,))
        spacing = tuple(float(s) for s in np.asarray(self.spacing) / scale)
        affine = np.array(self.affine, dtype=np.float64)
        linear = affine[:3, :3] / scale[np.newaxis, :]
        origin_shift = 0.5 / scale - 0.5
        affine[:3, 3] = affine[:3, 3] + self.affine[:3, :3] @ origin_shift
        affine[:3, :3] = linear
        return spacing, affine


class Segmentation(BaseModel):
    """Hard labels or soft class probabilities over (BG, WM, GM, CSF)."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    labels: Optional[np.ndarray] = None
    probs: Optional[np.ndarray] = None

    @model_validator(mode="before")
    @classmethod
    def validate_payload(cls, values):
        values = dict(values)
        labels = values.get("labels")
        probs = values.get("probs")
        if (labels is None) == (probs is None):
            raise ValueError("exactly one of labels or probs must be given")

        if labels is not None:
            array = np.asarray(labels)
            if array.ndim != 3:
                raise ValueError(f"labels must be 3D, got shape {array.shape}")
            if not np.issubdtype(array.dtype, np.integer):
                rounded = np.rint(array)
                if not np.array_equal(rounded, array):
                    raise ValueError("labels must be integers")
                array = rounded
            if array.size and (array.min() < 0 or array.max() >= NUM_CLASSES):
                raise ValueError(f"labels must lie in [0, {NUM_CLASSES - 1}]")
            values["labels"] = _read_only(array.astype(np.uint8))
        else:
            array = np.asarray(probs, dtype=np.float64)
            if array.ndim != 4 or array.shape[-1] != NUM_CLASSES:
                raise ValueError(f"probs must have shape (nx, ny, nz, {NUM_CLASSES}), got {array.shape}")
            if np.any(array < 0):
                raise ValueError("class probabilities must be non-negative")
            if np.any(np.abs(array.sum(axis=-1) - 1.0) > 1e-6):
                raise ValueError("class probabilities must sum to 1 per voxel")
            values["probs"] = _read_only(array)
        return values

    @property
    def mode(self) -> Literal["hard", "soft"]:
        return "hard" if self.labels is not None else "soft"

    @property
    def dims(self) -> Tuple[int, int, int]:
        source = self.labels if self.labels is not None else self.probs
        return tuple(int(n) for n in source.shape[:3])

    def label_map(self) -> np.ndarray:
        if self.labels is not None:
            return self.labels
        return np.argmax(self.probs, axis=-1).astype(np.uint8)

    def hardened(self) -> "Segmentation":
        if self.mode == "hard":
            return self
        return Segmentation(labels=self.label_map())

    def one_hot(self) -> np.ndarray:
        if self.probs is not None:
            return np.array(self.probs)
        return np.eye(NUM_CLASSES, dtype=np.float64)[self.labels]

    def class_mask(self, name: str, threshold: float = 0.5) -> np.ndarray:
        """Binary mask of one class; soft inputs must exceed the threshold, so at 0.5 classes never overlap."""
        index = CLASS_INDEX[name]
        if self.labels is not None:
            return self.labels == index
        return self.probs[..., index] > threshold


class PhantomSpec(BaseModel):
    dims: Tuple[int, int, int] = (64, 64, 64)
    csf_radii: Tuple[float, float, float] = (28.0, 28.0, 28.0)
    gm_radii: Tuple[float, float, float] = (22.0, 22.0, 22.0)
    wm_radii: Tuple[float, float, float] = (14.0, 14.0, 14.0)
    wm_intensity: float = 0.8
    gm_intensity: float = 0.55
    csf_intensity: float = 0.3
    background: float = 0.0
    background_noise_std: float = Field(default=0.0, ge=0.0)
    tissue_noise_std: float = Field(default=0.0, ge=0.0)

    @field_validator("dims")
    @classmethod
    def validate_dims(cls, value):
        if any(n < 1 for n in value):
            raise ValueError(f"phantom dims must be positive, got {value}")
        return value

    @model_validator(mode="after")
    def validate_ordering(self):
        for axis in range(3):
            if not self.csf_radii[axis] > self.gm_radii[axis] > self.wm_radii[axis] > 0:
                raise ValueError("radii must be strictly nested: CSF > GM > WM > 0 on every axis")
        if not self.wm_intensity > self.gm_intensity > self.csf_intensity:
            raise ValueError("tissue intensities must be ordered WM > GM > CSF")
        for value in (self.wm_intensity, self.gm_intensity, self.csf_intensity, self.background):
            if not 0.0 <= value <= 1.0:
                raise ValueError("phantom intensities must lie in [0, 1]")
        return self

    def tissue_intensity(self, tissue: str) -> float:
        return getattr(self, f"{tissue}_intensity")

    @classmethod
    def for_dims(cls, dims, **overrides) -> "PhantomSpec":
        """Spec with shell radii scaled to the grid (default 64^3 proportions)."""
        dims = tuple(int(n) for n in dims)
        fields = {
            "dims": dims,
            "csf_radii": tuple(0.4375 * n for n in dims),
            "gm_radii": tuple(0.34375 * n for n in dims),
            "wm_radii": tuple(0.21875 * n for n in dims),
        }
        fields.update(overrides)
        return cls(**fields)


class SnrTriple(BaseModel):
    model_config = ConfigDict(frozen=True)

    snr_wm: float
    snr_gm: float
    snr_csf: float

    @field_validator("snr_wm", "snr_gm", "snr_csf")
    @classmethod
    def validate_positive(cls, value):
        if not math.isfinite(value) or value <= 0:
            raise ValueError(f"SNR must be finite and positive, got {value}")
        return value

    @property
    def is_t1_ordered(self) -> bool:
        return self.snr_wm > self.snr_gm > self.snr_csf

    def as_array(self) -> np.ndarray:
        return np.array([self.snr_wm, self.snr_gm, self.snr_csf], dtype=np.float64)


class ContrastTriple(BaseModel):
    model_config = ConfigDict(frozen=True)

    c_wc: float
    c_wg: float
    c_gc: float

    @field_validator("c_wc", "c_wg", "c_gc")
    @classmethod
    def validate_finite(cls, value):
        if not math.isfinite(value):
            raise ValueError("contrast values must be finite")
        return value

    @property
    def residual(self) -> float:
        """|c_wc - (c_wg + c_gc)|; zero for an exactly consistent triple."""
        return abs(self.c_wc - (self.c_wg + self.c_gc))

    def as_array(self) -> np.ndarray:
        return np.array([self.c_wc, self.c_wg, self.c_gc], dtype=np.float64)

    @classmethod
    def parse(cls, text: str) -> "ContrastTriple":
        try:
            c_wc, c_wg, c_gc = (float(part) for part in text.split(","))
        except ValueError as error:
            raise ArgumentError(f"expected c_wc,c_wg,c_gc, got {text!r}") from error
        return cls(c_wc=c_wc, c_wg=c_wg, c_gc=c_gc)


class DegradationVector(BaseModel):
    model_config = ConfigDict(frozen=True)

    m_wm: float = Field(ge=0.0, le=1.0)
    m_gm: float = Field(ge=0.0, le=1.0)
    m_csf: float = Field(ge=0.0, le=1.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.m_wm, self.m_gm, self.m_csf], dtype=np.float64)

    def for_tissue(self, tissue: str) -> float:
        return getattr(self, f"m_{tissue}")

    @classmethod
    def from_array(cls, values) -> "DegradationVector":
        m_wm, m_gm, m_csf = (float(v) for v in values)
        return cls(m_wm=m_wm, m_gm=m_gm, m_csf=m_csf)

    @classmethod
    def parse(cls, text: str) -> "DegradationVector":
        try:
            values = [float(part) for part in text.split(",")]
        except ValueError as error:
            raise ArgumentError(f"expected m_wm,m_gm,m_csf, got {text!r}") from error
        if len(values) != 3:
            raise ArgumentError(f"expected three degradation factors, got {text!r}")
        return cls.from_array(values)


class SolverConfig(BaseModel):
    epsilon: float = Field(default=1e-3, ge=0.0)
    grid_step: float = Field(default=0.001, gt=0.0, le=1.0)

    @field_validator("grid_step")
    @classmethod
    def validate_divides_unit(cls, value):
        cells = round(1.0 / value)
        if abs(cells * value - 1.0) > 1e-9:
            raise ValueError(f"step {value} does not divide [0, 1] into an integer number of cells")
        return value

    @property
    def cells(self) -> int:
        return round(1.0 / self.grid_step)


class ForwardConfig(BaseModel):
    sigma_smooth: float = Field(default=0.5, ge=0.0)
    df: int = Field(default=2, ge=1)
    noise_rho: float = 5.0
    noise_sigma: float = Field(default=15.0, ge=0.0)
    noise_scale: float = Field(default=NOISE_INTENSITY_SCALE, gt=0.0)
    seed: int = 0


class EmbeddingConfig(BaseModel):
    num_frequencies: int = Field(default=6, ge=0)
    base_scale: float = Field(default=1.0, gt=0.0)
    mode: Literal["log_linear", "gaussian"] = "log_linear"
    seed: int = 0

    @property
    def width(self) -> int:
        return 3 + 6 * self.num_frequencies


class NetworkConfig(BaseModel):
    hidden_layers: int = Field(default=3, ge=1)
    hidden_features: int = Field(default=128, ge=1)
    out_features: Literal[5] = 5
    omega0: float = 20.0
    s0: float = 10.0
    hidden_weight_scale: Optional[float] = None
    intensity_bias_init: float = 0.5

    @property
    def effective_hidden_scale(self) -> float:
        return self.hidden_weight_scale if self.hidden_weight_scale is not None else 1.0 / self.omega0


class TrainConfig(BaseModel):
    l1: float = Field(default=1.0, ge=0.0)
    l2: float = Field(default=1.0, ge=0.0)
    l3: float = Field(default=0.1, ge=0.0)
    l4: float = Field(default=0.001, ge=0.0)
    learning_rate: float = Field(default=1e-4, gt=0.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(default=1e-8, gt=0.0)
    iterations: int = Field(default=5000, ge=1)
    patch_size: int = Field(default=16, ge=1)
    batch_patches: int = Field(default=4, ge=1)
    seed: int = 0
    sigma_smooth: float = Field(default=0.5, ge=0.0)
    df: int = Field(default=2, ge=1)
    dtype: Literal["float32", "float64"] = "float32"
    log_every: int = Field(default=100, ge=1)
    # ULF intensity of signal-free voxels; estimated from the background when unset
    noise_floor: Optional[float] = Field(default=None, ge=0.0)
    embedding: EmbeddingConfig = EmbeddingConfig()
    network: NetworkConfig = NetworkConfig()

    @field_validator("l1", "l2", "l3", "l4")
    @classmethod
    def validate_weight(cls, value):
        if not math.isfinite(value):
            raise ValueError("loss weights must be finite")
        return value

    @model_validator(mode="after")
    def validate_patch(self):
        if self.patch_size % self.df != 0:
            raise ValueError(f"patch_size {self.patch_size} must be a multiple of df {self.df}")
        return self

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32


class LossBreakdown(BaseModel):
    total: float
    mae: float = Field(ge=0.0)
    seg: float = Field(ge=0.0)
    tv: float = Field(ge=0.0)
    preact_reg: float = Field(ge=0.0)


class InrParams(BaseModel):
    """Trainable weights (layers.<i>.weight / layers.<i>.bias) plus the fixed embedding frequencies."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    tensors: Dict[str, torch.Tensor]
    frequencies: torch.Tensor
    network: NetworkConfig
    embedding: EmbeddingConfig

    @model_validator(mode="after")
    def validate_shapes(self):
        widths = [self.embedding.width] + [self.network.hidden_features] * (self.network.hidden_layers + 1)
        widths.append(self.network.out_features)
        for index in range(len(widths) - 1):
            weight = self.tensors.get(f"layers.{index}.weight")
            bias = self.tensors.get(f"layers.{index}.bias")
            if weight is None or bias is None:
                raise ValueError(f"missing parameters for layer {index}")
            if tuple(weight.shape) != (widths[index + 1], widths[index]):
                raise ValueError(f"layer {index} weight has shape {tuple(weight.shape)}")
            if tuple(bias.shape) != (widths[index + 1],):
                raise ValueError(f"layer {index} bias has shape {tuple(bias.shape)}")
        if len(self.tensors) != 2 * (len(widths) - 1):
            raise ValueError("unexpected parameter entries")
        return self

    @property
    def num_layers(self) -> int:
        return len(self.tensors) // 2

    @property
    def dtype(self) -> torch.dtype:
        return self.tensors["layers.0.weight"].dtype

    def layer(self, index: int) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.tensors[f"layers.{index}.weight"], self.tensors[f"layers.{index}.bias"]

    def replace(self, tensors: Dict[str, torch.Tensor]) -> "InrParams":
        return self.model_copy(update={"tensors": dict(tensors)})

    def to(self, dtype: torch.dtype) -> "InrParams":
        return self.model_copy(
            update={
                "tensors": {name: tensor.to(dtype) for name, tensor in self.tensors.items()},
                "frequencies": self.frequencies.to(dtype),
            }
        )

    def all_finite(self) -> bool:
        return all(bool(torch.isfinite(tensor).all()) for tensor in self.tensors.values())


class NetworkOutput(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    intensity: torch.Tensor
    seg_probs: torch.Tensor
    pre_activations: torch.Tensor


class AdamState(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    step: int = Field(default=0, ge=0)
    first_moment: Dict[str, torch.Tensor]
    second_moment: Dict[str, torch.Tensor]


class TrainingBatch(BaseModel):
    """Coordinates of HF-resolution patches with the matching observed ULF patches."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    coords: torch.Tensor  # (P, px, py, pz, 3)
    observed: torch.Tensor  # (P, ux, uy, uz)
    labels: torch.Tensor  # (P, ux, uy, uz) int64
    m: torch.Tensor  # (3,) ordered WM, GM, CSF
    noise_floor: float = 0.0

    @model_validator(mode="after")
    def validate_shapes(self):
        if self.coords.ndim != 5 or self.coords.shape[-1] != 3:
            raise ValueError(f"coords must have shape (P, px, py, pz, 3), got {tuple(self.coords.shape)}")
        if self.coords.shape[0] == 0:
            raise ValueError("batch must contain at least one patch")
        if tuple(self.observed.shape) != tuple(self.labels.shape):
            raise ValueError("observed values and labels must share a shape")
        return self


class MetricReport(BaseModel):
    ssim: float = Field(ge=-1.0, le=1.0)
    mslc: float
    wm_gm_contrast: Optional[float] = None
    dice: Optional[Dict[str, float]] = None
    iou: Optional[Dict[str, float]] = None
    edge_f1: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    rqs: Optional[float] = None

    def flat_row(self) -> Dict[str, Optional[float]]:
        return {
            "ssim": self.ssim,
            "mslc": self.mslc,
            "wm_gm_contrast": self.wm_gm_contrast,
            "edge_f1": self.edge_f1,
            "dice_mean": None if self.dice is None else float(np.mean(list(self.dice.values()))),
            "iou_mean": None if self.iou is None else float(np.mean(list(self.iou.values()))),
            "rqs": self.rqs,
        }


class PipelineConfig(BaseModel):
    phantom: PhantomSpec = PhantomSpec(background=0.05, background_noise_std=0.01)
    target: ContrastTriple = ContrastTriple(c_wc=2.0, c_wg=12.0, c_gc=17.0)
    solver: SolverConfig = SolverConfig()
    forward: ForwardConfig = ForwardConfig()
    train: TrainConfig = TrainConfig()
    upsample: Optional[int] = Field(default=None, ge=1)
    roi_erosion: int = Field(default=2, ge=0)

    @model_validator(mode="after")
    def validate_resolution(self):
        if self.train.df != self.forward.df:
            raise ValueError("train.df must equal forward.df")
        return self

    @property
    def upsample_factor(self) -> int:
        return self.upsample if self.upsample is not None else self.forward.df


class RunManifest(BaseModel):
    command: str
    argv: List[str] = []
    config: dict = {}
    inputs: Dict[str, str] = {}
    outputs: Dict[str, str] = {}
    seed: Optional[int] = None
    tool_version: str = TOOL_VERSION
    created_at: str = Field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    duration_seconds: float = 0.0
