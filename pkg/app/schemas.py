from enum import Enum
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


# --- VARIANTS ---
class Variant(str, Enum):
    TCL = "TCL"
    IDL = "IDL"
    ICDL = "ICDL"
    NONE = "NONE"
    SOURCE_COMBINE = "TCL-SourceCombine"


class Suite(str, Enum):
    BLOBS3 = "blobs3"
    DIGITS5 = "digits5"


# --- CONTRASTIVE ---
class ContrastiveConfig(BaseModel):
    model_config = ConfigDict(populate_by_name=True, frozen=True)

    tau: float = 0.05
    rho: float = 0.95
    lambda_: float = Field(0.3, alias="lambda")
    variant: Variant = Variant.TCL

    @field_validator("tau")
    @classmethod
    def tau_positive(cls, v):
        if v <= 0:
            raise ValueError("tau must be positive")
        return v

    @field_validator("rho")
    @classmethod
    def rho_open_unit(cls, v):
        if not 0.0 < v < 1.0:
            raise ValueError("rho must lie in (0, 1)")
        return v

    @field_validator("lambda_")
    @classmethod
    def lambda_unit(cls, v):
        if not 0.0 <= v <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        return v


# --- TRAINING ---
class TrainConfig(BaseModel):
    """Every hyperparameter of one run. Field names double as config-file keys."""
    model_config = ConfigDict(populate_by_name=True, extra="forbid")

    suite: Suite
    variant: Variant
    seed: int = 0
    target: Optional[str] = None          # domain name; suite default when unset
    sources: Optional[List[str]] = None   # defaults to every other domain

    tau: float = 0.05
    rho: float = 0.95
    alpha: float = 0.99
    lambda_: float = Field(0.3, alias="lambda")
    target_loss: bool = True              # False forces the gate closed (w/o L_tar)

    lr: float = 0.01
    lr_warmup_steps: int = 0
    sgd_momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 60
    warmup_epochs: int = 5
    memory_size: int = 512
    proj_dim: int = 32
    hidden: List[int] = Field(default_factory=lambda: [128, 64])
    kmeans_iters: int = 10
    cluster_pool: int = 2048
    flip_prob: Optional[float] = None     # suite default when unset (off for glyphs)

    n_per_domain: Optional[int] = None    # suite default when unset
    n_test: int = 1000
    log_every: int = 10
    record_wall_time: bool = False

    @field_validator("tau", "lr", "sgd_momentum")
    @classmethod
    def non_negative(cls, v, info):
        if v < 0 or (info.field_name in ("tau", "lr") and v == 0):
            raise ValueError(f"{info.field_name} out of range")
        return v

    @field_validator("rho")
    @classmethod
    def rho_open_unit(cls, v):
        if not 0.0 < v < 1.0:
            raise ValueError("rho must lie in (0, 1)")
        return v

    @field_validator("alpha")
    @classmethod
    def alpha_range(cls, v):
        if not 0.0 <= v < 1.0:
            raise ValueError("alpha must lie in [0, 1)")
        return v

    @field_validator("lambda_")
    @classmethod
    def lambda_unit(cls, v):
        if not 0.0 <= v <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        return v

    @field_validator("batch_size", "epochs", "memory_size", "proj_dim", "log_every", "n_test", "cluster_pool")
    @classmethod
    def positive(cls, v, info):
        if v < 1:
            raise ValueError(f"{info.field_name} must be positive")
        return v

    @field_validator("flip_prob")
    @classmethod
    def flip_unit(cls, v):
        if v is not None and not 0.0 <= v <= 1.0:
            raise ValueError("flip_prob must lie in [0, 1]")
        return v

    @field_validator("warmup_epochs", "kmeans_iters", "lr_warmup_steps")
    @classmethod
    def not_negative(cls, v, info):
        if v < 0:
            raise ValueError(f"{info.field_name} must not be negative")
        return v

    @model_validator(mode="after")
    def check_schedule(self):
        if self.warmup_epochs >= self.epochs:
            raise ValueError("warmup_epochs must be smaller than epochs")
        if self.batch_size > self.memory_size:
            raise ValueError("batch_size must not exceed memory_size")
        return self

    def contrastive(self) -> ContrastiveConfig:
        return ContrastiveConfig(tau=self.tau, rho=self.rho, lambda_=self.lambda_, variant=self.variant)

    def snapshot(self) -> Dict[str, Any]:
        """Canonical JSON-ready dict, `lambda` spelled as in config files."""
        return self.model_dump(mode="json", by_alias=True)


class MetricsRow(BaseModel):
    epoch: int
    step: int
    l_src: float
    l_tar: float
    l_tcl: float
    total: float
    gated_fraction: float
    pl_acc: float
    tgt_acc: Optional[float] = None
    wall_ms: float = 0.0

    @field_validator("pl_acc", "tgt_acc", "gated_fraction")
    @classmethod
    def unit_interval(cls, v):
        if v is not None and not 0.0 <= v <= 1.0:
            raise ValueError("fractions and accuracies must lie in [0, 1]")
        return v


METRICS_COLUMNS = ["epoch", "step", "l_src", "l_tar", "l_tcl", "total", "gated_fraction", "pl_acc", "tgt_acc", "wall_ms"]


# --- RUNS ---
class RunManifest(BaseModel):
    config: Dict[str, Any]
    seed: int
    suite: str
    variant: str
    out_dir: str
    config_hash: str


class RunSummary(BaseModel):
    out_dir: str
    checkpoint: str
    metrics: str
    target_accuracy: float
    key_accuracy: float
    class_mean_accuracy: float
    per_class_accuracy: List[float]
