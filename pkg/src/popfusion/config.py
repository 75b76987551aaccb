"""Layered run configuration (defaults < preset < file < CLI overrides) and
the replayable run manifest."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .reward import BetaCoefficients

TOOL_VERSION = "0.1.0"

PRESETS = {
    "abide": {
        "lambda_smooth": 1.0,
        "mu_degree": 1e-4,
        "eta_reward": 1e-2,
        "embed_dim": 500,
        "depth_imaging": 2,
        "depth_non_imaging": 3,
        "pool_ratio": 0.8,
    },
    "adhd200": {
        "lambda_smooth": 1.0,
        "mu_degree": 1e-1,
        "eta_reward": 1e-2,
        "embed_dim": 500,
        "depth_imaging": 2,
        "depth_non_imaging": 3,
        "pool_ratio": 0.8,
    },
}


@dataclass
class TrainConfig:
    # optimization
    learning_rate: float = 1e-4
    weight_decay: float = 5e-4
    max_epochs: int = 300
    patience: int = 100
    dropout: float = 0.3
    edge_dropout: float = 0.3
    # architecture
    embed_dim: int = 500
    d_hidden: int = 64
    n_heads: int = 4
    pool_ratio: float = 0.8
    depth_imaging: int = 2
    depth_non_imaging: int = 3
    architecture: str = "gtunet"
    reconstructor: str = "vae"
    modality: str = "both"
    # reward system
    beta_reward: float = 1.0
    beta_penalty: float = -2.0
    beta_motivation: float = 0.5
    eta_reward: float = 1e-2
    # graph
    sigma: float = 0.0          # 0 = mean training-pair correlation distance
    graph_threshold: float = 0.0
    mc_inference_samples: int = 0
    # regularization weights
    lambda_smooth: float = 1.0
    mu_degree: float = 1e-4
    # reconstructor pretraining
    vae_learning_rate: float = 1e-3
    vae_weight_decay: float = 5e-4
    vae_epochs: int = 3000
    vae_restrict_to_train: bool = False
    # feature selection
    rfe_step: float = 0.1
    # protocol
    n_folds: int = 10
    seed: int = 0
    sampling_ratio: float = 1.0
    dataset_preset: str = ""
    parallel_folds: bool = False
    export_embeddings: bool = True
    export_tables: bool = False
    export_graph: bool = False
    drop_missing: bool = False
    label_map: str = ""         # e.g. "HC=0,ASD=1"; empty = literal 0/1
    # synthetic generator
    synth_n_subjects: int = 200
    synth_n_roi: int = 16
    synth_attributes: str = "site=cat3,sex=cat2,age=cont2.0"
    synth_informativeness: str = "0.5,0.5,0.5"
    synth_informative_features: int = 8
    synth_effect_size: float = 0.35
    synth_noise_scale: float = 0.25

    def validate(self) -> "TrainConfig":
        if self.learning_rate <= 0 or self.vae_learning_rate <= 0:
            raise ValidationError("learning rates must be positive")
        if self.weight_decay < 0 or self.vae_weight_decay < 0:
            raise ValidationError("weight decay must be nonnegative")
        if self.max_epochs < 0:
            raise ValidationError("max_epochs must be nonnegative")
        if self.patience < 0 or (self.max_epochs > 0 and self.patience > self.max_epochs):
            raise ValidationError("patience must lie in [0, max_epochs]")
        if not 0 <= self.dropout < 1 or not 0 <= self.edge_dropout < 1:
            raise ValidationError("dropout rates must lie in [0, 1)")
        if not 0 < self.pool_ratio <= 1:
            raise ValidationError("pool_ratio must lie in (0, 1]")
        if not 0 < self.sampling_ratio <= 1:
            raise ValidationError("sampling_ratio must lie in (0, 1]")
        if self.embed_dim < 1 or self.d_hidden < 1:
            raise ValidationError("embedding widths must be positive")
        if self.d_hidden % self.n_heads != 0:
            raise ValidationError("d_hidden must be divisible by n_heads")
        if self.depth_imaging < 1 or self.depth_non_imaging < 1:
            raise ValidationError("encoder depths must be >= 1")
        if self.modality not in ("both", "imaging", "non-imaging"):
            raise ValidationError("modality must be both|imaging|non-imaging")
        if self.n_folds < 2:
            raise ValidationError("n_folds must be >= 2")
        if not 0 < self.rfe_step < 1:
            raise ValidationError("rfe_step must lie in (0, 1)")
        if self.mc_inference_samples < 0:
            raise ValidationError("mc_inference_samples must be >= 0")
        # raises with the inequality spelled out when violated
        BetaCoefficients.uniform(1, self.beta_reward, self.beta_penalty,
                                 self.beta_motivation)
        from .encoder import ARCHITECTURES
        if self.architecture not in ARCHITECTURES:
            raise ValidationError(f"unknown architecture {self.architecture!r}")
        from .alignment import RECONSTRUCTOR_KINDS
        if self.reconstructor not in RECONSTRUCTOR_KINDS:
            raise ValidationError(f"unknown reconstructor {self.reconstructor!r}")
        return self

    def beta(self, v: int) -> BetaCoefficients:
        return BetaCoefficients.uniform(v, self.beta_reward, self.beta_penalty,
                                        self.beta_motivation)

    def parsed_label_map(self) -> dict:
        if not self.label_map:
            return {"0": 0, "1": 1}
        out = {}
        for pair in self.label_map.split(","):
            key, _, val = pair.partition("=")
            if not key or val not in ("0", "1"):
                raise ValidationError(f"bad label_map entry {pair!r}; use NAME=0|1")
            out[key.strip()] = int(val)
        if set(out.values()) != {0, 1}:
            raise ValidationError("label_map must cover both classes")
        return out

    def replace(self, **kwargs) -> "TrainConfig":
        return dataclasses.replace(self, **kwargs).validate()


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _coerce(name: str, raw) -> object:
    if name not in _FIELDS:
        raise ValidationError(f"unknown config key {name!r}")
    target = _FIELDS[name].type
    if isinstance(raw, str):
        raw = raw.strip()
    try:
        if target in ("bool", bool):
            if isinstance(raw, bool):
                return raw
            if str(raw).lower() in ("1", "true", "yes", "on"):
                return True
            if str(raw).lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if target in ("int", int):
            return int(str(raw), 0)
        if target in ("float", float):
            return float(raw)
        return str(raw)
    except ValueError:
        raise ValidationError(f"config key {name!r}: cannot parse {raw!r}") from None


def _read_config_file(path) -> dict:
    """Flat key=value text; [section] headers group keys but do not scope
    them (keys are globally unique). '#' starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped or (stripped.startswith("[") and stripped.endswith("]")):
            continue
        key, sep, value = stripped.partition("=")
        if not sep:
            raise ValidationError(f"{path}:{lineno}: expected key=value")
        out[key.strip()] = value.strip()
    return out


def parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs or ():
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise ValidationError(f"override {pair!r} must look like key=value")
        out[key.strip()] = value.strip()
    return out


def resolve_config(file_path=None, overrides=None, preset=None) -> "TrainConfig":
    """Layered resolution: dataclass defaults, then preset, then config file,
    then CLI overrides. Unknown keys are rejected at every layer."""
    layers = []
    file_values = _read_config_file(file_path) if file_path else {}
    preset_name = (overrides or {}).get("dataset_preset") or \
        file_values.get("dataset_preset") or preset or ""
    if preset_name:
        if preset_name not in PRESETS:
            raise ValidationError(f"unknown preset {preset_name!r}; "
                                  f"expected one of {sorted(PRESETS)}")
        layers.append(dict(PRESETS[preset_name], dataset_preset=preset_name))
    layers.append(file_values)
    layers.append(overrides or {})
    merged = {}
    for layer in layers:
        for key, raw in layer.items():
            merged[key] = _coerce(key, raw)
    return TrainConfig(**merged).validate()


@dataclass
class RunManifest:
    config: dict
    input_digests: dict = field(default_factory=dict)
    artifact_paths: list = field(default_factory=list)
    tool_version: str = TOOL_VERSION
    timestamp: str = ""

    @classmethod
    def create(cls, config: TrainConfig, input_files=()) -> "RunManifest":
        digests = {}
        for f in input_files:
            p = Path(f)
            digests[str(p)] = hashlib.sha256(p.read_bytes()).hexdigest()
        return cls(config=dataclasses.asdict(config), input_digests=digests,
                   timestamp=time.strftime("%Y-%m-%dT%H:%M:%S"))

    def register(self, path) -> None:
        self.artifact_paths.append(str(path))

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=2,
                                         default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def parse_synthetic_attributes(spec: str):
    """Parse 'name=catK' / 'name=contTOL' attribute descriptors."""
    from .data import AttributeSpec

    specs = []
    for chunk in spec.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        name, sep, kind = chunk.partition("=")
        if not sep:
            raise ValidationError(f"bad attribute descriptor {chunk!r}")
        kind = kind.strip()
        if kind.startswith("cat"):
            size = int(kind[3:] or "2")
            if size < 2:
                raise ValidationError(f"attribute {name!r}: need >= 2 categories")
            vocab = tuple(f"{name.strip()}_{i}" for i in range(size))
            specs.append(AttributeSpec(name=name.strip(), kind="categorical",
                                       vocabulary=vocab))
        elif kind.startswith("cont"):
            tol = float(kind[4:] or "2.0")
            specs.append(AttributeSpec(name=name.strip(), kind="continuous",
                                       tolerance=tol))
        else:
            raise ValidationError(f"attribute {name!r}: kind must be catK or contTOL")
    if not specs:
        raise ValidationError("no synthetic attributes configured")
    return specs


def parse_informativeness(spec: str, n_attributes: int) -> np.ndarray:
    values = np.array([float(x) for x in spec.split(",") if x.strip() != ""])
    if len(values) != n_attributes:
        raise ValidationError(
            f"informativeness lists {len(values)} values for {n_attributes} attributes")
    return values
