"""INI-style experiment configuration.

Example::

    [experiment]
    name = pipeline
    seed = 0

    [data]
    num_classes = 3
    noise_rate = 0.3

    [scoring]
    p_values = 0.2, 0.5, 1.0

Unknown sections or keys are rejected. Blank values mean "use the default".
"""

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional, Tuple

from .errors import ConfigError
from .models import LOSS_FAMILIES

EXPERIMENTS = ("pipeline", "triptych", "proxy_transfer", "checkpoint_ablation", "noise_rejection")


@dataclass
class ExperimentSection:
    name: str = "pipeline"
    seed: int = 0
    output_dir: str = "runs/out"


@dataclass
class DataSection:
    source: str = "synthetic"
    num_classes: int = 3
    feature_dim: int = 20
    pool_size: int = 2000
    test_size: int = 2000
    anchor_source_size: int = 500
    separation: float = 3.0
    noise_rate: float = 0.3
    # IDX source; the pool is the first `limit` training images
    images: str = ""
    labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    limit: int = 55_000


@dataclass
class AnchorSection:
    size: int = 100
    strategy: str = "stratified"


@dataclass
class ModelSection:
    loss_family: str = "multinomial_logistic"
    ridge_lambda: float = 1e-2
    # proxy only
    train_fraction: float = 0.0
    feature_dim: Optional[int] = None
    projection: str = "gaussian"


@dataclass
class ScoringSection:
    mode: str = "inner_product"
    eta: Optional[float] = None
    key: str = "s"
    p_values: Tuple[float, ...] = (0.2, 0.5, 1.0)
    q_values: Tuple[float, ...] = (0.05, 0.1, 0.2, 0.3, 0.4, 0.5)
    fractions: Tuple[float, ...] = (0.0, 0.05, 0.25, 1.0)
    overlap_p: Tuple[float, ...] = (0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0)
    ablation_p: float = 0.5
    histogram_p: float = 0.2
    histogram_bins: int = 30
    damping: float = 1e-3
    if_key: str = "abs"
    absolute_overlap: bool = False
    top_k_loo: int = 200
    max_exact_loo: int = 5000


@dataclass
class TrainSection:
    grad_norm_tol: float = 1e-6
    max_iters: int = 200_000
    step_rule: str = "backtracking"


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    data: DataSection = field(default_factory=DataSection)
    anchor: AnchorSection = field(default_factory=AnchorSection)
    proxy: ModelSection = field(default_factory=ModelSection)
    target: ModelSection = field(default_factory=ModelSection)
    scoring: ScoringSection = field(default_factory=ScoringSection)
    train: TrainSection = field(default_factory=TrainSection)

    def to_dict(self):
        return dataclasses.asdict(self)

    def hash(self):
        """SHA-256 of everything that can influence results.

        The output directory is excluded: moving a run does not change it.
        """
        d = self.to_dict()
        d["experiment"].pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def validate(self):
        e, d, a, s, t = self.experiment, self.data, self.anchor, self.scoring, self.train
        _check(e.name in EXPERIMENTS, f"experiment.name must be one of {EXPERIMENTS}")
        _check(d.source in ("synthetic", "idx"), "data.source must be synthetic or idx")
        if d.source == "idx":
            _check(bool(d.images and d.labels), "data.images and data.labels are required for idx")
        _check(d.num_classes >= 2, "data.num_classes must be >= 2")
        _check(d.feature_dim >= 1, "data.feature_dim must be >= 1")
        _check(d.pool_size >= d.num_classes, "data.pool_size must be >= num_classes")
        _check(0.0 <= d.noise_rate <= 1.0, "data.noise_rate must lie in [0, 1]")
        _check(d.separation > 0, "data.separation must be positive")
        _check(a.strategy in ("stratified", "uniform"), "anchor.strategy must be stratified or uniform")
        _check(1 <= a.size <= d.anchor_source_size, "anchor.size must lie in [1, anchor_source_size]")
        for name, m in (("proxy", self.proxy), ("target", self.target)):
            _check(m.loss_family in LOSS_FAMILIES, f"{name}.loss_family must be one of {LOSS_FAMILIES}")
            _check(m.ridge_lambda >= 0, f"{name}.ridge_lambda must be >= 0")
            _check(0.0 <= m.train_fraction <= 1.0, f"{name}.train_fraction must lie in [0, 1]")
            _check(m.projection in ("gaussian", "identity"), f"{name}.projection must be gaussian or identity")
        _check(s.mode in ("inner_product", "exact_delta", "both"), "scoring.mode is invalid")
        _check(s.key in ("s", "delta"), "scoring.key must be s or delta")
        if s.mode == "exact_delta":
            _check(s.key == "delta", "scoring.key must be delta when mode = exact_delta")
        if s.mode == "inner_product":
            _check(s.key == "s", "scoring.key must be s when mode = inner_product")
        _check(s.eta is None or s.eta > 0, "scoring.eta must be positive")
        for label, values in (
            ("p_values", s.p_values),
            ("q_values", s.q_values),
            ("overlap_p", s.overlap_p),
            ("ablation_p", (s.ablation_p,)),
            ("histogram_p", (s.histogram_p,)),
        ):
            _check(len(values) > 0 and all(0 < p <= 1 for p in values), f"scoring.{label} must lie in (0, 1]")
        _check(all(0 <= f <= 1 for f in s.fractions), "scoring.fractions must lie in [0, 1]")
        _check(s.damping >= 0, "scoring.damping must be >= 0")
        _check(s.if_key in ("abs", "signed"), "scoring.if_key must be abs or signed")
        _check(s.histogram_bins >= 2, "scoring.histogram_bins must be >= 2")
        _check(t.grad_norm_tol > 0, "train.grad_norm_tol must be positive")
        _check(t.step_rule in ("fixed", "backtracking"), "train.step_rule must be fixed or backtracking")
        return self


def _check(cond, message):
    if not cond:
        raise ConfigError(message)


def _convert(raw, default, name):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, tuple):
            return tuple(float(v) for v in raw.replace(",", " ").split())
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if default is None:
            # optional numeric fields
            return float(raw) if any(c in raw for c in ".eE") else int(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"cannot parse {name} = {raw!r}") from exc


def parse_config(text, overrides=None):
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    cfg = ExperimentConfig()
    sections = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)}
    for sec in parser.sections():
        if sec not in sections:
            raise ConfigError(f"unknown section [{sec}]")
        target = sections[sec]
        fields = {f.name: f for f in dataclasses.fields(target)}
        for key, raw in parser.items(sec):
            if key not in fields:
                raise ConfigError(f"unknown key {sec}.{key}")
            if raw.strip() == "":
                continue
            setattr(target, key, _convert(raw, getattr(target, key), f"{sec}.{key}"))
    for dotted, value in (overrides or {}).items():
        sec, key = dotted.split(".")
        setattr(sections[sec], key, value)
    return cfg.validate()


def load_config(path, overrides=None):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, overrides)
