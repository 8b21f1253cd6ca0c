"""Run configuration: flat ``key = value`` INI sections, validated up front.

Unknown sections or keys are rejected. ``--set section.key=value`` style
overrides win over file values. The resolved configuration is written
back out next to the results so every run can be replayed from it.
"""

from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .baselines import DEFAULT_LOW_VALUES, DETECTORS, BaselineConfig, FeatureSchema
from .ingest import MACHINE_ACCOUNT_PATTERN, TOKEN_FIELDS, DaySplit
from .models import VARIANTS, ModelConfig
from .synth import SynthConfig

TOKENIZATIONS = ("word", "char")
NORMALIZATIONS = ("raw", "diff")
GRANULARITIES = ("event", "user_day")


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending ``section.key``."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


@dataclass
class RunSection:
    seed: int = 0
    events: str = ""
    labels: str = ""
    out_dir: str = "out"
    workers: int = 1


@dataclass
class DataSection:
    dev_days: str = "0-4"
    test_days: str = "5-19"
    skip_days: str = ""
    vocab_days: str = ""  # empty: the dev range
    machine_pattern: str = MACHINE_ACCOUNT_PATTERN


@dataclass
class TokenizerSection:
    mode: str = "char"
    min_count: int = 10
    vocab: str = ""  # path to a saved vocabulary; built from vocab_days if empty


@dataclass
class ModelSection:
    variant: str = "em"
    embed_dim: int = 0  # 0: 30 for char, 128 for word
    hidden_dim: int = 0  # 0: 64 for char, 128 for word
    context_dim: int = 64
    batch_size: int = 64
    score_batch_size: int = 512
    lr: float = 0.0  # 0: 1e-2 for char, 1e-3 for word
    clip: float = 5.0
    epochs: int = 1
    unroll: int = 3
    max_lines_per_user_day: int = 64
    reset_daily: bool = True
    dtype: str = "float32"


@dataclass
class PipelineSection:
    checkpoint: bool = False
    keep_per_token: bool = False


@dataclass
class BaselineSection:
    detector: str = "iso"
    pca_k: int = 5
    pca_standardize: bool = True
    n_trees: int = 100
    sample_size: int = 256


def _default_values():
    return {f: "|".join(DEFAULT_LOW_VALUES.get(f, ())) for f in TOKEN_FIELDS}


@dataclass
class FeaturesSection:
    low_fields: str = ",".join(DEFAULT_LOW_VALUES)
    high_fields: str = "src_user,src_domain,dst_user,dst_domain,src_pc,dst_pc"
    user_threshold: float = 0.05
    values_src_user: str = ""
    values_src_domain: str = ""
    values_dst_user: str = ""
    values_dst_domain: str = ""
    values_src_pc: str = ""
    values_dst_pc: str = ""
    values_auth_type: str = _default_values()["auth_type"]
    values_logon_type: str = _default_values()["logon_type"]
    values_auth_orientation: str = _default_values()["auth_orientation"]
    values_outcome: str = _default_values()["outcome"]


@dataclass
class EvalSection:
    scores: str = ""  # explicit score CSV; otherwise picked from out_dir
    source: str = "model"  # model | iso | pca
    granularity: str = "event"
    normalization: str = "raw"
    split: str = "test"  # all | dev | test
    budget: float = 0.05
    plots: bool = True


@dataclass
class SynthSection:
    n_users: int = 50
    n_pcs: int = 100
    n_days: int = 20
    events_per_user_day: float = 200.0
    redteam_events: int = 40
    redteam_start_day: int = 2
    compromised_users: int = 8
    n_servers: int = 20
    templates_per_user: str = "5-9"
    template_concentration: float = 1.5
    fail_rate: float = 0.02
    noise_rate: float = 0.05
    machine_event_fraction: float = 0.1
    domain: str = "DOM1"


@dataclass
class MatrixSection:
    variants: str = ",".join(VARIANTS)
    tokenizations: str = ",".join(TOKENIZATIONS)
    baselines: str = ",".join(DETECTORS)


SECTIONS = {
    "run": RunSection,
    "data": DataSection,
    "tokenizer": TokenizerSection,
    "model": ModelSection,
    "pipeline": PipelineSection,
    "baseline": BaselineSection,
    "features": FeaturesSection,
    "eval": EvalSection,
    "synth": SynthSection,
    "matrix": MatrixSection,
}


def _coerce(key: str, text: str, typ):
    text = text.strip()
    try:
        if typ is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return typ(text)
    except ValueError:
        raise ConfigError(key, f"cannot parse {text!r} as {typ.__name__}") from None


def parse_range(key: str, text: str) -> tuple[int, int]:
    try:
        lo, _, hi = text.partition("-")
        lo_i = int(lo)
        hi_i = int(hi) if hi else lo_i
    except ValueError:
        raise ConfigError(key, f"expected a day range like '0-4', got {text!r}") from None
    if lo_i > hi_i:
        raise ConfigError(key, f"empty range {text!r}")
    return lo_i, hi_i


def parse_int_set(key: str, text: str) -> frozenset[int]:
    out = set()
    for part in filter(None, (p.strip() for p in text.split(","))):
        lo, hi = parse_range(key, part)
        out.update(range(lo, hi + 1))
    return frozenset(out)


def _csv(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    tokenizer: TokenizerSection = field(default_factory=TokenizerSection)
    model: ModelSection = field(default_factory=ModelSection)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    baseline: BaselineSection = field(default_factory=BaselineSection)
    features: FeaturesSection = field(default_factory=FeaturesSection)
    eval: EvalSection = field(default_factory=EvalSection)
    synth: SynthSection = field(default_factory=SynthSection)
    matrix: MatrixSection = field(default_factory=MatrixSection)

    def set(self, dotted: str, value: str):
        section, _, key = dotted.partition(".")
        if section not in SECTIONS:
            raise ConfigError(dotted, "unknown section")
        obj = getattr(self, section)
        hints = typing.get_type_hints(type(obj))
        if key not in hints:
            raise ConfigError(dotted, "unknown key")
        setattr(obj, key, _coerce(dotted, str(value), hints[key]))

    def update(self, values: dict[str, dict[str, str]]):
        for section, items in values.items():
            for key, value in items.items():
                self.set(f"{section}.{key}", value)

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: dict[str, str] | None = None) -> "RunConfig":
        cfg = cls()
        if path:
            parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
            parser.optionxform = str
            if not parser.read(path):
                raise ConfigError("config", f"cannot read {path}")
            cfg.update({s: dict(parser.items(s)) for s in parser.sections()})
        for k, v in (overrides or {}).items():
            cfg.set(k, v)
        cfg.resolve()
        return cfg

    def resolve(self):
        """Fill tokenization-dependent defaults, then validate everything."""
        word = self.tokenizer.mode == "word"
        if self.model.embed_dim == 0:
            self.model.embed_dim = 128 if word else 30
        if self.model.hidden_dim == 0:
            self.model.hidden_dim = 128 if word else 64
        if self.model.lr == 0:
            self.model.lr = 1e-3 if word else 1e-2
        self.validate()
        return self

    def validate(self):
        choices = [
            ("tokenizer.mode", self.tokenizer.mode, TOKENIZATIONS),
            ("model.variant", self.model.variant, VARIANTS),
            ("model.dtype", self.model.dtype, ("float32", "float64")),
            ("baseline.detector", self.baseline.detector, DETECTORS),
            ("eval.granularity", self.eval.granularity, GRANULARITIES),
            ("eval.normalization", self.eval.normalization, NORMALIZATIONS),
            ("eval.split", self.eval.split, ("all", "dev", "test")),
            ("eval.source", self.eval.source, ("model",) + DETECTORS),
        ]
        for key, value, allowed in choices:
            if value not in allowed:
                raise ConfigError(key, f"invalid value {value!r}; expected one of {', '.join(allowed)}")
        for v in _csv(self.matrix.variants):
            if v not in VARIANTS:
                raise ConfigError("matrix.variants", f"invalid value {v!r}")
        for t in _csv(self.matrix.tokenizations):
            if t not in TOKENIZATIONS:
                raise ConfigError("matrix.tokenizations", f"invalid value {t!r}")
        for d in _csv(self.matrix.baselines):
            if d not in DETECTORS:
                raise ConfigError("matrix.baselines", f"invalid value {d!r}")
        if self.tokenizer.min_count < 1:
            raise ConfigError("tokenizer.min_count", "must be >= 1")
        if not 0 < self.eval.budget <= 1:
            raise ConfigError("eval.budget", "must be in (0, 1]")
        if self.run.workers < 1:
            raise ConfigError("run.workers", "must be >= 1")
        try:
            self.model_config().validate()
        except ValueError as err:
            raise ConfigError("model", str(err)) from None
        self.day_split()
        self.feature_schema()

    # -- typed views ----------------------------------------------------------

    def day_split(self) -> DaySplit:
        try:
            return DaySplit(
                parse_range("data.dev_days", self.data.dev_days),
                parse_range("data.test_days", self.data.test_days),
                parse_int_set("data.skip_days", self.data.skip_days),
            )
        except ConfigError:
            raise
        except ValueError as err:
            raise ConfigError("data.dev_days", str(err)) from None

    def vocab_days(self) -> tuple[int, int]:
        if self.data.vocab_days:
            return parse_range("data.vocab_days", self.data.vocab_days)
        return self.day_split().dev_days

    def model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(**dataclasses.asdict(m), seed=self.run.seed)

    def baseline_config(self) -> BaselineConfig:
        return BaselineConfig(**dataclasses.asdict(self.baseline), seed=self.run.seed)

    def feature_schema(self) -> FeatureSchema:
        f = self.features
        low = {}
        for name in _csv(f.low_fields):
            if name not in TOKEN_FIELDS:
                raise ConfigError("features.low_fields", f"unknown field {name!r}")
            values = tuple(v for v in getattr(f, f"values_{name}").split("|") if v)
            if not values:
                raise ConfigError(f"features.values_{name}", "low-cardinality field needs at least one value")
            low[name] = values
        high = tuple(_csv(f.high_fields))
        for name in high:
            if name not in TOKEN_FIELDS:
                raise ConfigError("features.high_fields", f"unknown field {name!r}")
        try:
            return FeatureSchema(low, high, f.user_threshold)
        except ValueError as err:
            raise ConfigError("features", str(err)) from None

    def synth_config(self) -> SynthConfig:
        d = dataclasses.asdict(self.synth)
        d["templates_per_user"] = parse_range("synth.templates_per_user", d["templates_per_user"])
        return SynthConfig(**d)

    # -- echo -------------------------------------------------------------------

    def to_ini(self) -> str:
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            for key, value in dataclasses.asdict(getattr(self, name)).items():
                if isinstance(value, bool):
                    value = "true" if value else "false"
                lines.append(f"{key} = {value}")
            lines.append("")
        return "\n".join(lines)

    def echo(self, out_dir: str | Path, name: str = "config.ini") -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / name
        path.write_text(self.to_ini())
        return path
