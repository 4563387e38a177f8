"""Configuration dataclasses and the ``section.key=value`` run-config format."""
import dataclasses
import typing
from dataclasses import dataclass, field, fields

from stcl.errors import ConfigError


@dataclass
class GridSpec:
    # default bounding box roughly covers Manhattan
    lon_min: float = -74.02
    lon_max: float = -73.92
    lat_min: float = 40.70
    lat_max: float = 40.82
    x_cells: int = 10
    y_cells: int = 20
    interval_minutes: int = 15
    t0: int = 1451606400  # 2016-01-01T00:00:00Z
    num_intervals: int = 0

    def validate(self):
        if not self.lon_min < self.lon_max:
            raise ConfigError("grid.lon_min must be < grid.lon_max")
        if not self.lat_min < self.lat_max:
            raise ConfigError("grid.lat_min must be < grid.lat_max")
        for name in ("x_cells", "y_cells", "interval_minutes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"grid.{name} must be positive")
        if self.num_intervals < 0:
            raise ConfigError("grid.num_intervals must be >= 0")
        return self

    @property
    def regions(self):
        return self.x_cells * self.y_cells

    @property
    def interval_seconds(self):
        return self.interval_minutes * 60

    @property
    def intervals_per_day(self):
        return 1440 // self.interval_minutes


@dataclass
class DataConfig:
    m_span: int = 4
    train_fraction: float = 0.75
    val_fraction: float = 0.1

    def validate(self):
        if self.m_span < 1:
            raise ConfigError("data.m_span must be >= 1")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("data.train_fraction must lie in (0, 1)")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("data.val_fraction must lie in [0, 1)")
        return self


@dataclass
class ModelConfig:
    kind: str = "stcl"
    d_model: int = 64
    d_f: int = 256
    num_layers: int = 3
    num_heads: int = 4
    dropout: float = 0.1
    m_pool: int = 5
    stfm_channels: int = 256
    stfm_kernel: int = 5
    ft_kernel_sizes: tuple = (3, 5)
    attention_window: int = 3
    t_hist: int = 12
    intervals_per_day: int = 96
    days_per_week: int = 7
    accident_hidden: int = 0  # 0 means d_model
    use_stfm: bool = True
    use_accident_encoding: bool = True
    use_ft_block: bool = True
    ft_causal_in_decoder: bool = True
    local_attention: bool = True
    mlp_hidden: tuple = (128, 64, 32)

    def validate(self):
        if self.kind not in ("stcl", "mlp", "oracle"):
            raise ConfigError(f"model.kind must be stcl, mlp or oracle, got {self.kind!r}")
        for name in ("d_model", "d_f", "num_heads", "m_pool", "stfm_channels", "stfm_kernel",
                     "t_hist", "intervals_per_day", "days_per_week"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be positive")
        if self.num_layers < 0 or self.attention_window < 0 or self.accident_hidden < 0:
            raise ConfigError("model.num_layers, attention_window, accident_hidden must be >= 0")
        if self.d_model % self.num_heads:
            raise ConfigError(
                f"model.d_model={self.d_model} is not divisible by model.num_heads={self.num_heads}")
        if self.m_pool % 2 == 0:
            raise ConfigError(f"model.m_pool must be odd, got {self.m_pool}")
        if self.stfm_kernel % 2 == 0:
            raise ConfigError(f"model.stfm_kernel must be odd, got {self.stfm_kernel}")
        if not self.ft_kernel_sizes or any(k < 1 for k in self.ft_kernel_sizes):
            raise ConfigError("model.ft_kernel_sizes must be a non-empty list of positive ints")
        if self.t_hist < 2:
            raise ConfigError("model.t_hist must be >= 2")
        if not 0 <= self.dropout < 1:
            raise ConfigError("model.dropout must lie in [0, 1)")
        return self

    @property
    def head_dim(self):
        return self.d_model // self.num_heads

    @property
    def accident_width(self):
        return self.accident_hidden or self.d_model

    @classmethod
    def tiny(cls, **overrides):
        """Desk-scale preset used by the gradient and learning checks."""
        base = dict(d_model=8, d_f=16, num_layers=1, num_heads=2, m_pool=3, stfm_channels=16,
                    t_hist=6, attention_window=3)
        base.update(overrides)
        return cls(**base).validate()


@dataclass
class TrainConfig:
    batch_size: int = 64
    warmup: int = 4000
    max_epochs: int = 50
    seed: int = 0
    eval_region_threshold: float = 10.0
    mlp_lr: float = 1e-3
    lr_scale: float = 1.0

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.warmup < 1:
            raise ConfigError("train.warmup must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("train.max_epochs must be >= 1")
        if self.lr_scale <= 0 or self.mlp_lr <= 0:
            raise ConfigError("train.lr_scale and train.mlp_lr must be positive")
        return self


@dataclass
class SynthConfig:
    days: int = 14
    base_rate: float = 20.0
    daily_amplitude: float = 0.5
    weekday_factor: tuple = (1.0, 1.0, 1.0, 1.0, 1.0, 0.8, 0.8)
    trip_minutes: float = 6.0
    accident_rate: float = 0.003
    accident_duration: int = 6
    accident_lag: int = 0
    accident_suppression: float = 0.3
    accident_boost: float = 3.0
    seed: int = 0

    def validate(self):
        if self.days < 1:
            raise ConfigError("synth.days must be >= 1")
        if self.base_rate < 0 or self.accident_rate < 0:
            raise ConfigError("synth rates must be >= 0")
        if not 0 <= self.daily_amplitude <= 1:
            raise ConfigError("synth.daily_amplitude must lie in [0, 1]")
        if len(self.weekday_factor) != 7 or any(f <= 0 for f in self.weekday_factor):
            raise ConfigError("synth.weekday_factor needs 7 positive factors")
        if self.accident_suppression <= 0 or self.accident_boost <= 0:
            raise ConfigError("synth accident factors must be > 0")
        if self.accident_duration < 1 or self.accident_lag < 0:
            raise ConfigError("synth.accident_duration must be >= 1 and accident_lag >= 0")
        if self.trip_minutes <= 0:
            raise ConfigError("synth.trip_minutes must be > 0")
        return self


@dataclass
class RunConfig:
    grid: GridSpec = field(default_factory=GridSpec)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def validate(self):
        for f in fields(self):
            getattr(self, f.name).validate()
        return self

    def items(self):
        for f in fields(self):
            section = getattr(self, f.name)
            for sf in fields(section):
                yield f"{f.name}.{sf.name}", getattr(section, sf.name)

    def to_text(self):
        lines = ["# resolved run configuration"]
        lines += [f"{key}={_format(value)}" for key, value in self.items()]
        return "\n".join(lines) + "\n"

    def set(self, key, raw):
        section_name, _, name = key.partition(".")
        section = getattr(self, section_name, None) if section_name in _SECTIONS else None
        if section is None or name not in {f.name for f in fields(section)}:
            raise ConfigError(f"unknown config key {key!r}")
        hint = typing.get_type_hints(type(section))[name]
        try:
            value = _parse(hint, raw.strip())
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from None
        setattr(section, name, value)

    def copy(self):
        return parse_config_text(self.to_text())

    def replace(self, section, **changes):
        out = self.copy()
        setattr(out, section, dataclasses.replace(getattr(out, section), **changes))
        return out


_SECTIONS = ("grid", "data", "model", "train", "synth")


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse(hint, raw):
    if hint is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError("expected a boolean")
    if hint is int:
        return int(raw)
    if hint is float:
        return float(raw)
    if hint is tuple:
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        return tuple(float(p) if any(c in p for c in ".eE") else int(p) for p in parts)
    return raw


def parse_config_text(text, base=None):
    cfg = base.copy() if base is not None else RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        cfg.set(key.strip(), value)
    return cfg


def load_config(path, base=None):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, base).validate()


def diff_keys(a, b, prefixes=("model.",)):
    """Keys under ``prefixes`` whose values differ between two run configs."""
    left, right = dict(a.items()), dict(b.items())
    return [k for k in left if k.startswith(prefixes) and left[k] != right[k]]
