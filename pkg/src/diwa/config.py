"""Run configuration: defaults, ``key = value`` files and a canonical hash."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields

__all__ = ["TrainConfig", "ConfigError", "general_sr_config"]

# fields that do not change what a checkpoint contains
_UNHASHED = frozenset({"steps", "T_eval", "final_noise", "name", "data_dir", "runs_dir", "n_holdout", "log_every"})


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    scale: int = 4
    hr_size: int = 32
    channels: int = 3
    T_train: int = 200
    T_eval: int = 100
    beta_start: float = 1e-6
    beta_end: float = 1e-2
    base_width: int = 16
    channel_mults: tuple[int, ...] = (1, 2, 2)
    n_blocks: int = 2
    predictor_hidden: int = 32
    predictor_layers: int = 10
    dropout: float = 0.1
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 8
    steps: int = 2000
    seed: int = 7
    use_dwt: bool = True
    use_init_predictor: bool = True
    final_noise: bool = False
    hflip: bool = True
    n_images: int = 200
    n_holdout: int = 20
    log_every: int = 50
    name: str = "diwa"
    data_dir: str = "data/synth"
    runs_dir: str = "runs"

    def __post_init__(self) -> None:
        self.channel_mults = tuple(int(m) for m in self.channel_mults)
        self.validate()

    def validate(self) -> None:
        if not self.T_train >= self.T_eval >= 1:
            raise ConfigError(f"need T_train >= T_eval >= 1, got {self.T_train}, {self.T_eval}")
        if self.hr_size % (2 * self.scale):
            raise ConfigError(f"hr_size {self.hr_size} not divisible by 2*scale")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ConfigError("need 0 < beta_start <= beta_end < 1")
        spatial = self.hr_size // 2 if self.use_dwt else self.hr_size
        if spatial % 2 ** (len(self.channel_mults) - 1):
            raise ConfigError(
                f"denoiser input {spatial}px not divisible by 2^{len(self.channel_mults) - 1}"
            )
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be >= 1 and steps >= 0")

    # --- serialisation ---
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        lines = []
        for f in sorted(fields(self), key=lambda f: f.name):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str, base: "TrainConfig | None" = None) -> "TrainConfig":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            values[key] = val
        return (base or cls()).override(values)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.loads(fh.read())

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())

    def override(self, values: dict) -> "TrainConfig":
        """Copy with string or typed values replacing fields by name."""
        types = {f.name: f for f in fields(self)}
        kw = self.to_dict()
        for key, val in values.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kw[key] = _parse(key, val, type(getattr(self, key)))
        return TrainConfig(**kw)

    def hash(self) -> int:
        """64-bit hash of the fields that shape parameters and training."""
        items = [
            f"{f.name}={_format(getattr(self, f.name))}"
            for f in sorted(fields(self), key=lambda f: f.name)
            if f.name not in _UNHASHED
        ]
        digest = hashlib.sha256("\n".join(items).encode()).digest()
        return int.from_bytes(digest[:8], "little")


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(key: str, val, typ):
    if not isinstance(val, str):
        return tuple(val) if typ is tuple else typ(val)
    try:
        if typ is bool:
            low = val.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(val)
        if typ is tuple:
            return tuple(int(x) for x in val.replace("[", "").replace("]", "").split(",") if x.strip())
        if typ is int:
            return int(val)
        if typ is float:
            return float(val)
        return val
    except ValueError:
        raise ConfigError(f"bad value for {key}: {val!r}") from None


def general_sr_config(**overrides) -> TrainConfig:
    """The 4x general-SR architecture: width 48, mults [1,2,2,4], two blocks."""
    base = dict(
        hr_size=192,
        T_train=2000,
        T_eval=500,
        base_width=48,
        channel_mults=(1, 2, 2, 4),
        n_blocks=2,
        lr=2e-5,
        batch_size=256,
        steps=100_000,
    )
    base.update(overrides)
    return TrainConfig(**base)
