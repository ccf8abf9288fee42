"""Experiment specification and its flat ``key = value`` text form."""

import dataclasses
from dataclasses import dataclass, fields

from .simulator import ConfigError, RoundConfig

ROUND_FIELDS = tuple(f.name for f in fields(RoundConfig))


@dataclass(frozen=True)
class ExperimentSpec:
    # round protocol
    strategy: str = "fedmpq"
    clients_per_round: int = 10
    M: int = 4
    K: int = 32
    D: int = 2
    residual: float = 0.001
    gamma: float = 0.99
    sq_bits: int = 8
    topk_ratio: float = 0.1
    use_public: bool = True
    weighted: bool = True
    kmeans_iters: int = 25
    rounds: int = 100
    target_accuracy: float = 0.9
    lr_client: float = 0.1
    lr_server: float = 1.0
    batch_size: int = 10
    # federation
    n_clients: int = 100
    classes: int = 10
    dim: int = 20
    samples_per_client: int = 20
    alpha: float = 0.3
    public_size: int = 20
    public_mismatch: float = 0.8
    test_size: int = 2000
    separation: float = 1.0
    model: str = "mlp"
    hidden: int = 64
    # driver
    seeds: tuple = (0,)
    stop_at_target: bool = False
    output_dir: str = "runs"

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        self.validate()

    def validate(self):
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.model not in ("mlp", "logreg"):
            raise ConfigError(f"model must be 'mlp' or 'logreg', got {self.model!r}")
        if self.model == "mlp" and not 1 <= self.hidden <= 64:
            raise ConfigError(f"hidden must lie in [1, 64], got {self.hidden}")
        if min(self.n_clients, self.classes, self.dim, self.samples_per_client, self.public_size, self.test_size) < 1:
            raise ConfigError("federation counts must be >= 1")
        if self.alpha <= 0:
            raise ConfigError("alpha must be > 0")
        if not 0.0 <= self.public_mismatch <= 1.0:
            raise ConfigError("public_mismatch must lie in [0, 1]")
        if self.clients_per_round > self.n_clients:
            raise ConfigError("clients_per_round exceeds n_clients")
        self.round_config(self.seeds[0])

    def round_config(self, seed: int) -> RoundConfig:
        return RoundConfig(**{k: getattr(self, k) for k in ROUND_FIELDS if k != "seed"}, seed=seed)

    def federation_kwargs(self, seed: int) -> dict:
        return dict(
            n_clients=self.n_clients,
            classes=self.classes,
            dim=self.dim,
            samples_per_client=self.samples_per_client,
            alpha=self.alpha,
            public_size=self.public_size,
            public_mismatch=self.public_mismatch,
            seed=seed,
            test_size=self.test_size,
            separation=self.separation,
        )

    def replace(self, **changes) -> "ExperimentSpec":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {format_value(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "ExperimentSpec":
        return cls(**parse_pairs(text))


FIELD_TYPES = {f.name: type(f.default) for f in fields(ExperimentSpec)}


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def convert(name: str, raw: str):
    if name not in FIELD_TYPES:
        raise ConfigError(f"unknown key {name!r}")
    kind = FIELD_TYPES[name]
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is tuple:
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def parse_pairs(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = convert(key, value)
    return out
