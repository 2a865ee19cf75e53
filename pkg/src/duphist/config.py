"""key=value run configuration.

Lines are ``key = value`` with '#' comments; unknown keys are errors so
typos fail loudly. Defaults give the reference parameterization used by
the simulator and sampler alike.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

from .model import ModelParams
from .substitution import HkyParams

LN10 = math.log(10.0)
LN100 = math.log(100.0)
LN1000 = math.log(1000.0)

DEFAULT_WEIGHTS = (
    1.0,        # w1  ln(unwound bp)
    LN10,       # w2  seen in the previous history
    -10.0,      # w3  mean cherry distance
    -1.0,       # w4  cherry distance variance
    -LN100,     # w5  sub-run of a larger candidate
    -LN10,      # w6  boundary conditions violated
    LN10,       # w7  adjacent-pair reduction
    -LN10,      # w8  coupled deletion present
    3.0,        # w9  ln(d / (d + target length))
    -LN1000,    # w10 speciation-coupled deletion count
)


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    # generative model
    lambda_rate: float = 200.0
    mean_dup_length: float = 14307.0
    mean_dup_distance: float = 306718.0
    p_inversion: float = 0.39
    p_deletion: float = 0.05
    mean_del_length: float = 14307.0
    root_branch_length: float = 0.5
    hky_kappa: float = 4.0
    hky_pi_a: float = 0.25
    hky_pi_c: float = 0.25
    hky_pi_g: float = 0.25
    hky_pi_t: float = 0.25
    # proposal feature weights
    w1: float = DEFAULT_WEIGHTS[0]
    w2: float = DEFAULT_WEIGHTS[1]
    w3: float = DEFAULT_WEIGHTS[2]
    w4: float = DEFAULT_WEIGHTS[3]
    w5: float = DEFAULT_WEIGHTS[4]
    w6: float = DEFAULT_WEIGHTS[5]
    w7: float = DEFAULT_WEIGHTS[6]
    w8: float = DEFAULT_WEIGHTS[7]
    w9: float = DEFAULT_WEIGHTS[8]
    w10: float = DEFAULT_WEIGHTS[9]
    heats: tuple = (0.5, 0.6, 1.0, 1.2)
    # chains
    iterations: int = 10000
    burn_in: int = 2500
    chains: int = 2
    tree_keep_prob: float = 0.95
    # guide tree pools
    pool_iterations: int = 10000
    pool_burn_in: int = 2500
    pool_thin: int = 10
    pool_branch_prior_mean: float = 0.1
    collapse_subs: float = 5.0
    # simulator
    ancestral_length: int = 10000
    min_atom_bp: int = 500
    # window atomizer
    window: int = 500
    identity: float = 0.9
    kmer: int = 16

    def weights(self) -> tuple:
        return tuple(getattr(self, f"w{i}") for i in range(1, 11))

    def hky(self) -> HkyParams:
        return HkyParams(
            self.hky_kappa,
            (self.hky_pi_a, self.hky_pi_c, self.hky_pi_g, self.hky_pi_t),
        )

    def model_params(self) -> ModelParams:
        return ModelParams(
            lambda_rate=self.lambda_rate,
            mean_dup_length=self.mean_dup_length,
            mean_dup_distance=self.mean_dup_distance,
            p_inversion=self.p_inversion,
            p_deletion=self.p_deletion,
            mean_del_length=self.mean_del_length,
            root_branch_length=self.root_branch_length,
            hky=self.hky(),
        )

    def snapshot(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            key = "lambda" if f.name == "lambda_rate" else f.name
            if f.name == "heats":
                out[key] = ",".join(f"{h:g}" for h in value)
            else:
                out[key] = value
        return out


_KEY_TO_FIELD = {
    ("lambda" if f.name == "lambda_rate" else f.name): f.name
    for f in fields(Config)
}


def _coerce(name: str, raw: str):
    raw = raw.strip()
    if name == "heats":
        try:
            values = tuple(float(x) for x in raw.split(",") if x.strip())
        except ValueError:
            raise ConfigError(f"bad heats list {raw!r}") from None
        if not values:
            raise ConfigError("heats list is empty")
        return values
    default = getattr(Config(), name)
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for key {name!r}") from None


def parse_config_text(text: str, base: Config | None = None) -> Config:
    cfg = base or Config()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _KEY_TO_FIELD:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        name = _KEY_TO_FIELD[key]
        setattr(cfg, name, _coerce(name, raw))
    validate_config(cfg)
    return cfg


def read_config(path: str, base: Config | None = None) -> Config:
    with open(path) as fh:
        try:
            return parse_config_text(fh.read(), base)
        except ConfigError as exc:
            raise ConfigError(f"{path}: {exc}") from None


def validate_config(cfg: Config) -> None:
    if cfg.iterations < 1 or cfg.burn_in < 0 or cfg.burn_in >= cfg.iterations:
        raise ConfigError("need 0 <= burn_in < iterations")
    if cfg.chains < 1:
        raise ConfigError("chains must be >= 1")
    if not 0 <= cfg.tree_keep_prob <= 1:
        raise ConfigError("tree_keep_prob must be in [0, 1]")
    if cfg.pool_iterations < 1 or cfg.pool_burn_in >= cfg.pool_iterations:
        raise ConfigError("need pool_burn_in < pool_iterations")
    if cfg.pool_thin < 1:
        raise ConfigError("pool_thin must be >= 1")
    if cfg.window < 1 or cfg.kmer < 1 or cfg.kmer > cfg.window:
        raise ConfigError("need 1 <= kmer <= window")
    if not 0 < cfg.identity <= 1:
        raise ConfigError("identity must be in (0, 1]")
    if cfg.ancestral_length < 1:
        raise ConfigError("ancestral_length must be positive")
    if cfg.min_atom_bp < 0:
        raise ConfigError("min_atom_bp must be nonnegative")
    cfg.model_params()  # raises ModelError on bad model keys
