"""INI-file configuration covering every tunable in the package."""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field

from .agent import TrainConfig
from .eliminator import DEFAULT_TAU
from .harness import DEFAULT_STEP_BUDGET, PipelineFlags, SplitConfig
from .lmbridge import HttpConfig, OracleConfig
from .policy import PolicyConfig
from .scene import SceneConfig


class ConfigError(ValueError):
    pass


@dataclass
class AppConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    splits: SplitConfig = field(default_factory=SplitConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    http: HttpConfig | None = None
    flags: PipelineFlags = field(default_factory=PipelineFlags)
    tau_r: float = DEFAULT_TAU
    tau_o: float = DEFAULT_TAU
    step_budget: int = DEFAULT_STEP_BUDGET

    def __post_init__(self):
        self.scene.validate()
        if not (0.0 <= self.tau_r <= 1.0 and 0.0 <= self.tau_o <= 1.0):
            raise ConfigError("thresholds must lie in [0, 1]")
        if self.step_budget < 0:
            raise ConfigError("step_budget must be non-negative")


_SECTIONS = ("scene", "splits", "policy", "train", "oracle", "http", "pipeline")


def _get(parser, section, key, cast, default):
    if not parser.has_option(section, key):
        return default
    raw = parser.get(section, key)
    try:
        if cast is bool:
            return parser.getboolean(section, key)
        return cast(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for [{section}] {key}: {raw!r}") from exc


def parse_config(text: str) -> AppConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")

    d = AppConfig()  # defaults
    scene = SceneConfig(
        min_receptacles=_get(parser, "scene", "min_receptacles", int, d.scene.min_receptacles),
        max_receptacles=_get(parser, "scene", "max_receptacles", int, d.scene.max_receptacles),
        max_objects_per_receptacle=_get(parser, "scene", "max_objects_per_receptacle",
                                        int, d.scene.max_objects_per_receptacle),
        anomaly_rate=_get(parser, "scene", "anomaly_rate", float, d.scene.anomaly_rate),
    )
    splits = SplitConfig(
        n_train=_get(parser, "splits", "n_train", int, d.splits.n_train),
        n_seen=_get(parser, "splits", "n_seen", int, d.splits.n_seen),
        n_unseen=_get(parser, "splits", "n_unseen", int, d.splits.n_unseen),
        unseen_seed_offset=_get(parser, "splits", "unseen_seed_offset", int,
                                d.splits.unseen_seed_offset),
        scene=scene,
    )
    policy = PolicyConfig(
        layers=_get(parser, "policy", "layers", int, d.policy.layers),
        heads=_get(parser, "policy", "heads", int, d.policy.heads),
        hidden=_get(parser, "policy", "hidden", int, d.policy.hidden),
        embed_dim=_get(parser, "policy", "embed_dim", int, d.policy.embed_dim),
        ffn_mult=_get(parser, "policy", "ffn_mult", int, d.policy.ffn_mult),
    )
    train = TrainConfig(
        learning_rate=_get(parser, "train", "learning_rate", float, d.train.learning_rate),
        momentum=_get(parser, "train", "momentum", float, d.train.momentum),
        epochs=_get(parser, "train", "epochs", int, d.train.epochs),
        shuffle_seed=_get(parser, "train", "shuffle_seed", int, d.train.shuffle_seed),
    )
    oracle = OracleConfig(
        noise_epsilon=_get(parser, "oracle", "noise_epsilon", float, d.oracle.noise_epsilon),
        rng_seed=_get(parser, "oracle", "rng_seed", int, d.oracle.rng_seed),
        embed_dim=_get(parser, "oracle", "embed_dim", int, d.oracle.embed_dim),
    )
    http = None
    if parser.has_option("http", "endpoint"):
        http = HttpConfig(
            endpoint=parser.get("http", "endpoint"),
            retries=_get(parser, "http", "retries", int, 2),
            timeout_ms=_get(parser, "http", "timeout_ms", int, 10_000),
            max_inflight=_get(parser, "http", "max_inflight", int, 4),
            auth_token=_get(parser, "http", "auth_token", str, None),
        )
    flags = PipelineFlags(
        plan=_get(parser, "pipeline", "plan", bool, False),
        eliminate=_get(parser, "pipeline", "eliminate", bool, False),
        track=_get(parser, "pipeline", "track", bool, False),
    )
    return AppConfig(
        scene=scene, splits=splits, policy=policy, train=train, oracle=oracle,
        http=http, flags=flags,
        tau_r=_get(parser, "pipeline", "tau_r", float, d.tau_r),
        tau_o=_get(parser, "pipeline", "tau_o", float, d.tau_o),
        step_budget=_get(parser, "pipeline", "step_budget", int, d.step_budget),
    )


def load_config(path: str | None = None) -> AppConfig:
    if path is None:
        return AppConfig()
    with open(path) as fh:
        return parse_config(fh.read())


def render_config(config: AppConfig) -> str:
    """Serialize the fully resolved configuration, defaults included."""
    parser = configparser.ConfigParser()
    parser["scene"] = {
        "min_receptacles": str(config.scene.min_receptacles),
        "max_receptacles": str(config.scene.max_receptacles),
        "max_objects_per_receptacle": str(config.scene.max_objects_per_receptacle),
        "anomaly_rate": str(config.scene.anomaly_rate),
    }
    parser["splits"] = {
        "n_train": str(config.splits.n_train),
        "n_seen": str(config.splits.n_seen),
        "n_unseen": str(config.splits.n_unseen),
        "unseen_seed_offset": str(config.splits.unseen_seed_offset),
    }
    parser["policy"] = {k: str(v) for k, v in config.policy.to_dict().items()}
    parser["train"] = {
        "learning_rate": str(config.train.learning_rate),
        "momentum": str(config.train.momentum),
        "epochs": str(config.train.epochs),
        "shuffle_seed": str(config.train.shuffle_seed),
    }
    parser["oracle"] = {
        "noise_epsilon": str(config.oracle.noise_epsilon),
        "rng_seed": str(config.oracle.rng_seed),
        "embed_dim": str(config.oracle.embed_dim),
    }
    if config.http is not None:
        parser["http"] = {
            "endpoint": config.http.endpoint,
            "retries": str(config.http.retries),
            "timeout_ms": str(config.http.timeout_ms),
            "max_inflight": str(config.http.max_inflight),
        }
        if config.http.auth_token:
            parser["http"]["auth_token"] = config.http.auth_token
    parser["pipeline"] = {
        "plan": str(config.flags.plan).lower(),
        "eliminate": str(config.flags.eliminate).lower(),
        "track": str(config.flags.track).lower(),
        "tau_r": str(config.tau_r),
        "tau_o": str(config.tau_o),
        "step_budget": str(config.step_budget),
    }
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
