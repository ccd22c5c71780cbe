"""Service configuration: YAML file with environment overrides.

Every field has an override ``CREATIVEGEN_<FIELD>`` (upper case); the
``splits`` override takes JSON, e.g. ``{"bandit": 50, "random_control": 50}``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import yaml

from ..bandit import FeatureSpec
from ..generation import PipelineConfig, PromptPool, default_pool
from ..imaging import LayoutConfig

ENV_PREFIX = "CREATIVEGEN_"


@dataclass(frozen=True)
class Splits:
    """Percentage of traffic per experiment group; must sum to 100."""

    bandit: int = 45
    random_control: int = 45
    original_only: int = 10

    def __post_init__(self):
        total = self.bandit + self.random_control + self.original_only
        if total != 100:
            raise ValueError(f"splits must sum to 100, got {total}")
        if min(self.bandit, self.random_control, self.original_only) < 0:
            raise ValueError("splits must be non-negative")


@dataclass(frozen=True)
class AppConfig:
    data_dir: str = "data"
    backend: str = "mock"              # "mock" or a worker endpoint URL
    host: str = "127.0.0.1"
    port: int = 8040

    # bandit
    alpha: float = 1.0
    dimension: int = 32
    categories: tuple[str, ...] = ("apparel", "electronics", "home")
    buckets: tuple[int, ...] = tuple(range(-8, 9))
    control_seed: int = 20240901
    experiment_salt: str = "exp-1"
    splits: Splits = field(default_factory=Splits)

    # attribution
    attribution_window_s: float = 3600.0

    # imaging / pipeline
    bucket_log_width: float = 0.2
    max_fill_fraction: float = 0.6
    anchor_x: float = 0.5
    baseline_y: float = 0.7
    max_upscale: float = 2.0
    layout_background: str = "transparent"
    reinforce_edges: bool = True
    condition_on_product: bool = True

    # queue / workers
    workers: int = 2
    lease_timeout_s: float = 600.0
    max_attempts: int = 3
    queue_bound: int = 10000
    worker_poll_s: float = 0.05

    # moderation and callbacks
    moderation_mode: str = "post"      # off | post | pre
    callback_retries: int = 3
    callback_backoff_s: float = 0.5
    backend_timeout_s: float = 30.0
    fetch_timeout_s: float = 5.0

    prompts_path: str | None = None
    console_dist: str | None = None

    def __post_init__(self):
        if self.moderation_mode not in ("off", "post", "pre"):
            raise ValueError(f"moderation_mode {self.moderation_mode!r} not in off/post/pre")
        object.__setattr__(self, "categories", tuple(self.categories))
        object.__setattr__(self, "buckets", tuple(int(b) for b in self.buckets))

    # -- derived pieces -------------------------------------------------------

    def feature_spec(self) -> FeatureSpec:
        return FeatureSpec(
            dimension=self.dimension, categories=self.categories, buckets=self.buckets
        )

    def layout(self) -> LayoutConfig:
        return LayoutConfig(
            max_fill_fraction=self.max_fill_fraction,
            anchor_x=self.anchor_x,
            baseline_y=self.baseline_y,
            max_upscale=self.max_upscale,
            background=self.layout_background,
        )

    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(
            layout=self.layout(),
            reinforce_edges=self.reinforce_edges,
            condition_on_product=self.condition_on_product,
            bucket_log_width=self.bucket_log_width,
            max_attempts=self.max_attempts,
        )

    def prompt_pool(self) -> PromptPool:
        if self.prompts_path:
            return PromptPool.from_json(self.prompts_path)
        return default_pool()

    # -- loading ---------------------------------------------------------------

    @classmethod
    def load(cls, path: str | Path | None = None, env=None) -> "AppConfig":
        env = os.environ if env is None else env
        raw: dict = {}
        if path is not None:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        if "splits" in raw and isinstance(raw["splits"], dict):
            raw["splits"] = Splits(**raw["splits"])
        cfg = cls(**raw)

        overrides = {}
        for f in fields(cls):
            key = ENV_PREFIX + f.name.upper()
            if key not in env:
                continue
            value = env[key]
            if f.name == "splits":
                overrides["splits"] = Splits(**json.loads(value))
            elif f.name in ("categories", "buckets"):
                overrides[f.name] = tuple(json.loads(value))
            elif f.type in ("int", int):
                overrides[f.name] = int(value)
            elif f.type in ("float", float):
                overrides[f.name] = float(value)
            elif f.type in ("bool", bool):
                overrides[f.name] = value.lower() in ("1", "true", "yes", "on")
            else:
                overrides[f.name] = value
        return replace(cfg, **overrides) if overrides else cfg
