"""Desk-scale validation: synthetic CTR environment and A/B statistics.

The simulator replays the personalization experiment at desk scale:
a LinUCB-driven group and a random-prompt control group see identical
context streams (paired by impression index) and draw independent
Bernoulli rewards from a synthetic CTR surface. Live CTR numbers are
not reproducible here; what the simulator validates is directional:
with a dominant arm the bandit group must win significantly and its
regret curve must flatten.

The ``report`` path renders the delimited summary (CSV + JSON) together
with matplotlib figures next to it.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import random
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .bandit import FeatureSpec, LinUcbModel, RandomPolicy, build_context, select_prompt, update

logger = logging.getLogger(__name__)


class ZeroBaseline(Exception):
    """Relative gain is undefined for a zero control CTR."""


@dataclass(frozen=True)
class ZTestResult:
    z: float
    p_two_sided: float


def two_prop_ztest(clicks_a: int, n_a: int, clicks_b: int, n_b: int) -> ZTestResult:
    """Pooled two-proportion z-test, two-sided p from the standard normal.

    Degenerate pools (pooled rate 0 or 1) report z = 0, p = 1.
    """
    if n_a < 1 or n_b < 1:
        raise ValueError("both sample sizes must be >= 1")
    if not (0 <= clicks_a <= n_a and 0 <= clicks_b <= n_b):
        raise ValueError("clicks must lie in [0, n]")
    pooled = (clicks_a + clicks_b) / (n_a + n_b)
    if pooled in (0.0, 1.0):
        return ZTestResult(z=0.0, p_two_sided=1.0)
    se = math.sqrt(pooled * (1.0 - pooled) * (1.0 / n_a + 1.0 / n_b))
    z = (clicks_a / n_a - clicks_b / n_b) / se
    p = math.erfc(abs(z) / math.sqrt(2.0))
    return ZTestResult(z=z, p_two_sided=p)


def relative_ctr_gain(ctr_t: float, ctr_c: float) -> float:
    """ctr_t / ctr_c - 1."""
    if ctr_c <= 0:
        raise ZeroBaseline(f"control CTR {ctr_c} is not positive")
    return ctr_t / ctr_c - 1.0


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-v))


@dataclass(frozen=True)
class SimConfig:
    """Synthetic environment; everything is deterministic given the seed.

    True CTR of arm a in context x is sigmoid(w_a . x) scaled into
    [ctr_min, ctr_max]. Arm weights come from ``weights`` when given
    (n_arms rows of d), otherwise they are drawn from the seed. With a
    positive ``dominant_gap`` the dominant arm's CTR is pinned to the
    best other arm plus the gap, uniformly across contexts, which is
    the constructed-signal scenario.
    """

    seed: int = 0
    n_impressions: int = 50_000
    n_arms: int = 3
    d: int = 16
    alpha: float = 1.0
    ctr_min: float = 0.01
    ctr_max: float = 0.10
    dominant_arm: int = 0
    dominant_gap: float = 0.0
    weights: tuple | None = None

    def __post_init__(self):
        if not (0.0 <= self.ctr_min <= self.ctr_max <= 1.0):
            raise ValueError("need 0 <= ctr_min <= ctr_max <= 1")
        if self.n_arms < 1 or self.n_impressions < 0:
            raise ValueError("n_arms >= 1 and n_impressions >= 0 required")
        if not 0 <= self.dominant_arm < self.n_arms:
            raise ValueError("dominant_arm out of range")
        if self.weights is not None:
            w = tuple(tuple(float(v) for v in row) for row in self.weights)
            if len(w) != self.n_arms or any(len(row) != self.d for row in w):
                raise ValueError(f"weights must be {self.n_arms} rows of {self.d}")
            object.__setattr__(self, "weights", w)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "SimConfig":
        return cls(**d)


@dataclass
class SimTrace:
    """Per-impression outcomes for both paired policies."""

    config: SimConfig
    bandit_arms: list[int]
    bandit_rewards: list[int]
    control_arms: list[int]
    control_rewards: list[int]
    cum_clicks_bandit: list[int]
    cum_clicks_control: list[int]
    regret_curve: list[float]

    def to_json(self) -> str:
        body = {
            "config": self.config.to_dict(),
            "bandit_arms": self.bandit_arms,
            "bandit_rewards": self.bandit_rewards,
            "control_arms": self.control_arms,
            "control_rewards": self.control_rewards,
            "cum_clicks_bandit": self.cum_clicks_bandit,
            "cum_clicks_control": self.cum_clicks_control,
            "regret_curve": self.regret_curve,
        }
        return json.dumps(body, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "SimTrace":
        body = json.loads(text)
        return cls(
            config=SimConfig.from_dict(body["config"]),
            bandit_arms=body["bandit_arms"],
            bandit_rewards=body["bandit_rewards"],
            control_arms=body["control_arms"],
            control_rewards=body["control_rewards"],
            cum_clicks_bandit=body["cum_clicks_bandit"],
            cum_clicks_control=body["cum_clicks_control"],
            regret_curve=body["regret_curve"],
        )

    def save(self, path: str | Path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "SimTrace":
        return cls.from_json(Path(path).read_text())


_SIM_CATEGORIES = ("apparel", "electronics", "home")
_SIM_BUCKETS = (-2, -1, 0, 1, 2)
_SIM_DEVICES = ("mobile", "desktop", "tablet")
_SIM_DAYPARTS = ("morning", "afternoon", "evening", "night")


def sim_feature_spec(d: int) -> FeatureSpec:
    return FeatureSpec(dimension=d, categories=_SIM_CATEGORIES, buckets=_SIM_BUCKETS, numeric=())


def iter_contexts(cfg: SimConfig):
    """Deterministic context stream shared by both policies."""
    spec = sim_feature_spec(cfg.d)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 101]))
    for _ in range(cfg.n_impressions):
        user = {
            "device": _SIM_DEVICES[rng.integers(len(_SIM_DEVICES))],
            "daypart": _SIM_DAYPARTS[rng.integers(len(_SIM_DAYPARTS))],
        }
        item = {"category": _SIM_CATEGORIES[rng.integers(len(_SIM_CATEGORIES))]}
        bucket = int(_SIM_BUCKETS[rng.integers(len(_SIM_BUCKETS))])
        yield build_context(user, item, bucket, spec)


def simulate(cfg: SimConfig) -> SimTrace:
    """Run the paired bandit-vs-random experiment on one context stream.

    Both policies see the same context at each impression index and draw
    rewards independently; the bandit trains online with immediate
    rewards. The regret curve accumulates best-arm minus chosen-arm true
    CTR for the bandit group.
    """
    spec = sim_feature_spec(cfg.d)
    weight_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 202]))
    bandit_reward_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 303]))
    control_reward_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 404]))

    if cfg.weights is not None:
        weights = np.asarray(cfg.weights, dtype=np.float64)
    else:
        weights = weight_rng.normal(0.0, 0.5, size=(cfg.n_arms, cfg.d))
    arm_ids = [f"arm-{i}" for i in range(cfg.n_arms)]
    model = LinUcbModel(spec, alpha=cfg.alpha)
    control = RandomPolicy(seed=cfg.seed * 7919 + 17)

    trace = SimTrace(cfg, [], [], [], [], [], [], [])
    clicks_b = clicks_c = 0
    regret = 0.0
    for x in iter_contexts(cfg):
        ctr = cfg.ctr_min + (cfg.ctr_max - cfg.ctr_min) * _sigmoid(weights @ x)
        if cfg.dominant_gap > 0:
            if cfg.n_arms == 1:
                best_other = ctr[0]
            else:
                best_other = max(v for i, v in enumerate(ctr) if i != cfg.dominant_arm)
            ctr[cfg.dominant_arm] = min(1.0, best_other + cfg.dominant_gap)

        chosen = select_prompt(model, x, arm_ids)
        b_arm = arm_ids.index(chosen)
        b_reward = int(bandit_reward_rng.random() < ctr[b_arm])
        update(model, chosen, x, b_reward)

        c_arm = arm_ids.index(control.select(arm_ids))
        c_reward = int(control_reward_rng.random() < ctr[c_arm])

        clicks_b += b_reward
        clicks_c += c_reward
        regret += float(ctr.max() - ctr[b_arm])

        trace.bandit_arms.append(b_arm)
        trace.bandit_rewards.append(b_reward)
        trace.control_arms.append(c_arm)
        trace.control_rewards.append(c_reward)
        trace.cum_clicks_bandit.append(clicks_b)
        trace.cum_clicks_control.append(clicks_c)
        trace.regret_curve.append(regret)
    return trace


def learning_occurred(trace: SimTrace) -> bool | None:
    """Average per-impression regret over the last 10% below the first 10%."""
    n = len(trace.regret_curve)
    if n < 20:
        return None
    k = max(1, n // 10)
    first = trace.regret_curve[k - 1] / k
    last = (trace.regret_curve[-1] - trace.regret_curve[-1 - k]) / k
    return last < first


def summarize(trace: SimTrace, samples: int = 100) -> dict:
    """Per-group counts, CTRs, gain and significance, plus curve samples."""
    n = len(trace.bandit_rewards)
    clicks_b = trace.cum_clicks_bandit[-1] if n else 0
    clicks_c = trace.cum_clicks_control[-1] if n else 0
    groups = {
        "bandit": {"impressions": n, "clicks": clicks_b, "ctr": clicks_b / n if n else 0.0},
        "random_control": {"impressions": n, "clicks": clicks_c, "ctr": clicks_c / n if n else 0.0},
    }
    z = p = gain = None
    if n:
        result = two_prop_ztest(clicks_b, n, clicks_c, n)
        z, p = result.z, result.p_two_sided
        if clicks_c:
            gain = relative_ctr_gain(groups["bandit"]["ctr"], groups["random_control"]["ctr"])
    step = max(1, n // samples)
    regret_samples = [
        {"impression": i + 1, "cumulative_regret": trace.regret_curve[i]}
        for i in range(step - 1, n, step)
    ]
    return {
        "groups": groups,
        "relative_gain": gain,
        "z": z,
        "p": p,
        "learning_occurred": learning_occurred(trace),
        "regret_samples": regret_samples,
    }


# ---------------------------------------------------------------------------
# event-journal reports (service traffic)
# ---------------------------------------------------------------------------

def report_from_events(path: str | Path, window: float | None = None) -> dict:
    """Recompute the A/B summary from a service events journal.

    Events are JSON lines {ts, type: impression|click|expiry, request_id,
    group, ...}; clicks were only logged when accepted inside the
    attribution window, so CTR is clicks / impressions per group.
    """
    impressions: dict[str, int] = {}
    clicks: dict[str, int] = {}
    max_ts = None
    events = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        ev = json.loads(line)
        events.append(ev)
        ts = float(ev.get("ts", 0.0))
        max_ts = ts if max_ts is None else max(max_ts, ts)
    for ev in events:
        if window is not None and float(ev.get("ts", 0.0)) < max_ts - window:
            continue
        group = ev.get("group", "unknown")
        if ev.get("type") == "impression":
            impressions[group] = impressions.get(group, 0) + 1
        elif ev.get("type") == "click":
            clicks[group] = clicks.get(group, 0) + 1
    groups = {
        g: {
            "impressions": impressions.get(g, 0),
            "clicks": clicks.get(g, 0),
            "ctr": clicks.get(g, 0) / impressions[g] if impressions.get(g) else 0.0,
        }
        for g in sorted(set(impressions) | set(clicks))
    }
    z = p = gain = None
    b, c = groups.get("bandit"), groups.get("random_control")
    if b and c and b["impressions"] and c["impressions"]:
        result = two_prop_ztest(b["clicks"], b["impressions"], c["clicks"], c["impressions"])
        z, p = result.z, result.p_two_sided
        if c["ctr"] > 0:
            gain = relative_ctr_gain(b["ctr"], c["ctr"])
    return {"groups": groups, "relative_gain": gain, "z": z, "p": p, "regret_samples": []}


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def report_text(summary: dict) -> str:
    lines = [
        f"{'group':<16} {'impressions':>12} {'clicks':>8} {'ctr':>8}",
        "-" * 48,
    ]
    for name, g in summary["groups"].items():
        lines.append(
            f"{name:<16} {g['impressions']:>12} {g['clicks']:>8} {g['ctr']:>8.4f}"
        )
    gain = summary.get("relative_gain")
    z, p = summary.get("z"), summary.get("p")
    lines.append("")
    lines.append(f"relative gain: {f'{gain:+.2%}' if gain is not None else 'n/a'}")
    lines.append(
        f"two-proportion z-test: z={f'{z:.3f}' if z is not None else 'n/a'}"
        f"  p={f'{p:.4g}' if p is not None else 'n/a'}"
    )
    if summary.get("learning_occurred") is not None:
        lines.append(f"learning occurred (regret flattened): {summary['learning_occurred']}")
    return "\n".join(lines)


def write_report(summary: dict, out_dir: str | Path, trace: SimTrace | None = None) -> list[Path]:
    """Write summary.json, groups.csv and PNG figures into out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    path = out / "summary.json"
    path.write_text(json.dumps(summary, indent=2, sort_keys=True))
    written.append(path)

    path = out / "groups.csv"
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["group", "impressions", "clicks", "ctr"])
        for name, g in summary["groups"].items():
            writer.writerow([name, g["impressions"], g["clicks"], f"{g['ctr']:.6f}"])
    written.append(path)

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    names = list(summary["groups"])
    ctrs = [summary["groups"][n]["ctr"] for n in names]
    ax.bar(names, ctrs, color=["#2a6fdb", "#999999", "#cccccc"][: len(names)])
    ax.set_ylabel("CTR")
    ax.set_title("CTR by group")
    fig.tight_layout()
    path = out / "ctr_by_group.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    if summary.get("regret_samples"):
        xs = [s["impression"] for s in summary["regret_samples"]]
        ys = [s["cumulative_regret"] for s in summary["regret_samples"]]
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(xs, ys)
        ax.set_xlabel("impression")
        ax.set_ylabel("cumulative regret")
        ax.set_title("Bandit regret")
        fig.tight_layout()
        path = out / "regret_curve.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    if trace is not None and trace.cum_clicks_bandit:
        n = len(trace.cum_clicks_bandit)
        step = max(1, n // 200)
        xs = list(range(step, n + 1, step))
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(xs, [trace.cum_clicks_bandit[i - 1] / i for i in xs], label="bandit")
        ax.plot(xs, [trace.cum_clicks_control[i - 1] / i for i in xs], label="random control")
        ax.set_xlabel("impression")
        ax.set_ylabel("cumulative CTR")
        ax.legend()
        fig.tight_layout()
        path = out / "ctr_over_time.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written
