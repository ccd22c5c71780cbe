"""LinUCB prompt selection and the random control policy.

Disjoint LinUCB: each prompt (arm) keeps its own ridge state (A, b) and
is scored by the upper confidence bound

    p = theta^T x + alpha * sqrt(x^T A^-1 x),   theta = A^-1 b

computed through a Cholesky solve, never an explicit inverse. Arms are
created lazily at (I, 0) the first time a prompt is seen. Updates funnel
through a single lock per model (single-writer discipline); reads take
the same lock briefly, so selections always see a consistent snapshot.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.linalg import solve_triangular

logger = logging.getLogger(__name__)

SNAPSHOT_FORMAT_VERSION = 1


class BanditError(Exception):
    pass


class EmptyPool(BanditError):
    """No eligible prompts to choose from."""


class NumericalFailure(BanditError):
    """Factorization of an arm's A matrix failed; the arm was re-initialized."""


def _stable_hash(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "big")


@dataclass(frozen=True)
class FeatureSpec:
    """Fixed layout of the context vector.

    Index 0 is the constant 1.0. It is followed by a one-hot block per
    product category, a one-hot block per placement bucket index, one
    slot per declared numeric feature (min-max scaled into [0, 1]), and
    the remaining indices form the hash space for free-form user
    key/value features (1.0 per present feature, collisions additive).

    With F user features the encoded L2 norm is bounded by
    sqrt(3 + len(numeric) + F^2).
    """

    dimension: int = 32
    categories: tuple[str, ...] = ("apparel", "electronics", "home")
    buckets: tuple[int, ...] = tuple(range(-8, 9))
    numeric: tuple[tuple[str, float, float], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "categories", tuple(self.categories))
        object.__setattr__(self, "buckets", tuple(self.buckets))
        object.__setattr__(self, "numeric", tuple(tuple(n) for n in self.numeric))
        if self.hash_slots < 1:
            raise ValueError(
                f"dimension {self.dimension} leaves no hash slots after "
                f"{1 + len(self.categories) + len(self.buckets) + len(self.numeric)} fixed indices"
            )
        for name, lo, hi in self.numeric:
            if not hi > lo:
                raise ValueError(f"numeric feature {name!r} needs hi > lo")

    @property
    def category_offset(self) -> int:
        return 1

    @property
    def bucket_offset(self) -> int:
        return 1 + len(self.categories)

    @property
    def numeric_offset(self) -> int:
        return self.bucket_offset + len(self.buckets)

    @property
    def hash_offset(self) -> int:
        return self.numeric_offset + len(self.numeric)

    @property
    def hash_slots(self) -> int:
        return self.dimension - self.hash_offset

    def hash_index(self, key: str, value: str) -> int:
        return self.hash_offset + _stable_hash(f"{key}={value}") % self.hash_slots

    def to_dict(self) -> dict:
        return {
            "dimension": self.dimension,
            "categories": list(self.categories),
            "buckets": list(self.buckets),
            "numeric": [list(n) for n in self.numeric],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureSpec":
        return cls(
            dimension=int(d["dimension"]),
            categories=tuple(d.get("categories", ())),
            buckets=tuple(int(b) for b in d.get("buckets", ())),
            numeric=tuple((n[0], float(n[1]), float(n[2])) for n in d.get("numeric", ())),
        )


def build_context(
    user: Mapping[str, str] | None,
    item: Mapping | None,
    placement,
    spec: FeatureSpec,
) -> np.ndarray:
    """Encode user, item and placement features as a context vector.

    ``item`` carries ``category`` and optional ``attributes``; ``placement``
    is a BucketId (anything with an ``index``) or a plain bucket index.
    Unknown categories or bucket indices leave their block all-zero
    (logged, not an error). Numeric features are looked up by name in the
    item attributes first, then the user features; every other user pair
    is hashed.
    """
    x = np.zeros(spec.dimension, dtype=np.float64)
    x[0] = 1.0

    category = (item or {}).get("category")
    if category is not None:
        try:
            x[spec.category_offset + spec.categories.index(category)] = 1.0
        except ValueError:
            logger.warning("unknown category %r; leaving category block zero", category)

    bucket_index = getattr(placement, "index", placement)
    if bucket_index is not None:
        try:
            x[spec.bucket_offset + spec.buckets.index(int(bucket_index))] = 1.0
        except ValueError:
            logger.warning("bucket index %r outside spec; leaving bucket block zero", bucket_index)

    attributes = dict((item or {}).get("attributes") or {})
    user = dict(user or {})
    numeric_keys = set()
    for i, (name, lo, hi) in enumerate(spec.numeric):
        numeric_keys.add(name)
        raw = attributes.get(name, user.get(name))
        if raw is None:
            continue
        try:
            v = float(raw)
        except (TypeError, ValueError):
            logger.warning("numeric feature %r has non-numeric value %r", name, raw)
            continue
        v = min(max(v, lo), hi)
        x[spec.numeric_offset + i] = (v - lo) / (hi - lo)

    for key, value in user.items():
        if key in numeric_keys:
            continue
        x[spec.hash_index(key, str(value))] += 1.0

    if not np.isfinite(x).all():
        raise ValueError("context vector contains non-finite components")
    return x


class ArmState:
    """Per-arm ridge state with a lazily cached Cholesky factor."""

    __slots__ = ("A", "b", "x_sum", "pulls", "_chol", "_theta")

    def __init__(self, d: int):
        self.A = np.eye(d, dtype=np.float64)
        self.b = np.zeros(d, dtype=np.float64)
        self.x_sum = np.zeros(d, dtype=np.float64)
        self.pulls = 0
        self._chol = None
        self._theta = None

    def invalidate(self):
        self._chol = None
        self._theta = None

    def chol(self) -> np.ndarray:
        if self._chol is None:
            self._chol = np.linalg.cholesky(self.A)
        return self._chol

    def theta(self) -> np.ndarray:
        if self._theta is None:
            L = self.chol()
            y = solve_triangular(L, self.b, lower=True, check_finite=False)
            self._theta = solve_triangular(L.T, y, lower=False, check_finite=False)
        return self._theta

    def reset(self):
        d = self.A.shape[0]
        self.A = np.eye(d, dtype=np.float64)
        self.b = np.zeros(d, dtype=np.float64)
        self.x_sum = np.zeros(d, dtype=np.float64)
        self.pulls = 0
        self.invalidate()


class LinUcbModel:
    """Disjoint LinUCB over a lazily created arm per prompt id."""

    def __init__(self, spec: FeatureSpec, alpha: float = 1.0):
        if alpha < 0:
            raise ValueError("alpha must be >= 0")
        self.spec = spec
        self.alpha = float(alpha)
        self.d = spec.dimension
        self.arms: dict[str, ArmState] = {}
        self._lock = threading.RLock()

    def _arm(self, prompt_id: str) -> ArmState:
        arm = self.arms.get(prompt_id)
        if arm is None:
            arm = ArmState(self.d)
            self.arms[prompt_id] = arm
        return arm

    def _check_x(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.d,):
            raise ValueError(f"context has shape {x.shape}, expected ({self.d},)")
        if not np.isfinite(x).all():
            raise ValueError("context vector contains non-finite components")
        return x


def score_arm(model: LinUcbModel, prompt_id: str, x: np.ndarray) -> float:
    """UCB score of one arm: theta^T x + alpha * sqrt(x^T A^-1 x).

    Solved via Cholesky factorization. If factorization fails the arm
    state is corrupted: it is quarantined (reset to a fresh arm), the
    event is logged, and NumericalFailure is raised so the caller can
    retry against the re-initialized arm.
    """
    x = model._check_x(x)
    with model._lock:
        arm = model._arm(prompt_id)
        try:
            L = arm.chol()
            v = solve_triangular(L, x, lower=True, check_finite=False)
            p = float(arm.theta() @ x + model.alpha * np.sqrt(v @ v))
            if not np.isfinite(p):
                raise np.linalg.LinAlgError("non-finite score")
        except np.linalg.LinAlgError as exc:
            logger.error(
                "factorization failed for arm %r (pulls=%d): %s; re-initializing",
                prompt_id, arm.pulls, exc,
            )
            arm.reset()
            raise NumericalFailure(f"arm {prompt_id!r} re-initialized after: {exc}") from exc
        return p


def select_prompt(model: LinUcbModel, x: np.ndarray, eligible: Sequence[str]) -> str:
    """Argmax of score_arm over the eligible prompts, first-position tie-break.

    A NumericalFailure quarantines the offending arm, after which scoring
    it once more succeeds against the fresh state, so selection is total.
    """
    if not eligible:
        raise EmptyPool("no eligible prompts")
    with model._lock:
        best_id = None
        best_score = -np.inf
        for prompt_id in eligible:
            try:
                s = score_arm(model, prompt_id, x)
            except NumericalFailure:
                s = score_arm(model, prompt_id, x)
            if s > best_score:
                best_id, best_score = prompt_id, s
        return best_id


def update(model: LinUcbModel, prompt_id: str, x: np.ndarray, reward: int) -> None:
    """Apply one rank-1 update: A += x x^T, b += reward * x."""
    if reward not in (0, 1):
        raise ValueError(f"reward must be 0 or 1, got {reward!r}")
    x = model._check_x(x)
    with model._lock:
        arm = model._arm(prompt_id)
        arm.A += np.outer(x, x)
        if reward:
            arm.b += x
        arm.x_sum += x
        arm.pulls += 1
        arm.invalidate()


class RandomPolicy:
    """Uniform prompt selection from a seeded deterministic generator."""

    def __init__(self, seed: int):
        self._rng = random.Random(seed)
        self._lock = threading.Lock()

    def select(self, eligible: Sequence[str]) -> str:
        if not eligible:
            raise EmptyPool("no eligible prompts")
        with self._lock:
            return eligible[self._rng.randrange(len(eligible))]


def random_policy(eligible: Sequence[str], seed: int) -> str:
    """One-shot uniform draw; same seed and pool always give the same prompt."""
    return RandomPolicy(seed).select(eligible)


def snapshot_stats(model: LinUcbModel) -> dict:
    """Consistent point-in-time view of per-arm statistics."""
    with model._lock:
        arms = {}
        for prompt_id, arm in model.arms.items():
            estimate = None
            if arm.pulls > 0:
                try:
                    estimate = float(arm.theta() @ (arm.x_sum / arm.pulls))
                except np.linalg.LinAlgError:
                    logger.error("stats estimate failed for arm %r", prompt_id)
            arms[prompt_id] = {
                "pulls": arm.pulls,
                "trace_a": float(np.trace(arm.A)),
                "mean_reward_estimate": estimate,
            }
        return {
            "alpha": model.alpha,
            "d": model.d,
            "total_pulls": sum(a.pulls for a in model.arms.values()),
            "arms": arms,
        }


# ---------------------------------------------------------------------------
# snapshot serialization (JSON round-trips float64 exactly)
# ---------------------------------------------------------------------------

def model_to_dict(model: LinUcbModel) -> dict:
    with model._lock:
        return {
            "format_version": SNAPSHOT_FORMAT_VERSION,
            "alpha": model.alpha,
            "d": model.d,
            "feature_spec": model.spec.to_dict(),
            "arms": {
                pid: {
                    "A": arm.A.tolist(),
                    "b": arm.b.tolist(),
                    "x_sum": arm.x_sum.tolist(),
                    "pulls": arm.pulls,
                }
                for pid, arm in model.arms.items()
            },
        }


def model_from_dict(d: Mapping) -> LinUcbModel:
    version = d.get("format_version")
    if version != SNAPSHOT_FORMAT_VERSION:
        raise ValueError(f"unsupported snapshot format_version {version!r}")
    model = LinUcbModel(FeatureSpec.from_dict(d["feature_spec"]), alpha=float(d["alpha"]))
    if model.d != int(d["d"]):
        raise ValueError("snapshot d does not match its feature spec")
    for pid, state in d["arms"].items():
        arm = ArmState(model.d)
        arm.A = np.asarray(state["A"], dtype=np.float64)
        arm.b = np.asarray(state["b"], dtype=np.float64)
        arm.x_sum = np.asarray(state["x_sum"], dtype=np.float64)
        arm.pulls = int(state["pulls"])
        if arm.A.shape != (model.d, model.d) or arm.b.shape != (model.d,):
            raise ValueError(f"snapshot arm {pid!r} has wrong dimensions")
        model.arms[pid] = arm
    return model


def save_model(model: LinUcbModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)))


def load_model(path: str | Path) -> LinUcbModel:
    return model_from_dict(json.loads(Path(path).read_text()))
