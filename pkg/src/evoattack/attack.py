"""Black-box adversarial search driven by the genetic algorithm.

The objective for a candidate ``x'`` of an original ``x`` is

    F(x') = D(x, x') + M * loss(x')

where ``D`` is an L0, L2 or L-infinity distance and ``loss`` is a hinge on
the classifier's output probabilities (the only thing the attack observes):

    non-targeted:  max(p[r] - max_{i != r} p[i], 0)
    targeted:      max(max_{i != t} p[i] - p[t], 0)

With ``M`` larger than any attainable distance, every candidate with zero
loss beats every candidate with positive loss.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .ga import GAParams, StoppingRule, TrendLog, run

NONTARGETED = "nontargeted"
TARGETED = "targeted"
L0_TOL = 1e-12


class ShortfallError(RuntimeError):
    """Fewer correctly classified samples than requested."""

    def __init__(self, available, requested):
        super().__init__(f"only {available} correctly classified samples, {requested} requested")
        self.available, self.requested = available, requested


def _metric(p):
    if p in (2, "2", "l2"):
        return 2
    if p in (0, "0", "l0"):
        return 0
    if p in (math.inf, "inf", "linf"):
        return math.inf
    raise ValueError(f"unsupported distance metric {p!r}")


def distances(x, candidates, p=2) -> np.ndarray:
    """Distance from ``x`` to each row of ``candidates``."""
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(candidates, dtype=np.float64)
    if c.shape[-1] != x.shape[-1]:
        raise ValueError(f"length mismatch: {x.shape[-1]} vs {c.shape[-1]}")
    d = c - x
    p = _metric(p)
    if p == 2:
        return np.sqrt(np.sum(d * d, axis=-1))
    if p == 0:
        return np.sum(np.abs(d) > L0_TOL, axis=-1).astype(np.float64)
    return np.max(np.abs(d), axis=-1)


def distance(x, x_adv, p=2) -> float:
    x_adv = np.asarray(x_adv, dtype=np.float64)
    if x_adv.ndim != 1 or np.ndim(x) != 1:
        raise ValueError("distance expects two flat vectors")
    return float(distances(x, x_adv[None, :], p)[0])


def _best_other(probs, label):
    if probs.shape[-1] < 2:
        raise ValueError("need at least two classes")
    if not 0 <= label < probs.shape[-1]:
        raise ValueError(f"label {label} out of range")
    others = probs.copy()
    others[..., label] = -np.inf
    return others.max(axis=-1)


def losses_nontargeted(probs, r) -> np.ndarray:
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    return np.maximum(probs[:, r] - _best_other(probs, r), 0.0)


def losses_targeted(probs, t) -> np.ndarray:
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    return np.maximum(_best_other(probs, t) - probs[:, t], 0.0)


def loss_nontargeted(probs, r) -> float:
    return float(losses_nontargeted(probs, r)[0])


def loss_targeted(probs, t) -> float:
    return float(losses_targeted(probs, t)[0])


@dataclass
class AttackSpec:
    mode: str = NONTARGETED
    label: int = 0  # true label r (non-targeted) or target label t (targeted)
    distance_p: object = 2
    penalty: float = 1e12  # large enough to resolve loss changes of ~1e-8 on saturated softmax outputs
    ga: GAParams = field(default_factory=GAParams)
    early_stop: bool = False

    def __post_init__(self):
        if self.mode not in (NONTARGETED, TARGETED):
            raise ValueError(f"mode must be {NONTARGETED!r} or {TARGETED!r}")
        self.distance_p = _metric(self.distance_p)

    def max_distance(self, n: int) -> float:
        return {2: math.sqrt(n), 0: float(n)}.get(self.distance_p, 1.0)

    def validate(self, n: int, num_classes: int):
        if not 0 <= self.label < num_classes:
            raise ValueError(f"label {self.label} outside [0, {num_classes})")
        if not self.penalty > self.max_distance(n):
            raise ValueError(
                f"penalty M={self.penalty} must exceed the largest attainable distance "
                f"{self.max_distance(n):.4g} for n={n}")

    def loss(self, probs) -> np.ndarray:
        if self.mode == NONTARGETED:
            return losses_nontargeted(probs, self.label)
        return losses_targeted(probs, self.label)

    def succeeded(self, probs) -> bool:
        """Argmax rule with lowest-index tie breaking; stricter than loss == 0 on exact ties."""
        pred = int(np.argmax(probs))
        return pred != self.label if self.mode == NONTARGETED else pred == self.label

    def to_dict(self) -> dict:
        d = asdict(self)
        d["distance_p"] = "inf" if self.distance_p == math.inf else self.distance_p
        return d


def fitness(x, x_adv, oracle, spec: AttackSpec) -> float:
    """F = D(x, x') + M * loss(x') from a single oracle query."""
    probs = oracle.classify(x_adv)
    return distance(x, x_adv, spec.distance_p) + spec.penalty * float(spec.loss(probs)[0])


def fitness_batch(x, oracle, spec: AttackSpec):
    """Batch fitness closure for the GA: one oracle query per row."""
    x = np.asarray(x, dtype=np.float64)

    def fit(genomes):
        probs = oracle.classify_batch(genomes)
        return distances(x, genomes, spec.distance_p) + spec.penalty * spec.loss(probs)

    return fit


@dataclass
class AttackResult:
    mode: str
    true_label: int | None
    target_label: int | None
    status: str = "ok"  # "ok" or "skipped" (sample initially misclassified)
    adversarial: np.ndarray | None = None
    distance: float = math.nan
    best_fitness: float = math.nan
    success: bool = False
    predicted_label: int | None = None
    queries: int = 0
    generations: int = 0
    trend: TrendLog = field(default_factory=TrendLog)
    sample_index: int | None = None
    seed: int | None = None

    def to_record(self) -> dict:
        return {
            "sample_index": self.sample_index,
            "mode": self.mode,
            "true_label": self.true_label,
            "target_label": self.target_label,
            "status": self.status,
            "success": self.success,
            "predicted_label": self.predicted_label,
            "distance": self.distance,
            "best_fitness": self.best_fitness,
            "queries": self.queries,
            "generations": self.generations,
            "seed": self.seed,
            "trend": self.trend.best_fitness,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_record(), allow_nan=True)

    @classmethod
    def from_record(cls, rec: dict) -> "AttackResult":
        trend = TrendLog()
        for f in rec.get("trend", []):
            trend.append(f, math.inf)
        return cls(mode=rec["mode"], true_label=rec["true_label"], target_label=rec["target_label"],
                   status=rec["status"], distance=rec["distance"], best_fitness=rec["best_fitness"],
                   success=rec["success"], predicted_label=rec["predicted_label"],
                   queries=rec["queries"], generations=rec["generations"], trend=trend,
                   sample_index=rec.get("sample_index"), seed=rec.get("seed"))


def run_attack(oracle, x, spec: AttackSpec, true_label: int | None = None) -> AttackResult:
    """Search for an adversarial version of ``x``.

    Non-targeted attacks require the oracle to classify ``x`` as
    ``spec.label`` first; otherwise the result comes back with status
    ``"skipped"``. That probe is not counted in ``queries``, which equals
    the GA's fitness evaluations plus one certification query on the
    returned image.
    """
    x = np.asarray(x, dtype=np.float64)
    spec.validate(x.size, oracle.num_classes)
    targeted = spec.mode == TARGETED
    result = AttackResult(spec.mode, spec.label if not targeted else true_label,
                          spec.label if targeted else None, seed=spec.ga.seed)
    if not targeted and int(np.argmax(oracle.classify(x))) != spec.label:
        result.status = "skipped"
        return result

    stop = StoppingRule(early_stop=spec.early_stop, threshold=spec.penalty)
    elite, trend = run(x, fitness_batch(x, oracle, spec), spec.ga, stop)

    probs = oracle.classify(elite.genome)
    result.adversarial = elite.genome
    result.distance = distance(x, elite.genome, spec.distance_p)
    result.best_fitness = elite.fitness
    result.success = spec.succeeded(probs)
    result.predicted_label = int(np.argmax(probs))
    result.queries = trend.evaluations + 1
    result.generations = len(trend)
    result.trend = trend
    return result


def derive_seed(batch_seed: int, sample_index: int, target: int | None) -> int:
    """Per-attack seed, a pure function of the batch seed and the attack's identity."""
    tag = 0 if target is None else int(target) + 1
    ss = np.random.SeedSequence([int(batch_seed), int(sample_index), tag])
    return int(ss.generate_state(1)[0])


def select_correct(oracle, dataset, count: int) -> list[int]:
    """Indices of the first ``count`` samples the oracle classifies correctly."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    pred = np.argmax(oracle.classify_batch(dataset.images), axis=1)
    correct = np.flatnonzero(pred == dataset.labels)
    if correct.size < count:
        raise ShortfallError(int(correct.size), count)
    return [int(i) for i in correct[:count]]


def _run_job(job):
    oracle, x, spec, true_label, index = job
    res = run_attack(oracle, x, spec, true_label)
    res.sample_index = index
    return res


def batch_attack(oracle, dataset, spec: AttackSpec, count: int, targeted_all_labels: bool = False,
                 seed: int = 0, jobs: int = 1) -> list[AttackResult]:
    """Attack the first ``count`` correctly classified samples.

    Targeted batches attack every label other than the true one (m - 1
    attacks per sample); non-targeted batches make one attack per sample.
    Results come back in a fixed order and do not depend on ``jobs``.
    """
    indices = select_correct(oracle, dataset, count)
    work = []
    for i in indices:
        label = int(dataset.labels[i])
        targets = [t for t in range(oracle.num_classes) if t != label] if targeted_all_labels else [None]
        for t in targets:
            ga = replace(spec.ga, seed=derive_seed(seed, i, t))
            if t is None:
                s = replace(spec, mode=NONTARGETED, label=label, ga=ga)
            else:
                s = replace(spec, mode=TARGETED, label=t, ga=ga)
            work.append((oracle, dataset.images[i], s, label, i))
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            return list(pool.map(_run_job, work))
    return [_run_job(job) for job in work]
