"""Human-normalised scores, robust aggregates, bootstrap intervals and the collapse metric."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

METRICS = ("median", "mean", "iqm")


class ScoreFormatError(ValueError):
    def __init__(self, message: str, row: int | None = None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


@dataclass
class ScoreTable:
    """Per-game, per-seed final scores plus reference scores."""
    scores: dict[str, dict[int, float]]
    random_ref: dict[str, float]
    human_ref: dict[str, float]

    def __post_init__(self):
        if not self.scores:
            raise ValueError("score table has no games")
        for g, runs in self.scores.items():
            if not runs:
                raise ValueError(f"game {g!r} has no seeds")
            if g not in self.random_ref or g not in self.human_ref:
                raise ValueError(f"game {g!r} lacks reference scores")
            if self.human_ref[g] == self.random_ref[g]:
                raise ValueError(f"game {g!r}: human and random references coincide")

    @property
    def games(self) -> list[str]:
        return list(self.scores)

    def normalized(self, game: str) -> np.ndarray:
        """HNS for every seed of one game, in seed order."""
        runs = self.scores[game]
        return np.array([hns(runs[s], self.random_ref[game], self.human_ref[game]) for s in sorted(runs)])

    def game_means(self) -> np.ndarray:
        return np.array([self.normalized(g).mean() for g in self.games])

    def all_runs(self) -> np.ndarray:
        return np.concatenate([self.normalized(g) for g in self.games])


@dataclass(frozen=True)
class BootstrapResult:
    point: float
    lower: float
    upper: float
    level: float
    resamples: int

    def __post_init__(self):
        if self.resamples < 1:
            raise ValueError("resample count must be >= 1")
        if not self.lower <= self.point <= self.upper:
            raise ValueError("interval does not bracket the point estimate")

    def triple(self) -> list[float]:
        return [self.point, self.lower, self.upper]


def hns(score: float, random_score: float, human_score: float) -> float:
    """(score - random) / (human - random)."""
    denom = human_score - random_score
    if denom == 0:
        raise ValueError("human and random reference scores coincide")
    return (score - random_score) / denom


def iqm(values) -> float:
    """Mean after dropping floor(n/4) values from each end of the sorted input."""
    x = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if x.size == 0:
        raise ValueError("empty input")
    cut = x.size // 4
    return float(x[cut:x.size - cut].mean())


def aggregate(values, metric: str = "iqm") -> float:
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("empty input")
    if metric == "median":
        return float(np.median(x))
    if metric == "mean":
        return float(x.mean())
    if metric == "iqm":
        return iqm(x)
    raise ValueError(f"unknown metric {metric!r}")


def _statistic(statistic) -> Callable[[np.ndarray], float]:
    if callable(statistic):
        return statistic
    return lambda x: aggregate(x, statistic)


def bootstrap_ci(values, statistic="iqm", n_resamples: int = 5000, level: float = 0.95,
                 seed: int = 0) -> BootstrapResult:
    """Percentile bootstrap.

    ``values`` is either a flat array of per-run values or a :class:`ScoreTable`;
    for a table, seeds are resampled within each game and ``statistic`` is applied
    to the resampled table (a callable receiving the table) or, for a metric name,
    to the pooled per-run HNS values.
    """
    if n_resamples < 1:
        raise ValueError("n_resamples must be >= 1")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    if isinstance(values, ScoreTable):
        strata = [values.normalized(g) for g in values.games]
        if sum(len(s) for s in strata) < 2:
            raise ValueError("need at least two runs")
        stat = statistic if callable(statistic) else (lambda groups: aggregate(np.concatenate(groups), statistic))
        point = stat(strata)
        samples = np.empty(n_resamples)
        for i in range(n_resamples):
            samples[i] = stat([s[rng.integers(0, len(s), len(s))] for s in strata])
    else:
        x = np.asarray(values, dtype=np.float64).ravel()
        if x.size < 2:
            raise ValueError("need at least two values")
        stat = _statistic(statistic)
        point = stat(x)
        idx = rng.integers(0, x.size, size=(n_resamples, x.size))
        samples = np.array([stat(x[row]) for row in idx])
    tail = (1 - level) / 2 * 100
    lo, hi = np.percentile(samples, [tail, 100 - tail])
    # resamples of a constant stream can round a hair away from the point estimate
    lo, hi = min(float(lo), point), max(float(hi), point)
    return BootstrapResult(float(point), lo, hi, level, n_resamples)


def summarize(table: ScoreTable, n_resamples: int = 5000, level: float = 0.95, seed: int = 0) -> dict:
    """Median and mean over per-game mean HNS, IQM over runs, super-human and above-random counts."""
    per_game = table.game_means()

    def over_games(metric):
        return lambda groups: aggregate([g.mean() for g in groups], metric)

    report = {
        "games": table.games,
        "per_game_hns": {g: float(v) for g, v in zip(table.games, per_game)},
        "median": float(np.median(per_game)),
        "mean": float(per_game.mean()),
        "iqm": iqm(table.all_runs()),
        "above_human": int((per_game > 1).sum()),
        "above_random": int((per_game > 0).sum()),
        "runs": int(table.all_runs().size),
    }
    if report["runs"] >= 2:
        report["ci"] = {
            "median": bootstrap_ci(table, over_games("median"), n_resamples, level, seed).triple(),
            "mean": bootstrap_ci(table, over_games("mean"), n_resamples, level, seed).triple(),
            "iqm": bootstrap_ci(table, "iqm", n_resamples, level, seed).triple(),
        }
    else:
        report["ci"] = {m: [report[m], report[m], report[m]] for m in METRICS}
    report["ci_level"] = level
    report["resamples"] = n_resamples
    return report


def collapse_metric(vectors, on_zero: str = "error", max_vectors: int = 512, seed: int = 0) -> float:
    """Mean cosine similarity over all unordered pairs of distinct rows."""
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] < 2:
        raise ValueError("need at least two vectors")
    if v.shape[0] > max_vectors:
        keep = np.random.default_rng(seed).choice(v.shape[0], size=max_vectors, replace=False)
        v = v[np.sort(keep)]
    norms = np.sqrt((v * v).sum(axis=1))
    if (norms == 0).any():
        if on_zero == "error":
            raise ZeroDivisionError("zero-norm representation vector")
        if on_zero != "zero":
            raise ValueError(f"unknown on_zero policy {on_zero!r}")
    unit = v / np.where(norms > 0, norms, 1.0)[:, None]
    gram = unit @ unit.T
    n = v.shape[0]
    upper = gram[np.triu_indices(n, k=1)]
    return float(upper.mean())


CSV_FIELDS = ("game", "seed", "score", "random_ref", "human_ref")


def read_scores_csv(path) -> ScoreTable:
    """Parse the (game, seed, score, random_ref, human_ref) schema; errors name the row."""
    scores: dict[str, dict[int, float]] = {}
    rnd: dict[str, float] = {}
    hum: dict[str, float] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ScoreFormatError("empty score file")
        missing = set(CSV_FIELDS) - set(f.strip() for f in reader.fieldnames)
        if missing:
            raise ScoreFormatError(f"missing columns {sorted(missing)}", row=1)
        for row_no, row in enumerate(reader, start=2):
            row = {k.strip(): (v or "").strip() for k, v in row.items() if k is not None}
            try:
                game = row["game"]
                if not game:
                    raise ValueError("empty game name")
                seed = int(row["seed"])
                vals = [float(row[k]) for k in ("score", "random_ref", "human_ref")]
            except (ValueError, KeyError) as exc:
                raise ScoreFormatError(str(exc), row=row_no) from None
            if not all(math.isfinite(x) for x in vals):
                raise ScoreFormatError("non-finite value", row=row_no)
            score, r, h = vals
            if game in rnd and (rnd[game] != r or hum[game] != h):
                raise ScoreFormatError(f"inconsistent reference scores for {game!r}", row=row_no)
            if seed in scores.get(game, {}):
                raise ScoreFormatError(f"duplicate seed {seed} for {game!r}", row=row_no)
            if h == r:
                raise ScoreFormatError(f"human and random references coincide for {game!r}", row=row_no)
            scores.setdefault(game, {})[seed] = score
            rnd[game], hum[game] = r, h
    if not scores:
        raise ScoreFormatError("score file has no rows")
    return ScoreTable(scores, rnd, hum)


def write_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
