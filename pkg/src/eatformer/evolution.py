"""A naive evolutionary algorithm and its matrix forms.

Crossover copies each gene from a random donor with probability CR; read
as a sum over the population with diagonal per-individual value maps it is
a one-hot sparse attention. Mutation rescales genes at random; read as a
matrix product it is a linear layer restricted to a diagonal weight.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import PopulationError
from .fileio import atomic_write


@dataclass
class Population:
    """L individuals of D genes, their fitness and operator constants."""

    individuals: np.ndarray
    fitness: np.ndarray | None = None
    CR: float = 0.5
    MU: float = 0.5
    bounds: np.ndarray | None = None  # (D, 2) rows of (low, high) scale factors

    def __post_init__(self):
        self.individuals = np.array(self.individuals, dtype=np.float64)
        if self.individuals.ndim != 2 or self.individuals.shape[0] < 1:
            raise PopulationError(f"individuals must be an (L, D) matrix, got shape {self.individuals.shape}")
        L, D = self.individuals.shape
        self.fitness = np.full(L, np.inf) if self.fitness is None else np.array(self.fitness, dtype=np.float64)
        if self.fitness.shape != (L,):
            raise PopulationError(f"fitness must have shape ({L},), got {self.fitness.shape}")
        if not (0.0 <= self.CR <= 1.0 and 0.0 <= self.MU <= 1.0):
            raise PopulationError(f"CR and MU must lie in [0, 1], got CR={self.CR}, MU={self.MU}")
        bounds = np.tile([0.5, 1.5], (D, 1)) if self.bounds is None else np.array(self.bounds, dtype=np.float64)
        if bounds.shape == (2,):
            bounds = np.tile(bounds, (D, 1))
        if bounds.shape != (D, 2) or np.any(bounds[:, 0] > bounds[:, 1]):
            raise PopulationError(f"bounds must be (D, 2) rows with low <= high, got {bounds.tolist()}")
        self.bounds = bounds

    @property
    def size(self) -> int:
        return self.individuals.shape[0]

    @property
    def dim(self) -> int:
        return self.individuals.shape[1]


@dataclass
class CrossoverTrace:
    target: int
    donor: int
    mask: np.ndarray  # True where the gene came from the donor


def randb(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniform draws on (0, 1], so ``randb <= 0`` never fires and ``randb <= 1`` always does."""
    return 1.0 - rng.random(n)


def crossover(pop: Population, i: int, rng: np.random.Generator) -> tuple[np.ndarray, CrossoverTrace]:
    """Offspring of individual ``i`` taking each gene from a random donor j != i with probability CR."""
    L = pop.size
    if L < 2:
        raise PopulationError(f"crossover needs at least two individuals, population has {L}")
    j = int(rng.integers(L - 1))
    j += j >= i
    mask = randb(rng, pop.dim) <= pop.CR
    offspring = np.where(mask, pop.individuals[j], pop.individuals[i])
    return offspring, CrossoverTrace(i, j, mask)


def crossover_matrices(pop: Population, trace: CrossoverTrace) -> np.ndarray:
    """Per-individual value maps (L, D, D): diag(1 - w) for i, diag(w) for j, zero elsewhere."""
    W = np.zeros((pop.size, pop.dim, pop.dim))
    w = trace.mask.astype(np.float64)
    W[trace.target] = np.diag(1.0 - w)
    W[trace.donor] += np.diag(w)
    return W


def crossover_as_attention(pop: Population, trace: CrossoverTrace) -> np.ndarray:
    """Rebuild the offspring as sum_l x_l W_l over the whole population."""
    W = crossover_matrices(pop, trace)
    out = np.zeros(pop.dim)
    for l in range(pop.size):
        out = out + pop.individuals[l] @ W[l]
    return out


def mutation_weights(pop: Population, rng: np.random.Generator) -> np.ndarray:
    flags = randb(rng, pop.dim) <= pop.MU
    scales = rng.uniform(pop.bounds[:, 0], pop.bounds[:, 1])
    return np.where(flags, scales, 1.0)


def mutation(pop: Population, i: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Scale each gene of individual ``i`` by rand(low_d, high_d) with probability MU."""
    weights = mutation_weights(pop, rng)
    return pop.individuals[i] * weights, weights


def mutation_as_linear(x: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """x diag(w): a linear layer whose weight matrix is restricted to the diagonal."""
    return np.asarray(x, dtype=np.float64) @ np.diag(np.asarray(weights, dtype=np.float64))


@dataclass
class EvolutionHistory:
    best_fitness: list[float] = field(default_factory=list)
    mean_fitness: list[float] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["generation", "best_fitness", "mean_fitness"])
        for g, (b, m) in enumerate(zip(self.best_fitness, self.mean_fitness)):
            writer.writerow([g, repr(b), repr(m)])
        return buf.getvalue()

    def save_csv(self, path) -> None:
        atomic_write(path, self.to_csv())


def evolve(pop: Population, generations: int, objective: Callable[[np.ndarray], float],
           rng: np.random.Generator | int | None = None) -> EvolutionHistory:
    """Minimise ``objective`` with crossover, mutation and greedy elitist selection.

    Every individual produces one candidate per generation (crossover, then
    mutation of the offspring) and is replaced only if the candidate is at
    least as fit, so the best-so-far fitness never increases. ``pop`` is
    updated in place.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    pop.fitness = np.array([objective(x) for x in pop.individuals], dtype=np.float64)
    history = EvolutionHistory([float(pop.fitness.min())], [float(pop.fitness.mean())])
    for _ in range(generations):
        for i in range(pop.size):
            candidate = crossover(pop, i, rng)[0] if pop.size >= 2 else pop.individuals[i].copy()
            candidate = candidate * mutation_weights(pop, rng)
            value = float(objective(candidate))
            if value <= pop.fitness[i]:
                pop.individuals[i] = candidate
                pop.fitness[i] = value
        history.best_fitness.append(min(history.best_fitness[-1], float(pop.fitness.min())))
        history.mean_fitness.append(float(pop.fitness.mean()))
    return history


def sphere(x: np.ndarray) -> float:
    return float(np.dot(x, x))


__all__ = [
    "Population",
    "CrossoverTrace",
    "randb",
    "crossover",
    "crossover_matrices",
    "crossover_as_attention",
    "mutation",
    "mutation_weights",
    "mutation_as_linear",
    "EvolutionHistory",
    "evolve",
    "sphere",
]
