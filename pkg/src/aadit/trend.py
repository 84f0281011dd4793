"""Multi-seed comparison of baseline, adit and aadit on one dataset."""
from __future__ import annotations

import statistics
from dataclasses import dataclass, field, replace

import numpy as np

from .probe import ProbeConfig, attention_mass_by_class, class_accuracy, probe_domain_accuracy
from .synth import SILENCE, Dataset
from .trainer import AdversarialModel, TrainConfig, config_for_dataset, train_loop

MODES = ("baseline", "adit", "aadit")


@dataclass
class TrendResult:
    seeds: list[int]
    probe: dict[str, list[float]] = field(default_factory=dict)
    class_acc: dict[str, list[float]] = field(default_factory=dict)

    def median_probe(self, mode: str) -> float:
        return statistics.median(self.probe[mode])

    def median_class(self, mode: str) -> float:
        return statistics.median(self.class_acc[mode])

    def as_dict(self) -> dict:
        return {"seeds": self.seeds, "probe_acc": self.probe, "class_acc": self.class_acc,
                "median_probe_acc": {m: self.median_probe(m) for m in self.probe},
                "median_class_acc": {m: self.median_class(m) for m in self.class_acc}}


def run_trend(dataset: Dataset, train: TrainConfig = TrainConfig(), probe: ProbeConfig = ProbeConfig(),
              seeds=(0, 1, 2, 3, 4), modes=MODES, jobs: int = 1) -> TrendResult:
    """Train every mode for every seed and measure held-out probe and class accuracy.

    Training and probe share the seed; the dataset is fixed.
    """
    base = config_for_dataset(train, dataset)
    out = TrendResult(list(seeds), {m: [] for m in modes}, {m: [] for m in modes})
    for seed in seeds:
        for mode in modes:
            model, _, _ = train_loop(replace(base, mode=mode, seed=seed), dataset)
            out.probe[mode].append(probe_domain_accuracy(model, dataset.train, dataset.test,
                                                         replace(probe, seed=seed), jobs))
            out.class_acc[mode].append(class_accuracy(model, dataset.test, jobs))
    return out


def susceptible_vs_silence_mass(model: AdversarialModel, dataset: Dataset, split: str = "test",
                                cut: float = 0.5) -> tuple[float, float]:
    """Mean attention received by frames of classes with susceptibility >= cut, and by silence frames."""
    gamma = dataset.config.gamma
    mass = attention_mass_by_class(model, dataset.split(split), dataset.config.n_classes)
    return float(np.mean(mass[gamma >= cut])), float(mass[SILENCE])
