"""Regenerate the oracle calibration file and reference checkpoint used by the tests.

    python scripts/calibrate.py [--out tests/data]

Everything is deterministic, so rerunning reproduces the committed files.
"""
import argparse
import json
import statistics
import time
from pathlib import Path

from aadit.probe import ProbeConfig, class_accuracy, probe_domain_accuracy, raw_probe_accuracy
from aadit.synth import DatasetConfig, generate
from aadit.trainer import AdversarialModel, TrainConfig, checkpoint_save, config_for_dataset, train_loop
from aadit.trend import run_trend, susceptible_vs_silence_mass

SEEDS = (0, 1, 2, 3, 4)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "tests" / "data"))
    out = Path(ap.parse_args().out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    ds = generate(DatasetConfig())
    probe = ProbeConfig()
    base = config_for_dataset(TrainConfig(), ds)

    raw = raw_probe_accuracy(ds.train, ds.test, probe)
    init_probe = []
    for seed in SEEDS:
        model = AdversarialModel.init(config_for_dataset(TrainConfig(mode="baseline", seed=seed), ds))
        init_probe.append(probe_domain_accuracy(model, ds.train, ds.test, ProbeConfig(seed=seed)))

    trend = run_trend(ds, base, probe, SEEDS)

    ref_cfg = config_for_dataset(TrainConfig(mode="aadit", seed=0), ds)
    ref, history, _ = train_loop(ref_cfg, ds)
    checkpoint_save(ref, ref_cfg, out / "reference_aadit.aadl", step=len(history))
    high, silence = susceptible_vs_silence_mass(ref, ds)
    init_high, init_silence = susceptible_vs_silence_mass(AdversarialModel.init(ref_cfg), ds)

    result = {
        "dataset": "default DatasetConfig()",
        "raw_probe_acc": raw,
        "init_probe_acc": init_probe,
        "median_init_probe_acc": statistics.median(init_probe),
        "trend": trend.as_dict(),
        "reference_checkpoint": "reference_aadit.aadl",
        "attention_mass": {"susceptible": high, "silence": silence,
                           "init_susceptible": init_high, "init_silence": init_silence},
    }
    (out / "calibration.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    print(json.dumps(result, indent=2, sort_keys=True))
    print(f"done in {time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()
