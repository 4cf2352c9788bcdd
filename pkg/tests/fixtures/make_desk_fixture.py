"""Regenerate desk_training.json from real runs: python3 tests/fixtures/make_desk_fixture.py"""
import json
import sys
import tempfile
import time
from pathlib import Path

from clca.data import DatasetSpec, generate
from clca.model import tiny
from clca.train import TrainConfig, train

OUT = Path(__file__).with_name("desk_training.json")


def main() -> int:
    spec = DatasetSpec()
    tc = TrainConfig()
    models = {"clca": tiny(clca=True), "baseline": tiny(clca=False)}
    dataset = generate(spec)
    recorded = {}
    t0 = time.perf_counter()
    with tempfile.TemporaryDirectory() as tmp:
        for name, cfg in models.items():
            res = train(cfg, tc, dataset, Path(tmp) / name)
            recorded[f"{name}_val_top1"] = res.final("val").top1
            recorded[f"{name}_train_top1"] = res.final("train").top1
    recorded["seconds"] = round(time.perf_counter() - t0, 1)
    fx = {
        "data": spec.to_dict(),
        "train": tc.to_dict(),
        "models": {k: v.to_dict() for k, v in models.items()},
        "recorded": recorded,
    }
    OUT.write_text(json.dumps(fx, indent=2, sort_keys=True) + "\n")
    print(json.dumps(recorded))
    return 0


if __name__ == "__main__":
    sys.exit(main())
