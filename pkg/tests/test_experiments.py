"""
Desk-scale experiments on the default 8+8 shapes benchmark. They take tens of minutes on a CPU
and only run with `pytest -m integrationtest`.
"""

import dataclasses

import pytest

from erdet import evalkit
from erdet.artifacts import ArtifactWriter
from erdet.config import ExperimentConfig, ProtocolConfig
from erdet.expcli import ensure_dataset, execute, sweep_variants

pytestmark = pytest.mark.integrationtest


class Runs:
    """Runs experiment variants on demand, sharing the dataset and the base step."""

    def __init__(self, root):
        self.root = root
        self.cfg = ExperimentConfig(name="base", output_dir=str(root))
        self.dataset = ensure_dataset(self.cfg)
        self._base = {}
        self._results = {}

    def variant(self, label: str, cfg: ExperimentConfig):
        if label not in self._results:
            cfg = dataclasses.replace(
                cfg, name=label, output_dir=str(self.root), data_dir=str(self.cfg.dataset_dir)
            )
            base = self._base.get(cfg.protocol.name)
            results = execute(cfg, ArtifactWriter(cfg.run_dir), self.dataset, base)
            self._base.setdefault(cfg.protocol.name, results[0])
            self._results[label] = results
        return self._results[label]

    def strategy(self, strategy: str, protocol: str = "one_step", **train):
        cfg = dataclasses.replace(
            self.cfg,
            protocol=ProtocolConfig(name=protocol),
            train=dataclasses.replace(self.cfg.train, strategy=strategy, **train),
        )
        return self.variant(f"{protocol}_{strategy}", cfg)


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    return Runs(tmp_path_factory.mktemp("experiments"))


def final_base_ap(results):
    return results[-1].metrics.base_ap


def test_forgetting_ordering(runs):
    finetune = final_base_ap(runs.strategy("finetune"))
    kd_all = final_base_ap(runs.strategy("kd_all"))
    erd = runs.strategy("erd_full")
    upper = runs.strategy("upper_bound")

    assert finetune < kd_all <= final_base_ap(erd)
    assert final_base_ap(erd) >= finetune + 0.15
    assert abs(erd[-1].metrics.mAP - upper[-1].metrics.mAP) <= 0.10


def test_elastic_selection_beats_fixed_counts(runs):
    erd = final_base_ap(runs.strategy("erd_full"))
    sweep = {
        label: final_base_ap(runs.variant(label, cfg))
        for label, cfg in sweep_variants("topk", runs.cfg)
    }

    assert erd > sweep["topk_all"]
    interior = [ap for label, ap in sweep.items() if label not in ("topk_5", "topk_all")]
    assert max(interior) > max(sweep["topk_5"], sweep["topk_all"])


def test_alpha_robustness(runs):
    maps = [
        runs.variant(label, cfg)[-1].metrics.mAP
        for label, cfg in sweep_variants("alpha", runs.cfg)
    ]
    assert max(maps) - min(maps) <= 0.03


def test_multi_step_retention(runs):
    erd = final_base_ap(runs.strategy("erd_full", protocol="four_step"))
    finetune = final_base_ap(runs.strategy("finetune", protocol="four_step"))
    assert erd >= finetune + 0.10


def test_classification_head_moves_most(runs):
    upper = runs.strategy("upper_bound")[-1].snapshot
    finetune = runs.strategy("finetune")[-1].snapshot
    probes = evalkit.select_probe_images(runs.dataset.test, 10)
    images = [runs.dataset.test.load_image(r) for r in probes]

    report = evalkit.feature_distance(upper, finetune, images)

    assert report.distances["cls_head"] > report.distances["pyramid_features"]


def test_deterministic_runs_are_byte_identical(runs, tmp_path):
    first = runs.strategy("erd_full")
    cfg = dataclasses.replace(
        runs.cfg, name="repeat", output_dir=str(tmp_path), data_dir=str(runs.cfg.dataset_dir)
    )
    execute(cfg, ArtifactWriter(cfg.run_dir), runs.dataset)

    for result in first:
        name = f"step_{result.step_index}/metrics.json"
        expected = (runs.root / "one_step_erd_full" / name).read_bytes()
        assert (cfg.run_dir / name).read_bytes() == expected
