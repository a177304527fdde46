import numpy as np
import pytest

from lacework.env import EnvConfig
from lacework.errors import ContractViolation
from lacework.harness import (
    ExperimentSpec,
    augment_store,
    kendall,
    progress_report,
    spearman,
    wilson_interval,
    write_ablation_csv,
)
from lacework.mirror import mirror_observation
from lacework.teleop import generate_demos
from lacework.trajectory import TransitionStore


def test_wilson_interval_known_values():
    lo, hi = wilson_interval(50, 100)
    assert lo == pytest.approx(0.404, abs=0.005)
    assert hi == pytest.approx(0.596, abs=0.005)
    assert wilson_interval(0, 100)[0] == 0.0
    assert wilson_interval(100, 100)[1] == pytest.approx(1.0, abs=1e-9)
    assert wilson_interval(0, 0) == (0.0, 1.0)


def test_spearman_basics():
    assert spearman([1, 2, 3], [10, 20, 30]) == pytest.approx(1.0)
    assert spearman([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert spearman([1, 2, 3, 4], [1, 1, 2, 2]) == pytest.approx(0.894, abs=0.01)
    with pytest.raises(ContractViolation):
        spearman([1], [1])


def test_kendall_range():
    rng = np.random.default_rng(0)
    x = rng.normal(size=50)
    assert -1.0 <= kendall(x, rng.normal(size=50)) <= 1.0


def test_experiment_spec_file_roundtrip(tmp_path):
    path = tmp_path / "exp.cfg"
    path.write_text("seeds = 3,4\ndemo_episodes = 60\neval_episodes = 10\n"
                    "bc_steps = 100\nrun_online = false\n")
    spec = ExperimentSpec.from_file(path)
    assert spec.seeds == (3, 4)
    assert spec.demo_episodes == 60
    assert not spec.run_online


def test_experiment_spec_validation():
    with pytest.raises(ContractViolation):
        ExperimentSpec(seeds=())
    with pytest.raises(ContractViolation):
        ExperimentSpec(demo_episodes=10)


def test_augment_store_mirrors_surviving_rows():
    demos = generate_demos(EnvConfig(), 2, seed_base=60)
    store = TransitionStore.from_trajectories(demos)
    keep = np.ones(len(store), dtype=bool)
    keep[::3] = False
    filtered = store.subset(keep)
    doubled = augment_store(filtered, demos)
    assert len(doubled) == 2 * len(filtered)
    # the second half is the mirror image of the first
    first = doubled.obs[:len(filtered)]
    second = doubled.obs[len(filtered):]
    np.testing.assert_array_equal(mirror_observation(first), second)


class StubModel:
    def __init__(self, mode):
        self.mode = mode

    def progress(self, obs, proprio, chunk=None):
        T = len(obs)
        if self.mode == "monotone":
            return np.linspace(0.0, 1.0, T)
        return np.full(T, 0.5)


def test_progress_report_stub_models(tmp_path):
    demos = generate_demos(EnvConfig(), 3, seed_base=62)
    holdout = [d for d in demos if d.success][:2]
    store = TransitionStore.from_trajectories(demos)
    out = progress_report(StubModel("monotone"), StubModel("constant"), None,
                          holdout, store, demos, delta=0.15,
                          out_csv=tmp_path / "rho.csv")
    assert out["spearman"]["distributional"] == pytest.approx(1.0)
    # constant progress has no drops at all
    assert out["detection"]["scalar"]["fraction_removed"] == 0.0
    assert (tmp_path / "rho.csv").exists()


def test_write_ablation_csv(tmp_path):
    rows = [{
        "stage": "plain_bc", "mean_success": 0.4, "ci_low": 0.3, "ci_high": 0.5,
        "n": 300, "per_seed": [0.4, 0.45],
        "stage_rates": {"pick": 0.9, "thread": 0.6, "handover": 0.5, "pull": 0.45},
    }]
    path = tmp_path / "ablation.csv"
    write_ablation_csv(rows, path)
    text = path.read_text().splitlines()
    assert text[0].startswith("stage,mean_success")
    assert text[1].startswith("plain_bc,0.4000")
