import numpy as np
import pytest

from lacework.env import EnvConfig
from lacework.errors import ContractViolation
from lacework.filterpipe import (
    drop_magnitudes,
    filter_dataset,
    flag_suboptimal,
    miss_onsets,
    window_labels,
)
from lacework.teleop import generate_demos
from lacework.trajectory import LABEL_MISS, LABEL_OK, LABEL_PAUSE, TransitionStore


class SequenceStub:
    """Progress model returning canned sequences per trajectory, in order."""

    def __init__(self, sequences):
        self.sequences = list(sequences)
        self.calls = 0

    def progress(self, obs, proprio, chunk) -> np.ndarray:
        seq = np.asarray(self.sequences[self.calls], dtype=np.float64)
        self.calls += 1
        assert len(seq) == len(obs)
        return seq


def test_monotone_sequence_never_flagged():
    rho = np.linspace(0.1, 0.9, 40)
    assert not flag_suboptimal(rho, k=8, delta=0.15).any()


def test_big_drop_flags_covering_windows():
    rho = np.array([0.5, 0.5, 0.1] + [0.1] * 10)
    flags = flag_suboptimal(rho, k=8, delta=0.15)
    # the 0.5 -> 0.1 drop sits between steps 1 and 2; windows that contain
    # both sides are flagged
    assert flags[0] and flags[1]
    assert not flags[2:].any()


def test_peak_trough_catches_recovering_drop():
    rho = np.array([0.5, 0.8, 0.2, 0.8, 0.8, 0.8, 0.8, 0.8])
    assert flag_suboptimal(rho, k=8, delta=0.3)[0]
    # first-minus-last misses the recovered drop
    assert not flag_suboptimal(rho, k=8, delta=0.3, statistic="first_last")[0]


def test_delta_monotonicity_nested_flags():
    rng = np.random.default_rng(0)
    rho = np.clip(np.cumsum(rng.normal(0, 0.08, 80)) + 0.5, 0, 1)
    f_small = flag_suboptimal(rho, 8, 0.05)
    f_big = flag_suboptimal(rho, 8, 0.2)
    assert np.all(f_small[f_big])  # flags at 0.2 are a subset of flags at 0.05


def test_tiny_delta_flags_nearly_everything_noisy():
    rng = np.random.default_rng(1)
    rho = np.clip(0.5 + rng.normal(0, 0.2, 200), 0, 1)
    flags = flag_suboptimal(rho, 8, 1e-4)
    assert flags.mean() > 0.9


def test_delta_must_be_positive():
    with pytest.raises(ContractViolation):
        flag_suboptimal(np.ones(10), 8, 0.0)


def test_window_truncation_at_end():
    rho = np.array([0.9, 0.9, 0.9, 0.2])
    flags = flag_suboptimal(rho, k=8, delta=0.15)
    assert flags[:3].all()
    assert not flags[3]  # final window has a single value


def test_miss_onsets_and_window_labels():
    labels = np.array([0, 0, 2, 2, 2, 1, 0, 2, 2, 0], dtype=np.uint8)
    assert miss_onsets(labels).tolist() == [2, 7]
    gt_miss, gt_any = window_labels(labels, k=3)
    # windows [t, t+3) containing an onset
    assert gt_miss.tolist() == [True, True, True, False, False, True, True,
                                True, False, False]
    assert gt_any[0] and gt_any[5] and not gt_any[9]


def test_filter_keeps_trajectories_drops_indices():
    demos = generate_demos(EnvConfig(), 3, seed_base=40)
    store = TransitionStore.from_trajectories(demos)
    # stub with one big artificial drop per trajectory
    seqs = []
    for d in demos:
        rho = np.linspace(0.2, 0.95, d.T)
        rho[d.T // 2] = 0.1
        seqs.append(rho)
    stub = SequenceStub(seqs)
    filtered, report = filter_dataset(store, demos, stub, delta=0.15)
    assert 0 < len(filtered) < len(store)
    assert report.flagged_transitions == len(store) - len(filtered)
    # every trajectory still contributes transitions
    assert set(np.unique(filtered.traj_index)) == {0, 1, 2}
    assert report.fraction_removed == pytest.approx(
        report.flagged_transitions / len(store))


def test_filter_monotone_stub_removes_nothing_keeps_terminal_chunk():
    demos = generate_demos(EnvConfig(), 2, seed_base=44)
    store = TransitionStore.from_trajectories(demos)
    stub = SequenceStub([np.linspace(0.1, 0.98, d.T) for d in demos])
    filtered, report = filter_dataset(store, demos, stub, delta=0.15)
    assert len(filtered) == len(store)
    assert report.flagged_transitions == 0
    # terminal rewarded chunks survive
    for j, d in enumerate(demos):
        rows = (filtered.traj_index == j)
        assert (filtered.step_index[rows] == d.T - 1).any()


def test_filter_deterministic():
    demos = generate_demos(EnvConfig(), 2, seed_base=46)
    store = TransitionStore.from_trajectories(demos)

    def run():
        stub = SequenceStub([np.linspace(0.9, 0.1, d.T) for d in demos])
        filtered, report = filter_dataset(store, demos, stub, delta=0.15)
        return filtered.step_index.copy(), report.fraction_removed

    a, b = run(), run()
    assert np.array_equal(a[0], b[0]) and a[1] == b[1]


def test_drop_magnitudes_shape_and_values():
    rho = np.array([1.0, 0.4, 0.4, 0.4])
    mags = drop_magnitudes(rho, k=3)
    assert mags[0] == pytest.approx(0.6)
    assert mags[-1] == 0.0
