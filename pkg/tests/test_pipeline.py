import json

import numpy as np
import pytest

from sohtl.cva import LagSpec
from sohtl.dataset import SynthProfile, synth_battery
from sohtl.errors import CorruptModel, InsufficientData, NotTransferable, VersionError
from sohtl.nn import GruConfig, TrainConfig
from sohtl.pipeline import (
    FORMAT_VERSION,
    SourceModel,
    TargetModel,
    dumps_model,
    estimate_cycles,
    estimate_online,
    evaluate_transferability,
    extract_features,
    load_model,
    loads_model,
    save_model,
    train_source,
    train_target,
)

LAG = LagSpec(4, 4)
NET = GruConfig(1, (8,), 4, seed=0)
FIT = TrainConfig(epochs=8, learning_rate=3e-3, batch_size=8)


def small_source(battery):
    return train_source(battery, LAG, 0.95, NET, FIT)


def small_target(source, target, **kw):
    kw.setdefault("force", True)
    cfg = GruConfig(1, (8,), 4, dropout_rates=(0.2,), seed=1)
    return train_target(source, target, 20, cfg, TrainConfig(epochs=4, learning_rate=3e-3, batch_size=4), **kw)


@pytest.fixture(scope="module")
def other_battery():
    return synth_battery(SynthProfile(n_cycles=40, base_cycle_length=48, knee_cycle=20, fade_rate_post=5e-3,
                                      seed=4, initial_capacity=1.08, battery_id="OTHER"))


@pytest.fixture(scope="module")
def source(small_battery):
    return small_source(small_battery)


@pytest.fixture(scope="module")
def target(source, other_battery):
    return small_target(source, other_battery)


def rmse(a, b):
    return float(np.sqrt(np.mean((np.asarray(a) - np.asarray(b)) ** 2)))


class TestTrainSource:
    def test_structure(self, source, small_battery):
        assert source.network.config.input_dim == source.cva.retained_count
        assert len(source.limits) == len(small_battery)
        assert source.limits.beta == 0.95
        assert np.array_equal(source.reference_cycle, small_battery.cycles[0].voltage)
        assert source.train_meta["battery_id"] == "SMALL"
        assert len(source.train_meta["loss_history"]) == FIT.epochs

    def test_fits_its_own_cycles(self):
        b = synth_battery(SynthProfile(seed=1))
        m = train_source(b, LagSpec(8, 8), 0.95, GruConfig(1, (16,), 16),
                         TrainConfig(epochs=90, learning_rate=3e-3, batch_size=16))
        est = [e.total for e in estimate_cycles(m, b.cycles)]
        assert rmse(est, b.capacities) <= 0.01

    def test_reference_too_short(self, small_battery):
        with pytest.raises(InsufficientData):
            train_source(small_battery, LagSpec(30, 30), 0.95, NET, FIT)

    def test_deterministic_bytes(self, source, small_battery):
        assert dumps_model(small_source(small_battery)) == dumps_model(source)


class TestTransferability:
    def test_self_is_similar(self, source, small_battery):
        v = evaluate_transferability(source, small_battery, 20)
        assert v.similar and v.s1_fraction == 1.0 and v.s2_fraction == 1.0 and v.cycles_compared == 20

    def test_window_too_large(self, source, small_battery):
        with pytest.raises(InsufficientData):
            evaluate_transferability(source, small_battery, 41)

    def test_divergent_target(self, source):
        bad = synth_battery(SynthProfile(n_cycles=40, base_cycle_length=48, knee_cycle=5, noise_std=0.02, seed=9))
        assert not evaluate_transferability(source, bad, 20).similar

    def test_gate_failure_raises_without_force(self, source):
        bad = synth_battery(SynthProfile(n_cycles=40, base_cycle_length=48, knee_cycle=5, noise_std=0.02, seed=9))
        with pytest.raises(NotTransferable) as exc:
            small_target(source, bad, force=False)
        assert not exc.value.verdict.similar
        forced = small_target(source, bad, force=True)
        assert forced.train_meta["forced"] and not forced.verdict.similar


class TestTrainTarget:
    def test_structure(self, target):
        assert target.residual_network.config.input_dim == target.source.cva.lag.p
        assert target.target_id == "OTHER"
        assert target.train_meta["window"] == 20

    def test_combined_not_worse_on_window(self, source, target, other_battery):
        window = other_battery.cycles[:20]
        est = estimate_cycles(target, window)
        measured = [c.capacity for c in window]
        assert rmse([e.total for e in est], measured) <= rmse([e.source_component for e in est], measured) + 1e-6

    def test_zero_residual_reproduces_source(self, source, target, small_battery):
        zeroed = TargetModel(source, target.residual_network.copy(), "Z", target.verdict, target.train_meta)
        for p in zeroed.residual_network.params.values():
            p[...] = 0.0
        a = estimate_cycles(source, small_battery.cycles)
        b = estimate_cycles(zeroed, small_battery.cycles)
        assert [e.total for e in a] == [e.total for e in b]


class TestEstimate:
    def test_components_add_up(self, target, other_battery):
        for e in estimate_cycles(target, other_battery.cycles):
            assert e.total == e.source_component + e.residual_component
            assert e.soh == e.total / other_battery.nominal_capacity

    def test_online_matches_batch(self, target, other_battery):
        batch = estimate_cycles(target, other_battery.cycles[25:30])
        online = [estimate_online(target, c) for c in other_battery.cycles[25:30]]
        assert batch == online

    def test_training_cycle_reproduces_training_prediction(self, source, small_battery):
        feats = extract_features(source.cva, source.reference_cycle, small_battery.cycles[:3])
        expected = source.network.predict(feats.cv_sequences)
        got = [estimate_online(source, c).source_component for c in small_battery.cycles[:3]]
        assert got == expected.tolist()

    def test_source_model_has_zero_residual(self, source, small_battery):
        e = estimate_online(source, small_battery.cycles[5])
        assert e.residual_component == 0.0 and e.total == e.source_component


class TestPersistence:
    @pytest.mark.parametrize("which", ["source", "target"])
    def test_round_trip_is_bit_exact(self, request, tmp_path, which, other_battery):
        model = request.getfixturevalue(which)
        path = tmp_path / "m.json"
        save_model(model, path)
        back = load_model(path)
        assert type(back) is type(model)
        assert dumps_model(back) == path.read_text()
        assert estimate_cycles(back, other_battery.cycles) == estimate_cycles(model, other_battery.cycles)

    def test_document_layout(self, target):
        doc = json.loads(dumps_model(target))
        assert doc["format_version"] == FORMAT_VERSION and doc["kind"] == "target"
        for key in ("created_with_seed", "sync", "cva", "limits", "network", "residual_network", "verdict"):
            assert key in doc
        assert "layer0.Wz" in doc["network"]["tensors"]
        assert doc["limits"]["kernel"] == "gaussian"

    def test_truncated(self, source):
        text = dumps_model(source)
        with pytest.raises(CorruptModel):
            loads_model(text[: len(text) // 2])

    def test_tampered(self, source):
        doc = json.loads(dumps_model(source))
        doc["cva"]["retained_count"] += 1
        with pytest.raises(CorruptModel):
            loads_model(json.dumps(doc))

    def test_version_bump(self, source):
        doc = json.loads(dumps_model(source))
        doc["format_version"] = FORMAT_VERSION + 1
        with pytest.raises(VersionError) as exc:
            loads_model(json.dumps(doc))
        assert str(FORMAT_VERSION) in str(exc.value) and str(FORMAT_VERSION + 1) in str(exc.value)

    def test_no_temp_files_left(self, source, tmp_path):
        save_model(source, tmp_path / "m.json")
        assert [p.name for p in tmp_path.iterdir()] == ["m.json"]

    def test_source_kind(self, source):
        assert isinstance(loads_model(dumps_model(source)), SourceModel)
