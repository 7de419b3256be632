import numpy as np
import pytest

from eaekit.attacks import AttackSpec
from eaekit.data import BatchPlan, make_image_surrogate, make_synthetic
from eaekit.errors import ContractError, NumericAbort
from eaekit.nn import build_model, checkpoint_bytes
from eaekit.train import TrainSpec, train, train_time_benchmark


@pytest.fixture(scope="module")
def blobs():
    return make_synthetic("gaussian-blobs", 3, 200, dim=4, noise=0.4, seed=0)


def _fresh(ds, seed=0):
    return build_model("mlp-small", ds.sample_shape, ds.num_classes, seed=seed)


ATTACKS = {
    "fgsm-at": AttackSpec("fgsm", 0.05),
    "fast-at": AttackSpec("fast-step", 0.05, alpha=0.0625),
    "pgd-at": AttackSpec("pgd", 0.05, alpha=0.025, iterations=7, random_start=True),
}


class TestSpec:
    def test_eae_needs_gamma(self):
        with pytest.raises(ContractError, match="gamma"):
            TrainSpec("eae", 1, 8)

    def test_gamma_only_for_eae(self):
        with pytest.raises(ContractError):
            TrainSpec("normal", 1, 8, gamma=3.0)

    def test_attack_required(self):
        with pytest.raises(ContractError):
            TrainSpec("pgd-at", 1, 8)

    def test_attack_kind_must_match(self):
        with pytest.raises(ContractError):
            TrainSpec("fgsm-at", 1, 8, attack=ATTACKS["pgd-at"])

    def test_unknown_method(self):
        with pytest.raises(ContractError):
            TrainSpec("trades", 1, 8)


class TestPassCounts:
    @pytest.mark.parametrize(
        "method,per_batch",
        [("normal", (1, 1, 0)), ("eae", (1, 1, 0)), ("fgsm-at", (2, 1, 1)), ("fast-at", (2, 1, 1)), ("pgd-at", (8, 1, 7))],
    )
    def test_per_minibatch(self, blobs, method, per_batch):
        epochs = 2
        spec = TrainSpec(
            method,
            epochs,
            32,
            clr_max=0.05,
            gamma=3.0 if method == "eae" else None,
            attack=ATTACKS.get(method),
        )
        _, instr, _ = train(_fresh(blobs), blobs, spec)
        k = BatchPlan(32).count(len(blobs))
        assert instr.minibatches_per_epoch == k
        steps = epochs * k
        assert (instr.forward_passes, instr.param_backward_passes, instr.input_grad_passes) == tuple(
            n * steps for n in per_batch
        )
        assert instr.per_minibatch() == tuple(float(n) for n in per_batch)
        assert len(instr.wall_time_per_epoch) == epochs


class TestTraining:
    def test_zero_noise_reaches_full_accuracy(self):
        ds = make_synthetic("gaussian-blobs", 3, 150, dim=2, noise=0.0, seed=4)
        model = _fresh(ds)
        _, _, history = train(model, ds, TrainSpec("normal", 20, 16, clr_max=0.2))
        assert np.mean(model.predict(ds.inputs) == ds.labels) == 1.0
        assert history[-1]["train_acc"] == 1.0

    @pytest.mark.parametrize("method", ["normal", "eae", "pgd-at"])
    def test_reproducible(self, blobs, method):
        spec = TrainSpec(method, 2, 32, clr_max=0.05, gamma=3.0 if method == "eae" else None, attack=ATTACKS.get(method))
        a, _, ha = train(_fresh(blobs), blobs, spec)
        b, _, hb = train(_fresh(blobs), blobs, spec)
        assert checkpoint_bytes(a) == checkpoint_bytes(b)
        assert [h["loss"] for h in ha] == [h["loss"] for h in hb]

    def test_seed_changes_order(self, blobs):
        a, _, _ = train(_fresh(blobs), blobs, TrainSpec("normal", 1, 32, clr_max=0.05, seed=0))
        b, _, _ = train(_fresh(blobs), blobs, TrainSpec("normal", 1, 32, clr_max=0.05, seed=1))
        assert checkpoint_bytes(a) != checkpoint_bytes(b)

    def test_loss_falls(self, blobs):
        _, _, history = train(_fresh(blobs), blobs, TrainSpec("normal", 10, 16, clr_max=0.1))
        losses = [h["loss"] for h in history]
        assert losses[-1] < 0.5 * losses[0]
        half = losses[: len(losses) // 2 + 1]
        assert all(b <= a * 1.05 for a, b in zip(half, half[1:]))

    def test_eae_gated_fraction_reported(self, blobs):
        _, _, history = train(_fresh(blobs), blobs, TrainSpec("eae", 2, 32, clr_max=0.05, gamma=3.0))
        assert all(0.0 <= h["gated_fraction"] <= 1.0 for h in history)
        # logits start near zero, so nearly every row sits below the gate
        assert history[0]["gated_fraction"] > 0.9

    def test_eae_gamma_zero_matches_normal(self, blobs):
        a, _, _ = train(_fresh(blobs), blobs, TrainSpec("normal", 2, 32, clr_max=0.05))
        b, _, _ = train(_fresh(blobs), blobs, TrainSpec("eae", 2, 32, clr_max=0.05, gamma=0.0))
        assert checkpoint_bytes(a) == checkpoint_bytes(b)

    def test_nan_abort(self, blobs):
        with pytest.raises(NumericAbort, match="clr_max"):
            train(_fresh(blobs), blobs, TrainSpec("normal", 3, 32, clr_max=1e100))

    def test_empty_dataset(self, blobs):
        with pytest.raises(ContractError):
            train(_fresh(blobs), blobs.subset(np.array([], dtype=int)), TrainSpec("normal", 1, 8))


class TestBenchmark:
    def test_rows(self, blobs):
        specs = [TrainSpec("normal", 3, 32, clr_max=0.05), TrainSpec("eae", 3, 32, clr_max=0.05, gamma=3.0)]
        rows = train_time_benchmark(specs, blobs, "mlp-small")
        assert [r["method"] for r in rows] == ["normal", "eae"]
        assert rows[1]["input_grad_bwd"] == 0 and rows[0]["epochs_timed"] == 2

    def test_rounds_pool_epochs(self, blobs):
        specs = [TrainSpec("normal", 3, 32, clr_max=0.05), TrainSpec("eae", 3, 32, clr_max=0.05, gamma=3.0)]
        one = train_time_benchmark(specs, blobs, "mlp-small")
        three = train_time_benchmark(specs, blobs, "mlp-small", rounds=3)
        assert [r["epochs_timed"] for r in three] == [6, 6]
        for a, b in zip(one, three):
            assert (a["param_bwd"], a["input_grad_bwd"], a["final_loss"]) == (b["param_bwd"], b["input_grad_bwd"], b["final_loss"])
            assert checkpoint_bytes(a["model"]) == checkpoint_bytes(b["model"])

    def test_self_comparison(self):
        ds = make_image_surrogate(num_classes=4, per_class=40, seed=0, shape=(3, 16, 16))
        spec = TrainSpec("normal", 4, 32, clr_max=0.05)
        best = None
        for _ in range(3):
            rows = train_time_benchmark([spec, spec], ds, "cnn-small")
            a, b = rows[0]["sec_per_epoch"], rows[1]["sec_per_epoch"]
            ratio = abs(a - b) / min(a, b)
            best = ratio if best is None else min(best, ratio)
            if best < 0.2:
                break
        assert best < 0.2

    def test_mismatched_epochs(self, blobs):
        with pytest.raises(ContractError):
            train_time_benchmark([TrainSpec("normal", 1, 8), TrainSpec("normal", 2, 8)], blobs, "mlp-small")

