import csv

import numpy as np
import pytest

from parauni.analysis import (
    default_regions,
    encode_all_layers,
    region_ablation,
    similarity_matrix,
    single_layer_sweep,
    write_ablation_csv,
    write_similarity_csv,
    write_sweep_csv,
)
from parauni.config import resolve_config
from parauni.data import generate_dataset
from parauni.errors import EmptinessError
from parauni.pipeline import build_bundle
from parauni.rewards import RewardKind, alignment_reward, get_scorer


@pytest.fixture(scope="module")
def bundle():
    cfg = resolve_config(None, overrides={"vlm.layers": 3})
    ds = generate_dataset(3, 2, vocab=int(cfg["vlm.vocab"]), seed=1)
    return build_bundle(cfg, ds.prompts)


class TestSweep:
    def test_single_layer_model_degenerates_to_full_report(self):
        cfg = resolve_config(None, overrides={"vlm.layers": 1})
        ds = generate_dataset(2, 2, vocab=int(cfg["vlm.vocab"]), seed=2)
        one = build_bundle(cfg, ds.prompts)
        report = single_layer_sweep(one, [0, 1], alignment_reward, 1, seed=3, steps=4)
        assert len(report) == 1

    def test_constant_scorer_gives_flat_report(self, bundle):
        report = single_layer_sweep(bundle, [0, 1], lambda s, p: 0.25, 1, seed=4, steps=4)
        assert report.scores == [0.25, 0.25, 0.25]

    def test_entries_match_recomputed_means(self, bundle):
        from parauni import tensor as T
        from parauni.diffusion import sample_ode
        from parauni.lim import integrate_single
        from parauni.seeding import derive_seed
        from parauni.tensor import Tensor

        prompts, samples, seed, steps = [0, 2], 2, 5, 4
        report = single_layer_sweep(bundle, prompts, alignment_reward, samples, seed, steps=steps)
        dim = bundle.denoiser.config.sample_dim
        for layer in (1, 3):
            scores = []
            for pid in prompts:
                with T.no_grad():
                    feats = bundle.vlm.forward_collect(bundle.prompt_tokens(pid))
                    cond = Tensor(integrate_single(bundle.lim, feats, layer).data)
                for s in range(samples):
                    sample = sample_ode(
                        bundle.denoiser, cond, steps,
                        derive_seed(seed, "sweep", layer, pid, s), dim,
                    )
                    scores.append(alignment_reward(sample, pid))
            assert report.scores[layer - 1] == pytest.approx(np.mean(scores), rel=1e-9)

    def test_deterministic_given_seed(self, bundle):
        a = single_layer_sweep(bundle, [0], alignment_reward, 1, seed=6, steps=4)
        b = single_layer_sweep(bundle, [0], alignment_reward, 1, seed=6, steps=4)
        assert a.scores == b.scores

    def test_report_length_is_layer_count(self, bundle):
        report = single_layer_sweep(bundle, [0], alignment_reward, 1, seed=7, steps=3)
        assert len(report) == bundle.vlm.config.layers


class TestSimilarity:
    def test_identical_layers_give_all_ones(self):
        rng = np.random.default_rng(8)
        block = rng.standard_normal((4, 8))
        got = similarity_matrix([block.copy() for _ in range(3)])
        np.testing.assert_allclose(got.values, np.ones((3, 3)), atol=1e-9)

    def test_orthogonal_layers_give_identity(self):
        layers = [np.tile(row, (4, 1)) for row in np.eye(3)]
        got = similarity_matrix(layers)
        np.testing.assert_allclose(got.values, np.eye(3), atol=1e-12)

    def test_matches_scalar_cosine_oracle(self):
        rng = np.random.default_rng(9)
        layers = [rng.standard_normal((5, 6)) for _ in range(4)]
        got = similarity_matrix(layers)
        for i in range(4):
            for j in range(4):
                a = layers[i].mean(axis=0)
                b = layers[j].mean(axis=0)
                want = float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
                assert got.values[i, j] == pytest.approx(want, abs=1e-12)

    def test_zero_norm_layer_flagged_and_zeroed(self):
        rng = np.random.default_rng(10)
        layers = [rng.standard_normal((3, 4)), np.zeros((3, 4))]
        got = similarity_matrix(layers)
        assert got.zero_norm_layers == [2]
        assert got.values[0, 1] == 0.0 and got.values[1, 1] == 0.0

    def test_per_query_pooling_option(self):
        rng = np.random.default_rng(16)
        layers = [rng.standard_normal((4, 6)) for _ in range(3)]
        got = similarity_matrix(layers, per_query=True)
        for i in range(3):
            for j in range(3):
                rows = [
                    float(np.dot(layers[i][q], layers[j][q])
                          / (np.linalg.norm(layers[i][q]) * np.linalg.norm(layers[j][q])))
                    for q in range(4)
                ]
                assert got.values[i, j] == pytest.approx(np.mean(rows), abs=1e-12)
        np.testing.assert_allclose(np.diag(got.values), 1.0, atol=1e-9)

    def test_structural_invariants_on_model_features(self, bundle):
        from parauni import tensor as T

        with T.no_grad():
            feats = bundle.vlm.forward_collect(bundle.prompt_tokens(0))
        got = similarity_matrix(encode_all_layers(bundle.lim, feats))
        values = got.values
        assert values.shape == (3, 3)
        np.testing.assert_allclose(values, values.T, atol=1e-6)
        np.testing.assert_allclose(np.diag(values), 1.0, atol=1e-6)
        assert np.all(values >= -1.0) and np.all(values <= 1.0)


class TestAblation:
    def test_deltas_reconcile_with_raw_scores(self, bundle):
        report = region_ablation(
            bundle, {"deep": [3]}, list(RewardKind), [0, 1], seed=11,
            samples_per_prompt=1, steps=3,
        )
        for row in report.rows:
            assert row.delta == pytest.approx(row.ablated - row.baseline, abs=0)
            assert row.baseline == pytest.approx(report.baselines[row.reward])

    def test_single_layer_complement_matches_integrate_single(self, bundle):
        # ablating layers {1, 2} on a 3-layer stack conditions on layer 3 alone
        from parauni import tensor as T
        from parauni.diffusion import sample_ode
        from parauni.lim import integrate_single
        from parauni.seeding import derive_seed
        from parauni.tensor import Tensor

        report = region_ablation(
            bundle, {"low": [1, 2]}, [RewardKind.ALIGNMENT], [0], seed=12,
            samples_per_prompt=1, steps=3,
        )
        with T.no_grad():
            feats = bundle.vlm.forward_collect(bundle.prompt_tokens(0))
            cond = Tensor(integrate_single(bundle.lim, feats, 3).data)
        sample = sample_ode(
            bundle.denoiser, cond, 3, derive_seed(12, "ablation", 0, 0),
            bundle.denoiser.config.sample_dim,
        )
        want = alignment_reward(sample, 0)
        row = report.rows[0]
        assert row.ablated == pytest.approx(want, rel=1e-9)

    def test_region_covering_all_layers_rejected(self, bundle):
        with pytest.raises(EmptinessError, match="complement"):
            region_ablation(bundle, {"all": [1, 2, 3]}, [RewardKind.QUALITY], [0], seed=0)

    def test_empty_region_rejected(self, bundle):
        with pytest.raises(EmptinessError):
            region_ablation(bundle, {"none": []}, [RewardKind.QUALITY], [0], seed=0)

    def test_empty_region_list_gives_only_baselines(self, bundle):
        report = region_ablation(
            bundle, {}, [RewardKind.QUALITY], [0], seed=13, samples_per_prompt=1, steps=3
        )
        assert report.rows == []
        assert set(report.baselines) == {"quality"}


def test_default_regions_partition_the_stack():
    regions = default_regions(28)
    assert regions["middle"] == list(range(12, 24))
    assert regions["deep"] == list(range(24, 29))
    assert regions["shallow"] == list(range(1, 12))
    joined = sorted(i for r in regions.values() for i in r)
    assert joined == list(range(1, 29))


def test_csv_schemas(tmp_path, bundle):
    report = single_layer_sweep(bundle, [0], alignment_reward, 1, seed=14, steps=3)
    write_sweep_csv(report, tmp_path / "sweep.csv")
    rows = list(csv.reader(open(tmp_path / "sweep.csv")))
    assert rows[0] == ["layer", "score"] and len(rows) == 4

    from parauni import tensor as T

    with T.no_grad():
        feats = bundle.vlm.forward_collect(bundle.prompt_tokens(0))
    matrix = similarity_matrix(encode_all_layers(bundle.lim, feats))
    write_similarity_csv(matrix, tmp_path / "sim.csv")
    rows = list(csv.reader(open(tmp_path / "sim.csv")))
    assert rows[0] == ["i", "j", "value"] and len(rows) == 1 + 9

    ab = region_ablation(
        bundle, {"deep": [3]}, [RewardKind.QUALITY], [0], seed=15,
        samples_per_prompt=1, steps=3,
    )
    write_ablation_csv(ab, tmp_path / "ab.csv")
    rows = list(csv.reader(open(tmp_path / "ab.csv")))
    assert rows[0] == ["region", "reward", "baseline", "ablated", "delta"]
    assert len(rows) == 2
