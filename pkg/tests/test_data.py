import io

import numpy as np
import pytest

from damex.data import (
    BACKGROUND,
    DatasetSpec,
    Token,
    TokenBatch,
    generate_mixture,
    parse_tokens_csv,
    preset_specs,
    read_tokens_csv,
    tokens_csv_text,
    union_label_count,
    write_tokens_csv,
)
from damex.errors import ConfigError, ParameterError, ShapeError


def small_spec(dataset_id=0, **overrides):
    fields = dict(
        dataset_id=dataset_id,
        num_train=40,
        num_eval=20,
        classes=(0, 1),
        class_means={0: np.zeros(4), 1: np.ones(4)},
        domain_offset=np.zeros(4),
        spread=0.5,
        background_fraction=0.25,
    )
    fields.update(overrides)
    return DatasetSpec(**fields)


class TestTokenTypes:
    def test_token_label_iff_foreground(self):
        Token(np.zeros(3), 0, True, 2)
        Token(np.zeros(3), 0, False, None)
        with pytest.raises(ParameterError):
            Token(np.zeros(3), 0, True, None)
        with pytest.raises(ParameterError):
            Token(np.zeros(3), 0, False, 1)

    def test_batch_invariant(self):
        with pytest.raises(ParameterError):
            TokenBatch(np.zeros((2, 3)), [0, 0], [True, False], [1, 1])

    def test_batch_shape_checks(self):
        with pytest.raises(ShapeError):
            TokenBatch(np.zeros(3), [0], [True], [0])
        with pytest.raises(ShapeError):
            TokenBatch(np.zeros((2, 3)), [0], [True, False], [1, BACKGROUND])

    def test_roundtrip_through_tokens(self):
        batch = TokenBatch(
            np.arange(6.0).reshape(2, 3), [0, 1], [True, False], [4, BACKGROUND]
        )
        again = TokenBatch.from_tokens(list(batch.tokens()))
        assert np.array_equal(again.features, batch.features)
        assert np.array_equal(again.labels, batch.labels)

    def test_take_preserves_columns(self):
        batch = TokenBatch(
            np.arange(8.0).reshape(4, 2),
            [0, 1, 0, 1],
            [True, True, False, False],
            [0, 1, BACKGROUND, BACKGROUND],
        )
        sub = batch.take([3, 0])
        assert np.array_equal(sub.dataset_ids, [1, 0])
        assert np.array_equal(sub.features[1], batch.features[0])


class TestDatasetSpec:
    @pytest.mark.parametrize(
        "overrides",
        [
            dict(num_train=0),
            dict(num_eval=-1),
            dict(classes=()),
            dict(spread=0.0),
            dict(background_fraction=1.0),
            dict(classes=(0, 3)),  # class 3 has no mean
        ],
    )
    def test_invalid_specs_rejected(self, overrides):
        with pytest.raises(ConfigError):
            small_spec(**overrides)


class TestGenerateMixture:
    def test_determinism_is_bitwise(self):
        specs = [small_spec(0), small_spec(1, domain_offset=np.ones(4))]
        a_train, a_eval = generate_mixture(specs, seed=5)
        b_train, b_eval = generate_mixture(specs, seed=5)
        assert np.array_equal(a_train.features, b_train.features)
        assert np.array_equal(a_eval.features, b_eval.features)
        assert np.array_equal(a_train.labels, b_train.labels)

    def test_different_seeds_differ(self):
        specs = [small_spec(0)]
        a, _ = generate_mixture(specs, seed=1)
        b, _ = generate_mixture(specs, seed=2)
        assert not np.array_equal(a.features, b.features)

    def test_adding_a_dataset_leaves_others_untouched(self):
        solo, _ = generate_mixture([small_spec(0)], seed=9)
        both, _ = generate_mixture(
            [small_spec(0), small_spec(1, domain_offset=np.ones(4))], seed=9
        )
        mask = both.dataset_ids == 0
        assert np.array_equal(both.features[mask], solo.features)

    def test_foreground_counts_are_exact(self):
        spec = small_spec(0, num_train=37, num_eval=11)
        train, evalb = generate_mixture([spec], seed=0)
        assert int(train.foreground.sum()) == 37
        assert int(evalb.foreground.sum()) == 11

    def test_background_fraction_of_total(self):
        spec = small_spec(0, num_train=300, background_fraction=0.25)
        train, _ = generate_mixture([spec], seed=0)
        frac = 1.0 - train.foreground.mean()
        assert frac == pytest.approx(0.25, abs=0.01)

    def test_empty_specs_rejected(self):
        with pytest.raises(ConfigError):
            generate_mixture([], seed=0)

    def test_duplicate_ids_rejected(self):
        with pytest.raises(ConfigError):
            generate_mixture([small_spec(0), small_spec(0)], seed=0)

    def test_labels_only_from_declared_classes(self):
        train, _ = generate_mixture([small_spec(0, classes=(1,))], seed=3)
        assert set(train.labels[train.foreground]) == {1}

    def test_clusters_center_on_mean_plus_offset(self):
        spec = small_spec(
            0,
            num_train=4000,
            classes=(1,),
            domain_offset=np.array([10.0, 0, 0, 0]),
            background_fraction=0.0,
        )
        train, _ = generate_mixture([spec], seed=4)
        centre = train.features.mean(axis=0)
        assert np.allclose(centre, np.ones(4) + [10, 0, 0, 0], atol=0.1)


class TestPresets:
    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            preset_specs("bogus")

    def test_limited_shot_count_is_exact(self):
        for shots in (50, 100, 1000):
            specs = preset_specs("limited", shots=shots)
            train, _ = generate_mixture(specs, seed=0)
            minority = train.foreground & (train.dataset_ids == 1)
            assert int(minority.sum()) == shots

    def test_divergent_label_subsets_are_disjoint(self):
        specs = preset_specs("divergent")
        train, evalb = generate_mixture(specs, seed=0)
        for batch in (train, evalb):
            fg = batch.foreground
            set0 = set(batch.labels[fg & (batch.dataset_ids == 0)])
            set1 = set(batch.labels[fg & (batch.dataset_ids == 1)])
            assert set0 and set1 and not (set0 & set1)

    def test_domains_share_labels_but_not_offsets(self):
        specs = preset_specs("domains")
        assert specs[0].classes == specs[1].classes
        assert not np.array_equal(specs[0].domain_offset, specs[1].domain_offset)

    def test_divergent_shares_offset_but_not_axes(self):
        # Divergence lives in the class geometry, not the domain: both
        # datasets share one offset, each is a two-mode layout, and the
        # feature axes occupied by the cluster means do not overlap.
        specs = preset_specs("divergent")
        assert np.array_equal(specs[0].domain_offset, specs[1].domain_offset)
        used = []
        for s in specs:
            assert all(m.shape[0] == 2 for m in s.class_means.values())
            axes = set()
            for m in s.class_means.values():
                axes.update(np.flatnonzero(np.abs(m).sum(axis=0)))
            used.append(axes)
        assert not (used[0] & used[1])

    def test_union_label_count(self):
        for name in ("limited", "domains", "divergent"):
            train, evalb = generate_mixture(preset_specs(name), seed=0)
            assert union_label_count([train, evalb]) == 4

    def test_requested_dim_respected(self):
        train, _ = generate_mixture(preset_specs("domains", dim=20), seed=0)
        assert train.num_features == 20


class TestCsvRoundTrip:
    def test_write_read_is_bit_exact(self, tmp_path):
        train, _ = generate_mixture([small_spec(0), small_spec(1)], seed=11)
        path = tmp_path / "tokens.csv"
        write_tokens_csv(train, path)
        again = read_tokens_csv(path)
        assert np.array_equal(again.features, train.features)
        assert np.array_equal(again.dataset_ids, train.dataset_ids)
        assert np.array_equal(again.foreground, train.foreground)
        assert np.array_equal(again.labels, train.labels)

    def test_header_contract(self):
        train, _ = generate_mixture([small_spec(0)], seed=0)
        first = tokens_csv_text(train).splitlines()[0]
        assert first == "dataset_id,foreground,label," + ",".join(
            f"f{j}" for j in range(4)
        )

    def test_background_label_cell_empty(self):
        batch = TokenBatch(
            np.zeros((2, 2)), [0, 0], [True, False], [3, BACKGROUND]
        )
        lines = tokens_csv_text(batch).splitlines()
        assert lines[1].startswith("0,1,3,")
        assert lines[2].startswith("0,0,,")

    @pytest.mark.parametrize(
        "body,bad_line",
        [
            ("dataset_id,foreground,label,f0\n0,1,,1.0\n", 2),  # fg missing label
            ("dataset_id,foreground,label,f0\n0,0,2,1.0\n", 2),  # bg with label
            ("dataset_id,foreground,label,f0\n0,2,1,1.0\n", 2),  # bad flag
            ("dataset_id,foreground,label,f0\n0,1,1\n", 2),  # missing field
            ("dataset_id,foreground,label,f0\n0,1,1,abc\n", 2),  # bad float
            ("dataset,foreground,label,f0\n", 1),  # bad header
            ("dataset_id,foreground,label,g0\n", 1),  # bad feature names
            ("dataset_id,foreground,label,f0\n", 2),  # no tokens
        ],
    )
    def test_malformed_input_names_the_line(self, body, bad_line):
        with pytest.raises(ConfigError) as exc:
            parse_tokens_csv(io.StringIO(body))
        assert f"line {bad_line}:" in str(exc.value)

    def test_same_seed_writes_identical_bytes(self):
        specs = preset_specs("domains")
        a, _ = generate_mixture(specs, seed=7)
        b, _ = generate_mixture(specs, seed=7)
        assert tokens_csv_text(a) == tokens_csv_text(b)
