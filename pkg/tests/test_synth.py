from pathlib import Path

import numpy as np
import pytest

from uniseg_lab import synth, utils
from uniseg_lab.errors import ConfigError, LabelSpaceError
from uniseg_lab.labelspace import unify

spec, taxonomies = synth.default_fixture(seed=0)
coarse = synth.generate(spec, 'COARSE', 3, 16, 20, split_seed=0)
fine = synth.generate(spec, 'FINE', 3, 16, 20, split_seed=0)


@pytest.mark.fast
def test_fixture_spaces() -> None:
    assert [t.dataset_id for t in taxonomies] == ['COARSE', 'FINE']
    assert unify(taxonomies).num_classes == 9
    _, bench = synth.benchmark_fixture()
    assert [t.dataset_id for t in bench] == ['COARSE', 'FINE', 'MID']
    assert unify(bench).num_classes == 9


@pytest.mark.fast
def test_generate_is_deterministic() -> None:
    again = synth.generate(spec, 'COARSE', 3, 16, 20, split_seed=0)
    other = synth.generate(spec, 'COARSE', 3, 16, 20, split_seed=1)
    for a, b, c in zip(coarse, again, other):
        assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)
        assert not np.array_equal(a.features, c.features)


@pytest.mark.fast
def test_images_do_not_depend_on_their_count() -> None:
    more = synth.generate(spec, 'COARSE', 5, 16, 20, split_seed=0)
    assert all(np.array_equal(a.features, b.features) for a, b in zip(coarse, more))


@pytest.mark.fast
def test_identical_images_different_labels() -> None:
    """Features depend on the fine classes only; datasets differ in their labels."""
    moto = spec.fine_classes.index('motorcyclist')
    for c, f in zip(coarse, fine):
        assert np.array_equal(c.features, f.features)
        assert np.array_equal(c.fine_truth, f.fine_truth)
        at = c.fine_truth == moto
        if np.any(at):
            assert np.all(c.labels[at] == taxonomies[0].classes.index('rider'))
            assert np.all(f.labels[at] == taxonomies[1].classes.index('motorcyclist'))


@pytest.mark.fast
def test_sample_shapes_and_ranges() -> None:
    for sample in coarse:
        assert sample.features.shape == (16, 20, spec.feature_dim)
        assert sample.labels.shape == (16, 20)
        assert sample.labels.min() >= 0 and sample.labels.max() < len(taxonomies[0].classes)
        assert sample.fine_truth.max() < len(spec.fine_classes)


@pytest.mark.fast
def test_tiling_follows_class_weights() -> None:
    building = spec.fine_classes.index('building')
    only = spec._replace(class_weights=tuple(1.0 if f == building else 0.0 for f in range(len(spec.fine_classes))))
    assert np.all(synth._tile(np.random.default_rng(0), only, 16, 20) == building)


@pytest.mark.fast
def test_generate_errors() -> None:
    with pytest.raises(LabelSpaceError):
        synth.generate(spec, 'MISSING', 1, 4, 4, 0)
    with pytest.raises(ConfigError):
        synth.generate(spec, 'COARSE', 0, 4, 4, 0)


@pytest.mark.fast
def test_planted_relations() -> None:
    recoverable, conflicts = synth.planted_relations(spec, taxonomies)
    assert recoverable == {('FINE', 'motorcyclist', 'rider'), ('FINE', 'bicyclist', 'rider')}
    assert conflicts == {('FINE', 'lane_marking', 'road')}


@pytest.mark.fast
def test_check_spec() -> None:
    broken = dict(spec.coarsen)
    broken['COARSE'] = {k: v for k, v in spec.coarsen['COARSE'].items() if k != 'road'}
    with pytest.raises(ConfigError):
        synth.check_spec(spec._replace(coarsen=broken))
    with pytest.raises(ConfigError):
        synth.check_spec(spec._replace(cluster_means=np.zeros_like(spec.cluster_means)))
    with pytest.raises(ConfigError):
        synth.check_spec(spec._replace(min_rect=20, max_rect=10))


@pytest.mark.fast
def test_spec_document(tmp_path: Path) -> None:
    doc = synth.spec_to_doc(spec)
    doc.pop('local_classes')
    path = tmp_path / 'spec.yml'
    utils.write_json(path, doc)
    loaded, loaded_taxonomies, _ = synth.load_spec(path, seed=5)
    assert loaded.seed == 5
    assert [t.classes for t in loaded_taxonomies] == [t.classes for t in taxonomies]

    fixture_path = tmp_path / 'fixture.yml'
    fixture_path.write_text('fixture: benchmark\n', encoding='utf-8')
    _, bench, _ = synth.load_spec(fixture_path)
    assert len(bench) == 3

    both = tmp_path / 'both.yml'
    utils.write_json(both, {**synth.spec_to_doc(spec), 'fixture': 'default'})
    with pytest.raises(ConfigError):
        synth.load_spec(both)


@pytest.mark.fast
def test_dump_and_replay(tmp_path: Path) -> None:
    bundle = synth.generate_bundle(spec, taxonomies, 2, 1, 6, 7)
    manifest = synth.dump_datasets(bundle, tmp_path / 'dump')
    assert manifest.name == 'manifest.json'
    replay = synth.load_dump(tmp_path / 'dump')
    assert [t.dataset_id for t in replay.taxonomies] == ['COARSE', 'FINE']
    for dataset_id in ('COARSE', 'FINE'):
        for a, b in zip(bundle.train[dataset_id], replay.train[dataset_id]):
            assert np.array_equal(a.features, b.features)
            assert np.array_equal(a.labels, b.labels)
            assert np.array_equal(a.fine_truth, b.fine_truth)
    assert len(replay.test['FINE']) == 1


@pytest.mark.fast
def test_load_data_and_select() -> None:
    bundle = synth.load_data('fixture:benchmark', 1, 1, 5, 5)
    picked = synth.select(bundle, ['MID', 'COARSE'])
    assert [t.dataset_id for t in picked.taxonomies] == ['COARSE', 'MID']
    assert set(picked.train) == {'COARSE', 'MID'}
    assert synth.select(bundle, None) is bundle
    with pytest.raises(ConfigError):
        synth.select(bundle, ['NOPE'])
    with pytest.raises(ConfigError):
        synth.load_data('fixture:nope')
    with pytest.raises(ConfigError):
        synth.load_data('/nonexistent/dump')


@pytest.mark.fast
def test_split_seeds_are_distinct() -> None:
    bench_spec, bench = synth.benchmark_fixture()
    seeds = {synth.split_seed_of(bench_spec, t.dataset_id, split) for t in bench for split in synth.SPLITS}
    assert len(seeds) == 6
