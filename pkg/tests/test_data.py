import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from lodada.data import (Dataset, DatasetParseError, DimensionMismatchError, Domain,
                         EmptyDatasetError, Transition, concat, inject_local_perturbation,
                         load_dataset, merge, normalization_stats, normalize,
                         perturbation_groups, save_dataset, split_representation)

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


def make(n=5, d_s=2, d_a=1, seed=0, domain="source"):
    r = np.random.default_rng(seed)
    return Dataset(r.normal(size=(n, d_s)), r.normal(size=(n, d_a)), r.normal(size=n),
                   r.normal(size=(n, d_s)), [domain] * n, "toy")


@st.composite
def datasets(draw):
    n = draw(st.integers(1, 8))
    d_s = draw(st.integers(1, 3))
    d_a = draw(st.integers(1, 2))
    arr = lambda shape: draw(hnp.arrays(np.float64, shape, elements=finite))
    dom = draw(st.lists(st.sampled_from(["source", "target"]), min_size=n, max_size=n))
    return Dataset(arr((n, d_s)), arr((n, d_a)), arr(n), arr((n, d_s)), dom, "h")


def test_concat_examples():
    np.testing.assert_array_equal(concat(Transition([1, 2], [3], 0.0, [0, 0], "source")), [1, 2, 3])
    np.testing.assert_array_equal(concat(Transition([], [5], 0.0, [], "target")), [5])
    np.testing.assert_array_equal(concat(Transition([0, 0], [0], 0.0, [0, 0], "source")), [0, 0, 0])


@given(datasets())
def test_representation_is_invertible(ds):
    z = ds.z()
    assert z.shape == (len(ds), ds.d_s + ds.d_a)
    s, a = split_representation(z, ds.d_s)
    np.testing.assert_array_equal(s, ds.s)
    np.testing.assert_array_equal(a, ds.a)
    np.testing.assert_array_equal(concat(ds[0]), z[0])


@given(datasets())
def test_save_load_roundtrip(tmp_path_factory, ds):
    path = tmp_path_factory.mktemp("d") / "ds.jsonl"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert back.same_records(ds)
    assert back.name == ds.name


def test_roundtrip_keeps_meta_and_overwrites(tmp_path):
    path = tmp_path / "ds.jsonl"
    save_dataset(make(seed=1), path)
    ds = make(seed=2).replace(meta={"seed": 2})
    save_dataset(ds, path)
    back = load_dataset(path)
    assert back.same_records(ds) and back.meta == {"seed": 2}


def test_unwritable_directory(tmp_path):
    with pytest.raises(OSError):
        save_dataset(make(), tmp_path / "missing" / "ds.jsonl")


def _write(path, lines):
    path.write_text("\n".join(json.dumps(x) if not isinstance(x, str) else x for x in lines) + "\n")


def test_load_three_records(tmp_path):
    rec = {"s": [0.0, 1.0], "a": [0.5], "r": 1.0, "s_next": [1.0, 1.0], "domain": "target"}
    _write(tmp_path / "f.jsonl", [{"d_s": 2, "d_a": 1, "name": "x"}, rec, rec, rec])
    ds = load_dataset(tmp_path / "f.jsonl")
    assert len(ds) == 3 and ds.d_s == 2 and ds.d_a == 1
    assert ds[1].domain is Domain.TARGET


def test_dimension_mismatch_names_record(tmp_path):
    ok = {"s": [0.0, 1.0], "a": [0.5], "r": 1.0, "s_next": [1.0, 1.0], "domain": "source"}
    bad = dict(ok, s=[0.0, 1.0, 2.0])
    _write(tmp_path / "f.jsonl", [{"d_s": 2, "d_a": 1, "name": ""}, ok, bad])
    with pytest.raises(DimensionMismatchError) as exc:
        load_dataset(tmp_path / "f.jsonl")
    assert exc.value.record == 2 and exc.value.line == 3


def test_parse_error_has_line_number(tmp_path):
    ok = {"s": [0.0], "a": [0.5], "r": 1.0, "s_next": [1.0], "domain": "source"}
    _write(tmp_path / "f.jsonl", [{"d_s": 1, "d_a": 1}, ok, '{"s": [1.0], "a": '])
    with pytest.raises(DatasetParseError) as exc:
        load_dataset(tmp_path / "f.jsonl")
    assert exc.value.line == 3


def test_parse_rejects_nan_and_unknown_domain(tmp_path):
    head = {"d_s": 1, "d_a": 1}
    (tmp_path / "nan.jsonl").write_text(json.dumps(head) + '\n{"s": [NaN], "a": [0], "r": 0, '
                                        '"s_next": [0], "domain": "source"}\n')
    with pytest.raises(DatasetParseError):
        load_dataset(tmp_path / "nan.jsonl")
    rec = {"s": [0.0], "a": [0.5], "r": 1.0, "s_next": [1.0], "domain": "elsewhere"}
    _write(tmp_path / "dom.jsonl", [head, rec])
    with pytest.raises(DatasetParseError):
        load_dataset(tmp_path / "dom.jsonl")


def test_empty_file(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    with pytest.raises(EmptyDatasetError):
        load_dataset(tmp_path / "e.jsonl")


def test_dataset_is_read_only():
    ds = make()
    with pytest.raises(ValueError):
        ds.s[0, 0] = 1.0


def test_merge_and_relabel():
    a, b = make(3, seed=0), make(4, seed=1, domain="target")
    m = merge([a, b])
    assert len(m) == 7
    assert list(m.domain) == ["source"] * 3 + ["target"] * 4
    assert set(a.relabel("target").domain) == {"target"}


def test_normalization_examples():
    ds = Dataset([[0.0]], [[0.0]], [0.0], [[2.0]], ["source"])
    st_ = normalization_stats(ds)
    np.testing.assert_allclose(st_.mean, [1.0])
    np.testing.assert_allclose(st_.std, [1.0])
    flat = Dataset([[3.0, 3.0]] * 4, [[0.0]] * 4, [0.0] * 4, [[3.0, 3.0]] * 4, ["source"] * 4)
    np.testing.assert_array_equal(normalization_stats(flat).std, [1e-6, 1e-6])


@given(datasets())
def test_normalized_stats_are_standard(ds):
    X = np.vstack([ds.s, ds.s_next])
    if np.any(X.std(axis=0) < 1e-3):
        return
    st_ = normalization_stats(normalize(ds, normalization_stats(ds)))
    np.testing.assert_allclose(st_.mean, 0.0, atol=1e-9)
    np.testing.assert_allclose(st_.std, 1.0, atol=1e-9)


def _cloud(n=6000, seed=0):
    r = np.random.default_rng(seed)
    return make(n, seed=seed).replace(s_next=r.uniform(-3, 3, size=(n, 2)))


def test_zero_variance_is_identity():
    ds = _cloud(500)
    out = inject_local_perturbation(ds, 7, [0.0], seed=3)
    assert out.same_records(ds)


def test_perturbation_touches_only_next_state():
    ds = _cloud(800)
    out = inject_local_perturbation(ds, 6, [0.1, 0.5, 2.0], seed=1)
    for f in ("s", "a", "r", "domain"):
        np.testing.assert_array_equal(getattr(out, f), getattr(ds, f))
    assert not np.array_equal(out.s_next, ds.s_next)
    assert "perturbation" not in ds.meta


def test_noise_variance_matches_group():
    ds = _cloud(6000)
    variances = [0.1, 0.5, 2.0]
    out = inject_local_perturbation(ds, 15, variances, seed=7)
    group = np.asarray(out.meta["perturbation"]["group"])
    noise = out.s_next - ds.s_next
    for g, v in enumerate(variances):
        m = group == g
        assert m.sum() >= 1000
        assert abs(noise[m].var() / v - 1.0) < 0.2


def test_groups_are_round_robin_over_sorted_regions():
    ds = _cloud(2000)
    region, group = perturbation_groups(ds, 15, 3, seed=0)
    np.testing.assert_array_equal(group, region % 3)
    # region index follows lexicographic order of the region means
    means = np.array([ds.s_next[region == k].mean(axis=0) for k in range(15)])
    assert [tuple(m) for m in means] == sorted(tuple(m) for m in means)


def test_perturbation_argument_errors():
    ds = _cloud(200)
    with pytest.raises(ValueError):
        inject_local_perturbation(ds, 3, [0.1, 0.2, 0.3, 0.4, 0.5], seed=0)
    with pytest.raises(ValueError):
        inject_local_perturbation(ds, 3, [-0.1], seed=0)
    with pytest.raises(ValueError):
        inject_local_perturbation(ds, 3, [], seed=0)
