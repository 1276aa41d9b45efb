import numpy as np
import pytest
from hypothesis import given, strategies as st

from multiaccuracy.data import (Dataset, Schema, SynthSpec, generate_adversarial,
                                generate_semisynth, hidden_group_cut, load_csv, load_schema,
                                save_schema, split, split_indices, write_csv)
from multiaccuracy.errors import FormatError, InvalidInput
from multiaccuracy.metrics import classification_error

# reference sizes of the income-prediction protocol
ADULT_N, ADULT_TRAIN, ADULT_AUDIT, ADULT_TEST = 45_222, 27_145, 3_017, 15_060


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


# ---- CSV ingestion -------------------------------------------------------


def test_group_columns_are_not_features(tmp_path):
    p = write(tmp_path / "d.csv", "a,b,label,group:sex\n1,2,0,F\n3,4.5,1,M\n-1,0,1,F\n")
    data = load_csv(p)
    assert data.n == 3 and data.d == 2
    assert data.feature_names == ["a", "b"]
    assert data.groups["sex"].tolist() == ["F", "M", "F"]
    assert data.y.tolist() == [0.0, 1.0, 1.0]
    wide = load_csv(p, Schema(include_groups=True))
    assert wide.d == 4 and "group:sex=F" in wide.feature_names


def test_one_hot_schema(tmp_path):
    p = write(tmp_path / "d.csv", "age,work,label\n30,private,1\n40,gov,0\n")
    schema = Schema(one_hot={"work": ["gov", "private", "self"]})
    save_schema(schema, tmp_path / "s.json")
    data = load_csv(p, load_schema(tmp_path / "s.json"))
    assert data.feature_names == ["age", "work=gov", "work=private", "work=self"]
    assert data.X.tolist() == [[30, 0, 1, 0], [40, 1, 0, 0]]
    bad = write(tmp_path / "e.csv", "age,work,label\n30,army,1\n")
    with pytest.raises(FormatError, match="work"):
        load_csv(bad, schema)


@pytest.mark.parametrize("text, where", [
    ("a,b\n1,2\n", ":1"),
    ("a,label\n1,2\n", ":2:label"),
    ("a,label\n1,yes\n", ":2:label"),
    ("a,label\n1,0\nx,1\n", ":3:a"),
    ("a,label\n1,0\n1,0,5\n", ":3"),
    ("a,label\nnan,0\n", ":2:a"),
])
def test_csv_errors_carry_position(tmp_path, text, where):
    p = write(tmp_path / "d.csv", text)
    with pytest.raises(FormatError) as err:
        load_csv(p)
    assert where in str(err.value)


def test_csv_round_trip(tmp_path):
    data = generate_semisynth(SynthSpec(n=50, seed=4))
    write_csv(data, tmp_path / "d.csv")
    back = load_csv(tmp_path / "d.csv")
    assert np.array_equal(back.X, data.X)
    assert np.array_equal(back.y, data.y)
    assert all(np.array_equal(back.groups[k], data.groups[k]) for k in data.groups)


def test_dataset_validation():
    with pytest.raises(InvalidInput):
        Dataset(np.zeros((2, 1)), [0, 2])
    with pytest.raises(InvalidInput):
        Dataset(np.array([[np.inf]]), [0])
    with pytest.raises(InvalidInput):
        Dataset(np.zeros((2, 1)), [0, 1], groups={"g": ["a"]})


# ---- splits --------------------------------------------------------------


def test_split_sizes_and_determinism():
    parts = split_indices(10, (0.6, 0.2, 0.2), seed=3)
    assert [len(p) for p in parts] == [6, 2, 2]
    again = split_indices(10, (0.6, 0.2, 0.2), seed=3)
    assert all(np.array_equal(a, b) for a, b in zip(parts, again))
    assert sorted(np.concatenate(parts).tolist()) == list(range(10))


def test_split_errors():
    with pytest.raises(InvalidInput):
        split_indices(10, (0.5, 0.6))
    with pytest.raises(InvalidInput):
        split_indices(10, (0.98, 0.01, 0.01))
    with pytest.raises(InvalidInput):
        split_indices(10, (0.5, 0.0))


def test_adult_protocol_split_sizes():
    exact = [ADULT_TRAIN / ADULT_N, ADULT_AUDIT / ADULT_N, ADULT_TEST / ADULT_N]
    sizes = [len(p) for p in split_indices(ADULT_N, exact, seed=0)]
    assert sizes == [ADULT_TRAIN, ADULT_AUDIT, ADULT_TEST]
    rounded = [len(p) for p in split_indices(ADULT_N, (0.60, 0.067, 0.333), seed=0)]
    for got, want in zip(rounded, (ADULT_TRAIN, ADULT_AUDIT, ADULT_TEST)):
        assert abs(got - want) <= 0.005 * ADULT_N


@given(st.integers(5, 300), st.integers(0, 1000))
def test_split_partitions_index_set(n, seed):
    parts = split_indices(n, (0.5, 0.3, 0.2), seed)
    joined = np.concatenate(parts)
    assert len(joined) == len(set(joined.tolist())) == n


def test_split_datasets_keep_groups():
    data = generate_semisynth(SynthSpec(n=100))
    a, b = split(data, (0.5, 0.5), seed=1)
    assert a.n + b.n == 100 and set(a.groups) == {"age", "sex"}


# ---- semi-synthetic ------------------------------------------------------


@pytest.fixture(scope="module")
def default_synth():
    return generate_semisynth(SynthSpec())


def test_semisynth_group_masses(default_synth):
    data = default_synth
    assert data.n == 40_000
    key = np.char.add(data.groups["age"], data.groups["sex"])
    for name, share in zip(("OF", "OM", "YF", "YM"), (0.150, 0.197, 0.246, 0.407)):
        assert abs(np.mean(key == name) - share) < 0.01


def test_semisynth_label_balance(default_synth):
    data = default_synth
    key = np.char.add(data.groups["age"], data.groups["sex"])
    for name in ("OF", "OM", "YF", "YM"):
        assert abs(data.y[key == name].mean() - 0.5) <= 0.02


def test_semisynth_deterministic(tmp_path):
    a = generate_semisynth(SynthSpec(n=300, seed=9))
    b = generate_semisynth(SynthSpec(n=300, seed=9))
    write_csv(a, tmp_path / "a.csv")
    write_csv(b, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    c = generate_semisynth(SynthSpec(n=300, seed=10))
    assert not np.array_equal(a.X, c.X)


def test_semisynth_groups_not_in_features(default_synth):
    assert default_synth.d == 20
    assert not any(n.startswith("group:") for n in default_synth.feature_names)


@pytest.mark.parametrize("kwargs", [dict(mix=(0.5, 0.6, 0.0, 0.0)), dict(orders=(0, 1, 2, 3)),
                                    dict(orders=(1, 2)), dict(d=12), dict(n=0)])
def test_synthspec_validation(kwargs):
    with pytest.raises(InvalidInput):
        SynthSpec(**kwargs)


# ---- adversarial fixture -------------------------------------------------


def test_adversarial_no_flip_equal_errors():
    data, f0 = generate_adversarial(n=20_000, flip_rate=0.0, seed=1)
    scores = f0.predict(data.X)
    hidden = data.groups["hidden"] == "in"
    assert abs(classification_error(scores, data.y, hidden)
               - classification_error(scores, data.y)) < 0.02


def test_adversarial_full_flip_counting():
    data, f0 = generate_adversarial(n=20_000, target_group_mass=0.1, flip_rate=1.0, seed=2)
    scores = f0.predict(data.X)
    hidden = data.groups["hidden"] == "in"
    assert abs(hidden.mean() - 0.1) < 0.01
    base = classification_error(scores, data.y, ~hidden)
    group = classification_error(scores, data.y, hidden)
    assert group > 0.9
    overall = classification_error(scores, data.y)
    assert overall == pytest.approx(hidden.mean() * group + (1 - hidden.mean()) * base, abs=1e-12)
    assert abs(overall - (0.1 * 1.0 + 0.9 * base)) < 0.02
    # the hidden group is decidable from x0 alone
    assert np.array_equal(hidden, data.X[:, 0] > hidden_group_cut(0.1))


def test_adversarial_validation():
    for kwargs in (dict(target_group_mass=0.0), dict(target_group_mass=1.0), dict(flip_rate=2)):
        with pytest.raises(InvalidInput):
            generate_adversarial(n=10, **kwargs)
