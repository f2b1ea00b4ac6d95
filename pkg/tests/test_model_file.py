from datetime import datetime

import numpy as np
import pytest
import yaml

from src import __version__
from src.core.numerics import TANH
from src.core.uap import OutputHead, ShallowSum, ShallowTerm
from src.storage.csv_output import (
    CsvFormatError,
    eval_frame,
    loss_history_frame,
    read_points,
    write_csv,
)
from src.storage.model_file import (
    ModelFile,
    ModelFileError,
    dump_model,
    load_model,
    load_shallow_sum,
    save_model,
    save_shallow_sum,
)
from tests.builders import random_model


class TestModelFile:
    @pytest.mark.parametrize("structure", ["restricted", "block_explicit", "general"])
    def test_save_load_save_is_byte_identical(self, structure, rng, tmp_path):
        model = random_model(structure, 2, 3, 0.1, TANH, rng)
        first = tmp_path / "first.yml"
        second = tmp_path / "second.yml"
        save_model(first, ModelFile(model, provenance={"seed": 7}))
        loaded = load_model(first)
        save_model(second, loaded)
        assert first.read_bytes() == second.read_bytes()
        np.testing.assert_array_equal(loaded.model.free_vector(), model.free_vector())
        assert loaded.model.structure.value == structure
        assert loaded.provenance["seed"] == 7

    def test_provenance_is_stamped_once(self, restricted_model, tmp_path):
        first = tmp_path / "first.yml"
        save_model(first, ModelFile(restricted_model, provenance={"command": "init"}))
        stamped = load_model(first).provenance
        assert stamped["version"] == __version__
        assert datetime.fromisoformat(stamped["created_at"]).tzinfo is not None
        assert stamped["command"] == "init"

        second = tmp_path / "second.yml"
        save_model(second, load_model(first))
        assert load_model(second).provenance["created_at"] == stamped["created_at"]

    def test_head_round_trip(self, restricted_model, tmp_path):
        head = OutputHead([[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]], [1.0, -1.0, 0.5])
        path = tmp_path / "model.yml"
        save_model(path, ModelFile(restricted_model, head))
        loaded = load_model(path)
        np.testing.assert_array_equal(loaded.head.W_o, head.W_o)
        np.testing.assert_array_equal(loaded.head.b_o, head.b_o)

    def test_document_is_plain_yaml(self, restricted_model):
        doc = yaml.safe_load(dump_model(ModelFile(restricted_model)))
        assert doc["kind"] == "hdnn"
        assert doc["n"] == 2 and doc["depth"] == 4
        assert isinstance(doc["h"], float)
        assert list(doc["layers"][0]) == ["X", "W_tilde", "b_tilde", "eta_tilde"]

    @pytest.mark.parametrize("mutate", [
        lambda d: d.update(format_version=99),
        lambda d: d.update(kind="shallow_sum"),
        lambda d: d.update(structure="leapfrog"),
        lambda d: d.update(activation="swish"),
        lambda d: d.update(depth=5),
        lambda d: d["layers"][0].pop("X"),
        lambda d: d["layers"][0].update(b_tilde=[1.0, "x"]),
    ])
    def test_invalid_documents(self, mutate, restricted_model, tmp_path):
        doc = yaml.safe_load(dump_model(ModelFile(restricted_model)))
        mutate(doc)
        path = tmp_path / "bad.yml"
        path.write_text(yaml.safe_dump(doc), encoding="utf-8")
        with pytest.raises(ModelFileError):
            load_model(path)

    def test_unreadable(self, tmp_path):
        with pytest.raises(ModelFileError):
            load_model(tmp_path / "missing.yml")
        path = tmp_path / "list.yml"
        path.write_text("- 1\n- 2\n", encoding="utf-8")
        with pytest.raises(ModelFileError):
            load_model(path)


class TestShallowSumFile:
    def test_round_trip(self, tmp_path):
        g = ShallowSum((ShallowTerm(np.eye(2), [[1.0, 1.0], [1.0, 1.0]], [0.1, 0.2]),
                        ShallowTerm(0.5 * np.eye(2), np.eye(2), [0.0, 0.0])), TANH)
        path = tmp_path / "sum.yml"
        save_shallow_sum(path, g, {"note": "test"})
        loaded = load_shallow_sum(path)
        assert len(loaded) == 2
        for a, b in zip(loaded.terms, g.terms):
            np.testing.assert_array_equal(a.A, b.A)
            np.testing.assert_array_equal(a.W, b.W)
            np.testing.assert_array_equal(a.b, b.b)

    def test_wrong_kind(self, restricted_model, tmp_path):
        path = tmp_path / "model.yml"
        save_model(path, ModelFile(restricted_model))
        with pytest.raises(ModelFileError):
            load_shallow_sum(path)


class TestCsv:
    def test_points_round_trip(self, rng, tmp_path):
        xi = rng.uniform(-1, 1, (5, 2))
        path = tmp_path / "eval.csv"
        write_csv(path, eval_frame(xi, 2 * xi))
        np.testing.assert_array_equal(read_points(path, 2), xi)

    def test_loss_history_columns(self, tmp_path):
        path = tmp_path / "loss.csv"
        write_csv(path, loss_history_frame(np.array([0.5, 0.25])))
        assert path.read_text().splitlines()[0] == "iter,loss"

    def test_bad_points(self, tmp_path):
        path = tmp_path / "points.csv"
        path.write_text("x0\n0.5\n", encoding="utf-8")
        with pytest.raises(CsvFormatError):
            read_points(path, 2)
        path.write_text("x0,x1\n0.5,abc\n", encoding="utf-8")
        with pytest.raises(CsvFormatError):
            read_points(path, 2)
        with pytest.raises(CsvFormatError):
            read_points(tmp_path / "missing.csv", 1)
