import json

import numpy as np
import pytest

from app.errors import ParseError, SchemaVersionError, UnknownElement
from app.file_manager import DatasetFileManager, DatasetRecord, check_version

from .conftest import make_ammonia, make_cscl, make_triclinic, make_water

WATER_LINE = {"id": "w", "domain": "molecule", "atomic_numbers": [8, 1, 1],
              "cart_coords": [[0, 0, 0], [0.96, 0, 0], [-0.24, 0.93, 0]]}


def write_lines(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return str(path)


class TestDataset:

    def test_round_trip_is_byte_stable(self, tmp_path, labeled_systems):
        rng = np.random.default_rng(0)
        systems = labeled_systems + [make_water(f"w{i}").replace(cart_coords=rng.normal(size=(3, 3)))
                                     for i in range(84)]
        path = str(tmp_path / "data.jsonl")
        DatasetFileManager.write_dataset(systems, path)
        loaded = DatasetFileManager.read_dataset(path)
        assert len(loaded) == 100
        with open(path, encoding="utf-8") as file:
            assert DatasetFileManager.dataset_text(loaded) == file.read()

    def test_missing_properties_survive_as_null(self, tmp_path, labeled_systems):
        path = str(tmp_path / "labels.jsonl")
        DatasetFileManager.write_dataset(labeled_systems[:1], path)
        line = json.loads(open(path, encoding="utf-8").readline())
        assert line["properties"][0] is None
        loaded = DatasetFileManager.read_dataset(path)[0]
        assert np.isnan(loaded.labels.properties[0])
        np.testing.assert_array_equal(loaded.labels.forces, labeled_systems[0].labels.forces)

    def test_material_fields(self, tmp_path):
        path = str(tmp_path / "crystal.jsonl")
        DatasetFileManager.write_dataset([make_triclinic()], path)
        crystal = DatasetFileManager.read_dataset(path)[0]
        assert crystal.is_periodic and crystal.cart_coords is None
        np.testing.assert_array_equal(crystal.lattice_angles, [70.0, 80.0, 95.0])

    def test_bad_line_is_named(self, tmp_path):
        bad = {**WATER_LINE, "id": "bad", "lattice_lengths": [1, 1, 1]}
        path = write_lines(tmp_path / "bad.jsonl", [WATER_LINE, bad])
        with pytest.raises(ParseError) as info:
            DatasetFileManager.read_dataset(path)
        assert info.value.line == 2
        assert ":2:" in str(info.value)

    def test_invalid_json_line(self, tmp_path):
        path = tmp_path / "broken.jsonl"
        path.write_text(json.dumps(WATER_LINE) + "\n{not json\n", encoding="utf-8")
        with pytest.raises(ParseError) as info:
            DatasetFileManager.read_dataset(str(path))
        assert info.value.line == 2

    def test_unknown_field(self, tmp_path):
        path = write_lines(tmp_path / "extra.jsonl", [{**WATER_LINE, "charge": 0}])
        with pytest.raises(ParseError):
            DatasetFileManager.read_dataset(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("", encoding="utf-8")
        assert DatasetFileManager.read_dataset(str(path)) == []

    def test_unsupported_major_version(self, tmp_path):
        path = write_lines(tmp_path / "future.jsonl", [{**WATER_LINE, "version": "2.0"}])
        with pytest.raises(SchemaVersionError):
            DatasetFileManager.read_dataset(path)

    def test_minor_version_is_accepted(self, tmp_path):
        path = write_lines(tmp_path / "minor.jsonl", [{**WATER_LINE, "version": "1.7"}])
        assert len(DatasetFileManager.read_dataset(path)) == 1

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            DatasetFileManager.read_dataset(str(tmp_path / "nope.jsonl"))

    def test_record_from_system(self):
        record = DatasetRecord.from_system(make_cscl())
        assert record.domain == "material"
        assert record.cart_coords is None
        assert record.frac_coords == [[0.0, 0.0, 0.0], [0.5, 0.5, 0.5]]

    def test_atom_count_histogram(self):
        histogram = DatasetFileManager.atom_count_histogram(
            [make_water(), make_water("w2"), make_ammonia(), make_cscl()])
        assert histogram == {"molecule": {3: 2, 4: 1}, "material": {2: 1}}

    @pytest.mark.parametrize("version", ["x.1", None, "3.0"])
    def test_check_version(self, version):
        with pytest.raises(SchemaVersionError):
            check_version(version, "1.0")


class TestJson:

    def test_write_then_read(self, tmp_path):
        path = str(tmp_path / "nested" / "report.json")
        DatasetFileManager.write_json({"b": 1, "a": [1.5, None]}, path)
        assert DatasetFileManager.read_json(path) == {"a": [1.5, None], "b": 1}

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text('{\n  "d_model": ,\n}', encoding="utf-8")
        with pytest.raises(ParseError) as info:
            DatasetFileManager.read_json(str(path))
        assert info.value.line == 2


class TestXyz:

    def test_water(self, tmp_path):
        path = tmp_path / "water.xyz"
        path.write_text("3\nwater molecule\nO 0.0 0.0 0.0\nH 0.9572 0.0 0.0\nh -0.2400 0.9266 0.0\n",
                        encoding="utf-8")
        (water,) = DatasetFileManager.import_xyz(str(path))
        assert water.id == "water-0"
        assert water.atomic_numbers.tolist() == [8, 1, 1]
        assert water.cart_coords[1, 0] == pytest.approx(0.9572)
        assert not water.is_periodic

    def test_two_frames(self, tmp_path):
        path = tmp_path / "traj.xyz"
        path.write_text("2\nframe a\nH 0 0 0\nH 0.74 0 0\n2\nframe b\nH 0 0 0\nH 0.75 0 0\n", encoding="utf-8")
        frames = DatasetFileManager.import_xyz(str(path))
        assert [f.id for f in frames] == ["traj-0", "traj-1"]
        assert frames[1].cart_coords[1, 0] == pytest.approx(0.75)

    def test_too_few_rows(self, tmp_path):
        path = tmp_path / "short.xyz"
        path.write_text("3\ncomment\nO 0 0 0\nH 1 0 0\n", encoding="utf-8")
        with pytest.raises(ParseError) as info:
            DatasetFileManager.import_xyz(str(path))
        assert info.value.line == 1

    def test_too_many_rows(self, tmp_path):
        path = tmp_path / "long.xyz"
        path.write_text("2\ncomment\nO 0 0 0\nH 1 0 0\nH 0 1 0\n", encoding="utf-8")
        with pytest.raises(ParseError) as info:
            DatasetFileManager.import_xyz(str(path))
        assert info.value.line == 5

    def test_unknown_element_names_the_line(self, tmp_path):
        path = tmp_path / "odd.xyz"
        path.write_text("3\ncomment\nO 0 0 0\nXx 1 0 0\nH 0 1 0\n", encoding="utf-8")
        with pytest.raises(UnknownElement) as info:
            DatasetFileManager.import_xyz(str(path))
        assert info.value.line == 4
        assert str(path) in str(info.value)

    def test_bad_count_header(self, tmp_path):
        path = tmp_path / "header.xyz"
        path.write_text("three\ncomment\nO 0 0 0\n", encoding="utf-8")
        with pytest.raises(ParseError):
            DatasetFileManager.import_xyz(str(path))
