import pandas as pd
import pytest
import yaml
from hypothesis import given, strategies as st

from costwatch.records import (
    ClaimRecord,
    EnrollmentRecord,
    InputError,
    ViewpointKey,
    ViewpointSpec,
    claims_to_frame,
    dimension_registry,
    load_specs,
    read_claims,
    read_enrollment,
    validate_specs,
    write_frame,
)

code = st.text(st.characters(blacklist_characters="/=:", blacklist_categories=("Cs",)), min_size=1, max_size=8)


class TestKey:
    def test_properties(self):
        k = ViewpointKey("drug", (("therapeutic_class", "statins"), ("product_name", "x")))
        assert k.depth == 2 and k.leaf == ("product_name", "x")
        assert k.get("therapeutic_class") == "statins" and k.get("condition") is None
        assert k.parent() == ViewpointKey("drug", (("therapeutic_class", "statins"),))
        assert str(k) == "drug:therapeutic_class=statins/product_name=x"

    def test_root(self):
        root = ViewpointKey("drug")
        assert str(root) == "drug:(all)" and ViewpointKey.parse("drug:(all)") == root
        with pytest.raises(ValueError):
            root.parent()

    def test_malformed(self):
        with pytest.raises(InputError):
            ViewpointKey.parse("drug:product_name")

    @given(st.lists(st.tuples(code, code), max_size=4))
    def test_parse_round_trip(self, pairs):
        k = ViewpointKey("s", tuple(pairs))
        assert ViewpointKey.parse(str(k)) == k


class TestSpecs:
    def test_validation(self):
        with pytest.raises(InputError):
            ViewpointSpec("a", ())
        with pytest.raises(InputError):
            ViewpointSpec("a", ("condition", "condition"))
        with pytest.raises(InputError):
            ViewpointSpec.from_dict({"name": "a", "levels": ["condition"], "qualification": {"min_cost_share": 2}})
        with pytest.raises(InputError):
            ViewpointSpec.from_dict({"name": "a", "levels": ["x"], "qualification": {"min_member_months": "nan"}})
        with pytest.raises(InputError):
            validate_specs([ViewpointSpec("a", ("x",)), ViewpointSpec("a", ("y",))])

    def test_load_and_registry(self, tmp_path):
        doc = {
            "viewpoints": [
                {"name": "cond", "levels": ["condition", "claim_type", "product_name"]},
                {"name": "proc", "levels": ["procedure_group"], "qualification": {"min_member_months": 50}},
            ]
        }
        path = tmp_path / "v.yaml"
        path.write_text(yaml.safe_dump(doc))
        specs = load_specs(path)
        assert [s.name for s in specs] == ["cond", "proc"]
        assert specs[1].qualification.min_member_months == 50
        assert dimension_registry(specs) == {"product_name", "procedure_group"}
        assert ViewpointSpec.from_dict(specs[0].to_dict()) == specs[0]


class TestRecords:
    def test_claim_validation(self):
        with pytest.raises(InputError):
            ClaimRecord("a", 0, "dental", 1, 1.0)
        with pytest.raises(InputError):
            ClaimRecord("a", 0, "pharmacy", -1, 1.0)
        with pytest.raises(InputError):
            EnrollmentRecord("a", 0, 0.0)
        with pytest.raises(InputError):
            EnrollmentRecord("a", 0, 1.5)

    def test_frame_fills_absent_attributes(self):
        frame = claims_to_frame(
            [
                ClaimRecord("a", 0, "pharmacy", 1, 2.0, attributes={"product_name": "x"}),
                ClaimRecord("b", 0, "outpatient", 1, 3.0, condition="D", attributes={"procedure_group": "p"}),
            ]
        )
        assert list(frame["product_name"]) == ["x", ""]
        assert list(frame["condition"]) == ["", "D"]
        assert claims_to_frame([]).empty


class TestFiles:
    @pytest.mark.parametrize("suffix,delimiter", [(".csv", ","), (".tsv", "\t")])
    def test_round_trip(self, tmp_path, suffix, delimiter):
        frame = pd.DataFrame(
            {
                "enrollee_id": ["a", "b"],
                "period": [0, 1],
                "claim_type": ["pharmacy", "inpatient"],
                "condition": ["D, type 2", ""],
                "episode_id": ["", "e"],
                "quantity": [1.0, 2.5],
                "cost": [10.25, 3.0],
                "product_name": ["x", ""],
            }
        )
        path = tmp_path / f"claims{suffix}"
        write_frame(frame, path, delimiter)
        back = read_claims(path)
        pd.testing.assert_frame_equal(back, frame)

    def test_missing_columns(self, tmp_path):
        path = tmp_path / "c.csv"
        path.write_text("enrollee_id,period\na,0\n")
        with pytest.raises(InputError, match="missing"):
            read_claims(path)
        with pytest.raises(InputError, match="missing"):
            read_enrollment(path)

    def test_bad_numbers(self, tmp_path):
        path = tmp_path / "e.csv"
        path.write_text("enrollee_id,period,member_months\na,zero,1\n")
        with pytest.raises(InputError):
            read_enrollment(path)
