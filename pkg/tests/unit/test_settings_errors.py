"""
Test tool settings loading and the error payloads reported to users.
"""

import json
import sys
from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError

# Add src to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent.parent / "src"))

from errors import FabError, HighResidual, MalformedRecord, NonFiniteLoss, SpecInvalid, StageError
from settings import DEFAULT_SETTINGS, ToolSettings, load_settings, read_json


class TestSettings:
    """Test ToolSettings and load_settings."""

    @pytest.mark.unit
    def test_defaults(self):
        assert DEFAULT_SETTINGS.pitch == 0.2
        assert DEFAULT_SETTINGS.padding == 3
        assert DEFAULT_SETTINGS.max_voxels == 2**28

    @pytest.mark.unit
    def test_file_then_overrides(self, tmp_path):
        path = tmp_path / "settings.json"
        path.write_text(json.dumps({"pitch": 0.5, "seed": 4}))
        settings = load_settings(path, pitch=1.0, seed=None)
        assert settings.pitch == 1.0
        # None leaves the file value in place
        assert settings.seed == 4

    @pytest.mark.unit
    def test_unknown_key(self, tmp_path):
        path = tmp_path / "settings.json"
        path.write_text(json.dumps({"pitch": 0.5, "resolution": 3}))
        with pytest.raises(SpecInvalid) as exc:
            load_settings(path)
        assert exc.value.field == "resolution"

    @pytest.mark.unit
    def test_malformed_json_names_line(self, tmp_path):
        path = tmp_path / "settings.json"
        path.write_text('{\n  "pitch": 0.5,\n  "seed": \n}\n')
        with pytest.raises(SpecInvalid) as exc:
            load_settings(path)
        assert exc.value.details["line"] == 4
        assert "settings.json:4" in exc.value.message

    @pytest.mark.unit
    def test_top_level_must_be_object(self, tmp_path):
        path = tmp_path / "settings.json"
        path.write_text("[0.5]")
        with pytest.raises(SpecInvalid):
            load_settings(path)

    @pytest.mark.unit
    def test_read_json_rejects_binary(self, tmp_path):
        path = tmp_path / "blob.json"
        path.write_bytes(b'{"a": "\xff"}')
        with pytest.raises(SpecInvalid):
            read_json(path)

    @pytest.mark.unit
    def test_non_positive_pitch(self):
        with pytest.raises(SpecInvalid) as exc:
            load_settings(pitch=0.0)
        assert exc.value.field == "pitch"

    @pytest.mark.unit
    def test_frozen(self):
        with pytest.raises(ValidationError):
            ToolSettings().pitch = 1.0


class TestErrors:
    """Test FabError payloads."""

    @pytest.mark.unit
    def test_to_dict_without_details(self):
        assert FabError("boom").to_dict() == {"code": "FabError", "message": "boom"}

    @pytest.mark.unit
    def test_details_are_json_ready(self):
        e = HighResidual("too far", residual=np.float64(0.75), point=np.array([1, 2, 3]))
        payload = e.to_dict()
        assert payload["code"] == "HighResidual"
        assert payload["details"] == {"residual": 0.75, "point": [1.0, 2.0, 3.0]}
        json.dumps(payload)

    @pytest.mark.unit
    def test_message_defaults_to_code(self):
        assert str(MalformedRecord()) == "MalformedRecord"

    @pytest.mark.unit
    def test_structured_fields(self):
        assert MalformedRecord("bad", offset=84).offset == 84
        assert NonFiniteLoss("nan", epoch=3).details["epoch"] == 3

    @pytest.mark.unit
    def test_stage_error_format(self):
        inner = SpecInvalid("circuit.tilt_deg: too steep", field="circuit.tilt_deg")
        e = StageError("blank", inner)
        assert e.message == "blank: SpecInvalid: circuit.tilt_deg: too steep"
        assert e.code == "SpecInvalid"
        assert e.error is inner
        assert e.to_dict()["details"] == {"stage": "blank"}
