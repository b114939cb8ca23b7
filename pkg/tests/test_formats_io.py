"""Codec roundtrips and malformed-input rejection for every file format."""

import json

import numpy as np
import pytest

from evframe import (
    CameraRig,
    DetectionRecord,
    DomainError,
    Event,
    EventStream,
    FormatError,
    ImagePNM,
    ParseError,
    SchemaError,
    ValidationError,
    decode_detections,
    decode_events,
    decode_image,
    decode_tensor,
    encode_calibration,
    encode_detections,
    encode_events,
    encode_image,
    encode_tensor,
    parse_calibration,
    read_tensor_bundle,
    write_tensor_bundle,
)
from conftest import philox, rgb_image, small_rig


# -- event CSV ---------------------------------------------------------------------


def test_event_csv_roundtrip_preserves_order_and_values():
    events = [Event(3, 1, 10, 1), Event(0, 2, 10, -1), Event(5, 5, 42, 1)]
    stream = EventStream(sensor_width=8, sensor_height=6, events=events)
    back = decode_events(encode_events(stream), 8, 6)
    assert back.events == events
    assert (back.sensor_width, back.sensor_height) == (8, 6)


def test_event_csv_header_is_required():
    with pytest.raises(ParseError) as info:
        decode_events(b"1,2,3,4\n", 8, 8)
    assert info.value.line == 1


def test_event_csv_rejects_wrong_field_count():
    with pytest.raises(ParseError) as info:
        decode_events(b"t,x,y,p\n1,2,3\n", 8, 8)
    assert info.value.line == 2


def test_event_csv_rejects_non_integer_fields():
    with pytest.raises(ParseError):
        decode_events(b"t,x,y,p\n1,2,x,1\n", 8, 8)


def test_event_csv_rejects_bad_polarity():
    with pytest.raises(DomainError):
        decode_events(b"t,x,y,p\n1,2,3,0\n", 8, 8)


def test_event_csv_rejects_out_of_bounds_when_dims_given():
    with pytest.raises(DomainError):
        decode_events(b"t,x,y,p\n1,9,3,1\n", 8, 8)


def test_event_csv_rejects_negative_coordinates_always():
    with pytest.raises(DomainError):
        decode_events(b"t,x,y,p\n1,-1,3,1\n")


def test_event_csv_rejects_decreasing_timestamps():
    with pytest.raises(ValidationError):
        decode_events(b"t,x,y,p\n5,1,1,1\n4,1,1,1\n", 8, 8)


def test_event_csv_infers_sensor_dims_from_max_coordinate():
    stream = decode_events(b"t,x,y,p\n1,7,2,1\n2,3,5,-1\n")
    assert (stream.sensor_width, stream.sensor_height) == (8, 6)


def test_event_csv_cannot_infer_dims_from_empty_stream():
    with pytest.raises(DomainError):
        decode_events(b"t,x,y,p\n")


def test_event_csv_dims_must_come_in_pairs():
    with pytest.raises(DomainError):
        decode_events(b"t,x,y,p\n1,1,1,1\n", sensor_width=8)


def test_event_csv_empty_stream_roundtrip_with_dims():
    stream = decode_events(b"t,x,y,p\n", 4, 4)
    assert stream.events == []


# -- PNM images --------------------------------------------------------------------


def test_pnm_roundtrip_grayscale_and_color():
    rng = philox(1)
    for channels in (1, 3):
        pixels = rng.integers(0, 256, size=(5, 7, channels)).astype(np.uint8)
        img = ImagePNM(width=7, height=5, channels=channels, pixels=pixels)
        back = decode_image(encode_image(img))
        assert back.width == 7 and back.height == 5 and back.channels == channels
        assert np.array_equal(back.pixels, pixels)


def test_pnm_rejects_unknown_magic():
    with pytest.raises(FormatError):
        decode_image(b"P3\n1 1\n255\n0")


def test_pnm_rejects_wrong_maxval():
    with pytest.raises(FormatError):
        decode_image(b"P5\n1 1\n65535\n\x00\x00")


def test_pnm_rejects_truncated_payload():
    with pytest.raises(FormatError):
        decode_image(b"P5\n2 2\n255\nab")


def test_pnm_skips_header_comments():
    img = decode_image(b"P5\n# a comment\n2 1\n255\nAB")
    assert img.pixels[0, 0, 0] == ord("A")
    assert img.pixels[0, 1, 0] == ord("B")


def test_pnm_payload_may_start_with_whitespace_byte():
    # 0x20 is a legal first pixel; only one separator byte is consumed
    img = decode_image(b"P5\n1 1\n255\n ")
    assert img.pixels[0, 0, 0] == 0x20


def test_image_float_conversion_roundtrip():
    rng = philox(2)
    img = rgb_image(rng, 6, 4)
    back = ImagePNM.from_float01(img.to_float01())
    assert np.array_equal(back.pixels, img.pixels)


def test_image_rejects_mismatched_buffer():
    with pytest.raises(ValidationError):
        ImagePNM(width=4, height=4, channels=1, pixels=np.zeros((4, 5, 1), np.uint8))


# -- tensor container ----------------------------------------------------------------


def test_tensor_roundtrip_is_bit_exact_for_float32():
    rng = philox(3)
    for shape in ((4,), (3, 5), (2, 3, 4), (2, 2, 2, 2)):
        arr = rng.standard_normal(shape).astype(np.float32)
        back = decode_tensor(encode_tensor(arr))
        assert back.dtype == np.float32
        assert np.array_equal(back, arr)


def test_tensor_rejects_bad_magic():
    with pytest.raises(FormatError):
        decode_tensor(b"NOPE" + b"\x00" * 16)


def test_tensor_rejects_payload_size_mismatch():
    good = encode_tensor(np.zeros((2, 2), np.float32))
    with pytest.raises(FormatError):
        decode_tensor(good[:-4])


def test_tensor_rejects_rank_zero():
    with pytest.raises(DomainError):
        encode_tensor(np.float32(1.0))


def test_tensor_bundle_roundtrip(tmp_path):
    rng = philox(4)
    arrays = {"a.b": rng.standard_normal((2, 3)).astype(np.float32), "c": np.ones(4, np.float32)}
    write_tensor_bundle(tmp_path, arrays, extra={"note": 7})
    back, manifest = read_tensor_bundle(tmp_path)
    assert set(back) == {"a.b", "c"}
    assert np.array_equal(back["a.b"], arrays["a.b"])
    assert manifest["note"] == 7


def test_tensor_bundle_requires_member_table(tmp_path):
    (tmp_path / "manifest.json").write_text(json.dumps({"oops": 1}))
    with pytest.raises(SchemaError):
        read_tensor_bundle(tmp_path)


# -- calibration ----------------------------------------------------------------------


def test_calibration_roundtrip():
    rig = small_rig()
    back = parse_calibration(encode_calibration(rig))
    for name in ("k_rgb", "k_event", "r_rgb", "r_event", "r_event_rgb"):
        assert np.allclose(getattr(back, name), getattr(rig, name), atol=1e-12)


def test_calibration_rejects_missing_key():
    rig = small_rig()
    data = json.loads(encode_calibration(rig))
    del data["R_event"]
    with pytest.raises(SchemaError):
        parse_calibration(json.dumps(data).encode())


def test_rig_rejects_non_orthonormal_rotation():
    rig = small_rig()
    with pytest.raises(ValidationError):
        CameraRig(
            k_rgb=rig.k_rgb,
            k_event=rig.k_event,
            r_rgb=np.eye(3) * 2.0,
            r_event=rig.r_event,
            r_event_rgb=rig.r_event_rgb,
        )


def test_rig_rejects_non_triangular_intrinsics():
    rig = small_rig()
    bad_k = rig.k_rgb.copy()
    bad_k[1, 0] = 3.0
    with pytest.raises(ValidationError):
        CameraRig(
            k_rgb=bad_k,
            k_event=rig.k_event,
            r_rgb=rig.r_rgb,
            r_event=rig.r_event,
            r_event_rgb=rig.r_event_rgb,
        )


# -- detections ------------------------------------------------------------------------


def test_detections_roundtrip_with_and_without_score():
    records = [
        DetectionRecord(image_id=0, category_id=2, bbox=(1.0, 2.0, 3.0, 4.0), score=0.75),
        DetectionRecord(image_id=1, category_id=0, bbox=(0.5, 0.5, 2.0, 2.0), score=None),
    ]
    back = decode_detections(encode_detections(records))
    assert back == records


def test_score_is_omitted_from_encoding_when_absent():
    rec = DetectionRecord(image_id=0, category_id=0, bbox=(1, 1, 2, 2), score=None)
    line = encode_detections([rec]).decode().strip()
    assert "score" not in json.loads(line)


def test_detections_reject_non_numeric_bbox():
    line = b'{"image_id": 0, "category_id": 0, "bbox": [1, "x", 2, 2]}\n'
    with pytest.raises(ParseError):
        decode_detections(line)


def test_detections_reject_malformed_json():
    with pytest.raises(ParseError):
        decode_detections(b"not json\n")


def test_detection_record_rejects_non_positive_dims():
    with pytest.raises(DomainError):
        DetectionRecord(image_id=0, category_id=0, bbox=(0, 0, 0.0, 2.0), score=None)


def test_detection_record_rejects_out_of_range_score():
    with pytest.raises(DomainError):
        DetectionRecord(image_id=0, category_id=0, bbox=(0, 0, 1, 1), score=1.5)
