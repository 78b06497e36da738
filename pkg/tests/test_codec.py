import struct

import numpy as np
import pytest

from feddbp.client import ClientUpload
from feddbp.codec import MAGIC, Direction, Download, RoundMessage, decode, encode
from feddbp.errors import CodecError, ProtocolError
from feddbp.prototypes import ImportanceScores, PrototypeKind, PrototypeSet
from feddbp.verify import codec_suite


def sample_upload():
    rng = np.random.default_rng(0)
    P = PrototypeSet(rng.normal(size=(10, 3)), np.arange(10) % 3 != 1)
    counts = np.where(P.present, np.arange(10) + 1, 0)
    S = ImportanceScores(rng.uniform(size=(10, 3)), counts)
    return RoundMessage(Direction.UPLOAD, 7, ClientUpload(4, P, S, 123))


def test_round_trip_upload_and_download():
    msg = sample_upload()
    assert decode(encode(msg)) == msg
    P = msg.payload.prototypes.with_kind(PrototypeKind.PERSONALIZED)
    down = RoundMessage(Direction.DOWNLOAD, 2, Download(9, P))
    assert decode(encode(down)) == down


def test_header_layout():
    blob = encode(sample_upload())
    magic, version, direction, rnd = struct.unpack_from("<4sHBI", blob)
    assert (magic, version, direction, rnd) == (MAGIC, 1, 0, 7)


def test_special_float_values_survive():
    P = PrototypeSet(np.array([[-0.0, 5e-324, 1.7976931348623157e308]]), np.array([True]))
    msg = RoundMessage(Direction.DOWNLOAD, 0, Download(0, P))
    assert decode(encode(msg)).payload.prototypes.vectors.tobytes() == P.vectors.tobytes()


def test_bad_magic_reports_offset_zero():
    blob = bytearray(encode(sample_upload()))
    blob[0:4] = b"XXXX"
    with pytest.raises(CodecError) as info:
        decode(bytes(blob))
    assert info.value.offset == 0


def test_version_mismatch():
    blob = bytearray(encode(sample_upload()))
    blob[4:6] = struct.pack("<H", 99)
    with pytest.raises(CodecError) as info:
        decode(bytes(blob))
    assert info.value.offset == 4


def test_truncation_names_section():
    blob = encode(sample_upload())
    with pytest.raises(CodecError) as info:
        decode(blob[:60])
    assert info.value.section == "prototypes"
    with pytest.raises(CodecError) as info:
        decode(blob[:-3])
    assert info.value.section is not None


def test_every_truncation_is_rejected():
    blob = encode(sample_upload())
    for cut in range(len(blob)):
        with pytest.raises(CodecError):
            decode(blob[:cut])


def test_trailing_bytes_rejected():
    with pytest.raises(CodecError):
        decode(encode(sample_upload()) + b"\x00")


def test_codec_error_is_protocol_error():
    assert issubclass(CodecError, ProtocolError)


def test_payload_type_checked():
    with pytest.raises(TypeError):
        RoundMessage(Direction.DOWNLOAD, 0, sample_upload().payload)


def test_prototype_text_dump_round_trip():
    P = sample_upload().payload.prototypes
    text = P.dump_text()
    assert len(text.splitlines()) == len(P.coverage)
    assert PrototypeSet.parse_text(text, 10, 3) == P


def test_random_message_suite():
    passed, detail = codec_suite(2000)
    assert passed, detail
