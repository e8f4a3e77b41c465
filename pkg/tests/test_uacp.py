import struct

import pytest
from asyncua import ua
from asyncua.ua import ua_binary
from asyncua.ua import uaprotocol_hand as ref
from hypothesis import given, settings
from hypothesis import strategies as st

from uacp_sentinel.uacp import (CHUNK_FLAGS, AckBody, DesyncEvent, ErrorBody, HelloBody,
                                InvalidToken, MalformedString, NeedMoreBytes, OpaqueBody,
                                OversizeMessage, ScannedMessage, SizeOutOfRange, StreamScanner,
                                ack, decode, decode_header, encode, error, hello, make_message,
                                opaque, scan_stream)

u32 = st.integers(0, 0xFFFFFFFF)
text = st.none() | st.text(max_size=40)

hello_bodies = st.builds(HelloBody, u32, u32, u32, u32, u32, text)
ack_bodies = st.builds(AckBody, u32, u32, u32, u32, u32)
error_bodies = st.builds(ErrorBody, u32, text)
messages = st.one_of(
    st.builds(lambda b, f: make_message("HEL", b, f), hello_bodies, st.sampled_from(CHUNK_FLAGS)),
    st.builds(lambda b, f: make_message("ACK", b, f), ack_bodies, st.sampled_from(CHUNK_FLAGS)),
    st.builds(lambda b, f: make_message("ERR", b, f), error_bodies, st.sampled_from(CHUNK_FLAGS)),
    st.builds(opaque, st.sampled_from(["OPN", "CLO", "MSG", "RHE"]), st.binary(max_size=64),
              st.sampled_from(CHUNK_FLAGS)),
)


def reference_encoding(msg):
    """Wire bytes for HEL/ACK/ERR produced by an independent OPC UA stack."""
    body = msg.body
    if isinstance(body, HelloBody):
        obj = ref.Hello(body.protocol_version, body.receive_buffer_size, body.send_buffer_size,
                        body.max_message_size, body.max_chunk_count, body.endpoint_url)
        kind = ref.MessageType.Hello
    elif isinstance(body, AckBody):
        obj = ref.Acknowledge(body.protocol_version, body.receive_buffer_size,
                              body.send_buffer_size, body.max_message_size, body.max_chunk_count)
        kind = ref.MessageType.Acknowledge
    else:
        obj = ref.ErrorMessage(ua.StatusCode(body.error_code), body.reason)
        kind = ref.MessageType.Error
    raw = ua_binary.struct_to_binary(obj)
    header = ref.Header(kind, msg.header.chunk_flag.encode())
    header.body_size = len(raw)
    return ua_binary.header_to_binary(header) + raw


HELLO_BYTES = bytes.fromhex(
    "48454C46 20000000 00000000 00000100 00000100 00000000 00000000 FFFFFFFF".replace(" ", ""))


def test_hello_bytes_decode_to_null_url_hello():
    msg, consumed = decode(HELLO_BYTES)
    assert consumed == 32
    assert msg.body == HelloBody(0, 65536, 65536, 0, 0, None)
    assert msg.header.msg_size == 32 and msg.header.chunk_flag == "F"


def test_hello_bytes_match_reference_stack():
    assert reference_encoding(hello(None)) == HELLO_BYTES
    assert encode(hello(None)) == HELLO_BYTES


def test_hello_with_url_round_trip():
    msg = hello("opc.tcp://h:4840")
    data = encode(msg)
    assert len(data) == 8 + 20 + 4 + 16
    assert decode(data) == (msg, len(data))


def test_empty_url_is_distinct_from_null():
    data = encode(hello(""))
    assert len(data) == 32
    assert data[28:32] == b"\x00\x00\x00\x00"
    assert decode(data)[0].body.endpoint_url == ""


def test_null_error_is_sixteen_bytes():
    data = encode(error(0, None))
    assert len(data) == 16
    assert decode(data) == (error(0, None), 16)


@settings(max_examples=300, deadline=None)
@given(st.one_of(
    st.builds(lambda b: make_message("HEL", b), hello_bodies),
    st.builds(lambda b: make_message("ACK", b), ack_bodies),
    st.builds(lambda b: make_message("ERR", b), error_bodies)))
def test_encoding_agrees_with_reference_stack(msg):
    ours = encode(msg)
    assert ours == reference_encoding(msg)
    assert len(ours) == msg.header.msg_size


@settings(max_examples=1000, deadline=None)
@given(messages)
def test_decode_inverts_encode(msg):
    data = encode(msg)
    back, consumed = decode(data)
    assert back == msg
    assert consumed == back.header.msg_size == len(data)


def test_truncated_input_needs_more_bytes():
    with pytest.raises(NeedMoreBytes):
        decode(b"HELF")
    with pytest.raises(NeedMoreBytes) as info:
        decode(HELLO_BYTES[:20])
    assert info.value.needed == 32


def test_invalid_token_and_size_limits():
    with pytest.raises(InvalidToken):
        decode(b"XYZF\x10\x00\x00\x00" + bytes(8))
    with pytest.raises(InvalidToken):
        decode(b"HELX\x20\x00\x00\x00" + bytes(24))
    with pytest.raises(SizeOutOfRange):
        decode(b"MSGF\x04\x00\x00\x00")
    with pytest.raises(SizeOutOfRange):
        decode_header(b"MSGF" + struct.pack("<I", (1 << 24) + 1))
    with pytest.raises(OversizeMessage):
        encode(opaque("MSG", bytes(100)), max_size=64)


def test_string_length_beyond_body_is_malformed():
    bad = bytearray(HELLO_BYTES)
    bad[28:32] = struct.pack("<i", 10)
    with pytest.raises(MalformedString):
        decode(bytes(bad))


def test_undersized_buffers_decode_but_are_flagged():
    msg = hello("opc.tcp://x:4840", receive_buffer_size=1024, send_buffer_size=512)
    back, _ = decode(encode(msg))
    assert back == msg and not back.body.is_valid
    assert hello("opc.tcp://x:4840").body.is_valid
    assert not hello("x" * 4097).body.is_valid
    assert not ack(receive_buffer_size=100).body.is_valid


def test_body_type_must_match_token():
    with pytest.raises(TypeError):
        make_message("HEL", AckBody())
    with pytest.raises(InvalidToken):
        make_message("FOO", OpaqueBody())


# stream scanning

def messages_of(items):
    return [(i.message, i.offset) for i in items if isinstance(i, ScannedMessage)]


def test_split_hello_is_reassembled():
    data = encode(hello(None))
    items = scan_stream([data[:10], data[10:]])
    assert messages_of(items) == [(hello(None), 0)]


def test_back_to_back_hellos():
    data = encode(hello(None)) * 2
    assert [off for _, off in messages_of(scan_stream([data]))] == [0, 32]


def test_empty_stream():
    assert scan_stream([]) == []
    assert scan_stream([b"", b""]) == []


def test_garbage_is_reported_and_skipped():
    data = b"\x00\x01garbage" + encode(hello(None)) + b"zz" + encode(ack())
    items = scan_stream([data])
    assert messages_of(items) == [(hello(None), 9), (ack(), 43)]
    desyncs = [i for i in items if isinstance(i, DesyncEvent)]
    assert [(d.offset, d.length) for d in desyncs] == [(0, 9), (41, 2)]


def test_trailing_partial_message_is_a_desync_at_close():
    data = encode(hello(None)) + encode(ack())[:10]
    items = scan_stream([data])
    assert messages_of(items) == [(hello(None), 0)]
    assert items[-1] == DesyncEvent(32, 10, "truncated")


def test_malformed_body_skips_one_message():
    bad = bytearray(HELLO_BYTES)
    bad[28:32] = struct.pack("<i", 99)
    items = scan_stream([bytes(bad) + encode(ack())])
    assert messages_of(items) == [(ack(), 32)]
    assert items[0] == DesyncEvent(0, 32, "MalformedString")


def test_tags_follow_first_byte():
    data = encode(hello(None)) + encode(ack())
    sc = StreamScanner()
    out = sc.feed(data[:40], tag="a") + sc.feed(data[40:], tag="b") + sc.close()
    assert [(i.offset, i.tag) for i in out] == [(0, "a"), (32, "a")]
    sc = StreamScanner()
    out = sc.feed(data[:32], tag="a") + sc.feed(data[32:], tag="b") + sc.close()
    assert [(i.offset, i.tag) for i in out] == [(0, "a"), (32, "b")]


junk = st.binary(max_size=12) | st.sampled_from([b"HE", b"HELF", b"MSGC\xff\xff", b"ACK", b"\x00"])


@st.composite
def stream_and_splits(draw):
    parts = draw(st.lists(st.one_of(messages.map(encode), junk), max_size=12))
    data = b"".join(parts)
    cuts = sorted(draw(st.lists(st.integers(0, len(data)), max_size=10)))
    return data, cuts


@settings(max_examples=500, deadline=None)
@given(stream_and_splits())
def test_scan_is_invariant_under_rechunking(case):
    data, cuts = case
    bounds = [0, *cuts, len(data)]
    chunks = [data[a:b] for a, b in zip(bounds, bounds[1:])]
    whole = scan_stream([data])
    assert scan_stream(chunks) == whole
    assert scan_stream([bytes([b]) for b in data]) == whole
    # every byte is accounted for exactly once
    spans = sorted((i.offset, i.message.header.msg_size if isinstance(i, ScannedMessage) else i.length)
                   for i in whole)
    pos = 0
    for off, n in spans:
        assert off == pos and n > 0
        pos += n
    assert pos == len(data)


@settings(max_examples=200, deadline=None)
@given(st.lists(messages, max_size=8))
def test_clean_stream_yields_every_message(msgs):
    data = b"".join(encode(m) for m in msgs)
    items = scan_stream([data])
    assert [i.message for i in items] == msgs
