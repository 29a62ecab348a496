import random

import pytest

from keymotion import protocol as P
from keymotion.errors import ProtocolError


def crc16_reference(data: bytes) -> int:
    # independent bitwise CRC-16/CCITT-FALSE for cross-checking the codec
    crc = 0xFFFF
    for byte in data:
        for bit in range(7, -1, -1):
            msb = (crc >> 15) & 1
            inbit = (byte >> bit) & 1
            crc = (crc << 1) & 0xFFFF
            if msb ^ inbit:
                crc ^= 0x1021
    return crc


def random_message(rng: random.Random) -> P.Message:
    choice = rng.randrange(12)
    t32 = lambda: rng.randrange(2**32)
    sid = lambda: rng.randrange(2**16)
    if choice == 0:
        return P.KeyEventRaw(sid(), bool(rng.getrandbits(1)), t32(), t32())
    if choice == 1:
        n = rng.randrange(0, P.MAX_BATCH_SAMPLES + 1)
        return P.PositionBatch(
            tuple(sid() for _ in range(n)),
            tuple(t32() for _ in range(n)),
            tuple(rng.randrange(4096) for _ in range(n)))
    if choice == 2:
        return P.StatusRequest()
    if choice == 3:
        return P.StatusResponse(rng.randrange(1, 32), f"pcb-{rng.randrange(99):02d}",
                                rng.randrange(3), t32(), rng.randrange(2**16),
                                rng.randrange(1, 26))
    if choice == 4:
        n = rng.randrange(0, 12)
        return P.ModeSet(rng.randrange(3), rng.randrange(2**16),
                         tuple(sid() for _ in range(n)))
    if choice == 5:
        entries = tuple(
            P.CalibEntryWire(
                sid(), rng.randrange(4096), rng.randrange(4096),
                tuple((rng.randrange(4096), rng.randrange(2**16))
                      for _ in range(rng.randrange(4))))
            for _ in range(rng.randrange(1, 3)))
        return P.CalibPush(rng.randrange(8), 8, entries)
    if choice == 6:
        n = rng.randrange(0, 20)
        return P.PollRequest(tuple(sid() for _ in range(n)))
    if choice == 7:
        n = rng.randrange(0, P.MAX_BATCH_SAMPLES + 1)
        return P.PollResponse(
            tuple(sid() for _ in range(n)),
            tuple(t32() for _ in range(n)),
            tuple(rng.randrange(4096) for _ in range(n)))
    if choice == 8:
        return P.Enumerate()
    if choice == 9:
        return P.EnumerateReply(rng.randrange(1, 32), "board", rng.randrange(26))
    if choice == 10:
        return P.Ack()
    return P.Nack(rng.randrange(256), "why not")


def test_crc_kat_vector():
    assert P.crc16(b"123456789") == 0x29B1
    assert P.crc16_ccitt_false(b"123456789") == 0x29B1
    assert crc16_reference(b"123456789") == 0x29B1


def test_crc_table_matches_bitwise_reference():
    rng = random.Random(5)
    for _ in range(200):
        data = bytes(rng.randrange(256) for _ in range(rng.randrange(0, 40)))
        assert P.crc16(data) == crc16_reference(data)
        assert P.crc16(data) == P.crc16_ccitt_false(data)


def test_ack_frame_has_empty_payload_and_valid_crc():
    frame = P.encode_frame(P.Ack(), address=5, seq=7)
    assert frame[0] == P.SOF
    assert frame[1] == 5           # address
    assert frame[2] == P.T_ACK     # msg type
    assert frame[3] == 7           # seq
    assert frame[4] == 0           # len
    body = frame[1:-2]
    assert P.crc16(body) == int.from_bytes(frame[-2:], "big")


def test_escaping_no_unescaped_sof_after_start():
    # a payload crafted to contain 0x7E and 0x7D
    msg = P.PollRequest((0x7E7D, 0x007E))
    frame = P.encode_frame(msg, address=1, seq=0x7E)
    assert frame[0] == P.SOF
    assert P.SOF not in frame[1:]
    assert bytes([P.ESC, P.SOF ^ P.ESC_XOR]) in frame


def test_round_trip_equality_10k():
    rng = random.Random(101)
    decoder = P.FrameDecoder()
    for i in range(10_000):
        msg = random_message(rng)
        address = rng.randrange(0, 33)
        seq = i & 0xFF
        frames = decoder.feed(P.encode_frame(msg, address, seq))
        assert len(frames) == 1
        got = frames[0]
        assert got.message == msg
        assert got.address == address
        assert got.seq == seq
    assert decoder.diagnostics.frames_ok == 10_000
    assert decoder.diagnostics.crc_errors == 0


def test_resync_after_garbage_prefix():
    rng = random.Random(77)
    garbage = bytes(rng.choice([b for b in range(256) if b != P.SOF])
                    for _ in range(100))
    frame = P.encode_frame(P.StatusRequest(), 3, 9)
    decoder = P.FrameDecoder()
    frames = decoder.feed(garbage + frame)
    assert len(frames) == 1
    assert isinstance(frames[0].message, P.StatusRequest)
    assert decoder.diagnostics.bytes_dropped >= 100


def test_single_byte_flip_drops_frame_only():
    rng = random.Random(55)
    msg = P.StatusResponse(4, "pcb-04", 0, 12345, 0, 25)
    good = P.encode_frame(msg, 4, 1)
    follow = P.encode_frame(P.Ack(), 4, 2)
    flipped = bytearray(good)
    # flip a byte inside the body (avoid the SOF itself)
    idx = rng.randrange(1, len(flipped))
    flipped[idx] ^= 1 << rng.randrange(8)
    decoder = P.FrameDecoder()
    frames = decoder.feed(bytes(flipped) + follow)
    # the corrupted frame never surfaces with wrong content
    for f in frames:
        assert f.message == P.Ack()
    diags = decoder.diagnostics
    assert diags.crc_errors + diags.malformed + diags.resyncs >= 1


def test_corruption_never_misaccepts_10k():
    rng = random.Random(202)
    mis = 0
    dropped = 0
    for i in range(10_000):
        msg = random_message(rng)
        frame = bytearray(P.encode_frame(msg, rng.randrange(33), i & 0xFF))
        idx = rng.randrange(len(frame))
        bit = 1 << rng.randrange(8)
        frame[idx] ^= bit
        decoder = P.FrameDecoder()
        frames = decoder.feed(bytes(frame))
        if not frames:
            dropped += 1
            continue
        # a surfaced frame must be byte-identical in content to what was sent
        got = frames[0]
        if got.message != msg:
            mis += 1
    assert mis == 0
    assert dropped > 9_000  # single-bit damage almost always kills the frame


def test_decoder_total_on_arbitrary_garbage():
    rng = random.Random(31)
    decoder = P.FrameDecoder()
    for _ in range(200):
        blob = bytes(rng.randrange(256) for _ in range(rng.randrange(0, 400)))
        decoder.feed(blob)
        assert len(decoder._buf) <= P.MAX_PAYLOAD + 6


def test_oversize_payload_rejected():
    msg = P.PollRequest(tuple(range(40)))  # 81-byte payload
    with pytest.raises(ProtocolError):
        P.encode_frame(msg, 1, 0)


def test_calibration_chunking_fits_frames():
    entries = [
        P.CalibEntryWire(i, 3500, 800, ((2000, 4500), (1500, 6750), (3000, 2250)))
        for i in range(25)
    ]
    chunks = P.chunk_calibration(entries)
    assert sum(len(c.entries) for c in chunks) == 25
    assert all(c.chunk_total == len(chunks) for c in chunks)
    assert [c.chunk_index for c in chunks] == list(range(len(chunks)))
    for chunk in chunks:
        P.encode_frame(chunk, 1, 0)  # must fit without raising


def test_unknown_type_counts_malformed():
    body = bytes([1, 0x7F, 0, 0])
    frame = bytes([P.SOF]) + body + P.crc16(body).to_bytes(2, "big")
    decoder = P.FrameDecoder()
    assert decoder.feed(frame) == []
    assert decoder.diagnostics.malformed == 1


def test_sequence_counter_wraps():
    seq = P.SequenceCounter(254)
    assert [seq.take() for _ in range(4)] == [254, 255, 0, 1]


def test_documented_wire_examples():
    # the worked examples in docs/wire.md, bit-exact
    assert P.encode_frame(P.Ack(), address=5, seq=7) == bytes.fromhex(
        "7e050b070051e3")
    assert P.encode_frame(P.PollRequest((0x007E,)), address=1, seq=0) == \
        bytes.fromhex("7e0107000301007d5eb25b")
