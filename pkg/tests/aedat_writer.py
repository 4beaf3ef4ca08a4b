"""Independent AEDAT 3.1 writer used as the oracle for the parser tests."""
import struct

HEADER = b"#!AER-DAT3.1\r\n#Format: RAW\r\n#Source 1: DVS128\r\n#!END-HEADER\r\n"


def polarity_word(x, y, p, valid=True):
    return (x << 17) | (y << 2) | (p << 1) | int(valid)


def packet(etype, size, payload, count, overflow=0):
    return struct.pack("<hhiiiiii", etype, 1, size, 4, overflow, count, count, count) + payload


def polarity_packet(events, overflow=0):
    """``events`` are (x, y, t, p) or (x, y, t, p, valid) tuples."""
    body = b"".join(struct.pack("<II", polarity_word(e[0], e[1], e[3], *(e[4:] or (True,))), e[2] & 0x7FFFFFFF)
                    for e in events)
    return packet(1, 8, body, len(events), overflow)


def imu_packet(n=2):
    # IMU6 events: 36 bytes each
    return packet(2, 36, bytes(range(36)) * n, n)


def write(*packets, header=HEADER):
    return header + b"".join(packets)
