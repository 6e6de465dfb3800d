"""Reference byte-layout writer for the perception-message golden fixtures.

Deliberately shares no code with msight: every field is laid down with
int.to_bytes and the trailer comes from binascii. Run once; the .bin outputs
are committed and must never change.
"""
import binascii
import pathlib

HERE = pathlib.Path(__file__).parent


def u(n, width):
    return n.to_bytes(width, "little", signed=False)


def s32(n):
    return n.to_bytes(4, "little", signed=True)


def seal(body):
    return body + u(binascii.crc32(body) & 0xFFFFFFFF, 4)


def empty():
    # seq 7, producer 1700000000123 ms, frame 1700000000000 ms, no vehicles
    return seal(b"MSV2" + u(1, 1) + u(7, 4) + u(1700000000123, 8) + u(1700000000000, 8) + u(0, 2))


def one_vehicle():
    # id 42, truck, lat 42.2808100, lon -83.7430378, heading 90.0 deg, speed 12.34 m/s
    veh = u(42, 4) + u(1, 1) + s32(422808100) + s32(-837430378) + u(7200, 2) + u(617, 2) + u(0, 1)
    return seal(b"MSV2" + u(1, 1) + u(1, 4) + u(1700000000400, 8) + u(1700000000000, 8) + u(1, 2) + veh)


def with_path():
    # K = 2, two vehicles, each with two predicted points
    head = b"MSV2" + u(2, 1) + u(65536, 4) + u(5, 8) + u(4, 8) + u(2, 2) + u(2, 1)
    v1 = (u(1, 4) + u(0, 1) + s32(422808100) + s32(-837430378) + u(0, 2) + u(0, 2) + u(0, 1)
          + s32(422808200) + s32(-837430378) + s32(422808300) + s32(-837430378))
    v2 = (u(4294967295, 4) + u(2, 1) + s32(-900000000) + s32(1800000000) + u(28799, 2) + u(65535, 2) + u(0, 1)
          + s32(-899999999) + s32(1799999999) + s32(-899999998) + s32(1799999998))
    return seal(head + v1 + v2)


if __name__ == "__main__":
    for name, fn in (("empty", empty), ("one_vehicle", one_vehicle), ("with_path", with_path)):
        (HERE / f"golden_{name}.bin").write_bytes(fn())
