"""Bit-exact binary tile files.

Layout (all little-endian):

    magic "LCT1" | version u32 | gx i32 | gy i32 | bounds 4xf64
    | coverage_min u32 | section table: 5 x (offset u64, length u64)
    | payload sections | crc32 u32

Sections in table order: landmarks, descriptors, visibility, codebooks,
cameras.  Offsets are absolute file offsets; the trailing CRC32 covers the
concatenated payload bytes.  The sectioned layout allows loading geometry
without touching descriptors.

Descriptors are stored as f32 rows (raw) or u8 code rows (product
quantized), concatenated in landmark order.
"""

from __future__ import annotations

import struct
import zlib
from typing import List, Optional

import numpy as np

from .geometry import Pose
from .mapmodel import Landmark, MapTile, graph_from_cam_csr
from .pq import PqCodebook
from .projection import PcaProjection

MAGIC = b"LCT1"
VERSION = 1
_SECTIONS = 5


class TileFormatError(Exception):
    """Base class for tile (de)serialization failures."""


class BadMagic(TileFormatError):
    pass


class VersionMismatch(TileFormatError):
    pass


class TruncatedTile(TileFormatError):
    pass


class ChecksumMismatch(TileFormatError):
    pass


class _Reader:
    def __init__(self, buf: bytes, start: int, length: int):
        if start + length > len(buf):
            raise TruncatedTile("section extends past end of file")
        self.buf = buf
        self.at = start
        self.end = start + length

    def take(self, n: int) -> bytes:
        if n < 0 or self.at + n > self.end:
            raise TruncatedTile("record extends past section end")
        out = self.buf[self.at:self.at + n]
        self.at += n
        return out

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        raw = self.take(dt.itemsize * count)
        return np.frombuffer(raw, dtype=dt).copy()


def _pack_landmarks(landmarks: List[Landmark]) -> bytes:
    out = [struct.pack("<Q", len(landmarks))]
    for lm in landmarks:
        out.append(struct.pack("<q3dI", lm.id, *lm.position,
                               len(lm.observer_camera_ids)))
        out.append(lm.observer_camera_ids.astype("<i8").tobytes())
        out.append(struct.pack("<I", lm.num_descriptors))
    return b"".join(out)


def _pack_descriptors(landmarks: List[Landmark]) -> bytes:
    has_any = bool(landmarks)
    if has_any:
        kinds = {lm.descriptors.dtype.kind for lm in landmarks}
        dims = {lm.descriptors.shape[1] for lm in landmarks}
        orients = {lm.orientations is not None for lm in landmarks}
        if len(kinds) > 1 or len(dims) > 1 or len(orients) > 1:
            raise ValueError("tile mixes descriptor kinds, dims or orientation presence")
        is_pq = kinds.pop() == "u"
        dim = dims.pop()
        has_ori = orients.pop()
        data = np.concatenate([lm.descriptors for lm in landmarks], axis=0)
        total = data.shape[0]
    else:
        is_pq, dim, has_ori, total = False, 0, False, 0
        data = np.zeros((0, 0), np.float32)
    out = [struct.pack("<BHQB", 1 if is_pq else 0, dim, total, 1 if has_ori else 0)]
    out.append(data.astype("<u1" if is_pq else "<f4").tobytes())
    if has_ori:
        ori = np.concatenate([lm.orientations for lm in landmarks])
        out.append(ori.astype("<f4").tobytes())
    return b"".join(out)


def _pack_visibility(tile: MapTile) -> bytes:
    g = tile.graph
    out = [struct.pack("<QQQ", g.num_cameras, g.num_landmarks, g.num_edges)]
    out.append(g.cam_ptr.astype("<u8").tobytes())
    out.append(g.cam_lms.astype("<u4").tobytes())
    return b"".join(out)


def _pack_codebooks(pca: Optional[PcaProjection], pq: Optional[PqCodebook]) -> bytes:
    out = []
    if pca is None:
        out.append(b"\x00")
    else:
        d, D = pca.basis.shape
        out.append(struct.pack("<BHH", 1, D, d))
        out.append(pca.mean.astype("<f8").tobytes())
        out.append(pca.basis.astype("<f8").tobytes())
    if pq is None:
        out.append(b"\x00")
    else:
        out.append(struct.pack("<BBHH", 1, pq.num_subspaces, pq.num_words,
                               pq.subdim))
        out.append(pq.permutation.astype("<u2").tobytes())
        out.append(pq.centroids.astype("<f4").tobytes())
    return b"".join(out)


def _pack_cameras(tile: MapTile) -> bytes:
    out = [struct.pack("<Q", len(tile.camera_ids))]
    for cid in tile.camera_ids:
        pose = tile.camera_poses[int(cid)]
        out.append(struct.pack("<q4d3d", int(cid), *pose.q, *pose.t))
    return b"".join(out)


def write_tile(tile: MapTile) -> bytes:
    sections = [
        _pack_landmarks(tile.landmarks),
        _pack_descriptors(tile.landmarks),
        _pack_visibility(tile),
        _pack_codebooks(tile.pca, tile.pq),
        _pack_cameras(tile),
    ]
    header_len = 4 + 4 + 8 + 32 + 4 + _SECTIONS * 16
    table = []
    at = header_len
    for s in sections:
        table.append((at, len(s)))
        at += len(s)
    payload = b"".join(sections)
    head = [MAGIC,
            struct.pack("<I", VERSION),
            struct.pack("<ii", tile.gx, tile.gy),
            struct.pack("<4d", *tile.bounds),
            struct.pack("<I", tile.coverage_min)]
    for off, ln in table:
        head.append(struct.pack("<QQ", off, ln))
    blob = b"".join(head) + payload
    return blob + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def read_tile(data: bytes) -> MapTile:
    if len(data) < 4:
        raise TruncatedTile("file shorter than magic")
    if data[:4] != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, got {data[:4]!r}")
    header_len = 4 + 4 + 8 + 32 + 4 + _SECTIONS * 16
    if len(data) < header_len + 4:
        raise TruncatedTile("file shorter than header")
    version, = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise VersionMismatch(f"tile version {version}, reader supports {VERSION}")
    gx, gy = struct.unpack_from("<ii", data, 8)
    bounds = struct.unpack_from("<4d", data, 16)
    coverage_min, = struct.unpack_from("<I", data, 48)
    table = []
    for i in range(_SECTIONS):
        off, ln = struct.unpack_from("<QQ", data, 52 + 16 * i)
        table.append((off, ln))
    payload_start = header_len
    payload_end = table[-1][0] + table[-1][1]
    if payload_end + 4 > len(data):
        raise TruncatedTile("section table points past end of file")
    crc_stored, = struct.unpack_from("<I", data, payload_end)
    crc = zlib.crc32(data[payload_start:payload_end]) & 0xFFFFFFFF
    if crc != crc_stored:
        raise ChecksumMismatch(f"crc {crc:#x} != stored {crc_stored:#x}")

    # landmarks + descriptors
    r = _Reader(data, *table[0])
    count, = r.unpack("Q")
    metas = []
    for _ in range(count):
        lid, x, y, z, n_obs = r.unpack("q3dI")
        observers = r.array("<i8", n_obs)
        n_desc, = r.unpack("I")
        metas.append((lid, np.array([x, y, z]), observers, n_desc))

    rd = _Reader(data, *table[1])
    is_pq, dim, total, has_ori = rd.unpack("BHQB")
    if is_pq:
        desc = rd.array("<u1", total * dim).reshape(total, dim)
    else:
        desc = rd.array("<f4", total * dim).reshape(total, dim)
    oris = rd.array("<f4", total) if has_ori else None

    landmarks = []
    at = 0
    for lid, pos, observers, n_desc in metas:
        if at + n_desc > total:
            raise TruncatedTile("descriptor rows exhausted before landmarks")
        landmarks.append(Landmark(
            int(lid), pos, desc[at:at + n_desc], observers,
            None if oris is None else oris[at:at + n_desc]))
        at += n_desc

    # codebooks
    rc = _Reader(data, *table[3])
    pca = None
    flag, = rc.unpack("B")
    if flag:
        D, d = rc.unpack("HH")
        mean = rc.array("<f8", D)
        basis = rc.array("<f8", d * D).reshape(d, D)
        pca = PcaProjection(mean, basis)
    pq = None
    flag, = rc.unpack("B")
    if flag:
        m, k, subdim = rc.unpack("BHH")
        perm = rc.array("<u2", m * subdim).astype(np.int64)
        cents = rc.array("<f4", m * k * subdim).reshape(m, k, subdim)
        pq = PqCodebook(cents, perm)

    # visibility (camera direction stored; landmark direction rebuilt)
    rv = _Reader(data, *table[2])
    ncam_g, nlm_g, nnz = rv.unpack("QQQ")
    cam_ptr = rv.array("<u8", ncam_g + 1).astype(np.int64)
    cam_lms = rv.array("<u4", nnz).astype(np.int64)

    # cameras
    rk = _Reader(data, *table[4])
    ncam, = rk.unpack("Q")
    camera_ids = np.empty(ncam, dtype=np.int64)
    poses = {}
    for i in range(ncam):
        vals = rk.unpack("q4d3d")
        camera_ids[i] = vals[0]
        poses[int(vals[0])] = Pose(np.array(vals[1:5]), np.array(vals[5:8]))

    graph = graph_from_cam_csr(cam_ptr, cam_lms, int(nlm_g))
    if graph.num_cameras != ncam or graph.num_landmarks != len(landmarks):
        raise TruncatedTile("visibility graph shape disagrees with sections")
    return MapTile(gx, gy, tuple(bounds), landmarks, camera_ids, poses, graph,
                   pca=pca, pq=pq, coverage_min=coverage_min)


def tile_filename(gx: int, gy: int) -> str:
    return f"{gx}_{gy}.lct"
