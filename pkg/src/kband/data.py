"""Synthetic phantoms, slice normalisation, band-acquisition datasets and the
KBND-1 on-disk container.

Container layout (a directory)::

    manifest.json   UTF-8 JSON: version, shape, parameters, seeds, record table
    records.kbnd    concatenated record blobs, addressed by manifest offsets

Record blob (all integers little-endian)::

    b"KBND" | u8 version | u8 flags | u32 rows | u32 cols
    | rows*cols (re, im) float32 pairs, row-major           k-space
    | rows*cols (re, im) float32 pairs       if FLAG_TRUTH  ground-truth image
    | ceil(rows*cols/8) packed bytes         if FLAG_BAND   band mask
    | ceil(rows*cols/8) packed bytes         if FLAG_VD     VD mask

Masks are packed row-major with ``numpy.packbits(..., bitorder="little")``.
Each blob is covered by a CRC-32C checksum stored in the manifest.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import crc32c
import numpy as np

from . import grid
from .errors import CorruptRecord, InvalidArgument, InvalidRecord, UnsupportedVersion
from .grid import BandMask, GridShape, VDMask, as_shape
from .operators import fft2c, ifft2c

FORMAT_VERSION = "KBND-1"
MAGIC = b"KBND"
BLOB_VERSION = 1
FLAG_BAND = 0x01
FLAG_VD = 0x02
FLAG_TRUTH = 0x04
FLAG_BIG_ENDIAN = 0x80
_HEADER = struct.Struct("<4sBBII")

POLICIES = ("uniform", "vertical", "square", "full")


# ---------------------------------------------------------------------------
# phantoms

@dataclass(frozen=True)
class Ellipse:
    center: tuple[float, float]  # (y, x) offset from the image centre, pixels
    axes: tuple[float, float]  # (semi-axis along y, semi-axis along x) before rotation
    angle_deg: float = 0.0
    intensity: float = 1.0


@dataclass(frozen=True)
class PhantomSpec:
    shape: GridShape
    n_ellipses: int = 6
    intensity_range: tuple[float, float] = (0.2, 1.0)
    phase_smoothness: float = 1.0
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shape", as_shape(self.shape))
        lo, hi = self.intensity_range
        if not 0 <= lo <= hi <= 10:
            raise InvalidArgument(f"intensity_range must lie within [0, 10], got {self.intensity_range}")
        if self.noise_std < 0:
            raise InvalidArgument("noise_std must be >= 0")
        if not self.phase_smoothness > 0:
            raise InvalidArgument("phase_smoothness must be positive")
        if self.n_ellipses < 0:
            raise InvalidArgument("n_ellipses must be >= 0")


def ellipse_image(shape, ellipses: Iterable[Ellipse]) -> np.ndarray:
    """Sum of ellipse indicator functions evaluated at pixel centres."""
    shape = as_shape(shape)
    yy, xx = grid.kspace_offsets(shape)
    img = np.zeros(shape.tuple)
    for e in ellipses:
        t = math.radians(e.angle_deg)
        dy, dx = yy - e.center[0], xx - e.center[1]
        u = dx * math.cos(t) + dy * math.sin(t)
        v = -dx * math.sin(t) + dy * math.cos(t)
        inside = (v / e.axes[0]) ** 2 + (u / e.axes[1]) ** 2 <= 1.0
        img[inside] += e.intensity
    return img


def smooth_phase(shape, rng, smoothness: float) -> np.ndarray:
    """Random quadratic phase over normalised coordinates in [-1, 1]."""
    shape = as_shape(shape)
    yy, xx = grid.kspace_offsets(shape)
    u, v = xx / (shape.cols / 2), yy / (shape.rows / 2)
    c = rng.normal(0.0, 1.0 / smoothness, size=5)
    return rng.uniform(-math.pi, math.pi) + c[0] * u + c[1] * v + c[2] * u * u + c[3] * u * v + c[4] * v * v


def random_ellipses(spec: PhantomSpec, rng) -> list[Ellipse]:
    if spec.n_ellipses == 0:
        return []
    hy, hx = spec.shape.rows / 2, spec.shape.cols / 2
    lo, hi = spec.intensity_range
    out = [Ellipse(
        center=(rng.uniform(-0.05, 0.05) * hy, rng.uniform(-0.05, 0.05) * hx),
        axes=(rng.uniform(0.6, 0.85) * hy, rng.uniform(0.55, 0.8) * hx),
        angle_deg=rng.uniform(-15, 15),
        intensity=rng.uniform(lo, hi) if hi > 0 else 0.0,
    )]
    for _ in range(spec.n_ellipses - 1):
        out.append(Ellipse(
            center=(rng.uniform(-0.45, 0.45) * hy, rng.uniform(-0.45, 0.45) * hx),
            axes=(rng.uniform(0.05, 0.3) * hy, rng.uniform(0.05, 0.3) * hx),
            angle_deg=rng.uniform(0, 180),
            intensity=rng.choice([-0.5, 1.0]) * rng.uniform(lo, hi),
        ))
    return out


def make_phantom(spec: PhantomSpec) -> np.ndarray:
    """Random ellipse phantom with smooth phase and optional k-space noise."""
    rng = np.random.default_rng(spec.seed)
    mag = np.clip(ellipse_image(spec.shape, random_ellipses(spec, rng)), 0.0, None)
    img = mag * np.exp(1j * smooth_phase(spec.shape, rng, spec.phase_smoothness))
    if spec.noise_std > 0:
        noise = rng.normal(size=(2,) + spec.shape.tuple) * (spec.noise_std / math.sqrt(2))
        img = ifft2c(fft2c(img) + noise[0] + 1j * noise[1])
    return img


def normalize_slice(x) -> tuple[np.ndarray, float]:
    """Divide by the 95th percentile of ``|x|`` (exclusive linear interpolation)."""
    x = np.asarray(x)
    mag = np.abs(x).ravel()
    if not np.any(mag):
        raise InvalidArgument("cannot normalise an all-zero image")
    scale = float(np.percentile(mag, 95, method="weibull"))
    if scale <= 0:
        raise InvalidArgument("95th percentile of the image modulus is zero")
    return x / scale, scale


def ingest_slice(path) -> np.ndarray:
    """Read a raw complex64 row-major slice with its ``.json`` sidecar.

    The sidecar holds ``{"rows": R, "cols": C, "domain": "kspace" | "image"}``;
    the slice is returned in the image domain.
    """
    path = Path(path)
    side = path.with_suffix(".json")
    meta = json.loads(side.read_text())
    rows, cols = int(meta["rows"]), int(meta["cols"])
    raw = np.fromfile(path, dtype="<c8")
    if raw.size != rows * cols:
        raise InvalidRecord(f"{path} holds {raw.size} values, sidecar says {rows}x{cols}")
    data = raw.reshape(rows, cols).astype(np.complex128)
    domain = meta.get("domain", "kspace")
    if domain == "kspace":
        return ifft2c(data)
    if domain == "image":
        return data
    raise InvalidRecord(f"unknown domain {domain!r} in {side}")


# ---------------------------------------------------------------------------
# records

@dataclass
class DatasetRecord:
    record_id: str
    split: str
    kspace: np.ndarray  # complex64; zero off the band for training records
    band: Optional[BandMask]
    vd: Optional[VDMask]
    ground_truth: Optional[np.ndarray] = None
    normalization_scale: float = 1.0
    meta: dict = field(default_factory=dict)

    @property
    def shape(self) -> GridShape:
        return as_shape(self.kspace.shape)

    def validate(self):
        if self.normalization_scale <= 0:
            raise InvalidRecord(f"{self.record_id}: normalization_scale must be positive")
        if self.band is not None:
            if self.band.bits.shape != self.kspace.shape:
                raise InvalidRecord(f"{self.record_id}: band mask shape does not match k-space")
            if np.any(self.kspace[self.band.bits == 0] != 0):
                raise InvalidRecord(f"{self.record_id}: k-space is nonzero outside its band")
        if self.vd is not None and self.vd.bits.shape != self.kspace.shape:
            raise InvalidRecord(f"{self.record_id}: VD mask shape does not match k-space")
        if self.ground_truth is not None and self.ground_truth.shape != self.kspace.shape:
            raise InvalidRecord(f"{self.record_id}: ground truth shape does not match k-space")


def _band_meta(b: Optional[BandMask]):
    if b is None:
        return None
    return {"kind": b.kind, "angle_deg": b.angle_deg, "r_band": b.r_band,
            "half_width": None if math.isinf(b.half_width) else b.half_width}


def _vd_meta(v: Optional[VDMask]):
    if v is None:
        return None
    return {"r_vd_target": v.r_vd_target, "calib": list(v.calib), "seed": v.seed,
            "dimensionality": v.dimensionality, "density_power": v.density_power}


def _complex_bytes(a) -> bytes:
    a = np.ascontiguousarray(a, dtype=np.complex64)
    return a.view("<f4").tobytes()


def encode_record(rec: DatasetRecord) -> bytes:
    rec.validate()
    rows, cols = rec.kspace.shape
    flags = (FLAG_BAND if rec.band is not None else 0) | (FLAG_VD if rec.vd is not None else 0) \
        | (FLAG_TRUTH if rec.ground_truth is not None else 0)
    parts = [_HEADER.pack(MAGIC, BLOB_VERSION, flags, rows, cols), _complex_bytes(rec.kspace)]
    if rec.ground_truth is not None:
        parts.append(_complex_bytes(rec.ground_truth))
    for m in (rec.band, rec.vd):
        if m is not None:
            parts.append(np.packbits(m.bits.ravel().astype(bool), bitorder="little").tobytes())
    return b"".join(parts)


def decode_record(blob: bytes, entry: dict) -> DatasetRecord:
    if len(blob) < _HEADER.size:
        raise CorruptRecord(f"record {entry.get('id')}: blob truncated")
    magic, version, flags, rows, cols = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CorruptRecord(f"record {entry.get('id')}: bad magic {magic!r}")
    if version != BLOB_VERSION:
        raise UnsupportedVersion(f"record {entry.get('id')}: blob version {version} is not supported")
    if flags & FLAG_BIG_ENDIAN:
        raise UnsupportedVersion(f"record {entry.get('id')}: big-endian payloads are not supported")
    n = rows * cols
    nmask = (n + 7) // 8
    expected = _HEADER.size + 8 * n * (2 if flags & FLAG_TRUTH else 1) \
        + nmask * (bool(flags & FLAG_BAND) + bool(flags & FLAG_VD))
    if len(blob) != expected:
        raise CorruptRecord(f"record {entry.get('id')}: expected {expected} bytes, found {len(blob)}")
    shape = GridShape(rows, cols)
    pos = _HEADER.size

    def complex_block():
        nonlocal pos
        arr = np.frombuffer(blob, dtype="<f4", count=2 * n, offset=pos).astype(np.float32)
        pos += 8 * n
        return arr.view(np.complex64).reshape(rows, cols)

    def mask_block():
        nonlocal pos
        bits = np.unpackbits(np.frombuffer(blob, dtype=np.uint8, count=nmask, offset=pos),
                             count=n, bitorder="little")
        pos += nmask
        bits = bits.reshape(rows, cols)
        bits.setflags(write=False)
        return bits

    kspace = complex_block()
    truth = complex_block() if flags & FLAG_TRUTH else None
    band = vd = None
    if flags & FLAG_BAND:
        bm = entry["band"]
        hw = math.inf if bm["half_width"] is None else bm["half_width"]
        band = BandMask(shape, bm["angle_deg"], hw, bm["r_band"], mask_block(), kind=bm["kind"])
    if flags & FLAG_VD:
        vm = entry["vd"]
        vd = VDMask(shape, vm["r_vd_target"], tuple(vm["calib"]), vm["seed"], vm["dimensionality"],
                    mask_block(), vm["density_power"])
    return DatasetRecord(entry["id"], entry["split"], kspace, band, vd, truth,
                         entry["normalization_scale"], dict(entry.get("meta", {})))


@dataclass
class DatasetManifest:
    shape: GridShape
    r_band: float
    r_vd: float
    angle_policy: str
    splits: dict
    seeds: dict
    params: dict = field(default_factory=dict)
    records: list = field(default_factory=list)
    version: str = FORMAT_VERSION

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "shape": [self.shape.rows, self.shape.cols],
            "r_band": self.r_band,
            "r_vd": self.r_vd,
            "angle_policy": self.angle_policy,
            "splits": self.splits,
            "seeds": self.seeds,
            "params": self.params,
            "records": self.records,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetManifest":
        if obj.get("version") != FORMAT_VERSION:
            raise UnsupportedVersion(f"unsupported container version {obj.get('version')!r}")
        return cls(as_shape(obj["shape"]), obj["r_band"], obj["r_vd"], obj["angle_policy"],
                   obj["splits"], obj["seeds"], obj.get("params", {}), obj["records"], obj["version"])

    def validate(self):
        offsets = [e["offset"] for e in self.records]
        if any(b <= a for a, b in zip(offsets, offsets[1:])):
            raise CorruptRecord("manifest record offsets are not strictly increasing")
        ids = [e["id"] for e in self.records]
        if len(set(ids)) != len(ids):
            raise InvalidRecord("manifest holds duplicate record ids")


class ContainerWriter:
    """Single-writer append of records into a new container directory."""

    def __init__(self, root, manifest: DatasetManifest):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest = manifest
        self.manifest.records = []
        self._fh = open(self.root / "records.kbnd", "wb")
        self._offset = 0

    def write_record(self, rec: DatasetRecord) -> dict:
        if any(e["id"] == rec.record_id for e in self.manifest.records):
            raise InvalidRecord(f"duplicate record id {rec.record_id!r}")
        blob = encode_record(rec)
        self._fh.write(blob)
        entry = {
            "id": rec.record_id,
            "split": rec.split,
            "offset": self._offset,
            "length": len(blob),
            "crc32c": crc32c.crc32c(blob),
            "normalization_scale": rec.normalization_scale,
            "band": _band_meta(rec.band),
            "vd": _vd_meta(rec.vd),
            "meta": rec.meta,
        }
        self._offset += len(blob)
        self.manifest.records.append(entry)
        return entry

    def close(self):
        self._fh.close()
        tmp = self.root / "manifest.json.tmp"
        tmp.write_text(json.dumps(self.manifest.to_json(), indent=1), encoding="utf-8")
        tmp.replace(self.root / "manifest.json")

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class Container:
    """Read-only view of a KBND-1 container directory."""

    def __init__(self, root):
        self.root = Path(root)
        try:
            obj = json.loads((self.root / "manifest.json").read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise InvalidRecord(f"no dataset container at {self.root}") from exc
        except json.JSONDecodeError as exc:
            raise CorruptRecord(f"manifest of {self.root} is not valid JSON") from exc
        self.manifest = DatasetManifest.from_json(obj)
        self.manifest.validate()
        self._index = {e["id"]: i for i, e in enumerate(self.manifest.records)}

    def __len__(self):
        return len(self.manifest.records)

    def ids(self, split: Optional[str] = None) -> list[str]:
        return [e["id"] for e in self.manifest.records if split is None or e["split"] == split]

    def read_record(self, key) -> DatasetRecord:
        entry = self.manifest.records[key if isinstance(key, int) else self._index[key]]
        with open(self.root / "records.kbnd", "rb") as fh:
            fh.seek(entry["offset"])
            blob = fh.read(entry["length"])
        if len(blob) != entry["length"]:
            raise CorruptRecord(f"record {entry['id']}: file truncated")
        if crc32c.crc32c(blob) != entry["crc32c"]:
            raise CorruptRecord(f"record {entry['id']}: checksum mismatch")
        rec = decode_record(blob, entry)
        if rec.shape != self.manifest.shape:
            raise CorruptRecord(f"record {entry['id']}: shape {rec.shape} differs from manifest")
        return rec

    def records(self, split: Optional[str] = None) -> Iterator[DatasetRecord]:
        for rid in self.ids(split):
            yield self.read_record(rid)

    def checksums(self) -> list[int]:
        return [e["crc32c"] for e in self.manifest.records]


def write_record(writer: ContainerWriter, rec: DatasetRecord) -> dict:
    return writer.write_record(rec)


def read_record(container: Container, key) -> DatasetRecord:
    return container.read_record(key)


# ---------------------------------------------------------------------------
# dataset assembly

def _stream(seed: int, index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index), int(stream)])


def _derived_seed(seed: int, index: int, stream: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index), int(stream)]).generate_state(1)[0])


def sample_angle(seed: int, index: int) -> int:
    """Uniform band angle in {0, ..., 179} for record ``index``."""
    return int(_stream(seed, index, 1).integers(0, 180))


def acquisition_mask(shape, policy: str, r_band: float, angle: int) -> BandMask:
    if policy == "uniform":
        return grid.band_mask(shape, angle, r_band)
    if policy == "vertical":
        return grid.vertical_band_mask(shape, r_band)
    if policy == "square":
        return grid.square_mask(shape, r_band)
    if policy == "full":
        return grid.full_mask(shape)
    raise InvalidArgument(f"unknown angle policy {policy!r}; expected one of {POLICIES}")


def make_vd(shape, r_vd: float, vd_kind: str, calib, density_power: float, seed: int) -> VDMask:
    if vd_kind == "2d":
        return grid.vd_mask_2d(shape, r_vd, calib, density_power, seed)
    if vd_kind == "1d":
        return grid.vd_mask_1d(shape, r_vd, int(calib[1]), density_power, seed)
    if vd_kind == "bernoulli":
        return grid.vd_mask_bernoulli(shape, r_vd, calib, density_power, seed)
    raise InvalidArgument(f"unknown VD scheme {vd_kind!r}")


def default_calib(shape) -> tuple[int, int]:
    shape = as_shape(shape)
    return max(shape.rows // 8, 2), max(shape.cols // 8, 2)


def build_dataset(
    shape,
    n_train: int,
    n_test: int,
    r_band: float,
    r_vd: float,
    seed: int = 0,
    policy: str = "uniform",
    vd_kind: str = "2d",
    calib: Optional[Sequence[int]] = None,
    density_power: float = 2.0,
    phantom: Optional[dict] = None,
    images: Optional[Sequence[np.ndarray]] = None,
    out_dir=None,
) -> tuple[DatasetManifest, list[DatasetRecord]]:
    """Simulate band acquisition for ``n_train`` training and ``n_test`` test slices.

    Training records keep only the band-masked k-space plus their band and VD
    masks, drawn once here and never resampled. Test records keep the full
    k-space, the ground-truth image and a full-grid VD mask. Phantoms, angles
    and VD masks come from per-record seed streams, so the same ``seed`` gives
    the same slices and VD masks under every ``policy``. ``images`` replaces
    the phantoms with externally supplied slices.
    """
    shape = as_shape(shape)
    if not r_band >= 1 or not r_vd >= 1:
        raise InvalidArgument("r_band and r_vd must be >= 1")
    if policy not in POLICIES:
        raise InvalidArgument(f"unknown angle policy {policy!r}; expected one of {POLICIES}")
    if n_train < 0 or n_test < 0:
        raise InvalidArgument("split sizes must be >= 0")
    calib = tuple(default_calib(shape) if calib is None else calib)
    total = n_train + n_test
    if images is not None and len(images) < total:
        raise InvalidArgument(f"need {total} ingested slices, got {len(images)}")
    phantom = dict(phantom or {})
    manifest = DatasetManifest(
        shape=shape, r_band=float(r_band), r_vd=float(r_vd), angle_policy=policy,
        splits={"train": n_train, "test": n_test}, seeds={"base": int(seed)},
        params={"vd_kind": vd_kind, "calib": list(calib), "density_power": density_power,
                "phantom": phantom, "source": "ingested" if images is not None else "phantom"},
    )
    records = []
    for i in range(total):
        split = "train" if i < n_train else "test"
        if images is not None:
            img = np.asarray(images[i])
            if img.shape != shape.tuple:
                raise InvalidArgument(f"ingested slice {i} has shape {img.shape}, expected {shape.tuple}")
            pseed = None
        else:
            pseed = _derived_seed(seed, i, 0)
            img = make_phantom(PhantomSpec(shape, seed=pseed, **phantom))
        img, scale = normalize_slice(img)
        full = fft2c(img).astype(np.complex64)
        vseed = _derived_seed(seed, i, 2)
        vd = make_vd(shape, r_vd, vd_kind, calib, density_power, vseed)
        meta = {"index": i, "phantom_seed": pseed, "vd_seed": vseed}
        if split == "train":
            angle = sample_angle(seed, i)
            band = acquisition_mask(shape, policy, r_band, angle)
            meta["angle_draw"] = angle
            kspace = np.where(band.bits != 0, full, 0).astype(np.complex64)
            rec = DatasetRecord(f"train-{i:05d}", split, kspace, band, vd, None, scale, meta)
        else:
            truth = ifft2c(full).astype(np.complex64)
            rec = DatasetRecord(f"test-{i - n_train:05d}", split, full, None, vd, truth, scale, meta)
        rec.validate()
        records.append(rec)
    if out_dir is not None:
        with ContainerWriter(out_dir, manifest) as w:
            for rec in records:
                w.write_record(rec)
    return manifest, records
