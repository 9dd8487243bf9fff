"""File formats: a raw little-endian blob plus a JSON sidecar.

``write_*`` functions take the blob path; the sidecar goes next to it with a
``.json`` suffix appended. Scalars in blobs are float32 little-endian, integer
graph arrays are int64 little-endian. Readers check the version and every
section's extent before building any object.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .core import DenseVolume, GaussianCloud, KernelGraph, ProjectionStack, ScanGeometry
from .errors import InvalidParameterError, ParseError

FORMAT_VERSION = 1
F32 = np.dtype("<f4")
I64 = np.dtype("<i8")
DTYPES = {"f32le": F32, "i64le": I64}


def sidecar_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".json")


def _write(path, sections, meta):
    """Write named arrays back to back and describe them in the sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    layout = []
    offset = 0
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        for name, arr, code in sections:
            blob = np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes(order="C")
            fh.write(blob)
            layout.append({"name": name, "dtype": code, "shape": list(np.shape(arr)),
                           "offset": offset, "nbytes": len(blob)})
            offset += len(blob)
    os.replace(tmp, path)
    meta = dict(meta, version=FORMAT_VERSION, sections=layout)
    sidecar_path(path).write_text(json.dumps(meta, indent=2))


def _read_meta(path, kind):
    side = sidecar_path(path)
    try:
        text = side.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read sidecar {side}: {exc}", field="sidecar") from exc
    try:
        meta = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"sidecar {side} is not valid JSON: {exc.msg}", offset=exc.pos,
                         field="sidecar") from exc
    if not isinstance(meta, dict):
        raise ParseError(f"sidecar {side} must hold a JSON object", offset=0, field="sidecar")
    if meta.get("version") != FORMAT_VERSION:
        raise ParseError(f"unsupported format version {meta.get('version')!r}", field="version")
    if meta.get("kind") != kind:
        raise ParseError(f"expected a {kind} file, found {meta.get('kind')!r}", field="kind")
    return meta


def _read_sections(path, meta):
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}", field="blob") from exc
    out = {}
    for sec in meta.get("sections", []):
        name = sec.get("name", "?")
        code = sec.get("dtype")
        if code not in DTYPES:
            raise ParseError(f"unknown dtype {code!r}", field=name)
        dt = DTYPES[code]
        shape = tuple(int(s) for s in sec.get("shape", []))
        offset = int(sec.get("offset", -1))
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if offset < 0 or sec.get("nbytes") != nbytes:
            raise ParseError("section size disagrees with its shape", offset=max(offset, 0),
                             field=name)
        end = offset + nbytes
        if end > len(raw):
            raise ParseError(f"file truncated: section needs bytes up to {end}, file has "
                             f"{len(raw)}", offset=len(raw), field=name)
        out[name] = np.frombuffer(raw, dtype=dt, count=nbytes // dt.itemsize,
                                  offset=offset).reshape(shape)
    return out


def _need(sections, name):
    if name not in sections:
        raise ParseError("missing section", field=name)
    return sections[name]


def _field(meta, name):
    if name not in meta:
        raise ParseError("missing sidecar field", field=name)
    return meta[name]


# ----------------------------------------------------------------------------
# volumes
# ----------------------------------------------------------------------------


def write_volume(path, vol: DenseVolume):
    # x-fastest on disk: a C-order dump of the transposed [z, y, x] array
    data = np.asarray(vol.data).transpose(2, 1, 0)
    _write(path, [("data", data, "f32le")], {
        "kind": "volume",
        "dims": list(vol.dims),
        "spacing": [float(s) for s in vol.spacing],
        "origin": [float(o) for o in vol.origin],
        "dtype": "f32le",
        "order": "x-fastest",
    })


def read_volume(path) -> DenseVolume:
    meta = _read_meta(path, "volume")
    if meta.get("order") != "x-fastest":
        raise ParseError(f"unsupported voxel order {meta.get('order')!r}", field="order")
    dims = tuple(int(d) for d in _field(meta, "dims"))
    sec = _read_sections(path, meta)
    data = _need(sec, "data")
    if data.shape != dims[::-1]:
        raise ParseError(f"data shape {data.shape} does not match dims {dims}", offset=0,
                         field="data")
    return DenseVolume(data.transpose(2, 1, 0).astype(np.float32), _field(meta, "spacing"),
                       _field(meta, "origin"))


# ----------------------------------------------------------------------------
# projection stacks
# ----------------------------------------------------------------------------


def geometry_to_dict(g: ScanGeometry):
    return {"mode": g.mode, "detector_rows": g.detector_rows, "detector_cols": g.detector_cols,
            "pixel_pitch": float(g.pixel_pitch), "angles": [float(a) for a in g.angles],
            "source_to_axis": None if g.source_to_axis is None else float(g.source_to_axis),
            "axis_to_detector": None if g.axis_to_detector is None else float(g.axis_to_detector)}


def geometry_from_dict(d) -> ScanGeometry:
    try:
        return ScanGeometry(d["mode"], int(d["detector_rows"]), int(d["detector_cols"]),
                            float(d["pixel_pitch"]), np.asarray(d["angles"], dtype=np.float64),
                            d.get("source_to_axis"), d.get("axis_to_detector"))
    except KeyError as exc:
        raise ParseError("missing geometry field", field=f"geometry.{exc.args[0]}") from exc
    except InvalidParameterError as exc:
        raise ParseError(f"invalid geometry: {exc}", field="geometry") from exc


def write_stack(path, stack: ProjectionStack):
    _write(path, [("images", stack.images, "f32le")], {
        "kind": "projections",
        "geometry": geometry_to_dict(stack.geometry),
        "dtype": "f32le",
        "order": "view, row, col (col fastest)",
    })


def read_stack(path) -> ProjectionStack:
    meta = _read_meta(path, "projections")
    geo = geometry_from_dict(_field(meta, "geometry"))
    images = _need(_read_sections(path, meta), "images")
    if images.shape != (geo.num_views, geo.detector_rows, geo.detector_cols):
        raise ParseError(f"images shape {images.shape} does not match geometry", offset=0,
                         field="images")
    return ProjectionStack(geo, images.astype(np.float32))


# ----------------------------------------------------------------------------
# clouds
# ----------------------------------------------------------------------------


def write_cloud(path, cloud: GaussianCloud, graph: KernelGraph | None = None):
    sections = [("rho", cloud.rho, "f32le"), ("position", cloud.position, "f32le"),
                ("scale", cloud.scale, "f32le"), ("rotation", cloud.rotation, "f32le")]
    meta = {"kind": "cloud", "count": len(cloud), "bbox": cloud.bbox.tolist(), "dtype": "f32le"}
    if graph is not None:
        graph.check_cloud(cloud)
        sections += [("graph_indptr", graph.indptr, "i64le"),
                     ("graph_indices", graph.indices, "i64le"),
                     ("graph_weights", graph.weights, "f32le")]
        meta["graph"] = {"scaling_k": graph.scaling_k, "num_edges": graph.num_edges}
    _write(path, sections, meta)


def read_cloud(path):
    """Returns ``(cloud, graph_or_None)``."""
    meta = _read_meta(path, "cloud")
    m = int(_field(meta, "count"))
    sec = _read_sections(path, meta)
    arrays = {}
    for name, width in (("rho", None), ("position", 3), ("scale", 3), ("rotation", 4)):
        a = _need(sec, name)
        want = (m,) if width is None else (m, width)
        if a.shape != want:
            raise ParseError(f"shape {a.shape}, expected {want}", offset=0, field=name)
        arrays[name] = a.astype(np.float32)
    try:
        cloud = GaussianCloud(bbox=_field(meta, "bbox"), **arrays)
    except InvalidParameterError as exc:
        raise ParseError(f"invalid cloud contents: {exc}", field="cloud") from exc
    graph = None
    if "graph" in meta:
        g = meta["graph"]
        try:
            graph = KernelGraph(_need(sec, "graph_indptr"), _need(sec, "graph_indices"),
                                _need(sec, "graph_weights").astype(np.float32),
                                float(g["scaling_k"]))
            graph.check_cloud(cloud)
        except (InvalidParameterError, KeyError) as exc:
            raise ParseError(f"invalid graph: {exc}", field="graph") from exc
        except Exception as exc:  # inconsistent node count
            raise ParseError(str(exc), field="graph") from exc
    return cloud, graph


# ----------------------------------------------------------------------------
# metrics logs and slice previews
# ----------------------------------------------------------------------------


def write_metrics_csv(path, rows, fields):
    import csv

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for r in rows:
            vals = [getattr(r, f) if not isinstance(r, dict) else r.get(f) for f in fields]
            w.writerow(["" if v is None else v for v in vals])


def write_pgm(path, image, peak=None):
    """8-bit binary PGM with the value window ``[0, peak]``."""
    img = np.asarray(image, dtype=np.float64)
    peak = float(img.max()) if peak is None else float(peak)
    scaled = np.zeros(img.shape) if peak <= 0 else np.clip(img / peak, 0, 1) * 255
    data = np.round(scaled).astype(np.uint8)
    rows, cols = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(data.tobytes())
