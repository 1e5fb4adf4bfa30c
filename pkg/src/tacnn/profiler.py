"""Static parameter and multiply-accumulate accounting per architecture row.

Conventions: convolution and linear layers carry a bias; batch norm counts
its affine scale and shift; one MAC is reported as one FLOP; pooling,
activations, normalization and concatenation cost nothing. CAG and VAG rows
are doubled for the two input streams, and every row before the person
maxout scales with the number of persons.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

from .errors import ConfigurationError
from .model import FUSED, HIDDEN, MAPPED, TAIL, TOP, ModelConfig


@dataclass
class ProfileRow:
    module: str
    layer: str
    input_shape: tuple
    output_shape: tuple
    params: int
    macs: int


@dataclass
class ProfileReport:
    rows: list = field(default_factory=list)
    persons: int = 1
    rounding: str = "half-away-from-zero, 3 decimals"

    @property
    def total_params(self):
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self):
        return sum(r.macs for r in self.rows)

    def row(self, module, layer):
        for r in self.rows:
            if r.module == module and r.layer == layer:
                return r
        raise KeyError((module, layer))


def round3(value):
    """Round half away from zero to 3 decimals."""
    return float(Decimal(repr(value)).quantize(Decimal("0.001"), rounding=ROUND_HALF_UP))


def _half(n):
    return -(-n // 2)


def _conv(cin, cout, kh, kw, groups, h, w):
    params = cout * (cin // groups) * kh * kw + cout
    macs = cout * h * w * (cin // groups) * kh * kw
    return params, macs


def _se(c, r=1):
    return 2 * (c * c // r) + c // r + c, 2 * c * c // r


def profile(config=None, persons=1):
    """Full per-row report for ``config`` at ``persons`` persons per sample."""
    c = ModelConfig() if config is None else config
    if persons < 1:
        raise ConfigurationError("persons must be >= 1")
    g = c.grouped
    t, v = c.frames, c.joints
    rows = []

    def add(module, layer, shp_in, shp_out, pm, streams=2, per_person=True):
        params, macs = pm
        scale = persons if per_person else 1
        rows.append(ProfileRow(module, layer, shp_in, shp_out, params * streams, macs * streams * scale))

    cag = "CAG*2"
    p, m = _conv(c.coords, HIDDEN, 1, 1, 1, t, v)
    add(cag, f"conv1x1,{HIDDEN},BN,ReLU", (c.coords, t, v), (HIDDEN, t, v), (p + 2 * HIDDEN, m))
    add(cag, f"conv1x1,{g}", (HIDDEN, t, v), (g, t, v), _conv(HIDDEN, g, 1, 1, 1, t, v))
    add(cag, "SE,r=1", (g, t, v), (g, t, v), _se(g))
    add(cag, f"conv3x1,{g},group{c.n_cag}", (g, t, v), (g, t, v), _conv(g, g, 3, 1, c.n_cag, t, v))
    add(cag, f"conv1x1,{g},group{c.n_cag // 2}", (g, t, v), (g, t, v), _conv(g, g, 1, 1, c.n_cag // 2, t, v))
    add(cag, f"conv1x1,{MAPPED}", (g, t, v), (MAPPED, t, v), _conv(g, MAPPED, 1, 1, 1, t, v))

    add("Transpose", "transpose(3,2,1)", (MAPPED, t, v), (v, t, MAPPED), (0, 0))

    vag = "VAG*2"
    w = MAPPED
    add(vag, f"conv1x1,{g}", (v, t, w), (g, t, w), _conv(v, g, 1, 1, 1, t, w))
    add(vag, "SE,r=1", (g, t, w), (g, t, w), _se(g))
    add(vag, f"conv3x3,{g},group{c.n_vag}", (g, t, w), (g, t, w), _conv(g, g, 3, 3, c.n_vag, t, w))
    add(vag, f"conv1x1,{g},group{c.n_vag // 2}", (g, t, w), (g, t, w), _conv(g, g, 1, 1, c.n_vag // 2, t, w))
    add(vag, f"conv1x1,{MAPPED}", (g, t, w), (MAPPED, t, w), _conv(g, MAPPED, 1, 1, 1, t, w))
    t2, w2 = _half(t), _half(w)
    t4, w4 = _half(t2), _half(w2)
    add(vag, f"Maxpool,conv3x3,{TAIL},Maxpool", (MAPPED, t, w), (TAIL, t4, w4),
        _conv(MAPPED, TAIL, 3, 3, 1, t2, w2))

    add("Concat", "concat(1),Dropout(0.5)", (TAIL, t4, w4), (2 * TAIL, t4, w4), (0, 0), streams=1)
    t8, w8 = _half(t4), _half(w4)
    add("Convs", f"conv3x3,{FUSED},Maxpool,ReLU,Dropout(0.5)", (2 * TAIL, t4, w4), (FUSED, t8, w8),
        _conv(2 * TAIL, FUSED, 3, 3, 1, t4, w4), streams=1)
    t16, w16 = _half(t8), _half(w8)
    add("Convs", f"conv3x3,{TOP},Maxpool,ReLU", (FUSED, t8, w8), (TOP, t16, w16),
        _conv(FUSED, TOP, 3, 3, 1, t8, w8), streams=1)
    add("Mean", "mean(2)", (TOP, t16, w16), (TOP, 1, w16), (0, 0), streams=1)
    add("Maxout", "maxout", (TOP, 1, w16, persons), (TOP, 1, w16), (0, 0), streams=1, per_person=False)
    flat = TOP * w16
    add("FC", f"Flatten,Dropout(0.5),{flat}x{c.classes}fc", (TOP, 1, w16), (c.classes,),
        (flat * c.classes + c.classes, flat * c.classes), streams=1, per_person=False)
    return ProfileReport(rows, persons)


def count_params(config=None):
    return profile(config, persons=1).total_params


def count_macs(config=None, persons=1):
    return profile(config, persons).total_macs


_HEADER = ["module", "layer", "input", "output", "params", "macs", "params_m", "gflops"]


def _shape(s):
    return "x".join(str(d) for d in s)


def render_report(report, fmt="text"):
    """Render rows as an aligned text table or CSV (stable column order)."""
    body = [
        [r.module, r.layer, _shape(r.input_shape), _shape(r.output_shape), str(r.params), str(r.macs),
         f"{round3(r.params / 1e6):.3f}", f"{round3(r.macs / 1e9):.3f}"]
        for r in report.rows
    ]
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(_HEADER)
        w.writerows(body)
        return buf.getvalue()
    if fmt != "text":
        raise ValueError(f"unknown format {fmt!r}")
    table = [_HEADER] + body
    if report.rows:
        table.append(["Total", "", "", "", str(report.total_params), str(report.total_macs),
                      f"{round3(report.total_params / 1e6):.3f}", f"{round3(report.total_macs / 1e9):.3f}"])
    widths = [max(len(row[i]) for row in table) for i in range(len(_HEADER))]
    lines = ["  ".join(cell.ljust(wd) for cell, wd in zip(row, widths)).rstrip() for row in table]
    return "\n".join(lines) + "\n"


def parse_report_csv(text):
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        rec["params"] = int(rec["params"])
        rec["macs"] = int(rec["macs"])
        rows.append(rec)
    return rows
