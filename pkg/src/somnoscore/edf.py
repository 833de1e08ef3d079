"""Bit-exact EDF/EDF+ reading and writing.

Layout: a 256-byte fixed header, 256 bytes of header per signal
(transposed field-by-field: all labels, then all transducers, ...),
then data records of 16-bit little-endian two's-complement samples.
Digital values map to physical units affinely:

    physical = physical_min + (digital - digital_min) * slope
    slope    = (physical_max - physical_min) / (digital_max - digital_min)

"EDF Annotations" signals are decoded as time-stamped annotation lists
(TALs: ``+onset[<21>duration]<20>text<20><0>``), never as waveforms;
the per-record timekeeping TAL (empty text) is dropped.

The writer is canonical: ASCII fields are left-justified and space
padded, numbers use the shortest decimal form, the reserved field is
"EDF+C" exactly when annotations are present, and annotation TALs are
packed into the data record containing their onset. A file produced by
:func:`write_edf` therefore round-trips byte-identically through
:func:`parse_edf`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime

import numpy as np

from .errors import BadScaling, MalformedHeader, RangeOverflow, TruncatedFile

ANNOTATION_LABEL = "EDF Annotations"
_TAL_DURATION = b"\x15"
_TAL_SEP = b"\x14"
_TAL_END = b"\x00"


@dataclass
class EdfHeader:
    version: str = "0"
    patient_id: str = "X"
    recording_id: str = "X"
    start_datetime: datetime = datetime(2000, 1, 1)
    header_bytes: int = 0
    reserved: str = ""
    num_data_records: int = 0
    record_duration_s: float = 1.0
    num_signals: int = 0


@dataclass
class SignalHeader:
    label: str
    transducer: str = ""
    physical_dim: str = "uV"
    physical_min: float = -1000.0
    physical_max: float = 1000.0
    digital_min: int = -32768
    digital_max: int = 32767
    prefiltering: str = ""
    samples_per_record: int = 1

    @property
    def slope(self) -> float:
        return (self.physical_max - self.physical_min) / (self.digital_max - self.digital_min)


@dataclass
class EdfAnnotation:
    onset_s: float
    duration_s: float | None
    text: str


@dataclass
class Channel:
    header: SignalHeader
    samples: np.ndarray  # physical units, float64
    sampling_rate_hz: float


@dataclass
class Recording:
    header: EdfHeader
    channels: list[Channel] = field(default_factory=list)
    annotations: list[EdfAnnotation] = field(default_factory=list)
    subject: "object | None" = None  # SubjectMeta, attached at ingest

    def duration_s(self) -> float:
        return self.header.num_data_records * self.header.record_duration_s

    def channel_labels(self) -> list[str]:
        return [c.header.label for c in self.channels]


# ---------------------------------------------------------------------------
# parsing


def _ascii(raw: bytes, what: str) -> str:
    try:
        return raw.decode("ascii").strip()
    except UnicodeDecodeError as exc:
        raise MalformedHeader(f"non-ASCII bytes in {what}") from exc


def _int_field(raw: bytes, what: str) -> int:
    text = _ascii(raw, what)
    try:
        return int(text)
    except ValueError as exc:
        raise MalformedHeader(f"non-numeric {what}: {text!r}") from exc


def _float_field(raw: bytes, what: str) -> float:
    text = _ascii(raw, what)
    try:
        return float(text)
    except ValueError as exc:
        raise MalformedHeader(f"non-numeric {what}: {text!r}") from exc


def _parse_start(date_raw: bytes, time_raw: bytes) -> datetime:
    date_s = _ascii(date_raw, "startdate")
    time_s = _ascii(time_raw, "starttime")
    try:
        day, month, yy = (int(p) for p in date_s.split("."))
        hour, minute, second = (int(p) for p in time_s.split("."))
    except ValueError as exc:
        raise MalformedHeader(f"bad start date/time {date_s!r} {time_s!r}") from exc
    year = 2000 + yy if yy < 85 else 1900 + yy
    try:
        return datetime(year, month, day, hour, minute, second)
    except ValueError as exc:
        raise MalformedHeader(f"impossible start date/time {date_s!r} {time_s!r}") from exc


def parse_edf(data: bytes) -> Recording:
    """Decode an EDF/EDF+ byte stream into a :class:`Recording`."""
    if len(data) < 256:
        raise TruncatedFile(f"stream has {len(data)} bytes, EDF header needs 256")

    header = EdfHeader(
        version=_ascii(data[0:8], "version"),
        patient_id=_ascii(data[8:88], "patient id"),
        recording_id=_ascii(data[88:168], "recording id"),
        start_datetime=_parse_start(data[168:176], data[176:184]),
        header_bytes=_int_field(data[184:192], "header bytes"),
        reserved=_ascii(data[192:236], "reserved"),
        num_data_records=_int_field(data[236:244], "data record count"),
        record_duration_s=_float_field(data[244:252], "record duration"),
        num_signals=_int_field(data[252:256], "signal count"),
    )
    ns = header.num_signals
    if ns < 1:
        raise MalformedHeader(f"signal count {ns} out of range")
    if header.header_bytes != 256 + 256 * ns:
        raise MalformedHeader(
            f"header claims {header.header_bytes} header bytes for {ns} signals"
        )
    if header.record_duration_s <= 0:
        raise MalformedHeader(f"record duration {header.record_duration_s} not positive")
    if len(data) < header.header_bytes:
        raise TruncatedFile("stream ends inside the signal header block")

    def fields(offset: int, width: int) -> list[bytes]:
        base = 256 + offset * ns
        return [data[base + i * width: base + (i + 1) * width] for i in range(ns)]

    labels = fields(0, 16)
    transducers = fields(16, 80)
    dims = fields(96, 8)
    phys_mins = fields(104, 8)
    phys_maxs = fields(112, 8)
    dig_mins = fields(120, 8)
    dig_maxs = fields(128, 8)
    prefilters = fields(136, 80)
    sprs = fields(216, 8)

    signals = []
    for i in range(ns):
        sig = SignalHeader(
            label=_ascii(labels[i], f"signal {i} label"),
            transducer=_ascii(transducers[i], f"signal {i} transducer"),
            physical_dim=_ascii(dims[i], f"signal {i} dimension"),
            physical_min=_float_field(phys_mins[i], f"signal {i} physical min"),
            physical_max=_float_field(phys_maxs[i], f"signal {i} physical max"),
            digital_min=_int_field(dig_mins[i], f"signal {i} digital min"),
            digital_max=_int_field(dig_maxs[i], f"signal {i} digital max"),
            prefiltering=_ascii(prefilters[i], f"signal {i} prefiltering"),
            samples_per_record=_int_field(sprs[i], f"signal {i} samples/record"),
        )
        if sig.samples_per_record < 1:
            raise MalformedHeader(f"signal {i} has {sig.samples_per_record} samples/record")
        signals.append(sig)

    total_spr = sum(s.samples_per_record for s in signals)
    record_bytes = 2 * total_spr
    body = data[header.header_bytes:]
    nrec = header.num_data_records
    if nrec == -1:
        # the EDF "unknown" sentinel: repair from the actual byte count
        nrec, remainder = divmod(len(body), record_bytes)
        if remainder:
            raise TruncatedFile(f"{remainder} trailing bytes beyond record boundary")
        header.num_data_records = nrec
    elif nrec < 0:
        raise MalformedHeader(f"data record count {nrec} out of range")
    elif len(body) != nrec * record_bytes:
        raise TruncatedFile(
            f"header declares {nrec} records ({nrec * record_bytes} bytes), "
            f"stream carries {len(body)}"
        )

    raw = np.frombuffer(body, dtype="<i2").reshape(nrec, total_spr) if nrec else \
        np.zeros((0, total_spr), dtype="<i2")

    channels: list[Channel] = []
    annotations: list[EdfAnnotation] = []
    offset = 0
    for sig in signals:
        spr = sig.samples_per_record
        if sig.label == ANNOTATION_LABEL:
            for r in range(nrec):
                start = r * record_bytes + 2 * offset
                annotations.extend(_parse_tals(body[start:start + 2 * spr]))
        else:
            if sig.digital_max == sig.digital_min:
                raise BadScaling(f"signal {sig.label!r}: digital_max == digital_min")
            if sig.physical_max == sig.physical_min:
                raise BadScaling(f"signal {sig.label!r}: physical_max == physical_min")
            digital = raw[:, offset:offset + spr].astype(np.float64).reshape(-1)
            physical = sig.physical_min + (digital - sig.digital_min) * sig.slope
            channels.append(Channel(
                header=sig,
                samples=physical,
                sampling_rate_hz=spr / header.record_duration_s,
            ))
        offset += spr

    return Recording(header=header, channels=channels, annotations=annotations)


def _parse_tals(block: bytes) -> list[EdfAnnotation]:
    out: list[EdfAnnotation] = []
    for tal in block.split(_TAL_END):
        if not tal:
            continue
        head, *texts = tal.split(_TAL_SEP)
        if _TAL_DURATION in head:
            onset_b, dur_b = head.split(_TAL_DURATION, 1)
        else:
            onset_b, dur_b = head, None
        try:
            onset = float(onset_b)
            duration = float(dur_b) if dur_b else None
        except ValueError:
            continue  # tolerate garbage between TALs
        for text in texts:
            if text:
                out.append(EdfAnnotation(onset, duration, text.decode("utf-8", "replace")))
    return out


def read_edf(path) -> Recording:
    from pathlib import Path
    return parse_edf(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# writing


def _fit(text: str, width: int, what: str) -> bytes:
    try:
        raw = text.encode("ascii")
    except UnicodeEncodeError as exc:
        raise MalformedHeader(f"non-ASCII {what}: {text!r}") from exc
    if len(raw) > width:
        raise MalformedHeader(f"{what} {text!r} exceeds {width} bytes")
    return raw.ljust(width)


def _fmt_number(x: float, width: int = 8) -> str:
    """Shortest decimal form of ``x`` that fits the field width."""
    if float(x) == int(x) and abs(x) < 10 ** width:
        return str(int(x))
    s = repr(float(x))
    if len(s) <= width:
        return s
    for precision in range(width - 1, 0, -1):
        s = f"{x:.{precision}g}"
        if len(s) <= width and "e" not in s:
            return s
    raise MalformedHeader(f"cannot encode {x} in {width} bytes")


def _fmt_onset(x: float) -> bytes:
    sign = b"" if x < 0 else b"+"
    return sign + _fmt_number(x, 14).encode("ascii")


def write_edf(rec: Recording) -> bytes:
    """Encode a :class:`Recording` as canonical EDF(+) bytes.

    Physical samples must lie within each channel's declared physical
    range; quantization to the digital range loses at most one step.
    """
    duration = rec.header.record_duration_s
    if duration <= 0:
        raise MalformedHeader(f"record duration {duration} not positive")

    nrec = None
    digital_columns: list[np.ndarray] = []
    for ch in rec.channels:
        sig = ch.header
        if sig.digital_max == sig.digital_min:
            raise BadScaling(f"signal {sig.label!r}: digital_max == digital_min")
        if sig.physical_max == sig.physical_min:
            raise BadScaling(f"signal {sig.label!r}: physical_max == physical_min")
        if not (-32768 <= sig.digital_min <= 32767 and -32768 <= sig.digital_max <= 32767):
            raise MalformedHeader(f"signal {sig.label!r}: digital range outside int16")
        samples = np.asarray(ch.samples, dtype=np.float64)
        lo, hi = sorted((sig.physical_min, sig.physical_max))
        if samples.size and (samples.min() < lo or samples.max() > hi):
            raise RangeOverflow(
                f"signal {sig.label!r}: samples outside [{lo}, {hi}]"
            )
        n_per_rec = sig.samples_per_record
        if samples.size % n_per_rec:
            raise MalformedHeader(
                f"signal {sig.label!r}: {samples.size} samples not divisible by "
                f"{n_per_rec} samples/record"
            )
        this_nrec = samples.size // n_per_rec
        if nrec is None:
            nrec = this_nrec
        elif nrec != this_nrec:
            raise MalformedHeader("channels disagree on the number of data records")
        digital = np.rint((samples - sig.physical_min) / sig.slope).astype(np.int64)
        digital += sig.digital_min
        np.clip(digital, min(sig.digital_min, sig.digital_max),
                max(sig.digital_min, sig.digital_max), out=digital)
        digital_columns.append(digital.astype("<i2").reshape(this_nrec, n_per_rec))
    if nrec is None:
        nrec = max(1, len(_group_annotations(rec.annotations, duration, 1)))

    signals = [ch.header for ch in rec.channels]
    ann_blocks: list[bytes] | None = None
    if rec.annotations:
        groups = _group_annotations(rec.annotations, duration, nrec)
        ann_blocks = []
        for r in range(nrec):
            parts = [_fmt_onset(r * duration) + _TAL_SEP + _TAL_SEP + _TAL_END]
            for ann in groups.get(r, ()):
                tal = _fmt_onset(ann.onset_s)
                if ann.duration_s is not None:
                    tal += _TAL_DURATION + _fmt_number(ann.duration_s, 14).encode("ascii")
                tal += _TAL_SEP + ann.text.encode("utf-8") + _TAL_SEP + _TAL_END
                parts.append(tal)
            ann_blocks.append(b"".join(parts))
        ann_spr = (max(len(b) for b in ann_blocks) + 1) // 2
        signals = signals + [SignalHeader(
            label=ANNOTATION_LABEL, physical_dim="", physical_min=-1.0, physical_max=1.0,
            digital_min=-32768, digital_max=32767, samples_per_record=ann_spr,
        )]

    ns = len(signals)
    reserved = "EDF+C" if rec.annotations else ""
    start = rec.header.start_datetime
    fixed = b"".join([
        _fit(rec.header.version or "0", 8, "version"),
        _fit(rec.header.patient_id, 80, "patient id"),
        _fit(rec.header.recording_id, 80, "recording id"),
        _fit(start.strftime("%d.%m.") + f"{start.year % 100:02d}", 8, "startdate"),
        _fit(start.strftime("%H.%M.%S"), 8, "starttime"),
        _fit(str(256 + 256 * ns), 8, "header bytes"),
        _fit(reserved, 44, "reserved"),
        _fit(str(nrec), 8, "record count"),
        _fit(_fmt_number(duration), 8, "record duration"),
        _fit(str(ns), 4, "signal count"),
    ])

    def column(width: int, values) -> bytes:
        return b"".join(_fit(v, width, "signal header field") for v in values)

    sig_block = b"".join([
        column(16, (s.label for s in signals)),
        column(80, (s.transducer for s in signals)),
        column(8, (s.physical_dim for s in signals)),
        column(8, (_fmt_number(s.physical_min) for s in signals)),
        column(8, (_fmt_number(s.physical_max) for s in signals)),
        column(8, (str(s.digital_min) for s in signals)),
        column(8, (str(s.digital_max) for s in signals)),
        column(80, (s.prefiltering for s in signals)),
        column(8, (str(s.samples_per_record) for s in signals)),
        column(32, ("" for _ in signals)),
    ])

    records = []
    for r in range(nrec):
        for i, ch in enumerate(rec.channels):
            records.append(digital_columns[i][r].tobytes())
        if ann_blocks is not None:
            block = ann_blocks[r]
            records.append(block.ljust(2 * signals[-1].samples_per_record, _TAL_END))
    return fixed + sig_block + b"".join(records)


def _group_annotations(annotations, duration: float, nrec: int) -> dict[int, list]:
    groups: dict[int, list] = {}
    for ann in annotations:
        r = int(ann.onset_s // duration) if ann.onset_s >= 0 else 0
        groups.setdefault(min(r, max(nrec - 1, 0)), []).append(ann)
    return groups


def quantization_step(sig: SignalHeader) -> float:
    """Physical size of one digital step (the round-trip error bound)."""
    return abs(sig.slope)
