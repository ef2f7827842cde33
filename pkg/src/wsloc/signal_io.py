"""Signal records and annotations: WFDB-style headers, format 212, MIT
annotation files and a plain CSV fallback.

Everything here works on bytes/text so it can be exercised without files;
``read_record`` / ``write_record`` are the thin filesystem wrappers.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_GAIN = 200.0

# MIT annotation codes that mark beats, with their usual mnemonics.
BEAT_CODES = {
    1: "N", 2: "L", 3: "R", 4: "a", 5: "V", 6: "F", 7: "J", 8: "A", 9: "S",
    10: "E", 11: "j", 12: "/", 13: "Q", 34: "e", 35: "n", 38: "f", 41: "r",
}
# Codes that annotate something other than a beat (rhythm, noise, notes...).
NON_BEAT_CODES = frozenset(
    {14, 15, 16, 17, 18, 19, 20, 21, 22, 23, 24, 25, 26, 27, 28, 29, 30, 31,
     32, 33, 36, 37, 39, 40}
)
SKIP, NUM, SUB, CHN, AUX = 59, 60, 61, 62, 63
RHYTHM_CODE = 28
UNKNOWN_BEAT = "other"

DEFAULT_RHYTHM_MAP = {"AFIB": "AF"}


class SignalFormatError(ValueError):
    """Raised for malformed or unsupported signal/annotation content."""


@dataclass
class SignalRecord:
    record_id: str
    sampling_rate: float
    samples: np.ndarray  # (n, c) raw ADC units
    gain: np.ndarray  # (c,) ADC units per mV
    baseline: np.ndarray  # (c,) ADC offset
    gain_defaulted: bool = False

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim == 1:
            self.samples = self.samples[:, None]
        if self.samples.shape[0] < 1:
            raise SignalFormatError("record must contain at least one sample")
        c = self.samples.shape[1]
        self.gain = np.broadcast_to(np.asarray(self.gain, dtype=float), (c,)).copy()
        self.baseline = np.broadcast_to(np.asarray(self.baseline, dtype=np.int64), (c,)).copy()
        if self.sampling_rate <= 0:
            raise SignalFormatError("sampling rate must be positive")
        if np.any(self.gain <= 0):
            raise SignalFormatError("gain must be positive")

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def channel_count(self) -> int:
        return self.samples.shape[1]

    def physical(self, channel: int | None = None) -> np.ndarray:
        """Samples in millivolts; one channel if given, else all (n, c)."""
        phys = (self.samples - self.baseline) / self.gain
        if channel is None:
            return phys
        return phys[:, channel]


@dataclass
class BeatAnnotation:
    samples: list[int] = field(default_factory=list)
    codes: list[str] = field(default_factory=list)
    unknown_count: int = 0

    def __len__(self):
        return len(self.samples)


@dataclass
class RhythmAnnotation:
    """Piecewise-constant rhythm labelling: (onset, code) change points."""

    onsets: list[int] = field(default_factory=list)
    codes: list[str] = field(default_factory=list)

    def validate(self, n: int) -> None:
        if not self.onsets:
            raise SignalFormatError("rhythm annotation is empty")
        if self.onsets[0] != 0:
            raise SignalFormatError("first rhythm onset must be 0")
        if any(b <= a for a, b in zip(self.onsets, self.onsets[1:])):
            raise SignalFormatError("rhythm onsets must be strictly increasing")
        if self.onsets[-1] >= n:
            raise SignalFormatError("rhythm onset beyond end of record")

    def anchored(self) -> "RhythmAnnotation":
        """Copy whose first rhythm is extended back to sample 0."""
        onsets = list(self.onsets)
        if onsets:
            onsets[0] = 0
        return RhythmAnnotation(onsets, list(self.codes))

    def per_sample(self, n: int) -> np.ndarray:
        """Label of every sample in [0, n) as an object array (first rhythm extended to 0)."""
        out = np.empty(n, dtype=object)
        bounds = [0] + list(self.onsets[1:]) + [n]
        for code, a, b in zip(self.codes, bounds, bounds[1:]):
            out[a:b] = code
        return out

    def change_points(self) -> list[int]:
        return list(self.onsets[1:])


@dataclass
class HeaderInfo:
    record_name: str
    nsig: int
    sampling_rate: float
    sample_count: int | None
    file_names: list[str]
    formats: list[int]
    gains: list[float]
    baselines: list[int]
    gain_defaulted: list[bool]
    descriptions: list[str]

    @property
    def unsupported_formats(self) -> list[int]:
        return sorted(set(f for f in self.formats if f != 212))


# ---------------------------------------------------------------------------
# header
# ---------------------------------------------------------------------------

_GAIN_RE = re.compile(r"^([-+0-9.eE]+)(?:\((-?\d+)\))?(?:/(\S+))?$")


def parse_header(text: str) -> HeaderInfo:
    """Parse a WFDB header ("name nsig fs nsamples" then one line per signal).

    Storage formats other than 212 are listed in ``unsupported_formats``;
    ``read_record`` refuses them.
    """
    lines = [
        (i + 1, line.strip())
        for i, line in enumerate(text.splitlines())
        if line.strip() and not line.lstrip().startswith("#")
    ]
    if not lines:
        raise SignalFormatError("empty header")
    lineno, first = lines[0]
    fields = first.split()
    if len(fields) < 2:
        raise SignalFormatError(f"line {lineno}: expected 'name nsig [fs [nsamples]]'")
    name = fields[0].split("/")[0]
    try:
        nsig = int(fields[1])
        fs = float(fields[2].split("/")[0]) if len(fields) > 2 else 250.0
        nsamp = int(fields[3]) if len(fields) > 3 else None
    except ValueError as exc:
        raise SignalFormatError(f"line {lineno}: {exc}") from None
    if nsig <= 0:
        raise SignalFormatError(f"line {lineno}: invalid header, nsig={nsig}")
    if len(lines) - 1 < nsig:
        raise SignalFormatError(
            f"line {lineno}: header declares {nsig} signals but has {len(lines) - 1} signal lines"
        )

    files, formats, gains, baselines, defaulted, descr = [], [], [], [], [], []
    for lineno, line in lines[1 : nsig + 1]:
        parts = line.split()
        if len(parts) < 2:
            raise SignalFormatError(f"line {lineno}: signal line needs 'file format'")
        files.append(parts[0])
        fmt_match = re.match(r"^(\d+)", parts[1])
        if not fmt_match:
            raise SignalFormatError(f"line {lineno}: bad format field {parts[1]!r}")
        formats.append(int(fmt_match.group(1)))
        gain, base, gain_missing = DEFAULT_GAIN, None, True
        if len(parts) > 2:
            m = _GAIN_RE.match(parts[2])
            if not m:
                raise SignalFormatError(f"line {lineno}: bad gain field {parts[2]!r}")
            g = float(m.group(1))
            if g > 0:
                gain, gain_missing = g, False
            if m.group(2) is not None:
                base = int(m.group(2))
        if base is None:
            # ADC zero (5th field) doubles as baseline when no explicit one is given.
            try:
                base = int(parts[4]) if len(parts) > 4 else 0
            except ValueError:
                raise SignalFormatError(f"line {lineno}: bad adc zero {parts[4]!r}") from None
        gains.append(gain)
        baselines.append(base)
        defaulted.append(gain_missing)
        descr.append(" ".join(parts[8:]) if len(parts) > 8 else "")

    return HeaderInfo(name, nsig, fs, nsamp, files, formats, gains, baselines, defaulted, descr)


def format_header(record: SignalRecord, file_name: str) -> str:
    lines = [f"{record.record_id} {record.channel_count} {record.sampling_rate:g} {record.n}"]
    for j in range(record.channel_count):
        lines.append(
            f"{file_name} 212 {record.gain[j]:g}({int(record.baseline[j])}) 12 0 "
            f"{int(record.samples[0, j])} 0 0 ch{j}"
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# format 212
# ---------------------------------------------------------------------------


def decode_format212(data: bytes, sample_count: int, c: int) -> np.ndarray:
    """Unpack 12-bit pairs (3 bytes per 2 samples), interleaved over ``c`` channels."""
    total = sample_count * c
    need = math.ceil(total * 1.5)
    buf = np.frombuffer(data, dtype=np.uint8)
    if buf.size < need:
        raise SignalFormatError(
            f"truncated format-212 stream: need {need} bytes, stream ends at byte offset {buf.size}"
        )
    pairs = (total + 1) // 2
    raw = np.zeros(pairs * 3, dtype=np.int32)
    raw[:need] = buf[:need]
    raw = raw.reshape(pairs, 3)
    b0, b1, b2 = raw[:, 0], raw[:, 1], raw[:, 2]
    out = np.empty(pairs * 2, dtype=np.int32)
    out[0::2] = b0 | ((b1 & 0x0F) << 8)
    out[1::2] = b2 | ((b1 & 0xF0) << 4)
    out[out > 2047] -= 4096
    return out[:total].reshape(sample_count, c)


def encode_format212(samples: np.ndarray) -> bytes:
    """Pack samples (any shape, row-major interleaving) into format 212.

    An odd sample total is padded with one trailing zero; the pad is implied by
    the sample count carried alongside the bytes.
    """
    flat = np.asarray(samples).reshape(-1).astype(np.int64)
    bad = np.flatnonzero((flat < -2048) | (flat > 2047))
    if bad.size:
        raise SignalFormatError(
            f"sample {int(flat[bad[0]])} at index {int(bad[0])} outside 12-bit range"
        )
    if flat.size % 2:
        flat = np.append(flat, 0)
    u = (flat & 0xFFF).reshape(-1, 2)
    s1, s2 = u[:, 0], u[:, 1]
    out = np.empty((u.shape[0], 3), dtype=np.uint8)
    out[:, 0] = s1 & 0xFF
    out[:, 1] = ((s1 >> 8) & 0x0F) | ((s2 >> 4) & 0xF0)
    out[:, 2] = s2 & 0xFF
    return out.tobytes()


def format212_pad(sample_count: int, c: int) -> int:
    return (sample_count * c) % 2


# ---------------------------------------------------------------------------
# MIT annotation files
# ---------------------------------------------------------------------------


def _rhythm_label(aux: str, rhythm_map: dict[str, str]) -> str:
    key = aux[1:].strip().rstrip("\x00")
    return rhythm_map.get(key, "Other")


def decode_annotations(
    data: bytes,
    code_table: dict[int, str] | None = None,
    rhythm_map: dict[str, str] | None = None,
) -> tuple[BeatAnnotation, RhythmAnnotation]:
    """Decode an MIT-format annotation stream into beats and rhythm changes.

    Rhythm changes come from AUX strings starting with ``(``, placed at the
    time of the annotation that carries them; adjacent identical labels
    merge. Onsets are kept as written, so the first may be after sample 0
    (see ``RhythmAnnotation.anchored``).
    """
    table = BEAT_CODES if code_table is None else code_table
    rmap = DEFAULT_RHYTHM_MAP if rhythm_map is None else rhythm_map
    buf = bytes(data)
    if len(buf) % 2:
        raise SignalFormatError("annotation stream has odd byte length")

    beats = BeatAnnotation()
    r_onsets: list[int] = []
    r_codes: list[str] = []
    t = 0
    pos = 0
    last_time = None  # time of the annotation that modifiers attach to
    terminated = False
    while pos + 2 <= len(buf):
        word = buf[pos] | (buf[pos + 1] << 8)
        code, dt = word >> 10, word & 0x3FF
        if word == 0:
            terminated = True
            break
        if code == SKIP:
            if pos + 6 > len(buf):
                raise SignalFormatError(f"truncated SKIP at byte offset {pos}")
            hi = buf[pos + 2] | (buf[pos + 3] << 8)
            lo = buf[pos + 4] | (buf[pos + 5] << 8)
            interval = (hi << 16) | lo
            if interval >= 1 << 31:
                interval -= 1 << 32
            t += interval
            pos += 6
            continue
        if code in (NUM, SUB, CHN):
            pos += 2
            continue
        if code == AUX:
            n_bytes = dt + (dt & 1)
            if pos + 2 + n_bytes > len(buf):
                raise SignalFormatError(f"truncated AUX at byte offset {pos}")
            text = buf[pos + 2 : pos + 2 + dt].decode("latin-1")
            pos += 2 + n_bytes
            if last_time is None:
                raise SignalFormatError(f"AUX without a preceding annotation at byte offset {pos}")
            if text.startswith("("):
                label = _rhythm_label(text, rmap)
                if r_onsets and r_onsets[-1] == last_time:
                    r_codes[-1] = label
                else:
                    r_onsets.append(last_time)
                    r_codes.append(label)
            continue

        t += dt
        pos += 2
        last_time = t
        if code in NON_BEAT_CODES or code == 0:
            continue
        label = table.get(code)
        if label is None:
            label = UNKNOWN_BEAT
            beats.unknown_count += 1
        if beats.samples and t <= beats.samples[-1]:
            raise SignalFormatError(
                f"beat at sample {t} not after previous beat {beats.samples[-1]} (byte offset {pos - 2})"
            )
        beats.samples.append(t)
        beats.codes.append(label)

    if not terminated:
        raise SignalFormatError("annotation stream is not terminated by a 0x0000 word")

    rhythm = RhythmAnnotation()
    for onset, label in zip(r_onsets, r_codes):
        if rhythm.codes and rhythm.codes[-1] == label:
            continue
        if rhythm.onsets and onset <= rhythm.onsets[-1]:
            raise SignalFormatError(f"rhythm change at {onset} not after {rhythm.onsets[-1]}")
        rhythm.onsets.append(onset)
        rhythm.codes.append(label)
    return beats, rhythm


def _word(code: int, value: int) -> bytes:
    w = (code << 10) | (value & 0x3FF)
    return bytes((w & 0xFF, w >> 8))


def encode_annotations(
    beats: BeatAnnotation | None = None,
    rhythm: RhythmAnnotation | None = None,
    code_table: dict[int, str] | None = None,
    rhythm_names: dict[str, str] | None = None,
) -> bytes:
    """Write beats and rhythm changes in MIT annotation layout.

    A rhythm change that coincides with a beat rides on that beat as AUX;
    otherwise it is written as a separate RHYTHM (code 28) annotation.
    """
    table = BEAT_CODES if code_table is None else code_table
    inverse = {v: k for k, v in table.items()}
    names = {"AF": "AFIB", "Other": "N"} if rhythm_names is None else rhythm_names
    events: list[tuple[int, int, str | None]] = []
    rhythm_at = {}
    if rhythm is not None:
        rhythm_at = dict(zip(rhythm.onsets, rhythm.codes))
    beat_pos = set()
    if beats is not None:
        for s, c in zip(beats.samples, beats.codes):
            code = inverse.get(c, 13)
            aux = None
            if s in rhythm_at:
                aux = "(" + names.get(rhythm_at[s], rhythm_at[s])
            events.append((s, code, aux))
            beat_pos.add(s)
    for s, label in rhythm_at.items():
        if s not in beat_pos:
            events.append((s, RHYTHM_CODE, "(" + names.get(label, label)))
    # rhythm-only annotations sort before a beat at the same sample
    events.sort(key=lambda e: (e[0], e[1] != RHYTHM_CODE))

    out = bytearray()
    t = 0
    for s, code, aux in events:
        dt = s - t
        if dt < 0:
            raise SignalFormatError("annotations must be time ordered")
        if dt > 1023:
            out += _word(SKIP, 0)
            out += bytes(((dt >> 16) & 0xFF, (dt >> 24) & 0xFF, dt & 0xFF, (dt >> 8) & 0xFF))
            dt = 0
        out += _word(code, dt)
        t = s
        if aux is not None:
            raw = aux.encode("latin-1")
            out += _word(AUX, len(raw))
            out += raw + (b"\x00" if len(raw) % 2 else b"")
    out += b"\x00\x00"
    return bytes(out)


# ---------------------------------------------------------------------------
# CSV fallback
# ---------------------------------------------------------------------------


def _csv_rows(text: str) -> list[tuple[int, list[str]]]:
    rows = []
    for i, line in enumerate(text.replace("\r\n", "\n").split("\n")):
        if line.strip():
            rows.append((i + 1, [f.strip() for f in line.split(",")]))
    return rows


def read_csv_record(
    text: str,
    record_id: str = "record",
    sampling_rate: float = 250.0,
    gain: float | list[float] = DEFAULT_GAIN,
    baseline: int | list[int] = 0,
    beats_text: str | None = None,
    rhythm_text: str | None = None,
):
    """Parse the CSV fallback: one row of comma-separated raw ADC integers per sample.

    Returns ``(record, beats, rhythm)``; the annotation entries are ``None``
    when their side text is not given.
    """
    rows = _csv_rows(text)
    if not rows:
        raise SignalFormatError("invalid record: empty CSV")
    width = len(rows[0][1])
    data = np.empty((len(rows), width), dtype=np.int64)
    for k, (lineno, fields) in enumerate(rows):
        if len(fields) != width:
            raise SignalFormatError(f"line {lineno}: expected {width} columns, got {len(fields)}")
        try:
            data[k] = [int(f) for f in fields]
        except ValueError:
            raise SignalFormatError(f"line {lineno}: non-integer sample") from None
    record = SignalRecord(record_id, sampling_rate, data, gain, baseline)

    beats = rhythm = None
    if beats_text is not None:
        beats = BeatAnnotation()
        for lineno, fields in _csv_rows(beats_text):
            if len(fields) != 2:
                raise SignalFormatError(f"beats line {lineno}: expected 'sample,code'")
            s = int(fields[0])
            if beats.samples and s <= beats.samples[-1]:
                raise SignalFormatError(f"beats line {lineno}: samples must increase")
            beats.samples.append(s)
            beats.codes.append(fields[1])
    if rhythm_text is not None:
        rhythm = RhythmAnnotation()
        for lineno, fields in _csv_rows(rhythm_text):
            if len(fields) != 2:
                raise SignalFormatError(f"rhythm line {lineno}: expected 'sample,code'")
            rhythm.onsets.append(int(fields[0]))
            rhythm.codes.append(fields[1])
        rhythm.anchored().validate(record.n)
    return record, beats, rhythm


def format_csv_record(record: SignalRecord) -> str:
    return "".join(",".join(str(int(v)) for v in row) + "\n" for row in record.samples)


def format_events_csv(samples, codes) -> str:
    return "".join(f"{int(s)},{c}\n" for s, c in zip(samples, codes))


# ---------------------------------------------------------------------------
# filesystem wrappers
# ---------------------------------------------------------------------------


def read_record(path, annotator: str | None = "atr", sampling_rate: float = 250.0):
    """Read a record from disk: ``<name>.hea`` (WFDB) or ``<name>.csv``.

    ``path`` may include or omit the extension. For WFDB, annotations come
    from ``<name>.<annotator>``; for CSV from ``<name>.beats.csv`` and
    ``<name>.rhythm.csv`` side files, plus ``<name>.meta`` (key=value) for
    rate and per-channel gain/baseline lists when present. Returns ``(record, beats, rhythm)``.
    """
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".hea", ".csv", ".dat") else path
    hea = stem.with_suffix(".hea")
    csv = stem.with_suffix(".csv")
    if hea.exists():
        info = parse_header(hea.read_text())
        if info.unsupported_formats:
            raise SignalFormatError(
                f"unsupported storage format(s) {info.unsupported_formats}; only 212 is implemented"
            )
        groups: dict[str, list[int]] = {}
        for j, fname in enumerate(info.file_names):
            groups.setdefault(fname, []).append(j)
        nsamp = info.sample_count
        columns = [None] * info.nsig
        for fname, idx in groups.items():
            raw = (hea.parent / fname).read_bytes()
            count = nsamp if nsamp is not None else int(len(raw) // (1.5 * len(idx)))
            block = decode_format212(raw, count, len(idx))
            for k, j in enumerate(idx):
                columns[j] = block[:, k]
        record = SignalRecord(
            info.record_name, info.sampling_rate, np.stack(columns, axis=1),
            info.gains, info.baselines, any(info.gain_defaulted),
        )
        beats = rhythm = None
        if annotator:
            ann = stem.with_suffix("." + annotator)
            if ann.exists():
                beats, rhythm = decode_annotations(ann.read_bytes())
                if not rhythm.onsets:
                    rhythm = None
        return record, beats, rhythm
    if csv.exists():
        meta = {}
        meta_path = stem.with_suffix(".meta")
        if meta_path.exists():
            for line in meta_path.read_text().splitlines():
                if "=" in line:
                    k, v = line.split("=", 1)
                    meta[k.strip()] = v.strip()
        beats_path = Path(str(stem) + ".beats.csv")
        rhythm_path = Path(str(stem) + ".rhythm.csv")
        return read_csv_record(
            csv.read_text(),
            record_id=stem.name,
            sampling_rate=float(meta.get("rate", sampling_rate)),
            gain=[float(g) for g in meta.get("gain", str(DEFAULT_GAIN)).split(",")],
            baseline=[int(b) for b in meta.get("baseline", "0").split(",")],
            beats_text=beats_path.read_text() if beats_path.exists() else None,
            rhythm_text=rhythm_path.read_text() if rhythm_path.exists() else None,
        )
    raise FileNotFoundError(f"no record found at {stem} (.hea or .csv)")


def write_record(
    directory,
    record: SignalRecord,
    beats: BeatAnnotation | None = None,
    rhythm: RhythmAnnotation | None = None,
    fmt: str = "212",
) -> Path:
    """Write a record (and annotations) as WFDB 212 or CSV; returns the stem path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = directory / record.record_id
    if fmt == "212":
        dat = record.record_id + ".dat"
        (directory / dat).write_bytes(encode_format212(record.samples))
        hea_text = format_header(record, dat)
        if format212_pad(record.n, record.channel_count):
            hea_text += "# pad 1\n"
        stem.with_suffix(".hea").write_text(hea_text)
        if beats is not None or rhythm is not None:
            stem.with_suffix(".atr").write_bytes(encode_annotations(beats, rhythm))
    elif fmt == "csv":
        stem.with_suffix(".csv").write_text(format_csv_record(record))
        gains = ",".join(f"{g:g}" for g in record.gain)
        bases = ",".join(str(int(b)) for b in record.baseline)
        stem.with_suffix(".meta").write_text(
            f"rate={record.sampling_rate:g}\ngain={gains}\nbaseline={bases}\n"
        )
        if beats is not None:
            Path(str(stem) + ".beats.csv").write_text(format_events_csv(beats.samples, beats.codes))
        if rhythm is not None:
            Path(str(stem) + ".rhythm.csv").write_text(format_events_csv(rhythm.onsets, rhythm.codes))
    else:
        raise ValueError(f"unknown record format {fmt!r}")
    return stem


def list_records(path) -> list[Path]:
    """Record stems under a directory (or the single record at ``path``)."""
    path = Path(path)
    if path.is_dir():
        stems = {p.with_suffix("") for p in path.iterdir() if p.suffix in (".hea",)}
        stems |= {
            p.with_suffix("") for p in path.iterdir()
            if p.suffix == ".csv" and not p.name.endswith((".beats.csv", ".rhythm.csv"))
        }
        return sorted(stems)
    return [path.with_suffix("") if path.suffix else path]

