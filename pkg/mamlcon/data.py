#!/usr/bin/env python3
"""
Feature ingestion for the MAMLCon toolkit

- MFCC + delta + delta-delta extraction from single-word waveforms
- fixed-length padding
- the MCFA1 feature-archive container (text manifest + little-endian
  float64 blob; layout in docs/FORMATS.md)
- stem-disjoint archive building from a directory of word recordings
- a synthetic Gaussian-cluster task generator for desk-scale runs
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.fft import dct
from scipy.io import wavfile

from .error_handling import ArchiveError, ConfigurationError, ValidationError

logger = logging.getLogger(__name__)

ARCHIVE_MAGIC = "MCFA1"
ARCHIVE_VERSION = 1
BLOB_DTYPE = np.dtype("<f8")
LOG_FLOOR = 1e-10

PathLike = Union[str, Path]


# ---------------------------------------------------------------------------
# MFCC
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MfccConfig:
    sample_rate: int = 16000
    window: int = 400
    hop: int = 160
    fft_size: int = 512
    mel_filters: int = 40
    num_ceps: int = 13
    delta_window: int = 2
    target_frames: int = 101

    def __post_init__(self):
        if min(self.sample_rate, self.window, self.hop, self.fft_size, self.mel_filters,
               self.num_ceps, self.delta_window, self.target_frames) < 1:
            raise ConfigurationError("MFCC settings must all be positive")
        if self.window > self.fft_size:
            raise ConfigurationError(f"window {self.window} exceeds fft_size {self.fft_size}")
        if self.num_ceps > self.mel_filters:
            raise ConfigurationError(f"num_ceps {self.num_ceps} exceeds mel_filters {self.mel_filters}")

    @property
    def n_features(self) -> int:
        return 3 * self.num_ceps


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filter_edges(cfg: MfccConfig) -> np.ndarray:
    """mel_filters + 2 frequencies (Hz); filter m rises from edge m, peaks at m+1, falls to m+2."""
    nyquist = cfg.sample_rate / 2.0
    return mel_to_hz(np.linspace(0.0, float(hz_to_mel(nyquist)), cfg.mel_filters + 2))


def mel_filterbank(cfg: MfccConfig) -> np.ndarray:
    """Triangular filter weights [mel_filters, fft_size // 2 + 1] on the HTK mel scale."""
    edges = mel_filter_edges(cfg)
    bin_hz = np.arange(cfg.fft_size // 2 + 1) * cfg.sample_rate / cfg.fft_size
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_hz[None, :] - lower) / (center - lower)
    falling = (upper - bin_hz[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def frame_signal(waveform: np.ndarray, cfg: MfccConfig) -> np.ndarray:
    waveform = np.asarray(waveform, dtype=np.float64)
    if waveform.ndim != 1:
        raise ValidationError(f"waveform must be one-dimensional, got shape {waveform.shape}")
    if waveform.size < cfg.window:
        raise ValidationError(f"waveform has {waveform.size} samples, fewer than one {cfg.window}-sample window",
                              {"samples": int(waveform.size), "window": cfg.window})
    return sliding_window_view(waveform, cfg.window)[::cfg.hop]


def log_mel_energies(waveform: np.ndarray, cfg: MfccConfig) -> np.ndarray:
    """Log mel filterbank energies [frames, mel_filters] (floor 1e-10 before the log)."""
    frames = frame_signal(waveform, cfg) * np.hamming(cfg.window)[None, :]
    spectrum = np.fft.rfft(frames, n=cfg.fft_size, axis=1)
    power = (spectrum.real ** 2 + spectrum.imag ** 2) / cfg.fft_size
    energies = power @ mel_filterbank(cfg).T
    return np.log(np.maximum(energies, LOG_FLOOR))


def deltas(features: np.ndarray, window: int = 2) -> np.ndarray:
    """Regression deltas over +-window frames with edge replication."""
    features = np.asarray(features, dtype=np.float64)
    n_frames = features.shape[0]
    padded = np.pad(features, ((window, window), (0, 0)), mode="edge")
    denominator = 2.0 * sum(n * n for n in range(1, window + 1))
    result = np.zeros_like(features)
    for n in range(1, window + 1):
        result = result + n * (padded[window + n:window + n + n_frames] - padded[window - n:window - n + n_frames])
    return result / denominator


def mfcc(waveform: np.ndarray, cfg: Optional[MfccConfig] = None) -> np.ndarray:
    """
    MFCCs with delta and delta-delta features.

    Returns:
        [1 + (len - window) // hop, 3 * num_ceps]
    """
    cfg = cfg or MfccConfig()
    cepstra = dct(log_mel_energies(waveform, cfg), type=2, norm="ortho", axis=1)[:, :cfg.num_ceps]
    first = deltas(cepstra, cfg.delta_window)
    second = deltas(first, cfg.delta_window)
    return np.hstack([cepstra, first, second])


def pad_or_truncate(features: np.ndarray, target_frames: int) -> np.ndarray:
    """Zero-pad trailing frames or drop them so the result has target_frames rows."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 1:
        raise ValidationError(f"features must be [frames >= 1, D], got {features.shape}")
    n_frames = features.shape[0]
    if n_frames >= target_frames:
        return features[:target_frames].copy()
    return np.vstack([features, np.zeros((target_frames - n_frames, features.shape[1]))])


def read_wav(path: PathLike, expected_rate: Optional[int] = None) -> np.ndarray:
    """Read 16-bit PCM mono WAV samples scaled to [-1, 1)."""
    rate, samples = wavfile.read(str(path))
    if samples.dtype != np.int16:
        raise ValidationError(f"{path}: expected 16-bit PCM, got {samples.dtype}", {"path": str(path)})
    if samples.ndim != 1:
        raise ValidationError(f"{path}: expected mono audio, got {samples.shape[1]} channels", {"path": str(path)})
    if expected_rate is not None and rate != expected_rate:
        raise ValidationError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz",
                              {"path": str(path), "rate": int(rate)})
    return samples.astype(np.float64) / 32768.0


# ---------------------------------------------------------------------------
# Feature archive
# ---------------------------------------------------------------------------

@dataclass
class ArchiveRecord:
    record_id: str
    class_id: int
    features: np.ndarray
    offset: int = 0

    @property
    def n_frames(self) -> int:
        return int(self.features.shape[0])


@dataclass
class FeatureArchive:
    n_coeffs: int
    records: List[ArchiveRecord]
    classes: Dict[int, str]
    target_frames: int = 0
    sections: Dict[str, Dict[str, str]] = field(default_factory=dict)

    def validate(self) -> None:
        seen = set()
        for record in self.records:
            if record.record_id in seen:
                raise ArchiveError(f"duplicate record id '{record.record_id}'", {"record": record.record_id})
            seen.add(record.record_id)
            if not record.record_id or any(ch in record.record_id for ch in "\t\r\n"):
                raise ArchiveError(f"record id {record.record_id!r} is empty or contains tabs/newlines",
                                   {"record": record.record_id})
            if record.class_id not in self.classes:
                raise ArchiveError(f"record '{record.record_id}' has class {record.class_id} missing from the class table",
                                   {"record": record.record_id, "class_id": record.class_id})
            if record.features.ndim != 2 or record.features.shape[1] != self.n_coeffs or record.n_frames < 1:
                raise ArchiveError(f"record '{record.record_id}' has shape {record.features.shape}, "
                                   f"expected [frames, {self.n_coeffs}]", {"record": record.record_id})
        for section in self.sections:
            if section in ("classes", "records") or not section.isidentifier():
                raise ArchiveError(f"invalid section name '{section}'")

    def by_class(self) -> Dict[int, List[ArchiveRecord]]:
        grouped: Dict[int, List[ArchiveRecord]] = {class_id: [] for class_id in sorted(self.classes)}
        for record in self.records:
            grouped[record.class_id].append(record)
        return grouped


def blob_path_for(manifest_path: PathLike) -> Path:
    path = Path(manifest_path)
    return path.with_name(path.name + ".bin")


def write_archive(archive: FeatureArchive, path: PathLike) -> Path:
    """Write manifest and blob; offsets are assigned in record order."""
    archive.validate()
    manifest_path = Path(path)
    blob_path = blob_path_for(manifest_path)

    offset = 0
    chunks = []
    offsets = []
    for record in archive.records:
        offsets.append(offset)
        data = np.ascontiguousarray(record.features, dtype=BLOB_DTYPE).tobytes()
        chunks.append(data)
        offset += len(data)

    lines = [
        ARCHIVE_MAGIC,
        f"version: {ARCHIVE_VERSION}",
        f"n_coeffs: {archive.n_coeffs}",
        f"frames: {archive.target_frames}",
        f"blob: {blob_path.name}",
        f"record_count: {len(archive.records)}",
        "",
        "[classes]",
    ]
    lines += [f"{class_id}\t{name}" for class_id, name in sorted(archive.classes.items())]
    for section, values in archive.sections.items():
        lines += ["", f"[{section}]"]
        lines += [f"{key}\t{value}" for key, value in values.items()]
    lines += ["", "[records]", "id\tclass_id\tn_frames\toffset"]
    lines += [f"{r.record_id}\t{r.class_id}\t{r.n_frames}\t{start}" for r, start in zip(archive.records, offsets)]

    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    blob_path.write_bytes(b"".join(chunks))
    with open(manifest_path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")
    logger.debug(f"Wrote archive {manifest_path} ({len(archive.records)} records, {offset} blob bytes)")
    return manifest_path


def _parse_manifest(path: Path) -> Tuple[Dict[str, str], Dict[str, List[str]]]:
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as e:
        raise ArchiveError(f"{path}: manifest is not UTF-8 text", {"path": str(path)}) from e
    lines = text.split("\n")
    if not lines or lines[0].strip() != ARCHIVE_MAGIC:
        raise ArchiveError(f"{path}: bad magic {lines[0][:16]!r}, expected '{ARCHIVE_MAGIC}'", {"path": str(path)})

    header: Dict[str, str] = {}
    sections: Dict[str, List[str]] = {}
    current: Optional[str] = None
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if line.startswith("[") and line.rstrip().endswith("]"):
            current = line.strip()[1:-1]
            if current in sections:
                raise ArchiveError(f"{path}:{line_no}: duplicate section [{current}]")
            sections[current] = []
        elif current is None:
            key, sep, value = line.partition(":")
            if not sep:
                raise ArchiveError(f"{path}:{line_no}: malformed header line {line!r}")
            header[key.strip()] = value.strip()
        else:
            sections[current].append(line)
    return header, sections


def read_archive(path: PathLike) -> FeatureArchive:
    """Read and validate a manifest and its blob."""
    manifest_path = Path(path)
    header, sections = _parse_manifest(manifest_path)

    try:
        version = int(header.get("version", "-1"))
        n_coeffs = int(header["n_coeffs"])
        target_frames = int(header.get("frames", "0"))
        record_count = int(header["record_count"])
        blob_name = header["blob"]
    except (KeyError, ValueError) as e:
        raise ArchiveError(f"{manifest_path}: incomplete or malformed header ({e})", {"path": str(manifest_path)}) from e
    if version != ARCHIVE_VERSION:
        raise ArchiveError(f"{manifest_path}: unsupported version {version}", {"version": version})
    if "classes" not in sections or "records" not in sections:
        raise ArchiveError(f"{manifest_path}: missing [classes] or [records] section")

    classes: Dict[int, str] = {}
    for line in sections.pop("classes"):
        class_id, _, name = line.partition("\t")
        try:
            classes[int(class_id)] = name
        except ValueError as e:
            raise ArchiveError(f"{manifest_path}: malformed class line {line!r}") from e

    table = sections.pop("records")
    if not table or table[0].split("\t") != ["id", "class_id", "n_frames", "offset"]:
        raise ArchiveError(f"{manifest_path}: malformed record table header")
    rows = [line.split("\t") for line in table[1:]]
    if len(rows) != record_count:
        raise ArchiveError(f"{manifest_path}: record_count {record_count} but {len(rows)} records listed",
                           {"record_count": record_count, "listed": len(rows)})

    blob_path = manifest_path.parent / blob_name
    if not blob_path.exists():
        raise ArchiveError(f"{manifest_path}: blob file {blob_path} not found", {"blob": str(blob_path)})
    blob = blob_path.read_bytes()

    records: List[ArchiveRecord] = []
    extents: List[Tuple[int, int, str]] = []
    seen = set()
    for row in rows:
        try:
            record_id, class_id, n_frames, offset = row[0], int(row[1]), int(row[2]), int(row[3])
        except (IndexError, ValueError) as e:
            raise ArchiveError(f"{manifest_path}: malformed record row {row!r}") from e
        if len(row) != 4:
            raise ArchiveError(f"{manifest_path}: malformed record row {row!r}", {"record": record_id})
        if record_id in seen:
            raise ArchiveError(f"duplicate record id '{record_id}'", {"record": record_id})
        seen.add(record_id)
        if class_id not in classes:
            raise ArchiveError(f"record '{record_id}' has class {class_id} missing from the class table",
                               {"record": record_id, "class_id": class_id})
        count = n_frames * n_coeffs
        end = offset + count * BLOB_DTYPE.itemsize
        if n_frames < 1 or offset < 0 or end > len(blob):
            raise ArchiveError(f"record '{record_id}' spans bytes [{offset}, {end}) outside blob of {len(blob)} bytes",
                               {"record": record_id, "offset": offset, "end": end, "blob_bytes": len(blob)})
        features = np.frombuffer(blob, dtype=BLOB_DTYPE, count=count, offset=offset)
        features = features.astype(np.float64).reshape(n_frames, n_coeffs)
        records.append(ArchiveRecord(record_id, class_id, features, offset))
        extents.append((offset, end, record_id))

    extents.sort()
    for (_, prev_end, prev_id), (start, _, record_id) in zip(extents, extents[1:]):
        if start < prev_end:
            raise ArchiveError(f"record '{record_id}' overlaps record '{prev_id}'",
                               {"record": record_id, "overlaps": prev_id})

    extra: Dict[str, Dict[str, str]] = {}
    for name, lines in sections.items():
        values = extra.setdefault(name, {})
        for line in lines:
            key, sep, value = line.partition("\t")
            if not sep:
                raise ArchiveError(f"{manifest_path}: malformed line {line!r} in section [{name}]")
            values[key] = value
    return FeatureArchive(n_coeffs=n_coeffs, records=records, classes=classes,
                          target_frames=target_frames, sections=extra)


# ---------------------------------------------------------------------------
# Building archives from recordings
# ---------------------------------------------------------------------------

def load_stem_map(path: PathLike) -> Dict[str, str]:
    """Parse `word<TAB>stem` lines."""
    stems: Dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise ValidationError(f"{path}:{line_no}: expected 'word<TAB>stem', got {line!r}",
                                      {"path": str(path), "line": line_no})
            stems[parts[0]] = parts[1]
    return stems


def split_stems(stems: List[str], test_fraction: float, seed: int) -> Tuple[List[str], List[str]]:
    if not 0.0 < test_fraction < 1.0:
        raise ConfigurationError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    if len(stems) < 2:
        raise ValidationError(f"need at least two stems to split, got {len(stems)}")
    order = np.random.default_rng(seed).permutation(len(stems))
    n_test = min(len(stems) - 1, max(1, int(round(len(stems) * test_fraction))))
    test = sorted(stems[i] for i in order[:n_test])
    train = sorted(stems[i] for i in order[n_test:])
    return train, test


def build_archives(wav_dir: PathLike, stem_map: Dict[str, str], out: PathLike,
                   cfg: Optional[MfccConfig] = None, test_fraction: float = 0.5,
                   seed: int = 0) -> Tuple[Path, Path]:
    """
    Extract features from `<wav_dir>/<word>/*.wav` and write stem-disjoint
    train and test archives next to `out`.

    Words sharing a stem form one class. Stems are split at random, so no
    stem contributes to both archives.

    Returns:
        (train manifest path, test manifest path)
    """
    cfg = cfg or MfccConfig()
    wav_root = Path(wav_dir)
    if not wav_root.is_dir():
        raise ConfigurationError(f"wav directory {wav_root} does not exist")

    by_stem: Dict[str, List[Tuple[str, np.ndarray]]] = {}
    for word_dir in sorted(p for p in wav_root.iterdir() if p.is_dir()):
        stem = stem_map.get(word_dir.name)
        if stem is None:
            logger.warning(f"Skipping '{word_dir.name}': not in stem map")
            continue
        for wav_path in sorted(word_dir.glob("*.wav")):
            features = mfcc(read_wav(wav_path, cfg.sample_rate), cfg)
            by_stem.setdefault(stem, []).append((f"{word_dir.name}/{wav_path.name}", features))

    train_stems, test_stems = split_stems(sorted(by_stem), test_fraction, seed)
    out_path = Path(out)
    base = out_path.name[:-len(out_path.suffix)] if out_path.suffix else out_path.name
    suffix = out_path.suffix or ".mcfa"
    paths = []
    for split, split_stem_list in (("train", train_stems), ("test", test_stems)):
        classes = {class_id: stem for class_id, stem in enumerate(split_stem_list)}
        records = [ArchiveRecord(record_id, class_id, features)
                   for class_id, stem in classes.items()
                   for record_id, features in by_stem[stem]]
        archive = FeatureArchive(n_coeffs=cfg.n_features, records=records, classes=classes,
                                 target_frames=cfg.target_frames)
        paths.append(write_archive(archive, out_path.with_name(f"{base}.{split}{suffix}")))
        logger.info(f"{split}: {len(classes)} stems, {len(records)} words -> {paths[-1]}")
    return paths[0], paths[1]


# ---------------------------------------------------------------------------
# Synthetic tasks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 30
    dim: int = 16
    examples_per_class: int = 40
    cluster_separation: float = 3.0
    seed: int = 0
    informative_dims: int = 0

    def __post_init__(self):
        if min(self.n_classes, self.dim, self.examples_per_class) < 1:
            raise ConfigurationError("synthetic n_classes, dim and examples_per_class must be positive")
        if not self.cluster_separation > 0:
            raise ConfigurationError(f"cluster_separation must be positive, got {self.cluster_separation}")
        if not 0 <= self.informative_dims <= self.dim:
            raise ConfigurationError(f"informative_dims must lie in [0, dim={self.dim}], got {self.informative_dims}")

    @property
    def mean_rank(self) -> int:
        return self.informative_dims or self.dim


def synth_means(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """
    Class means on the sphere of radius separation/sqrt(2).

    With informative_dims set, every mean lies in one shared random subspace
    of that dimension; the within-class noise stays isotropic in all dims.
    """
    if spec.mean_rank == spec.dim:
        directions = rng.standard_normal((spec.n_classes, spec.dim))
    else:
        basis, _ = np.linalg.qr(rng.standard_normal((spec.dim, spec.informative_dims)))
        directions = rng.standard_normal((spec.n_classes, spec.informative_dims)) @ basis.T
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return directions * (spec.cluster_separation / np.sqrt(2.0))


def synth_generate(spec: SyntheticSpec) -> FeatureArchive:
    """Gaussian clusters with unit within-class variance; one [1, dim] record per example."""
    rng = np.random.default_rng(spec.seed)
    means = synth_means(spec, rng)
    records = []
    for class_id in range(spec.n_classes):
        samples = means[class_id] + rng.standard_normal((spec.examples_per_class, spec.dim))
        records += [ArchiveRecord(f"c{class_id:04d}_e{index:04d}", class_id, sample[None, :])
                    for index, sample in enumerate(samples)]
    classes = {class_id: f"class_{class_id:04d}" for class_id in range(spec.n_classes)}
    return FeatureArchive(n_coeffs=spec.dim, records=records, classes=classes, target_frames=1,
                          sections={"synthetic": {"n_classes": str(spec.n_classes), "dim": str(spec.dim),
                                                  "examples_per_class": str(spec.examples_per_class),
                                                  "cluster_separation": repr(spec.cluster_separation),
                                                  "informative_dims": str(spec.informative_dims),
                                                  "seed": str(spec.seed)}})
