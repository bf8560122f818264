"""Waveform ingestion, synthetic data, windowing, and split planning.

Raw material is a 2 s, 4-channel, 44.1 kHz, 16-bit PCM record per gesture
(352,800 samples). The pipeline truncates each record to the energy-carrying
window, downsamples by keeping every d-th sample (no anti-aliasing filter,
by design: the conv front end learns on the raw decimated waveform), and
expands every record into d phase-shifted training samples.

WAV layout expected by `load_wav_sessions`:

    root/
      <subject>/
        session_01/ ... session_09/
          <label>_<nn>.wav        4-channel 16-bit PCM, one gesture each

with <label> one of Up/Down/Left/Right (case-insensitive).
"""

from __future__ import annotations

import json
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError, IngestionError

LABELS = ("Up", "Down", "Left", "Right")
SAMPLE_RATE = 44_100
RECORD_SECONDS = 2.0
N_CHANNELS = 4
PCM_FULL_SCALE = 32_768.0

# canonical preprocessing window: keep 0.25 s..1.25 s where gesture energy sits
WINDOW_START_S = 0.25
WINDOW_DUR_S = 1.0
DOWNSAMPLE = 10


# ======================================================================
# Core records
# ======================================================================


@dataclass(frozen=True)
class WaveformRecord:
    """One raw gesture recording: int16 samples, shape (channels, n)."""

    channels: np.ndarray
    sample_rate: int
    label: str
    subject_id: str
    session_id: int
    recording_id: int

    def __post_init__(self):
        ch = self.channels
        if ch.ndim != 2 or ch.shape[0] != N_CHANNELS:
            raise FormatError(f"expected ({N_CHANNELS}, n) channel array, got {ch.shape}")
        if ch.dtype != np.int16:
            raise FormatError(f"expected int16 samples, got {ch.dtype}")
        if self.label not in LABELS:
            raise DataError(f"unknown label {self.label!r}")

    @property
    def n_samples(self) -> int:
        return self.channels.shape[1]

    @property
    def key(self) -> tuple[str, int]:
        return (self.subject_id, self.session_id)


@dataclass(frozen=True)
class GestureSample:
    """One training/eval sample: float data in [-1, 1], shape (length, channels)."""

    data: np.ndarray
    label: int
    phase: int
    provenance: tuple[str, int, int]  # (subject, session, recording)


@dataclass(frozen=True)
class SplitPlan:
    """Session-level train/test assignment for one evaluation protocol.

    Protocols: "ps" trains and tests within the target subject (6/3 session
    split), "loso" holds the whole target subject out, "aos" is loso plus one
    adaptation session of the target. Validation is carved later, at recording
    level, from the training sessions.
    """

    method: str
    target: str
    train_keys: frozenset
    test_keys: frozenset
    val_fraction: float
    seed: int

    def to_json(self) -> str:
        payload = {
            "method": self.method,
            "target": self.target,
            "train_keys": sorted([list(k) for k in self.train_keys]),
            "test_keys": sorted([list(k) for k in self.test_keys]),
            "val_fraction": self.val_fraction,
            "seed": self.seed,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "SplitPlan":
        p = json.loads(text)
        return SplitPlan(
            method=p["method"],
            target=p["target"],
            train_keys=frozenset((s, int(i)) for s, i in p["train_keys"]),
            test_keys=frozenset((s, int(i)) for s, i in p["test_keys"]),
            val_fraction=float(p["val_fraction"]),
            seed=int(p["seed"]),
        )


@dataclass(frozen=True)
class SplitData:
    """Materialized samples for one split plan."""

    train: list
    val: list
    test: list


# ======================================================================
# Synthetic dataset
# ======================================================================

# per-class channel delay pattern (s): mimics a swipe traversing the pickups
_CLASS_DELAYS = (
    (0.000, 0.012, 0.024, 0.036),
    (0.036, 0.024, 0.012, 0.000),
    (0.000, 0.024, 0.012, 0.036),
    (0.036, 0.012, 0.024, 0.000),
)
# per-class channel energy pattern: a swipe excites the pickups unequally,
# and the four patterns are linearly independent in channel-energy space
_CLASS_GAINS = (
    (1.00, 0.80, 0.35, 0.20),
    (0.20, 0.35, 0.80, 1.00),
    (0.95, 0.25, 0.95, 0.25),
    (0.25, 0.95, 0.25, 0.95),
)
_NOISE_SIGMA = 8_192.0  # at separability 0 the record is pure noise at this level


def synth_dataset(seed, n_subjects=2, n_sessions=9, class_separability=1.0, *,
                  n_recordings=10, sample_rate=SAMPLE_RATE,
                  duration_s=RECORD_SECONDS):
    """Generate a synthetic dataset shaped exactly like the real recordings.

    Each class is a distinct chirp/burst family (distinct base frequency,
    channel-delay pattern, and per-channel energy pattern), with energy
    concentrated around 0.25 s..1.25 s. Signal amplitude scales with
    `class_separability` and the additive noise with (1 - class_separability),
    so separability 1.0 gives pure families (a centroid classifier is
    perfect) and 0.0 gives pure noise (chance level).
    """
    if not 0.0 <= class_separability <= 1.0:
        raise ConfigError("class_separability must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    n = round(duration_s * sample_rate)
    t = np.arange(n) / sample_rate
    records = []
    for si in range(n_subjects):
        subject = chr(ord("A") + si)
        # mild per-subject detune: individuality without breaking class geometry
        detune = 1.0 + 0.02 * rng.standard_normal()
        for session in range(1, n_sessions + 1):
            session_gain = 1.0 + 0.03 * rng.standard_normal()
            rec_id = 0
            for ki, label in enumerate(LABELS):
                f0 = (35.0 + 22.0 * ki) * detune
                f1 = f0 * (1.5 + 0.08 * ki)
                slope = (f1 - f0) / duration_s
                for _ in range(n_recordings):
                    amp = 12_000.0 * session_gain * (1.0 + 0.05 * rng.standard_normal())
                    chans = np.empty((N_CHANNELS, n), dtype=np.int16)
                    for c in range(N_CHANNELS):
                        tc = t - _CLASS_DELAYS[ki][c]
                        env = np.exp(-0.5 * ((tc - 0.75) / 0.18) ** 2)
                        fc = (f0 + 5.0 * c * detune)
                        sig = env * np.sin(2 * np.pi * (fc * tc + 0.5 * slope * tc * tc))
                        x = class_separability * amp * _CLASS_GAINS[ki][c] * sig
                        if class_separability < 1.0:
                            x = x + rng.normal(
                                0.0, _NOISE_SIGMA * (1.0 - class_separability), n)
                        chans[c] = np.clip(np.round(x), -32768, 32767).astype(np.int16)
                    records.append(WaveformRecord(
                        channels=chans, sample_rate=sample_rate, label=label,
                        subject_id=subject, session_id=session, recording_id=rec_id))
                    rec_id += 1
    return records


# ======================================================================
# Windowing / downsampling / augmentation
# ======================================================================


def truncate_window(rec, start_s=WINDOW_START_S, dur_s=WINDOW_DUR_S):
    """Cut [start_s, start_s + dur_s) out of a record."""
    start = round(start_s * rec.sample_rate)
    count = round(dur_s * rec.sample_rate)
    if start < 0 or count <= 0 or start + count > rec.n_samples:
        raise DataError(
            f"window [{start_s}, {start_s + dur_s}) s outside record of "
            f"{rec.n_samples} samples at {rec.sample_rate} Hz")
    return WaveformRecord(
        channels=rec.channels[:, start:start + count].copy(),
        sample_rate=rec.sample_rate, label=rec.label,
        subject_id=rec.subject_id, session_id=rec.session_id,
        recording_id=rec.recording_id)


def downsample(rec, d, phase=0):
    """Keep every d-th sample starting at `phase`; normalize to [-1, 1].

    Output length is floor(n / d) for every phase, so the d phase streams of
    one record partition its index range (up to a tail remainder < d).
    """
    if d < 1:
        raise ConfigError("downsample factor must be >= 1")
    if not 0 <= phase < d:
        raise ConfigError(f"phase {phase} outside [0, {d})")
    n_out = rec.n_samples // d
    if n_out == 0:
        raise DataError(f"record too short ({rec.n_samples}) for factor {d}")
    idx = phase + np.arange(n_out) * d
    data = rec.channels[:, idx].T.astype(np.float32) / PCM_FULL_SCALE
    return GestureSample(
        data=data, label=LABELS.index(rec.label), phase=phase,
        provenance=(rec.subject_id, rec.session_id, rec.recording_id))


def augment_session(records, d=DOWNSAMPLE):
    """Expand records into all d downsampling phases (40 -> 400 per session)."""
    samples = []
    for rec in records:
        for phase in range(d):
            samples.append(downsample(rec, d, phase))
    return samples


# ======================================================================
# Split planning
# ======================================================================


def make_split(records, method, target, val_fraction=0.2, seed=0):
    """Build a session-level SplitPlan for one of the three protocols."""
    method = method.lower()
    if method not in ("ps", "loso", "aos"):
        raise ConfigError(f"unknown split method {method!r}")
    if not 0.0 <= val_fraction < 1.0:
        raise ConfigError("val_fraction must lie in [0, 1)")
    subjects = sorted({r.subject_id for r in records})
    if target not in subjects:
        raise DataError(f"target subject {target!r} not in dataset {subjects}")
    sessions = {s: sorted({r.session_id for r in records if r.subject_id == s})
                for s in subjects}
    rng = np.random.default_rng(seed)

    if method == "ps":
        own = sessions[target]
        if len(own) < 2:
            raise DataError(f"subject {target!r} has too few sessions for ps split")
        n_train = round(len(own) * 2 / 3)  # 9 sessions -> 6 train / 3 test
        perm = rng.permutation(len(own))
        train = frozenset((target, own[i]) for i in perm[:n_train])
        test = frozenset((target, own[i]) for i in perm[n_train:])
    elif method == "loso":
        if len(subjects) < 2:
            raise DataError("loso split needs at least two subjects")
        train = frozenset((s, k) for s in subjects if s != target for k in sessions[s])
        test = frozenset((target, k) for k in sessions[target])
    else:  # aos: loso train plus one adaptation session of the target
        if len(subjects) < 2:
            raise DataError("aos split needs at least two subjects")
        own = sessions[target]
        adapt = own[int(rng.integers(len(own)))]
        train = frozenset(
            {(s, k) for s in subjects if s != target for k in sessions[s]}
            | {(target, adapt)})
        test = frozenset((target, k) for k in own if k != adapt)

    assert not (train & test), "train/test session overlap"
    return SplitPlan(method=method, target=target, train_keys=train,
                     test_keys=test, val_fraction=val_fraction, seed=seed)


def split_samples(records, plan, d=DOWNSAMPLE,
                  window=(WINDOW_START_S, WINDOW_DUR_S)):
    """Materialize a plan: truncate, augment with all phases, carve validation.

    Validation is carved from the training sessions at recording level
    (all d phases of a recording travel together), stratified by class,
    deterministically from the plan seed.
    """
    train_recs = [r for r in records if r.key in plan.train_keys]
    test_recs = [r for r in records if r.key in plan.test_keys]
    if not train_recs or not test_recs:
        raise DataError("split plan selects no training or no test records")

    rng = np.random.default_rng(plan.seed)
    val_ids = set()
    by_label = {}
    for r in sorted(train_recs, key=lambda r: (r.label, r.key, r.recording_id)):
        by_label.setdefault(r.label, []).append(r)
    for label in LABELS:
        group = by_label.get(label, [])
        n_val = int(round(plan.val_fraction * len(group)))
        if plan.val_fraction > 0 and len(group) > 1:
            n_val = max(n_val, 1)
        perm = rng.permutation(len(group))
        for i in perm[:n_val]:
            g = group[i]
            val_ids.add((g.subject_id, g.session_id, g.recording_id))

    def prep(recs):
        cut = [truncate_window(r, window[0], window[1]) for r in recs]
        return augment_session(cut, d)

    train = prep([r for r in train_recs
                  if (r.subject_id, r.session_id, r.recording_id) not in val_ids])
    val = prep([r for r in train_recs
                if (r.subject_id, r.session_id, r.recording_id) in val_ids])
    test = prep(test_recs)
    return SplitData(train=train, val=val, test=test)


def stack(samples):
    """Samples -> (X float32 (N, L, C), y int64 (N,))."""
    if not samples:
        raise DataError("no samples to stack")
    X = np.stack([s.data for s in samples]).astype(np.float32)
    y = np.array([s.label for s in samples], dtype=np.int64)
    return X, y


# ======================================================================
# WAV ingestion and emission
# ======================================================================


def load_wav_sessions(root):
    """Load the documented subject/session WAV layout into records."""
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"dataset root {root} is not a directory")
    records = []
    subjects = sorted(p for p in root.iterdir() if p.is_dir())
    for subj_dir in subjects:
        session_dirs = sorted(subj_dir.glob("session_*"))
        if not session_dirs:
            raise IngestionError(f"no session directories under {subj_dir}")
        for sess_dir in session_dirs:
            try:
                session_id = int(sess_dir.name.split("_", 1)[1])
            except (IndexError, ValueError):
                raise IngestionError(f"bad session directory name {sess_dir}")
            wavs = sorted(sess_dir.glob("*.wav"))
            if not wavs:
                raise IngestionError(f"no wav files in {sess_dir}")
            for path in wavs:
                label, rec_id = _parse_wav_name(path)
                records.append(_read_wav_record(
                    path, label, subj_dir.name, session_id, rec_id))
    if not records:
        raise IngestionError(f"no records found under {root}")
    return records


def _parse_wav_name(path):
    stem = path.stem
    parts = stem.split("_")
    if len(parts) < 2:
        raise IngestionError(f"cannot parse label/recording from {path}")
    label = parts[0].capitalize()
    if label not in LABELS:
        raise IngestionError(f"unknown gesture label in file name {path}")
    try:
        rec_id = int(parts[-1])
    except ValueError:
        raise IngestionError(f"cannot parse recording index from {path}")
    return label, rec_id


def _read_wav_record(path, label, subject, session_id, rec_id):
    with wave.open(str(path), "rb") as w:
        if w.getsampwidth() != 2:
            raise FormatError(f"{path}: expected 16-bit PCM, got "
                              f"{8 * w.getsampwidth()}-bit")
        if w.getnchannels() != N_CHANNELS:
            raise FormatError(f"{path}: expected {N_CHANNELS} channels, got "
                              f"{w.getnchannels()}")
        sr = w.getframerate()
        frames = w.readframes(w.getnframes())
    data = np.frombuffer(frames, dtype="<i2").reshape(-1, N_CHANNELS)
    return WaveformRecord(
        channels=np.ascontiguousarray(data.T), sample_rate=sr, label=label,
        subject_id=subject, session_id=session_id, recording_id=rec_id)


def write_wav_layout(records, root):
    """Write records back out in the documented layout (inverse of loading)."""
    root = Path(root)
    for rec in records:
        sess_dir = root / rec.subject_id / f"session_{rec.session_id:02d}"
        sess_dir.mkdir(parents=True, exist_ok=True)
        path = sess_dir / f"{rec.label.lower()}_{rec.recording_id:02d}.wav"
        inter = np.ascontiguousarray(rec.channels.T).astype("<i2")
        with wave.open(str(path), "wb") as w:
            w.setnchannels(N_CHANNELS)
            w.setsampwidth(2)
            w.setframerate(rec.sample_rate)
            w.writeframes(inter.tobytes())
    return root


# ======================================================================
# Compact on-disk dataset (npz + manifest)
# ======================================================================


def save_dataset(records, path):
    """Store records as one npz plus a human-readable JSON manifest."""
    path = Path(path)
    lengths = {r.n_samples for r in records}
    if len(lengths) != 1:
        raise DataError(f"records have mixed lengths {sorted(lengths)}")
    np.savez_compressed(
        path,
        channels=np.stack([r.channels for r in records]),
        sample_rate=np.array([r.sample_rate for r in records], dtype=np.int64),
        label=np.array([LABELS.index(r.label) for r in records], dtype=np.int64),
        subject=np.array([r.subject_id for r in records]),
        session=np.array([r.session_id for r in records], dtype=np.int64),
        recording=np.array([r.recording_id for r in records], dtype=np.int64),
    )
    manifest = {
        "records": len(records),
        "subjects": sorted({r.subject_id for r in records}),
        "sessions_per_subject": len({r.session_id for r in records}),
        "labels": list(LABELS),
        "samples_per_record": records[0].n_samples,
        "sample_rate": records[0].sample_rate,
    }
    manifest_path = path.with_suffix(".manifest.json")
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest_path


def load_dataset(path):
    """Inverse of save_dataset."""
    with np.load(path, allow_pickle=False) as z:
        records = []
        for i in range(z["channels"].shape[0]):
            records.append(WaveformRecord(
                channels=z["channels"][i],
                sample_rate=int(z["sample_rate"][i]),
                label=LABELS[int(z["label"][i])],
                subject_id=str(z["subject"][i]),
                session_id=int(z["session"][i]),
                recording_id=int(z["recording"][i])))
    return records
