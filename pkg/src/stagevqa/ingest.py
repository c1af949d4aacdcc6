"""Dataset I/O and synthesis.

File layout of a dataset directory:

* ``annotations.jsonl``: one JSON object per line with fields
  ``{qid, clip_id, question, answers (5 strings), gt_answer_idx,
  gt_span_sec: [start, end], concepts: [{word_index, frame_idx,
  boxes: [[x1,y1,x2,y2], ...]}, ...]}``.
* ``features/<clip_id>.json``: ``{T, width, height, frames: [{objects:
  [{box, feat}], sub_tokens, sub_feats}]}``.
* ``features/<qid>.text.json``: ``{q_feats: [[...]], a_feats: [[[...]], x5]}``.

Each feature file may instead be a packed binary ``.stgf`` file: magic
``STGF``, u16 version, then the same content with every numeric array
serialized as little-endian ``u32 ndim, u32 shape..., float32 payload``
and every string length-prefixed with a u32.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

from .types import (
    BoundingBox,
    ConceptAnnotation,
    FrameRecord,
    ModelConfig,
    ObjectRegionFeature,
    QAExample,
    TimeSpan,
    validate_example,
)

FRAME_PERIOD_SEC = 2.0  # frames are sampled at 0.5 FPS

STGF_MAGIC = b"STGF"
STGF_VERSION = 1


class DatasetError(Exception):
    """A dataset file is missing, malformed, or fails validation."""


# ---------------------------------------------------------------------------
# timestamp / subtitle alignment
# ---------------------------------------------------------------------------


def seconds_to_frame_idx(t_sec: float, T: int) -> int:
    """Map a timestamp in seconds to the nearest 0.5 FPS frame index.

    Rounds to nearest (half away from zero) and clamps into [0, T-1].
    """
    if t_sec < 0:
        raise ValueError(f"negative timestamp: {t_sec}")
    if T < 1:
        raise ValueError(f"need at least one frame, got T={T}")
    idx = math.floor(t_sec / FRAME_PERIOD_SEC + 0.5)
    return min(max(idx, 0), T - 1)


def align_subtitles(
    frame_times: Sequence[float],
    sentences: Sequence[tuple[str, float, float]],
) -> list[list[int]]:
    """Assign to each frame the (up to) two sentences nearest in time.

    Distance is measured between the frame time and each sentence's temporal
    midpoint; ties prefer the earlier sentence. Returns, per frame, the
    indices of the chosen sentences in temporal order. Frames get an empty
    window when there are no sentences.
    """
    starts = [s[1] for s in sentences]
    if any(a > b for a, b in zip(starts, starts[1:])):
        raise ValueError("sentences must be sorted by start time")
    midpoints = [(s[1] + s[2]) / 2.0 for s in sentences]
    windows = []
    for ft in frame_times:
        ranked = sorted(
            range(len(sentences)), key=lambda j: (abs(midpoints[j] - ft), starts[j], j)
        )[:2]
        windows.append(sorted(ranked, key=lambda j: (starts[j], j)))
    return windows


# ---------------------------------------------------------------------------
# packed binary primitives (shared with checkpoint files)
# ---------------------------------------------------------------------------


def write_magic(f: BinaryIO, magic: bytes, version: int) -> None:
    f.write(magic)
    f.write(struct.pack("<H", version))


def read_magic(f: BinaryIO, magic: bytes, expected_version: int) -> None:
    got = f.read(len(magic))
    if got != magic:
        raise DatasetError(f"bad magic {got!r}, expected {magic!r}")
    raw = f.read(2)
    if len(raw) != 2:
        raise DatasetError("truncated file: missing version")
    (version,) = struct.unpack("<H", raw)
    if version != expected_version:
        raise DatasetError(f"unsupported version {version}, expected {expected_version}")


def _read_exact(f: BinaryIO, n: int) -> bytes:
    raw = f.read(n)
    if len(raw) != n:
        raise DatasetError(f"truncated file: wanted {n} bytes, got {len(raw)}")
    return raw


def write_u32(f: BinaryIO, v: int) -> None:
    f.write(struct.pack("<I", v))


def read_u32(f: BinaryIO) -> int:
    return struct.unpack("<I", _read_exact(f, 4))[0]


def write_array(f: BinaryIO, arr: np.ndarray) -> None:
    """Serialize an array as u32 ndim, u32 shape..., float32 row-major data."""
    a = np.asarray(arr, dtype="<f4")  # tobytes() below emits C order
    write_u32(f, a.ndim)
    for s in a.shape:
        write_u32(f, s)
    f.write(a.tobytes())


def read_array(f: BinaryIO) -> np.ndarray:
    ndim = read_u32(f)
    if ndim > 8:
        raise DatasetError(f"implausible array rank {ndim}")
    shape = tuple(read_u32(f) for _ in range(ndim))
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    raw = _read_exact(f, 4 * count)
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def write_str(f: BinaryIO, s: str) -> None:
    data = s.encode("utf-8")
    write_u32(f, len(data))
    f.write(data)


def read_str(f: BinaryIO) -> str:
    n = read_u32(f)
    return _read_exact(f, n).decode("utf-8")


# ---------------------------------------------------------------------------
# dataset writing
# ---------------------------------------------------------------------------


def _clip_payload(ex: QAExample, image_size: tuple[int, int]) -> dict:
    return {
        "T": ex.num_frames,
        "width": image_size[0],
        "height": image_size[1],
        "frames": [
            {
                "objects": [
                    {
                        "box": [float(v) for v in o.box.as_tuple()],
                        "feat": [float(v) for v in o.feature],
                    }
                    for o in fr.objects
                ],
                "sub_tokens": list(fr.subtitle_tokens),
                "sub_feats": [[float(v) for v in row] for row in fr.subtitle_features],
            }
            for fr in ex.frames
        ],
    }


def _write_clip_binary(path: Path, ex: QAExample, image_size: tuple[int, int]) -> None:
    with open(path, "wb") as f:
        write_magic(f, STGF_MAGIC, STGF_VERSION)
        write_u32(f, ex.num_frames)
        write_u32(f, image_size[0])
        write_u32(f, image_size[1])
        for fr in ex.frames:
            boxes = np.array([o.box.as_tuple() for o in fr.objects], dtype=np.float32)
            feats = (
                np.stack([o.feature for o in fr.objects])
                if fr.objects
                else np.zeros((0, 0), dtype=np.float32)
            )
            write_array(f, boxes.reshape(len(fr.objects), 4))
            write_array(f, feats)
            write_array(f, fr.subtitle_features)
            write_u32(f, len(fr.subtitle_tokens))
            for tok in fr.subtitle_tokens:
                write_str(f, tok)


def _read_clip_binary(path: Path) -> dict:
    with open(path, "rb") as f:
        read_magic(f, STGF_MAGIC, STGF_VERSION)
        T = read_u32(f)
        width = read_u32(f)
        height = read_u32(f)
        frames = []
        for _ in range(T):
            boxes = read_array(f)
            feats = read_array(f)
            sub_feats = read_array(f)
            n_tok = read_u32(f)
            tokens = [read_str(f) for _ in range(n_tok)]
            frames.append(
                {
                    "objects": [
                        {"box": boxes[r].tolist(), "feat": feats[r].tolist()}
                        for r in range(boxes.shape[0])
                    ],
                    "sub_tokens": tokens,
                    "sub_feats": sub_feats.tolist(),
                }
            )
    return {"T": T, "width": width, "height": height, "frames": frames}


def _write_text_binary(path: Path, ex: QAExample) -> None:
    with open(path, "wb") as f:
        write_magic(f, STGF_MAGIC, STGF_VERSION)
        write_array(f, ex.question_features)
        write_u32(f, len(ex.answer_features))
        for a in ex.answer_features:
            write_array(f, a)


def _read_text_binary(path: Path) -> dict:
    with open(path, "rb") as f:
        read_magic(f, STGF_MAGIC, STGF_VERSION)
        q = read_array(f)
        n = read_u32(f)
        a = [read_array(f).tolist() for _ in range(n)]
    return {"q_feats": q.tolist(), "a_feats": a}


def clip_id_for(qid: str) -> str:
    return f"clip_{qid}"


def write_dataset(
    examples: Sequence[QAExample],
    out_dir: str | Path,
    image_size: tuple[int, int] = (640, 360),
    binary: bool = False,
) -> Path:
    """Write examples as an annotation file plus per-clip/per-qid features.

    Returns the annotation file path. ``binary=True`` selects the packed
    ``.stgf`` layout for the feature files.
    """
    out = Path(out_dir)
    feat_dir = out / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    ann_path = out / "annotations.jsonl"
    ext = "stgf" if binary else "json"
    with open(ann_path, "w") as ann:
        for ex in examples:
            record = {
                "qid": ex.qid,
                "clip_id": clip_id_for(ex.qid),
                "question": " ".join(ex.question_tokens),
                "answers": [" ".join(toks) for toks in ex.answer_tokens],
                "gt_answer_idx": ex.gt_answer_idx,
                "gt_span_sec": [
                    ex.gt_span.start_idx * FRAME_PERIOD_SEC,
                    ex.gt_span.end_idx * FRAME_PERIOD_SEC,
                ],
                "concepts": [
                    {
                        "word_index": c.word_index,
                        "frame_idx": c.frame_idx,
                        "boxes": [[float(v) for v in b.as_tuple()] for b in c.gt_boxes],
                    }
                    for c in ex.concept_annotations
                ],
            }
            ann.write(json.dumps(record, sort_keys=True) + "\n")

            clip_path = feat_dir / f"{clip_id_for(ex.qid)}.{ext}"
            text_path = feat_dir / f"{ex.qid}.text.{ext}"
            if binary:
                _write_clip_binary(clip_path, ex, image_size)
                _write_text_binary(text_path, ex)
            else:
                with open(clip_path, "w") as f:
                    json.dump(_clip_payload(ex, image_size), f, sort_keys=True)
                with open(text_path, "w") as f:
                    json.dump(
                        {
                            "q_feats": [[float(v) for v in row] for row in ex.question_features],
                            "a_feats": [
                                [[float(v) for v in row] for row in a]
                                for a in ex.answer_features
                            ],
                        },
                        f,
                        sort_keys=True,
                    )
    return ann_path


# ---------------------------------------------------------------------------
# dataset loading
# ---------------------------------------------------------------------------


def _find_feature_file(feature_root: Path, stem: str, what: str) -> Path:
    for ext in ("json", "stgf"):
        p = feature_root / f"{stem}.{ext}"
        if p.exists():
            return p
    raise DatasetError(f"missing feature file for {what} '{stem}' under {feature_root}")


def _load_clip(feature_root: Path, clip_id: str) -> dict:
    path = _find_feature_file(feature_root, clip_id, "clip")
    if path.suffix == ".stgf":
        return _read_clip_binary(path)
    with open(path) as f:
        return json.load(f)


def _load_text(feature_root: Path, qid: str) -> dict:
    path = _find_feature_file(feature_root, f"{qid}.text", "qid")
    if path.suffix == ".stgf":
        return _read_text_binary(path)
    with open(path) as f:
        return json.load(f)


def _example_from_record(record: dict, feature_root: Path) -> tuple[QAExample, dict]:
    qid = record["qid"]
    clip = _load_clip(feature_root, record["clip_id"])
    text = _load_text(feature_root, qid)

    T = int(clip["T"])
    frames = []
    for t, fr in enumerate(clip["frames"]):
        objects = tuple(
            ObjectRegionFeature(box=BoundingBox(*o["box"]), feature=np.asarray(o["feat"]))
            for o in fr["objects"]
        )
        frames.append(
            FrameRecord(
                frame_idx=t,
                objects=objects,
                subtitle_tokens=tuple(fr["sub_tokens"]),
                subtitle_features=np.asarray(fr["sub_feats"], dtype=np.float32)
                if fr["sub_tokens"]
                else np.zeros((0, 0), dtype=np.float32),
            )
        )

    start_sec, end_sec = record["gt_span_sec"]
    s_idx = seconds_to_frame_idx(float(start_sec), T)
    e_idx = seconds_to_frame_idx(float(end_sec), T)
    if s_idx > e_idx:
        s_idx, e_idx = e_idx, s_idx

    concepts = tuple(
        ConceptAnnotation(
            word_index=int(c["word_index"]),
            frame_idx=int(c["frame_idx"]),
            gt_boxes=tuple(BoundingBox(*b) for b in c["boxes"]),
        )
        for c in record.get("concepts", ())
    )

    ex = QAExample(
        qid=qid,
        question_tokens=tuple(record["question"].split()),
        answer_tokens=tuple(tuple(a.split()) for a in record["answers"]),
        question_features=np.asarray(text["q_feats"], dtype=np.float32),
        answer_features=tuple(np.asarray(a, dtype=np.float32) for a in text["a_feats"]),
        gt_answer_idx=int(record["gt_answer_idx"]),
        gt_span=TimeSpan(s_idx, e_idx),
        frames=tuple(frames),
        concept_annotations=concepts,
    )
    meta = {
        "width": int(clip.get("width", 0)),
        "height": int(clip.get("height", 0)),
        "clip_id": record["clip_id"],
    }
    return ex, meta


def load_dataset_with_meta(
    annotation_path: str | Path,
    feature_root: str | Path,
    config: ModelConfig | None = None,
) -> tuple[list[QAExample], dict[str, dict]]:
    """Load and validate a dataset; also return per-qid clip metadata."""
    annotation_path = Path(annotation_path)
    feature_root = Path(feature_root)
    if not annotation_path.exists():
        raise DatasetError(f"annotation file not found: {annotation_path}")

    examples: list[QAExample] = []
    meta: dict[str, dict] = {}
    with open(annotation_path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(
                    f"{annotation_path.name} line {lineno}: invalid JSON ({e.msg})"
                ) from e
            try:
                ex, m = _example_from_record(record, feature_root)
            except DatasetError:
                raise
            except (KeyError, ValueError, TypeError) as e:
                qid = record.get("qid", "?") if isinstance(record, dict) else "?"
                raise DatasetError(
                    f"{annotation_path.name} line {lineno} (qid {qid}): {e}"
                ) from e
            violations = validate_example(ex, config)
            if violations:
                raise DatasetError(
                    f"example '{ex.qid}' rejected: " + "; ".join(violations)
                )
            examples.append(ex)
            meta[ex.qid] = m
    return examples, meta


def load_dataset(
    annotation_path: str | Path,
    feature_root: str | Path,
    config: ModelConfig | None = None,
) -> list[QAExample]:
    """Load every annotation line into a validated :class:`QAExample`."""
    return load_dataset_with_meta(annotation_path, feature_root, config)[0]


# ---------------------------------------------------------------------------
# synthetic data with a planted, linearly recoverable signal
# ---------------------------------------------------------------------------

_QUESTION_TYPES = ("what", "who", "where", "why", "how")
_CATEGORIES = (
    "laptop", "sword", "mug", "jacket", "phone",
    "book", "guitar", "glasses", "robe", "whiteboard",
)


def _check_range(name: str, rng: tuple[int, int], lo_min: int = 1) -> None:
    lo, hi = rng
    if lo < lo_min or hi < lo:
        raise ValueError(f"{name}: invalid range {rng}")


@dataclass(frozen=True)
class SynthSpec:
    """Shape of a generated dataset.

    The generator plants a recoverable correlation: each question draws a
    latent vector that is embedded (through fixed random maps) into the
    correct answer's first token, into one object per ground-truth-span
    frame, and into the subtitle sentence aligned with each of those frames.
    Wrong answers carry latents that appear nowhere in the video.
    """

    n_examples: int = 16
    frames_range: tuple[int, int] = (10, 14)
    span_length_range: tuple[int, int] = (3, 5)
    objects_range: tuple[int, int] = (3, 5)
    question_length_range: tuple[int, int] = (4, 7)
    answer_length_range: tuple[int, int] = (2, 4)
    sentence_length_range: tuple[int, int] = (2, 4)
    d_vis: int = 16
    d_txt: int = 24
    signal_dim: int = 6
    noise_scale: float = 0.1
    image_width: int = 640
    image_height: int = 360

    def __post_init__(self):
        if self.n_examples < 1:
            raise ValueError(f"n_examples must be >= 1, got {self.n_examples}")
        _check_range("frames_range", self.frames_range)
        _check_range("span_length_range", self.span_length_range)
        _check_range("objects_range", self.objects_range)
        _check_range("question_length_range", self.question_length_range)
        _check_range("answer_length_range", self.answer_length_range)
        _check_range("sentence_length_range", self.sentence_length_range)
        for name in ("d_vis", "d_txt", "signal_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")
        if self.image_width < 2 or self.image_height < 2:
            raise ValueError("image dimensions must be >= 2")


def _rand_in(rng: np.random.Generator, r: tuple[int, int]) -> int:
    return int(rng.integers(r[0], r[1] + 1))


def _grid_boxes(rng: np.random.Generator, n: int, width: int, height: int) -> list[BoundingBox]:
    # One box per grid cell keeps pairwise IoU exactly zero. Coordinates are
    # quantized to float32 so they survive the packed feature format exactly.
    k = math.ceil(math.sqrt(n))
    cells = rng.permutation(k * k)[:n]
    cw, ch = width / k, height / k
    q = lambda v: float(np.float32(v))
    boxes = []
    for c in cells:
        cx, cy = (int(c) % k) * cw, (int(c) // k) * ch
        x1 = cx + 0.05 * cw + rng.uniform(0, 0.20 * cw)
        y1 = cy + 0.05 * ch + rng.uniform(0, 0.20 * ch)
        x2 = x1 + 0.30 * cw + rng.uniform(0, 0.40 * cw)
        y2 = y1 + 0.30 * ch + rng.uniform(0, 0.40 * ch)
        boxes.append(BoundingBox(q(x1), q(y1), q(x2), q(y2)))
    return boxes


def generate_synthetic_dataset(spec: SynthSpec, seed: int) -> list[QAExample]:
    """Generate a deterministic dataset of planted-signal examples."""
    rng = np.random.default_rng(seed)
    scale = 1.0 / math.sqrt(spec.signal_dim)
    txt_map = rng.normal(0.0, scale, size=(spec.d_txt, spec.signal_dim))
    vis_map = rng.normal(0.0, scale, size=(spec.d_vis, spec.signal_dim))
    noise = spec.noise_scale

    examples = []
    for i in range(spec.n_examples):
        qid = f"q{i:05d}"
        T = _rand_in(rng, spec.frames_range)
        span_len = min(T, _rand_in(rng, spec.span_length_range))
        start = int(rng.integers(0, T - span_len + 1))
        gt_span = TimeSpan(start, start + span_len - 1)
        gt_idx = int(rng.integers(0, 5))
        latent = rng.normal(size=spec.signal_dim)

        q_len = _rand_in(rng, spec.question_length_range)
        q_tokens = [str(rng.choice(_QUESTION_TYPES))] + [
            f"w{int(rng.integers(1000))}" for _ in range(q_len - 1)
        ]
        q_feats = rng.normal(0.0, noise, size=(q_len, spec.d_txt))

        cats = rng.choice(len(_CATEGORIES), size=5, replace=False)
        answer_tokens, answer_feats = [], []
        for k in range(5):
            a_len = _rand_in(rng, spec.answer_length_range)
            toks = [_CATEGORIES[int(cats[k])]] + [
                f"w{int(rng.integers(1000))}" for _ in range(a_len - 1)
            ]
            feats = rng.normal(0.0, noise, size=(a_len, spec.d_txt))
            a_latent = latent if k == gt_idx else rng.normal(size=spec.signal_dim)
            feats[0] += txt_map @ a_latent
            answer_tokens.append(tuple(toks))
            answer_feats.append(feats)

        # One subtitle sentence per frame period; the sentence aligned with an
        # in-span frame carries the latent in its first token.
        sentences, sent_tokens, sent_feats = [], [], []
        for j in range(T):
            s_len = _rand_in(rng, spec.sentence_length_range)
            toks = [f"s{j}w{int(rng.integers(1000))}" for _ in range(s_len)]
            feats = rng.normal(0.0, noise, size=(s_len, spec.d_txt))
            if gt_span.start_idx <= j <= gt_span.end_idx:
                feats[0] += txt_map @ latent
            sentences.append((" ".join(toks), j * FRAME_PERIOD_SEC, (j + 1) * FRAME_PERIOD_SEC))
            sent_tokens.append(toks)
            sent_feats.append(feats)
        frame_times = [t * FRAME_PERIOD_SEC for t in range(T)]
        windows = align_subtitles(frame_times, sentences)

        frames, annotations = [], []
        for t in range(T):
            in_span = gt_span.start_idx <= t <= gt_span.end_idx
            n_obj = _rand_in(rng, spec.objects_range)
            boxes = _grid_boxes(rng, n_obj, spec.image_width, spec.image_height)
            feats = rng.normal(0.0, noise, size=(n_obj, spec.d_vis))
            if in_span:
                planted = int(rng.integers(0, n_obj))
                feats[planted] += vis_map @ latent
                annotations.append(
                    ConceptAnnotation(
                        word_index=q_len,  # first token of the GT answer
                        frame_idx=t,
                        gt_boxes=(boxes[planted],),
                    )
                )
            objects = tuple(
                ObjectRegionFeature(box=b, feature=f) for b, f in zip(boxes, feats)
            )
            win = windows[t]
            sub_tokens = tuple(tok for j in win for tok in sent_tokens[j])
            sub_feats = (
                np.concatenate([sent_feats[j] for j in win], axis=0)
                if win
                else np.zeros((0, 0), dtype=np.float32)
            )
            frames.append(
                FrameRecord(
                    frame_idx=t,
                    objects=objects,
                    subtitle_tokens=sub_tokens,
                    subtitle_features=sub_feats,
                )
            )

        examples.append(
            QAExample(
                qid=qid,
                question_tokens=tuple(q_tokens),
                answer_tokens=tuple(answer_tokens),
                question_features=q_feats,
                answer_features=tuple(answer_feats),
                gt_answer_idx=gt_idx,
                gt_span=gt_span,
                frames=tuple(frames),
                concept_annotations=tuple(annotations),
            )
        )
    return examples
