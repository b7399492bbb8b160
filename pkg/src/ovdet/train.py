"""Run configuration, training loop, inference and dataset evaluation."""

from __future__ import annotations

import hashlib
import json
import logging
import queue
import threading
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from . import autodiff as ad
from .backbone import ImageBatch
from .boxes import cxcywh_to_xyxy
from .checkpoint import load_checkpoint, save_checkpoint
from .data import AnnotationRecord, load_annotations, load_image
from .decoder import DetectionSet
from .losses import GroundTruth, LossWeights, total_loss
from .metrics import CLOSED, GZSD, MAP_THRESHOLDS, ZSD, Detection, EvalConfig, EvalReport, GroundTruthBox, evaluate
from .model import Detector, ModelConfig
from .nn import SGD, Adam
from .text import BASE, NOVEL, ClassVocabulary, SamplingPolicy, embed_class_names, embed_names, normalize_name, \
    sample_training_classes

log = logging.getLogger(__name__)

# Fields that never influence computed numbers; left out of the config hash.
_NON_COMPUTATIONAL = ("data", "out", "deterministic", "prefetch", "log_every")


class ConfigError(ValueError):
    pass


class VocabularyError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, breakdown: Dict[str, float], reason: str = "non-finite loss"):
        self.step = step
        self.breakdown = breakdown
        parts = ", ".join(f"{k}={v:.6g}" for k, v in breakdown.items())
        super().__init__(f"{reason} at step {step}: {parts or 'no breakdown available'}")


@dataclass
class RunConfig:
    # model
    channels: int = 64
    text_dim: int = 64
    d_h: int = 64
    n_layers: int = 3
    n_queries: int = 30
    head_alpha: float = 5.0
    head_beta: float = -2.0
    enable_tg_fe: bool = True
    enable_vg_tr: bool = True
    enable_tg_qe: bool = True
    enable_gate: bool = True
    # objective
    loss_con: float = 1.0
    loss_giou: float = 2.0
    loss_l1: float = 5.0
    vfl_alpha: float = 0.75
    vfl_gamma: float = 2.0
    # optimisation
    optimizer: str = "adam"
    lr: float = 1e-3
    clip_norm: float = 1.0
    steps: int = 20000
    batch_size: int = 4
    seed: int = 0
    n_slots: int = 0          # 0: one slot per training class
    # data and evaluation
    data: str = ""
    out: str = ""
    protocol: str = GZSD
    score_floor: float = 0.0
    deterministic: bool = False
    prefetch: int = 2
    log_every: int = 50

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.protocol not in (ZSD, GZSD, CLOSED):
            raise ConfigError(f"unknown protocol {self.protocol!r}")
        if self.batch_size < 1 or self.steps < 0 or self.n_slots < 0:
            raise ConfigError("batch_size must be positive; steps and n_slots non-negative")

    @classmethod
    def from_mapping(cls, values: Dict[str, object]) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, value in values.items():
            key = key.replace("-", "_")
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(value, types[key], key)
        return cls(**kwargs)

    def merged(self, overrides: Dict[str, object]) -> "RunConfig":
        d = asdict(self)
        d.update({k.replace("-", "_"): v for k, v in overrides.items()})
        return RunConfig.from_mapping(d)

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.channels, self.text_dim, self.d_h, self.n_layers, self.n_queries,
                           self.head_alpha, self.head_beta, self.enable_tg_fe, self.enable_vg_tr,
                           self.enable_tg_qe, self.enable_gate)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.loss_con, self.loss_giou, self.loss_l1, self.vfl_alpha, self.vfl_gamma)

    def computational(self) -> Dict[str, object]:
        return {k: v for k, v in asdict(self).items() if k not in _NON_COMPUTATIONAL}

    def config_hash(self) -> str:
        blob = json.dumps(self.computational(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _coerce(value, typ, key):
    name = typ if isinstance(typ, str) else typ.__name__
    try:
        if name == "bool":
            if isinstance(value, str):
                low = value.strip().lower()
                if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                    raise ValueError(value)
                return low in ("1", "true", "yes", "on")
            return bool(value)
        if name == "int":
            return int(value)
        if name == "float":
            return float(value)
        return str(value)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot read {value!r} as {name}") from None


def read_config_file(path) -> Dict[str, str]:
    """Flat ``key = value`` text; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# ---------------------------------------------------------------- datasets

@dataclass
class DetectionDataset:
    images: List[np.ndarray]
    records: List[AnnotationRecord]
    vocab: ClassVocabulary

    def __len__(self) -> int:
        return len(self.records)

    def ground_truth(self, i: int) -> GroundTruth:
        rec = self.records[i]
        boxes, ids = [], []
        for obj in rec.objects:
            x, y, w, h = obj.bbox
            boxes.append(((x + w / 2) / rec.width, (y + h / 2) / rec.height, w / rec.width, h / rec.height))
            ids.append(self.vocab.index(obj.class_name))
        return GroundTruth(np.array(boxes).reshape(-1, 4), np.array(ids, dtype=np.int64))

    def class_names_present(self) -> List[str]:
        return sorted({o.class_name for r in self.records for o in r.objects})

    @classmethod
    def from_dir(cls, root) -> "DetectionDataset":
        root = Path(root)
        split = root / "novel.txt"
        loaded = load_annotations(root / "annotations.json", split if split.exists() else None)
        images = [load_image(root / "images" / r.file_name) for r in loaded.records]
        return cls(images, loaded.records, loaded.vocabulary)


def _batch_stream(n: int, batch_size: int, steps: int, seed: int) -> Iterator[np.ndarray]:
    """Epoch-wise shuffled index batches; the order depends on ``seed`` only."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    perm, pos = rng.permutation(n), 0
    for _ in range(steps):
        idx = []
        while len(idx) < batch_size:
            if pos == n:
                perm, pos = rng.permutation(n), 0
            take = min(batch_size - len(idx), n - pos)
            idx.extend(perm[pos:pos + take])
            pos += take
        yield np.array(idx)


def _make_batch(ds: DetectionDataset, idx: np.ndarray):
    return ImageBatch.from_hwc([ds.images[i] for i in idx]), [ds.ground_truth(i) for i in idx]


def _prefetched(source: Iterator, depth: int) -> Iterator:
    """Run ``source`` on a helper thread behind a bounded queue; order is preserved."""
    q: "queue.Queue" = queue.Queue(maxsize=max(1, depth))
    done = object()
    stop = threading.Event()

    def work():
        try:
            for item in source:
                if stop.is_set():
                    return
                q.put(item)
        except BaseException as exc:  # surfaced on the consumer side
            q.put(exc)
        q.put(done)

    t = threading.Thread(target=work, daemon=True)
    t.start()
    try:
        while True:
            item = q.get()
            if item is done:
                return
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: Detector
    curve: List[Dict[str, float]]


def _step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, 11, step]).generate_state(1)[0])


def train(cfg: RunConfig, dataset: DetectionDataset,
          on_step: Optional[Callable[[int, Dict[str, float]], None]] = None,
          model: Optional[Detector] = None) -> TrainResult:
    """Minimise the detection objective on base classes with per-batch class sampling."""
    vocab = dataset.vocab
    pool = vocab.base_indices
    if not pool:
        raise ConfigError("training vocabulary has no base classes")
    n_slots = cfg.n_slots or len(pool)
    table = embed_names(vocab.names, cfg.text_dim)
    model = model or Detector(cfg.model_config(), seed=cfg.seed)
    params = model.parameters()
    opt = Adam(params, cfg.lr, clip_norm=cfg.clip_norm) if cfg.optimizer == "adam" \
        else SGD(params, cfg.lr, clip_norm=cfg.clip_norm)
    weights = cfg.loss_weights()
    batches = (_make_batch(dataset, idx) for idx in
               _batch_stream(len(dataset), cfg.batch_size, cfg.steps, cfg.seed))
    if not cfg.deterministic and cfg.prefetch > 0:
        batches = _prefetched(batches, cfg.prefetch)
    curve: List[Dict[str, float]] = []
    for step, (batch, gts) in enumerate(batches):
        positives = sorted({int(c) for g in gts for c in g.class_ids})
        bank, _ = sample_training_classes(vocab, positives, SamplingPolicy(n_slots, _step_seed(cfg.seed, step)),
                                          table=table, pool=pool)
        breakdown: Dict[str, float] = {}
        try:
            out = model(batch, bank)
            lb = total_loss(out.all_outputs(), gts, out.state.text, weights)
            breakdown = lb.as_floats()
            if not all(np.isfinite(v) for v in breakdown.values()):
                raise TrainingDiverged(step, breakdown)
            model.zero_grad()
            ad.backward(lb.total)
        except ad.NonFiniteError as exc:
            raise TrainingDiverged(step, breakdown, f"non-finite value ({exc})") from exc
        gnorm = opt.step()
        row = {"step": step, **breakdown, "grad_norm": gnorm}
        curve.append(row)
        if on_step:
            on_step(step, row)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("step %d total %.4f con %.4f giou %.4f l1 %.4f", step, breakdown["total"],
                     breakdown["l_con"], breakdown["l_giou"], breakdown["l_l1"])
    return TrainResult(model, curve)


def write_loss_curve(path, curve: Sequence[Dict[str, float]]) -> None:
    cols = ["step", "l_con", "l_giou", "l_l1", "total", "grad_norm"]
    lines = [",".join(cols)]
    for row in curve:
        lines.append(",".join([str(int(row["step"]))] + [repr(float(row[c])) for c in cols[1:]]))
    Path(path).write_text("\n".join(lines) + "\n")


def save_model(path, model: Detector, cfg: RunConfig, vocab: ClassVocabulary, steps_done: int) -> None:
    arrays = {name: p.data for name, p in model.state_dict().items()}
    meta = {"model": model.config.to_dict(), "config_hash": cfg.config_hash(), "version": __version__,
            "vocabulary": list(vocab.names), "roles": list(vocab.roles), "steps": steps_done}
    save_checkpoint(path, arrays, meta)


def load_model(path) -> Tuple[Detector, dict]:
    arrays, meta = load_checkpoint(path)
    model = Detector(ModelConfig.from_dict(meta["model"]))
    model.load_arrays(arrays)
    return model, meta


# ---------------------------------------------------------------- inference

def _pad_to_stride(image: np.ndarray, stride: int = 32) -> np.ndarray:
    h, w = image.shape[:2]
    ph, pw = -h % stride, -w % stride
    if ph or pw:
        image = np.pad(image, ((0, ph), (0, pw), (0, 0)))
    return image


def detect(model: Detector, images: Sequence[np.ndarray], class_names: Sequence[str],
           batch_size: int = 8) -> List[Tuple[DetectionSet, Tuple[int, int]]]:
    """Run the detector with an arbitrary class-name vocabulary.

    Returns per image the detection set (normalised to the padded canvas) and
    the padded canvas size ``(H, W)``.
    """
    bank = embed_class_names(list(class_names), model.config.text_dim)
    out = []
    for start in range(0, len(images), batch_size):
        chunk = [_pad_to_stride(np.asarray(im)) for im in images[start:start + batch_size]]
        shapes = {im.shape for im in chunk}
        groups = [chunk] if len(shapes) == 1 else [[im] for im in chunk]
        for group in groups:
            sets = model.predict(ImageBatch.from_hwc(group), bank)
            out.extend((s, group[0].shape[:2]) for s in sets)
    return out


def to_pixel_detections(dset: DetectionSet, canvas: Tuple[int, int], image_id: int,
                        score_floor: float = 0.0) -> List[Detection]:
    """Every (query, class) pair scoring at least ``score_floor``, boxes as xyxy pixels."""
    h, w = canvas
    xyxy = cxcywh_to_xyxy(dset.boxes) * np.array([w, h, w, h])
    out = []
    for q in range(len(xyxy)):
        box = tuple(float(v) for v in xyxy[q])
        for j, name in enumerate(dset.class_names):
            s = float(dset.scores[q, j])
            if s >= score_floor:
                out.append(Detection(image_id, name, box, s))
    return out


def check_vocabulary(names: Sequence[str], known: Sequence[str]) -> None:
    unknown = sorted(set(normalize_name(n) for n in names) - set(known))
    if unknown:
        raise VocabularyError(f"vocabulary mismatch; unknown classes: {', '.join(unknown)}")


def protocol_vocabulary(vocab: ClassVocabulary, protocol: str) -> Tuple[List[str], ClassVocabulary]:
    """Inference class names and scoring vocabulary for a protocol.

    ZSD infers over novel names only and scores novel classes of the full
    vocabulary; closed-set infers and scores over base classes; GZSD uses
    everything.
    """
    if protocol == ZSD:
        return vocab.names_with_role(NOVEL), vocab
    if protocol == CLOSED:
        names = vocab.names_with_role(BASE)
        return names, ClassVocabulary(tuple(names), tuple(BASE for _ in names))
    return list(vocab.names), vocab


def evaluate_model(model: Detector, dataset: DetectionDataset, protocol: str = GZSD,
                   score_floor: float = 0.0, vocab: Optional[ClassVocabulary] = None,
                   thresholds: Sequence[float] = MAP_THRESHOLDS) -> EvalReport:
    vocab = vocab or dataset.vocab
    check_vocabulary(dataset.class_names_present(), vocab.names)
    names, eval_vocab = protocol_vocabulary(vocab, protocol)
    results = detect(model, dataset.images, names)
    dets, gts = [], []
    for rec, (dset, canvas) in zip(dataset.records, results):
        dets.extend(to_pixel_detections(dset, canvas, rec.image_id, score_floor))
        for obj in rec.objects:
            x, y, w, h = obj.bbox
            gts.append(GroundTruthBox(rec.image_id, obj.class_name, (x, y, x + w, y + h)))
    return evaluate(dets, gts, eval_vocab, EvalConfig(tuple(thresholds), protocol, score_floor))
