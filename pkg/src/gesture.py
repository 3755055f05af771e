"""
Finger-stroke input through the interaction window.

Optical-flow samples are segmented into strokes, turned into arc-length
resampled shape features and classified by a one-hidden-layer perceptron
trained with back propagation. A synthetic multi-user corpus and an
evaluation harness stand in for recorded sessions.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from scipy.ndimage import gaussian_filter1d
from scipy.special import log_softmax, softmax
from sklearn.metrics import accuracy_score, confusion_matrix
from sklearn.model_selection import train_test_split
from sklearn.preprocessing import StandardScaler

from errors import (
    DeviceMismatch,
    DimensionMismatch,
    InsufficientData,
    MalformedRecord,
    NonFiniteLoss,
    SpecInvalid,
    ZeroLengthPath,
    spec_invalid_from,
)
from settings import read_json

logger = logging.getLogger(__name__)

RESAMPLE_POINTS = 16
FEATURE_DIM = 2 * RESAMPLE_POINTS
MIN_STROKE_SAMPLES = 4
MAX_STROKE_MS = 10_000
MODEL_FORMAT = "sculptfab-gesture-mlp/1"
TEMPLATE_COUNTS = 400.0
TEMPLATE_POINTS = 32
# share of synthetic strokes where the user performs a different gesture than asked
SLIP_RATE = 0.075


# ---------------------------------------------------------------------------
# Samples and strokes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FlowSample:
    dx: int
    dy: int
    t: int

    @property
    def moving(self) -> bool:
        return abs(self.dx) + abs(self.dy) > 0


@dataclass(frozen=True)
class Stroke:
    samples: Tuple[FlowSample, ...]
    label: Optional[str] = None
    user: Optional[str] = None
    device_id: Optional[str] = None

    def __post_init__(self):
        samples = tuple(self.samples)
        object.__setattr__(self, "samples", samples)
        if len(samples) < MIN_STROKE_SAMPLES:
            raise SpecInvalid(
                f"stroke needs at least {MIN_STROKE_SAMPLES} samples, got {len(samples)}", field="samples"
            )
        t = np.array([s.t for s in samples])
        if np.any(np.diff(t) <= 0):
            raise SpecInvalid("sample timestamps must be strictly increasing", field="samples.t")
        if t[-1] - t[0] > MAX_STROKE_MS:
            raise SpecInvalid(f"stroke lasts {t[-1] - t[0]} ms, limit {MAX_STROKE_MS}", field="samples.t")

    @property
    def duration_ms(self) -> int:
        return self.samples[-1].t - self.samples[0].t

    def displacements(self) -> np.ndarray:
        return np.array([[s.dx, s.dy] for s in self.samples], dtype=np.float64)


def segment(stream: Sequence[FlowSample], idle_ms: int = 250) -> List[Stroke]:
    """Split a sample stream at stillness lasting ``idle_ms`` or longer."""
    if idle_ms <= 0:
        raise SpecInvalid("idle_ms must be positive", field="idle_ms")
    runs: List[List[FlowSample]] = []
    current: List[FlowSample] = []
    last_motion = None
    for s in stream:
        if not s.moving:
            continue
        if current and s.t - last_motion >= idle_ms:
            runs.append(current)
            current = []
        current.append(s)
        last_motion = s.t
    if current:
        runs.append(current)

    strokes = []
    for run in runs:
        if len(run) < MIN_STROKE_SAMPLES:
            continue
        if run[-1].t - run[0].t > MAX_STROKE_MS:
            logger.warning(f"Dropping {run[-1].t - run[0].t} ms motion run longer than {MAX_STROKE_MS} ms")
            continue
        strokes.append(Stroke(tuple(run)))
    logger.debug(f"Segmented {len(strokes)} strokes from {len(runs)} motion runs")
    return strokes


def _resample_path(points: np.ndarray, n: int) -> np.ndarray:
    steps = np.linalg.norm(np.diff(points, axis=0), axis=1)
    keep = np.concatenate([[True], steps > 0])
    points = points[keep]
    arc = np.concatenate([[0.0], np.cumsum(steps[steps > 0])])
    targets = np.linspace(0.0, arc[-1], n)
    return np.column_stack([np.interp(targets, arc, points[:, 0]), np.interp(targets, arc, points[:, 1])])


def featurize(stroke: Stroke) -> np.ndarray:
    """16 arc-length-equidistant path points, origin-anchored and scaled by the bbox long side."""
    path = np.vstack([np.zeros((1, 2)), np.cumsum(stroke.displacements(), axis=0)])
    if not np.any(np.linalg.norm(np.diff(path, axis=0), axis=1) > 0):
        raise ZeroLengthPath("stroke has no displacement")
    resampled = _resample_path(path, RESAMPLE_POINTS)
    resampled -= resampled[0]
    long_side = float(np.ptp(resampled, axis=0).max())
    return (resampled / long_side).reshape(-1)


# ---------------------------------------------------------------------------
# Sensor geometry checks
# ---------------------------------------------------------------------------


class SensorGeometry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    window_diameter: float = 14.0
    accurate_diameter: float = 13.0
    depth_of_field: Tuple[float, float] = (1.4, 2.1)
    optimal_distance: float = 2.0
    tilt_deg: float = 10.0
    cover_thickness: float = 2.0

    @model_validator(mode="after")
    def _check(self):
        lo, hi = self.depth_of_field
        if self.accurate_diameter > self.window_diameter:
            raise ValueError("accurate_diameter must not exceed window_diameter")
        if not lo <= self.optimal_distance <= hi:
            raise ValueError("optimal_distance must lie within depth_of_field")
        return self


class CoverSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    present: bool = True
    thickness: float = Field(2.0, ge=0)


class WindowDesign(BaseModel):
    model_config = ConfigDict(extra="forbid")

    hole_diameter: float = Field(gt=0)
    cover: CoverSpec = CoverSpec()
    standoff: float = Field(0.0, ge=0)


@dataclass(frozen=True)
class Violation:
    code: str
    message: str

    def to_dict(self):
        return {"code": self.code, "message": self.message}


def check_geometry(design: Union[WindowDesign, dict], sensor: Optional[SensorGeometry] = None) -> List[Violation]:
    """Design-rule check of a sensing window against the sensor's optics."""
    sensor = sensor or SensorGeometry()
    if not isinstance(design, WindowDesign):
        try:
            design = WindowDesign.model_validate(design)
        except ValidationError as e:
            raise spec_invalid_from(e) from e

    violations = []
    if not design.cover.present:
        violations.append(
            Violation(
                "UncoveredHole",
                "open holes let the fingertip bulge toward the lens, outside the depth of field; "
                "small printed holes did not support accurate gesture capture",
            )
        )
    else:
        lo, hi = sensor.depth_of_field
        distance = design.standoff + design.cover.thickness
        if not lo <= distance <= hi:
            violations.append(
                Violation(
                    "OutOfDepthOfField",
                    f"finger surface sits {distance:.2f} mm from the lens; the sensor tracks between "
                    f"{lo} and {hi} mm (best at {sensor.optimal_distance} mm)",
                )
            )
    if design.hole_diameter < sensor.accurate_diameter:
        violations.append(
            Violation(
                "WindowTooSmall",
                f"{design.hole_diameter} mm window is below the {sensor.accurate_diameter} mm area the "
                f"sensor tracks accurately; a {sensor.window_diameter} mm window supports a wide range of motion",
            )
        )
    return violations


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    hidden: int = Field(20, ge=1)
    epochs: int = Field(500, ge=1)
    learning_rate: float = Field(0.05, gt=0)
    batch_size: int = Field(1, ge=1)
    seed: int


@dataclass
class GestureModel:
    classes: List[str]
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        return int(self.w1.shape[0])

    @property
    def hidden(self) -> int:
        return int(self.w1.shape[1])

    @property
    def device_id(self) -> Optional[str]:
        return self.metadata.get("device_id")

    def params(self) -> Dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.scale

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(features)
        if x.shape[1] != self.input_dim:
            raise DimensionMismatch(f"model expects {self.input_dim} features, got {x.shape[1]}")
        _, probs = forward(self.params(), self.normalize(x))
        return probs

    def to_dict(self) -> Dict[str, Any]:
        return {
            "format": MODEL_FORMAT,
            "classes": list(self.classes),
            "input_dim": self.input_dim,
            "hidden": self.hidden,
            "weights": {k: v.tolist() for k, v in self.params().items()},
            "normalization": {"mean": self.mean.tolist(), "scale": self.scale.tolist()},
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "GestureModel":
        if data.get("format") != MODEL_FORMAT:
            raise SpecInvalid(f"unsupported model format {data.get('format')!r}", field="format")
        try:
            w = data["weights"]
            model = cls(
                classes=list(data["classes"]),
                w1=np.array(w["w1"], dtype=np.float64),
                b1=np.array(w["b1"], dtype=np.float64),
                w2=np.array(w["w2"], dtype=np.float64),
                b2=np.array(w["b2"], dtype=np.float64),
                mean=np.array(data["normalization"]["mean"], dtype=np.float64),
                scale=np.array(data["normalization"]["scale"], dtype=np.float64),
                metadata=dict(data.get("metadata", {})),
            )
        except KeyError as e:
            raise SpecInvalid(f"model file is missing {e.args[0]!r}", field=str(e.args[0])) from e
        if model.input_dim != int(data.get("input_dim", model.input_dim)):
            raise DimensionMismatch("input_dim does not match the weight matrix")
        return model


def save_model(model: GestureModel, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_text(json.dumps(model.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def load_model(path: Union[str, Path]) -> GestureModel:
    data = read_json(path)
    if not isinstance(data, dict):
        raise SpecInvalid("model file must be a JSON object", field="format")
    return GestureModel.from_dict(data)


def forward(params: Dict[str, np.ndarray], x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Hidden activations and class probabilities."""
    hidden = np.tanh(x @ params["w1"] + params["b1"])
    return hidden, softmax(hidden @ params["w2"] + params["b2"], axis=1)


def loss_and_gradients(
    params: Dict[str, np.ndarray], x: np.ndarray, targets: np.ndarray
) -> Tuple[float, Dict[str, np.ndarray]]:
    """Mean cross-entropy and its back-propagated gradients; ``targets`` are class indices."""
    n = len(x)
    hidden = np.tanh(x @ params["w1"] + params["b1"])
    logits = hidden @ params["w2"] + params["b2"]
    log_p = log_softmax(logits, axis=1)
    loss = float(-log_p[np.arange(n), targets].mean())

    delta_out = np.exp(log_p)
    delta_out[np.arange(n), targets] -= 1.0
    delta_out /= n
    delta_hidden = (delta_out @ params["w2"].T) * (1.0 - hidden**2)
    grads = {
        "w2": hidden.T @ delta_out,
        "b2": delta_out.sum(axis=0),
        "w1": x.T @ delta_hidden,
        "b1": delta_hidden.sum(axis=0),
    }
    return loss, grads


def _feature_matrix(strokes: Sequence[Stroke]) -> np.ndarray:
    return np.array([featurize(s) for s in strokes])


def train(strokes: Sequence[Stroke], config: TrainConfig, device_id: Optional[str] = None) -> GestureModel:
    """Fit the perceptron by plain gradient descent; deterministic for a given seed."""
    labels = [s.label for s in strokes]
    if any(label is None for label in labels):
        raise InsufficientData("every training stroke needs a label")
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise InsufficientData(f"need at least 2 classes, got {len(classes)}")
    for c in classes:
        if labels.count(c) < 4:
            raise InsufficientData(f"class '{c}' has {labels.count(c)} samples, need at least 4")

    x_raw = _feature_matrix(strokes)
    scaler = StandardScaler().fit(x_raw)
    x = scaler.transform(x_raw)
    y = np.array([classes.index(label) for label in labels])

    rng = np.random.default_rng(config.seed)
    params = {
        "w1": rng.uniform(-0.5, 0.5, (x.shape[1], config.hidden)),
        "b1": rng.uniform(-0.5, 0.5, config.hidden),
        "w2": rng.uniform(-0.5, 0.5, (config.hidden, len(classes))),
        "b2": rng.uniform(-0.5, 0.5, len(classes)),
    }
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(x))
        epoch_loss = 0.0
        for start in range(0, len(x), config.batch_size):
            batch = order[start:start + config.batch_size]
            loss, grads = loss_and_gradients(params, x[batch], y[batch])
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"loss diverged at epoch {epoch}", epoch=epoch)
            epoch_loss += loss * len(batch)
            for k in params:
                params[k] = params[k] - config.learning_rate * grads[k]
        if epoch % 100 == 0:
            logger.debug(f"epoch {epoch}: loss {epoch_loss / len(x):.5f}")

    _, probs = forward(params, x)
    accuracy = float(accuracy_score(y, probs.argmax(axis=1)))
    logger.info(f"Trained {len(classes)}-class model on {len(x)} strokes: accuracy {accuracy:.3f}")
    return GestureModel(
        classes=classes,
        mean=scaler.mean_.copy(),
        scale=scaler.scale_.copy(),
        metadata={
            "seed": config.seed,
            "epochs": config.epochs,
            "learning_rate": config.learning_rate,
            "batch_size": config.batch_size,
            "device_id": device_id,
            "train_accuracy": accuracy,
        },
        **params,
    )


@dataclass(frozen=True)
class Classification:
    label: str
    confidence: float
    probabilities: Dict[str, float]

    def to_dict(self):
        return {"label": self.label, "confidence": self.confidence, "probabilities": self.probabilities}


def classify(
    model: GestureModel,
    stroke: Stroke,
    device_id: Optional[str] = None,
    warnings: Optional[List[Dict[str, Any]]] = None,
) -> Classification:
    if model.input_dim != FEATURE_DIM:
        raise DimensionMismatch(f"model expects {model.input_dim} features, featurizer yields {FEATURE_DIM}")
    device_id = device_id or stroke.device_id
    if device_id and model.device_id and device_id != model.device_id:
        warning = DeviceMismatch(
            f"stream from device '{device_id}' classified with model trained on '{model.device_id}'"
        )
        logger.warning(warning.message)
        if warnings is not None:
            warnings.append(warning.to_dict())
    probs = model.predict_proba(featurize(stroke))[0]
    best = int(np.argmax(probs))
    return Classification(
        model.classes[best], float(probs[best]), {c: float(p) for c, p in zip(model.classes, probs)}
    )


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------


def _circle(clockwise: bool, n: int = 64) -> np.ndarray:
    a = np.linspace(0.0, 2.0 * np.pi, n)
    sign = -1.0 if clockwise else 1.0
    # start at the bottom of the circle so the path begins at the origin
    return np.column_stack([0.5 * np.sin(sign * a), 0.5 - 0.5 * np.cos(a)])


BUILTIN_TEMPLATES: Dict[str, np.ndarray] = {
    "swipe-left": np.array([[0.0, 0.0], [-1.0, 0.0]]),
    "swipe-right": np.array([[0.0, 0.0], [1.0, 0.0]]),
    "swipe-up": np.array([[0.0, 0.0], [0.0, 1.0]]),
    "swipe-down": np.array([[0.0, 0.0], [0.0, -1.0]]),
    "circle-cw": _circle(clockwise=True),
    "circle-ccw": _circle(clockwise=False),
}


def load_templates(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    """JSON list of ``{"name": str, "points": [[x, y], ...]}``."""
    data = read_json(path)
    if not isinstance(data, list):
        raise SpecInvalid("template file must be a JSON list", field="templates")
    templates = {}
    for i, entry in enumerate(data):
        try:
            templates[entry["name"]] = np.asarray(entry["points"], dtype=np.float64).reshape(-1, 2)
        except (KeyError, TypeError, ValueError) as e:
            raise SpecInvalid(f"template {i} is malformed: {e}", field=f"templates.{i}") from e
    return templates


def _user_style(seed: int, user: int, noise_sigma: float) -> Dict[str, float]:
    rng = np.random.default_rng([seed, 1_000_003, user])
    return {
        "rotation_deg": float(rng.normal(0.0, 40.0 * noise_sigma)),
        "scale": float(rng.uniform(0.8, 1.25)),
        "speed": float(rng.uniform(0.7, 1.4)),
    }


def _quantize(path: np.ndarray) -> np.ndarray:
    """Integer displacement counts whose running sum tracks the rounded path."""
    return np.diff(np.round(path), axis=0).astype(np.int64)


def synth_corpus(
    templates: Optional[Dict[str, np.ndarray]] = None,
    n_per_class: int = 20,
    noise_sigma: float = 0.15,
    seed: int = 0,
    n_users: int = 4,
    device_id: Optional[str] = None,
    slip_rate: float = SLIP_RATE,
) -> List[Stroke]:
    """Noisy, user-styled renditions of each template; deterministic per seed.

    With ``noise_sigma > 0`` a fixed share ``slip_rate`` of the strokes is a
    different template than the label asks for, as happens when people record
    a corpus. At ``noise_sigma == 0`` every stroke is the exact template
    rendition and featurizes identically to :func:`template_features`.
    """
    templates = templates if templates is not None else BUILTIN_TEMPLATES
    if n_per_class < 1 or n_users < 1:
        raise SpecInvalid("n_per_class and n_users must be >= 1", field="n_per_class")
    if not 0.0 <= slip_rate < 1.0:
        raise SpecInvalid("slip_rate must be in [0, 1)", field="slip_rate")
    names = list(templates)
    reference = template_features(templates)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            if np.allclose(reference[a], reference[b], atol=1e-6):
                raise SpecInvalid(f"templates '{a}' and '{b}' are identical", field="templates")

    styles = [_user_style(seed, u, noise_sigma) for u in range(n_users)]
    slipped = set()
    if noise_sigma > 0 and len(names) > 1:
        total = len(names) * n_per_class
        count = int(round(slip_rate * total))
        slipped = set(np.random.default_rng([seed, 7_000_003]).choice(total, count, replace=False).tolist())
    strokes = []
    for ci, name in enumerate(names):
        for k in range(n_per_class):
            user = k % n_users
            style = styles[user]
            rng = np.random.default_rng([seed, ci, k])
            n_points = int(rng.integers(40, 60))
            drawn = name
            if ci * n_per_class + k in slipped:
                others = [n for n in names if n != name]
                drawn = others[int(rng.integers(len(others)))]
            template = np.asarray(templates[drawn], dtype=np.float64)
            if noise_sigma > 0:
                base = _resample_path(template, n_points)
                jitter = rng.normal(0.0, noise_sigma, base.shape)
                base = base + gaussian_filter1d(jitter, sigma=3.0, axis=0, mode="nearest")
                base -= base[0]
                angle = np.radians(style["rotation_deg"] + rng.normal(0.0, 20.0 * noise_sigma))
                c, s = np.cos(angle), np.sin(angle)
                base = base @ np.array([[c, s], [-s, c]])
                path = base * TEMPLATE_COUNTS * style["scale"]
            else:
                n_points = TEMPLATE_POINTS
                path = template * TEMPLATE_COUNTS
            profile = np.sin(np.linspace(0.15, np.pi - 0.15, n_points - 1))
            dt = np.maximum(1, np.round(8.0 / style["speed"] / profile * rng.uniform(0.9, 1.1))).astype(np.int64)
            samples = _template_samples(path, n_points, dt)
            strokes.append(Stroke(samples, label=name, user=f"user{user}", device_id=device_id))
    logger.info(
        f"Synthesized {len(strokes)} strokes over {len(names)} classes and {n_users} users, {len(slipped)} slips"
    )
    return strokes


def template_features(templates: Optional[Dict[str, np.ndarray]] = None) -> Dict[str, np.ndarray]:
    """Features of the noise-free rendition of each template."""
    templates = templates if templates is not None else BUILTIN_TEMPLATES
    dt = np.full(TEMPLATE_POINTS - 1, 8)
    features = {}
    for name, path in templates.items():
        counts = np.asarray(path, dtype=np.float64) * TEMPLATE_COUNTS
        features[name] = featurize(Stroke(_template_samples(counts, TEMPLATE_POINTS, dt), name))
    return features


def _template_samples(path: np.ndarray, n_points: int, dt) -> Tuple[FlowSample, ...]:
    """Quantized samples along ``path`` (in counts), resampled to ``n_points`` if needed."""
    if len(path) != n_points:
        path = _resample_path(path, n_points)
    steps = _quantize(path)
    t = np.cumsum(dt)
    return tuple(FlowSample(int(dx), int(dy), int(ti)) for (dx, dy), ti in zip(steps, t))


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def _split_summary(accuracies: List[float]) -> Dict[str, Any]:
    a = np.array(accuracies)
    return {
        "mean": float(a.mean()),
        "min": float(a.min()),
        "max": float(a.max()),
        "per_split": [float(x) for x in a],
    }


def evaluate(
    strokes: Sequence[Stroke],
    config: TrainConfig,
    splits: int = 5,
    seed: int = 0,
    test_size: float = 0.2,
) -> Dict[str, Any]:
    """Pooled random held-out splits plus leave-one-user-out when users are known."""
    strokes = list(strokes)
    labels = np.array([s.label for s in strokes])
    classes = sorted(set(labels.tolist()))
    indices = np.arange(len(strokes))
    pooled, total = [], np.zeros((len(classes), len(classes)), dtype=np.int64)
    for k in range(splits):
        train_idx, test_idx = train_test_split(
            indices, test_size=test_size, stratify=labels, random_state=seed + k
        )
        model = train([strokes[i] for i in train_idx], config)
        predicted = [classify(model, strokes[i]).label for i in test_idx]
        pooled.append(float(accuracy_score(labels[test_idx], predicted)))
        total += confusion_matrix(labels[test_idx], predicted, labels=classes)
        logger.info(f"split {k}: held-out accuracy {pooled[-1]:.3f}")

    result: Dict[str, Any] = {
        "classes": classes,
        "samples": len(strokes),
        "pooled": _split_summary(pooled),
        "confusion_matrix": total.tolist(),
    }

    users = sorted({s.user for s in strokes if s.user is not None})
    if len(users) >= 2 and all(s.user is not None for s in strokes):
        per_user = {}
        for user in users:
            held = [s for s in strokes if s.user == user]
            rest = [s for s in strokes if s.user != user]
            model = train(rest, config)
            predicted = [classify(model, s).label for s in held]
            per_user[user] = float(accuracy_score([s.label for s in held], predicted))
        summary = _split_summary(list(per_user.values()))
        summary["per_user"] = per_user
        result["leave_one_user_out"] = summary
    return result


# ---------------------------------------------------------------------------
# Stroke files
# ---------------------------------------------------------------------------


def read_strokes(path: Union[str, Path]) -> Tuple[List[List[FlowSample]], List[Dict[str, Any]], Optional[str]]:
    """Parse a JSON-lines stroke file into sample blocks, their headers and the device id."""
    blocks: List[List[FlowSample]] = []
    headers: List[Dict[str, Any]] = []
    device_id = None
    current: List[FlowSample] = []
    header: Dict[str, Any] = {}
    offset = 0
    for lineno, raw in enumerate(Path(path).read_bytes().splitlines(keepends=True), 1):
        start = offset
        offset += len(raw)
        try:
            line = raw.decode("utf-8").strip()
        except UnicodeDecodeError as e:
            raise MalformedRecord(f"{path}:{lineno}: not UTF-8 text", offset=start + e.start) from e
        if not line:
            if current:
                blocks.append(current)
                headers.append(header)
            current, header = [], {}
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise MalformedRecord(f"{path}:{lineno}: {e.msg}", offset=start) from e
        if not isinstance(record, dict):
            raise MalformedRecord(f"{path}:{lineno}: expected an object", offset=start)
        if "dx" in record:
            try:
                current.append(FlowSample(int(record["dx"]), int(record["dy"]), int(record["t"])))
            except (KeyError, TypeError, ValueError) as e:
                raise MalformedRecord(f"{path}:{lineno}: bad sample {record}", offset=start) from e
        elif "device_id" in record and not current and not blocks and "label" not in record:
            device_id = str(record["device_id"])
        else:
            header = record
    if current:
        blocks.append(current)
        headers.append(header)
    return blocks, headers, device_id


def load_strokes(path: Union[str, Path]) -> Tuple[List[Stroke], Optional[str]]:
    blocks, headers, device_id = read_strokes(path)
    strokes = [
        Stroke(tuple(b), label=h.get("label"), user=h.get("user"), device_id=device_id)
        for b, h in zip(blocks, headers)
    ]
    return strokes, device_id


def write_strokes(path: Union[str, Path], strokes: Iterable[Stroke], device_id: Optional[str] = None) -> Path:
    lines = []
    if device_id is not None:
        lines.append(json.dumps({"device_id": device_id}, sort_keys=True))
        lines.append("")
    for stroke in strokes:
        header = {k: v for k, v in (("label", stroke.label), ("user", stroke.user)) if v is not None}
        if header:
            lines.append(json.dumps(header, sort_keys=True))
        for s in stroke.samples:
            lines.append(json.dumps({"dx": s.dx, "dy": s.dy, "t": s.t}, sort_keys=True))
        lines.append("")
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path
