"""Sigmoid MLP proxy for the switching policy: scenario vector -> line probabilities."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

log = logging.getLogger(__name__)

FORMAT, VERSION = "mlp", 1


class ModelFormatError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"training loss became non-finite at epoch {epoch}")
        self.epoch = epoch


@dataclass
class MLPModel:
    """``dims = [n_in, h, h, n_out]``; weights are stored as ``(fan_out, fan_in)``.

    ``norm`` holds the box used to map raw inputs onto ``[-1, 1]``; without it
    inputs enter the first layer unchanged.
    """

    weights: list
    biases: list
    norm: tuple | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=float) for w in self.weights]
        self.biases = [np.asarray(b, dtype=float) for b in self.biases]
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {k}: weight {w.shape} and bias {b.shape} disagree")
            if k and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ValueError(f"layer {k} input width does not match layer {k - 1}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {k} has non-finite parameters")
        if self.norm is not None:
            lo, hi = (np.asarray(v, dtype=float) for v in self.norm)
            if lo.shape != (self.n_in,) or hi.shape != (self.n_in,) or np.any(hi < lo):
                raise ValueError("normalization box does not match the input layer")
            self.norm = (lo, hi)

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_out(self) -> int:
        return self.weights[-1].shape[0]

    # -- normalization -------------------------------------------------------
    def _scale(self):
        lo, hi = self.norm
        half = (hi - lo) / 2.0
        # degenerate box components are only centred
        return (lo + hi) / 2.0, np.where(half > 0, half, 1.0)

    def normalize(self, gamma):
        gamma = np.asarray(gamma, dtype=float)
        if self.norm is None:
            return gamma
        mid, half = self._scale()
        return (gamma - mid) / half

    def denormalize(self, u):
        u = np.asarray(u, dtype=float)
        if self.norm is None:
            return u
        mid, half = self._scale()
        return u * half + mid

    # -- evaluation ----------------------------------------------------------
    def _check(self, gamma):
        gamma = np.asarray(gamma, dtype=float)
        if gamma.shape[-1] != self.n_in:
            raise ValueError(f"input has {gamma.shape[-1]} entries, model expects {self.n_in}")
        return gamma

    def activations(self, gamma) -> list[np.ndarray]:
        """Post-activation values of every layer, starting with the normalized input."""
        a = [self.normalize(self._check(gamma))]
        for w, b in zip(self.weights, self.biases):
            a.append(expit(a[-1] @ w.T + b))
        return a

    def forward(self, gamma) -> np.ndarray:
        return self.activations(gamma)[-1]

    def jacobian(self, gamma) -> np.ndarray:
        """Exact ``dL/dgamma`` (``n_out x n_in``) by reverse accumulation."""
        gamma = self._check(gamma)
        if gamma.ndim != 1:
            raise ValueError("jacobian takes a single input vector")
        acts = self.activations(gamma)
        J = np.eye(self.n_out)
        for k in range(len(self.weights) - 1, -1, -1):
            out = acts[k + 1]
            J = (J * (out * (1.0 - out))) @ self.weights[k]
        if self.norm is not None:
            J = J / self._scale()[1]
        return J

    # -- persistence ---------------------------------------------------------
    def to_json(self) -> dict:
        doc = {"format": FORMAT, "version": VERSION, "dims": self.dims,
               "layers": [{"w": w.tolist(), "b": b.tolist()}
                          for w, b in zip(self.weights, self.biases)],
               "norm": None if self.norm is None else {"lo": self.norm[0].tolist(),
                                                       "hi": self.norm[1].tolist()},
               "meta": self.meta}
        return doc

    def save(self) -> bytes:
        return json.dumps(self.to_json(), sort_keys=True).encode()


def forward(m: MLPModel, gamma) -> np.ndarray:
    return m.forward(gamma)


def jacobian(m: MLPModel, gamma) -> np.ndarray:
    return m.jacobian(gamma)


def snap(L) -> np.ndarray:
    """Line statuses from probabilities; 0.5 counts as energized."""
    return (np.asarray(L, dtype=float) >= 0.5).astype(float)


def save(m: MLPModel) -> bytes:
    return m.save()


def load(data, case=None) -> MLPModel:
    """Parse a saved model; with ``case`` the input layout must match it."""
    try:
        doc = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ModelFormatError(f"not a model file: {exc}") from None
    if not isinstance(doc, dict):
        raise ModelFormatError("model file must hold a JSON object")
    if doc.get("format", FORMAT) != FORMAT or doc.get("version", VERSION) != VERSION:
        raise ModelFormatError(f"unsupported model format {doc.get('format')!r} "
                               f"version {doc.get('version')!r}")
    missing = {"dims", "layers", "meta"} - doc.keys()
    if missing:
        raise ModelFormatError(f"model file lacks {sorted(missing)}")
    try:
        norm = doc.get("norm")
        m = MLPModel([l["w"] for l in doc["layers"]], [l["b"] for l in doc["layers"]],
                     None if norm is None else (norm["lo"], norm["hi"]), dict(doc["meta"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed model: {exc}") from None
    if m.dims != list(doc["dims"]):
        raise ModelFormatError(f"dims {doc['dims']} disagree with the layers {m.dims}")
    if case is not None:
        check_case(m, case)
    return m


def check_case(m: MLPModel, case) -> None:
    want = case.layout_hash()
    got = m.meta.get("layout_hash")
    if got != want:
        raise ModelFormatError(f"model was trained for layout {got}, case {case.name} has {want}")
    n_in = 2 * case.n_load + case.n_line + 1
    if m.n_in != n_in or m.n_out != case.n_line:
        raise ModelFormatError("model dimensions do not match the case")


def init_model(dims, seed: int = 0, norm=None, meta=None) -> MLPModel:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        ws.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)))
        bs.append(np.zeros(fan_out))
    return MLPModel(ws, bs, norm, dict(meta or {}))


@dataclass(frozen=True)
class TrainConfig:
    hidden: int = 32
    lr: float = 0.05
    epochs: int = 1000
    batch: int = 4
    seed: int = 0
    optimizer: str = "sgd"  # or "momentum", "adam"
    momentum: float = 0.9

    def __post_init__(self):
        if self.optimizer not in ("sgd", "momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.hidden < 1 or self.epochs < 0 or self.batch < 1 or not self.lr > 0:
            raise ValueError("invalid training configuration")


def bce(L, Y) -> float:
    L = np.clip(L, 1e-12, 1 - 1e-12)
    return float(-np.mean(Y * np.log(L) + (1 - Y) * np.log1p(-L)))


def _grads(m: MLPModel, X, Y):
    acts = [X]
    for w, b in zip(m.weights, m.biases):
        acts.append(expit(acts[-1] @ w.T + b))
    # sigmoid output with cross-entropy: dloss/dpre = L - y
    delta = (acts[-1] - Y) / Y.size
    gw, gb = [], []
    for k in range(len(m.weights) - 1, -1, -1):
        gw.append(delta.T @ acts[k])
        gb.append(delta.sum(axis=0))
        if k:
            delta = (delta @ m.weights[k]) * acts[k] * (1.0 - acts[k])
    return gw[::-1], gb[::-1]


def train(X, Y, cfg: TrainConfig = TrainConfig(), norm=None, meta=None) -> MLPModel:
    """Fit by mini-batch descent on mean binary cross-entropy; seeded and deterministic."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.ndim != 2 or Y.ndim != 2 or len(X) != len(Y) or len(X) == 0:
        raise ValueError("dataset must be nonempty with one label row per input row")
    if np.any((Y != 0) & (Y != 1)):
        raise ValueError("labels must be binary")
    dims = [X.shape[1], cfg.hidden, cfg.hidden, Y.shape[1]]
    meta = dict(meta or {})
    meta["train"] = {"hidden": cfg.hidden, "lr": cfg.lr, "epochs": cfg.epochs,
                     "batch": cfg.batch, "seed": cfg.seed, "optimizer": cfg.optimizer}
    m = init_model(dims, cfg.seed, norm, meta)
    Xn = m.normalize(X)
    rng = np.random.default_rng([cfg.seed, 1])
    params = m.weights + m.biases
    state1 = [np.zeros_like(p) for p in params]
    state2 = [np.zeros_like(p) for p in params]
    step = 0
    history = []
    n = len(Xn)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch):
            sel = order[start:start + cfg.batch]
            gw, gb = _grads(m, Xn[sel], Y[sel])
            grads = gw + gb
            step += 1
            for p, g, s1, s2 in zip(params, grads, state1, state2):
                if cfg.optimizer == "sgd":
                    p -= cfg.lr * g
                elif cfg.optimizer == "momentum":
                    s1 *= cfg.momentum
                    s1 += g
                    p -= cfg.lr * s1
                else:
                    s1 *= 0.9
                    s1 += 0.1 * g
                    s2 *= 0.999
                    s2 += 0.001 * g * g
                    mh = s1 / (1 - 0.9 ** step)
                    vh = s2 / (1 - 0.999 ** step)
                    p -= cfg.lr * mh / (np.sqrt(vh) + 1e-8)
        loss = bce(_forward_normalized(m, Xn), Y)
        if not math.isfinite(loss) or not all(np.all(np.isfinite(p)) for p in params):
            raise TrainingDiverged(epoch)
        history.append(loss)
    m.meta["train"]["final_loss"] = history[-1] if history else bce(m.forward(X), Y)
    m.meta["train"]["loss_history"] = history
    return m


def _forward_normalized(m: MLPModel, Xn):
    a = Xn
    for w, b in zip(m.weights, m.biases):
        a = expit(a @ w.T + b)
    return a


def dataset_arrays(records, case) -> tuple[np.ndarray, np.ndarray]:
    """Stack JSON-lines records into ``(gamma matrix, label matrix)``."""
    from .scenario import ScenarioInput

    X = np.array([ScenarioInput.from_dict(r["gamma"]).vector() for r in records])
    Y = np.array([r["z"] for r in records], dtype=float)
    if X.shape[1] != 2 * case.n_load + case.n_line + 1 or Y.shape[1] != case.n_line:
        raise ValueError("dataset does not match the case layout")
    return X, Y


def train_for_case(records, case, cfg: TrainConfig = TrainConfig()) -> MLPModel:
    from .scenario import gamma_box

    X, Y = dataset_arrays(records, case)
    meta = {"case": case.name, "layout_hash": case.layout_hash()}
    return train(X, Y, cfg, norm=gamma_box(case), meta=meta)


def accuracy(m: MLPModel, X, Y) -> float:
    return float(np.mean(snap(m.forward(X)) == np.asarray(Y)))
