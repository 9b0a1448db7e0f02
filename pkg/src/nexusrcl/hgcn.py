"""Heterogeneous graph convolutional ranking model, plain numpy.

Per-type input projections map service and host features into one shared
hidden space; each layer then passes messages along typed relations
(service->service, service->host, host->host, plus per-type self loops)
with mean aggregation and distinct weights per relation:

    h_v' = lrelu( sum_r 1/|N_r(v)| sum_{u in N_r(v)} W_r h_u  +  W_self(type v) h_v )

Messages flow along edge direction only, so nothing ever travels host->service.
Training is full-batch gradient descent with momentum; every gradient is
hand-derived and checked against finite differences in the test suite.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import EntityId
from .graphs import HetGraphCase

_LRELU_SLOPE = 0.01
_CHECKPOINT_MAGIC = b"NXRC1\n"


class ModelError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class HgcnConfig:
    hidden_dim: int = 64
    n_layers: int = 2
    learning_rate: float = 0.01
    epochs: int = 200
    seed: int = 0
    dropout: float = 0.1
    momentum: float = 0.9
    pseudo_weight: float = 0.5

    def __post_init__(self) -> None:
        if self.hidden_dim < 1 or self.n_layers < 1:
            raise ModelError("hidden_dim and n_layers must be >= 1")
        if not (0.0 <= self.dropout < 1.0):
            raise ModelError("dropout must be in [0, 1)")

    def to_json(self) -> dict:
        return {
            "hidden_dim": self.hidden_dim,
            "n_layers": self.n_layers,
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "seed": self.seed,
            "dropout": self.dropout,
            "momentum": self.momentum,
            "pseudo_weight": self.pseudo_weight,
        }

    @staticmethod
    def from_json(obj: dict) -> "HgcnConfig":
        return HgcnConfig(**obj)


def _param_order(n_layers: int) -> list[str]:
    names = ["w_in_s", "w_in_h"]
    for l in range(n_layers):
        names += [f"w_ss_{l}", f"w_sh_{l}", f"w_hh_{l}", f"w_self_s_{l}", f"w_self_h_{l}"]
    names += ["dec_s", "dec_h", "w_out"]
    return names


@dataclass
class HgcnModel:
    config: HgcnConfig
    f_s: int
    f_h: int
    params: dict[str, np.ndarray]
    # per-channel input scaling (divisors), fitted on training cases; not
    # trained, so they live outside the parameter dict
    scale_s: np.ndarray | None = None
    scale_h: np.ndarray | None = None

    @property
    def hidden(self) -> int:
        return self.config.hidden_dim

    def param_names(self) -> list[str]:
        return _param_order(self.config.n_layers)

    def copy(self) -> "HgcnModel":
        return HgcnModel(
            self.config,
            self.f_s,
            self.f_h,
            {k: v.copy() for k, v in self.params.items()},
            None if self.scale_s is None else self.scale_s.copy(),
            None if self.scale_h is None else self.scale_h.copy(),
        )


def init_model(cfg: HgcnConfig, f_s: int, f_h: int) -> HgcnModel:
    """Seeded init: uniform +-1/sqrt(fan_in); the score head starts at zero."""
    rng = np.random.default_rng(cfg.seed)
    d = cfg.hidden_dim
    shapes: dict[str, tuple[int, ...]] = {"w_in_s": (f_s, d), "w_in_h": (f_h, d)}
    for l in range(cfg.n_layers):
        for name in (f"w_ss_{l}", f"w_sh_{l}", f"w_hh_{l}", f"w_self_s_{l}", f"w_self_h_{l}"):
            shapes[name] = (d, d)
    shapes["dec_s"] = (d, f_s)
    shapes["dec_h"] = (d, f_h)
    shapes["w_out"] = (d,)
    params: dict[str, np.ndarray] = {}
    for name in _param_order(cfg.n_layers):
        shape = shapes[name]
        if name == "w_out":
            params[name] = np.zeros(shape)
            continue
        fan_in = max(1, shape[0])
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape)
    return HgcnModel(cfg, f_s, f_h, params)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


@dataclass
class _PreparedCase:
    case: HetGraphCase
    x_s: np.ndarray
    x_h: np.ndarray
    mats: dict[str, np.ndarray]  # row-normalized dst<-src operators
    mats_t: dict[str, np.ndarray]


def fit_feature_scales(model: HgcnModel, cases: Sequence[HetGraphCase]) -> None:
    """Set per-channel divisors to the channel's std over the given cases.

    Scaling is multiplicative only (no mean shift), so an all-zero input
    still maps to the zero embedding.  Channels that never vary keep scale 1.
    """
    svc = np.vstack([c.service_features for c in cases]) if cases else np.zeros((0, model.f_s))
    hst = np.vstack([c.host_features for c in cases]) if cases else np.zeros((0, model.f_h))
    std_s = svc.std(axis=0) if svc.size else np.ones(model.f_s)
    std_h = hst.std(axis=0) if hst.size else np.ones(model.f_h)
    model.scale_s = np.where(std_s > 1e-12, std_s, 1.0)
    model.scale_h = np.where(std_h > 1e-12, std_h, 1.0)


def prepare_case(model: HgcnModel, case: HetGraphCase) -> _PreparedCase:
    if case.service_features.shape[1] != model.f_s or case.host_features.shape[1] != model.f_h:
        raise ModelError(
            f"feature dims {case.service_features.shape[1]}/{case.host_features.shape[1]} "
            f"do not match model {model.f_s}/{model.f_h}"
        )
    n = case.n_nodes
    s_count = len(case.services)

    def norm_adj(edges, src_off, dst_off):
        a = np.zeros((n, n))
        for src, dst in edges:
            a[dst_off + dst, src_off + src] = 1.0
        deg = a.sum(axis=1, keepdims=True)
        nz = deg[:, 0] > 0
        a[nz] /= deg[nz]
        return a

    mats = {
        "ss": norm_adj(case.e_ss, 0, 0),
        "sh": norm_adj(case.e_sh, 0, s_count),
        "hh": norm_adj(case.e_hh, s_count, s_count),
    }
    x_s = case.service_features if model.scale_s is None else case.service_features / model.scale_s
    x_h = case.host_features if model.scale_h is None else case.host_features / model.scale_h
    return _PreparedCase(case, x_s, x_h, mats, {k: v.T.copy() for k, v in mats.items()})


def _forward(model: HgcnModel, prep: _PreparedCase, dropout_masks: list[np.ndarray] | None = None):
    p = model.params
    s_count = prep.x_s.shape[0]
    u0 = np.zeros((prep.x_s.shape[0] + prep.x_h.shape[0], model.hidden))
    u0[:s_count] = prep.x_s @ p["w_in_s"]
    u0[s_count:] = prep.x_h @ p["w_in_h"]
    # the projection is activated too, so sign-asymmetric responses to the
    # signed event inputs are representable from the first layer on
    h = np.where(u0 > 0, u0, _LRELU_SLOPE * u0)
    hs = [h]
    us = [u0]
    for l in range(model.config.n_layers):
        u = (
            prep.mats["ss"] @ (h @ p[f"w_ss_{l}"])
            + prep.mats["sh"] @ (h @ p[f"w_sh_{l}"])
            + prep.mats["hh"] @ (h @ p[f"w_hh_{l}"])
        )
        u[:s_count] += h[:s_count] @ p[f"w_self_s_{l}"]
        u[s_count:] += h[s_count:] @ p[f"w_self_h_{l}"]
        h = np.where(u > 0, u, _LRELU_SLOPE * u)
        if dropout_masks is not None:
            h = h * dropout_masks[l]
        hs.append(h)
        us.append(u)
    return h, (hs, us)


def _backward(
    model: HgcnModel,
    prep: _PreparedCase,
    cache,
    dz: np.ndarray,
    grads: dict[str, np.ndarray],
    dropout_masks: list[np.ndarray] | None = None,
) -> None:
    p = model.params
    hs, us = cache
    s_count = prep.x_s.shape[0]
    dh = dz
    for l in reversed(range(model.config.n_layers)):
        if dropout_masks is not None:
            dh = dh * dropout_masks[l]
        u = us[l + 1]
        du = dh * np.where(u > 0, 1.0, _LRELU_SLOPE)
        h_prev = hs[l]
        dh_prev = np.zeros_like(h_prev)
        for rel in ("ss", "sh", "hh"):
            at_du = prep.mats_t[rel] @ du
            grads[f"w_{rel}_{l}"] += h_prev.T @ at_du
            dh_prev += at_du @ p[f"w_{rel}_{l}"].T
        grads[f"w_self_s_{l}"] += h_prev[:s_count].T @ du[:s_count]
        grads[f"w_self_h_{l}"] += h_prev[s_count:].T @ du[s_count:]
        dh_prev[:s_count] += du[:s_count] @ p[f"w_self_s_{l}"].T
        dh_prev[s_count:] += du[s_count:] @ p[f"w_self_h_{l}"].T
        dh = dh_prev
    du0 = dh * np.where(us[0] > 0, 1.0, _LRELU_SLOPE)
    grads["w_in_s"] += prep.x_s.T @ du0[:s_count]
    grads["w_in_h"] += prep.x_h.T @ du0[s_count:]


def encode(model: HgcnModel, case: HetGraphCase) -> np.ndarray:
    """Node embeddings, deterministic: dropout is never applied here."""
    prep = case if isinstance(case, _PreparedCase) else prepare_case(model, case)
    z, _ = _forward(model, prep)
    return z


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


@dataclass(frozen=True)
class NodeScoreVector:
    """Per-node root-cause probabilities plus the induced ranking.

    Ranking is best-first over global node indices (services, then hosts),
    ties broken by node index.
    """

    case_id: str
    scores: np.ndarray
    ranking: tuple[int, ...]
    nodes: tuple[EntityId, ...]

    def rank_of(self, entity: EntityId) -> int:
        """1-based rank of an entity in this score vector."""
        idx = self.nodes.index(entity)
        return self.ranking.index(idx) + 1

    def top(self, k: int) -> list[EntityId]:
        return [self.nodes[i] for i in self.ranking[:k]]

    def to_json(self) -> dict:
        return {
            "case_id": self.case_id,
            "scores": [float(v) for v in self.scores],
            "ranking": list(self.ranking),
            "nodes": [e.to_json() for e in self.nodes],
        }


def score(model: HgcnModel, case: HetGraphCase) -> NodeScoreVector:
    """Softmax over the per-node scalar head outputs."""
    z = encode(model, case)
    probs = _softmax(z @ model.params["w_out"])
    ranking = tuple(int(i) for i in np.argsort(-probs, kind="stable"))
    return NodeScoreVector(case.case_id, probs, ranking, tuple(case.node_ids()))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _zero_grads(model: HgcnModel) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in model.params.items()}


def reconstruction_loss(model: HgcnModel, prep: _PreparedCase, grads: dict[str, np.ndarray] | None = None) -> float:
    """Mean squared feature reconstruction error for one case."""
    p = model.params
    s_count = prep.x_s.shape[0]
    z, cache = _forward(model, prep)
    err_s = z[:s_count] @ p["dec_s"] - prep.x_s
    err_h = z[s_count:] @ p["dec_h"] - prep.x_h
    n_total = max(1, err_s.size + err_h.size)
    with np.errstate(over="ignore"):
        loss = (float(np.sum(err_s**2)) + float(np.sum(err_h**2))) / n_total
    if grads is not None:
        d_s = 2.0 * err_s / n_total
        d_h = 2.0 * err_h / n_total
        grads["dec_s"] += z[:s_count].T @ d_s
        grads["dec_h"] += z[s_count:].T @ d_h
        dz = np.zeros_like(z)
        dz[:s_count] = d_s @ p["dec_s"].T
        dz[s_count:] = d_h @ p["dec_h"].T
        _backward(model, prep, cache, dz, grads)
    return loss


def supervised_loss(
    model: HgcnModel,
    prep: _PreparedCase,
    target: int,
    grads: dict[str, np.ndarray] | None = None,
    weight: float = 1.0,
    dropout_masks: list[np.ndarray] | None = None,
) -> float:
    """Cross-entropy of the softmax node scores against a one-hot root cause."""
    z, cache = _forward(model, prep, dropout_masks)
    probs = _softmax(z @ model.params["w_out"])
    loss = -float(np.log(max(probs[target], 1e-300)))
    if grads is not None:
        dlogits = probs.copy()
        dlogits[target] -= 1.0
        dlogits *= weight
        grads["w_out"] += z.T @ dlogits
        dz = np.outer(dlogits, model.params["w_out"])
        _backward(model, prep, cache, dz, grads, dropout_masks)
    return weight * loss


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _gd_step(model: HgcnModel, grads: dict[str, np.ndarray], velocity: dict[str, np.ndarray], cfg: HgcnConfig) -> None:
    for name, g in grads.items():
        velocity[name] = cfg.momentum * velocity[name] + g
        model.params[name] -= cfg.learning_rate * velocity[name]


def pretrain(model: HgcnModel, cases: Sequence[HetGraphCase], cfg: HgcnConfig) -> list[float]:
    """Self-supervised reconstruction pretraining; returns the loss curve."""
    if not cases:
        raise ModelError("pretrain needs at least one case")
    preps = [prepare_case(model, c) for c in cases]
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    curve: list[float] = []
    # overflow in a diverging run is detected via the finiteness check
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(cfg.epochs):
            grads = _zero_grads(model)
            total = 0.0
            for prep in preps:
                total += reconstruction_loss(model, prep, grads)
            total /= len(preps)
            for g in grads.values():
                g /= len(preps)
            if not np.isfinite(total):
                raise DivergenceError(f"reconstruction loss diverged at epoch {epoch}: {total}")
            curve.append(total)
            _gd_step(model, grads, velocity, cfg)
    return curve


@dataclass(frozen=True)
class LabeledCase:
    case: HetGraphCase
    target: int  # global node index of the root cause
    weight: float


def labeled_from_cases(cases: Sequence[HetGraphCase], pseudo_weight: float) -> list[LabeledCase]:
    """Pick each case's effective label; no-fault and unlabeled cases drop out."""
    out: list[LabeledCase] = []
    for case in cases:
        label = case.effective_label()
        if label is None or label.is_no_fault:
            continue
        target = case.global_index(label.root_cause)
        out.append(LabeledCase(case, target, 1.0 if label.is_trusted else pseudo_weight))
    return out


def train_supervised(model: HgcnModel, labeled: Sequence[LabeledCase], cfg: HgcnConfig) -> list[float]:
    """Fine-tune with weighted cross-entropy; returns the loss curve."""
    if not labeled:
        raise ModelError("no supervision: empty labeled set")
    preps = [(prepare_case(model, lc.case), lc.target, lc.weight) for lc in labeled]
    total_weight = sum(w for _, _, w in preps)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    rng = np.random.default_rng(cfg.seed + 1)
    curve: list[float] = []
    for epoch in range(cfg.epochs):
        grads = _zero_grads(model)
        total = 0.0
        for prep, target, weight in preps:
            masks = None
            if cfg.dropout > 0.0:
                keep = 1.0 - cfg.dropout
                masks = [
                    (rng.random((prep.case.n_nodes, model.hidden)) < keep) / keep
                    for _ in range(cfg.n_layers)
                ]
            total += supervised_loss(model, prep, target, grads, weight, masks)
        total /= total_weight
        for g in grads.values():
            g /= total_weight
        if not np.isfinite(total):
            raise DivergenceError(f"supervised loss diverged at epoch {epoch}: {total}")
        curve.append(total)
        _gd_step(model, grads, velocity, cfg)
    return curve


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def gradient_check(
    model: HgcnModel,
    case: HetGraphCase,
    target: int,
    epsilon: float = 1e-5,
    max_entries_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic gradients and central differences."""
    if not (0.0 < epsilon <= 1e-2):
        raise ModelError("epsilon must be in (0, 1e-2]")
    rng = rng or np.random.default_rng(0)
    prep = prepare_case(model, case)
    grads = _zero_grads(model)
    supervised_loss(model, prep, target, grads)

    worst = 0.0
    for name, grad in grads.items():
        flat_grad = grad.ravel()
        n = flat_grad.size
        if max_entries_per_param is not None and n > max_entries_per_param:
            idxs = rng.choice(n, size=max_entries_per_param, replace=False)
        else:
            idxs = np.arange(n)
        param = model.params[name].ravel()
        for i in idxs:
            orig = param[i]
            param[i] = orig + epsilon
            up = supervised_loss(model, prep, target)
            param[i] = orig - epsilon
            down = supervised_loss(model, prep, target)
            param[i] = orig
            numeric = (up - down) / (2.0 * epsilon)
            # floor keeps the finite-difference noise floor (~1e-11 absolute)
            # from dominating near-zero entries
            denom = max(abs(numeric), abs(flat_grad[i]), 1e-3)
            worst = max(worst, abs(numeric - flat_grad[i]) / denom)
    return worst


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------


def save_checkpoint(model: HgcnModel, path: Path) -> None:
    """JSON header (config, dims, parameter shapes) + little-endian f32 blob."""
    header = {
        "config": model.config.to_json(),
        "f_s": model.f_s,
        "f_h": model.f_h,
        "scale_s": None if model.scale_s is None else [float(v) for v in model.scale_s],
        "scale_h": None if model.scale_h is None else [float(v) for v in model.scale_h],
        "params": [{"name": n, "shape": list(model.params[n].shape)} for n in model.param_names()],
    }
    blob = np.concatenate([model.params[n].ravel() for n in model.param_names()]).astype("<f4")
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(blob.tobytes())


def load_checkpoint(path: Path) -> HgcnModel:
    with open(path, "rb") as fh:
        magic = fh.read(len(_CHECKPOINT_MAGIC))
        if magic != _CHECKPOINT_MAGIC:
            raise ModelError(f"not a model checkpoint: {path}")
        (head_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(head_len).decode("utf-8"))
        blob = np.frombuffer(fh.read(), dtype="<f4").astype(np.float64)
    cfg = HgcnConfig.from_json(header["config"])
    params: dict[str, np.ndarray] = {}
    offset = 0
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        params[entry["name"]] = blob[offset : offset + size].reshape(shape)
        offset += size
    scale_s = header.get("scale_s")
    scale_h = header.get("scale_h")
    return HgcnModel(
        cfg,
        int(header["f_s"]),
        int(header["f_h"]),
        params,
        None if scale_s is None else np.asarray(scale_s, dtype=float),
        None if scale_h is None else np.asarray(scale_h, dtype=float),
    )
