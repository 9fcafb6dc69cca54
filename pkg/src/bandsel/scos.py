"""Single-combination one-shot supernet at toy scale, with hand-written backprop.

Shapes, per sample (batch dimension omitted)::

    patch      P x P x N   -> transposed patch X : N x HW   (row b = band b's pixels)
    encode     APE / CLPE : E = X W1 + b1 + E_ss
               SLPE       : E = (X W1 + b1 + E_p) W2 + b2 + E_b
               none       : E = X W1 + b1
    select     M = E[bc]                              K x HW
    tokens     T = tanh(M Wt + bt)                    K x D
    pool       g = mean_k T                           D
    heads      classification  logits = g Wo + bo     C
               reconstruction  Y[s] = sum_k M[k, s] (T_k Wv + bv) + bo    per pixel s, N outputs

``E_ss`` is the fixed sinusoidal table for APE and a free parameter for CLPE.
Training samples one uniform random band combination per step and takes a
plain gradient step on cross-entropy (classification) or MRAE (reconstruction).
"""

from __future__ import annotations

import csv
import json
import math
from collections.abc import Sequence
from dataclasses import dataclass, field, replace

import numpy as np

from .bench import regret, spearman
from .hsi import CLASSIFICATION, RECONSTRUCTION, HsiCube, LabelMap, TaskSpec, check_bc, format_bc
from .metrics import classification_metrics, mrae, psnr
from .search import SearchResult, _as_space, random_search

PE_KINDS = ("ape", "clpe", "slpe", "none")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step


# ---------------------------------------------------------------- data


def transform_patch(patch) -> np.ndarray:
    """(H, W, N) patch -> (H*W, N) matrix, spatial sites in row-major order."""
    patch = np.asarray(patch)
    if patch.ndim != 3:
        raise ValueError(f"patch must be (H, W, N), got shape {patch.shape}")
    h, w, n = patch.shape
    return patch.reshape(h * w, n)


@dataclass(frozen=True, eq=False)
class ScosData:
    """Patches in the band-major orientation, ``x[i]`` is N x HW, plus targets.

    Classification targets are 0-based class ids of the centre pixel;
    reconstruction targets are the patch spectra, (HW, N) per sample.
    """

    task: TaskSpec
    x: np.ndarray
    y: np.ndarray
    patch: int
    num_classes: int = 0

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def num_bands(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> ScosData:
        return ScosData(self.task, self.x[idx], self.y[idx], self.patch, self.num_classes)


def make_patches(cube: HsiCube, labels: LabelMap | None = None, patch: int = 3, stride: int = 1) -> ScosData:
    """All fully contained ``patch`` x ``patch`` windows (centres on a ``stride`` grid).

    With a label map the task is classification on labelled centre pixels.
    """
    if patch < 1:
        raise ValueError("patch size must be positive")
    vol = cube.values.astype(np.float64).transpose(1, 2, 0)  # H, W, N
    h, w, n = vol.shape
    if patch > min(h, w):
        raise ValueError(f"patch {patch} larger than cube {h}x{w}")
    r = patch // 2
    xs, ys = [], []
    for i in range(0, h - patch + 1, stride):
        for j in range(0, w - patch + 1, stride):
            tp = transform_patch(vol[i : i + patch, j : j + patch])
            if labels is not None:
                c = int(labels.labels[i + r, j + r])
                if c == 0:
                    continue
                ys.append(c - 1)
            else:
                ys.append(tp)
            xs.append(tp.T)
    x = np.stack(xs)
    if labels is not None:
        return ScosData(CLASSIFICATION, x, np.array(ys, dtype=np.int64), patch, labels.num_classes)
    return ScosData(RECONSTRUCTION, x, np.stack(ys), patch)


def split_data(data: ScosData, val_frac: float, seed: int) -> tuple[ScosData, ScosData]:
    if not 0.0 < val_frac < 1.0:
        raise ValueError("val_frac must lie in (0, 1)")
    perm = np.random.default_rng(seed).permutation(len(data))
    n_val = min(max(int(round(val_frac * len(data))), 1), len(data) - 1)
    return data.subset(np.sort(perm[n_val:])), data.subset(np.sort(perm[:n_val]))


# ---------------------------------------------------------------- params


def ape_embedding(n_bands: int, hw: int) -> np.ndarray:
    """Sinusoidal band/site table: sin at even columns, cos at odd, 0-based indices."""
    i = np.arange(n_bands, dtype=np.float64)[:, None]
    col = np.arange(hw)
    freq = 10000.0 ** (-(2 * (col // 2)) / hw)
    angle = i * freq[None, :]
    return np.where(col[None, :] % 2 == 0, np.sin(angle), np.cos(angle))


@dataclass
class SupernetParams:
    pe_kind: str
    task: str
    n_bands: int
    weights: dict[str, np.ndarray]
    fixed: dict[str, np.ndarray] = field(default_factory=dict)
    steps: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.pe_kind not in PE_KINDS:
            raise ValueError(f"unknown pe_kind {self.pe_kind!r}; expected one of {PE_KINDS}")
        want = set(_param_names(self.pe_kind, self.task))
        have = set(self.weights)
        if want != have:
            raise ValueError(f"{self.pe_kind} parameters must be {sorted(want)}, got {sorted(have)}")
        for k, v in {**self.weights, **self.fixed}.items():
            if not np.all(np.isfinite(v)):
                raise ValueError(f"parameter {k} has non-finite entries")

    @property
    def hw(self) -> int:
        return self.weights["W1"].shape[0]

    def all(self) -> dict[str, np.ndarray]:
        return {**self.weights, **self.fixed}

    def copy(self) -> SupernetParams:
        return SupernetParams(
            self.pe_kind, self.task, self.n_bands,
            {k: v.copy() for k, v in self.weights.items()},
            {k: v.copy() for k, v in self.fixed.items()},
            self.steps, self.seed,
        )

    def to_json(self) -> str:
        def enc(d):
            return {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in sorted(d.items())}

        return json.dumps(
            {
                "pe_kind": self.pe_kind,
                "task": self.task,
                "n_bands": self.n_bands,
                "steps": self.steps,
                "seed": self.seed,
                "weights": enc(self.weights),
                "fixed": enc(self.fixed),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> SupernetParams:
        obj = json.loads(text)

        def dec(d):
            return {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in d.items()}

        return cls(obj["pe_kind"], obj["task"], obj["n_bands"], dec(obj["weights"]), dec(obj["fixed"]), obj["steps"], obj["seed"])

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> SupernetParams:
        with open(path) as fh:
            return cls.from_json(fh.read())


def _param_names(pe_kind: str, task: str) -> list[str]:
    names = ["W1", "b1", "Wt", "bt", "bo"]
    if pe_kind == "clpe":
        names.append("E_ss")
    elif pe_kind == "slpe":
        names += ["W2", "b2", "E_p", "E_b"]
    names += ["Wo"] if task == "classification" else ["Wv", "bv"]
    return names


def init_params(
    pe_kind: str,
    task: str,
    n_bands: int,
    hw: int,
    hidden: int = 32,
    num_classes: int = 0,
    seed: int = 0,
    embed_scale: float = 0.5,
) -> SupernetParams:
    rng = np.random.default_rng(seed)
    w = {
        "W1": np.eye(hw) + rng.normal(0.0, 0.1 / np.sqrt(hw), size=(hw, hw)),
        "b1": np.zeros(hw),
        "Wt": rng.normal(0.0, 1.0 / np.sqrt(hw), size=(hw, hidden)),
        "bt": np.zeros(hidden),
    }
    fixed = {}
    if pe_kind == "ape":
        fixed["E_ss"] = ape_embedding(n_bands, hw)
    elif pe_kind == "clpe":
        w["E_ss"] = rng.normal(0.0, embed_scale, size=(n_bands, hw))
    elif pe_kind == "slpe":
        w["W2"] = np.eye(hw) + rng.normal(0.0, 0.1 / np.sqrt(hw), size=(hw, hw))
        w["b2"] = np.zeros(hw)
        w["E_p"] = rng.normal(0.0, embed_scale, size=hw)
        w["E_b"] = rng.normal(0.0, embed_scale, size=n_bands)
    if task == "classification":
        if num_classes < 2:
            raise ValueError("classification needs at least two classes")
        w["Wo"] = rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, num_classes))
        w["bo"] = np.zeros(num_classes)
    else:
        w["Wv"] = rng.normal(0.0, 0.1 / np.sqrt(hidden), size=(hidden, n_bands))
        w["bv"] = np.full(n_bands, 1.0 / 3.0)
        w["bo"] = np.zeros(n_bands)
    return SupernetParams(pe_kind, task, n_bands, w, fixed, 0, seed)


# ---------------------------------------------------------------- forward / backward


def encode(params: SupernetParams, x: np.ndarray) -> np.ndarray:
    """Encoded input E_H for a batch (B, N, HW) or a single N x HW matrix."""
    return _encode(params, np.asarray(x, dtype=np.float64))[0]


def _encode(params: SupernetParams, x: np.ndarray):
    p = params.all()
    hw = p["W1"].shape[0]
    if x.shape[-1] != hw:
        raise ValueError(f"input has {x.shape[-1]} spatial sites, parameters expect {hw}")
    a = x @ p["W1"] + p["b1"]
    if x.shape[-2] != params.n_bands:
        raise ValueError(f"input has {x.shape[-2]} bands, parameters expect {params.n_bands}")
    if params.pe_kind in ("ape", "clpe"):
        return a + p["E_ss"], (a,)
    if params.pe_kind == "slpe":
        z = a + p["E_p"]
        return z @ p["W2"] + p["b2"] + p["E_b"][:, None], (a, z)
    return a, (a,)


def select_encoded(e_h: np.ndarray, bc: Sequence[int]) -> np.ndarray:
    """Rows of E_H (last-but-one axis) picked by the band combination."""
    bc = check_bc(bc, e_h.shape[-2])
    return e_h[..., list(bc), :]


def _head(params: SupernetParams, m: np.ndarray):
    p = params.weights
    u = m @ p["Wt"] + p["bt"]
    t = np.tanh(u)
    g = t.mean(axis=-2)
    if params.task == "classification":
        return g @ p["Wo"] + p["bo"], (t, g, None)
    atoms = t @ p["Wv"] + p["bv"]  # B, K, N
    out = np.einsum("...ks,...kn->...sn", m, atoms) + p["bo"]
    return out, (t, g, atoms)


def forward(params: SupernetParams, x: np.ndarray, bc: Sequence[int]) -> np.ndarray:
    """Class logits (B, C) or reconstructed patch spectra (B, HW, N)."""
    x = np.asarray(x, dtype=np.float64)
    e_h, _ = _encode(params, x)
    out, _ = _head(params, select_encoded(e_h, bc))
    return out


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def loss_and_grad(params: SupernetParams, x, y, bc: Sequence[int], loss: str | None = None, eps: float = 1e-3):
    """Mean loss over the batch and its gradient for every trainable parameter.

    ``loss`` defaults to ``ce`` for classification and ``mrae`` for
    reconstruction; ``mse`` is accepted for either head's raw output.
    ``eps`` guards the MRAE denominator during training.
    """
    x = np.asarray(x, dtype=np.float64)
    bc = list(check_bc(bc, x.shape[1]))
    p = params.all()
    w = params.weights
    loss = loss or ("ce" if params.task == "classification" else "mrae")
    b = x.shape[0]

    e_h, cache = _encode(params, x)
    m = e_h[:, bc, :]
    out, (t, g, atoms) = _head(params, m)

    if loss == "ce":
        prob = _softmax(out)
        value = float(-np.mean(np.log(prob[np.arange(b), y] + 1e-300)))
        d_out = prob.copy()
        d_out[np.arange(b), y] -= 1.0
        d_out /= b
    elif loss == "mrae":
        diff = out - y
        denom = y + eps
        value = float(np.mean(np.abs(diff) / denom))
        d_out = np.sign(diff) / denom / diff.size
    elif loss == "mse":
        diff = out - y
        value = float(np.mean(diff**2))
        d_out = 2.0 * diff / diff.size
    else:
        raise ValueError(f"unknown loss {loss!r}")

    grads: dict[str, np.ndarray] = {}
    k = len(bc)
    if params.task == "classification":
        grads["Wo"] = g.T @ d_out if g.ndim == 2 else np.outer(g, d_out)
        grads["bo"] = d_out.sum(axis=0)
        d_g = d_out @ w["Wo"].T
        d_t = np.repeat(d_g[:, None, :], k, axis=1) / k
        d_m = np.zeros_like(m)
    else:
        # out[b, s, n] = sum_k m[b, k, s] * atoms[b, k, n] + bo[n]
        grads["bo"] = d_out.sum(axis=(0, 1))
        d_atoms = np.einsum("bks,bsn->bkn", m, d_out)
        d_m = np.einsum("bsn,bkn->bks", d_out, atoms)
        grads["Wv"] = np.einsum("bkd,bkn->dn", t, d_atoms)
        grads["bv"] = d_atoms.sum(axis=(0, 1))
        d_t = d_atoms @ w["Wv"].T
    d_u = d_t * (1.0 - t**2)
    grads["Wt"] = np.einsum("bks,bkd->sd", m, d_u)
    grads["bt"] = d_u.sum(axis=(0, 1))
    d_m = d_m + d_u @ w["Wt"].T

    d_e = np.zeros_like(e_h)
    d_e[:, bc, :] = d_m
    if params.pe_kind == "slpe":
        a, z = cache
        grads["E_b"] = d_e.sum(axis=(0, 2))
        grads["b2"] = d_e.sum(axis=(0, 1))
        grads["W2"] = np.einsum("bns,bnt->st", z, d_e)
        d_z = d_e @ w["W2"].T
        grads["E_p"] = d_z.sum(axis=(0, 1))
        d_a = d_z
    else:
        if params.pe_kind == "clpe":
            grads["E_ss"] = d_e.sum(axis=0)
        d_a = d_e
    grads["b1"] = d_a.sum(axis=(0, 1))
    grads["W1"] = np.einsum("bns,bnt->st", x, d_a)
    return value, grads


def grad_check(params: SupernetParams, x, y, bc: Sequence[int], loss: str | None = None, step: float = 1e-4, floor: float = 1e-8) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``.
    """
    _, grads = loss_and_grad(params, x, y, bc, loss)
    probe = params.copy()
    worst = 0.0
    for name, g in grads.items():
        arr = probe.weights[name]
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up, _ = loss_and_grad(probe, x, y, bc, loss)
            flat[i] = orig - step
            down, _ = loss_and_grad(probe, x, y, bc, loss)
            flat[i] = orig
            num = (up - down) / (2 * step)
            ana = g.reshape(-1)[i]
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class ScosTrainConfig:
    iterations: int = 6000
    batch_size: int = 32
    learning_rate: float = 0.3
    patch: int = 3
    k: int = 3
    val_frac: float = 0.5
    seed: int = 0
    pe_kind: str = "slpe"
    hidden: int = 32
    loss_eps: float = 1e-3
    clip_norm: float | None = 1.0

    def validate(self, n_bands: int | None = None) -> None:
        for name in ("batch_size", "patch", "k", "hidden"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive or None")
        if not 0.0 < self.val_frac < 1.0:
            raise ValueError("val_frac must lie in (0, 1)")
        if self.pe_kind not in PE_KINDS:
            raise ValueError(f"unknown pe_kind {self.pe_kind!r}")
        if n_bands is not None and not self.k < n_bands:
            raise ValueError(f"k={self.k} must be smaller than the band count {n_bands}")


def random_bc(rng: np.random.Generator, n_bands: int, k: int) -> tuple[int, ...]:
    return tuple(sorted(int(b) for b in rng.choice(n_bands, k, replace=False)))


def train_one_shot(
    train: ScosData,
    cfg: ScosTrainConfig = ScosTrainConfig(),
    params: SupernetParams | None = None,
    fixed_bc: Sequence[int] | None = None,
    log: list | None = None,
) -> SupernetParams:
    """One-shot training: every step draws one band combination and one minibatch.

    The step is plain gradient descent, with the gradient rescaled to global
    norm ``cfg.clip_norm`` when it is larger; the bilinear reconstruction head
    diverges without this. ``fixed_bc`` pins the combination (fine-tuning);
    ``params`` warm-starts.
    Appends ``(step, loss, bands)`` rows to ``log`` when given.
    """
    cfg.validate(train.num_bands)
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = init_params(
            cfg.pe_kind, train.task.kind, train.num_bands, train.x.shape[2],
            cfg.hidden, train.num_classes, cfg.seed,
        )
    else:
        params = params.copy()
    bsz = min(cfg.batch_size, len(train))
    for step in range(cfg.iterations):
        bc = tuple(fixed_bc) if fixed_bc is not None else random_bc(rng, train.num_bands, cfg.k)
        idx = rng.choice(len(train), bsz, replace=False)
        value, grads = loss_and_grad(params, train.x[idx], train.y[idx], bc, eps=cfg.loss_eps)
        if not math.isfinite(value):
            raise TrainingDiverged(step, value)
        scale = cfg.learning_rate
        if cfg.clip_norm is not None:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > cfg.clip_norm:
                scale *= cfg.clip_norm / norm
        for name, g in grads.items():
            params.weights[name] -= scale * g
        if log is not None:
            log.append((step, value, bc))
    params.steps += cfg.iterations
    params.seed = cfg.seed
    return params


def write_training_log(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "bands"])
        for step, value, bc in rows:
            w.writerow([step, repr(value), format_bc(bc)])


def finetune(params: SupernetParams, train: ScosData, bc: Sequence[int], cfg: ScosTrainConfig, warm_start: bool = False) -> SupernetParams:
    """Train on a single band combination, from scratch unless ``warm_start``."""
    return train_one_shot(train, cfg, params if warm_start else None, fixed_bc=bc)


# ---------------------------------------------------------------- evaluation and search


def _metrics(task: TaskSpec, out: np.ndarray, y: np.ndarray, num_classes: int) -> dict[str, float]:
    if task.kind == "classification":
        pred = np.argmax(out, axis=1) + 1
        return classification_metrics(pred, y + 1, num_classes)
    return {"MRAE": mrae(out, y), "PSNR": psnr(out, y)}


def evaluate_bc(params: SupernetParams, val: ScosData, bc: Sequence[int]) -> float:
    """Primary validation metric of the supernet restricted to ``bc`` (inference only)."""
    if len(val) == 0:
        raise ValueError("empty validation set")
    out = forward(params, val.x, bc)
    return _metrics(val.task, out, val.y, val.num_classes)[val.task.primary_metric]


class SupernetEvaluator:
    """Evaluator flavor backed by a trained supernet; the encoding is computed once."""

    backbone_id = "scos"

    def __init__(self, params: SupernetParams, val: ScosData, dataset_id: str = "synthetic"):
        if len(val) == 0:
            raise ValueError("empty validation set")
        self.params = params
        self.val = val
        self.task = val.task
        self.dataset_id = dataset_id
        self._e_h = encode(params, val.x)

    def __call__(self, bc: Sequence[int], seed: int = 0) -> dict[str, float]:
        out, _ = _head(self.params, select_encoded(self._e_h, bc))
        return _metrics(self.task, out, self.val.y, self.val.num_classes)


def scos_search(params: SupernetParams, val: ScosData, space, m: int, seed: int = 0) -> SearchResult:
    """Random search of ``m`` combinations scored by supernet inference."""
    if m < 1:
        raise ValueError("M must be at least 1")
    space = _as_space(space)
    result = random_search(SupernetEvaluator(params, val), space, m, seed=seed)
    result.algorithm = "scos"
    result.config = {"M": min(m, space.size), "pe_kind": params.pe_kind}
    return result


def supernet_scores(params: SupernetParams, val: ScosData, bcs) -> dict[tuple[int, ...], float]:
    ev = SupernetEvaluator(params, val)
    metric = val.task.primary_metric
    return {tuple(bc): ev(bc)[metric] for bc in bcs}



@dataclass(frozen=True)
class AblationRow:
    pe_kind: str
    seed: int
    spearman: float
    bands: tuple[int, ...]
    regret: float


def pe_ablation(
    data: ScosData,
    table,
    cfg: ScosTrainConfig = ScosTrainConfig(),
    m: int = 200,
    pe_kinds: Sequence[str] = ("ape", "clpe", "slpe"),
) -> list[AblationRow]:
    """Train one supernet per position-embedding kind on the same split and seed.

    Each row holds the Spearman correlation between supernet scores and the
    table over every table entry, and the true-table regret of the combination
    found by :func:`scos_search` with ``m`` samples.
    """
    metric = data.task.primary_metric
    truth = table.values(metric)
    bcs = sorted(truth)
    train, val = split_data(data, cfg.val_frac, cfg.seed)
    rows = []
    for pe in pe_kinds:
        params = train_one_shot(train, replace(cfg, pe_kind=pe))
        scores = supernet_scores(params, val, bcs)
        rho = spearman([scores[b] for b in bcs], [truth[b] for b in bcs])
        found = scos_search(params, val, bcs, m, seed=cfg.seed)
        rows.append(AblationRow(pe, cfg.seed, rho, found.bands, regret(table, found.bands, metric)))
    return rows


def write_ablation_csv(rows: Sequence[AblationRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pe_kind", "seed", "spearman", "bands", "regret"])
        for r in rows:
            w.writerow([r.pe_kind, r.seed, repr(r.spearman), format_bc(r.bands), repr(r.regret)])
