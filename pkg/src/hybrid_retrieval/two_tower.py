"""Two-tower contrastive retrieval model trained with a two-stage curriculum.

Each tower averages hashed-feature embeddings, applies one affine layer and
``tanh``, then L2-normalises, so the seeker/job score ``z[i, j]`` is a cosine
similarity. Training minimises softmax cross-entropy over each row of the
score matrix: stage one over in-batch plus easy (inventory-sampled) negative
columns, stage two over the positive plus the hardest remaining columns with
a quadratic pull back toward the stage-one weights.
"""

from __future__ import annotations

import json
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import DocumentInput, IndexBuilder
from .pipeline import Executor, HybridQuery
from .quantizer import make_codec

log = logging.getLogger(__name__)

TOWERS = ("seeker", "job")
PARAM_NAMES = ("E", "W", "b")


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, state: dict):
        super().__init__(message)
        self.state = state


# -- features -----------------------------------------------------------------


def hash_token(token: str, buckets: int) -> int:
    return zlib.crc32(token.encode("utf-8")) % buckets


@dataclass(frozen=True)
class Features:
    """Padded hashed-feature ids for a set of entities."""

    ids: np.ndarray  # (n, L) int64
    mask: np.ndarray  # (n, L) bool

    def __len__(self) -> int:
        return self.ids.shape[0]

    def take(self, rows) -> "Features":
        return Features(self.ids[rows], self.mask[rows])

    @staticmethod
    def concat(parts: Sequence["Features"]) -> "Features":
        width = max(p.ids.shape[1] for p in parts)
        ids = np.concatenate([np.pad(p.ids, ((0, 0), (0, width - p.ids.shape[1]))) for p in parts])
        mask = np.concatenate([np.pad(p.mask, ((0, 0), (0, width - p.mask.shape[1]))) for p in parts])
        return Features(ids, mask)


def encode_features(token_lists: Sequence[Sequence[str]], buckets: int) -> Features:
    width = max([len(t) for t in token_lists] + [1])
    ids = np.zeros((len(token_lists), width), dtype=np.int64)
    mask = np.zeros((len(token_lists), width), dtype=bool)
    for i, tokens in enumerate(token_lists):
        for j, tok in enumerate(tokens):
            ids[i, j] = hash_token(tok, buckets)
            mask[i, j] = True
    return Features(ids, mask)


# -- model --------------------------------------------------------------------


@dataclass(frozen=True)
class TowerConfig:
    buckets: int = 4096
    hidden: int = 32
    out: int = 32


class TowerModel:
    """Parameters of both towers: hash table ``E``, affine ``W``/``b`` each."""

    def __init__(self, config: TowerConfig, params: dict[str, dict[str, np.ndarray]]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: TowerConfig, seed: int = 0, scale: float = 1.0) -> "TowerModel":
        rng = np.random.default_rng(seed)
        params = {}
        for tower in TOWERS:
            params[tower] = {
                "E": rng.normal(0.0, scale, (config.buckets, config.hidden)),
                "W": rng.normal(0.0, 1.0 / math.sqrt(config.hidden), (config.hidden, config.out)),
                "b": rng.normal(0.0, 0.1, config.out),
            }
        return cls(config, params)

    def copy(self) -> "TowerModel":
        return TowerModel(self.config, {t: {k: v.copy() for k, v in p.items()} for t, p in self.params.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[t][k].ravel() for t in TOWERS for k in PARAM_NAMES])

    def set_flat(self, vector: np.ndarray) -> None:
        pos = 0
        for t in TOWERS:
            for k in PARAM_NAMES:
                a = self.params[t][k]
                a[...] = vector[pos:pos + a.size].reshape(a.shape)
                pos += a.size

    def embed(self, tower: str, feats: Features) -> np.ndarray:
        return tower_forward(self.params[tower], feats)[0]

    def save(self, path) -> None:
        arrays = {f"{t}_{k}": self.params[t][k] for t in TOWERS for k in PARAM_NAMES}
        np.savez(path, config=json.dumps(asdict(self.config)), **arrays)

    @classmethod
    def load(cls, path) -> "TowerModel":
        with np.load(path) as data:
            config = TowerConfig(**json.loads(str(data["config"])))
            params = {t: {k: data[f"{t}_{k}"].copy() for k in PARAM_NAMES} for t in TOWERS}
        return cls(config, params)


def _flat_grads(grads: dict[str, dict[str, np.ndarray]]) -> np.ndarray:
    return np.concatenate([grads[t][k].ravel() for t in TOWERS for k in PARAM_NAMES])


def tower_forward(params: dict, feats: Features):
    counts = np.maximum(feats.mask.sum(axis=1, keepdims=True), 1)
    pooled = (params["E"][feats.ids] * feats.mask[:, :, None]).sum(axis=1) / counts
    pre = pooled @ params["W"] + params["b"]
    act = np.tanh(pre)
    norm = np.maximum(np.linalg.norm(act, axis=1, keepdims=True), 1e-12)
    out = act / norm
    return out, (feats, counts, pooled, act, norm, out)


def tower_backward(params: dict, cache, d_out: np.ndarray) -> dict[str, np.ndarray]:
    feats, counts, pooled, act, norm, out = cache
    d_act = (d_out - out * np.sum(d_out * out, axis=1, keepdims=True)) / norm
    d_pre = d_act * (1.0 - act**2)
    d_pooled = d_pre @ params["W"].T
    dE = np.zeros_like(params["E"])
    per_token = (d_pooled / counts)[:, None, :] * feats.mask[:, :, None]
    np.add.at(dE, feats.ids.ravel(), per_token.reshape(-1, per_token.shape[-1]))
    return {"E": dE, "W": pooled.T @ d_pre, "b": d_pre.sum(axis=0)}


# -- batches and losses ---------------------------------------------------------


@dataclass(frozen=True)
class TrainingBatch:
    seekers: Features  # m rows
    jobs: Features  # d columns: m positives then n/p easy negatives
    positives: np.ndarray  # (m,) column index of each row's positive

    @property
    def m(self) -> int:
        return len(self.seekers)

    @property
    def d(self) -> int:
        return len(self.jobs)


def in_batch(seekers: Features, jobs: Features) -> TrainingBatch:
    return TrainingBatch(seekers, jobs, np.arange(len(seekers)))


def score_matrix(model: TowerModel, batch: TrainingBatch) -> np.ndarray:
    s = model.embed("seeker", batch.seekers)
    j = model.embed("job", batch.jobs)
    return s @ j.T


def softmax_rows(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_loss(z: np.ndarray, positives) -> tuple[float, np.ndarray]:
    """Mean over rows of -log softmax(z_i)[pos_i], and its gradient w.r.t. z."""
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite scores")
    positives = np.asarray(positives)
    rows = np.arange(z.shape[0])
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_norm - shifted[rows, positives]))
    grad = softmax_rows(z)
    grad[rows, positives] -= 1.0
    return loss, grad / z.shape[0]


def mix_easy_negatives(
    seekers: Features, jobs: Features, inventory: Features, n: int, p: int, rng: np.random.Generator
) -> TrainingBatch:
    """Append n/p jobs sampled uniformly from the inventory as extra columns."""
    if p < 1 or n % p:
        raise ValueError(f"n={n} must be divisible by p={p}")
    extra = n // p
    if extra > len(inventory):
        raise ValueError(f"inventory of {len(inventory)} jobs cannot supply {extra} negatives")
    if extra == 0:
        return in_batch(seekers, jobs)
    sampled = rng.choice(len(inventory), size=extra, replace=False)
    return TrainingBatch(seekers, Features.concat([jobs, inventory.take(sampled)]), np.arange(len(seekers)))


def hard_negative_filter(z: np.ndarray, positives, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Per row keep the positive (first) plus the K-1 highest other columns.

    Returns the reduced (m, K) score matrix and the (m, K) original column
    indices. Ties among negatives go to the lower column index.
    """
    m, d = z.shape
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if K > d:
        raise ValueError(f"K={K} exceeds the {d} available columns")
    positives = np.asarray(positives)
    rows = np.arange(m)
    masked = z.astype(np.float64, copy=True)
    masked[rows, positives] = -np.inf
    # stable sort on -score keeps lower column indices first among ties
    order = np.argsort(-masked, axis=1, kind="stable")[:, : K - 1]
    cols = np.concatenate([positives[:, None], order], axis=1)
    return np.take_along_axis(z, cols, axis=1), cols


@dataclass
class LossTerms:
    loss: float
    grad: np.ndarray  # flat, same layout as TowerModel.flat()
    z: np.ndarray


def batch_loss_and_grad(
    model: TowerModel,
    batch: TrainingBatch,
    temperature: float = 1.0,
    hard_k: int | None = None,
    anchor: np.ndarray | None = None,
    consolidation: float = 0.0,
) -> LossTerms:
    """Full training objective of one step and its analytic gradient.

    ``hard_k`` switches on hard-negative filtering; ``anchor`` with
    ``consolidation`` adds ``consolidation * ||w - anchor||^2``.
    """
    s_out, s_cache = tower_forward(model.params["seeker"], batch.seekers)
    j_out, j_cache = tower_forward(model.params["job"], batch.jobs)
    z = s_out @ j_out.T
    if hard_k is None:
        loss, dz = softmax_loss(z / temperature, batch.positives)
        dz = dz / temperature
    else:
        reduced, cols = hard_negative_filter(z, batch.positives, hard_k)
        loss, d_reduced = softmax_loss(reduced / temperature, np.zeros(len(reduced), dtype=np.int64))
        dz = np.zeros_like(z)
        np.put_along_axis(dz, cols, d_reduced / temperature, axis=1)
    grads = {
        "seeker": tower_backward(model.params["seeker"], s_cache, dz @ j_out),
        "job": tower_backward(model.params["job"], j_cache, dz.T @ s_out),
    }
    flat = _flat_grads(grads)
    if anchor is not None and consolidation:
        diff = model.flat() - anchor
        loss += consolidation * float(diff @ diff)
        flat = flat + 2.0 * consolidation * diff
    if not math.isfinite(loss):
        raise TrainingDivergedError("non-finite loss", {"params": model.flat()})
    return LossTerms(loss, flat, z)


# -- metrics ------------------------------------------------------------------


def recall_at_k(retrieved: Sequence, actual: Sequence) -> float:
    """Mean over queries of |R_i & A_i| / |A_i|."""
    if len(retrieved) != len(actual):
        raise ValueError("retrieved and actual must have the same length")
    if not actual:
        raise ValueError("no queries")
    total = 0.0
    for r, a in zip(retrieved, actual):
        a = set(a)
        if not a:
            raise ValueError("empty relevant set")
        total += len(set(r) & a) / len(a)
    return total / len(actual)


def top_k_columns(z: np.ndarray, k: int) -> np.ndarray:
    return np.argsort(-z, axis=1, kind="stable")[:, :k]


def in_batch_recall(model: TowerModel, batch: TrainingBatch, k: int) -> float:
    if k > batch.d:
        raise ValueError(f"k={k} exceeds batch of {batch.d} columns")
    top = top_k_columns(score_matrix(model, batch), k)
    return recall_at_k([set(r) for r in top.tolist()], [{int(p)} for p in batch.positives])


def knn_recall(model: TowerModel, requests: Features, targets: Sequence[int], inventory: Features, k: int, max_batch: int = 16) -> float:
    """Recall of each request's target among its top ``k`` inventory jobs,
    retrieved through the full-scan pipeline with no term constraints."""
    if k > len(inventory):
        raise ValueError(f"k={k} exceeds inventory of {len(inventory)}")
    jobs = model.embed("job", inventory)
    builder = IndexBuilder(1, 0, model.config.out)
    for i, emb in enumerate(jobs):
        builder.add_document(DocumentInput(str(i), [[]], emb))
    index = builder.freeze(make_codec(model.config.out, 64, 0))
    queries = model.embed("seeker", requests)
    executor = Executor(index, max_batch)
    retrieved = []
    for start in range(0, len(queries), max_batch):
        chunk = [HybridQuery(embedding=q, k=k) for q in queries[start:start + max_batch]]
        retrieved.extend(set(r.row_ids.tolist()) for r in executor.execute_batch(chunk))
    return recall_at_k(retrieved, [{int(t)} for t in targets])


# -- training -----------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    m: int = 256  # batch size
    n: int = 0  # easy negatives per p batches
    p: int = 1
    K: int = 128  # stage-two columns per row
    learning_rate: float = 0.5
    stage2_lr_factor: float = 0.1
    stage1_steps: int = 200
    stage2_steps: int = 100
    consolidation: float = 0.0
    temperature: float = 0.1
    eval_every: int = 25
    eval_k: int = 10
    seed: int = 0
    tower: TowerConfig = field(default_factory=TowerConfig)

    def validate(self) -> None:
        if self.m < 2:
            raise ValueError("m must be >= 2")
        if self.p < 1 or self.n % self.p:
            raise ValueError("n must be divisible by p")
        d = self.m + self.n // self.p
        if not 1 <= self.K < d:
            raise ValueError(f"K must satisfy 1 <= K < d={d}")
        if self.temperature <= 0 or self.learning_rate <= 0:
            raise ValueError("temperature and learning_rate must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        tower = TowerConfig(**data.pop("tower", {}))
        return cls(tower=tower, **data)


@dataclass
class PairData:
    """Positive seeker/job pairs as hashed features plus the job inventory."""

    seekers: Features
    jobs: Features
    inventory: Features
    job_rows: np.ndarray  # inventory row of each pair's positive job

    def __len__(self) -> int:
        return len(self.seekers)

    def split(self, holdout: int) -> tuple["PairData", "PairData"]:
        cut = len(self) - holdout
        head = PairData(self.seekers.take(slice(0, cut)), self.jobs.take(slice(0, cut)), self.inventory, self.job_rows[:cut])
        tail = PairData(self.seekers.take(slice(cut, None)), self.jobs.take(slice(cut, None)), self.inventory, self.job_rows[cut:])
        return head, tail


@dataclass
class TrainResult:
    model: TowerModel
    stage1_model: TowerModel
    history: list[dict]


def mean_in_batch_recall(model: TowerModel, data: PairData, m: int, k: int) -> float:
    values = []
    for start in range(0, len(data) - m + 1, m):
        rows = slice(start, start + m)
        values.append(in_batch_recall(model, in_batch(data.seekers.take(rows), data.jobs.take(rows)), k))
    return float(np.mean(values))


def train(config: TrainConfig, data: PairData, validation: PairData | None = None) -> TrainResult:
    """Stage one on in-batch + easy negatives, stage two on hard negatives."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    model = TowerModel.init(config.tower, seed=config.seed)
    history: list[dict] = []
    step = 0
    anchor = None
    stage1_model = model

    def batches():
        while True:
            order = rng.permutation(len(data))
            for start in range(0, len(order) - config.m + 1, config.m):
                yield order[start:start + config.m]

    stream = batches()
    for stage, steps in ((1, config.stage1_steps), (2, config.stage2_steps)):
        lr = config.learning_rate * (1.0 if stage == 1 else config.stage2_lr_factor)
        if stage == 2:
            stage1_model = model.copy()
            anchor = stage1_model.flat()
        for _ in range(steps):
            rows = next(stream)
            batch = mix_easy_negatives(
                data.seekers.take(rows), data.jobs.take(rows), data.inventory, config.n, config.p, rng
            )
            assert batch.d == config.m + config.n // config.p
            try:
                terms = batch_loss_and_grad(
                    model,
                    batch,
                    config.temperature,
                    hard_k=config.K if stage == 2 else None,
                    anchor=anchor,
                    consolidation=config.consolidation if stage == 2 else 0.0,
                )
            except TrainingDivergedError as exc:
                exc.state.update(step=step, stage=stage, config=asdict(config))
                raise
            model.set_flat(model.flat() - lr * terms.grad)
            step += 1
            if step % config.eval_every == 0 or step == config.stage1_steps + config.stage2_steps:
                record = {"step": step, "stage": stage, "loss": terms.loss}
                if validation is not None and len(validation) >= config.m:
                    record[f"inBatchRecall@{config.eval_k}"] = mean_in_batch_recall(model, validation, config.m, config.eval_k)
                history.append(record)
                log.debug("step %d stage %d loss %.4f", step, stage, terms.loss)
    if config.stage2_steps == 0:
        stage1_model = model.copy()
    return TrainResult(model, stage1_model, history)


# -- synthetic data -----------------------------------------------------------


def make_clustered_data(
    n_pairs: int,
    n_coarse: int = 16,
    n_fine: int = 16,
    jobs_per_group: int = 4,
    noise_tokens: int = 3,
    keep_fine: float = 0.8,
    buckets: int = 4096,
    seed: int = 0,
) -> tuple[PairData, dict]:
    """Seekers and jobs drawn from shared coarse/fine latent clusters.

    Each (coarse, fine) group owns ``jobs_per_group`` inventory jobs; a seeker
    engages a random job of its own group. Group tokens are partially dropped
    and mixed with noise tokens so that in-batch negatives from the same
    coarse cluster are hard.
    """
    rng = np.random.default_rng(seed)
    n_groups = n_coarse * n_fine
    job_tokens = []
    job_group = []
    for g in range(n_groups):
        c, f = divmod(g, n_fine)
        for r in range(jobs_per_group):
            toks = [f"jc:{c}", f"jf:{c}.{f}", f"job:{g}.{r}"]
            toks += [f"jn:{rng.integers(10 * n_groups)}" for _ in range(noise_tokens)]
            job_tokens.append(toks)
            job_group.append(g)
    job_group = np.array(job_group)
    seeker_tokens = []
    job_rows = np.empty(n_pairs, dtype=np.int64)
    for i in range(n_pairs):
        g = int(rng.integers(n_groups))
        c, f = divmod(g, n_fine)
        toks = [f"sc:{c}"]
        if rng.random() < keep_fine:
            toks.append(f"sf:{c}.{f}")
        toks += [f"sn:{rng.integers(10 * n_groups)}" for _ in range(noise_tokens)]
        seeker_tokens.append(toks)
        job_rows[i] = g * jobs_per_group + int(rng.integers(jobs_per_group))
    inventory = encode_features(job_tokens, buckets)
    data = PairData(encode_features(seeker_tokens, buckets), inventory.take(job_rows), inventory, job_rows)
    return data, {"seekerTokens": seeker_tokens, "jobTokens": job_tokens, "jobGroup": job_group}


def read_pair_file(path, buckets: int) -> tuple[PairData, list[list[str]]]:
    """Load engagement records ``{"seeker": [...], "job": [...], "label": 0|1}``.

    Only engaged (label 1) rows are training positives; every distinct job
    token list forms the inventory.
    """
    seekers, jobs = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                r = json.loads(line)
                if int(r.get("label", 1)) != 1:
                    continue
                seekers.append([str(t) for t in r["seeker"]])
                jobs.append([str(t) for t in r["job"]])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"line {lineno}: {exc}") from exc
    if not seekers:
        raise ValueError("no positive pairs")
    keys: dict[tuple, int] = {}
    for toks in jobs:
        keys.setdefault(tuple(toks), len(keys))
    inventory_tokens = [list(k) for k in keys]
    job_rows = np.array([keys[tuple(t)] for t in jobs], dtype=np.int64)
    inventory = encode_features(inventory_tokens, buckets)
    return PairData(encode_features(seekers, buckets), inventory.take(job_rows), inventory, job_rows), inventory_tokens


def write_pair_file(path, seeker_tokens, job_tokens, job_rows) -> None:
    with open(path, "w") as fh:
        for s, r in zip(seeker_tokens, job_rows):
            fh.write(json.dumps({"seeker": s, "job": job_tokens[int(r)], "label": 1}) + "\n")


def write_history(path, history: Sequence[dict]) -> None:
    Path(path).write_text("".join(json.dumps(h) + "\n" for h in history))
