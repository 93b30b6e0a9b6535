"""Learning explainable seeker <-> job targeting links from hire outcomes.

Seeker and job attribute values are paired through templates into meta
links; every non-empty subset of a pair's meta links is a candidate complex
link. Candidates are tallied over labelled pairs, pruned by support, scored
(hire ratio or L1-regularised logistic regression), selected per seeker until
enough jobs are reachable, and finally collapsed into a 3-layer graph whose
nodes are exported as attribute ids for term matching.
"""

from __future__ import annotations

import itertools
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

from .corpus import DocumentInput, IndexSchema

log = logging.getLogger(__name__)

DEFAULT_MIN_SUPPORT = 3
DEFAULT_MAX_META_LINKS = 20

Segment = tuple[tuple[str, str], ...]  # sorted (attribute, value) pairs


@dataclass(frozen=True, order=True)
class LinkTemplate:
    seeker_attribute: str
    job_attribute: str


@dataclass(frozen=True, order=True)
class MetaLink:
    seeker_attribute: str
    seeker_value: str
    job_attribute: str
    job_value: str

    def holds(self, seeker: Mapping, job: Mapping) -> bool:
        return self.seeker_value in _values(seeker, self.seeker_attribute) and self.job_value in _values(
            job, self.job_attribute
        )


@dataclass(frozen=True)
class ComplexLink:
    meta_links: tuple[MetaLink, ...]
    support: int = field(default=0, compare=False)
    neg_count: int = field(default=0, compare=False)
    quality: float = field(default=0.0, compare=False)

    @property
    def seeker_segment(self) -> Segment:
        return tuple(sorted({(m.seeker_attribute, m.seeker_value) for m in self.meta_links}))

    @property
    def job_segment(self) -> Segment:
        return tuple(sorted({(m.job_attribute, m.job_value) for m in self.meta_links}))

    def fires(self, seeker: Mapping, job: Mapping) -> bool:
        return all(m.holds(seeker, job) for m in self.meta_links)


def canonical(meta_links: Iterable[MetaLink]) -> tuple[MetaLink, ...]:
    return tuple(sorted(set(meta_links)))


@dataclass(frozen=True)
class TrainingPair:
    seeker: Mapping[str, Sequence[str]]
    job: Mapping[str, Sequence[str]]
    label: int
    seeker_id: str = ""
    job_id: str = ""

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")


def _values(attrs: Mapping, name: str) -> tuple[str, ...]:
    v = attrs.get(name)
    if v is None:
        return ()
    if isinstance(v, (str, int)):
        return (str(v),)
    return tuple(str(x) for x in v)


def segment_matches(attrs: Mapping, segment: Segment) -> bool:
    return all(value in _values(attrs, name) for name, value in segment)


# -- candidate generation -----------------------------------------------------


def enumerate_meta_links(pair: TrainingPair, templates: Sequence[LinkTemplate]) -> list[MetaLink]:
    out = set()
    for t in templates:
        for sv in _values(pair.seeker, t.seeker_attribute):
            for jv in _values(pair.job, t.job_attribute):
                out.add(MetaLink(t.seeker_attribute, sv, t.job_attribute, jv))
    return sorted(out)


def enumerate_complex_links(
    meta_links: Sequence[MetaLink], max_meta_links: int = DEFAULT_MAX_META_LINKS
) -> set[tuple[MetaLink, ...]]:
    """All 2^k - 1 non-empty subsets, as canonical meta-link tuples."""
    metas = canonical(meta_links)
    if len(metas) > max_meta_links:
        raise ValueError(f"{len(metas)} meta links exceed the enumeration cap of {max_meta_links}")
    return {
        combo for size in range(1, len(metas) + 1) for combo in itertools.combinations(metas, size)
    }


def aggregate_and_prune(
    data: Sequence[TrainingPair],
    templates: Sequence[LinkTemplate],
    min_support: int = DEFAULT_MIN_SUPPORT,
    max_meta_links: int = DEFAULT_MAX_META_LINKS,
) -> list[ComplexLink]:
    """Tally candidates over hires, count no-hires, drop weak or net-negative links."""
    if not data:
        raise ValueError("no training pairs")
    support: Counter = Counter()
    for pair in data:
        if pair.label == 1:
            support.update(enumerate_complex_links(enumerate_meta_links(pair, templates), max_meta_links))
    negatives: Counter = Counter()
    for pair in data:
        if pair.label == 0:
            for key in _firing_candidates(enumerate_meta_links(pair, templates), support, max_meta_links):
                negatives[key] += 1
    kept = [
        ComplexLink(key, support[key], negatives[key])
        for key in support
        if support[key] >= min_support and negatives[key] <= support[key]
    ]
    return sorted(kept, key=lambda c: c.meta_links)


def _firing_candidates(metas: Sequence[MetaLink], candidates, max_meta_links: int):
    """Candidates (keys of ``candidates``) whose meta links are all in ``metas``."""
    metas = canonical(metas)
    if 2 ** min(len(metas), 62) <= len(candidates) and len(metas) <= max_meta_links:
        return [s for s in enumerate_complex_links(metas, max_meta_links) if s in candidates]
    present = set(metas)
    return [key for key in candidates if present.issuperset(key)]


# -- quality scoring ----------------------------------------------------------


def score_links_ratio(candidates: Sequence[ComplexLink]) -> list[ComplexLink]:
    """Smoothed hire / no-hire ratio: support / (negCount + 1)."""
    return [replace(c, quality=c.support / (c.neg_count + 1)) for c in candidates]


def feature_columns(candidates: Sequence[ComplexLink], data: Sequence[TrainingPair], templates=None) -> list[np.ndarray]:
    """For each candidate, the ascending row indices of pairs where it fires."""
    position = {c.meta_links: j for j, c in enumerate(candidates)}
    columns: list[list[int]] = [[] for _ in candidates]
    if templates is None:
        templates = sorted({LinkTemplate(m.seeker_attribute, m.job_attribute) for c in candidates for m in c.meta_links})
    for i, pair in enumerate(data):
        metas = enumerate_meta_links(pair, templates)
        for key in _firing_candidates(metas, position, DEFAULT_MAX_META_LINKS):
            columns[position[key]].append(i)
    return [np.asarray(col, dtype=np.int64) for col in columns]


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


@dataclass
class L1Fit:
    weights: np.ndarray
    intercept: float
    sweeps: int
    converged: bool


def l1_objective(columns, y: np.ndarray, weights, intercept: float, lam: float) -> float:
    eta = np.full(len(y), intercept, dtype=np.float64)
    for col, w in zip(columns, weights):
        eta[col] += w
    return float(np.mean(_softplus(eta) - y * eta) + lam * np.sum(np.abs(weights)))


def fit_l1_logistic(
    columns: Sequence[np.ndarray],
    y,
    lam: float,
    fit_intercept: bool = True,
    tol: float = 1e-6,
    max_sweeps: int = 500,
    init: L1Fit | None = None,
) -> L1Fit:
    """Coordinate descent for mean logistic loss + lam * ||w||_1 on binary features.

    Each coordinate takes a soft-thresholded Newton step; if that step does
    not lower the objective it falls back to the step from the quadratic
    upper bound (curvature <= 1/4), which always does. Sweeps alternate
    between the active set and full passes; convergence is declared when a
    full pass moves no coordinate by more than ``tol``.
    """
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    d = len(columns)
    w = np.zeros(d) if init is None else init.weights.copy()
    b = 0.0 if init is None else init.intercept
    if fit_intercept and init is None:
        rate = np.clip(y.mean(), 1e-6, 1 - 1e-6)
        b = float(np.log(rate / (1 - rate)))
    eta = np.full(n, b)
    for col, wj in zip(columns, w):
        if wj:
            eta[col] += wj

    def step(rows: np.ndarray | None, wj: float, penalised: bool) -> float:
        e = eta if rows is None else eta[rows]
        t = y if rows is None else y[rows]
        p = expit(e)
        grad = np.sum(p - t) / n
        count = n if rows is None else len(rows)
        bound = count / (4.0 * n)
        reg = lam if penalised else 0.0
        base = np.sum(_softplus(e) - t * e) / n + reg * abs(wj)

        def candidate(h: float) -> float:
            z = h * wj - grad
            return float(np.sign(z) * max(abs(z) - reg, 0.0) / h)

        def value(new: float) -> float:
            shifted = e + (new - wj)
            return np.sum(_softplus(shifted) - t * shifted) / n + reg * abs(new)

        curvature = np.sum(p * (1 - p)) / n
        if curvature > 1e-12:
            new = candidate(curvature)
            if value(new) <= base + 1e-15:
                return new
        new = candidate(bound)
        return new if value(new) <= base + 1e-15 else wj

    sweeps = 0
    converged = False
    active_only = False
    while sweeps < max_sweeps:
        sweeps += 1
        biggest = 0.0
        if fit_intercept:
            nb = step(None, b, penalised=False)
            biggest = max(biggest, abs(nb - b))
            eta += nb - b
            b = nb
        for j in range(d):
            rows = columns[j]
            if len(rows) == 0 or (active_only and w[j] == 0.0):
                continue
            new = step(rows, w[j], penalised=True)
            if new != w[j]:
                eta[rows] += new - w[j]
                biggest = max(biggest, abs(new - w[j]))
                w[j] = new
        if biggest < tol:
            if not active_only:
                converged = True
                break
            active_only = False
        else:
            active_only = True
    return L1Fit(w, b, sweeps, converged)


@dataclass
class L1Scoring:
    links: list[ComplexLink]  # all candidates, quality = learned weight
    kept: list[ComplexLink]  # quality > threshold
    fit: L1Fit


def score_links_l1(
    candidates: Sequence[ComplexLink],
    data: Sequence[TrainingPair],
    lam: float,
    threshold: float = 0.0,
    templates: Sequence[LinkTemplate] | None = None,
    columns: Sequence[np.ndarray] | None = None,
    init: L1Fit | None = None,
    max_sweeps: int = 2000,
) -> L1Scoring:
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if columns is None:
        columns = feature_columns(candidates, data, templates)
    y = np.array([p.label for p in data], dtype=np.float64)
    fit = fit_l1_logistic(columns, y, lam, init=init, max_sweeps=max_sweeps)
    if not fit.converged:
        log.warning("l1 fit at lambda=%g stopped after %d sweeps without converging", lam, fit.sweeps)
    scored = [replace(c, quality=float(w)) for c, w in zip(candidates, fit.weights)]
    return L1Scoring(scored, [c for c in scored if c.quality > threshold], fit)


def l1_path(
    candidates: Sequence[ComplexLink],
    data: Sequence[TrainingPair],
    lambdas: Sequence[float],
    templates: Sequence[LinkTemplate] | None = None,
) -> list[tuple[float, int]]:
    """Nonzero-weight counts for each of ``lambdas``, in the order given.

    Fits run from the largest lambda down, each warm-started from the
    previous (sparser) solution, which converges far faster than a cold
    start at small lambda.
    """
    columns = feature_columns(candidates, data, templates)
    counts = {}
    fit = None
    for lam in sorted(set(map(float, lambdas)), reverse=True):
        result = score_links_l1(candidates, data, lam, columns=columns, init=fit)
        fit = result.fit
        counts[lam] = int(np.count_nonzero(fit.weights))
    return [(float(lam), counts[float(lam)]) for lam in lambdas]


# -- per-seeker liquidity -----------------------------------------------------


def build_job_index(jobs: Mapping[str, Mapping], segments: Iterable[Segment]) -> dict[Segment, frozenset]:
    """Map each job segment to the ids of jobs carrying all its values."""
    return {
        seg: frozenset(job_id for job_id, attrs in jobs.items() if segment_matches(attrs, seg))
        for seg in set(segments)
    }


def select_links_for_seeker(
    seeker: Mapping,
    scored_links: Sequence[ComplexLink],
    theta: int,
    job_index: Mapping[Segment, Iterable[str]],
) -> list[ComplexLink]:
    """Re-add the seeker's segment mappings, best average quality first,
    until at least ``theta`` distinct jobs are reachable."""
    groups: dict[Segment, list[ComplexLink]] = defaultdict(list)
    for link in scored_links:
        if segment_matches(seeker, link.seeker_segment):
            groups[link.seeker_segment].append(link)
    ranked = sorted(groups.items(), key=lambda kv: (-float(np.mean([l.quality for l in kv[1]])), kv[0]))
    selected: list[ComplexLink] = []
    reachable: set = set()
    for _, links in ranked:
        if len(reachable) >= theta:
            break
        selected.extend(sorted(links, key=lambda l: l.meta_links))
        for link in links:
            reachable.update(job_index.get(link.job_segment, ()))
    return selected


# -- graphs -------------------------------------------------------------------


@dataclass
class LinkGraph:
    """4-layer graph: seeker -> seeker segment -> job segment -> job."""

    seeker_segments: dict[str, set]
    links: set  # (seeker segment, job segment)
    job_members: dict  # job segment -> set of job ids

    def reachable(self, seeker_id: str) -> set:
        out: set = set()
        segs = self.seeker_segments.get(seeker_id, set())
        for p, q in self.links:
            if p in segs:
                out |= set(self.job_members.get(q, ()))
        return out


@dataclass
class ServingGraph:
    """3-layer graph: seeker -> (seeker segment, job segment) node -> job."""

    nodes: list  # node index -> (seeker segment, job segment)
    seeker_nodes: dict[str, tuple[int, ...]]
    node_jobs: dict[int, frozenset]

    def reachable(self, seeker_id: str) -> set:
        out: set = set()
        for node in self.seeker_nodes.get(seeker_id, ()):
            out |= self.node_jobs[node]
        return out


def build_link_graph(
    selections: Mapping[str, Sequence[ComplexLink]], job_index: Mapping[Segment, Iterable[str]]
) -> LinkGraph:
    seeker_segments = {s: {l.seeker_segment for l in links} for s, links in selections.items()}
    links = {(l.seeker_segment, l.job_segment) for ls in selections.values() for l in ls}
    members = {q: set(job_index.get(q, ())) for _, q in links}
    return LinkGraph(seeker_segments, links, members)


def collapse_graph(graph: LinkGraph) -> ServingGraph:
    nodes = sorted(graph.links)
    by_seeker_segment: dict = defaultdict(list)
    for i, (p, _) in enumerate(nodes):
        by_seeker_segment[p].append(i)
    seeker_nodes = {
        s: tuple(sorted(i for p in segs for i in by_seeker_segment.get(p, ())))
        for s, segs in graph.seeker_segments.items()
    }
    node_jobs = {i: frozenset(graph.job_members.get(q, ())) for i, (_, q) in enumerate(nodes)}
    return ServingGraph(nodes, seeker_nodes, node_jobs)


@dataclass
class IndexExport:
    documents: list[DocumentInput]
    seeker_nodes: dict[str, list[int]]
    schema: IndexSchema
    slot: int

    def seeker_query(self, seeker_id: str) -> dict | None:
        """Clause map retrieving the seeker's jobs, or None when it has no nodes."""
        ids = self.seeker_nodes.get(seeker_id)
        if not ids:
            return None
        return {self.schema.clause_names[self.slot]: ids}


def node_attribute_id(node: int) -> int:
    return node + 1  # 0 is the padding sentinel


def export_to_index(
    graph: ServingGraph,
    job_ids: Iterable[str] | None = None,
    schema: IndexSchema | None = None,
    slot: int = 0,
    embeddings: Mapping[str, Sequence[float]] | None = None,
) -> IndexExport:
    """Give every node an attribute id and attach node ids to jobs and seekers."""
    if len(graph.nodes) >= 2**63 - 1:
        raise OverflowError("attribute id space exhausted")
    jobs_nodes: dict[str, list[int]] = defaultdict(list)
    for node, jobs in sorted(graph.node_jobs.items()):
        for job in jobs:
            jobs_nodes[job].append(node_attribute_id(node))
    all_jobs = sorted(set(job_ids or ()) | set(jobs_nodes))
    if schema is None:
        dim = len(next(iter(embeddings.values()))) if embeddings else 1
        schema = IndexSchema(("node",), dim, max([len(v) for v in jobs_nodes.values()] + [1]))
    docs = []
    for job in all_jobs:
        clauses = [[] for _ in range(schema.num_clauses)]
        clauses[slot] = sorted(jobs_nodes.get(job, []))
        emb = embeddings[job] if embeddings and job in embeddings else [0.0] * schema.dim
        docs.append(DocumentInput(str(job), clauses, emb))
    seekers = {s: [node_attribute_id(n) for n in nodes] for s, nodes in graph.seeker_nodes.items()}
    return IndexExport(docs, seekers, schema, slot)


# -- end-to-end learner -------------------------------------------------------


@dataclass
class LinkLearnerResult:
    candidates: list[ComplexLink]
    scored: list[ComplexLink]
    kept: list[ComplexLink]
    selections: dict[str, list[ComplexLink]]
    graph: LinkGraph
    serving: ServingGraph
    fit: L1Fit | None = None


def learn_links(
    data: Sequence[TrainingPair],
    templates: Sequence[LinkTemplate],
    theta: int,
    method: str = "l1",
    lam: float = 1e-3,
    threshold: float = 0.0,
    min_support: int = DEFAULT_MIN_SUPPORT,
    seekers: Mapping[str, Mapping] | None = None,
    jobs: Mapping[str, Mapping] | None = None,
) -> LinkLearnerResult:
    """Run candidate aggregation, scoring, per-seeker selection and collapse."""
    candidates = aggregate_and_prune(data, templates, min_support)
    fit = None
    if method == "l1":
        scoring = score_links_l1(candidates, data, lam, threshold, templates)
        scored, kept, fit = scoring.links, scoring.kept, scoring.fit
    elif method == "ratio":
        scored = score_links_ratio(candidates)
        kept = [c for c in scored if c.quality > threshold]
    else:
        raise ValueError(f"unknown scoring method {method!r}")
    if seekers is None:
        seekers = {p.seeker_id: p.seeker for p in data if p.seeker_id}
    if jobs is None:
        jobs = {p.job_id: p.job for p in data if p.job_id}
    job_index = build_job_index(jobs, (l.job_segment for l in kept))
    selections = {s: select_links_for_seeker(attrs, kept, theta, job_index) for s, attrs in seekers.items()}
    graph = build_link_graph(selections, job_index)
    log.info("links: %d candidates, %d kept, %d graph links", len(candidates), len(kept), len(graph.links))
    return LinkLearnerResult(candidates, scored, kept, selections, graph, collapse_graph(graph), fit)


def link_tradeoff(
    scored: Sequence[ComplexLink], data: Sequence[TrainingPair], thresholds: Sequence[float]
) -> list[dict]:
    """Recall of hires and false-positive rate of linked pairs per quality threshold."""
    hires = sum(p.label for p in data)
    rows = []
    for t in thresholds:
        kept = [c for c in scored if c.quality > t]
        linked = [p for p in data if any(c.fires(p.seeker, p.job) for c in kept)]
        linked_hires = sum(p.label for p in linked)
        rows.append(
            {
                "threshold": float(t),
                "links": len(kept),
                "linkedPairs": len(linked),
                "recall": linked_hires / hires if hires else 0.0,
                "falsePositiveRate": (len(linked) - linked_hires) / len(linked) if linked else 0.0,
            }
        )
    return rows


# -- synthetic data and file formats ------------------------------------------


@dataclass
class PlantedCorpus:
    pairs: list[TrainingPair]
    templates: list[LinkTemplate]
    planted: list[tuple[MetaLink, ...]]


def make_planted_corpus(
    n_links: int = 10,
    hires_per_link: int = 12,
    n_background: int = 400,
    noise_vocab: int = 2000,
    n_decoys: int = 5,
    decoy_count: int = 8,
    seed: int = 0,
) -> PlantedCorpus:
    """Hire pairs built around planted complex links, plus no-hire noise.

    Every proper subset of a planted link also appears in more no-hire pairs
    than the link has hires, so only the full conjunction is a net-positive
    rule. Non-planted attribute values are drawn from a large vocabulary.
    Decoy meta links on a separate ``location`` attribute are attached to
    ``decoy_count`` hires and as many no-hires: they survive support pruning
    but carry no signal beyond the planted links.
    """
    rng = np.random.default_rng(seed)
    attrs = ["title", "skill", "seniority", "industry"]
    templates = [LinkTemplate(a, a) for a in attrs + ["location"]]
    sizes = [1 + (i % 3) for i in range(n_links)]
    planted = []
    for i, size in enumerate(sizes):
        chosen = sorted(rng.choice(len(attrs), size=size, replace=False))
        planted.append(canonical(MetaLink(attrs[a], f"s{i}_{attrs[a]}", attrs[a], f"j{i}_{attrs[a]}") for a in chosen))

    def noise(prefix: str) -> str:
        return f"{prefix}_noise{rng.integers(noise_vocab)}"

    def endpoint(metas, side: str) -> dict:
        out = {a: [noise(side + a)] for a in attrs}
        for m in metas:
            if side == "s":
                out[m.seeker_attribute] = [m.seeker_value]
            else:
                out[m.job_attribute] = [m.job_value]
        return out

    pairs = []
    counter = itertools.count()

    def add(metas, label: int):
        k = next(counter)
        pairs.append(TrainingPair(endpoint(metas, "s"), endpoint(metas, "j"), label, f"seeker{k}", f"job{k}"))

    for metas in planted:
        for _ in range(hires_per_link):
            add(metas, 1)
        for size in range(1, len(metas)):
            for subset in itertools.combinations(metas, size):
                for _ in range(hires_per_link + 3):
                    add(subset, 0)
    for _ in range(n_background):
        add((), 0)
    hire_rows = [i for i, p in enumerate(pairs) if p.label == 1]
    background = [i for i, p in enumerate(pairs) if p.label == 0]
    for d in range(n_decoys):
        chosen = list(rng.choice(hire_rows, decoy_count, replace=False))
        chosen += list(rng.choice(background, decoy_count, replace=False))
        for i in chosen:
            p = pairs[i]
            seeker = dict(p.seeker, location=list(p.seeker.get("location", [])) + [f"s_decoy{d}"])
            job = dict(p.job, location=list(p.job.get("location", [])) + [f"j_decoy{d}"])
            pairs[i] = replace(p, seeker=seeker, job=job)
    order = rng.permutation(len(pairs))
    return PlantedCorpus([pairs[i] for i in order], templates, planted)


def pair_to_record(pair: TrainingPair) -> dict:
    return {
        "seekerId": pair.seeker_id,
        "jobId": pair.job_id,
        "seeker": {k: list(_values(pair.seeker, k)) for k in pair.seeker},
        "job": {k: list(_values(pair.job, k)) for k in pair.job},
        "label": pair.label,
    }


def read_pairs(path) -> list[TrainingPair]:
    pairs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                r = json.loads(line)
                pairs.append(
                    TrainingPair(r["seeker"], r["job"], int(r["label"]), str(r.get("seekerId", "")), str(r.get("jobId", "")))
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"line {lineno}: {exc}") from exc
    return pairs


def write_pairs(path, pairs: Iterable[TrainingPair]) -> None:
    with open(path, "w") as fh:
        for p in pairs:
            fh.write(json.dumps(pair_to_record(p)) + "\n")


def read_templates(path) -> list[LinkTemplate]:
    return [LinkTemplate(str(s), str(j)) for s, j in json.loads(Path(path).read_text())]


def write_templates(path, templates: Sequence[LinkTemplate]) -> None:
    Path(path).write_text(json.dumps([[t.seeker_attribute, t.job_attribute] for t in templates]))


def link_to_record(link: ComplexLink) -> dict:
    return {
        "metaLinks": [[m.seeker_attribute, m.seeker_value, m.job_attribute, m.job_value] for m in link.meta_links],
        "support": link.support,
        "negCount": link.neg_count,
        "quality": link.quality,
    }


def link_from_record(record: dict) -> ComplexLink:
    return ComplexLink(
        canonical(MetaLink(*map(str, m)) for m in record["metaLinks"]),
        int(record.get("support", 0)),
        int(record.get("negCount", 0)),
        float(record.get("quality", 0.0)),
    )
