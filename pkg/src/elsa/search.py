"""Multi-objective search over subnet genomes.

NSGA-II with binary tournaments, uniform crossover, per-gene mutation and
elitist selection, minimizing (-validation accuracy, MACs). Params ride
along as an annotation. Evaluations are cached by genome and may run in a
thread pool; results merge by genome key, so the outcome is independent of
scheduling.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .elastic import heuristic_midpoint, sample_genome
from .errors import ContractError
from .tensor import rng_stream

log = logging.getLogger(__name__)


@dataclass
class Individual:
    genome: tuple
    objectives: tuple  # (-accuracy, macs), both minimized
    params: int
    front_rank: int = 0
    crowding: float = 0.0

    @property
    def accuracy(self):
        return -self.objectives[0]

    @property
    def macs(self):
        return self.objectives[1]


def dominates(a, b):
    """True if a is no worse everywhere and strictly better somewhere."""
    return all(x <= y for x, y in zip(a, b)) and any(x < y for x, y in zip(a, b))


def nondominated_sort(objectives):
    """Indices grouped into fronts; front 0 is the non-dominated set."""
    n = len(objectives)
    dominated_by = [[] for _ in range(n)]
    domination_count = [0] * n
    fronts = [[]]
    for i in range(n):
        for j in range(i + 1, n):
            if dominates(objectives[i], objectives[j]):
                dominated_by[i].append(j)
                domination_count[j] += 1
            elif dominates(objectives[j], objectives[i]):
                dominated_by[j].append(i)
                domination_count[i] += 1
    for i in range(n):
        if domination_count[i] == 0:
            fronts[0].append(i)
    current = 0
    while fronts[current]:
        nxt = []
        for i in fronts[current]:
            for j in dominated_by[i]:
                domination_count[j] -= 1
                if domination_count[j] == 0:
                    nxt.append(j)
        current += 1
        fronts.append(nxt)
    return fronts[:-1]


def crowding_distance(objectives):
    """Per-individual crowding; boundary points get +inf."""
    n = len(objectives)
    if n == 0:
        raise ContractError("crowding distance of an empty front")
    dist = np.zeros(n)
    n_obj = len(objectives[0])
    for k in range(n_obj):
        vals = np.array([o[k] for o in objectives])
        order = np.argsort(vals, kind="stable")
        span = vals[order[-1]] - vals[order[0]]
        dist[order[0]] = dist[order[-1]] = np.inf
        if span == 0:
            continue
        for pos in range(1, n - 1):
            i = order[pos]
            dist[i] += (vals[order[pos + 1]] - vals[order[pos - 1]]) / span
    return dist


def hypervolume(points, ref):
    """Dominated area of 2-D minimization points against a reference corner."""
    if any(len(p) != 2 for p in points):
        raise ContractError("hypervolume supports exactly two objectives")
    inside = sorted({tuple(p) for p in points if p[0] <= ref[0] and p[1] <= ref[1]})
    hv = 0.0
    prev_y = ref[1]
    for x, y in inside:
        if y < prev_y:
            hv += (ref[0] - x) * (prev_y - y)
            prev_y = y
    return hv


# ---------------------------------------------------------------------------
# analytic cost model


def cost(model, active=None, tokens=None):
    """Activated parameter and MAC counts for one genome.

    Linear layers contribute m*n params and T*m*n MACs over their
    activated slices; adapters add r*(m+n) of each (times T for MACs);
    attention adds T^2 * activated width per block for the score products.
    """
    act = model._resolve_activation(active)
    dims = model.dims
    t = dims.max_seq if tokens is None else int(tokens)
    params = 0
    macs = 0

    def linear(lay, m_act, n_act, r_act):
        nonlocal params, macs
        m = lay.W.data.shape[0] if m_act is None else m_act
        n = lay.W.data.shape[1] if n_act is None else n_act
        params += m * n
        macs += t * m * n
        if lay.adapter is not None:
            r = lay.adapter.r_max if r_act is None else r_act
            params += r * (m + n)
            macs += t * r * (m + n)

    def r_of(lay):
        if act is None or lay.adapter is None:
            return None
        return act.rank_for(lay.layer_id, lay.adapter.r_max)

    for b, blk in enumerate(model.blocks):
        h_full, f_full = dims.heads[b], dims.mlp[b]
        h_act = act.heads_for(b, h_full) if act else h_full
        f_act = act.mlp_for(b, f_full) if act else f_full
        d_att = h_act * dims.head_dim
        n_qkv = d_att if h_act < h_full else None
        n_up = f_act if f_act < f_full else None
        linear(blk.q, None, n_qkv, r_of(blk.q))
        linear(blk.k, None, n_qkv, r_of(blk.k))
        linear(blk.v, None, n_qkv, r_of(blk.v))
        linear(blk.o, n_qkv, None, r_of(blk.o))
        linear(blk.up, None, n_up, r_of(blk.up))
        linear(blk.down, n_up, None, r_of(blk.down))
        macs += t * t * d_att
    linear(model.head, None, None, r_of(model.head))
    return {"params": params, "macs": macs}


# ---------------------------------------------------------------------------
# the genetic loop


@dataclass
class SearchConfig:
    pop_size: int = 50
    generations: int = 30
    seed: int = 0
    crossover_p: float = 0.9
    workers: int = 1


@dataclass
class ParetoArchive:
    population: list
    cache: dict  # genome -> {"accuracy", "macs", "params"}
    seed: int
    generation: int = 0
    history: list = field(default_factory=list)
    hv_ref: tuple = None  # fixed at generation 0

    def front(self):
        """Non-dominated set over every genome ever evaluated (feasible only)."""
        genomes = sorted(g for g, e in self.cache.items() if e is not None)
        if not genomes:
            return []
        objs = [(-self.cache[g]["accuracy"], self.cache[g]["macs"]) for g in genomes]
        fronts = nondominated_sort(objs)
        return [self._individual(genomes[i], rank=1) for i in sorted(fronts[0])]

    def population_front(self):
        return sorted((ind for ind in self.population if ind.front_rank == 1),
                      key=lambda ind: ind.genome)

    def _individual(self, genome, rank=0):
        e = self.cache[genome]
        return Individual(genome, (-e["accuracy"], e["macs"]), e["params"], front_rank=rank)


def _evaluate_all(genomes, evaluator, cache, workers):
    # a failed evaluation marks the genome infeasible (cached as None)
    todo = sorted({g for g in genomes if g not in cache})
    if not todo:
        return

    def guarded(genome):
        try:
            return evaluator(genome)
        except Exception as exc:
            log.warning("genome %s marked infeasible: %s", genome, exc)
            return None

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(guarded, todo))
    else:
        results = [guarded(g) for g in todo]
    for g, res in zip(todo, results):
        if res is None:
            cache[g] = None
        else:
            cache[g] = {"accuracy": float(res["accuracy"]), "macs": int(res["macs"]),
                        "params": int(res["params"])}


def _assign(pop):
    objs = [ind.objectives for ind in pop]
    fronts = nondominated_sort(objs)
    for rank, front in enumerate(fronts, start=1):
        crowd = crowding_distance([objs[i] for i in front])
        for slot, i in enumerate(front):
            pop[i].front_rank = rank
            pop[i].crowding = float(crowd[slot])
    return fronts


def _better(a, b):
    if a.front_rank != b.front_rank:
        return a if a.front_rank < b.front_rank else b
    if a.crowding != b.crowding:
        return a if a.crowding > b.crowding else b
    return a


def _tournament(pop, rng):
    i, j = rng.integers(0, len(pop), 2)
    return _better(pop[i], pop[j])


def _make_child(cfg, p1, p2, rng, crossover_p):
    length = len(p1)
    if rng.random() < crossover_p:
        child = [p1[k] if rng.random() < 0.5 else p2[k] for k in range(length)]
    else:
        child = list(p1)
    mutation_p = 1.0 / length
    for k, dim in enumerate(cfg.dims):
        if rng.random() < mutation_p:
            child[k] = int(rng.integers(0, len(dim.choices)))
    return tuple(child)


def _select(combined, pop_size):
    fronts = _assign(combined)
    chosen = []
    for front in fronts:
        if len(chosen) + len(front) <= pop_size:
            chosen.extend(front)
        else:
            rest = sorted(front, key=lambda i: (-combined[i].crowding, combined[i].genome))
            chosen.extend(rest[: pop_size - len(chosen)])
            break
    return [combined[i] for i in chosen]


def evolve(cfg, evaluator, sh=None):
    """Run the genetic search; returns the final archive.

    evaluator(genome) must return {"accuracy", "macs", "params"} and be a
    pure function of the genome.
    """
    sh = sh or SearchConfig()
    cache = {}
    genomes = [sample_genome(cfg, rng_stream(sh.seed, 0, i)) for i in range(sh.pop_size)]
    _evaluate_all(genomes, evaluator, cache, sh.workers)
    archive = ParetoArchive([], cache, sh.seed)
    pop = [archive._individual(g) for g in genomes if cache[g] is not None]
    if not pop:
        raise ContractError("every genome in the initial population failed evaluation")
    _assign(pop)
    _record_history(archive, pop, 0)
    for gen in range(1, sh.generations + 1):
        children = []
        for i in range(sh.pop_size):
            rng = rng_stream(sh.seed, gen, i)
            p1 = _tournament(pop, rng)
            p2 = _tournament(pop, rng)
            children.append(_make_child(cfg, p1.genome, p2.genome, rng, sh.crossover_p))
        _evaluate_all(children, evaluator, cache, sh.workers)
        combined = pop + [archive._individual(g) for g in children if cache[g] is not None]
        pop = _select(combined, sh.pop_size)
        archive.generation = gen
        _record_history(archive, pop, gen)
    archive.population = pop
    return archive


def _record_history(archive, pop, gen):
    front1 = [ind for ind in pop if ind.front_rank == 1]
    pts = [ind.objectives for ind in front1]
    if archive.hv_ref is None:
        # -accuracy never exceeds 1; macs can only shrink under domination
        archive.hv_ref = (1.0, max(ind.macs for ind in pop) * 2 + 1)
    ref = archive.hv_ref
    archive.history.append({
        "generation": gen,
        "evaluations": len(archive.cache),
        "front_size": len(front1),
        "hypervolume": hypervolume(pts, ref),
        "population": [
            {"genome": list(ind.genome), "accuracy": ind.accuracy, "macs": ind.macs,
             "params": ind.params, "front_rank": ind.front_rank,
             "crowding": ind.crowding}
            for ind in pop
        ],
    })


def brute_force_pareto(cfg, evaluator, limit=4096):
    """Exact Pareto genomes by full enumeration (small spaces only)."""
    size = cfg.space_size()
    if size > limit:
        raise ContractError(f"search space has {size} genomes, above the limit {limit}")
    genomes = [tuple(g) for g in cfg.enumerate_genomes()]
    cache = {}
    _evaluate_all(genomes, evaluator, cache, workers=1)
    feasible = [g for g in genomes if cache[g] is not None]
    if not feasible:
        return set()
    objs = [(-cache[g]["accuracy"], cache[g]["macs"]) for g in feasible]
    fronts = nondominated_sort(objs)
    return {feasible[i] for i in fronts[0]}


def cached_evaluator(evaluator):
    """Memoize an evaluator by genome (thread-safe for identical results)."""
    memo = {}

    def wrapped(genome):
        hit = memo.get(genome)
        if hit is None:
            hit = evaluator(genome)
            memo[genome] = hit
        return hit

    return wrapped


# ---------------------------------------------------------------------------
# structured outputs


def _fmt(x):
    if isinstance(x, float):
        if math.isinf(x):
            return "inf"
        return repr(x)
    return str(x)


def generations_csv(archive):
    lines = ["generation,genome,accuracy,macs,params,front_rank,crowding"]
    for entry in archive.history:
        for row in entry["population"]:
            lines.append(",".join([
                str(entry["generation"]),
                "-".join(map(str, row["genome"])),
                _fmt(row["accuracy"]), str(row["macs"]), str(row["params"]),
                str(row["front_rank"]), _fmt(row["crowding"]),
            ]))
    return "\n".join(lines) + "\n"


def front_csv(front):
    lines = ["genome,accuracy,macs,params"]
    for ind in front:
        lines.append(",".join(["-".join(map(str, ind.genome)),
                               _fmt(ind.accuracy), str(ind.macs), str(ind.params)]))
    return "\n".join(lines) + "\n"


def front_svg(front, midpoint=None, width=640, height=440):
    """Scatter of accuracy vs MACs with an optional midpoint reference line.

    Hand-rolled so that identical data yields identical bytes.
    """
    pad = 56
    pts = [(ind.macs, ind.accuracy) for ind in front]
    xs = [p[0] for p in pts] or [0.0, 1.0]
    ys = [p[1] for p in pts] or [0.0, 1.0]
    if midpoint is not None:
        xs = xs + [midpoint[0]]
        ys = ys + [midpoint[1]]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    x_span = (x_hi - x_lo) or 1.0
    y_span = (y_hi - y_lo) or 1.0

    def sx(x):
        return pad + (x - x_lo) / x_span * (width - 2 * pad)

    def sy(y):
        return height - pad - (y - y_lo) / y_span * (height - 2 * pad)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" '
        'stroke="black" stroke-width="1"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" '
        'stroke="black" stroke-width="1"/>',
        f'<text x="{width // 2}" y="{height - 16}" text-anchor="middle" '
        'font-family="monospace" font-size="12">MACs</text>',
        f'<text x="16" y="{height // 2}" text-anchor="middle" font-family="monospace" '
        f'font-size="12" transform="rotate(-90 16 {height // 2})">accuracy</text>',
    ]
    if midpoint is not None:
        y = sy(midpoint[1])
        parts.append(
            f'<line x1="{pad}" y1="{y:.2f}" x2="{width - pad}" y2="{y:.2f}" '
            'stroke="#888888" stroke-width="1" stroke-dasharray="6,4"/>')
        parts.append(
            f'<text x="{width - pad}" y="{y - 6:.2f}" text-anchor="end" '
            'font-family="monospace" font-size="11" fill="#555555">midpoint</text>')
    for x, y in sorted(pts):
        parts.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="4" fill="#1f77b4"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def midpoint_point(cfg, evaluator):
    """(macs, accuracy) of the heuristic midpoint genome."""
    g = heuristic_midpoint(cfg)
    e = evaluator(g)
    return (int(e["macs"]), float(e["accuracy"])), g
