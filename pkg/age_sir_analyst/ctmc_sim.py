"""Exact simulation of the SIR Markov chain on a dynamic random contact network.

Two engines sample the same law:

* ``dense`` keeps every directed edge bit (n(n-1) of them) and steps every
  edge-update clock. It is the reference oracle.
* ``lazy`` only tracks *channels*, ordered pairs (a, b) with ``a``
  susceptible and ``b`` infected. Edge processes never depend on disease
  states, so a pair's bit is irrelevant until it becomes a channel. When
  ``b`` is infected its recovery time and the edge path of every channel
  out of it are sampled at once, up to the channel's first transmission or
  the recovery; transmissions and recoveries then run off an event queue.

Edge convention: bit (a, b) set means ``b`` can infect ``a``; its
probability after an update is ``rho[g(a), g(b)] / n``.
"""

import heapq
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from tqdm import tqdm

from .errors import AbsorbedError, InputError
from .model_core import GroupFractions, ModelParams, Trajectory

logger = logging.getLogger(__name__)

SUSCEPTIBLE, INFECTED, RECOVERED = 0, 1, -1
Pair = Tuple[int, int]


class SimMode(str, Enum):
    DENSE = "dense"
    LAZY = "lazy"


class EventKind(str, Enum):
    INFECTION = "infection"
    RECOVERY = "recovery"
    EDGE_UPDATE = "edge_update"


@dataclass(frozen=True)
class EventRecord:
    time: float
    kind: EventKind
    node: Optional[int] = None
    pair: Optional[Pair] = None
    new_state: Optional[int] = None
    group: Optional[int] = None

    def as_row(self) -> Tuple[float, str, str, str]:
        """(t, kind, node_or_pair, detail) as written to the event log."""
        if self.kind is EventKind.EDGE_UPDATE:
            return self.time, self.kind.value, f"{self.pair[0]}>{self.pair[1]}", f"state={self.new_state}"
        return self.time, self.kind.value, str(self.node), f"group={self.group + 1}"


@dataclass(frozen=True)
class _ChannelPaths:
    """Edge paths of the channels out of one infected node.

    ``switches[r, c]`` is the time of the r-th bit change of channel ``c``
    (inf once its path has ended). Receivers are sorted.
    """

    receivers: np.ndarray
    first_bit: np.ndarray
    switches: np.ndarray

    def bit_at(self, receiver: int, t: float) -> Optional[bool]:
        """Bit of the channel to ``receiver`` at time ``t``, None without such a channel."""
        pos = int(np.searchsorted(self.receivers, receiver))
        if pos >= len(self.receivers) or self.receivers[pos] != receiver:
            return None
        flips = int(np.count_nonzero(self.switches[:, pos] <= t))
        return bool(self.first_bit[pos]) ^ (flips % 2 == 1)


_INFECT, _RECOVER = 0, 1


@dataclass
class _EventQueue:
    """Pending infections and recoveries of the lazy engine, ordered by (time, insertion)."""

    heap: List[Tuple[float, int, int, int]] = field(default_factory=list)
    counter: int = 0
    predicted: Dict[int, float] = field(default_factory=dict)
    channels: Dict[int, _ChannelPaths] = field(default_factory=dict)

    def push(self, time: float, kind: int, node: int) -> None:
        heapq.heappush(self.heap, (time, self.counter, kind, node))
        self.counter += 1

    def predict_infection(self, time: float, node: int) -> None:
        # only the earliest transmission into a node can take effect
        if time < self.predicted.get(node, math.inf):
            self.predicted[node] = time
            self.push(time, _INFECT, node)


@dataclass
class NetworkState:
    """Disease states, edge storage, clock and RNG of one simulation run.

    Dense mode keeps ``edges`` as an (n, n) bool matrix together with
    ``infected_in[a, k]`` (infected in-neighbours of ``a`` in group ``k``) and
    ``exposure[i, k]`` (sum of ``infected_in[a, k]`` over susceptible ``a`` in
    group ``i``). Lazy mode keeps ``queue``: pending events plus the sampled
    channel paths of every infected node.
    """

    disease: np.ndarray
    group_of: np.ndarray
    mode: SimMode
    rng: np.random.Generator
    seed: int
    clock: float = 0.0
    group_counts: Optional[np.ndarray] = None
    edges: Optional[np.ndarray] = None
    infected_in: Optional[np.ndarray] = None
    exposure: Optional[np.ndarray] = None
    queue: Optional[_EventQueue] = None

    @property
    def n(self) -> int:
        return len(self.disease)

    def fractions(self) -> np.ndarray:
        return self.group_counts / self.n

    def n_infected(self) -> int:
        return int(self.group_counts[1].sum())


def largest_remainder(targets: Sequence[float], total: int) -> np.ndarray:
    """Round nonnegative reals summing to ``total`` to integers with the same sum."""
    targets = np.asarray(targets, dtype=float)
    floors = np.floor(targets + 1e-9).astype(np.int64)
    short = int(total - floors.sum())
    if short > 0:
        order = np.argsort(-(targets - floors), kind="stable")
        floors[order[:short]] += 1
    return floors


def network_counts(fractions: GroupFractions, n: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Round target fractions to (group_sizes, infected, recovered) counts for ``n`` nodes."""
    counts = largest_remainder(fractions.as_array().ravel() * n, n).reshape(3, -1)
    sizes = counts.sum(axis=0)
    if np.any(sizes < 1):
        raise InputError(f"n={n} is too small to give every group at least one node")
    return sizes, counts[1], counts[2]


def _dense_books(state: NetworkState, m: int) -> None:
    infected_onehot = np.zeros((state.n, m), dtype=np.int64)
    infected = state.disease == INFECTED
    infected_onehot[infected, state.group_of[infected]] = 1
    state.infected_in = state.edges.astype(np.int64) @ infected_onehot
    susceptible_onehot = np.zeros((state.n, m), dtype=np.int64)
    susceptible = state.disease == SUSCEPTIBLE
    susceptible_onehot[susceptible, state.group_of[susceptible]] = 1
    state.exposure = susceptible_onehot.T @ state.infected_in


def init_network(params: ModelParams, initial_infected: Sequence[int], seed: int,
                 mode: SimMode = SimMode.DENSE,
                 initial_recovered: Optional[Sequence[int]] = None) -> NetworkState:
    """Fresh network: the first nodes of each group are infected (then recovered), the rest susceptible.

    Dense mode draws every directed edge independently with probability
    rho_ij / n, the stationary law of the edge process. Lazy mode schedules
    the recovery and the channel paths of each initially infected node.
    """
    mode = SimMode(mode)
    if not params.has_network:
        raise InputError("network simulation needs B, rho and group_sizes")
    if not 0 <= int(seed) < 2 ** 64:
        raise InputError("seed must be an unsigned 64-bit integer")
    sizes = params.group_sizes
    m = params.m
    infected = np.asarray(initial_infected, dtype=np.int64)
    recovered = np.zeros(m, dtype=np.int64) if initial_recovered is None else np.asarray(initial_recovered, dtype=np.int64)
    if infected.shape != (m,) or recovered.shape != (m,):
        raise InputError(f"initial counts must have length m={m}")
    if np.any(infected < 0) or np.any(recovered < 0) or np.any(infected + recovered > sizes):
        raise InputError("initial infected/recovered counts exceed group size")

    group_of = np.repeat(np.arange(m), sizes)
    disease = np.full(len(group_of), SUSCEPTIBLE, dtype=np.int8)
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    for i in range(m):
        disease[starts[i]:starts[i] + infected[i]] = INFECTED
        disease[starts[i] + infected[i]:starts[i] + infected[i] + recovered[i]] = RECOVERED

    state = NetworkState(
        disease=disease,
        group_of=group_of,
        mode=mode,
        rng=np.random.default_rng(int(seed)),
        seed=int(seed),
        group_counts=np.stack([sizes - infected - recovered, infected, recovered]).astype(np.int64),
    )
    prob = params.edge_prob()
    if mode is SimMode.DENSE:
        edges = state.rng.random((state.n, state.n)) < prob[group_of][:, group_of]
        np.fill_diagonal(edges, False)
        state.edges = edges
        _dense_books(state, m)
    else:
        state.queue = _EventQueue()
        for b in np.flatnonzero(disease == INFECTED):
            _schedule_infector(state, params, int(b))
    logger.debug("initialised %s network: n=%d, infected=%s, seed=%d", mode.value, state.n, infected.tolist(), seed)
    return state


def propagate_edges(bits: np.ndarray, last_observed: np.ndarray, now: float, prob: np.ndarray,
                    lambda_edge: float, rng: np.random.Generator) -> np.ndarray:
    """Vectorised propagate_edge. ``last_observed`` is NaN for never-observed pairs."""
    last_observed = np.asarray(last_observed, dtype=float)
    never = np.isnan(last_observed)
    if np.any(last_observed[~never] > now + 1e-12):
        raise InputError("last_observed is later than now")
    survive = np.where(never, 0.0, np.exp(-lambda_edge * np.maximum(now - np.where(never, now, last_observed), 0.0)))
    keep = rng.random(np.shape(bits)) < survive
    fresh = rng.random(np.shape(bits)) < prob
    return np.where(keep, np.asarray(bits, dtype=bool), fresh)


def propagate_edge(prior: Optional[Tuple[int, float]], now: float, groups: Pair,
                   params: ModelParams, rng: np.random.Generator) -> int:
    """Sample a pair's bit at ``now`` given its last observation.

    Updates arrive as a Poisson(lambda) stream, so with probability
    exp(-lambda * gap) nothing happened and the prior bit stands; otherwise
    the bit is a fresh Bernoulli(rho_ij / n). Never-observed pairs are
    stationary. The caller records (bit, now) as the new observation.
    """
    p = params.edge_prob()[groups]
    if prior is None:
        return int(rng.random() < p)
    bit, last = prior
    if last > now + 1e-12:
        raise InputError(f"last_observed {last} is later than now {now}")
    if rng.random() < math.exp(-params.lambda_edge * (now - last)):
        return int(bit)
    return int(rng.random() < p)


def infection_rate_of(state: NetworkState, node: int, params: ModelParams) -> float:
    """Sum over infected in-neighbours c of ``node`` of B[g(node), g(c)]."""
    if state.disease[node] != SUSCEPTIBLE:
        raise InputError(f"node {node} is not susceptible")
    i = state.group_of[node]
    if state.mode is SimMode.DENSE:
        sources = state.edges[node] & (state.disease == INFECTED)
        per_group = np.bincount(state.group_of[sources], minlength=params.m)
        return float(params.B[i] @ per_group)
    return float(sum(
        params.B[i, state.group_of[b]]
        for b, paths in state.queue.channels.items()
        if paths.bit_at(node, state.clock)
    ))


def _pick(rates: np.ndarray, u: float) -> int:
    cumulative = np.cumsum(rates)
    idx = int(np.searchsorted(cumulative, u, side="right"))
    if idx >= len(rates):
        idx = int(np.flatnonzero(rates > 0)[-1])
    return idx


# ---------------- dense engine -----------------

def _dense_infect(state: NetworkState, a: int) -> None:
    ga = state.group_of[a]
    state.exposure[ga] -= state.infected_in[a]
    state.disease[a] = INFECTED
    state.group_counts[0, ga] -= 1
    state.group_counts[1, ga] += 1
    receivers = np.flatnonzero(state.edges[:, a])
    state.infected_in[receivers, ga] += 1
    susceptible = receivers[state.disease[receivers] == SUSCEPTIBLE]
    state.exposure[:, ga] += np.bincount(state.group_of[susceptible], minlength=state.exposure.shape[0])


def _dense_recover(state: NetworkState, b: int) -> None:
    gb = state.group_of[b]
    state.disease[b] = RECOVERED
    state.group_counts[1, gb] -= 1
    state.group_counts[2, gb] += 1
    receivers = np.flatnonzero(state.edges[:, b])
    state.infected_in[receivers, gb] -= 1
    susceptible = receivers[state.disease[receivers] == SUSCEPTIBLE]
    state.exposure[:, gb] -= np.bincount(state.group_of[susceptible], minlength=state.exposure.shape[0])


def _pair_at(k: int, n: int) -> Pair:
    """k-th ordered pair (a, b), a != b, in lexicographic order."""
    a, rest = divmod(k, n - 1)
    return a, rest if rest < a else rest + 1


def step_dense(state: NetworkState, params: ModelParams,
               horizon: float = math.inf) -> Tuple[Optional[EventRecord], NetworkState]:
    """One Gillespie step of the full chain.

    Event order for the cumulative scan: infections by node index,
    recoveries by node index, then edge updates by lexicographic pair.
    Returns (None, state) with the clock moved to ``horizon`` when the next
    event would fall after it.
    """
    if state.mode is not SimMode.DENSE:
        raise InputError("step_dense needs a dense-mode state")
    n = state.n
    infection_total = float(np.sum(params.B * state.exposure))
    recovery_total = float(params.gamma @ state.group_counts[1])
    edge_total = params.lambda_edge * n * (n - 1)
    total = infection_total + recovery_total + edge_total
    if total <= 0:
        raise AbsorbedError("total event rate is zero")

    t_next = state.clock + state.rng.exponential() / total
    if t_next > horizon:
        state.clock = horizon
        return None, state
    state.clock = t_next
    u = state.rng.random() * total

    if u < infection_total and infection_total > 0:
        nodes = np.flatnonzero(state.disease == SUSCEPTIBLE)
        rates = np.einsum("ak,ak->a", params.B[state.group_of[nodes]], state.infected_in[nodes])
        a = int(nodes[_pick(rates, u)])
        _dense_infect(state, a)
        return EventRecord(t_next, EventKind.INFECTION, node=a, group=int(state.group_of[a])), state

    u -= infection_total
    if u < recovery_total:
        nodes = np.flatnonzero(state.disease == INFECTED)
        b = int(nodes[_pick(params.gamma[state.group_of[nodes]], u)])
        _dense_recover(state, b)
        return EventRecord(t_next, EventKind.RECOVERY, node=b, group=int(state.group_of[b])), state

    u -= recovery_total
    k = min(int(u / params.lambda_edge), n * (n - 1) - 1)
    a, b = _pair_at(max(k, 0), n)
    ga, gb = state.group_of[a], state.group_of[b]
    new = state.rng.random() < params.rho[ga, gb] / n
    if new != state.edges[a, b]:
        state.edges[a, b] = new
        if state.disease[b] == INFECTED:
            delta = 1 if new else -1
            state.infected_in[a, gb] += delta
            if state.disease[a] == SUSCEPTIBLE:
                state.exposure[ga, gb] += delta
    return EventRecord(t_next, EventKind.EDGE_UPDATE, pair=(a, b), new_state=int(new)), state


def advance_edges(state: NetworkState, params: ModelParams, t: float) -> None:
    """Move every dense edge bit from ``state.clock`` to ``t`` in one exact draw."""
    if t <= state.clock:
        return
    prob = params.edge_prob()[state.group_of][:, state.group_of]
    last = np.full(state.edges.shape, state.clock)
    state.edges = propagate_edges(state.edges, last, t, prob, params.lambda_edge, state.rng)
    np.fill_diagonal(state.edges, False)
    state.clock = t
    _dense_books(state, params.m)


# ---------------- lazy engine -----------------

def _sample_paths(state: NetworkState, params: ModelParams, b: int, recovery: float) -> _ChannelPaths:
    """Edge paths, from ``state.clock``, of the channels from ``b`` to every susceptible node.

    An on channel leaves that state at rate lambda (1 - p) + B, by a
    transmission with probability B / (lambda (1 - p) + B); an off channel
    switches on at rate lambda p. A path ends at its transmission or at
    ``recovery``. Channels with B = 0 never transmit and keep their first bit.
    """
    gb = state.group_of[b]
    receivers = np.flatnonzero(state.disease == SUSCEPTIBLE)
    k = len(receivers)
    prob = params.edge_prob()[state.group_of[receivers], gb]
    B = params.B[state.group_of[receivers], gb]
    lam = params.lambda_edge
    # a channel's pair was never observed before, so its bit is stationary
    first_bit = propagate_edges(np.zeros(k, dtype=bool), np.full(k, np.nan), state.clock, prob, lam, state.rng)

    bit = first_bit.copy()
    now = np.full(k, state.clock)
    live = np.flatnonzero(B > 0)
    rows = []
    while len(live):
        on = bit[live]
        leave = np.where(on, lam * (1.0 - prob[live]) + B[live], lam * prob[live])
        with np.errstate(divide="ignore"):
            ends = now[live] + state.rng.exponential(size=len(live)) / leave
        inside = ends < recovery
        transmit = inside & on & (state.rng.random(len(live)) * leave < B[live])
        for a, t in zip(receivers[live[transmit]].tolist(), ends[transmit].tolist()):
            state.queue.predict_infection(t, a)
        switch = inside & ~transmit
        live, ends = live[switch], ends[switch]
        if not len(live):
            break
        row = np.full(k, np.inf)
        row[live] = ends
        rows.append(row)
        now[live] = ends
        bit[live] = ~bit[live]
    switches = np.vstack(rows) if rows else np.empty((0, k))
    return _ChannelPaths(receivers, first_bit, switches)


def _schedule_infector(state: NetworkState, params: ModelParams, b: int) -> None:
    """``b`` is infected at ``state.clock``: draw its recovery and the paths of its channels."""
    gamma = params.gamma[state.group_of[b]]
    recovery = state.clock + state.rng.exponential() / gamma if gamma > 0 else math.inf
    if recovery < math.inf:
        state.queue.push(recovery, _RECOVER, b)
    state.queue.channels[b] = _sample_paths(state, params, b, recovery)


def _lazy_infect(state: NetworkState, params: ModelParams, a: int) -> None:
    ga = state.group_of[a]
    state.disease[a] = INFECTED
    state.group_counts[0, ga] -= 1
    state.group_counts[1, ga] += 1
    state.queue.predicted.pop(a, None)
    _schedule_infector(state, params, a)


def _lazy_recover(state: NetworkState, b: int) -> None:
    gb = state.group_of[b]
    state.disease[b] = RECOVERED
    state.group_counts[1, gb] -= 1
    state.group_counts[2, gb] += 1
    state.queue.channels.pop(b, None)


def step_lazy(state: NetworkState, params: ModelParams,
              horizon: float = math.inf) -> Tuple[Optional[EventRecord], NetworkState]:
    """Next infection or recovery off the event queue.

    Transmissions into nodes that are no longer susceptible are dropped.
    Returns (None, state) with the clock moved to ``horizon`` when the next
    event would fall after it.
    """
    if state.mode is not SimMode.LAZY:
        raise InputError("step_lazy needs a lazy-mode state")
    queue = state.queue
    while queue.heap:
        t, _, kind, node = queue.heap[0]
        if kind == _INFECT and state.disease[node] != SUSCEPTIBLE:
            heapq.heappop(queue.heap)
            continue
        if t > horizon:
            state.clock = horizon
            return None, state
        heapq.heappop(queue.heap)
        state.clock = t
        group = int(state.group_of[node])
        if kind == _RECOVER:
            _lazy_recover(state, node)
            return EventRecord(t, EventKind.RECOVERY, node=node, group=group), state
        _lazy_infect(state, params, node)
        return EventRecord(t, EventKind.INFECTION, node=node, group=group), state
    raise AbsorbedError("no infection or recovery is pending")


# ---------------- runs -----------------

def simulate(state: NetworkState, params: ModelParams, t_end: float, sample_dt: float,
             mode: Optional[SimMode] = None, record_events: bool = True,
             stop_when_absorbed: bool = True) -> Tuple[Trajectory, List[EventRecord]]:
    """Run the chain from ``state.clock`` to ``t_end``, sampling group fractions every ``sample_dt``.

    With ``stop_when_absorbed`` the run stops stepping once no node is
    infected; a dense state then has its edges fast-forwarded to the end in
    one exact draw (the edge updates of that stretch are not logged).
    """
    if sample_dt <= 0:
        raise InputError("sample_dt must be positive")
    if mode is not None and SimMode(mode) is not state.mode:
        raise InputError(f"state was initialised in {state.mode.value} mode, not {SimMode(mode).value}")
    step = step_dense if state.mode is SimMode.DENSE else step_lazy
    steps = int(math.ceil(max(t_end - state.clock, 0.0) / sample_dt - 1e-9))
    times = state.clock + sample_dt * np.arange(steps + 1)
    horizon = float(times[-1])
    values = np.empty((steps + 1, 3, params.m))
    values[0] = state.fractions()
    filled = 1
    events: List[EventRecord] = []

    while filled <= steps:
        if stop_when_absorbed and state.n_infected() == 0:
            break
        before = state.fractions()
        try:
            event, state = step(state, params, horizon)
        except AbsorbedError:
            break
        t_event = event.time if event is not None else math.inf
        while filled <= steps and times[filled] < t_event:
            values[filled] = before
            filled += 1
        if event is None:
            break
        if record_events:
            events.append(event)

    if state.mode is SimMode.DENSE and state.clock < horizon:
        advance_edges(state, params, horizon)
    state.clock = max(state.clock, horizon)
    values[filled:] = state.fractions()
    return Trajectory(times, values), events


@dataclass(frozen=True)
class EnsembleResult:
    mean: Trajectory
    variance: np.ndarray
    finals: np.ndarray
    paths: np.ndarray
    seeds: Tuple[int, ...]

    @property
    def times(self) -> np.ndarray:
        return self.mean.times


def _run_once(params: ModelParams, infected, recovered, seed: int, mode: SimMode,
              t_end: float, sample_dt: float) -> np.ndarray:
    state = init_network(params, infected, seed, mode=mode, initial_recovered=recovered)
    trajectory, _ = simulate(state, params, t_end, sample_dt, record_events=False)
    return trajectory.values


def ensemble(params: ModelParams, initial_infected: Sequence[int], M: int, t_end: float,
             sample_dt: float, base_seed: int, mode: SimMode = SimMode.LAZY,
             initial_recovered: Optional[Sequence[int]] = None, n_jobs: int = 1,
             progress: bool = False) -> EnsembleResult:
    """M independent runs with seeds base_seed + k, merged by run index."""
    if M < 1:
        raise InputError("ensemble needs M >= 1")
    mode = SimMode(mode)
    seeds = tuple(int(base_seed) + k for k in range(M))
    iterator = tqdm(seeds, desc=f"{mode.value} runs", disable=not progress)
    runs = Parallel(n_jobs=n_jobs)(
        delayed(_run_once)(params, initial_infected, initial_recovered, seed, mode, t_end, sample_dt)
        for seed in iterator
    )
    paths = np.stack(runs)
    steps = paths.shape[1] - 1
    times = sample_dt * np.arange(steps + 1)
    variance = paths.var(axis=0, ddof=1) if M > 1 else np.zeros_like(paths[0])
    logger.info("ensemble of %d %s runs finished (n=%d, t_end=%g)", M, mode.value, params.n, t_end)
    return EnsembleResult(
        mean=Trajectory(times, paths.mean(axis=0)),
        variance=variance,
        finals=paths[:, -1],
        paths=paths,
        seeds=seeds,
    )
