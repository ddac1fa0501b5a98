"""The full feedback loop: collect, query, learn rewards, learn distance, act.

Per iteration the agent rolls out one epsilon-greedy episode, periodically
holds a feedback session (sampling candidate segment pairs from replay,
scoring them, and asking the teacher for labels), retrains the reward
ensemble on every labeled pair so far, refreshes the temporal-distance model
on the episodes gathered since its last update, relabels the whole replay
buffer with the mean ensemble reward, and runs tabular Q-learning sweeps
over the relabeled transitions. Evaluation is a deterministic greedy rollout.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .distance import (
    NetworkEnergyModel,
    TabularEnergyModel,
    fit_successor_distance,
    learned_distance,
)
from .gridworld import GridWorld
from .mdp import (
    Segment,
    Trajectory,
    epsilon_greedy_policy,
    greedy_policy,
    make_rng,
    make_segment,
    rollout,
    segment_arrays,
)
from .rewards import (
    LabeledPair,
    PreferenceLog,
    PreferenceRecord,
    RewardEnsemble,
    Teacher,
    label_pair,
    make_tabular_ensemble,
    timestamp,
)
from .selection import (
    CandidateBatch,
    SelectionConfig,
    interval_stage_difference,
    quadrilateral_distance,
    select_queries,
)


@dataclass
class LoopConfig:
    iterations: int = 80
    warmup_episodes: int = 50
    feedback_interval: int = 2
    distance_interval: int = 1
    total_queries: int = 200
    segment_length: int = 5
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    teacher: Teacher = field(default_factory=Teacher)
    ensemble_size: int = 3
    reward_lr: float = 0.05
    reward_steps: int = 40
    reward_init_scale: float = 0.5
    reward_weight_decay: float = 0.01
    reward_pessimism: float = 0.0
    relabel_margin: float = 0.02
    member_bootstrap: bool = True
    candidate_window: int = 25
    candidate_pool: str = "all"
    local_pair_fraction: float = 0.5
    exploring_start_fraction: float = 0.5
    eval_slack: int | None = None
    distance_backend: str = "tabular"
    distance_gamma: float = 0.9
    distance_pretrain_steps: int = 300
    distance_steps: int = 60
    distance_batch: int = 32
    distance_lr: float = 0.01
    q_alpha: float = 0.2
    q_gamma: float = 0.999
    q_sweeps: int = 3
    eps_start: float = 0.5
    eps_end: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        if self.iterations < 1 or self.warmup_episodes < 0:
            raise ValueError("iterations must be >= 1 and warmup_episodes >= 0")
        if self.feedback_interval < 1 or self.distance_interval < 1:
            raise ValueError("intervals must be >= 1")
        if self.distance_pretrain_steps < 0:
            raise ValueError("distance_pretrain_steps must be >= 0")
        if self.total_queries < 0 or self.segment_length < 1:
            raise ValueError("total_queries must be >= 0 and segment_length >= 1")
        if self.distance_backend not in ("tabular", "network"):
            raise ValueError("distance_backend must be 'tabular' or 'network'")
        if self.reward_weight_decay < 0.0 or self.candidate_window < 1:
            raise ValueError("need reward_weight_decay >= 0 and candidate_window >= 1")
        if self.candidate_pool not in ("all", "canonical"):
            raise ValueError("candidate_pool must be 'all' or 'canonical'")
        if not (0.0 <= self.local_pair_fraction <= 1.0):
            raise ValueError("local_pair_fraction must be in [0, 1]")
        if self.reward_pessimism < 0.0 or self.relabel_margin < 0.0:
            raise ValueError("reward_pessimism and relabel_margin must be >= 0")
        if not (0.0 <= self.exploring_start_fraction <= 1.0):
            raise ValueError("exploring_start_fraction must be in [0, 1]")
        if not (0.0 <= self.eps_end <= self.eps_start <= 1.0):
            raise ValueError("need 0 <= eps_end <= eps_start <= 1")
        if not (0.0 < self.q_gamma <= 1.0):
            raise ValueError("q_gamma must lie in (0, 1]")


class LabelMailbox:
    """Minimal interface between the loop and an external labeler.

    The loop calls :meth:`submit` with unlabeled records and, on later
    iterations, :meth:`collect` for any that have been labeled meanwhile.
    The in-process implementation is used by tests; the HTTP service wraps
    the same contract.
    """

    def __init__(self):
        self.pending: list[PreferenceRecord] = []
        self.ready: list[PreferenceRecord] = []

    def submit(self, records: list[PreferenceRecord]) -> None:
        self.pending.extend(records)

    def collect(self) -> list[PreferenceRecord]:
        out, self.ready = self.ready, []
        return out


def grid_features(world: GridWorld) -> np.ndarray:
    """(x, y, carry, delivered) feature rows, coordinates scaled to [0, 1]."""
    feats = np.zeros((world.n_states, 4))
    for s in range(world.n_states):
        x, y, carry = world.locate(s)
        feats[s] = (x / (world.width - 1), y / (world.height - 1), float(carry),
                    float(s == world.delivered_state))
    return feats


def make_distance_model(world: GridWorld, cfg: LoopConfig, rng: np.random.Generator):
    if cfg.distance_backend == "tabular":
        return TabularEnergyModel(world.n_states, lr=cfg.distance_lr)
    return NetworkEnergyModel(grid_features(world), hidden=(64, 64),
                              lr=cfg.distance_lr, rng=rng)


def relabel_replay(trajs: list[Trajectory], ensemble: RewardEnsemble,
                   pessimism: float = 0.0, shift_max_to_zero: bool = False,
                   margin: float = 0.0) -> None:
    """Overwrite stored step rewards; by default with the ensemble mean.

    The optional transforms produce the policy-facing reward the loop trains
    Q on. ``pessimism`` k > 0 relabels with mean - k * std across members,
    downgrading predictions the members disagree on. ``shift_max_to_zero``
    subtracts the table maximum afterwards; a per-step constant leaves every
    equal-length preference probability unchanged, but it turns spurious
    positive loops into costs. The pairwise loss alone cannot rule such
    loops out (credit for a bonus smears over co-occurring steps), and a
    greedy policy would milk one forever instead of finishing the task.

    The shift alone still leaves a knife edge: the argmax pair costs exactly
    zero, so if that pair happens to be loopable (a wall bump, a no-op
    interact) the policy can park on it for free, tying with task
    completion. ``margin`` > 0 subtracts a further ``margin * span`` of the
    relabeled table, so even the best step stays strictly costly and
    reaching the terminal state is the only way to stop paying. A uniform
    per-step constant never reorders equal-length paths, so the steering
    signal is untouched.
    """
    tables = np.stack([m.table() for m in ensemble.members])
    value = tables.mean(axis=0)
    if pessimism:
        value = value - pessimism * tables.std(axis=0)
    if shift_max_to_zero:
        span = float(value.max() - value.min())
        value -= value.max()
        if margin:
            value -= margin * (span if span > 0.0 else 1.0)
    for traj in trajs:
        if len(traj):
            traj.rewards = value[traj.states, traj.actions]


def _sample_segment(trajs: list[Trajectory], length: int,
                    rng: np.random.Generator,
                    indices: list[int] | None = None) -> Segment | None:
    """Uniform segment from the given trajectory indices (default: all)."""
    pool = range(len(trajs)) if indices is None else indices
    eligible = [i for i in pool if len(trajs[i]) >= length]
    if not eligible:
        return None
    ti = int(eligible[rng.integers(len(eligible))])
    start = int(rng.integers(len(trajs[ti]) - length + 1))
    return make_segment(ti, trajs[ti], start, length)


def _sample_local_partner(trajs: list[Trajectory], s0: Segment,
                          rng: np.random.Generator) -> Segment | None:
    """Segment from ``s0``'s own trajectory whose window overlaps ``s0``'s.

    Overlapping windows share all but a few steps, so the shared steps cancel
    in the pairwise loss and the label's gradient lands on the differing
    steps alone. Preference learning over independently drawn segments smears
    a bonus across every co-occurring step; these local comparisons are what
    pin per-step credit down.
    """
    traj = trajs[s0.source]
    lo = max(0, s0.start - s0.length + 1)
    hi = min(len(traj) - s0.length, s0.start + s0.length - 1)
    if hi <= lo:
        return None
    start = int(rng.integers(lo, hi + 1))
    if start == s0.start:  # identical windows carry no signal; nudge one off
        start = start + 1 if start < hi else start - 1
    return make_segment(s0.source, traj, start, s0.length)


def _segment_interval(values: np.ndarray) -> tuple[float, float]:
    return float(np.min(values)), float(np.max(values))


def build_candidates(
    trajs: list[Trajectory],
    world: GridWorld,
    distance_model,
    ensemble: RewardEnsemble,
    cfg: LoopConfig,
    rng: np.random.Generator,
    candidate_idx: list[int] | None = None,
) -> CandidateBatch | None:
    """Sample candidate segment pairs and attach the two scoring columns.

    The stage-difference column depends on the selection mode: quadrilateral
    endpoint distance for "stage_aligned", interval overlap of learned
    distance-to-start for "interval_distance", interval overlap of raw step
    indices for "interval_timestep", and zeros otherwise (the column is
    ignored by "disagreement" and "uniform"). Candidates come from the most
    recent ``cfg.candidate_window`` eligible trajectories so queries track the
    current policy's behavior instead of stale warmup episodes.

    ``candidate_idx`` restricts sampling to the given trajectory indices (the
    driver passes episodes launched from the canonical start state, keeping
    exploring-start episodes out of the query pool: segments from randomized
    starts concentrate ensemble variance on states the task never visits,
    which starves uncertainty-driven selection of on-task comparisons).
    """
    n_pairs = cfg.selection.candidate_factor * cfg.selection.queries_per_session
    eligible = list(range(len(trajs))) if candidate_idx is None else candidate_idx
    window = eligible[-cfg.candidate_window:]
    pairs: list[tuple[Segment, Segment]] = []
    for _ in range(n_pairs):
        s0 = _sample_segment(trajs, cfg.segment_length, rng, indices=window)
        if s0 is None:
            return None
        s1 = None
        if rng.random() < cfg.local_pair_fraction:
            s1 = _sample_local_partner(trajs, s0, rng)
        if s1 is None:
            s1 = _sample_segment(trajs, cfg.segment_length, rng, indices=window)
        if s1 is None:
            return None
        pairs.append((s0, s1))

    mode = cfg.selection.mode
    stage_diff = np.zeros(n_pairs)
    if mode == "stage_aligned":
        d = learned_distance(distance_model, cfg.distance_gamma).values
        stage_diff = np.array([
            quadrilateral_distance(d, s0, s1) for s0, s1 in pairs
        ])
    elif mode == "interval_distance":
        d = learned_distance(distance_model, cfg.distance_gamma).values
        init = world.initial_state
        vals = []
        for s0, s1 in pairs:
            iv = []
            for seg in (s0, s1):
                states = segment_arrays(trajs[seg.source], seg)[0]
                iv.append(_segment_interval(d[init, states]))
            vals.append(interval_stage_difference(iv[0], iv[1]))
        stage_diff = np.array(vals)
    elif mode == "interval_timestep":
        stage_diff = np.array([
            interval_stage_difference(
                (s0.start, s0.start + s0.length - 1),
                (s1.start, s1.start + s1.length - 1),
            )
            for s0, s1 in pairs
        ])

    state_diff = np.array([
        ensemble.disagreement(_resolve_pair(trajs, s0, s1)) for s0, s1 in pairs
    ])
    return CandidateBatch(pairs=pairs, stage_diff=stage_diff, state_diff=state_diff)


def _resolve_pair(trajs: list[Trajectory], s0: Segment, s1: Segment) -> LabeledPair:
    st0, a0 = segment_arrays(trajs[s0.source], s0)
    st1, a1 = segment_arrays(trajs[s1.source], s1)
    return LabeledPair(states0=st0, actions0=a0, states1=st1, actions1=a1, label=0)


def feedback_session(
    trajs: list[Trajectory],
    world: GridWorld,
    distance_model,
    ensemble: RewardEnsemble,
    cfg: LoopConfig,
    budget: int,
    rng: np.random.Generator,
    mailbox: LabelMailbox | None = None,
    candidate_idx: list[int] | None = None,
) -> list[PreferenceRecord]:
    """Select up to ``budget`` queries and label them (or park them for a human).

    Returns the records that are immediately usable; human-mode records go to
    the mailbox and return later through :meth:`LabelMailbox.collect`.
    """
    if budget <= 0:
        return []
    batch = build_candidates(trajs, world, distance_model, ensemble, cfg, rng,
                             candidate_idx=candidate_idx)
    if batch is None:
        return []
    session_cfg = SelectionConfig(
        mode=cfg.selection.mode,
        c_stage=cfg.selection.c_stage,
        c_state=cfg.selection.c_state,
        queries_per_session=min(cfg.selection.queries_per_session, budget),
        candidate_factor=cfg.selection.candidate_factor,
    )
    chosen = select_queries(batch, session_cfg, rng)
    true_r = world.mdp.true_reward
    ready: list[PreferenceRecord] = []
    parked: list[PreferenceRecord] = []
    for idx in chosen:
        s0, s1 = batch.pairs[idx]
        st0, a0 = segment_arrays(trajs[s0.source], s0)
        st1, a1 = segment_arrays(trajs[s1.source], s1)
        # teachers judge ground-truth rewards, never the relabeled buffer
        label = label_pair(cfg.teacher, true_r[st0, a0], true_r[st1, a1], rng)
        record = PreferenceRecord(
            sigma0=s0, sigma1=s1, label=label, teacher=cfg.teacher.kind,
            created_at=timestamp(), selector=cfg.selection.mode,
        )
        if label is None:
            parked.append(record)
        else:
            ready.append(record)
    if parked:
        if mailbox is None:
            raise ValueError("human teacher requires a mailbox")
        mailbox.submit(parked)
    return ready


@dataclass
class LoopResult:
    world: GridWorld
    config: LoopConfig
    metrics: list[dict]
    q: np.ndarray
    ensemble: RewardEnsemble
    distance_model: object
    trajectories: list[Trajectory]
    preferences: PreferenceLog

    def final_success(self) -> float:
        return float(self.metrics[-1]["success"]) if self.metrics else 0.0

    def tail_success(self, fraction: float = 0.25) -> float:
        """Mean all-starts success rate over the trailing fraction of iterations."""
        n = max(1, int(math.ceil(len(self.metrics) * fraction)))
        return float(np.mean([row["success_rate"] for row in self.metrics[-n:]]))

    def metrics_to_csv(self, path: str) -> None:
        cols = ["iteration", "epsilon", "queries_used", "reward_loss",
                "distance_objective", "success", "success_rate",
                "true_return", "learned_return", "episode_steps"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(cols)
            for row in self.metrics:
                writer.writerow([repr(row[c]) if isinstance(row[c], float)
                                 else row[c] for c in cols])


def _greedy_eval(world: GridWorld, q: np.ndarray,
                 learned: np.ndarray) -> tuple[bool, float, float, int]:
    """Deterministic greedy rollout from the canonical start.

    Returns (success, true return, learned-reward return, steps).
    """
    mdp = world.mdp
    s = world.initial_state
    total = 0.0
    total_learned = 0.0
    for step in range(world.horizon):
        if mdp.terminal[s]:
            return world.delivered_state == s, total, total_learned, step
        a = int(q[s].argmax())
        total += float(mdp.true_reward[s, a])
        total_learned += float(learned[s, a])
        s = int(world.successor[s, a])
    return s == world.delivered_state, total, total_learned, world.horizon


def _min_steps(world: GridWorld, x: int, y: int) -> int:
    """Shortest delivery from (x, y) empty-handed: two walks plus two interacts."""
    ox, oy = world.object_cell
    tx, ty = world.target_cell
    return abs(x - ox) + abs(y - oy) + abs(ox - tx) + abs(oy - ty) + 2


def feasible_starts(world: GridWorld) -> list[int]:
    """Empty-handed start states from which delivery fits in the horizon."""
    out = []
    for x in range(world.width):
        for y in range(world.height):
            if _min_steps(world, x, y) <= world.horizon:
                out.append(world.state_of(x, y, False))
    return out


def greedy_success_rate(world: GridWorld, q: np.ndarray,
                        slack: int | None = None) -> float:
    """Fraction of feasible starts delivered by the greedy policy.

    With ``slack`` set, each start's step budget is its shortest delivery
    path plus ``slack`` (capped by the horizon) instead of the full horizon,
    so the rate counts near-optimal navigation rather than mere eventual
    arrival. While the budget stays loose for exploration, a tight eval
    budget is what exposes residual reward-model noise as detours.
    """
    starts = feasible_starts(world)
    if not starts:
        return 0.0
    states = np.array(starts, dtype=int)
    if slack is None:
        budgets = np.full(len(starts), world.horizon, dtype=int)
    else:
        budgets = np.array([
            min(world.horizon, _min_steps(world, *world.locate(s)[:2]) + slack)
            for s in starts
        ])
    # all starts advance in lockstep; the delivered state is absorbing, so a
    # start that finishes early parks there while the others keep walking
    for step in range(int(budgets.max())):
        live = budgets > step
        moving = states[live]
        states[live] = world.successor[moving, q[moving].argmax(axis=1)]
    return float(np.mean(states == world.delivered_state))


def run_loop(world: GridWorld, cfg: LoopConfig,
             mailbox: LabelMailbox | None = None,
             preference_path: str | None = None) -> LoopResult:
    rng = make_rng(cfg.seed)
    mdp = world.mdp
    trajs: list[Trajectory] = []
    sd_buffer: list[Trajectory] = []
    canonical_idx: list[int] = []  # episodes launched from the task's start state
    log = PreferenceLog(preference_path)

    uniform = np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)
    live_states = np.flatnonzero(~mdp.terminal)
    for i in range(cfg.warmup_episodes):
        # exploring starts: random-walk warmup from every part of the state
        # space so later stages are represented in replay and in the distance
        # model's training stream; half the warmups keep the canonical start
        # so the query pool opens with on-task segments
        start: int | None = None
        if i % 2 == 1:
            start = int(live_states[rng.integers(len(live_states))])
        traj = rollout(mdp, uniform, world.horizon, rng, policy_version=0,
                       start=start)
        if start is None:
            canonical_idx.append(len(trajs))
        trajs.append(traj)
        sd_buffer.append(traj)

    ensemble = make_tabular_ensemble(
        mdp.n_states, mdp.n_actions, cfg.ensemble_size, rng,
        lr=cfg.reward_lr, init_scale=cfg.reward_init_scale,
        weight_decay=cfg.reward_weight_decay,
    )
    distance_model = make_distance_model(world, cfg, rng)
    if cfg.distance_pretrain_steps and any(len(t) for t in sd_buffer):
        # the first feedback sessions spend a large share of the query budget,
        # so the stage-distance estimate must already be meaningful then; a
        # pretraining pass over the warmup walks buys that for a few hundred
        # contrastive steps
        fit_successor_distance(
            distance_model, sd_buffer, cfg.distance_gamma,
            steps=cfg.distance_pretrain_steps, batch_size=cfg.distance_batch,
            rng=rng,
        )
    q = np.zeros((mdp.n_states, mdp.n_actions))

    queries_used = 0
    last_loss = float("nan")
    last_objective = float("nan")
    metrics: list[dict] = []
    # per-record bootstrap multiplicities, drawn once when a record first
    # becomes trainable; Poisson(1) counts reproduce sampling with
    # replacement for a stream that grows one record at a time
    bag_counts: dict[int, np.ndarray] = {}

    for it in range(1, cfg.iterations + 1):
        if cfg.iterations > 1:
            frac = (it - 1) / (cfg.iterations - 1)
        else:
            frac = 1.0
        epsilon = cfg.eps_start + (cfg.eps_end - cfg.eps_start) * frac

        behavior = epsilon_greedy_policy(q, epsilon)
        # exploring starts for a fraction of behavior episodes keep the later
        # stages represented in replay even while the policy is still bad at
        # reaching them from the canonical start
        start = None
        if rng.random() < cfg.exploring_start_fraction:
            start = int(live_states[rng.integers(len(live_states))])
        traj = rollout(mdp, behavior, world.horizon, rng, policy_version=it,
                       start=start)
        if start is None:
            canonical_idx.append(len(trajs))
        trajs.append(traj)
        sd_buffer.append(traj)

        if mailbox is not None:
            for record in mailbox.collect():
                log.append(record)

        if it % cfg.feedback_interval == 0 and queries_used < cfg.total_queries:
            parked_before = len(mailbox.pending) if mailbox is not None else 0
            pool = canonical_idx if cfg.candidate_pool == "canonical" else None
            records = feedback_session(
                trajs, world, distance_model, ensemble, cfg,
                budget=cfg.total_queries - queries_used, rng=rng, mailbox=mailbox,
                candidate_idx=pool,
            )
            for record in records:
                log.append(record)
            queries_used += len(records)
            if mailbox is not None:
                # parked human queries consume budget when asked, not answered
                queries_used += len(mailbox.pending) - parked_before

        trainable = [(i, r) for i, r in enumerate(log.records) if r.trainable()]
        if trainable:
            pairs = [r.resolve(trajs) for _, r in trainable]
            bags = None
            if cfg.member_bootstrap:
                bags = [[] for _ in range(cfg.ensemble_size)]
                for j, (li, _) in enumerate(trainable):
                    if li not in bag_counts:
                        bag_counts[li] = rng.poisson(1.0, size=cfg.ensemble_size)
                    for k in range(cfg.ensemble_size):
                        bags[k].extend([j] * int(bag_counts[li][k]))
            last_loss = ensemble.train(pairs, steps=cfg.reward_steps, bags=bags)

        if it % cfg.distance_interval == 0 and any(len(t) for t in sd_buffer):
            trace = fit_successor_distance(
                distance_model, sd_buffer, cfg.distance_gamma,
                steps=cfg.distance_steps, batch_size=cfg.distance_batch, rng=rng,
            )
            last_objective = float(trace[-1])
            sd_buffer = []

        relabel_replay(trajs, ensemble, pessimism=cfg.reward_pessimism,
                       shift_max_to_zero=True, margin=cfg.relabel_margin)

        transitions = []
        for t in trajs:
            n = len(t)
            if not n:
                continue
            nxt = np.append(t.states[1:], t.final_state)
            live = ~mdp.terminal[nxt]
            transitions.extend(zip(t.states.tolist(), t.actions.tolist(),
                                   t.rewards.tolist(), nxt.tolist(),
                                   live.tolist()))
        order = np.arange(len(transitions))
        gamma_q, alpha = cfg.q_gamma, cfg.q_alpha
        for _ in range(cfg.q_sweeps):
            rng.shuffle(order)
            for k in order.tolist():
                s, a, r, nxt, live = transitions[k]
                # near-undiscounted backup: with the relabeled buffer making
                # every non-terminal step strictly costly, a discount this close
                # to one prices an endless self-loop above any terminating
                # route, so the greedy policy cannot park on a cheap wall bump
                if live:
                    r += gamma_q * q[nxt].max()
                q[s, a] += alpha * (r - q[s, a])

        success, true_return, learned_return, steps = _greedy_eval(
            world, q, ensemble.mean_table())
        metrics.append({
            "iteration": it,
            "epsilon": float(epsilon),
            "queries_used": queries_used,
            "reward_loss": float(last_loss),
            "distance_objective": float(last_objective),
            "success": int(success),
            "success_rate": float(greedy_success_rate(world, q, slack=cfg.eval_slack)),
            "true_return": float(true_return),
            "learned_return": float(learned_return),
            "episode_steps": int(steps),
        })

    return LoopResult(
        world=world, config=cfg, metrics=metrics, q=q, ensemble=ensemble,
        distance_model=distance_model, trajectories=trajs, preferences=log,
    )


def make_default_world(**overrides) -> GridWorld:
    """The go-fetch-return task used by the demos and the acceptance runs."""
    params = dict(
        width=5, height=5, start=(0, 0), object_cell=(4, 0), target_cell=(0, 4),
        horizon=16, carry_bonus=1.0, delivered_bonus=10.0, shaping_scale=1.0,
        gamma=0.95,
    )
    params.update(overrides)
    return GridWorld(**params)
