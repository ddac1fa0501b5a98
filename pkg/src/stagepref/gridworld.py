"""Object-delivery gridworld compiled down to a :class:`TabularMdp`.

The agent starts empty-handed, walks to an object cell, picks the object up
with an explicit interact action, carries it to a target cell, and hands it
over with another interact. The state space is the grid crossed with the
carry flag plus one dedicated terminal handover state, so
``n_states == width * height * 2 + 1``.

Rewards follow the staged-bias pattern: a step that advances the task stage
earns that stage's entry bonus (``carry_bonus`` on pickup, ``delivered_bonus``
on delivery), and every step pays a small shaping penalty proportional to the
Manhattan distance from the landing cell to the current subgoal (object cell
while navigating, target cell while carrying). Paying the bonus on entry
rather than per occupied step keeps delivery strictly better than loitering
with the object.

Gating stage changes behind the interact action keeps them rare under a
random behavior policy, which is what gives the task its temporal stage
structure: states across a stage boundary are much farther apart, in
successor-distance terms, than states within one stage.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mdp import TabularMdp, Trajectory

# action ids: up, down, left, right, interact
MOVES = ((0, -1), (0, 1), (-1, 0), (1, 0))
INTERACT = len(MOVES)
N_ACTIONS = len(MOVES) + 1

STAGE_NAVIGATE = 0
STAGE_CARRY = 1
STAGE_DELIVERED = 2


@dataclass
class GridWorld:
    width: int
    height: int
    start: tuple[int, int]
    object_cell: tuple[int, int]
    target_cell: tuple[int, int]
    horizon: int
    carry_bonus: float = 1.0
    delivered_bonus: float = 10.0
    shaping_scale: float = 1.0
    gamma: float = 0.95
    mdp: TabularMdp = field(init=False, repr=False)
    successor: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.width < 2 or self.height < 2:
            raise ValueError("grid must be at least 2x2")
        for name in ("start", "object_cell", "target_cell"):
            x, y = getattr(self, name)
            if not (0 <= x < self.width and 0 <= y < self.height):
                raise ValueError(f"{name} {(x, y)} outside the grid")
        if self.object_cell == self.target_cell:
            raise ValueError("object and target cells must differ")
        if self.horizon < 1:
            raise ValueError("horizon must be positive")
        self.mdp = self._build()
        # moves are deterministic, so each (state, action) has a unique
        # successor; the dense lookup keeps rollout-free evaluation cheap
        self.successor = self.mdp.transition.argmax(axis=2)

    # ---- state indexing -------------------------------------------------

    @property
    def n_cells(self) -> int:
        return self.width * self.height

    @property
    def n_states(self) -> int:
        return 2 * self.n_cells + 1

    def state_of(self, x: int, y: int, carry: bool) -> int:
        return (self.n_cells if carry else 0) + y * self.width + x

    def locate(self, state: int) -> tuple[int, int, bool]:
        """Inverse of :meth:`state_of`: (x, y, carry); handover maps to the target."""
        if state == self.delivered_state:
            return (*self.target_cell, True)
        carry = state >= self.n_cells
        cell = state - self.n_cells if carry else state
        return cell % self.width, cell // self.width, carry

    @property
    def initial_state(self) -> int:
        return self.state_of(*self.start, carry=False)

    @property
    def delivered_state(self) -> int:
        return 2 * self.n_cells

    def stage_of(self, state: int) -> int:
        if state == self.delivered_state:
            return STAGE_DELIVERED
        carry = state >= self.n_cells
        return STAGE_CARRY if carry else STAGE_NAVIGATE

    def stage_labels(self) -> np.ndarray:
        return np.array([self.stage_of(s) for s in range(self.n_states)], dtype=int)

    def true_stage_map(self) -> np.ndarray:
        """One-hot (S, 3) membership table from the ground-truth stages."""
        member = np.zeros((self.n_states, 3))
        member[np.arange(self.n_states), self.stage_labels()] = 1.0
        return member

    # ---- dynamics --------------------------------------------------------

    def _step_cell(self, x: int, y: int, action: int) -> tuple[int, int]:
        dx, dy = MOVES[action]
        return min(max(x + dx, 0), self.width - 1), min(max(y + dy, 0), self.height - 1)

    def _build(self) -> TabularMdp:
        s_count, a_count = self.n_states, N_ACTIONS
        transition = np.zeros((s_count, a_count, s_count))
        reward = np.zeros((s_count, a_count))
        for s in range(s_count):
            x, y, carry = self.locate(s)
            if s == self.delivered_state:
                transition[s, :, s] = 1.0
                continue
            for a in range(a_count):
                entry = 0.0
                nx, ny, n_carry = x, y, carry
                if a == INTERACT:
                    if not carry and (x, y) == self.object_cell:
                        n_carry = True
                        entry = self.carry_bonus
                    elif carry and (x, y) == self.target_cell:
                        transition[s, a, self.delivered_state] = 1.0
                        reward[s, a] = self.delivered_bonus
                        continue
                else:
                    nx, ny = self._step_cell(x, y, a)
                ns = self.state_of(nx, ny, n_carry)
                transition[s, a, ns] = 1.0
                # shaping follows the subgoal of the stage being landed in
                subgoal = self.target_cell if n_carry else self.object_cell
                dist = abs(nx - subgoal[0]) + abs(ny - subgoal[1])
                reward[s, a] = entry - 0.05 * self.shaping_scale * dist
        initial = np.zeros(s_count)
        initial[self.initial_state] = 1.0
        terminal = np.zeros(s_count, dtype=bool)
        terminal[self.delivered_state] = True
        return TabularMdp(
            transition=transition,
            true_reward=reward,
            initial_dist=initial,
            gamma=self.gamma,
            terminal=terminal,
        )

    # ---- reporting -------------------------------------------------------

    def is_success(self, traj: Trajectory) -> bool:
        """A rollout succeeds iff it ends in the delivered terminal state."""
        return traj.final_state == self.delivered_state

    def frames(self, states: np.ndarray | list[int]) -> list[dict]:
        """Rendering payload for a state sequence (used by the labeling API)."""
        out = []
        for s in states:
            x, y, carry = self.locate(int(s))
            out.append({
                "agent": [int(x), int(y)],
                "carry": bool(carry),
                "delivered": int(s) == self.delivered_state,
            })
        return out

    def grid_payload(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "start": list(self.start),
            "object": list(self.object_cell),
            "target": list(self.target_cell),
        }
