"""Planner adapters for the closed-loop executor: the learned policy and the
policy + QP gatekeeper stack."""

from __future__ import annotations

from typing import Optional

from . import policy as policy_mod
from . import postplan
from .core import Trajectory, trajectory_from_ego_frame
from .world import ScenarioWorld


class PolicyPlanner:
    """Renders the frame, runs the network, returns a world-frame plan."""

    name = "policy"

    def __init__(self, params: policy_mod.PolicyParams):
        self.params = params
        self.last_diagnostics = None

    def plan(self, ctx) -> Trajectory:
        out = policy_mod.forward(ctx.channels(), ctx.ego.speed, self.params)
        return trajectory_from_ego_frame(out.states, ctx.ego)


class GatekeptPolicyPlanner:
    """Learned plan re-optimized by the post-processing QP gatekeeper."""

    name = "policy+gatekeeper"

    def __init__(self, params: policy_mod.PolicyParams, world: ScenarioWorld,
                 plan_cfg: Optional[postplan.PostplanConfig] = None):
        self.inner = PolicyPlanner(params)
        self.world = world
        self.plan_cfg = plan_cfg or postplan.PostplanConfig()
        self.ref = postplan.ReferenceLine(world.route_reference())
        self.last_diagnostics = None

    def plan(self, ctx) -> Trajectory:
        learned = self.inner.plan(ctx)
        traj, diag = postplan.gatekeep(learned, self.world, ctx.ego, self.ref,
                                       now=ctx.now, cfg=self.plan_cfg,
                                       ego_geometry=ctx.cfg.ego_geometry)
        self.last_diagnostics = diag
        return traj
