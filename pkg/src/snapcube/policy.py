"""Learned snap-angle policy: rollouts, rewards and REINFORCE training."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import AngleGrid, SnapAngle, check_mask, render_mask_faces
from .network import (Architecture, PolicyWeights, forward, initial_hidden,
                      surrogate_grad)
from .objective import ObjectiveConfig, face_scores, lateral_mean
from .search import SearchResult

log = logging.getLogger(__name__)

REWARD_MODES = ("literal-min", "clipped-gain")


class NonFiniteGradient(FloatingPointError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message, weights, log_records):
        super().__init__(message)
        self.weights = weights
        self.log = log_records


@dataclass(frozen=True)
class ActionSpace:
    """Relative grid moves from ``-n/2`` to ``+n/2``, zero included."""

    n_grid: int = 20

    @property
    def offsets(self) -> np.ndarray:
        half = self.n_grid // 2
        return np.arange(-half, half + 1)

    def __len__(self):
        return len(self.offsets)

    def offset(self, index: int) -> int:
        return int(self.offsets[index])

    def index(self, offset: int) -> int:
        return int(offset + self.n_grid // 2)


class PanoramaEnv:
    """Observations and cached scores of one mask on the angle grid.

    Faces are re-rendered on every ``observe`` (cheap with the cached lookup
    tables); only scores are memoized.
    """

    def __init__(self, mask, grid: AngleGrid, face_size=64, cfg: ObjectiveConfig | None = None):
        self.mask = check_mask(mask)
        self.grid = grid
        self.face_size = face_size
        self.cfg = cfg or ObjectiveConfig()
        self._scores: dict = {}

    def observe(self, k: int) -> np.ndarray:
        k %= len(self.grid)
        faces = render_mask_faces(self.mask, self.grid[k].theta, self.face_size)[:4]
        if k not in self._scores:
            self._scores[k] = lateral_mean(face_scores(faces, self.cfg))
        return faces

    def score(self, k: int) -> float:
        k %= len(self.grid)
        if k not in self._scores:
            self.observe(k)
        return self._scores[k]

    def table(self) -> np.ndarray:
        return np.array([self.score(k) for k in range(len(self.grid))])


def step_reward(best_so_far: float, new_score: float, mode: str = "literal-min") -> float:
    """Raw reward for moving to an angle scoring ``new_score``.

    ``literal-min`` is ``min(O_t - F, 0)``: never positive, it penalizes moves
    that land on a worse angle than the best seen.  ``clipped-gain`` is
    ``max(O_t - F, 0)``: it pays for improvements only.
    """
    gain = best_so_far - new_score
    if mode == "literal-min":
        return min(gain, 0.0)
    if mode == "clipped-gain":
        return max(gain, 0.0)
    raise ValueError(f"unknown reward mode {mode!r}; expected one of {REWARD_MODES}")


def _step_rewards(best, new, mode):
    gain = np.asarray(best) - np.asarray(new)
    return np.minimum(gain, 0.0) if mode == "literal-min" else np.maximum(gain, 0.0)


@dataclass
class Trajectory:
    angles: list            # theta_t as SnapAngle
    shifts: list            # s_t, the grid offset applied to reach theta_t
    actions: list           # p_t, sampled grid offsets
    action_indices: list
    pdfs: np.ndarray        # (T, n_actions)
    scores: list            # F_t
    best: list              # O_t
    next_scores: list = field(default_factory=list)  # F(theta_t + p_t)
    raw_rewards: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    observations: np.ndarray | None = None  # (T, 4, S, S)

    def __len__(self):
        return len(self.angles)


@dataclass(frozen=True)
class RewardBaselines:
    values: tuple
    mode: str = "literal-min"

    def __post_init__(self):
        if not all(np.isfinite(self.values)):
            raise ValueError("reward baselines must be finite")

    def __len__(self):
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


def sample_action(pdf, rng) -> int:
    """Index drawn from the multinomial ``pdf``."""
    cdf = np.cumsum(pdf)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(cdf) - 1))


def _sample_batch(pdfs, rng) -> np.ndarray:
    cdf = np.cumsum(pdfs, axis=1)
    u = rng.random(len(pdfs)) * cdf[:, -1]
    idx = (cdf <= u[:, None]).sum(axis=1)
    return np.minimum(idx, pdfs.shape[1] - 1)


def rollout(envs, w: PolicyWeights, T: int, rng, actions: ActionSpace | None = None,
            reward_mode="literal-min", baselines=None, greedy=False, forced=None,
            evaluate_last=True) -> list:
    """Run one episode per environment, batched through the network.

    ``forced`` pins every sampled action index (testing hook).  With
    ``evaluate_last`` the score after the final move is looked up so the last
    step also gets a reward; inference skips it to stay within budget.
    """
    actions = actions or ActionSpace(len(envs[0].grid))
    if len(actions) != w.arch.n_actions:
        raise ValueError(f"network has {w.arch.n_actions} outputs but the action space "
                         f"has {len(actions)}")
    n = len(envs[0].grid)
    b = len(envs)
    k = np.zeros(b, dtype=int)
    shift = np.zeros(b, dtype=int)
    h = initial_hidden(w, b)
    best = np.full(b, np.inf)
    rec = {key: [] for key in ("k", "shift", "act", "pdf", "F", "O", "obs")}
    for t in range(T):
        obs = np.stack([env.observe(int(kk)) for env, kk in zip(envs, k)])
        F = np.array([env.score(int(kk)) for env, kk in zip(envs, k)])
        best = np.minimum(best, F)
        pdf, h = forward(obs, h, w)
        if forced is not None:
            idx = np.full(b, forced)
        elif greedy:
            idx = pdf.argmax(axis=1)
        else:
            idx = _sample_batch(pdf, rng)
        for key, val in zip(rec, (k.copy(), shift.copy(), idx, pdf, F, best.copy(), obs)):
            rec[key].append(val)
        shift = actions.offsets[idx]
        k = (k + shift) % n
    nxt = [np.array([env.score(int(kk)) for env, kk in zip(envs, ks)]) for ks in rec["k"][1:]]
    if evaluate_last:
        nxt.append(np.array([env.score(int(kk)) for env, kk in zip(envs, k)]))
    raw = None
    if nxt:
        nxt = np.stack(nxt, axis=1)
        raw = _step_rewards(np.stack(rec["O"][:nxt.shape[1]], axis=1), nxt, reward_mode)
    base = np.zeros(T) if baselines is None else np.asarray(getattr(baselines, "values", baselines))

    out = []
    for i, env in enumerate(envs):
        grid = env.grid
        r_raw = [] if raw is None else [float(x) for x in raw[i]]
        out.append(Trajectory(
            angles=[grid[int(rec["k"][t][i])] for t in range(T)],
            shifts=[int(rec["shift"][t][i]) for t in range(T)],
            actions=[actions.offset(int(rec["act"][t][i])) for t in range(T)],
            action_indices=[int(rec["act"][t][i]) for t in range(T)],
            pdfs=np.stack([rec["pdf"][t][i] for t in range(T)]),
            scores=[float(rec["F"][t][i]) for t in range(T)],
            best=[float(rec["O"][t][i]) for t in range(T)],
            next_scores=[] if raw is None else [float(x) for x in nxt[i]],
            raw_rewards=r_raw,
            rewards=[r - float(base[t]) for t, r in enumerate(r_raw)],
            observations=np.stack([rec["obs"][t][i] for t in range(T)]),
        ))
    return out


def run_policy(mask, w: PolicyWeights, T: int, grid: AngleGrid | None = None, rng=None,
               face_size=None, cfg: ObjectiveConfig | None = None, greedy=False,
               env: PanoramaEnv | None = None, forced=None):
    """Episode of ``T`` rotate/score/predict steps; best-of-history result.

    Every step costs one unit of budget, even when the policy revisits an
    angle, so ``budget_used == T``.
    """
    if T < 1:
        raise ValueError("budget T must be at least 1")
    grid = grid or AngleGrid()
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    env = env or PanoramaEnv(mask, grid, face_size or w.arch.face_size, cfg)
    traj = rollout([env], w, T, rng, greedy=greedy, forced=forced, evaluate_last=False)[0]
    history = list(zip(traj.angles, traj.scores))
    return SearchResult.from_history(history, budget_used=T), traj


def estimate_baselines(envs, T: int, seed=0, rollouts: int = 20, mode="literal-min",
                       actions: ActionSpace | None = None) -> RewardBaselines:
    """Mean step-``t`` raw reward of a uniformly random policy.

    Rollouts start at the canonical angle and draw every relative move
    uniformly from the action space; images are visited in order and each is
    rolled out ``rollouts`` times from one seeded generator.
    """
    if not envs:
        raise ValueError("baseline estimation needs a non-empty training set")
    actions = actions or ActionSpace(len(envs[0].grid))
    rng = np.random.default_rng(seed)
    total = np.zeros(T)
    count = 0
    offsets = actions.offsets
    for env in envs:
        n = len(env.grid)
        table = env.table()
        for _ in range(rollouts):
            k = 0
            best = table[0]
            for t in range(T):
                k = (k + int(offsets[rng.integers(len(offsets))])) % n
                total[t] += step_reward(best, table[k], mode)
                best = min(best, table[k])
            count += 1
    return RewardBaselines(tuple(float(x) for x in total / count), mode)


class MomentumSGD:
    """Gradient ascent with heavy-ball momentum."""

    def __init__(self, lr=0.01, momentum=0.9):
        self.lr = lr
        self.momentum = momentum
        self.velocity = None

    def step(self, w: PolicyWeights, grads: dict) -> PolicyWeights:
        if self.velocity is None:
            self.velocity = {k: np.zeros_like(v) for k, v in w.params.items()}
        new = {}
        for name, value in w.params.items():
            v = self.momentum * self.velocity[name] + grads[name]
            self.velocity[name] = v
            new[name] = value + self.lr * v
        return PolicyWeights(w.arch, new)


def reinforce_gradient(trajectories, w: PolicyWeights, entropy_coef=0.0) -> dict:
    obs = np.stack([tr.observations for tr in trajectories])
    acts = np.array([tr.action_indices for tr in trajectories])
    rewards = np.array([tr.rewards for tr in trajectories], dtype=np.float64)
    if rewards.shape != acts.shape:
        raise ValueError("every trajectory needs a reward for each sampled action")
    with np.errstate(invalid="ignore", over="ignore"):
        grads = surrogate_grad(obs, acts, rewards, w, entropy_coef)
    bad = [k for k, v in grads.items() if not np.all(np.isfinite(v))]
    if bad:
        raise NonFiniteGradient(f"non-finite gradient in {', '.join(bad)}")
    return grads


def reinforce_update(trajectories, w: PolicyWeights, lr=0.01, momentum=0.9,
                     optimizer: MomentumSGD | None = None, entropy_coef=0.0) -> PolicyWeights:
    """One ascent step on ``sum_i sum_t grad log pi(p_t^i) R_t^i``.

    Pass a persistent ``optimizer`` to carry momentum across calls.
    """
    optimizer = optimizer or MomentumSGD(lr, momentum)
    return optimizer.step(w, reinforce_gradient(trajectories, w, entropy_coef))


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    T: int = 4
    lr: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    reward_mode: str = "literal-min"
    baseline_rollouts: int = 20
    face_size: int = 64
    n_grid: int = 20
    margin_frac: float = 0.0625
    denominator_mode: str = "band-occupancy"
    # divide each batch's advantages by their standard deviation
    normalize_rewards: bool = False
    # weight of an entropy bonus on every step's action distribution
    entropy_coef: float = 0.0

    def __post_init__(self):
        problems = []
        if self.reward_mode not in REWARD_MODES:
            problems.append(f"reward_mode must be one of {REWARD_MODES}")
        for name in ("epochs", "batch_size", "T", "face_size", "n_grid", "baseline_rollouts"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be positive")
        if self.entropy_coef < 0:
            problems.append("entropy_coef must be non-negative")
        if self.lr < 0:
            problems.append("lr must be non-negative")
        if not 0 <= self.momentum < 1:
            problems.append("momentum must lie in [0, 1)")
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def objective(self) -> ObjectiveConfig:
        return ObjectiveConfig(self.margin_frac, self.denominator_mode)


def validation_curve(envs, w, T, seed, greedy=False) -> list:
    """Mean best-so-far score after 1..T steps over ``envs``."""
    rng = np.random.default_rng(seed)
    trajs = []
    for i in range(0, len(envs), 64):
        trajs += rollout(envs[i:i + 64], w, T, rng, greedy=greedy, evaluate_last=False)
    best = np.array([tr.best for tr in trajs])
    return [float(x) for x in best.mean(axis=0)]


def _make_envs(masks, grid, cfg: TrainConfig):
    obj = cfg.objective
    return [m if isinstance(m, PanoramaEnv) else PanoramaEnv(m, grid, cfg.face_size, obj)
            for m in masks]


def _standardize(trajs):
    scale = np.std([tr.rewards for tr in trajs])
    if scale > 1e-12:
        for tr in trajs:
            tr.rewards = [r / scale for r in tr.rewards]


def train(config: TrainConfig, train_masks, val_masks, weights: PolicyWeights | None = None,
          train_seeds=None, val_seeds=None, arch: Architecture | None = None,
          callback=None):
    """REINFORCE training; returns ``(weights, log_records)``.

    One record per epoch, plus a record for the untrained weights at epoch 0.
    ``callback(record, weights)`` runs after each record is written.
    """
    if train_seeds is not None and val_seeds is not None:
        shared = set(train_seeds) & set(val_seeds)
        if shared:
            raise ValueError(f"train and validation share scene seeds: {sorted(shared)[:5]}")
    if not len(train_masks):
        raise ValueError("empty training set")
    grid = AngleGrid(config.n_grid)
    actions = ActionSpace(config.n_grid)
    arch = arch or Architecture(face_size=config.face_size, n_actions=len(actions))
    w = weights.copy() if weights is not None else PolicyWeights.initialize(arch, config.seed)
    train_envs = _make_envs(train_masks, grid, config)
    val_envs = _make_envs(val_masks, grid, config)
    baselines = estimate_baselines(train_envs, config.T, config.seed, config.baseline_rollouts,
                                   config.reward_mode, actions)
    other = "clipped-gain" if config.reward_mode == "literal-min" else "literal-min"
    rng = np.random.default_rng(config.seed)
    val_seed = config.seed + 1
    opt = MomentumSGD(config.lr, config.momentum)

    records = []

    def record(epoch, rewards, alt_rewards):
        rec = {
            "epoch": epoch,
            "reward_mode": config.reward_mode,
            "mean_train_reward": float(np.mean(rewards)) if rewards else None,
            f"mean_train_reward_{other}": float(np.mean(alt_rewards)) if alt_rewards else None,
            "baselines": list(baselines.values),
            "val_F": validation_curve(val_envs, w, config.T, val_seed) if val_envs else [],
        }
        records.append(rec)
        if callback:
            callback(rec, w)
        log.info("epoch %d: train reward %s, val F %s", epoch, rec["mean_train_reward"],
                 rec["val_F"])

    record(0, [], [])
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_envs))
        rewards, alt = [], []
        for start in range(0, len(order), config.batch_size):
            batch = [train_envs[i] for i in order[start:start + config.batch_size]]
            trajs = rollout(batch, w, config.T, rng, actions, config.reward_mode, baselines)
            for tr in trajs:
                rewards.extend(tr.raw_rewards)
                alt.extend(step_reward(o, f, other) for o, f in zip(tr.best, tr.next_scores))
            if config.normalize_rewards:
                _standardize(trajs)
            try:
                w_new = reinforce_update(trajs, w, optimizer=opt,
                                         entropy_coef=config.entropy_coef)
            except NonFiniteGradient as exc:
                raise TrainingDiverged(str(exc), w, records) from exc
            if not w_new.is_finite():
                raise TrainingDiverged("non-finite weights after update", w, records)
            w = w_new
        record(epoch, rewards, alt)
    return w, records

