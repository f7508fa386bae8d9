"""Synthetic datasets, budget curves, difficulty-sorted gains and object preservation."""
from __future__ import annotations

import csv
import io as _io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import AngleGrid, FACES, check_mask, render_mask_faces
from .io import read_mask, write_png
from .objective import ObjectiveConfig
from .scenes import SceneDistribution, pixel_latlon, synth_scene
from .search import (Scorer, SearchResult, coarse_to_fine, exhaustive, random_policy,
                     saliency_search, uniform_policy)

log = logging.getLogger(__name__)

POLICIES = ("exhaustive", "random", "uniform", "coarse2fine", "saliency", "learned")


@dataclass
class DatasetEntry:
    panorama: str
    mask: str
    boxes: list = field(default_factory=list)  # (lon_min, lat_min, lon_max, lat_max)
    category: str | None = None
    seed: int | None = None
    split: str = "test"

    def __post_init__(self):
        boxes = []
        for b in self.boxes:
            lon0, lat0, lon1, lat1 = (float(x) for x in b)
            if not (-math.pi <= lon0 <= math.pi and -math.pi <= lon1 <= math.pi):
                raise ValueError(f"box longitude outside [-pi, pi]: {b}")
            if not (-math.pi / 2 <= lat0 <= lat1 <= math.pi / 2):
                raise ValueError(f"box latitude outside [-pi/2, pi/2] or inverted: {b}")
            boxes.append((lon0, lat0, lon1, lat1))
        self.boxes = boxes

    def resolve(self, root) -> "DatasetEntry":
        root = Path(root)
        return DatasetEntry(str(root / self.panorama), str(root / self.mask), self.boxes,
                            self.category, self.seed, self.split)

    def load_mask(self) -> np.ndarray:
        return read_mask(self.mask)


def write_manifest(entries, path):
    path = Path(path)
    data = [asdict(e) for e in entries]
    for d in data:
        d["boxes"] = [list(b) for b in d["boxes"]]
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


def load_manifest(path, resolve=True) -> list[DatasetEntry]:
    path = Path(path)
    entries = [DatasetEntry(**d) for d in json.loads(path.read_text())]
    if resolve:
        entries = [e.resolve(path.parent) for e in entries]
    return entries


def generate_dataset(out_dir, count: int, distribution: SceneDistribution | None = None,
                     seed: int = 0, train_frac: float = 0.75) -> list[DatasetEntry]:
    """Write ``count`` synthetic scenes plus ``manifest.json`` under ``out_dir``.

    Scene ``i`` uses seed ``seed * 1_000_000 + i``; scenes whose mask comes out
    empty are skipped and replaced by the next seed.  The first
    ``round(train_frac * count)`` entries form the training split.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    distribution = distribution or SceneDistribution()
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"cannot write to {out_dir}: {exc}") from exc
    n_train = int(round(train_frac * count))
    entries = []
    i = 0
    while len(entries) < count:
        if i >= 100 * count:
            raise ValueError(f"only {len(entries)} of {count} sampled scenes had foreground; "
                             "check the scene distribution")
        scene_seed = seed * 1_000_000 + i
        i += 1
        spec = distribution.sample(scene_seed)
        if not spec.objects:
            continue
        img, mask = synth_scene(spec)
        if not mask.any():
            continue
        stem = f"scene_{scene_seed:09d}"
        write_png(out_dir / f"{stem}.png", img)
        write_png(out_dir / f"{stem}_mask.png", mask)
        (out_dir / f"{stem}.json").write_text(spec.to_json() + "\n")
        entries.append(DatasetEntry(
            f"{stem}.png", f"{stem}_mask.png", [o.box() for o in spec.objects],
            category="synthetic", seed=scene_seed,
            split="train" if len(entries) < n_train else "test"))
    write_manifest(entries, out_dir / "manifest.json")
    return entries


# -- benchmarking ---------------------------------------------------------

@dataclass
class ImageContext:
    mask: np.ndarray
    grid: AngleGrid
    face_size: int
    cfg: ObjectiveConfig
    table: np.ndarray

    @classmethod
    def build(cls, mask, grid, face_size, cfg):
        mask = check_mask(mask)
        scorer = Scorer(mask, face_size, cfg)
        table = np.array([s for _, s in exhaustive(scorer, grid).evaluated])
        return cls(mask, grid, face_size, cfg, table)

    def scorer(self) -> Scorer:
        table = self.table
        return Scorer.from_function(lambda a: table[a.grid_index])


def run_named_policy(name, ctx: ImageContext, T: int, seed: int, weights=None,
                     greedy=False, window=30, sigma=5.0) -> SearchResult:
    """Dispatch a policy by name on a table-backed scorer.

    Coarse-to-fine needs two evaluations; at ``T = 1`` it scores only the
    first interval center, so its budget curve stays non-increasing.
    """
    grid = ctx.grid
    scorer = ctx.scorer()
    if name == "exhaustive":
        return exhaustive(scorer, grid)
    if name == "random":
        return random_policy(scorer, grid, T, seed)
    if name == "uniform":
        return uniform_policy(scorer, grid, T)
    if name == "coarse2fine":
        if T < 2:
            scorer(grid[len(grid) // 4])
            return SearchResult.from_history(scorer.history)
        return coarse_to_fine(scorer, grid, T)
    if name == "saliency":
        return saliency_search(scorer, ctx.mask.astype(np.float64), grid, window, sigma)
    if name == "learned":
        from .policy import PanoramaEnv, run_policy
        if weights is None:
            raise ValueError("the learned policy needs weights")
        env = PanoramaEnv(ctx.mask, grid, ctx.face_size, ctx.cfg)
        env._scores = {k: float(v) for k, v in enumerate(ctx.table)}
        result, _ = run_policy(ctx.mask, weights, T, grid, np.random.default_rng(seed),
                               greedy=greedy, env=env)
        return result
    raise ValueError(f"unknown policy {name!r}; expected one of {POLICIES}")


def _image_seed(seed, index):
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def _score_image(job):
    (index, mask, policies, budgets, seed, n_grid, face_size, cfg, weights_blob, greedy,
     window, sigma) = job
    if isinstance(mask, (str, Path)):
        mask = read_mask(mask)
    weights = None
    if weights_blob is not None:
        from .network import PolicyWeights
        weights = PolicyWeights.from_bytes(weights_blob)
    grid = AngleGrid(n_grid)
    ctx = ImageContext.build(mask, grid, face_size, cfg)
    img_seed = _image_seed(seed, index)
    scores, angles, timing = {}, {}, {}
    for name in policies:
        scores[name], angles[name] = {}, {}
        t0 = time.perf_counter()
        evals = 0
        for T in budgets:
            res = run_named_policy(name, ctx, T, img_seed, weights, greedy, window, sigma)
            scores[name][T] = res.best_score
            angles[name][T] = res.best_angle.grid_index
            evals += res.budget_used
        timing[name] = (time.perf_counter() - t0) / max(evals, 1)
    return {"scores": scores, "angles": angles, "table": ctx.table.tolist(), "timing": timing}


@dataclass
class BenchmarkReport:
    policies: list
    budgets: list
    image_ids: list
    scores: dict        # policy -> budget -> per-image scores
    angles: dict        # policy -> budget -> per-image chosen grid index
    difficulty: list    # population variance of F over the grid, per image
    tables: list        # per-image F over the grid
    timing: dict = field(default_factory=dict)  # seconds per evaluation; not serialized

    def mean(self, policy, T) -> float:
        return float(np.mean(self.scores[policy][T]))

    def std(self, policy, T) -> float:
        return float(np.std(self.scores[policy][T]))

    def curve(self, policy) -> list:
        return [self.mean(policy, T) for T in self.budgets]

    def rows(self):
        for p in self.policies:
            for T in self.budgets:
                yield p, T

    def to_dict(self) -> dict:
        return {
            "policies": list(self.policies),
            "budgets": list(self.budgets),
            "image_ids": list(self.image_ids),
            "summary": [{"policy": p, "budget": T, "mean": self.mean(p, T), "std": self.std(p, T)}
                        for p, T in self.rows()],
            "scores": {p: {str(T): list(v) for T, v in d.items()} for p, d in self.scores.items()},
            "angles": {p: {str(T): list(v) for T, v in d.items()} for p, d in self.angles.items()},
            "difficulty": list(self.difficulty),
            "tables": [list(t) for t in self.tables],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = _io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["policy", "budget", "image_id", "score"])
        for p, T in self.rows():
            for img, s in zip(self.image_ids, self.scores[p][T]):
                writer.writerow([p, T, img, repr(float(s))])
        return buf.getvalue()


def budget_curve(policies, dataset, budgets, seed=0, n_grid=20, face_size=64,
                 cfg: ObjectiveConfig | None = None, weights=None, greedy=False,
                 jobs=1, window=30, sigma=5.0, image_ids=None) -> BenchmarkReport:
    """Mean disruption at the returned angle for each policy and budget.

    ``dataset`` holds masks, mask paths or :class:`DatasetEntry` objects.  The
    exhaustive policy is always included as the lower-bound reference.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("empty dataset")
    budgets = [int(T) for T in budgets]
    if budgets != sorted(budgets):
        raise ValueError("budgets must be sorted ascending")
    policies = list(policies)
    if "exhaustive" not in policies:
        policies = ["exhaustive"] + policies
    for p in policies:
        if p not in POLICIES:
            raise ValueError(f"unknown policy {p!r}; expected one of {POLICIES}")
    if "learned" in policies and weights is None:
        raise ValueError("the learned policy needs weights")
    cfg = cfg or ObjectiveConfig()
    blob = weights.to_bytes() if weights is not None else None
    masks = [d.mask if isinstance(d, DatasetEntry) else d for d in dataset]
    if image_ids is None:
        image_ids = [Path(d.panorama).stem if isinstance(d, DatasetEntry) else str(i)
                     for i, d in enumerate(dataset)]
    jobs_list = [(i, m, policies, budgets, seed, n_grid, face_size, cfg, blob, greedy,
                  window, sigma) for i, m in enumerate(masks)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_score_image, jobs_list))
    else:
        results = [_score_image(j) for j in jobs_list]

    scores = {p: {T: [r["scores"][p][T] for r in results] for T in budgets} for p in policies}
    angles = {p: {T: [r["angles"][p][T] for r in results] for T in budgets} for p in policies}
    tables = [r["table"] for r in results]
    difficulty = [float(np.var(t)) for t in tables]
    timing = {p: float(np.mean([r["timing"][p] for r in results])) for p in policies}
    return BenchmarkReport(policies, budgets, list(image_ids), scores, angles, difficulty,
                           tables, timing)


def difficulty_gains(report: BenchmarkReport, policy_a: str, policy_b: str, T: int):
    """Cumulative mean gain ``score_B - score_A`` over images sorted by difficulty.

    Images are ordered by descending variance of F over the grid (stable, so
    ties keep dataset order).  Returns ``(fractions, cumulative_gains, order)``.
    """
    a = np.asarray(report.scores[policy_a][T], dtype=np.float64)
    b = np.asarray(report.scores[policy_b][T], dtype=np.float64)
    diff = np.asarray(report.difficulty)
    order = np.argsort(-diff, kind="stable")
    gains = (b - a)[order]
    n = len(gains)
    cumulative = np.cumsum(gains) / np.arange(1, n + 1)
    fractions = np.arange(1, n + 1) / n
    return fractions, cumulative, order


# -- object preservation --------------------------------------------------

def box_region(box, height: int) -> np.ndarray:
    """Equirectangular pixels whose centers fall inside a spherical box."""
    lon0, lat0, lon1, lat1 = box
    lat, lon = pixel_latlon(height)
    in_lat = (lat >= lat0) & (lat <= lat1)
    if lon0 <= lon1:
        in_lon = (lon >= lon0) & (lon <= lon1)
    else:
        in_lon = (lon >= lon0) | (lon <= lon1)
    return in_lat & in_lon


def preservation_iou(mask, boxes, theta, face_size=64) -> dict:
    """How completely each boxed object lands on a single lateral face.

    Per box, the object is ``mask & box`` carried to the cubemap at ``theta``;
    X is the lateral face holding most of its pixels (ties in front, right,
    back, left order) and the score is ``|object on X| / |object|``.  Raw
    per-face counts are kept so other overlap readings can be recomputed.
    """
    if isinstance(mask, DatasetEntry):
        boxes = mask.boxes if boxes is None else boxes
        mask = mask.load_mask()
    mask = check_mask(mask)
    if not boxes:
        raise ValueError("preservation_iou needs at least one box")
    per_box = []
    for box in boxes:
        obj = mask & box_region(box, mask.shape[0])
        if not obj.any():
            log.warning("box %s holds no foreground pixels; skipped", box)
            per_box.append(None)
            continue
        faces = render_mask_faces(obj, theta, face_size)
        counts = faces.reshape(6, -1).sum(axis=1)
        total = int(counts.sum())
        if total == 0:
            log.warning("box %s projects to no cubemap pixels; skipped", box)
            per_box.append(None)
            continue
        x = int(np.argmax(counts[:4]))
        per_box.append({"face": FACES[x], "counts": dict(zip(FACES, map(int, counts))),
                        "score": counts[x] / total})
    valid = [b["score"] for b in per_box if b is not None]
    return {"boxes": per_box, "scores": [None if b is None else b["score"] for b in per_box],
            "mean": float(np.mean(valid)) if valid else None}
