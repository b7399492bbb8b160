"""Ablation benchmark on synthetic color-shape scenes.

Three variants are trained per seed on the same data: the full model, the
model with all three fusion modules switched off, and the full model with
the suppression gate replaced by ones.  Scores are averaged over seeds.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .data import SceneSpec, generate_scenes
from .train import DetectionDataset, RunConfig, evaluate_model, train

VARIANTS: Dict[str, Dict[str, bool]] = {
    "full": {},
    "no_modules": {"enable_tg_fe": False, "enable_vg_tr": False, "enable_tg_qe": False},
    "ungated": {"enable_gate": False},
}
TIME_BUDGET_S = 30 * 60


@dataclass(frozen=True)
class BenchmarkPreset:
    canvas: int = 128
    colors: Tuple[str, ...] = ("red", "green", "blue", "yellow", "magenta", "cyan")
    shapes: Tuple[str, ...] = ("square", "ring")
    novel: Tuple[str, ...] = ("red square", "green ring", "blue square", "yellow ring")
    objects: Tuple[int, int] = (1, 4)
    size_px: Tuple[int, int] = (14, 30)
    train_scenes: int = 2000
    eval_scenes: int = 200
    data_seed: int = 0
    seeds: Tuple[int, ...] = (0, 1, 2)
    steps: int = 1800  # three variants x three seeds at this length fit the time budget on one core
    channels: int = 64
    text_dim: int = 64
    n_queries: int = 30

    def scene_spec(self) -> SceneSpec:
        lo, hi = self.size_px
        return SceneSpec(canvas=self.canvas, colors=self.colors, shapes=self.shapes, novel=self.novel,
                         objects=self.objects, size=(lo / self.canvas, hi / self.canvas), size_skew=1.0,
                         seed=self.data_seed)

    def run_config(self, seed: int, **flags) -> RunConfig:
        return RunConfig(channels=self.channels, text_dim=self.text_dim, d_h=self.channels,
                         n_queries=self.n_queries, steps=self.steps,
                         seed=seed, deterministic=True, log_every=0, **flags)


@dataclass
class RunScores:
    variant: str
    seed: int
    closed_ap50: Optional[float]
    base_ap50: float
    novel_ap50: float
    hm_ap50: float
    seconds: float


@dataclass
class BenchmarkOutcome:
    preset: BenchmarkPreset
    runs: List[RunScores] = field(default_factory=list)
    seconds: float = 0.0

    def mean(self, variant: str, metric: str) -> float:
        vals = [getattr(r, metric) for r in self.runs if r.variant == variant]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def checks(self) -> Dict[str, bool]:
        return {
            "a_closed_base_ap50": self.mean("full", "closed_ap50") >= 0.85,
            "b_novel_full_vs_no_modules": self.mean("full", "novel_ap50") >= self.mean("no_modules", "novel_ap50"),
            "c_hm_gated_vs_ungated": self.mean("full", "hm_ap50") >= self.mean("ungated", "hm_ap50"),
            "runtime": self.seconds <= TIME_BUDGET_S,
        }

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def verdict_lines(self) -> List[str]:
        return [
            f"closed-set base AP50 (full) {self.mean('full', 'closed_ap50'):.4f} >= 0.85",
            f"novel AP50 full {self.mean('full', 'novel_ap50'):.4f} vs no modules "
            f"{self.mean('no_modules', 'novel_ap50'):.4f}",
            f"HM AP50 gated {self.mean('full', 'hm_ap50'):.4f} vs ungated {self.mean('ungated', 'hm_ap50'):.4f}",
            f"runtime {self.seconds:.0f}s (budget {TIME_BUDGET_S}s)",
        ] + [f"{'PASS' if ok else 'FAIL'} {name}" for name, ok in self.checks.items()]

    def to_dict(self) -> dict:
        return {"preset": asdict(self.preset), "runs": [asdict(r) for r in self.runs],
                "seconds": self.seconds, "checks": self.checks}


def build_datasets(preset: BenchmarkPreset) -> Tuple[DetectionDataset, DetectionDataset]:
    spec = preset.scene_spec()
    vocab = spec.vocabulary()
    ti, tr = generate_scenes(spec, preset.train_scenes, "train")
    ei, er = generate_scenes(spec, preset.eval_scenes, "eval")
    return DetectionDataset(ti, tr, vocab), DetectionDataset(ei, er, vocab)


def run_benchmark(preset: BenchmarkPreset = BenchmarkPreset(),
                  log_fn: Optional[Callable[[str], None]] = None) -> BenchmarkOutcome:
    t0 = time.perf_counter()
    train_set, eval_set = build_datasets(preset)
    outcome = BenchmarkOutcome(preset)
    for seed in preset.seeds:
        for variant, flags in VARIANTS.items():
            t = time.perf_counter()
            cfg = preset.run_config(seed, **flags)
            model = train(cfg, train_set).model
            gz = evaluate_model(model, eval_set, "gzsd", thresholds=(0.5,))
            closed = None
            if variant == "full":
                closed = evaluate_model(model, eval_set, "closed", thresholds=(0.5,)).summary["all"]["AP50"]
            run = RunScores(variant, seed, closed, gz.summary["base"]["AP50"], gz.summary["novel"]["AP50"],
                            gz.summary["hm"]["AP50"], time.perf_counter() - t)
            outcome.runs.append(run)
            if log_fn:
                log_fn(f"seed {seed} {variant}: closed={closed} base={run.base_ap50:.4f} "
                       f"novel={run.novel_ap50:.4f} hm={run.hm_ap50:.4f} ({run.seconds:.0f}s)")
    outcome.seconds = time.perf_counter() - t0
    return outcome
