"""Evaluation: oracle-scored metric tables, paired win-rates, ablation trajectories and SVG plots."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence
from xml.sax.saxutils import escape

from .data.pipeline import consistency
from .lm.model import TransformerParams
from .lm.sampling import greedy
from .lm.tokenizer import EOS, decode
from .oracles import DEFAULT_SEEDS, OracleConfig, aes_oracle, avg_over_seeds, composite_oracle, pick_oracle
from .sft import query_ids

METRICS = ("pick", "aes", "consistency")
VARIANTS = ("ps-only", "aes-only", "combined", "direct-oracle")


@dataclass
class MethodScores:
    method: str
    pick: float
    aes: float
    consistency: float
    normalized: float | None = None
    outputs: list[str] = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        return {"method": self.method, "pick": self.pick, "aes": self.aes, "consistency": self.consistency,
                "hps": "n/a", "normalized": self.normalized}


@dataclass
class EvalReport:
    rows: list[MethodScores]

    def __post_init__(self):
        if not self.rows:
            raise ValueError("an evaluation report needs at least one method")

    def row(self, method: str) -> MethodScores:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    def to_json(self) -> dict:
        return {"methods": [r.to_json() for r in self.rows]}

    def format_table(self) -> str:
        header = f"{'method':<16}{'pick':>10}{'aes':>10}{'consist':>10}{'hps':>6}{'avg':>8}"
        lines = [header, "-" * len(header)]
        for r in self.rows:
            avg = "-" if r.normalized is None else f"{r.normalized:.3f}"
            lines.append(f"{r.method:<16}{r.pick:>10.4f}{r.aes:>10.4f}{r.consistency:>10.4f}{'n/a':>6}{avg:>8}")
        return "\n".join(lines)


def generate_rewrites(params: TransformerParams, prompts: Sequence[str], max_new_tokens: int = 128) -> list[str]:
    """Greedy rewrites of each prompt through the instruction template."""
    samples = greedy(params, [query_ids(x) for x in prompts], max_new_tokens)
    return [decode([t for t in s.ids if t != EOS]) for s in samples]


def score_outputs(method: str, prompts: Sequence[str], outputs: Sequence[str], oracle_cfg: OracleConfig | None = None,
                  seeds: Sequence[int] = DEFAULT_SEEDS) -> MethodScores:
    if not prompts:
        raise ValueError("empty test set")
    if len(prompts) != len(outputs):
        raise ValueError("prompts and outputs differ in length")
    cfg = oracle_cfg if oracle_cfg is not None else OracleConfig(noise=False)
    n = len(prompts)
    pick = sum(avg_over_seeds(pick_oracle, (x, y), seeds, cfg) for x, y in zip(prompts, outputs)) / n
    aes = sum(avg_over_seeds(aes_oracle, (y,), seeds, cfg) for y in outputs) / n
    cons = sum(consistency(x, y) or 0.0 for x, y in zip(prompts, outputs)) / n
    return MethodScores(method, pick, aes, cons, outputs=list(outputs))


def evaluate(params: TransformerParams | None, prompts: Sequence[str], oracle_cfg: OracleConfig | None = None,
             seeds: Sequence[int] = DEFAULT_SEEDS, method: str = "model", max_new_tokens: int = 128) -> MethodScores:
    """Scores of one rewriter on the test prompts; ``params=None`` is the identity ("Original") rewriter."""
    if not prompts:
        raise ValueError("empty test set")
    outputs = list(prompts) if params is None else generate_rewrites(params, prompts, max_new_tokens)
    return score_outputs(method, prompts, outputs, oracle_cfg, seeds)


def normalize_scores(rows: Sequence[MethodScores], metrics: Sequence[str] = METRICS) -> list[float]:
    """Per-metric min-max across methods (0.5 on a degenerate range), then the unweighted mean."""
    if not rows:
        raise ValueError("nothing to normalize")
    columns = []
    for m in metrics:
        raw = [float(getattr(r, m)) for r in rows]
        lo, hi = min(raw), max(raw)
        columns.append([0.5 if hi == lo else (v - lo) / (hi - lo) for v in raw])
    averages = [sum(col[i] for col in columns) / len(columns) for i in range(len(rows))]
    for r, a in zip(rows, averages):
        r.normalized = a
    return averages


def build_report(rows: Sequence[MethodScores]) -> EvalReport:
    report = EvalReport(list(rows))
    normalize_scores(report.rows)
    return report


@dataclass
class WinRateResult:
    win: int
    lose: int
    tie: int

    @property
    def total(self) -> int:
        return self.win + self.lose + self.tie

    @property
    def rates(self) -> tuple[float, float, float]:
        n = self.total
        return (self.win / n, self.lose / n, self.tie / n) if n else (0.0, 0.0, 0.0)

    def to_json(self) -> dict:
        w, l, t = self.rates
        return {"win": self.win, "lose": self.lose, "tie": self.tie, "win_rate": w, "lose_rate": l, "tie_rate": t}


def composite_judge(alpha: float = 0.7, oracle_cfg: OracleConfig | None = None) -> Callable[[str, str], float]:
    cfg = oracle_cfg if oracle_cfg is not None else OracleConfig(noise=False)
    return lambda x, y: composite_oracle(x, y, alpha, cfg)


def winrate(prompts: Sequence[str], outputs_a: Sequence[str], outputs_b: Sequence[str],
            judge: Callable[[str, str], float] | None = None, tie_eps: float = 0.05) -> WinRateResult:
    """A wins a prompt iff judge(A) > judge(B) + tie_eps; loses symmetrically; otherwise a tie."""
    if not (len(prompts) == len(outputs_a) == len(outputs_b)):
        raise ValueError("prompts and outputs differ in length")
    if tie_eps < 0:
        raise ValueError("tie_eps must be non-negative")
    judge = judge or composite_judge()
    win = lose = tie = 0
    for x, a, b in zip(prompts, outputs_a, outputs_b):
        diff = judge(x, a) - judge(x, b)
        if diff > tie_eps:
            win += 1
        elif diff < -tie_eps:
            lose += 1
        else:
            tie += 1
    return WinRateResult(win, lose, tie)


# ---------------------------------------------------------------------------
# Ablation trajectories
# ---------------------------------------------------------------------------


@dataclass
class TrajectoryPoint:
    variant: str
    step: int
    aes: float
    pick: float


@dataclass
class TrajectoryLog:
    points: list[TrajectoryPoint] = field(default_factory=list)

    def add(self, variant: str, step: int, aes: float, pick: float) -> None:
        self.points.append(TrajectoryPoint(variant, step, aes, pick))

    def variants(self) -> list[str]:
        seen: list[str] = []
        for p in self.points:
            if p.variant not in seen:
                seen.append(p.variant)
        return seen

    def series(self, variant: str) -> list[TrajectoryPoint]:
        return sorted((p for p in self.points if p.variant == variant), key=lambda p: p.step)

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["variant", "step", "aes", "pick"])
            for v in self.variants():
                for p in self.series(v):
                    w.writerow([p.variant, p.step, repr(p.aes), repr(p.pick)])
        return path

    @classmethod
    def read_csv(cls, path: str | Path) -> "TrajectoryLog":
        log = cls()
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                log.add(row["variant"], int(row["step"]), float(row["aes"]), float(row["pick"]))
        return log


def ablate(
    run_variant: Callable[[str, Callable[[int, TransformerParams], None]], None],
    probe_prompts: Sequence[str],
    variants: Sequence[str] = VARIANTS,
    oracle_cfg: OracleConfig | None = None,
    max_new_tokens: int = 128,
    csv_path: str | Path | None = None,
) -> TrajectoryLog:
    """Run each variant and score every snapshot it reports on a fixed probe set.

    ``run_variant(name, on_snapshot)`` must train one variant from the shared
    starting point and call ``on_snapshot(step, params)`` at step 0 and at
    each snapshot.
    """
    log = TrajectoryLog()
    cfg = oracle_cfg if oracle_cfg is not None else OracleConfig(noise=False)
    for variant in variants:
        def record(step: int, params: TransformerParams, variant=variant) -> None:
            s = evaluate(params, probe_prompts, cfg, seeds=(0,), method=variant, max_new_tokens=max_new_tokens)
            log.add(variant, step, s.aes, s.pick)

        run_variant(variant, record)
    if csv_path is not None:
        log.write_csv(csv_path)
    return log


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _shade(hex_color: str, t: float) -> str:
    """Blend from a light tint (t=0) to the full color (t=1)."""
    r, g, b = (int(hex_color[i:i + 2], 16) for i in (1, 3, 5))
    mix = 0.25 + 0.75 * t
    r, g, b = (round(255 - (255 - c) * mix) for c in (r, g, b))
    return f"#{r:02x}{g:02x}{b:02x}"


def emit_plot(trajectory: TrajectoryLog | str | Path, out_path: str | Path | None = None,
              width: int = 640, height: int = 480) -> str:
    """SVG scatter of (aes, pick) per snapshot, one step-ordered polyline per variant."""
    log = trajectory if isinstance(trajectory, TrajectoryLog) else TrajectoryLog.read_csv(trajectory)
    if not log.points:
        raise ValueError("trajectory is empty")
    margin = 60
    xs = [p.aes for p in log.points]
    ys = [p.pick for p in log.points]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5

    def px(v: float) -> float:
        return margin + (v - x0) / (x1 - x0) * (width - 2 * margin)

    def py(v: float) -> float:
        return height - margin - (v - y0) / (y1 - y0) * (height - 2 * margin)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        '<defs><marker id="arrow" viewBox="0 0 10 10" refX="9" refY="5" markerWidth="6" markerHeight="6" '
        'orient="auto-start-reverse"><path d="M 0 0 L 10 5 L 0 10 z" fill="#444"/></marker></defs>',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
        f'<text x="{width / 2}" y="{height - 15}" text-anchor="middle" font-size="14">aesthetic oracle</text>',
        f'<text x="18" y="{height / 2}" text-anchor="middle" font-size="14" '
        f'transform="rotate(-90 18 {height / 2})">preference oracle</text>',
        f'<text x="{margin}" y="{height - margin + 18}" font-size="11">{x0:.2f}</text>',
        f'<text x="{width - margin}" y="{height - margin + 18}" font-size="11" text-anchor="end">{x1:.2f}</text>',
        f'<text x="{margin - 6}" y="{height - margin}" font-size="11" text-anchor="end">{y0:.2f}</text>',
        f'<text x="{margin - 6}" y="{margin + 4}" font-size="11" text-anchor="end">{y1:.2f}</text>',
    ]
    for i, variant in enumerate(log.variants()):
        color = _PALETTE[i % len(_PALETTE)]
        series = log.series(variant)
        coords = " ".join(f"{px(p.aes):.2f},{py(p.pick):.2f}" for p in series)
        parts.append(f'<polyline class="trajectory" data-variant="{escape(variant)}" points="{coords}" fill="none" '
                     f'stroke="{color}" stroke-width="1.5" marker-end="url(#arrow)"/>')
        for j, p in enumerate(series):
            t = j / (len(series) - 1) if len(series) > 1 else 1.0
            parts.append(f'<circle class="marker" cx="{px(p.aes):.2f}" cy="{py(p.pick):.2f}" r="5" '
                         f'fill="{_shade(color, t)}" stroke="{color}"><title>{escape(variant)} step {p.step}</title></circle>')
        parts.append(f'<text x="{width - margin + 4}" y="{margin + 16 * i}" font-size="12" fill="{color}">'
                     f'{escape(variant)}</text>')
    parts.append("</svg>")
    svg = "\n".join(parts)
    if out_path is not None:
        Path(out_path).write_text(svg)
    return svg


def write_report(report: EvalReport, out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = out / "eval.txt"
    table.write_text(report.format_table() + "\n")
    js = out / "eval.json"
    js.write_text(json.dumps(report.to_json(), indent=2))
    return table, js


def is_finite_report(report: EvalReport) -> bool:
    return all(math.isfinite(v) for r in report.rows for v in (r.pick, r.aes, r.consistency))
