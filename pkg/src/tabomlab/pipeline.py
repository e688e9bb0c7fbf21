"""Artifact plumbing: each stage reads its inputs from, and writes its outputs to, the run directory."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import oracle as orc
from .config import ExperimentConfig
from .decoding import DecodeSchedule
from .diagnostics import ce_vs_mask_ratio, tds
from .model import DenoiserConfig, DenoiserParams, init_params, load_checkpoint, save_checkpoint
from .objectives import TabomConfig, finetune, write_telemetry
from .optim import OptimConfig
from .plotting import plot_ce_curve, plot_tds
from .tasks import default_vocab, encode_pair, evaluate, generate_corpus, get_task
from .trajectories import DistillConfig, distill, load_corpus, pairs_to_trajectories, save_corpus

log = logging.getLogger(__name__)

OUT_ENV = "TABOM_OUT"


class MissingArtifact(FileNotFoundError):
    """An upstream file is absent; the message names the subcommand that produces it."""

    def __init__(self, path, producer: str):
        super().__init__(f"missing {path}; run the '{producer}' subcommand first")
        self.path = path
        self.producer = producer


def fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """A run directory with one subdirectory per seed."""

    def __init__(self, cfg: ExperimentConfig, root=None):
        self.cfg = cfg
        self.root = Path(root or os.environ.get(OUT_ENV) or cfg.out_dir)
        self.vocab = default_vocab()

    def seed_dir(self, seed: int) -> Path:
        d = self.root / f"seed{seed}"
        d.mkdir(parents=True, exist_ok=True)
        return d

    def require(self, seed: int, name: str, producer: str) -> Path:
        p = self.root / f"seed{seed}" / name
        if not p.exists():
            raise MissingArtifact(p, producer)
        return p

    @property
    def schedule(self) -> DecodeSchedule:
        d = self.cfg.decode
        return DecodeSchedule.uniform(self.cfg.model["max_response_len"], d["per_step"], d["temperature"], d["top_p"])

    def model_config(self, seed: int) -> DenoiserConfig:
        return DenoiserConfig(**self.cfg.model, seed=seed)

    def tabom_config(self, **kw) -> TabomConfig:
        return TabomConfig(**{**self.cfg.tabom, **kw})

    def optim(self, section: str) -> OptimConfig:
        s = getattr(self.cfg, section)
        return OptimConfig(lr=s["lr"], warmup=s["warmup"], epochs=s["epochs"], batch_size=s["batch_size"])

    def _seed_offset(self, seed: int, stage: int, task_idx: int) -> int:
        return 100_000 * stage + 1_000 * seed + task_idx

    def _pairs(self, task_ids, n: int, seed: int, stage: int) -> list[tuple[list[str], list[str]]]:
        out = []
        for tid in task_ids:
            idx = sorted(self.cfg.all_tasks).index(tid)
            out += generate_corpus(get_task(tid), n, self._seed_offset(seed, stage, idx))
        return out

    def manifest(self) -> dict:
        arts = {}
        for p in sorted(self.root.rglob("*")):
            if p.is_file() and p.name != "manifest.json":
                arts[p.relative_to(self.root).as_posix()] = sha256_file(p)
        man = {"config_sha256": self.cfg.digest, "seeds": self.cfg.seeds, "config": self.cfg.text,
               "artifacts": arts}
        self.root.mkdir(parents=True, exist_ok=True)
        with open(self.root / "manifest.json", "w") as fh:
            json.dump(man, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return man

    # -- stages -----------------------------------------------------------

    def load_model(self, seed: int, name: str) -> DenoiserParams:
        if name == "base":
            return load_checkpoint(self.require(seed, "base.ckpt", "pretrain"))
        return load_checkpoint(self.require(seed, f"ft-{name}.ckpt", "finetune"))

    def pretrain(self, seed: int) -> DenoiserParams:
        cfg = self.cfg
        pairs = [encode_pair(self.vocab, p, a, cfg.model["max_response_len"])
                 for p, a in self._pairs(cfg.all_tasks, cfg.tasks["pretrain_per_task"], seed, 0)]
        init = init_params(self.model_config(seed), self.vocab)
        res = finetune(init, pairs, "sft-gt", self.optim("pretrain"), seed=seed)
        base = res.params.copy(version_tag=f"base-{res.params.digest()}")
        d = self.seed_dir(seed)
        save_checkpoint(base, d / "base.ckpt")
        write_telemetry(res.telemetry, d / "pretrain_telemetry.csv")
        log.info("seed %d: pretrained %d steps", seed, res.steps)
        return base

    def distill(self, seed: int, max_new: int | None = None, per_step: int | None = None) -> list[dict]:
        cfg = self.cfg
        base = self.load_model(seed, "base")
        n = max_new or cfg.model["max_response_len"]
        d = cfg.decode
        sched = DecodeSchedule.uniform(n, per_step or d["per_step"], d["temperature"], d["top_p"])
        dcfg = DistillConfig(n, sched, keep_invalid=True)
        rng = np.random.default_rng([seed, 1])
        sd_all, gt_all, rows = [], [], []
        for tid in cfg.in_domain:
            corpus = self._pairs([tid], cfg.tasks["finetune_per_task"], seed, 1)
            trajs, summary = distill(base, [p for p, _ in corpus], get_task(tid), dcfg, rng)
            sd_all += trajs
            gt_all += pairs_to_trajectories(
                [encode_pair(self.vocab, p, a, cfg.model["max_response_len"]) for p, a in corpus], tid)
            rows.append((seed, tid, summary.generated, summary.valid, summary.yield_ratio))
        dd = self.seed_dir(seed)
        save_corpus(sd_all, dd / "corpus_sd.jsonl")
        save_corpus(gt_all, dd / "corpus_gt.jsonl")
        write_csv(dd / "distill.csv", ("seed", "task", "generated", "valid", "yield"), rows)
        return [dict(zip(("seed", "task", "generated", "valid", "yield"), r)) for r in rows]

    def distill_standalone(self, model_path, task_id: str, out_path, max_new=None, per_step=None, seed: int = 0):
        """Distill one task's prompts with an explicit checkpoint; writes only the corpus file."""
        if not Path(model_path).exists():
            raise MissingArtifact(model_path, "pretrain")
        if task_id not in self.cfg.all_tasks:
            get_task(task_id)  # raises for unknown ids
        base = load_checkpoint(model_path)
        n = max_new or base.config.max_response_len
        d = self.cfg.decode
        sched = DecodeSchedule.uniform(n, per_step or d["per_step"], d["temperature"], d["top_p"])
        corpus = generate_corpus(get_task(task_id), self.cfg.tasks["finetune_per_task"],
                                 self._seed_offset(seed, 1, 0))
        trajs, summary = distill(base, [p for p, _ in corpus], get_task(task_id), DistillConfig(n, sched),
                                 np.random.default_rng([seed, 1]))
        save_corpus(trajs, out_path)
        return summary

    def _corpus(self, seed: int, objective: str):
        if objective == "sft-gt":
            gt = load_corpus(self.require(seed, "corpus_gt.jsonl", "distill"))
            return [(t.prompt, t.answer) for t in gt]
        sd = load_corpus(self.require(seed, "corpus_sd.jsonl", "distill"))
        return [t for t in sd if t.valid]

    def finetune(self, seed: int, objective: str, name: str | None = None, save: bool = True,
                 **tabom_kw) -> DenoiserParams:
        base = self.load_model(seed, "base")
        tcfg = self.tabom_config(**tabom_kw)
        res = finetune(base, self._corpus(seed, objective), objective, self.optim("finetune"), tcfg, seed=seed)
        if save:
            d = self.seed_dir(seed)
            name = name or objective
            save_checkpoint(res.params, d / f"ft-{name}.ckpt")
            write_telemetry(res.telemetry, d / f"telemetry-{name}.csv")
        return res.params

    def model_names(self, seed: int) -> list[str]:
        d = self.root / f"seed{seed}"
        self.require(seed, "base.ckpt", "pretrain")
        names = [p.name[3:-5] for p in sorted(d.glob("ft-*.ckpt"))]
        order = {o: i for i, o in enumerate(self.cfg.objectives)}
        return ["base"] + sorted(names, key=lambda n: (order.get(n, len(order)), n))

    def eval_rows(self, seed: int, label: str, params: DenoiserParams) -> list[tuple]:
        rows = []
        for tid in self.cfg.all_tasks:
            split = "in" if tid in self.cfg.in_domain else "ood"
            r = evaluate(params, get_task(tid), self.schedule, self.cfg.tasks["eval_samples"],
                         self.cfg.tasks["eval_seed"])
            rows.append((seed, label, tid, split, r.rate, r.matches, r.samples))
        return rows

    EVAL_HEADER = ("seed", "model", "task", "split", "rate", "matches", "samples")

    def evaluate(self, seed: int) -> list[tuple]:
        rows = []
        for name in self.model_names(seed):
            rows += self.eval_rows(seed, name, self.load_model(seed, name))
        write_csv(self.seed_dir(seed) / "eval.csv", self.EVAL_HEADER, rows)
        return rows

    def tds_prompts(self) -> list[list[int]]:
        n = self.cfg.tasks["tds_prompts"]
        per = max(1, n // len(self.cfg.in_domain))
        prompts = []
        for i, tid in enumerate(self.cfg.in_domain):
            prompts += [self.vocab.encode(p) for p, _ in
                        generate_corpus(get_task(tid), per, self.cfg.tasks["eval_seed"] + 1 + i)]
        return prompts

    def tds(self, seed: int) -> dict[str, float]:
        prompts = self.tds_prompts()
        k = self.cfg.tasks["tds_samples"]
        models = {name: self.load_model(seed, name) for name in self.model_names(seed)}
        models["zero"] = init_params(self.model_config(seed), self.vocab, zero=True)
        series, rows, summary = {}, [], []
        out = {}
        for name, params in models.items():
            rep = tds(params, prompts, self.schedule, k)
            series[name] = rep.series
            for t, v in rep.series:
                rows.append((seed, name, t, v, rep.contributing.get(t, 0)))
            summary.append((seed, name, rep.aggregate, rep.trajectories))
            out[name] = rep.aggregate
        d = self.seed_dir(seed)
        write_csv(d / "tds.csv", ("seed", "model", "step", "value", "contributing"), rows)
        write_csv(d / "tds_summary.csv", ("seed", "model", "tds", "trajectories"), summary)
        plot_tds(series, d / "tds.svg", title=f"seed {seed}")
        return out

    def ce_curve(self, seed: int):
        base = self.load_model(seed, "base")
        gt = load_corpus(self.require(seed, "corpus_gt.jsonl", "distill"))
        sd = load_corpus(self.require(seed, "corpus_sd.jsonl", "distill"))
        curve = ce_vs_mask_ratio(base, [(t.prompt, t.answer) for t in gt], [(t.prompt, t.answer) for t in sd],
                                 self.cfg.ratios, seed=seed)
        d = self.seed_dir(seed)
        write_csv(d / "ce_curve.csv", ("seed", "ratio", "ce_gt", "ce_sd"),
                  [(seed, r, g, s) for r, g, s in zip(curve.ratios, curve.ce_gt, curve.ce_sd)])
        plot_ce_curve(curve.ratios, curve.ce_gt, curve.ce_sd, d / "ce_curve.svg", title=f"seed {seed}")
        return curve

    def ablate(self, seed: int) -> list[tuple]:
        t = self.cfg.tabom
        weight = t["weight"] if t["weight"] > 0 else 1.0
        arms = [
            ("local+rank", dict(window_mode="local", weight=weight)),
            ("local", dict(window_mode="local", weight=0.0)),
            ("global+rank", dict(window_mode="global", weight=weight)),
            ("global", dict(window_mode="global", weight=0.0)),
        ]
        for w in self.cfg.ablate["windows"]:
            arms.append((f"window={w}", dict(window_mode="local", window=w, weight=weight)))
        for lam in self.cfg.ablate["weights"]:
            for gam in self.cfg.ablate["margins"]:
                arms.append((f"lambda={lam:g},gamma={gam:g}", dict(window_mode="local", weight=lam, margin=gam)))
        rows = []
        for arm, kw in arms:
            objective = "tabom" if kw["weight"] > 0 else "traj-mask"
            params = self.finetune(seed, objective, save=False, **kw)
            tc = self.tabom_config(**kw)
            for _, _, tid, split, rate, matches, samples in self.eval_rows(seed, arm, params):
                rows.append((seed, arm, tc.window_mode, tc.window, tc.weight, tc.margin, tid, split, rate))
        write_csv(self.seed_dir(seed) / "ablate.csv",
                  ("seed", "arm", "window_mode", "window", "weight", "margin", "task", "split", "rate"), rows)
        return rows

    def oracle(self, n: int, beta: float, entropies: str = "random:0", count: int = 100) -> list[tuple]:
        """Exactness checks over one explicit landscape or ``count`` random ones."""
        rows = []
        if entropies.startswith("random:"):
            rng = np.random.default_rng(int(entropies.split(":", 1)[1]))
            lands = [orc.EntropyLandscape(rng.uniform(0, 3, size=n), beta) for _ in range(count)]
        else:
            H = [float(x) for x in entropies.split(",")]
            lands = [orc.EntropyLandscape(H, beta)]
        for i, land in enumerate(lands):
            q = orc.boltzmann_exact(land)
            lem = orc.verify_ranking_lemma(land, seed=i)
            rows.append((i, land.n, land.beta, abs(q.probs.sum() - 1.0), orc.kl_exact(q, land),
                         orc.kl_divergence_uniform_gap(land), lem["order_agreement"], lem["ok"]))
        self.root.mkdir(parents=True, exist_ok=True)
        write_csv(self.root / "oracle.csv",
                  ("landscape", "n", "beta", "norm_error", "kl_self", "uniform_gap", "order_agreement", "lemma_ok"),
                  rows)
        return rows

    def report(self) -> str:
        evals, tdss = [], {}
        for seed in self.cfg.seeds:
            p = self.root / f"seed{seed}" / "eval.csv"
            if not p.exists():
                raise MissingArtifact(p, "eval")
            evals += read_csv(p)
            tp = self.root / f"seed{seed}" / "tds_summary.csv"
            if tp.exists():
                for r in read_csv(tp):
                    tdss.setdefault(r["model"], []).append(float(r["tds"]))
        table = summarize(evals, self.cfg.in_domain, self.cfg.ood)
        rows = []
        for model, stats in table.items():
            tds_mean = float(np.mean(tdss[model])) if model in tdss else float("nan")
            rows.append((model, stats["in"], stats["ood"], stats["d_in"], stats["d_ood"], tds_mean,
                         *[stats[t] for t in self.cfg.all_tasks]))
        write_csv(self.root / "report.csv",
                  ("model", "in_domain", "ood", "delta_in", "delta_ood", "tds", *self.cfg.all_tasks), rows)
        md = render_report(table, tdss, self.cfg.in_domain, self.cfg.ood, len(self.cfg.seeds))
        (self.root / "report.md").write_text(md)
        return md


def summarize(evals: list[dict], in_domain: Sequence[str], ood: Sequence[str]) -> dict[str, dict]:
    """Seed-averaged exact-match per model and task, split averages, and deltas vs the base model."""
    acc: dict[str, dict[str, list[float]]] = {}
    for r in evals:
        acc.setdefault(r["model"], {}).setdefault(r["task"], []).append(float(r["rate"]))
    if "base" not in acc:
        raise ValueError("eval rows lack the base model")
    table = {}
    for model, per_task in acc.items():
        means = {t: float(np.mean(v)) for t, v in per_task.items()}
        table[model] = {**means,
                        "in": float(np.mean([means[t] for t in in_domain])),
                        "ood": float(np.mean([means[t] for t in ood])) if ood else float("nan")}
    for model, s in table.items():
        s["d_in"] = s["in"] - table["base"]["in"]
        s["d_ood"] = s["ood"] - table["base"]["ood"]
        for t in list(in_domain) + list(ood):
            s[f"d_{t}"] = s[t] - table["base"][t]
    return table


def _pct(x: float) -> str:
    return f"{100 * x:.1f}"


def _signed(x: float) -> str:
    return f"{'+' if x >= 0 else '-'}{abs(100 * x):.1f}"


def render_report(table: dict, tdss: dict, in_domain, ood, seeds: int) -> str:
    tasks = list(in_domain) + list(ood)
    head = ["Model", "In-Domain", "OOD", *[f"{t} ({'in' if t in in_domain else 'ood'})" for t in tasks], "TDS"]
    lines = [f"Exact-match (%), mean over {seeds} seed(s); signed deltas are against No-SFT (the base model).", "",
             "| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for model, s in table.items():
        label = "No-SFT" if model == "base" else model
        cell = (lambda v, d: _pct(v)) if model == "base" else (lambda v, d: f"{_pct(v)} ({_signed(d)})")
        t = f"{np.mean(tdss[model]):.4f}" if model in tdss else "n/a"
        lines.append("| " + " | ".join([label, cell(s["in"], s["d_in"]), cell(s["ood"], s["d_ood"]),
                                        *[cell(s[k], s[f"d_{k}"]) for k in tasks], t]) + " |")
    return "\n".join(lines) + "\n"
