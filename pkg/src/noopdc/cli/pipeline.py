"""Stage orchestration for one experiment run.

Everything lives under ``<runs root>/<name>/``::

    config.resolved.toml   every knob, defaults filled in
    data/                  NDS1 datasets and the few-shot split
    checkpoints/           NOCK1 weights (denoiser, NoOp states, prompts, probe)
    metrics/<stage>.csv    per-image score rows, concatenated into metrics.csv
    curves/<stage>.csv     per-epoch training losses
    spectral.csv, stats.csv, probe.csv, instability.csv
    timing/<stage>.csv     wall-clock seconds, concatenated into timing.csv
    .done/<stage>.json     fingerprint + outputs of a finished stage

A stage is skipped when its marker fingerprint matches the current config and
all its outputs still exist, so deleting an artifact re-runs only that stage.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional

import numpy as np

from ..datasets import few_shot_split, generate, load_dataset, save_dataset
from ..dc import batch_distances, classify_ensemble, instability_from_predictions, predict_from_distances
from ..diffusion import Denoiser, DenoiserTrainConfig, make_schedule, train_denoiser
from ..ndgrad import Tensor, save_checkpoint
from ..noop import NoOpState, compose_noise, init_noop_state, noop_distances, train_noop, train_prompt
from ..spectral import high_freq_ratio, noise_stats
from .config import STAGES, RunConfig
from .probe import destruction_probe, train_probe
from .report import MissingArtifactError, emit_report

log = logging.getLogger(__name__)


PREREQS = {
    "gen-data": [],
    "train-denoiser": ["gen-data"],
    "eval-dc": ["train-denoiser"],
    "eval-ensemble": ["train-denoiser"],
    "train-noop": ["train-denoiser"],
    "eval-noop": ["train-noop"],
    "train-prompt": ["train-denoiser"],
    "transfer": ["train-noop"],
    "instability": ["eval-dc"],
    "spectra": ["train-denoiser"],
    "stats": ["train-noop"],
    "probe": ["train-noop"],
    "report": [],
}

# config keys each stage reads; upstream changes propagate through PREREQS
STAGE_KEYS = {
    "gen-data": ["name", "seed", "data", "denoiser.n_per_class", "denoiser.data_seed"],
    "train-denoiser": ["precision", "schedule", "denoiser"],
    "eval-dc": ["dc.t", "dc.eval_seeds"],
    "eval-ensemble": ["dc.t", "dc.ensemble_noises", "dc.ensemble_seeds", "dc.ensemble_timesteps",
                      "dc.timestep_seeds"],
    "train-noop": ["dc.t", "noop"],
    "eval-noop": [],
    "train-prompt": ["dc.t", "noop", "prompt"],
    "transfer": ["transfer"],
    "instability": [],
    "spectra": ["dc.t", "noop", "spectra"],
    "stats": ["stats"],
    "probe": ["probe"],
    "report": [],
}

METRIC_STAGES = ["eval-dc", "eval-ensemble", "eval-noop", "train-prompt", "transfer"]


def _lookup(cfg: dict, key: str):
    node = cfg
    for part in key.split("."):
        node = node[part]
    return node


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


@dataclass
class RunArtifacts:
    run_dir: Path
    metrics: Path
    timing: Path
    config: Path
    spectral: Optional[Path] = None
    checkpoints: Optional[Path] = None


class Run:
    def __init__(self, cfg: RunConfig, root=None):
        self.cfg = cfg
        root = Path(root if root is not None else os.environ.get("NOOP_RUNS_DIR", "runs"))
        self.dir = root / cfg.name
        self.dtype = np.float32 if cfg.precision == "float32" else np.float64
        self.sched = make_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end)
        self._cache: Dict[str, object] = {}
        self._timing: List[tuple] = []
        self._outputs: List[Path] = []

    # -------------------------------------------------------------- paths and bookkeeping

    def path(self, *parts) -> Path:
        return self.dir.joinpath(*parts)

    def fingerprint(self, stage: str) -> str:
        raw = self.cfg.to_dict()
        h = hashlib.sha256(stage.encode())
        for key in STAGE_KEYS[stage]:
            h.update(f"{key}={json.dumps(_lookup(raw, key), sort_keys=True)};".encode())
        for dep in PREREQS[stage]:
            h.update(self.fingerprint(dep).encode())
        return h.hexdigest()

    def _marker(self, stage: str) -> Path:
        return self.path(".done", f"{stage}.json")

    def is_done(self, stage: str) -> bool:
        m = self._marker(stage)
        if not m.is_file():
            return False
        info = json.loads(m.read_text())
        if info.get("fingerprint") != self.fingerprint(stage):
            return False
        return all(self.path(p).is_file() for p in info.get("outputs", []))

    def require(self, stage: str) -> None:
        for dep in PREREQS[stage]:
            if not self.is_done(dep):
                raise MissingArtifactError(
                    f"stage {stage!r} needs {dep!r}, which is missing or was produced with a different config")

    def _out(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        self._outputs.append(path)
        return path

    @contextmanager
    def timed(self, stage: str, unit: str):
        t0 = time.monotonic()
        yield
        self._timing.append((stage, unit, time.monotonic() - t0))

    def write_csv(self, path: Path, header: List[str], rows: Iterable[list]) -> Path:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
        self._out(path).write_text(buf.getvalue())
        return path

    # -------------------------------------------------------------- cached loaders

    def datasets(self):
        if "data" not in self._cache:
            ev = load_dataset(self.path("data", "eval.nds"))
            split = json.loads(self.path("data", "split.json").read_text())
            self._cache["data"] = (ev, np.array(split["train"]), np.array(split["test"]))
        return self._cache["data"]

    def train_set(self):
        ev, tr, _ = self.datasets()
        return ev.nchw(tr).astype(self.dtype), ev.labels[tr]

    def test_set(self):
        ev, _, te = self.datasets()
        return ev.nchw(te).astype(self.dtype), ev.labels[te], te

    def model(self) -> Denoiser:
        if "model" not in self._cache:
            self._cache["model"] = Denoiser.load(self.path("checkpoints", "denoiser.nock")).freeze()
        return self._cache["model"]

    def noop_state(self, seed: int, kind: str = "noop") -> NoOpState:
        return NoOpState.load(self.path("checkpoints", f"{kind}_seed{seed}.nock"), t_fixed=self.cfg.dc.t,
                              lr_eps=self.cfg.noop.lr_eps, lr_meta=self.cfg.noop.lr_meta)

    def fresh_state(self, seed: int, use_meta: bool = True, t: Optional[int] = None) -> NoOpState:
        n = self.cfg.noop
        return init_noop_state(self.test_set()[0].shape[1:], seed=seed, t_fixed=self.cfg.dc.t if t is None else t,
                               lr_eps=n.lr_eps, lr_meta=n.lr_meta, meta_channels=tuple(n.meta_channels),
                               use_meta=use_meta, dtype=self.dtype)

    def noise(self, seed: int, shape) -> np.ndarray:
        """Fresh per-image Gaussian noise for an evaluation seed."""
        return np.random.default_rng(seed).standard_normal(shape).astype(self.dtype)

    @property
    def classes(self) -> List[int]:
        return list(range(self.datasets()[0].num_classes))

    # -------------------------------------------------------------- metrics rows

    def metric_rows(self, stage: str, method: str, seed, t, image_ids, labels, d: np.ndarray,
                    preds: Optional[np.ndarray] = None):
        preds = predict_from_distances(d) if preds is None else preds
        shot = self.cfg.data.shots
        for i, img in enumerate(image_ids):
            yield [self.cfg.name, stage, method, seed, shot, t, int(img), int(labels[i]), int(preds[i]),
                   *[float(v) for v in d[i]]]

    def metric_header(self) -> List[str]:
        k = len(self.classes)
        return ["run", "stage", "method", "seed", "shot", "t", "image_id", "true_label", "pred_label"] + [
            f"d_{i}" for i in range(k)]

    # -------------------------------------------------------------- execution

    def run_stage(self, stage: str, force: bool = False) -> bool:
        """Run one stage if needed. Returns True when it executed."""
        if stage != "report" and not force and self.is_done(stage):
            log.info("stage %s up to date", stage)
            return False
        self.require(stage)
        self.dir.mkdir(parents=True, exist_ok=True)
        self._outputs = []
        self._timing = []
        log.info("stage %s", stage)
        t0 = time.monotonic()
        getattr(self, "stage_" + stage.replace("-", "_"))()
        self._timing.append((stage, "total", time.monotonic() - t0))
        if stage != "report":
            self.write_csv(self.path("timing", f"{stage}.csv"), ["stage", "unit", "seconds"], self._timing)
            outputs = [str(p.relative_to(self.dir)) for p in self._outputs]
            marker = self._marker(stage)
            marker.parent.mkdir(parents=True, exist_ok=True)
            marker.write_text(json.dumps({"fingerprint": self.fingerprint(stage), "outputs": outputs}, indent=1))
        self.collect()
        return True

    def collect(self) -> None:
        """Concatenate per-stage metrics and timing files in canonical stage order."""
        self._concat("metrics", METRIC_STAGES, self.path("metrics.csv"))
        self._concat("timing", [s for s in STAGES if s != "report"], self.path("timing.csv"))

    def _concat(self, sub: str, stages: List[str], dest: Path) -> None:
        parts, header = [], None
        for s in stages:
            f = self.path(sub, f"{s}.csv")
            if f.is_file() and self._marker(s).is_file():
                lines = f.read_text().splitlines(keepends=True)
                header = header or lines[0]
                parts.extend(lines[1:])
        if header is not None:
            dest.write_text(header + "".join(parts))

    def write_config(self) -> Path:
        self.dir.mkdir(parents=True, exist_ok=True)
        p = self.path("config.resolved.toml")
        p.write_text(self.cfg.dumps())
        return p

    def artifacts(self) -> RunArtifacts:
        return RunArtifacts(run_dir=self.dir, metrics=self.path("metrics.csv"), timing=self.path("timing.csv"),
                            config=self.path("config.resolved.toml"),
                            spectral=self.path("spectral.csv") if self.path("spectral.csv").is_file() else None,
                            checkpoints=self.path("checkpoints"))

    # -------------------------------------------------------------- stages

    def stage_gen_data(self):
        c = self.cfg
        pre = generate(c.data.generator, c.denoiser.n_per_class, c.data.size, c.denoiser.data_seed)
        ev = generate(c.data.generator, c.data.n_per_class, c.data.size, c.data.seed)
        save_dataset(pre, self._out(self.path("data", "pretrain.nds")))
        save_dataset(ev, self._out(self.path("data", "eval.nds")))
        sp = few_shot_split(ev, c.data.shots, c.seed)
        split = {"shots": sp.shots, "seed": sp.seed, "train": sp.train.tolist(), "test": sp.test.tolist()}
        self._out(self.path("data", "split.json")).write_text(json.dumps(split))
        manifest = {"pretrain": pre.provenance, "eval": ev.provenance, "train_size": len(sp.train),
                    "test_size": len(sp.test)}
        self._out(self.path("data", "manifest.json")).write_text(json.dumps(manifest, indent=1, sort_keys=True))

    def stage_train_denoiser(self):
        c = self.cfg
        pre = load_dataset(self.path("data", "pretrain.nds"))
        tc = DenoiserTrainConfig(epochs=c.denoiser.epochs, batch_size=c.denoiser.batch_size, lr=c.denoiser.lr,
                                 seed=c.seed, precision=c.precision, base_channels=c.denoiser.base_channels,
                                 emb_dim=c.denoiser.emb_dim)
        with self.timed("train-denoiser", "train"):
            model, curve = train_denoiser(pre.nchw(), pre.labels, pre.num_classes, self.sched, tc)
        model.save(self._out(self.path("checkpoints", "denoiser.nock")))
        self._cache.pop("model", None)
        self.write_csv(self.path("curves", "train-denoiser.csv"), ["run", "stage", "method", "seed", "epoch", "loss"],
                       [[c.name, "train-denoiser", "denoiser", c.seed, e + 1, v] for e, v in enumerate(curve)])

    def stage_eval_dc(self):
        c = self.cfg
        x, y, ids = self.test_set()
        rows = []
        for s in c.dc.eval_seeds:
            with self.timed("eval-dc", f"zero-shot/{s}"):
                d = batch_distances(self.model(), self.sched, x, c.dc.t, self.noise(s, x.shape), self.classes)
            rows.extend(self.metric_rows("eval-dc", "zero-shot", s, c.dc.t, ids, y, d))
        self.write_csv(self.path("metrics", "eval-dc.csv"), self.metric_header(), rows)

    def stage_eval_ensemble(self):
        c = self.cfg
        x, y, ids = self.test_set()
        rows = []
        for s in c.dc.ensemble_seeds:
            rng = np.random.default_rng(s)
            noises = [rng.standard_normal(x.shape).astype(self.dtype) for _ in range(c.dc.ensemble_noises)]
            with self.timed("eval-ensemble", f"ensemble-noise/{s}"):
                preds, d = classify_ensemble(self.model(), self.sched, x, [c.dc.t], noises, self.classes)
            rows.extend(self.metric_rows("eval-ensemble", "ensemble-noise", s, c.dc.t, ids, y, d, preds))
        tag = "+".join(str(t) for t in c.dc.ensemble_timesteps)
        for s in c.dc.timestep_seeds:
            with self.timed("eval-ensemble", f"ensemble-timestep/{s}"):
                preds, d = classify_ensemble(self.model(), self.sched, x, c.dc.ensemble_timesteps,
                                             [self.noise(s, x.shape)], self.classes)
            rows.extend(self.metric_rows("eval-ensemble", "ensemble-timestep", s, tag, ids, y, d, preds))
        self.write_csv(self.path("metrics", "eval-ensemble.csv"), self.metric_header(), rows)

    def _train_noop(self, stage: str, method: str, seed: int, class_offsets=None, use_meta=True, on_epoch=None,
                    epochs=None, t=None, unit=None):
        c = self.cfg
        tx, ty = self.train_set()
        state = self.fresh_state(seed, use_meta=use_meta, t=t)
        with self.timed(stage, unit or f"{method}-train/{seed}"):
            state, curve = train_noop(tx, ty, self.model(), self.sched, state, self.classes,
                                      epochs=c.noop.epochs if epochs is None else epochs,
                                      batch_size=c.noop.batch_size, seed=seed, class_offsets=class_offsets,
                                      on_epoch=on_epoch)
        return state, [[c.name, stage, method, seed, e + 1, v] for e, v in enumerate(curve)]

    def stage_train_noop(self):
        curves = []
        for s in self.cfg.noop.seeds:
            state, rows = self._train_noop("train-noop", "noop", s)
            state.save(self._out(self.path("checkpoints", f"noop_seed{s}.nock")))
            curves.extend(rows)
        self.write_csv(self.path("curves", "train-noop.csv"), ["run", "stage", "method", "seed", "epoch", "loss"],
                       curves)

    def stage_eval_noop(self):
        c = self.cfg
        x, y, ids = self.test_set()
        rows = []
        for s in c.noop.seeds:
            d0 = noop_distances(self.model(), self.sched, self.fresh_state(s), x, c.dc.t, self.classes)
            rows.extend(self.metric_rows("eval-noop", "noop-init", s, c.dc.t, ids, y, d0))
            state = self.noop_state(s)
            with self.timed("eval-noop", f"noop/{s}"):
                d = noop_distances(self.model(), self.sched, state, x, c.dc.t, self.classes)
            rows.extend(self.metric_rows("eval-noop", "noop", s, c.dc.t, ids, y, d))
        self.write_csv(self.path("metrics", "eval-noop.csv"), self.metric_header(), rows)

    def stage_train_prompt(self):
        c = self.cfg
        tx, ty = self.train_set()
        x, y, ids = self.test_set()
        rows, curves = [], []
        for s in c.noop.seeds:
            with self.timed("train-prompt", f"prompt-train/{s}"):
                offsets, curve = train_prompt(tx, ty, self.model(), self.sched, n_tokens=c.prompt.n_tokens,
                                              lr=c.prompt.lr, epochs=c.prompt.epochs,
                                              batch_size=c.prompt.batch_size, seed=s)
            curves.extend([c.name, "train-prompt", "prompt", s, e + 1, v] for e, v in enumerate(curve))
            save_checkpoint(self._out(self.path("checkpoints", f"prompt_seed{s}.nock")),
                            {"prompt.offsets": offsets.data})
            with self.timed("train-prompt", f"prompt/{s}"):
                d = batch_distances(self.model(), self.sched, x, c.dc.t, self.noise(s, x.shape), self.classes,
                                    class_offsets=offsets)
            rows.extend(self.metric_rows("train-prompt", "prompt", s, c.dc.t, ids, y, d))
            state, crows = self._train_noop("train-prompt", "noop+prompt", s, class_offsets=offsets)
            curves.extend(crows)
            state.save(self._out(self.path("checkpoints", f"noop-prompt_seed{s}.nock")))
            with self.timed("train-prompt", f"noop+prompt/{s}"):
                d = noop_distances(self.model(), self.sched, state, x, c.dc.t, self.classes, class_offsets=offsets)
            rows.extend(self.metric_rows("train-prompt", "noop+prompt", s, c.dc.t, ids, y, d))
        self.write_csv(self.path("curves", "train-prompt.csv"), ["run", "stage", "method", "seed", "epoch", "loss"],
                       curves)
        self.write_csv(self.path("metrics", "train-prompt.csv"), self.metric_header(), rows)

    def stage_transfer(self):
        c = self.cfg
        tr = c.transfer
        target = generate(tr.generator, tr.n_per_class, c.data.size, tr.seed, tr.variant)
        if target.num_classes != len(self.classes):
            raise ValueError("transfer target must have the same classes as the source")
        save_dataset(target, self._out(self.path("data", "transfer.nds")))
        x = target.nchw().astype(self.dtype)
        rows = []
        for s in c.noop.seeds:
            state = self.noop_state(s)
            with self.timed("transfer", f"transfer/{s}"):
                d = noop_distances(self.model(), self.sched, state, x, c.dc.t, self.classes)
            rows.extend(self.metric_rows("transfer", "transfer", s, c.dc.t, range(len(x)), target.labels, d))
        self.write_csv(self.path("metrics", "transfer.csv"), self.metric_header(), rows)

    def stage_instability(self):
        seeds, preds, labels = _predictions(self.path("metrics", "eval-dc.csv"), "zero-shot")
        rep = instability_from_predictions(seeds, preds, labels)
        self.write_csv(self.path("instability.csv"), ["run", "t", "n_seeds", "mean", "std", "flip_rate", "accuracies"],
                       [[self.cfg.name, self.cfg.dc.t, len(seeds), rep.mean, rep.std, rep.flip_rate,
                         ";".join(_fmt(float(a)) for a in rep.accuracies)]])

    def stage_spectra(self):
        c = self.cfg
        rows = []
        for t in c.spectra.timesteps or [c.dc.t]:
            for s in c.spectra.seeds:
                def record(epoch, state, s=s, t=t):
                    rows.append([c.name, c.data.generator, s, t, epoch,
                                 high_freq_ratio(state.eps.data[0], c.spectra.cutoff)])

                state, _ = self._train_noop("spectra", "noise-only", s, use_meta=False, on_epoch=record,
                                            epochs=c.spectra.epochs, t=t, unit=f"noise-only-train/t{t}/{s}")
                save_checkpoint(self._out(self.path("checkpoints", f"noise-only_t{t}_seed{s}.nock")),
                                {"noop.eps": state.eps.data[0]})
        self.write_csv(self.path("spectral.csv"), ["run", "dataset", "seed", "t", "epoch", "ratio"], rows)

    def stage_stats(self):
        c = self.cfg
        rows = []
        for s in c.noop.seeds:
            st = noise_stats(self.noop_state(s).eps.data[0])
            rows.append([c.name, "noop-eps", s, st.mean, st.variance, st.log_pdf])
        shape = self.test_set()[0].shape[1:]
        rng = np.random.default_rng(c.stats.seed)
        for i in range(c.stats.draws):
            st = noise_stats(rng.standard_normal(shape))
            rows.append([c.name, "gaussian", i, st.mean, st.variance, st.log_pdf])
        self.write_csv(self.path("stats.csv"), ["run", "source", "seed", "mean", "variance", "log_pdf"], rows)

    def stage_probe(self):
        c = self.cfg
        pre = load_dataset(self.path("data", "pretrain.nds"))
        with self.timed("probe", "train"):
            probe, curve = train_probe(pre.nchw(), pre.labels, pre.num_classes, self.sched, epochs=c.probe.epochs,
                                       batch_size=c.probe.batch_size, lr=c.probe.lr, seed=c.seed,
                                       clean_fraction=c.probe.clean_fraction, dtype=self.dtype)
        save_checkpoint(self._out(self.path("checkpoints", "probe.nock")), probe.state_dict("probe."))
        x, y, _ = self.test_set()
        clean = float((probe.predict(x) == y).mean())
        rows = [[c.name, "clean", "", 0, clean]]
        if clean < 0.9:
            raise RuntimeError(f"probe reached only {clean:.3f} clean accuracy (< 0.9); increase probe.epochs")
        for s in c.probe.noise_seeds:
            acc = destruction_probe(probe, x, y, self.sched, c.probe.t, self.noise(s, x.shape))
            rows.append([c.name, "random", s, c.probe.t, acc])
        for s in c.probe.noise_seeds:
            if s not in c.noop.seeds:
                continue
            state = self.noop_state(s)
            eps_star = compose_noise(state, Tensor(x)).data
            rows.append([c.name, "noop", s, c.probe.t, destruction_probe(probe, x, y, self.sched, c.probe.t, eps_star)])
        self.write_csv(self.path("probe.csv"), ["run", "source", "seed", "t", "accuracy"], rows)

    def stage_report(self):
        emit_report(self.dir)


def _predictions(path: Path, method: str):
    """Read (seeds, predictions (S, N), labels) for one method from a metrics CSV."""
    if not path.is_file():
        raise MissingArtifactError(f"missing metrics file {path}")
    by_seed: Dict[str, list] = {}
    labels: Dict[str, list] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["method"] != method:
                continue
            by_seed.setdefault(row["seed"], []).append(int(row["pred_label"]))
            labels.setdefault(row["seed"], []).append(int(row["true_label"]))
    if not by_seed:
        raise MissingArtifactError(f"no {method!r} rows in {path}")
    seeds = list(by_seed)
    return [int(s) for s in seeds], np.array([by_seed[s] for s in seeds]), np.array(labels[seeds[0]])


def run_experiment(cfg: RunConfig, stages: Optional[List[str]] = None, root=None, force: bool = False) -> RunArtifacts:
    """Execute the requested stages (default: every configured stage) in pipeline order."""
    run = Run(cfg, root)
    run.write_config()
    wanted = cfg.stages if stages is None else stages
    for stage in STAGES:
        if stage in wanted:
            run.run_stage(stage, force=force)
    run.collect()
    return run.artifacts()
