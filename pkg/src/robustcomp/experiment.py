"""Config-driven pipelines: train -> compress -> fine-tune -> evaluate.

A pipeline config selects one cell of the model notation grid (standard
or robust base training; pruning, PTQ or QAT compression; none, standard
or adversarial fine-tuning) and is repeated R times with derived seeds.
Every stage persists its model; reports carry the config digest so runs
are reproducible byte-for-byte.

Presets:
  paper: full dataset, 20 training epochs, PGD 20 steps throughout.
  desk:  10k train / 2k test samples, 5 training epochs, PGD 10 steps
         during training and 20 at evaluation, 3 fine-tuning epochs.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import nn, prune, quant
from .attack import AttackConfig, evaluate, train_adversarial
from .data import Dataset, load_idx, make_synthetic, subset
from .seeds import derive_seed
from .train import (FINETUNE_PRESETS, TrainConfig, finetune, log_to_csv,
                    run_training, train_standard)

PRESETS = {
    "paper": {"train_subset": 0, "test_subset": 0, "train_epochs": 20,
              "finetune_epochs": 3, "attack_steps_train": 20, "attack_steps_eval": 20},
    "desk": {"train_subset": 10000, "test_subset": 2000, "train_epochs": 5,
             "finetune_epochs": 3, "attack_steps_train": 10, "attack_steps_eval": 20},
}


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"pipeline stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class ExperimentConfig:
    # dataset: synthetic n samples, or IDX paths
    synthetic: Optional[int] = None
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    train_subset: int = 0                 # 0 = all
    test_subset: int = 0
    train_mode: str = "standard"          # "standard" | "adversarial"
    train_epochs: int = 20
    batch_size: int = 64
    compression: str = "none"             # "none" | "prune" | "ptq" | "qat"
    prune_ratio: float = 0.8
    quant_bits: int = 8
    finetune_mode: str = "none"           # "none" | "standard" | "adversarial"
    finetune_epochs: int = 3
    eps: float = 0.1
    attack_step_size: float = 0.01
    attack_steps_train: int = 20
    attack_steps_eval: int = 20
    repetitions: int = 1
    seed: int = 0
    out_dir: str = "runs/out"

    @staticmethod
    def from_json(path_or_text: str, **overrides) -> "ExperimentConfig":
        if os.path.exists(path_or_text):
            with open(path_or_text) as f:
                raw = json.load(f)
        else:
            raw = json.loads(path_or_text)
        raw.update(overrides)
        return ExperimentConfig(**raw)

    def apply_preset(self, name: str) -> "ExperimentConfig":
        p = PRESETS[name]
        self.train_subset = self.train_subset or p["train_subset"]
        self.test_subset = self.test_subset or p["test_subset"]
        self.train_epochs = p["train_epochs"]
        self.finetune_epochs = p["finetune_epochs"]
        self.attack_steps_train = p["attack_steps_train"]
        self.attack_steps_eval = p["attack_steps_eval"]
        return self

    def digest(self) -> str:
        blob = json.dumps({k: v for k, v in asdict(self).items() if k != "out_dir"},
                          sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def notation(self) -> str:
        """Model notation for this cell, e.g. T_ad(f_st^p)."""
        base = "f_st" if self.train_mode == "standard" else "f_rb"
        sup = {"none": "", "prune": "^p", "ptq": "^q", "qat": "^q"}[self.compression]
        name = base + sup
        if self.finetune_mode == "standard":
            return f"T_st({name})"
        if self.finetune_mode == "adversarial":
            return f"T_ad({name})"
        return name


@dataclass
class RunReport:
    config: dict
    config_digest: str
    notation: str
    attack_digest: str
    clean_accuracies: List[float]
    robust_accuracies: List[float]
    stage_wall_s: List[Dict[str, float]]
    model_paths: List[str]

    @property
    def clean_mean(self) -> float:
        return float(np.mean(self.clean_accuracies))

    @property
    def clean_std(self) -> float:
        return float(np.std(self.clean_accuracies, ddof=1)) \
            if len(self.clean_accuracies) >= 2 else 0.0

    @property
    def robust_mean(self) -> float:
        return float(np.mean(self.robust_accuracies))

    @property
    def robust_std(self) -> float:
        return float(np.std(self.robust_accuracies, ddof=1)) \
            if len(self.robust_accuracies) >= 2 else 0.0

    def to_json(self) -> str:
        d = {"config": self.config, "config_digest": self.config_digest,
             "notation": self.notation, "attack_digest": self.attack_digest,
             "clean_accuracies": self.clean_accuracies,
             "robust_accuracies": self.robust_accuracies,
             "clean_mean": self.clean_mean, "robust_mean": self.robust_mean,
             "stage_wall_s": self.stage_wall_s, "model_paths": self.model_paths}
        if len(self.clean_accuracies) >= 2:
            d["clean_std"] = self.clean_std
            d["robust_std"] = self.robust_std
        return json.dumps(d, indent=2)

    @staticmethod
    def from_json(text: str) -> "RunReport":
        d = json.loads(text)
        return RunReport(d["config"], d["config_digest"], d["notation"],
                         d["attack_digest"], d["clean_accuracies"],
                         d["robust_accuracies"], d["stage_wall_s"],
                         d["model_paths"])


def load_datasets(cfg: ExperimentConfig) -> Tuple[Dataset, Dataset]:
    if cfg.synthetic:
        train = make_synthetic(cfg.synthetic, derive_seed(cfg.seed, "data-train"))
        test = make_synthetic(max(cfg.synthetic // 4, 1), derive_seed(cfg.seed, "data-test"))
        test.split = "test"
    else:
        if not all([cfg.train_images, cfg.train_labels, cfg.test_images, cfg.test_labels]):
            raise ValueError("either synthetic size or all four IDX paths are required")
        train = load_idx(cfg.train_images, cfg.train_labels, split="train")
        test = load_idx(cfg.test_images, cfg.test_labels, split="test")
    if cfg.train_subset and cfg.train_subset < len(train):
        train = subset(train, cfg.train_subset, derive_seed(cfg.seed, "subset-train"))
    if cfg.test_subset and cfg.test_subset < len(test):
        test = subset(test, cfg.test_subset, derive_seed(cfg.seed, "subset-test"))
    return train, test


def _attack(cfg: ExperimentConfig, steps: int, seed: int) -> AttackConfig:
    return AttackConfig(eps=cfg.eps, step_size=cfg.attack_step_size,
                        steps=steps, seed=seed)


def _finetune_preset(cfg: ExperimentConfig) -> str:
    kind = "prune" if cfg.compression == "prune" else "quant"
    mode = "adv" if cfg.finetune_mode == "adversarial" else "std"
    return f"{kind}-{mode}"


def run_single(cfg: ExperimentConfig, train: Dataset, test: Dataset,
               rep: int, out_dir: str) -> Tuple[float, float, Dict[str, float], str]:
    """One repetition of the pipeline; returns accuracies, stage wall
    times and the final model path."""
    rep_seed = derive_seed(cfg.seed, "rep", rep)
    walls: Dict[str, float] = {}
    os.makedirs(out_dir, exist_ok=True)

    def timed(stage, fn):
        t0 = time.perf_counter()
        try:
            result = fn()
        except Exception as e:
            raise StageError(stage, e) from e
        walls[stage] = time.perf_counter() - t0
        return result

    # -- base training ----------------------------------------------------
    model = nn.build_small_cnn(derive_seed(rep_seed, "init"))
    tcfg = TrainConfig(epochs=cfg.train_epochs, batch_size=cfg.batch_size,
                       seed=derive_seed(rep_seed, "train"), mode=cfg.train_mode)
    if cfg.train_mode == "adversarial":
        atk = _attack(cfg, cfg.attack_steps_train, derive_seed(rep_seed, "train-attack"))
        timed("train", lambda: train_adversarial(model, train, tcfg, atk))
    else:
        timed("train", lambda: train_standard(model, train, tcfg))
    nn.save(model, os.path.join(out_dir, "base.model"))

    # -- compression ------------------------------------------------------
    qmodel: Optional[quant.QuantizedModel] = None
    if cfg.compression == "prune":
        plan = prune.plan_prune(model, cfg.prune_ratio)
        model = timed("compress", lambda: prune.apply_prune(model, plan))
        with open(os.path.join(out_dir, "prune_plan.json"), "w") as f:
            f.write(plan.to_json())
    elif cfg.compression in ("ptq", "qat"):
        calib = calibration_images(train, derive_seed(rep_seed, "calib"))
        qmodel = timed("compress", lambda: quant.ptq_calibrate(model, calib, cfg.quant_bits))
        with open(os.path.join(out_dir, "schemes.json"), "w") as f:
            f.write(qmodel.schemes_json())
    elif cfg.compression != "none":
        raise StageError("compress", ValueError(f"unknown compression {cfg.compression!r}"))
    nn.save(model, os.path.join(out_dir, "compressed.model"))

    # -- fine-tuning ------------------------------------------------------
    if cfg.finetune_mode != "none" and cfg.finetune_epochs > 0:
        ft_seed = derive_seed(rep_seed, "finetune")
        atk = _attack(cfg, cfg.attack_steps_train, derive_seed(rep_seed, "finetune-attack"))
        if qmodel is not None:
            preset = _finetune_preset(cfg)
            p = FINETUNE_PRESETS[preset]
            ftcfg = TrainConfig(epochs=cfg.finetune_epochs, batch_size=cfg.batch_size,
                                schedule=[(0, p["lr"])], seed=ft_seed, preset=preset)
            timed("finetune", lambda: quant.qat_epochs(
                qmodel, train, ftcfg,
                attack_config=atk if p["adversarial"] else None,
                momentum=p["momentum"]))
        elif cfg.compression == "prune":
            timed("finetune", lambda: finetune(
                model, train, _finetune_preset(cfg), epochs=cfg.finetune_epochs,
                attack_config=atk, seed=ft_seed, batch_size=cfg.batch_size))
        else:
            # uncompressed fine-tuning (e.g. T_ad(f_st)): post-schedule rate
            ftcfg = TrainConfig(epochs=cfg.finetune_epochs, batch_size=cfg.batch_size,
                                schedule=[(0, 0.01)], seed=ft_seed)
            if cfg.finetune_mode == "adversarial":
                timed("finetune", lambda: train_adversarial(model, train, ftcfg, atk))
            else:
                timed("finetune", lambda: run_training(model, train, ftcfg))
    final_path = os.path.join(out_dir, "final.model")
    nn.save(model, final_path)
    if qmodel is not None:
        with open(os.path.join(out_dir, "final_schemes.json"), "w") as f:
            f.write(qmodel.schemes_json())

    # -- evaluation -------------------------------------------------------
    eval_atk = _attack(cfg, cfg.attack_steps_eval, derive_seed(rep_seed, "eval-attack"))
    target = qmodel if qmodel is not None else model
    report = timed("evaluate", lambda: evaluate(
        model, test, eval_atk,
        forward_fn=target if qmodel is not None else None))
    with open(os.path.join(out_dir, "robustness.json"), "w") as f:
        f.write(report.to_json(eval_atk, model.param_digest()))
    return report.clean_accuracy, report.robust_accuracy, walls, final_path


def calibration_images(train: Dataset, seed: int, n: int = 512) -> np.ndarray:
    n = min(n, len(train))
    return subset(train, n, seed).images


def run_pipeline(cfg: ExperimentConfig) -> RunReport:
    train, test = load_datasets(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    clean, robust, walls, paths = [], [], [], []
    for rep in range(cfg.repetitions):
        rep_dir = os.path.join(cfg.out_dir, f"rep{rep}")
        c, r, w, p = run_single(cfg, train, test, rep, rep_dir)
        clean.append(c)
        robust.append(r)
        walls.append(w)
        paths.append(p)
    report = RunReport(config=asdict(cfg), config_digest=cfg.digest(),
                       notation=cfg.notation(),
                       attack_digest=_attack_family_digest(cfg),
                       clean_accuracies=clean, robust_accuracies=robust,
                       stage_wall_s=walls, model_paths=paths)
    with open(os.path.join(cfg.out_dir, "report.json"), "w") as f:
        f.write(report.to_json())
    with open(os.path.join(cfg.out_dir, "report.csv"), "w") as f:
        f.write("rep,clean_acc,robust_acc,config_digest\n")
        for i, (c, r) in enumerate(zip(clean, robust)):
            f.write(f"{i},{c:.6f},{r:.6f},{cfg.digest()}\n")
    return report


def _attack_family_digest(cfg: ExperimentConfig) -> str:
    blob = json.dumps({"eps": cfg.eps, "step": cfg.attack_step_size,
                       "steps": cfg.attack_steps_eval}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def sweep(base: ExperimentConfig, axis: str, levels: List,
          out_path: str, figures: bool = True) -> List[dict]:
    """Run the pipeline once per compression level and write the curve CSV
    (and a matplotlib rendering next to it unless disabled)."""
    if not levels:
        raise ValueError("sweep axis is empty")
    if axis not in ("ratio", "bits"):
        raise ValueError(f"axis must be 'ratio' or 'bits', got {axis!r}")
    rows = []
    for level in levels:
        cfg = ExperimentConfig(**{**asdict(base)})
        if axis == "ratio":
            cfg.compression = "prune" if level > 0 else "none"
            cfg.prune_ratio = float(level)
        else:
            cfg.compression = "ptq"
            cfg.quant_bits = int(level)
        cfg.out_dir = os.path.join(base.out_dir, f"{axis}_{level}")
        try:
            rep = run_pipeline(cfg)
            rows.append({"level": level, "test_mean": rep.clean_mean,
                         "test_std": rep.clean_std, "robust_mean": rep.robust_mean,
                         "robust_std": rep.robust_std, "error": ""})
        except StageError as e:
            rows.append({"level": level, "test_mean": "", "test_std": "",
                         "robust_mean": "", "robust_std": "", "error": e.stage})
    with open(out_path, "w") as f:
        f.write("level,test_mean,test_std,robust_mean,robust_std,error\n")
        for r in rows:
            f.write(",".join(str(r[k]) for k in
                             ("level", "test_mean", "test_std",
                              "robust_mean", "robust_std", "error")) + "\n")
    if figures:
        from .plots import render_sweep
        render_sweep(rows, axis, os.path.splitext(out_path)[0] + ".png")
    return rows


def export_features(model: nn.Model, dataset: Dataset, taps: List[int],
                    attack_config: Optional[AttackConfig], out_dir: str) -> List[str]:
    """Dump flattened tap activations to one CSV per tap layer.

    Each row is an activation vector followed by the label and an
    is_adversarial flag; with an attack configured, every input appears
    twice (clean and PGD-perturbed)."""
    os.makedirs(out_dir, exist_ok=True)
    variants = [(dataset.images, False)]
    if attack_config is not None and attack_config.steps > 0:
        delta = np.concatenate([
            pgd_delta for pgd_delta in _batched_attack(model, dataset, attack_config)])
        variants.append((dataset.images + delta, True))
    rows: Dict[int, List[str]] = {t: [] for t in taps}
    for images, is_adv in variants:
        for i in range(0, images.shape[0], 256):
            from .tensor import Tensor
            _, captured = model.forward(Tensor(images[i:i + 256]), taps=taps)
            labels = dataset.labels[i:i + 256]
            for tap in captured:
                flat = tap.values.reshape(tap.values.shape[0], -1)
                for j in range(flat.shape[0]):
                    vals = ",".join(f"{v:.6g}" for v in flat[j])
                    rows[tap.layer_index].append(
                        f"{vals},{labels[j]},{str(is_adv).lower()}")
    paths = []
    for t in taps:
        path = os.path.join(out_dir, f"features_layer{t}.csv")
        with open(path, "w") as f:
            f.write("\n".join(rows[t]) + "\n")
        paths.append(path)
    return paths


def _batched_attack(model, dataset, cfg, batch_size: int = 256):
    from .attack import pgd_attack
    for i in range(0, len(dataset), batch_size):
        yield pgd_attack(model, dataset.images[i:i + batch_size],
                         dataset.labels[i:i + batch_size], cfg,
                         indices=np.arange(i, i + min(batch_size, len(dataset) - i)))


def report_table(reports: List[RunReport], figures_path: Optional[str] = None
                 ) -> Tuple[str, str]:
    """Aggregate run reports into the model x fine-tuning comparison grid.

    Returns (text table, CSV); all reports must share the attack family.
    """
    if not reports:
        raise ValueError("no reports")
    digests = {r.attack_digest for r in reports}
    if len(digests) > 1:
        raise ValueError(f"mixed attack configs in reports: {digests}")

    def split_notation(r: RunReport):
        if r.notation.startswith("T_st("):
            return r.notation[5:-1], "T_st"
        if r.notation.startswith("T_ad("):
            return r.notation[5:-1], "T_ad"
        return r.notation, "None"

    cells: Dict[Tuple[str, str], RunReport] = {}
    models, cols = [], ["None", "T_st", "T_ad"]
    for r in reports:
        m, c = split_notation(r)
        if m not in models:
            models.append(m)
        cells[(m, c)] = r

    def fmt(r: Optional[RunReport], metric: str) -> str:
        if r is None:
            return "-"
        mean = r.clean_mean if metric == "test" else r.robust_mean
        std = r.clean_std if metric == "test" else r.robust_std
        if len(r.clean_accuracies) >= 2:
            return f"{100 * mean:.2f}±{100 * std:.2f}"
        return f"{100 * mean:.2f}"

    width = 14
    header = "Model".ljust(10) + "Metric".ljust(12) + "".join(c.ljust(width) for c in cols)
    text_lines = [header, "-" * len(header)]
    csv_lines = ["model,metric," + ",".join(cols)]
    for m in models:
        for metric in ("test", "robustness"):
            vals = [fmt(cells.get((m, c)), metric) for c in cols]
            text_lines.append(m.ljust(10) + metric.ljust(12)
                              + "".join(v.ljust(width) for v in vals))
            csv_lines.append(f"{m},{metric}," + ",".join(vals))
    text = "\n".join(text_lines) + "\n"
    csv = "\n".join(csv_lines) + "\n"
    if figures_path:
        from .plots import render_table
        render_table(models, cols, cells, figures_path)
    return text, csv
