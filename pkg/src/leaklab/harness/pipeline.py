"""Stage-by-stage orchestration: data -> pretrain -> LoRA fine-tune -> mine -> trace
-> merge -> edit -> re-mine -> benchmark -> restoration -> scale sweep -> report.

Every stage reads its inputs from the run directory and writes its outputs
there, so any stage can be re-run on its own and completed stages are skipped.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np

from leaklab import editing, mining, tracing
from leaklab.errors import ArgumentError, ConfigError, DataError, LeakLabError, NumericError, StageError
from leaklab.harness.checkpoint import load_checkpoint, save_checkpoint
from leaklab.harness.config import PipelineConfig
from leaklab.lora import attach, merge
from leaklab.model import DecoderModel, init, projection_paths, token_accuracy
from leaklab.numeric.rng import Rng
from leaklab.schemas import REPORT_SCHEMAS, SCHEMA_VERSION, validate
from leaklab.text import (
    VOCAB_SIZE,
    FinetuneDataset,
    build_finetune_dataset,
    check_disjoint,
    corpus_hash,
    load_support_jsonl,
    load_text_lines,
    load_wordlist,
    pack_lines,
    synth_general,
    synth_support,
)
from leaklab.training import TrainConfig, encode_texts, finetune, full_finetune, restoration_finetune, write_train_log

log = logging.getLogger(__name__)

CHANCE = 1.0 / VOCAB_SIZE
TIMESTAMP_KEYS = ("applied_at", "generated_at")


def shipped_path(name: str) -> str:
    return str(resources.files("leaklab").joinpath("data", name))


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def sign_test_p(n_plus: int, n_minus: int) -> float:
    """One-sided sign test: P(X >= n_plus) for X ~ Binomial(n_plus + n_minus, 1/2)."""
    n = n_plus + n_minus
    if n == 0:
        return 1.0
    return sum(math.comb(n, i) for i in range(n_plus, n + 1)) / 2**n


def config_hash(config: PipelineConfig) -> str:
    obj = config.to_dict()
    obj.pop("out_dir", None)
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


@dataclass
class Run:
    config: PipelineConfig

    @property
    def dir(self) -> Path:
        return Path(self.config.out_dir)

    def path(self, name: str) -> Path:
        return self.dir / name

    # ------------------------------------------------------------ helpers
    def rules(self) -> tracing.CorruptionRules | None:
        c = self.config.corruption
        subs = c.get("substitutions")
        return tracing.CorruptionRules(
            tuple(tuple(p) for p in subs) if subs is not None else tracing.DEFAULT_SUBSTITUTIONS,
            c.get("fallback", "adjacent-swap"),
        )

    def dataset(self) -> FinetuneDataset:
        return FinetuneDataset.load_jsonl(self.path("data/finetune.jsonl"))

    def lines(self, split: str) -> list[str]:
        return load_text_lines(self.path(f"data/{split}.txt"))

    def load(self, name: str):
        return load_checkpoint(self.path(name))[0]

    def save(self, name: str, model, stage: str) -> None:
        save_checkpoint(self.path(name), model, stage=stage, dtype=self.config.checkpoint_dtype)

    def benchmark(self, model, eval_lines: list[str] | None = None) -> float:
        eval_lines = eval_lines if eval_lines is not None else self.lines("eval")
        return benchmark(model, eval_lines, self.dataset().texts() + self.lines("pretrain") + self.lines("restore"))

    def restore_cfg(self) -> TrainConfig:
        r = self.config.restore
        return TrainConfig(epochs=max(r.epochs, 1), lr=r.lr, batch=r.batch, seed=self.config.seed)

    def lora_targets(self, model: DecoderModel) -> list[str]:
        t = self.config.lora.targets
        if t == "projections":
            return projection_paths(model.config)
        if t == "attention":
            return [p for p in projection_paths(model.config) if "self_attn" in p]
        if isinstance(t, list):
            return t
        raise ConfigError(f"unknown lora.targets {t!r}")


def benchmark(model, eval_lines: list[str], train_lines: list[str] | None = None) -> float:
    """Next-token accuracy on held-out lines, refusing any overlap with training text."""
    if not eval_lines:
        raise ArgumentError("empty eval corpus")
    if train_lines is not None:
        check_disjoint(eval_lines, train_lines, "eval split and training data")
    from leaklab.lora import unwrap

    base, lora = unwrap(model)
    return token_accuracy(base, encode_texts(eval_lines), lora=lora)


# ---------------------------------------------------------------- stages


def stage_build_data(run: Run) -> None:
    cfg = run.config
    d = cfg.data
    passwords = load_wordlist(d.wordlist_path or shipped_path("sample_wordlist.txt"), d.n_passwords)
    if not passwords:
        raise DataError("no passwords loaded")
    n_support = max(d.support_ratio * len(passwords), len(passwords))
    if d.support_path:
        support = load_support_jsonl(d.support_path)[:n_support]
    else:
        support = synth_support(n_support, Rng(cfg.seed, "support"))
    dataset = build_finetune_dataset(support, passwords, Rng(cfg.seed, "dataset"))
    need = d.n_pretrain + d.n_restore + d.n_eval
    if d.general_path:
        general = list(dict.fromkeys(load_text_lines(d.general_path)))
        if len(general) < need:
            raise DataError(f"general corpus has {len(general)} distinct lines, need {need}")
    else:
        general = synth_general(need, Rng(cfg.seed, "general"))
    splits = {
        "pretrain": general[: d.n_pretrain],
        "restore": general[d.n_pretrain : d.n_pretrain + d.n_restore],
        "eval": general[d.n_pretrain + d.n_restore : need],
    }
    check_disjoint(splits["eval"], splits["pretrain"] + splits["restore"] + dataset.texts(), "eval split")
    run.path("data").mkdir(parents=True, exist_ok=True)
    dataset.save_jsonl(run.path("data/finetune.jsonl"))
    for name, lines in splits.items():
        run.path(f"data/{name}.txt").write_text("\n".join(lines) + "\n", encoding="utf-8", errors="surrogateescape")
    write_json(
        {
            "passwords": len(passwords),
            "records": len(dataset.records()),
            "credential_lines": len(dataset.passwords),
            "splits": {k: {"lines": len(v), "sha256": corpus_hash(v)} for k, v in splits.items()},
        },
        run.path("data/manifest.json"),
    )


def stage_pretrain(run: Run) -> None:
    cfg = run.config
    base = init(cfg.model)
    p = cfg.pretrain
    tc = TrainConfig(epochs=p.epochs, lr=p.lr, batch=p.batch, seed=cfg.seed)
    # consecutive lines are packed into short multi-line documents so the
    # newline byte is seen during pretraining as well
    docs = pack_lines(run.lines("pretrain"), cfg.model.max_seq - 8)
    base, history = full_finetune(base, encode_texts(docs), tc, stream="pretrain")
    write_train_log(run.path("pretrain_log.csv"), history, "standard")
    run.save("base.ckpt", base, "pretrain")


def stage_train(run: Run) -> None:
    cfg = run.config
    base = run.load("base.ckpt")
    adapted = attach(base, run.lora_targets(base), cfg.lora.r, cfg.lora.alpha, Rng(cfg.seed, "lora"), cfg.lora.scaling)
    adapted, history = finetune(adapted, run.dataset(), cfg.train)
    if history[-1] >= history[0]:
        log.warning("fine-tune loss did not decrease (%.4f -> %.4f)", history[0], history[-1])
    write_train_log(run.path("train_log.csv"), history, cfg.train.objective)
    run.save("adapted.ckpt", adapted, "train")


def stage_mine_pre(run: Run) -> None:
    adapted = run.load("adapted.ckpt")
    prompts = run.dataset().credential_prompts()
    report = mining.mine_prompts(adapted, prompts)
    write_json(_mining_json(report, "pre"), run.path("mining_pre.json"))
    if len(prompts) >= 3:
        mining.pca_passwords(report).write_csv(run.path("pca_passwords.csv"))


def _mining_json(report: mining.MiningReport, stage: str) -> dict:
    obj = report.to_json()
    obj.update(schema_version=SCHEMA_VERSION, stage=stage)
    return obj


def stage_association(run: Run) -> None:
    cfg = run.config
    a = cfg.association
    dataset = run.dataset()
    n = len(dataset.passwords)
    counts = list(range(a.chunk, n + 1, a.chunk))
    if counts and counts[-1] != n:
        counts.append(n)
    if not a.enabled or len(counts) < 2:
        run.path("association.csv").write_text("injected_count,strength\n")
        return
    base = run.load("base.ckpt")
    probes = [p.prefix for p in dataset.credential_prompts()]
    adapted = attach(base, run.lora_targets(base), cfg.lora.r, cfg.lora.alpha, Rng(cfg.seed, "lora"), cfg.lora.scaling)
    tc = TrainConfig(epochs=a.epochs_per_chunk, lr=cfg.train.lr, batch=cfg.train.batch, seed=cfg.seed, max_grad_norm=cfg.train.max_grad_norm)
    points = []
    for c in counts:
        adapted, _ = finetune(adapted, dataset.with_passwords(c), tc)
        points.append((c, mining.activation_strength(adapted, probes)))
    mining.AssociationSeries(points).write_csv(run.path("association.csv"))


def stage_trace(run: Run) -> None:
    cfg = run.config
    adapted = run.load("adapted.ckpt")
    prompts = run.dataset().credential_prompts()
    rules = run.rules()
    report = tracing.layer_attribution(adapted, prompts, rules, cfg.edit.eligible)
    report.write_csv(run.path("trace_layers.csv"))
    # restoration check over the recovered passwords
    recovered = [r["recovered"] for r in read_json(run.path("mining_pre.json"))["records"]]
    others = [p for p in report.scores if p != report.selected_target]
    cases = []
    for prompt, ok in zip(prompts, recovered):
        if not ok:
            continue
        case = tracing.trace_case(adapted, prompt, rules, cfg.edit.probe)
        rand_path = Rng(cfg.seed, "restore-baseline", prompt.index).choice(others)
        cases.append(
            {
                "password_index": prompt.index,
                "probe": case.probe,
                "corrupted_correct": case.corrupted_correct,
                "selected_flip": tracing.path_restores(adapted, case, report.selected_target),
                "random_path": rand_path,
                "random_flip": tracing.path_restores(adapted, case, rand_path),
            }
        )
    n_plus = sum(c["selected_flip"] and not c["random_flip"] for c in cases)
    n_minus = sum(c["random_flip"] and not c["selected_flip"] for c in cases)
    obj = report.to_json()
    obj.update(
        schema_version=SCHEMA_VERSION,
        restoration={
            "probe": cfg.edit.probe,
            "cases": cases,
            "selected_flips": sum(c["selected_flip"] for c in cases),
            "random_flips": sum(c["random_flip"] for c in cases),
            "sign_test": {"n_plus": n_plus, "n_minus": n_minus, "p_value": sign_test_p(n_plus, n_minus)},
        },
    )
    write_json(obj, run.path("trace.json"))


def stage_merge(run: Run) -> None:
    adapted = run.load("adapted.ckpt")
    run.save("merged.ckpt", merge(adapted), "merge")


def stage_edit(run: Run) -> None:
    cfg = run.config
    merged = run.load("merged.ckpt")
    target = read_json(run.path("trace.json"))["selected_target"]
    prompts = run.dataset().credential_prompts()
    k, v = editing.aggregate_key_value(merged, prompts, target, run.rules())
    scale = cfg.edit.scale
    tried = []
    if cfg.edit.auto_scales:
        chosen = None
        for s in cfg.edit.auto_scales:
            plan = editing.EditPlan(target, k, v, s, cfg.edit.sign)
            edited, _ = editing.apply_edit(merged, plan)
            rec = mining.mine_prompts(edited, prompts).recovered
            tried.append({"scale": s, "recovered": rec})
            if rec == 0:
                chosen = s
                break
        scale = chosen if chosen is not None else scale
    plan = editing.EditPlan(target, k, v, scale, cfg.edit.sign)
    edited, receipt = editing.apply_edit(merged, plan)
    plan_obj = plan.to_json()
    plan_obj.update(schema_version=SCHEMA_VERSION, scale_search=tried)
    write_json(plan_obj, run.path("edit_plan.json"))
    rec_obj = receipt.to_json()
    rec_obj.update(schema_version=SCHEMA_VERSION)
    write_json(rec_obj, run.path("edit_receipt.json"))
    run.save("edited.ckpt", edited, "edit")


def load_plan(run: Run) -> editing.EditPlan:
    return editing.EditPlan.from_json(read_json(run.path("edit_plan.json")))


def stage_mine_post(run: Run) -> None:
    edited = run.load("edited.ckpt")
    report = mining.mine_prompts(edited, run.dataset().credential_prompts())
    write_json(_mining_json(report, "post"), run.path("mining_post.json"))


def stage_eval(run: Run) -> None:
    eval_lines = run.lines("eval")
    out = {
        "schema_version": SCHEMA_VERSION,
        "eval_lines": len(eval_lines),
        "eval_sha256": corpus_hash(eval_lines),
        "chance": CHANCE,
        "accuracy": {
            "base": run.benchmark(run.load("base.ckpt"), eval_lines),
            "pre_edit": run.benchmark(run.load("merged.ckpt"), eval_lines),
            "post_edit": run.benchmark(run.load("edited.ckpt"), eval_lines),
        },
    }
    write_json(out, run.path("eval.json"))


def stage_restore(run: Run) -> None:
    cfg = run.config
    edited = run.load("edited.ckpt")
    eval_lines = run.lines("eval")
    restored = restoration_finetune(edited, run.lines("restore"), run.restore_cfg(), eval_corpus=eval_lines, epochs=cfg.restore.epochs)
    run.save("restored.ckpt", restored, "restore")
    report = mining.mine_prompts(restored, run.dataset().credential_prompts())
    write_json(
        {
            "schema_version": SCHEMA_VERSION,
            "accuracy": run.benchmark(restored, eval_lines),
            "post_edit_accuracy": read_json(run.path("eval.json"))["accuracy"]["post_edit"],
            "recovered": report.recovered,
            "restore_lines": len(run.lines("restore")),
            "restore_sha256": corpus_hash(run.lines("restore")),
        },
        run.path("restoration.json"),
    )


def stage_sweep(run: Run) -> None:
    cfg = run.config
    scales = sorted(cfg.sweep_scales, key=abs, reverse=True)
    if len(scales) < 2:
        raise ArgumentError("sweep needs at least 2 scales")
    rows = sweep(run, scales)
    with open(run.path("sweep.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scale", "recovered", "accuracy", "restored_accuracy"])
        for r in rows["rows"]:
            w.writerow([repr(r["scale"]), r["recovered"], repr(r["accuracy"]), "" if r["restored_accuracy"] is None else repr(r["restored_accuracy"])])
    write_json(rows, run.path("sweep.json"))


def sweep(run: Run, scales: list[float]) -> dict:
    """Apply the same (key, value) at each scale to the same pre-edit snapshot."""
    if not scales:
        raise ArgumentError("empty scale list")
    cfg = run.config
    merged = run.load("merged.ckpt")
    plan = load_plan(run)
    prompts = run.dataset().credential_prompts()
    eval_lines = run.lines("eval")
    rows = []
    for s in scales:
        edited, _ = editing.apply_edit(merged, plan.at_scale(s))
        row = {
            "scale": float(s),
            "recovered": mining.mine_prompts(edited, prompts).recovered,
            "accuracy": run.benchmark(edited, eval_lines),
            "restored_accuracy": None,
        }
        if cfg.restore.enabled and cfg.restore.epochs > 0:
            restored = restoration_finetune(edited, run.lines("restore"), run.restore_cfg(), eval_corpus=eval_lines, epochs=cfg.restore.epochs)
            row["restored_accuracy"] = run.benchmark(restored, eval_lines)
        rows.append(row)
    unscaled = editing.unscaled_edit(merged, plan.key, plan.value, plan.target_path, plan.sign)
    return {
        "schema_version": SCHEMA_VERSION,
        "target_path": plan.target_path,
        "sign": plan.sign,
        "rows": rows,
        "unscaled": {
            "scale": 1.0,
            "recovered": mining.mine_prompts(unscaled, prompts).recovered,
            "accuracy": run.benchmark(unscaled, eval_lines),
        },
    }


def stage_report(run: Run) -> None:
    missing = [n for n in REQUIRED_OUTPUTS if not run.path(n).exists()]
    if missing:
        owner = next(s for s, outs in STAGE_OUTPUTS.items() if missing[0] in outs)
        raise DataError(f"missing {missing[0]} (produced by stage {owner!r})")
    pre = read_json(run.path("mining_pre.json"))["totals"]
    post = read_json(run.path("mining_post.json"))["totals"]
    trace = read_json(run.path("trace.json"))
    receipt = read_json(run.path("edit_receipt.json"))
    ev = read_json(run.path("eval.json"))
    summary = {
        "schema_version": SCHEMA_VERSION,
        "config_sha256": config_hash(run.config),
        "seed": run.config.seed,
        "passwords": {"injected": pre["injected"], "recovered_pre": pre["recovered"], "recovered_post": post["recovered"]},
        "trace": {"selected_target": trace["selected_target"], "sign_test_p": trace["restoration"]["sign_test"]["p_value"]},
        "edit": {"target_path": receipt["target_path"], "scale": receipt["scale"], "sign": receipt["sign"], "norms": receipt["norms"]},
        "accuracy": ev["accuracy"],
        "chance": ev["chance"],
        "eval_lines": ev["eval_lines"],
        "restoration": None,
        "sweep": read_json(run.path("sweep.json"))["rows"],
        "generated_at": time.time(),
    }
    if run.path("restoration.json").exists():
        r = read_json(run.path("restoration.json"))
        summary["restoration"] = {"accuracy": r["accuracy"], "recovered": r["recovered"]}
    write_json(summary, run.path("run_summary.json"))
    for name, schema in REPORT_SCHEMAS.items():
        validate(read_json(run.path(name)), schema)


STAGE_FUNCS: dict[str, Callable[[Run], None]] = {
    "build-data": stage_build_data,
    "pretrain": stage_pretrain,
    "train": stage_train,
    "mine-pre": stage_mine_pre,
    "association": stage_association,
    "trace": stage_trace,
    "merge": stage_merge,
    "edit": stage_edit,
    "mine-post": stage_mine_post,
    "eval": stage_eval,
    "restore": stage_restore,
    "sweep": stage_sweep,
    "report": stage_report,
}
STAGES = list(STAGE_FUNCS)

STAGE_OUTPUTS = {
    "build-data": ["data/finetune.jsonl", "data/pretrain.txt", "data/restore.txt", "data/eval.txt", "data/manifest.json"],
    "pretrain": ["base.ckpt", "pretrain_log.csv"],
    "train": ["adapted.ckpt", "train_log.csv"],
    "mine-pre": ["mining_pre.json"],
    "association": ["association.csv"],
    "trace": ["trace.json", "trace_layers.csv"],
    "merge": ["merged.ckpt"],
    "edit": ["edit_plan.json", "edit_receipt.json", "edited.ckpt"],
    "mine-post": ["mining_post.json"],
    "eval": ["eval.json"],
    "restore": ["restored.ckpt", "restoration.json"],
    "sweep": ["sweep.csv", "sweep.json"],
    "report": ["run_summary.json"],
}
REQUIRED_OUTPUTS = [o for s in ("mine-pre", "trace", "edit", "mine-post", "eval", "sweep") for o in STAGE_OUTPUTS[s]]

# CLI subcommand -> stages it runs
COMMANDS = {
    "build-data": ["build-data"],
    "train": ["pretrain", "train"],
    "mine": ["mine-pre", "association"],
    "trace": ["trace"],
    "edit": ["merge", "edit", "mine-post"],
    "eval": ["eval", "restore"],
    "sweep": ["sweep"],
    "report": ["report"],
    "run": STAGES,
}


def stage_done(run: Run, stage: str) -> bool:
    return all(run.path(o).exists() for o in STAGE_OUTPUTS[stage])


def _prepare_dir(run: Run) -> None:
    run.dir.mkdir(parents=True, exist_ok=True)
    cfg_path = run.path("config.json")
    if cfg_path.exists():
        old = PipelineConfig.load(cfg_path)
        if config_hash(old) != config_hash(run.config):
            raise ConfigError(f"{run.dir} holds a run with a different config; use a new --out or --force")
    else:
        run.config.save(cfg_path)


def run_stages(config: PipelineConfig, stages: list[str], force: bool = False) -> Run:
    """Run ``stages`` in pipeline order, skipping any whose outputs already exist."""
    run = Run(config)
    if force and run.path("config.json").exists():
        run.path("config.json").unlink()
    _prepare_dir(run)
    timings_path = run.path("timings.json")
    timings = read_json(timings_path) if timings_path.exists() else {}
    previous = None
    for stage in STAGES:
        if stage not in stages:
            if stage_done(run, stage):
                previous = stage
            continue
        if stage_done(run, stage) and not force and stage != "report":
            log.info("stage %s already complete, skipping", stage)
            previous = stage
            continue
        idx = STAGES.index(stage)
        for dep in STAGES[:idx]:
            if dep in ("association", "restore", "report"):
                continue
            if not stage_done(run, dep):
                raise StageError(stage, previous, DataError(f"prerequisite stage {dep!r} has not completed"))
        log.info("stage %s", stage)
        t0 = time.perf_counter()
        try:
            STAGE_FUNCS[stage](run)
        except LeakLabError as exc:
            raise StageError(stage, previous, exc) from exc
        except FloatingPointError as exc:
            raise StageError(stage, previous, NumericError(str(exc))) from exc
        except (ValueError, OSError) as exc:
            # unreadable or malformed input files are data errors
            raise StageError(stage, previous, DataError(str(exc))) from exc
        timings[stage] = round(time.perf_counter() - t0, 3)
        write_json(timings, timings_path)
        previous = stage
    return run


def run_pipeline(config: PipelineConfig, force: bool = False) -> Run:
    return run_stages(config, STAGES, force=force)


def strip_timestamps(obj):
    """Copy of a JSON object without timestamp fields, for reproducibility checks."""
    if isinstance(obj, dict):
        return {k: strip_timestamps(v) for k, v in obj.items() if k not in TIMESTAMP_KEYS}
    if isinstance(obj, list):
        return [strip_timestamps(v) for v in obj]
    return obj


REPORT_FILES = [
    "mining_pre.json", "mining_post.json", "trace.json", "trace_layers.csv", "association.csv",
    "pca_passwords.csv", "edit_plan.json", "edit_receipt.json", "eval.json", "restoration.json",
    "sweep.csv", "sweep.json", "run_summary.json", "train_log.csv",
]


def emit_reports(run_dir) -> dict[str, Path]:
    """Paths of every emitted report in ``run_dir``; raises naming the stage of the first missing one."""
    run_dir = Path(run_dir)
    out = {}
    for name in REPORT_FILES:
        p = run_dir / name
        if not p.exists():
            owner = next((s for s, outs in STAGE_OUTPUTS.items() if name in outs), "mine-pre")
            raise DataError(f"missing report {name} (stage {owner!r})")
        out[name] = p
    return out
