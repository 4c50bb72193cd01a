"""Training loops, evaluation runs, and comparison reports.

The training loop iterates shuffled trunks, computes the configured
objective, injects its analytic logit gradient into the model's backward
pass, and Adam-steps.  Validation cross-entropy is recorded on a fixed
interval and the checkpoint with the lowest value is kept (ties go to the
earliest step).  The ``ul-ts`` schedule adds a sequence-level unlikelihood
term on greedy-decoded continuations after its switch step.

Everything is deterministic given the config and seed: two identical runs
produce byte-identical manifests and metrics reports.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import metrics as metrics_mod
from .corpus import PAD_ID, Corpus, EvalInstance, flatten, make_eval_instances
from .decoding import DecodeConfig, decode
from .exceptions import ConfigError, InputError, TrainingError
from .losses import LossConfig, sequence_loss, ul_seq_loss
from .model import (
    AdamConfig,
    AdamState,
    ModelConfig,
    ModelState,
    adam_step,
    backward,
    clip_grads_,
    forward,
    init_state,
    save_checkpoint,
)
from .negatives import repeated_ngram_candidates
from .version import __version__

ENV_OUT_DIR = "CTLM_OUT_DIR"


def default_out_dir() -> str:
    return os.environ.get(ENV_OUT_DIR, "runs")


@dataclass
class TrainConfig:
    objective: str = "ce"
    total_steps: int = 2000
    warmup_steps: int | None = None  # default: 6% of total_steps
    eval_interval: int | None = None  # default: total_steps // 50
    ul_s_switch_step: int | None = None  # default: 97% of total_steps
    trunk_length: int = 128
    batch_size: int = 8
    seed: int = 0
    learning_rate: float = 1e-4
    clip_norm: float = 1.0
    negative_window: int | None = None  # default: trunk_length / 8
    ct_crop_length: int | None = None  # default: trunk_length / 4
    ul_seq_ngram: int = 4
    ul_ts_reduced_lr: bool = False  # train ul-ts at lr/10
    ul_s_prefix_len: int = 50
    ul_s_gen_len: int = 100

    def resolved_warmup(self) -> int:
        if self.warmup_steps is not None:
            return self.warmup_steps
        return max(1, round(0.06 * self.total_steps))

    def resolved_eval_interval(self) -> int:
        if self.eval_interval is not None:
            return self.eval_interval
        return max(1, self.total_steps // 50)

    def resolved_switch_step(self) -> int:
        if self.ul_s_switch_step is not None:
            return self.ul_s_switch_step
        return int(0.97 * self.total_steps)

    def resolved_negative_window(self) -> int:
        if self.negative_window is not None:
            return self.negative_window
        return max(1, round(self.trunk_length / 8))

    def resolved_ct_crop(self) -> int:
        if self.ct_crop_length is not None:
            return self.ct_crop_length
        return max(1, round(self.trunk_length / 4))

    def loss_config(self) -> LossConfig:
        return LossConfig(
            objective=self.objective,
            ct_crop_length=self.resolved_ct_crop(),
            negative_window=self.resolved_negative_window(),
            ul_seq_ngram=self.ul_seq_ngram,
        ).validate()

    def validate(self):
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.trunk_length < 2:
            raise ConfigError("trunk_length must be >= 2")
        if self.resolved_eval_interval() > self.total_steps:
            raise ConfigError("eval_interval must not exceed total_steps")
        if self.resolved_ct_crop() > self.trunk_length:
            raise ConfigError("ct_crop_length must not exceed trunk_length")
        if self.objective == "ul-ts" and not 0 < self.resolved_switch_step() < self.total_steps:
            raise ConfigError("ul_s_switch_step must lie strictly inside the run")
        self.loss_config()
        return self


def thread_count() -> int:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        if os.environ.get(var):
            return int(os.environ[var])
    return os.cpu_count() or 1


def _pad_batch(trunks: list[list[int]]):
    """Shift each trunk into (inputs, labels) and right-pad to a batch."""
    width = max(len(t) for t in trunks) - 1
    b = len(trunks)
    inputs = np.full((b, width), PAD_ID, dtype=np.int64)
    labels = np.full((b, width), PAD_ID, dtype=np.int64)
    mask = np.zeros((b, width), dtype=bool)
    for i, t in enumerate(trunks):
        n = len(t) - 1
        inputs[i, :n] = t[:-1]
        labels[i, :n] = t[1:]
        mask[i, :n] = True
    return inputs, labels, mask


def _batch_stream(trunks, batch_size, rng):
    """Yield shuffled batches forever, reshuffling every epoch."""
    order = np.arange(len(trunks))
    batch_size = min(batch_size, len(trunks))
    while True:
        rng.shuffle(order)
        for i in range(0, len(order) - batch_size + 1, batch_size):
            yield [trunks[j] for j in order[i : i + batch_size]]


def validation_ce(state: ModelState, trunks, batch_size: int) -> float:
    """Pooled mean cross-entropy over a whole split."""
    cfg = LossConfig(objective="ce")
    total, count = 0.0, 0
    for i in range(0, len(trunks), batch_size):
        inputs, labels, mask = _pad_batch(trunks[i : i + batch_size])
        _, logits = forward(state, inputs)
        report, _ = sequence_loss(logits, labels, mask, cfg, with_grad=False)
        total += report.ce_component * report.tokens_counted
        count += report.tokens_counted
    if count == 0:
        raise InputError("validation split is empty")
    return total / count


def _ul_s_pass(state, trunk, prefix_len, gen_len, ngram):
    """Sequence-level unlikelihood on a greedy continuation of a batch prefix.

    Returns (loss, grads) or None when the trunk is too short to prompt.
    """
    if len(trunk) <= prefix_len:
        return None
    prefix = [int(x) for x in trunk[:prefix_len]]
    room = state.config.max_positions - prefix_len
    cont_len = min(gen_len, room)
    if cont_len < ngram:
        return None
    cont = decode(
        state, prefix, DecodeConfig(strategy="greedy", max_new_tokens=cont_len)
    ).ids
    full = prefix + cont
    flags_full = repeated_ngram_candidates(full, ngram)
    labels = np.asarray(full[1:])[None, :]
    flags = np.asarray(flags_full[1:])[None, :]
    flags[:, : prefix_len - 1] = False  # only decoded positions are penalised
    _, logits, cache = forward(state, np.asarray(full[:-1])[None, :], collect_cache=True)
    loss, dz = ul_seq_loss(logits, labels, flags)
    if loss == 0.0:
        return 0.0, None
    return loss, backward(state, cache, dz)


def train(
    train_cfg: TrainConfig,
    model_cfg: ModelConfig,
    corpus: Corpus,
    out_dir,
    adam_cfg: AdamConfig | None = None,
) -> dict:
    """Train a model on the corpus; returns the run manifest.

    Writes ``best.ckpt`` (lowest validation cross-entropy), ``last.ckpt``,
    and ``manifest.json`` into ``out_dir``.
    """
    train_cfg.validate()
    model_cfg.validate()
    if not corpus.train or not corpus.valid:
        raise InputError("train and valid splits must be non-empty")
    if model_cfg.max_positions < train_cfg.trunk_length:
        raise ConfigError("model max_positions must cover the training trunk length")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lr = train_cfg.learning_rate
    if train_cfg.objective == "ul-ts" and train_cfg.ul_ts_reduced_lr:
        lr /= 10.0
    if adam_cfg is None:
        adam_cfg = AdamConfig(
            learning_rate=lr,
            warmup_steps=train_cfg.resolved_warmup(),
            total_steps=train_cfg.total_steps,
            clip_norm=train_cfg.clip_norm,
        )
    adam_cfg.validate()
    loss_cfg = train_cfg.loss_config()
    switch_step = train_cfg.resolved_switch_step() if train_cfg.objective == "ul-ts" else None

    state = init_state(model_cfg)
    opt = AdamState()
    rng = np.random.default_rng(train_cfg.seed)
    batches = _batch_stream(corpus.train, train_cfg.batch_size, rng)
    eval_interval = train_cfg.resolved_eval_interval()

    val_records: list[list] = []
    loss_log: list[list] = []
    best_ce = math.inf
    best_step = -1

    def record_eval(step: int):
        nonlocal best_ce, best_step
        ce = validation_ce(state, corpus.valid, train_cfg.batch_size)
        val_records.append([step, ce])
        if ce < best_ce:
            best_ce = ce
            best_step = step
            save_checkpoint(state, out / "best.ckpt")

    record_eval(0)
    for step in range(1, train_cfg.total_steps + 1):
        batch = next(batches)
        inputs, labels, mask = _pad_batch(batch)
        dropout_rng = rng if model_cfg.dropout > 0 else None
        _, logits, cache = forward(state, inputs, collect_cache=True, rng=dropout_rng)
        report, dz = sequence_loss(logits, labels, mask, loss_cfg)
        if not math.isfinite(report.total):
            raise TrainingError(f"non-finite loss {report.total} at step {step}")
        grads = backward(state, cache, dz)

        ul_s_component = 0.0
        if switch_step is not None and step > switch_step:
            extra = _ul_s_pass(
                state,
                batch[0],
                train_cfg.ul_s_prefix_len,
                train_cfg.ul_s_gen_len,
                train_cfg.ul_seq_ngram,
            )
            if extra is not None:
                ul_s_component, extra_grads = extra
                if extra_grads is not None:
                    for name, g in extra_grads.items():
                        grads[name] += g

        clip_grads_(grads, adam_cfg.clip_norm)
        adam_step(state, opt, grads, adam_cfg, step)

        if step % eval_interval == 0 or step == train_cfg.total_steps:
            record_eval(step)
            loss_log.append(
                [step, report.total + ul_s_component, report.ce_component,
                 report.aux_component, ul_s_component]
            )

    save_checkpoint(state, out / "last.ckpt")
    manifest = {
        "code_version": __version__,
        "seed": train_cfg.seed,
        "thread_count": thread_count(),
        "config": {
            "train": asdict(train_cfg),
            "model": asdict(model_cfg),
            "adam": asdict(adam_cfg),
            "loss": asdict(loss_cfg),
        },
        "objective_switch_step": switch_step,
        "validation_ce": val_records,
        "loss_log": loss_log,
        "selected_step": best_step,
        "selected_validation_ce": best_ce,
        "checkpoints": {"best": str(out / "best.ckpt"), "last": str(out / "last.ckpt")},
    }
    write_json(out / "manifest.json", manifest)
    return manifest


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class EvalConfig:
    prefix_len: int = 50
    cont_len: int = 100
    ppl_window: int | None = None  # default: the corpus trunk length
    ppl_s_window: int = 50
    heatmap_instances: int = 10
    histogram_bins: int = 5
    max_instances: int | None = None


def _repetition_block(continuations, bins: int) -> dict:
    micro = {f"rep_{n}": metrics_mod.micro_rep_n(continuations, n) for n in range(1, 5)}
    per_inst = {n: [metrics_mod.rep_n(c, n) for c in continuations] for n in (1, 4)}
    return {
        **micro,
        "dist_1": metrics_mod.dist_1(continuations),
        "uniq_1": metrics_mod.uniq_1(continuations),
        "histogram_rep_1": metrics_mod.histogram(per_inst[1], bins),
        "histogram_rep_4": metrics_mod.histogram(per_inst[4], bins),
    }


def evaluate(
    state: ModelState,
    corpus: Corpus,
    decode_cfg: DecodeConfig,
    eval_cfg: EvalConfig | None = None,
) -> dict:
    """Decode every test instance and assemble the full metrics report."""
    eval_cfg = eval_cfg or EvalConfig()
    decode_cfg.validate()
    instances = make_eval_instances(
        flatten(corpus.test), eval_cfg.prefix_len, eval_cfg.cont_len
    )
    if eval_cfg.max_instances is not None:
        instances = instances[: eval_cfg.max_instances]
    if not instances:
        raise InputError("no evaluation instances: test split too short")

    rng = np.random.default_rng(decode_cfg.seed)
    results = [decode(state, inst.prefix, decode_cfg, rng) for inst in instances]
    continuations = [metrics_mod.strip_specials(r.ids) for r in results]

    heat = metrics_mod.mean_heatmaps(
        prob_heatmap_for(state, inst, r)
        for inst, r in zip(instances, results[: eval_cfg.heatmap_instances])
    )
    report = {
        "n_instances": len(instances),
        "decode": asdict(decode_cfg),
        "ban_fallbacks": int(sum(r.ban_fallbacks for r in results)),
        **_repetition_block(continuations, eval_cfg.histogram_bins),
        "ppl": metrics_mod.perplexity(
            state, corpus.test, eval_cfg.ppl_window or corpus.trunk_length
        ),
        "ppl_s": metrics_mod.perplexity(state, [flatten(corpus.test)], eval_cfg.ppl_s_window),
        "heatmap_mean": _listify(heat),
    }
    return report


def prob_heatmap_for(state: ModelState, instance: EvalInstance, result) -> np.ndarray:
    return metrics_mod.prob_heatmap(state, result.ids, prefix=instance.prefix)


def reference_report(corpus: Corpus, eval_cfg: EvalConfig | None = None) -> dict:
    """Metrics over the human reference continuations (no model involved)."""
    eval_cfg = eval_cfg or EvalConfig()
    instances = make_eval_instances(
        flatten(corpus.test), eval_cfg.prefix_len, eval_cfg.cont_len
    )
    if eval_cfg.max_instances is not None:
        instances = instances[: eval_cfg.max_instances]
    if not instances:
        raise InputError("no evaluation instances: test split too short")
    refs = [metrics_mod.strip_specials(i.reference_continuation) for i in instances]
    return {"n_instances": len(instances), **_repetition_block(refs, eval_cfg.histogram_bins)}


# ---------------------------------------------------------------------------
# Comparison reports

_COLUMNS = (
    ("ppl", "min"),
    ("ppl_s", "min"),
    ("rep_1", "min"),
    ("rep_2", "min"),
    ("rep_3", "min"),
    ("rep_4", "min"),
    ("dist_1", "max"),
    ("uniq_1", "max"),
)


def comparison_table(named_reports: list[tuple[str, dict]]) -> tuple[str, str]:
    """Render method-by-metric tables; returns (text, csv).

    The best value per column is starred, respecting each metric's
    direction; missing metrics render as ``--``.
    """
    if not named_reports:
        raise InputError("no reports to compare")
    best: dict[str, float] = {}
    for key, direction in _COLUMNS:
        vals = [r.get(key) for _, r in named_reports if r.get(key) is not None]
        if vals:
            best[key] = min(vals) if direction == "min" else max(vals)

    def fmt(value, key):
        if value is None:
            return "--"
        text = f"{value:d}" if isinstance(value, int) else f"{value:.4f}"
        if key in best and value == best[key]:
            text += "*"
        return text

    header = ["method"] + [k for k, _ in _COLUMNS]
    rows = [[name] + [fmt(r.get(k), k) for k, _ in _COLUMNS] for name, r in named_reports]
    widths = [max(len(row[i]) for row in [header] + rows) for i in range(len(header))]
    lines = [
        "  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row))
        for row in [header] + rows
    ]
    text = "\n".join(lines) + "\n"

    csv_lines = [",".join(header)]
    for name, r in named_reports:
        cells = [name] + [("" if r.get(k) is None else repr(r.get(k))) for k, _ in _COLUMNS]
        csv_lines.append(",".join(cells))
    return text, "\n".join(csv_lines) + "\n"


# ---------------------------------------------------------------------------
# Serialisation helpers


def _listify(obj):
    """Convert numpy containers to JSON-safe nested lists (NaN becomes None)."""
    if isinstance(obj, np.ndarray):
        return [_listify(x) for x in obj.tolist()]
    if isinstance(obj, list):
        return [_listify(x) for x in obj]
    if isinstance(obj, float) and math.isnan(obj):
        return None
    return obj


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return _listify(obj)
    raise TypeError(f"not JSON serialisable: {type(obj)}")


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True, default=_json_default)
        f.write("\n")
