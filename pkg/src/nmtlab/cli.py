"""Command-line driver for the full pipeline.

Stages read a line-oriented key=value config with section headers, write
their artifacts under --out, and append `stage=<s> in_hash=<h> out=<path>`
manifest lines. A stage reruns only when its input hash changes.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import logging
import os
import sys
from dataclasses import dataclass, field

from . import bpe as bpe_mod
from . import metrics, noise, plots
from .corpus import load_mono, load_parallel
from .nmt import (
    BASELINE,
    BeamConfig,
    IntegrationStrategy,
    build_model,
    train_nmt,
    translate_file,
)
from .pretrain import LrSchedule, train_masked_lm
from .transformer import (
    Checkpoint,
    average_params,
    load_checkpoint,
    preset_config,
    save_checkpoint,
    select_checkpoints_around_best,
)

log = logging.getLogger("nmtlab")


class UsageError(Exception):
    """Bad flags or config; exits with code 1."""


BPE_MERGE_PRESETS = {"bpe10k": 10000, "bpe32k": 32000}


def _parse_merges(value: str) -> int:
    if value in BPE_MERGE_PRESETS:
        return BPE_MERGE_PRESETS[value]
    try:
        return int(value)
    except ValueError:
        raise UsageError(
            f"bad merge count {value!r}: expected an integer or one of "
            f"{sorted(BPE_MERGE_PRESETS)}")


def _parse_noise_specs(raw: str, default_seed: int, unk_symbol: str) -> list[noise.NoiseSpec]:
    specs = []
    for i, item in enumerate(raw.replace(",", " ").split()):
        parts = item.split(":")
        kind = parts[0]
        rate = float(parts[1]) if len(parts) > 1 else 0.1
        seed = int(parts[2]) if len(parts) > 2 else default_seed + i
        specs.append(noise.NoiseSpec(kind=kind, rate=rate, seed=seed,
                                     unk_symbol=unk_symbol))
    return specs


@dataclass
class ExperimentConfig:
    """Everything one experiment needs, parsed from the config file."""

    name: str
    pretrain_corpus_id: str
    seed: int
    paths: dict[str, str]
    src_merges: int
    tgt_merges: int
    preset: str
    dec_layers_override: int | None
    max_positions: int
    strategy_kind: str
    finetune_bert: bool
    pretrain_opts: dict[str, float]
    train_opts: dict[str, float]
    beam: BeamConfig
    noise_specs: list[noise.NoiseSpec]
    raw_text: str = field(repr=False, default="")

    @property
    def experiment_id(self) -> str:
        parts = [self.pretrain_corpus_id, self.strategy_kind.upper(), self.preset]
        if self.dec_layers_override is not None:
            parts.append(f"dec{self.dec_layers_override}")
        named = {v: k[3:] for k, v in BPE_MERGE_PRESETS.items()}
        parts.append(f"bpe{named.get(self.src_merges, self.src_merges)}")
        return ".".join(parts)


def load_config(path, seed_override: int | None = None) -> ExperimentConfig:
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    parser.optionxform = str
    with open(path, encoding="utf-8") as f:
        raw_text = f.read()
    parser.read_string(raw_text)

    def get(section, key, default=None):
        if parser.has_option(section, key):
            value = parser.get(section, key).strip()
            if value:
                return value
        return default

    paths = dict(parser.items("paths")) if parser.has_section("paths") else {}
    base = os.path.dirname(os.path.abspath(path))
    paths = {k: os.path.join(base, v) for k, v in paths.items() if v.strip()}
    for key in ("train_src", "train_tgt", "test_src", "test_ref", "mono"):
        if key in paths and not os.path.exists(paths[key]):
            raise UsageError(f"config path {key}={paths[key]} does not exist")

    seed = seed_override if seed_override is not None else int(get("experiment", "seed", "1"))
    dec_override = get("model", "dec_layers")
    unk_symbol = get("noise", "unk_symbol", noise.DEFAULT_UNK_SYMBOL)
    specs_raw = get("noise", "specs", "chswap:0.1 chrand:0.1 up:0.1 unk_s unk_e")

    def opts(section, keys_defaults):
        return {k: float(get(section, k, d)) for k, d in keys_defaults.items()}

    cfg = ExperimentConfig(
        name=get("experiment", "name", "exp"),
        pretrain_corpus_id=get("experiment", "pretrain_corpus", "mono"),
        seed=seed,
        paths=paths,
        src_merges=_parse_merges(get("bpe", "src_merges", "100")),
        tgt_merges=_parse_merges(get("bpe", "tgt_merges", "100")),
        preset=get("model", "preset", "desk"),
        dec_layers_override=int(dec_override) if dec_override else None,
        max_positions=int(get("model", "max_positions", "512")),
        strategy_kind=get("strategy", "kind", BASELINE).lower(),
        finetune_bert=get("strategy", "finetune_bert", "true").lower() != "false",
        pretrain_opts=opts("pretrain", {
            "steps": "200", "warmup": "100", "token_budget": "4096",
            "max_len": "250", "mask_rate": "0.15", "eval_every": "50"}),
        train_opts=opts("train", {
            "steps": "400", "warmup": "200", "token_budget": "2048",
            "max_len": "250", "dropout_residual": "0.1",
            "label_smoothing": "0.1", "ckpt_every": "100", "average": "5"}),
        beam=BeamConfig(
            beam_size=int(get("beam", "size", "4")),
            length_penalty_alpha=float(get("beam", "alpha", "0.6")),
            max_output_len=int(get("beam", "max_len", "100"))),
        noise_specs=_parse_noise_specs(specs_raw, seed * 1000 + 7, unk_symbol),
        raw_text=raw_text,
    )
    if cfg.strategy_kind not in ("baseline", "emb", "ft", "freeze"):
        raise UsageError(f"bad strategy kind {cfg.strategy_kind!r}")
    return cfg


# ---------------------------------------------------------------------------
# Manifest-based stage caching
# ---------------------------------------------------------------------------


def _hash_inputs(*parts) -> str:
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, bytes):
            h.update(part)
        elif os.path.exists(str(part)):
            with open(part, "rb") as f:
                h.update(f.read())
        else:
            h.update(str(part).encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()[:16]


class Manifest:
    def __init__(self, out_dir):
        self.path = os.path.join(out_dir, "manifest.txt")
        self.entries: dict[str, tuple[str, list[str]]] = {}
        if os.path.exists(self.path):
            for line in open(self.path, encoding="utf-8"):
                fields = dict(kv.split("=", 1) for kv in line.strip().split(" "))
                stage, ih, out = fields["stage"], fields["in_hash"], fields["out"]
                if stage in self.entries and self.entries[stage][0] == ih:
                    self.entries[stage][1].append(out)
                else:
                    self.entries[stage] = (ih, [out])

    def run(self, stage: str, in_hash: str, outputs: list[str], builder) -> bool:
        """Run `builder` unless this stage already ran with the same inputs
        and its outputs still exist. Returns True when the cache was hit."""
        entry = self.entries.get(stage)
        if entry and entry[0] == in_hash and all(os.path.exists(o) for o in outputs):
            log.info("stage=%s cache hit (in_hash=%s)", stage, in_hash)
            return True
        builder()
        self.entries[stage] = (in_hash, list(outputs))
        self._rewrite()
        for out in outputs:
            print(f"stage={stage} in_hash={in_hash} out={out}")
        return False

    def _rewrite(self):
        with open(self.path, "w", encoding="utf-8") as f:
            for stage, (ih, outs) in self.entries.items():
                for out in outs:
                    f.write(f"stage={stage} in_hash={ih} out={out}\n")


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def _bpe_paths(out_dir):
    return {side: (os.path.join(out_dir, f"bpe.{side}.merges"),
                   os.path.join(out_dir, f"bpe.{side}.vocab"))
            for side in ("src", "tgt")}


def _src_bpe_corpus(cfg: ExperimentConfig) -> str:
    # Source-side BPE is learned on the pretraining corpus when one is
    # configured, so the pretrained encoder and the NMT source side share
    # one segmentation.
    return cfg.paths.get("mono") or cfg.paths["train_src"]


def stage_learn_bpe(cfg: ExperimentConfig, out_dir, manifest: Manifest):
    paths = _bpe_paths(out_dir)
    src_corpus = _src_bpe_corpus(cfg)
    tgt_corpus = cfg.paths["train_tgt"]
    outputs = [p for pair in paths.values() for p in pair]
    in_hash = _hash_inputs(src_corpus, tgt_corpus, cfg.src_merges, cfg.tgt_merges)

    def build():
        src_model = bpe_mod.learn_bpe(load_mono(src_corpus), cfg.src_merges)
        tgt_model = bpe_mod.learn_bpe(load_mono(tgt_corpus), cfg.tgt_merges)
        bpe_mod.save_model(src_model, *paths["src"])
        bpe_mod.save_model(tgt_model, *paths["tgt"])

    manifest.run("learn-bpe", in_hash, outputs, build)
    return paths


def _load_bpe(out_dir):
    paths = _bpe_paths(out_dir)
    return (bpe_mod.load_model(*paths["src"]), bpe_mod.load_model(*paths["tgt"]))


def stage_pretrain(cfg: ExperimentConfig, out_dir, manifest: Manifest):
    ckpt_path = os.path.join(out_dir, "bert.ckpt")
    log_path = os.path.join(out_dir, "pretrain.log")
    mono_path = _src_bpe_corpus(cfg)
    o = cfg.pretrain_opts
    in_hash = _hash_inputs(mono_path, *(p for pair in _bpe_paths(out_dir).values() for p in pair),
                           repr(sorted(o.items())), cfg.preset, cfg.max_positions, cfg.seed)

    def build():
        src_bpe, _ = _load_bpe(out_dir)
        config = preset_config(cfg.preset, src_vocab_size=src_bpe.vocab_size,
                               tgt_vocab_size=0, dec_layers=0,
                               max_positions=cfg.max_positions)
        schedule = LrSchedule(d_model=config.d_model, warmup_steps=int(o["warmup"]))
        ckpt = train_masked_lm(
            load_mono(mono_path), src_bpe, config, schedule,
            steps=int(o["steps"]), seed=cfg.seed, rate=o["mask_rate"],
            token_budget=int(o["token_budget"]), max_len=int(o["max_len"]),
            eval_every=int(o["eval_every"]), log_path=log_path)
        save_checkpoint(ckpt, ckpt_path)

    manifest.run("pretrain", in_hash, [ckpt_path, log_path], build)
    return ckpt_path


def _nmt_config(cfg: ExperimentConfig, src_vocab: int, tgt_vocab: int):
    overrides = {"max_positions": cfg.max_positions}
    if cfg.dec_layers_override is not None:
        overrides["dec_layers"] = cfg.dec_layers_override
    return preset_config(cfg.preset, src_vocab_size=src_vocab,
                         tgt_vocab_size=tgt_vocab, **overrides)


def stage_train(cfg: ExperimentConfig, out_dir, manifest: Manifest):
    model_path = os.path.join(out_dir, "model.ckpt")
    log_path = os.path.join(out_dir, "train.log")
    o = cfg.train_opts
    bert_path = os.path.join(out_dir, "bert.ckpt")
    bert_part = bert_path if cfg.strategy_kind != BASELINE else "no-bert"
    in_hash = _hash_inputs(cfg.paths["train_src"], cfg.paths["train_tgt"],
                           *(p for pair in _bpe_paths(out_dir).values() for p in pair),
                           bert_part, repr(sorted(o.items())), cfg.preset,
                           cfg.strategy_kind, cfg.finetune_bert,
                           cfg.dec_layers_override, cfg.seed)

    def build():
        src_bpe, tgt_bpe = _load_bpe(out_dir)
        pairs = load_parallel(cfg.paths["train_src"], cfg.paths["train_tgt"])
        dev_pairs = None
        if "dev_src" in cfg.paths and "dev_tgt" in cfg.paths:
            dev_pairs = load_parallel(cfg.paths["dev_src"], cfg.paths["dev_tgt"])
        bert_ckpt = None
        if cfg.strategy_kind != BASELINE:
            bert_ckpt = load_checkpoint(bert_path)
        strategy = IntegrationStrategy(kind=cfg.strategy_kind,
                                       bert_checkpoint=bert_ckpt,
                                       finetune_bert=cfg.finetune_bert)
        nmt_config = _nmt_config(cfg, src_bpe.vocab_size, tgt_bpe.vocab_size)
        model = build_model(strategy, nmt_config, seed=cfg.seed)
        schedule = LrSchedule(d_model=model.config.d_model,
                              warmup_steps=int(o["warmup"]))
        ckpts = train_nmt(
            model, pairs, src_bpe, tgt_bpe, schedule,
            token_budget=int(o["token_budget"]), steps=int(o["steps"]),
            seed=cfg.seed, dropout_residual=o["dropout_residual"],
            max_len=int(o["max_len"]), dev_pairs=dev_pairs,
            ckpt_every=int(o["ckpt_every"]),
            label_smoothing=o["label_smoothing"], log_path=log_path)
        window = select_checkpoints_around_best(ckpts, int(o["average"]))
        averaged = average_params([c.params for c in window])
        best = min(ckpts, key=lambda c: (c.dev_perplexity, c.step))
        save_checkpoint(Checkpoint(config=model.config, params=averaged,
                                   step=best.step,
                                   dev_perplexity=best.dev_perplexity),
                        model_path)

    manifest.run("train", in_hash, [model_path, log_path], build)
    return model_path


def noise_paths(cfg: ExperimentConfig, out_dir) -> dict[str, list[str]]:
    noise_dir = os.path.join(out_dir, "noise")
    return {
        spec.kind: [os.path.join(noise_dir, f"{cfg.name}.{spec.kind}.{ext}")
                    for ext in ("src", "ref", "meta")]
        for spec in cfg.noise_specs
    }


def hyp_paths(cfg: ExperimentConfig, out_dir) -> dict[str, str]:
    hyp_dir = os.path.join(out_dir, "hyp")
    tags = ["clean"] + [spec.kind for spec in cfg.noise_specs]
    return {tag: os.path.join(hyp_dir, f"{cfg.name}.{tag}.hyp") for tag in tags}


def report_paths(cfg: ExperimentConfig, out_dir) -> dict[str, str]:
    report_dir = os.path.join(out_dir, "reports")
    return {spec.kind: os.path.join(report_dir, f"{cfg.name}.{spec.kind}.report")
            for spec in cfg.noise_specs}


def stage_noisify(cfg: ExperimentConfig, out_dir, manifest: Manifest):
    noise_dir = os.path.join(out_dir, "noise")
    os.makedirs(noise_dir, exist_ok=True)
    produced = noise_paths(cfg, out_dir)
    for spec in cfg.noise_specs:
        in_hash = _hash_inputs(cfg.paths["test_src"], cfg.paths["test_ref"],
                               spec.kind, spec.rate, spec.seed, spec.unk_symbol)

        def build(spec=spec):
            src_bpe, tgt_bpe = _load_bpe(out_dir)
            pairs = load_parallel(cfg.paths["test_src"], cfg.paths["test_ref"])
            noisy = noise.noisify(pairs, spec, src_bpe, tgt_bpe,
                                  source_name=cfg.name)
            noise.write_test_set(noisy, noise_dir, cfg.name)

        manifest.run(f"noisify.{spec.kind}", in_hash, produced[spec.kind], build)
    return produced


def _threads() -> int:
    raw = os.environ.get("NMTLAB_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"NMTLAB_THREADS must be an integer, got {raw!r}")


def stage_translate(cfg: ExperimentConfig, out_dir, manifest: Manifest):
    """Translate the clean test set plus each noisy variant."""
    os.makedirs(os.path.join(out_dir, "hyp"), exist_ok=True)
    model_path = os.path.join(out_dir, "model.ckpt")
    inputs = {"clean": cfg.paths["test_src"]}
    for kind, (src_path, _ref, _meta) in noise_paths(cfg, out_dir).items():
        inputs[kind] = src_path
    hyps = hyp_paths(cfg, out_dir)
    for tag, in_path in inputs.items():
        out_path = hyps[tag]
        in_hash = _hash_inputs(model_path, in_path, cfg.beam.beam_size,
                               cfg.beam.length_penalty_alpha,
                               cfg.beam.max_output_len)

        def build(in_path=in_path, out_path=out_path):
            src_bpe, tgt_bpe = _load_bpe(out_dir)
            ckpt = load_checkpoint(model_path)
            translate_file(ckpt, src_bpe, tgt_bpe, cfg.beam, in_path, out_path,
                           threads=_threads())

        manifest.run(f"translate.{tag}", in_hash, [out_path], build)
    return hyps


def _render_report(report: metrics.EvalReport, report_path):
    metrics.write_report(report, report_path)
    plots.plot_delta_histogram(report, str(report_path) + ".png")


def stage_evaluate(cfg: ExperimentConfig, out_dir, manifest: Manifest):
    os.makedirs(os.path.join(out_dir, "reports"), exist_ok=True)
    hyps = hyp_paths(cfg, out_dir)
    refs = noise_paths(cfg, out_dir)
    reports = report_paths(cfg, out_dir)
    for spec in cfg.noise_specs:
        kind = spec.kind
        ref_path = refs[kind][1]
        report_path = reports[kind]
        in_hash = _hash_inputs(hyps["clean"], hyps[kind], ref_path,
                               spec.kind, spec.rate, spec.seed)

        def build(spec=spec, kind=kind, ref_path=ref_path, report_path=report_path):
            report = metrics.evaluate(
                model=cfg.experiment_id, noise_kind=kind, noise_rate=spec.rate,
                noise_seed=spec.seed, test_set=cfg.name,
                clean_hyps=load_lines(hyps["clean"]),
                noisy_hyps=load_lines(hyps[kind]),
                references=load_lines(ref_path))
            _render_report(report, report_path)

        manifest.run(f"evaluate.{kind}", in_hash,
                     [report_path, report_path + ".png"], build)
    return list(reports.values())


def load_lines(path) -> list[str]:
    with open(path, encoding="utf-8") as f:
        return [ln.rstrip("\n") for ln in f]


def stage_report(out_dir, report_paths: list[str], manifest: Manifest):
    summary_path = os.path.join(out_dir, "summary.tsv")
    figure_path = os.path.join(out_dir, "mean_delta_chrf.png")
    in_hash = _hash_inputs(*report_paths)

    def build():
        reports = [metrics.read_report(p) for p in report_paths]
        with open(summary_path, "w", encoding="utf-8") as f:
            f.write("model\ttest_set\tnoise_kind\trate\tseed\tcorpus_bleu"
                    "\tmean_delta_chrf\tzero_deltas\tsentences\n")
            for r in reports:
                f.write(f"{r.model}\t{r.test_set}\t{r.noise_kind}\t{r.noise_rate}"
                        f"\t{r.noise_seed}\t{r.corpus_bleu:.2f}"
                        f"\t{r.mean_delta_chrf:.3f}\t{r.delta_zero_count}"
                        f"\t{len(r.records)}\n")
        plots.plot_mean_deltas(reports, figure_path)

    manifest.run("report", in_hash, [summary_path, figure_path], build)
    return summary_path


# ---------------------------------------------------------------------------
# Command wiring
# ---------------------------------------------------------------------------

PIPELINE_STAGES = ("learn-bpe", "pretrain", "train", "noisify", "translate",
                   "evaluate", "report")


def write_config_echo(cfg: ExperimentConfig, out_dir) -> str:
    """Copy the exact experiment inputs (config text, seed, id, hash) into the
    output directory so every artifact is reproducible from it alone."""
    path = os.path.join(out_dir, "config.echo")
    body = (f"# experiment_id={cfg.experiment_id}\n"
            f"# seed={cfg.seed}\n"
            f"# config_hash={_hash_inputs(cfg.raw_text.encode('utf-8'), cfg.seed)}\n"
            + cfg.raw_text)
    with open(path, "w", encoding="utf-8") as f:
        f.write(body)
    return path


def run_pipeline(cfg: ExperimentConfig, out_dir, only_stage: str | None = None):
    os.makedirs(out_dir, exist_ok=True)
    write_config_echo(cfg, out_dir)
    manifest = Manifest(out_dir)

    def want(stage):
        return only_stage is None or only_stage == stage

    if want("learn-bpe"):
        stage_learn_bpe(cfg, out_dir, manifest)
    if want("pretrain") and cfg.strategy_kind != BASELINE:
        stage_pretrain(cfg, out_dir, manifest)
    if want("train"):
        stage_train(cfg, out_dir, manifest)
    if want("noisify"):
        stage_noisify(cfg, out_dir, manifest)
    if want("translate"):
        stage_translate(cfg, out_dir, manifest)
    if want("evaluate"):
        stage_evaluate(cfg, out_dir, manifest)
    if want("report"):
        stage_report(out_dir, list(report_paths(cfg, out_dir).values()), manifest)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nmtlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment config file")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override experiment seed")

    for name in ("learn-bpe", "pretrain", "train", "noisify"):
        common(sub.add_parser(name))

    p = sub.add_parser("translate")
    common(p)
    p.add_argument("--ckpt", help="checkpoint path (default <out>/model.ckpt)")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)

    p = sub.add_parser("evaluate")
    common(p)
    p.add_argument("--clean-hyp", required=True)
    p.add_argument("--noisy-hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--label", default="manual", help="model label for the report")
    p.add_argument("--test-set", default="testset")
    p.add_argument("--noise-kind", default="chswap")
    p.add_argument("--noise-rate", type=float, default=0.0)
    p.add_argument("--noise-seed", type=int, default=0)
    p.add_argument("--report", help="report path (default <out>/reports/manual.report)")

    p = sub.add_parser("report")
    common(p)
    p.add_argument("--reports", nargs="*", help="report files (default <out>/reports/*.report)")

    p = sub.add_parser("pipeline")
    common(p)
    p.add_argument("--stage", choices=PIPELINE_STAGES, default=None,
                   help="run a single stage instead of all of them")
    return parser


def _dispatch(args) -> int:
    if args.command == "evaluate":
        out_dir = args.out
        os.makedirs(os.path.join(out_dir, "reports"), exist_ok=True)
        report = metrics.evaluate(
            model=args.label, noise_kind=args.noise_kind,
            noise_rate=args.noise_rate, noise_seed=args.noise_seed,
            test_set=args.test_set,
            clean_hyps=load_lines(args.clean_hyp),
            noisy_hyps=load_lines(args.noisy_hyp),
            references=load_lines(args.ref))
        report_path = args.report or os.path.join(out_dir, "reports",
                                                  f"{args.label}.report")
        _render_report(report, report_path)
        print(f"corpus_bleu={report.corpus_bleu:.2f} "
              f"mean_delta_chrf={report.mean_delta_chrf:.4f} out={report_path}")
        return 0

    if args.command == "report":
        out_dir = args.out
        paths = args.reports
        if not paths:
            report_dir = os.path.join(out_dir, "reports")
            paths = sorted(
                os.path.join(report_dir, f) for f in os.listdir(report_dir)
                if f.endswith(".report")) if os.path.isdir(report_dir) else []
        if not paths:
            raise UsageError("no report files found; pass --reports or run evaluate first")
        manifest = Manifest(out_dir)
        summary = stage_report(out_dir, list(paths), manifest)
        print(f"summary={summary}")
        return 0

    if not args.config:
        raise UsageError(f"{args.command} requires --config")
    cfg = load_config(args.config, seed_override=args.seed)
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    write_config_echo(cfg, out_dir)
    manifest = Manifest(out_dir)

    if args.command == "learn-bpe":
        stage_learn_bpe(cfg, out_dir, manifest)
    elif args.command == "pretrain":
        stage_learn_bpe(cfg, out_dir, manifest)
        stage_pretrain(cfg, out_dir, manifest)
    elif args.command == "train":
        stage_learn_bpe(cfg, out_dir, manifest)
        if cfg.strategy_kind != BASELINE:
            stage_pretrain(cfg, out_dir, manifest)
        stage_train(cfg, out_dir, manifest)
    elif args.command == "noisify":
        stage_learn_bpe(cfg, out_dir, manifest)
        stage_noisify(cfg, out_dir, manifest)
    elif args.command == "translate":
        src_bpe, tgt_bpe = _load_bpe(out_dir)
        ckpt = load_checkpoint(args.ckpt or os.path.join(out_dir, "model.ckpt"))
        stats = translate_file(ckpt, src_bpe, tgt_bpe, cfg.beam,
                               args.input, args.output, threads=_threads())
        print(f"sentences={stats['sentences']} tokens={stats['tokens']} "
              f"sec={stats['sec']:.3f}")
    elif args.command == "pipeline":
        run_pipeline(cfg, out_dir, only_stage=args.stage)
    else:
        raise UsageError(f"unknown command {args.command!r}")
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    try:
        return _dispatch(args)
    except UsageError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
