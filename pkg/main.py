#!/usr/bin/env python
# -*- coding: utf-8 -*-

import argparse
import sys
import time
from pathlib import Path

import numpy as np
from rich.console import Console
from rich.progress import BarColumn, Progress, TextColumn, TimeElapsedColumn, TimeRemainingColumn
from rich.table import Table

from src import setup_logging
from src.adapters import Vocabulary
from src.backbone import ActionLLM, count_params, count_params_by_group
from src.backends import get_backend
from src.config import (
    CMIB_MODES, DATASET_PRESETS, QUERY_INITS, REFERENCE_FROZEN, REFERENCE_LEARNABLE, SWEEP_AXES,
    ModelConfig, RunConfig,
)
from src.datapipe import (
    ObservationSpec, SynthGrammar, load_split_root, sample_observation, synth_corpus, synth_names, write_split,
)
from src.errors import ActionLLMError, ConsistencyError, InputError
from src.evalkit import GridJob, emit_timeline, evaluate_grid, score_video
from src.objective import build_targets, total_loss, total_loss_backward
from src.tensorkit import grad_check, precision
from src.trainer import ActionTrainer, sweep
from src.utils import format_count, format_seconds, load_checkpoint, restore_model

console = Console()

GRADCHECK_TOLERANCE = 1e-4

# flag -> config key, for flags that map one-to-one
_FLAG_KEYS = {
    "queries": "num_queries",
    "cmib_dim": "cmib_dim",
    "tune_dim": "tune_dim",
    "noise_p": "noise_p",
    "loss_mean": "loss_mean",
    "shared_projections": "shared_projections",
    "shared_past_head": "shared_past_head",
    "tuning_residual": "tuning_residual",
    "freeze_audit": "freeze_audit",
    "cmib_mode": "cmib_mode",
    "loss_terms": "loss_terms",
    "query_init": "query_init",
    "query_const": "query_const",
    "use_predicted": "use_predicted",
    "backend": "backend",
    "workers": "workers",
    "epochs": "epochs",
    "data_root": "data_root",
    "output_dir": "output_dir",
    "alpha": "eval_alphas",
    "beta": "eval_betas",
}


def parse_arguments(argv=None):
    """解析命令行参数"""
    parser = argparse.ArgumentParser(description='ActionLLM: 长期动作预测')
    sub = parser.add_subparsers(dest='command', required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', default=None, help='key=value 配置文件')
    common.add_argument('--preset', default=None, choices=sorted(DATASET_PRESETS), help='数据集预设')
    common.add_argument('--data-root', dest='data_root', default=None, help='数据集根目录')
    common.add_argument('--output-dir', dest='output_dir', default=None, help='输出目录')
    common.add_argument('--seed', type=int, default=None, help='随机种子 (训练与初始化)')
    common.add_argument('--log-level', dest='log_level', default='INFO', help='日志级别')

    # 模型参数
    common.add_argument('--queries', type=int, default=None, help='动作查询数 N')
    common.add_argument('--cmib-dim', dest='cmib_dim', type=int, default=None, help='CMIB 宽度 d_c')
    common.add_argument('--tune-dim', dest='tune_dim', type=int, default=None, help='action tuning 瓶颈宽度 L_MA')
    common.add_argument('--cmib-mode', dest='cmib_mode', default=None, choices=CMIB_MODES, help='CMIB 变体')
    common.add_argument('--query-init', dest='query_init', default=None, choices=QUERY_INITS, help='查询初始化')
    common.add_argument('--query-const', dest='query_const', type=float, default=None, help='常数查询初始化值')
    for flag, help_text in (
        ('--shared-projections', '三个模态共享上下投影'),
        ('--shared-past-head', '文本与视觉共享过去分类头'),
        ('--tuning-residual', 'action tuning 残差连接'),
    ):
        common.add_argument(flag, action='store_const', const=True, default=None, help=help_text)
    common.add_argument('--no-text', dest='no_text', action='store_true', help='关闭文本流')

    # 训练参数
    common.add_argument('--epochs', type=int, default=None, help='训练轮数')
    common.add_argument('--noise-p', dest='noise_p', type=float, default=None, help='文本标签噪声概率')
    common.add_argument('--loss-mean', dest='loss_mean', action='store_const', const=True, default=None,
                        help='按位置平均损失')
    common.add_argument('--loss-terms', dest='loss_terms', default=None, help='损失项子集, 例如 T,V,A,D')
    common.add_argument('--use-predicted', dest='use_predicted', action='store_const', const=True, default=None,
                        help='文本流读取 predicted/ 标签')
    common.add_argument('--freeze-audit', dest='freeze_audit', action='store_const', const=True, default=None,
                        help='训练后检查冻结参数未变')

    # 评估参数
    common.add_argument('--alpha', type=float, nargs='+', default=None, help='观察比例')
    common.add_argument('--beta', type=float, nargs='+', default=None, help='预测比例')
    common.add_argument('--backend', default=None, choices=['auto', 'cpu', 'serial'], help='评估后端')
    common.add_argument('--workers', type=int, default=None, help='评估进程数')
    common.add_argument('--checkpoint', default=None, help='检查点文件路径')

    sub.add_parser('train', parents=[common], help='训练模型')
    sub.add_parser('eval', parents=[common], help='在 α x β 网格上评估')
    p = sub.add_parser('predict', parents=[common], help='单个视频的预测时间线')
    p.add_argument('--video', required=True, help='视频 id')
    sub.add_parser('gradcheck', parents=[common], help='有限差分梯度检查')
    sub.add_parser('synth', parents=[common], help='生成合成数据集')
    p = sub.add_parser('sweep', parents=[common], help='超参数扫描')
    p.add_argument('--axis', required=True, help='N, d_c 或 L_MA')
    p.add_argument('--values', required=True, type=int, nargs='+', help='扫描取值')
    sub.add_parser('params', parents=[common], help='参数统计')

    return parser.parse_args(argv)


def build_config(args):
    """preset < config file < command line"""
    if args.config:
        config = RunConfig.from_file(args.config, preset=args.preset)
    else:
        config = RunConfig.from_preset(args.preset or 'synthetic')
    values = {}
    for flag, key in _FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            values[key] = value
    if args.seed is not None:
        values['seed'] = args.seed
        values['init_seed'] = args.seed
    if args.no_text:
        values['use_text'] = False
    config.update(values, source='command line')
    return config


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def synthesize(config):
    """Write the seeded synthetic corpus (train + test splits) under ``config.data_root``."""
    grammar = SynthGrammar.generate(config.model.num_classes, seed=config.seed)
    vocab = grammar.vocabulary(config.model.token_buckets)
    frames = (config.synth_min_frames, config.synth_max_frames)
    dim = config.model.feature_dim
    noise, partial = config.synth_feature_noise, config.synth_partial_start
    train = synth_corpus(grammar, config.synth_train_videos, frames, dim, noise, 'train', 0, partial)
    test = synth_corpus(grammar, config.synth_test_videos, frames, dim, noise, 'test', config.synth_train_videos, partial)
    root = write_split(config.data_root, vocab, {config.train_split: train, config.eval_split: test})
    return root, vocab, len(train), len(test)


def load_data(config, split):
    root = Path(config.data_root)
    if not (root / 'mapping.txt').exists():
        if config.preset != 'synthetic':
            raise InputError(f"dataset root {root} has no mapping.txt")
        console.print(f"[yellow]{root} 不存在, 生成合成数据集[/yellow]")
        synthesize(config)
    vocab, records = load_split_root(root, split, config.model.token_buckets)
    if not records:
        raise InputError(f"split {split!r} under {root} lists no videos")
    # the data decides K and L_D
    config.model.num_classes = vocab.num_classes
    config.model.feature_dim = int(records[0].features.shape[1])
    return vocab, records


def load_model(config, vocab, path):
    path = Path(path)
    checkpoint = load_checkpoint(path, expected_fingerprint=config.model.fingerprint())
    if list(checkpoint.class_names) != list(vocab.names):
        raise ConsistencyError(f"{path}: checkpoint classes differ from the dataset mapping")
    return restore_model(checkpoint, config.model.token_buckets), path


def default_checkpoint(config, explicit=None):
    if explicit:
        return Path(explicit)
    out = Path(config.output_dir)
    best = out / 'best.allm'
    return best if best.exists() else out / 'final.allm'


def make_backend(config):
    backend = get_backend(config.backend, num_workers=config.workers or None, progress=True)
    backend.init()
    return backend


def _metadata(config, **extra):
    meta = {'config': config.model.fingerprint(), 'seed': config.seed, 'preset': config.preset}
    meta.update(extra)
    return meta


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def run_train(config, args):
    vocab, records = load_data(config, config.train_split)
    config.validate()
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / 'config.txt')

    console.print(f"[bold green]ActionLLM 训练启动...[/bold green]")
    console.print(f"数据集: {config.data_root} ({len(records)} videos, {vocab.num_classes} classes)")
    console.print(f"配置指纹: {config.model.fingerprint()}")

    trainer = ActionTrainer(config, vocab, records, output_dir=out)
    learnable, frozen = count_params(trainer.model)
    console.print(f"参数: {format_count(learnable)} learnable / {format_count(frozen)} frozen")

    table = Table(title="training")
    for col in ("epoch", "L_T", "L_V", "L_A", "L_D", "L_total", "val", "time"):
        table.add_column(col, justify="right")

    start = time.time()
    with Progress(
        TextColumn("[progress.description]{task.description}"),
        BarColumn(),
        TextColumn("[progress.percentage]{task.percentage:>3.0f}%"),
        TimeElapsedColumn(),
        TimeRemainingColumn(),
        console=console,
        refresh_per_second=5,
    ) as progress:
        task = progress.add_task("[cyan]训练中...", total=config.epochs)
        for result in trainer.run():
            train = result['train']
            val = result['val']
            table.add_row(
                str(result['epoch']),
                *(f"{v:.4f}" for v in (train.L_T, train.L_V, train.L_A, train.L_D, train.L_total)),
                (f"{val.L_total:.4f}" + (" *" if result['best'] else "")) if val else "-",
                format_seconds(result['seconds']),
            )
            progress.update(task, advance=1, description=f"[cyan]epoch {result['epoch']} L={train.L_total:.3f}")

    console.print(table)
    console.print(f"[bold green]检查点已保存到 {out}[/bold green] (总耗时 {format_seconds(time.time() - start)})")
    return 0


def _report_table(report, title):
    table = Table(title=title)
    table.add_column("alpha", justify="right")
    for b in report.betas:
        table.add_column(f"beta={b:g}", justify="right")
    table.add_column("avg", justify="right")
    for a in report.alphas:
        cells = [report.cells.get((a, b)) for b in report.betas]
        table.add_row(f"{a:g}", *("-" if c is None else f"{100 * c:.2f}" for c in cells),
                      f"{100 * report.row_average(a):.2f}")
    return table


def run_eval(config, args):
    vocab, records = load_data(config, config.eval_split)
    config.validate()
    model, path = load_model(config, vocab, default_checkpoint(config, args.checkpoint))
    backend = make_backend(config)
    try:
        report = evaluate_grid(
            model, records, config.eval_alphas, config.eval_betas, config.sample_rate, backend,
            _metadata(config, split=config.eval_split, checkpoint=path.name),
            use_predicted=config.use_predicted,
        )
    finally:
        backend.cleanup()
    out = report.write(Path(config.output_dir) / 'report.txt')
    console.print(_report_table(report, f"MoC (%) on {config.eval_split}"))
    console.print(f"average MoC: [bold]{100 * report.average:.2f}[/bold]   report: {out}")
    if report.skipped:
        console.print(f"[yellow]{report.skipped} (video, alpha) pairs skipped[/yellow]")
    return 0


def run_predict(config, args):
    vocab, records = load_data(config, config.eval_split)
    config.validate()
    by_id = {r.id: r for r in records}
    if args.video not in by_id:
        raise InputError(f"video {args.video!r} is not in split {config.eval_split!r}")
    model, _ = load_model(config, vocab, default_checkpoint(config, args.checkpoint))
    job = GridJob(tuple(config.eval_alphas), tuple(config.eval_betas), config.sample_rate, config.eval_start,
                  config.use_predicted)
    score = score_video(model, by_id[args.video], job, keep_predictions=True)
    for alpha, (pred, gt) in sorted(score.predictions.items()):
        base = Path(config.output_dir) / f"timeline_{args.video}_a{alpha:g}"
        txt, svg = emit_timeline(pred, gt, base, vocab)
        cells = "  ".join(
            f"beta={b:g}: {100 * score.cells[(alpha, b)]:.2f}" for b in job.betas if (alpha, b) in score.cells
        )
        console.print(f"alpha={alpha:g}  {cells}")
        console.print(f"  {txt}\n  {svg}")
    if score.skipped_alphas:
        console.print(f"[yellow]skipped alphas: {score.skipped_alphas}[/yellow]")
    return 0


def gradcheck_config(config):
    """Tiny dims; the architectural switches come from ``config``."""
    m = config.model
    return ModelConfig(
        num_classes=4, feature_dim=6, embed_dim=8, adapter_dim=4, cmib_dim=8, cmib_heads=2,
        cmib_mode=m.cmib_mode, tune_dim=4, tune_kernel=m.tune_kernel, tune_dropout=m.tune_dropout,
        tuning_residual=m.tuning_residual, num_queries=4, query_init=m.query_init, query_const=m.query_const,
        stub_depth=1, stub_heads=2, token_buckets=32, shared_projections=m.shared_projections,
        shared_past_head=m.shared_past_head, use_text=m.use_text, init_seed=m.init_seed,
    )


def run_gradcheck(config, args):
    tiny = gradcheck_config(config)
    terms = config.loss_term_set if tiny.use_text else config.loss_term_set - {"T"}
    with precision('test'):
        grammar = SynthGrammar.generate(tiny.num_classes, seed=config.seed, min_len=4, max_len=8)
        vocab = grammar.vocabulary(tiny.token_buckets)
        record = synth_corpus(grammar, 1, (60, 60), tiny.feature_dim, 0.3, 'gradcheck')[0]
        obs = sample_observation(record, ObservationSpec(0.3, 0.5, 4, 0))
        targets = build_targets(obs.gt_labels, obs.segments, tiny.num_queries, obs.horizon, tiny.num_classes)
        model = ActionLLM(tiny, vocab)
        features = obs.features.astype(np.float64)

        def loss_fn():
            pack, cache = model.forward(features, obs.input_labels)
            loss = total_loss(pack, targets, terms, config.loss_mean)
            model.backward(total_loss_backward(pack, targets, terms, config.loss_mean), cache)
            return loss.L_total

        err = grad_check(loss_fn, model.trainable_parameters())
    entries = sum(p.size for p in model.trainable_parameters())
    if err < GRADCHECK_TOLERANCE:
        console.print(f"[bold green]PASS max_rel_err < {GRADCHECK_TOLERANCE:g}[/bold green] ({err:.3e} over {entries} entries)")
        return 0
    console.print(f"[bold red]FAIL max_rel_err = {err:.3e} >= {GRADCHECK_TOLERANCE:g}[/bold red]")
    return 3


def run_synth(config, args):
    root, vocab, n_train, n_test = synthesize(config)
    console.print(f"[bold green]合成数据集已写入 {root}[/bold green]")
    console.print(f"{vocab.num_classes} classes, {n_train} {config.train_split} / {n_test} {config.eval_split} videos")
    return 0


def run_sweep(config, args):
    if args.axis not in SWEEP_AXES:
        raise InputError(f"unknown sweep axis {args.axis!r}, expected one of {sorted(SWEEP_AXES)}")
    vocab, train_records = load_data(config, config.train_split)
    _, eval_records = load_data(config, config.eval_split)
    config.validate()
    backend = make_backend(config)
    try:
        rows = sweep(config, args.axis, args.values, vocab, train_records, eval_records, backend)
    finally:
        backend.cleanup()

    alpha = 0.3 if 0.3 in config.eval_alphas else config.eval_alphas[-1]
    table = Table(title=f"sweep {args.axis} (MoC % at alpha={alpha:g})")
    table.add_column(args.axis, justify="right")
    for b in config.eval_betas:
        table.add_column(f"beta={b:g}", justify="right")
    table.add_column("Average", justify="right")
    table.add_column("learnable", justify="right")
    lines = []
    for value, report, learnable in rows:
        cells = [report.cells.get((alpha, b)) for b in config.eval_betas]
        shown = ["-" if c is None else f"{100 * c:.2f}" for c in cells]
        table.add_row(str(value), *shown, f"{100 * report.row_average(alpha):.2f}", format_count(learnable))
        lines.append(" | ".join([str(value)] + shown + [f"{100 * report.row_average(alpha):.2f}", str(learnable)]))
    console.print(table)
    out = Path(config.output_dir) / f"sweep_{args.axis}.txt"
    out.parent.mkdir(parents=True, exist_ok=True)
    header = " | ".join([args.axis] + [f"{b:g}" for b in config.eval_betas] + ["Average", "learnable"])
    out.write_text("\n".join([header] + lines) + "\n", encoding="utf-8")
    console.print(f"sweep table: {out}")
    return 0


def run_params(config, args):
    config.validate()
    vocab = Vocabulary(synth_names(config.model.num_classes), config.model.token_buckets)
    model = ActionLLM(config.model, vocab)
    table = Table(title=f"parameters (config {config.model.fingerprint()})")
    table.add_column("group")
    table.add_column("learnable", justify="right")
    table.add_column("frozen", justify="right")
    for group, (learnable, frozen) in count_params_by_group(model).items():
        table.add_row(group, format_count(learnable), format_count(frozen))
    learnable, frozen = count_params(model)
    table.add_row("[bold]total[/bold]", format_count(learnable), format_count(frozen))
    console.print(table)
    console.print(
        f"reference (7B backbone, not reproduced here): "
        f"{format_count(REFERENCE_LEARNABLE)} learnable / {format_count(REFERENCE_FROZEN)} frozen"
    )
    return 0


COMMANDS = {
    'train': run_train,
    'eval': run_eval,
    'predict': run_predict,
    'gradcheck': run_gradcheck,
    'synth': run_synth,
    'sweep': run_sweep,
    'params': run_params,
}


def main(argv=None):
    """主程序入口"""
    args = parse_arguments(argv)
    setup_logging(args.log_level)
    try:
        config = build_config(args)
        return COMMANDS[args.command](config, args)
    except ActionLLMError as e:
        console.print(f"[bold red]错误: {e}[/bold red]")
        return e.exit_code
    except KeyboardInterrupt:
        console.print("\n[bold red]程序被用户中断[/bold red]")
        return 1


if __name__ == "__main__":
    sys.exit(main())
