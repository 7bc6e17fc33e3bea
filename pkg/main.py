"""
认知信号桥接工具命令行入口
子命令: ingest / run / featsel / synth / report
返回码: 0 成功, 2 输入错误, 1 内部错误
"""

import json
import logging
import os
from dataclasses import asdict
from typing import Any, Dict, List, Optional, Tuple

import click

from Bridging_Model import ModelConfig, save_checkpoint
from config import (
    HARNESS_CONFIG, LOGGING_CONFIG, SYNTH_CONFIG, TRAINING_CONFIG, load_config_file, merge_config,
)
from data_utils import (
    SIGNAL_TYPES, Corpus, load_corpus, load_corpus_archive, load_word_list, make_folds, save_corpus_archive,
)
from Experiment_Runner import ExperimentConfig, restore_fold_model, run_cv
from Feature_Selection import METHOD_ALIASES, dataset_to_aggregated, selection_scores
from report_utils import (
    RESULTS_FILE, featsel_payload, finish_manifest, load_results, render_reports, run_payload, save_results,
    scores_from_payload, start_manifest,
)
from Signal_Masking import CLASSIFIERS, featsel_compare, mask_eval
from synth_utils import PlantSpec, write_synth_files
from Task_Labels import TASK_NAMES, LabeledDataset, Resources, build_dataset, load_dataset
from utils import BridgingInputError, derive_seed, file_digest

logger = logging.getLogger(__name__)


class BridgingCLI(click.Group):
    """把输入错误映射为返回码2，其余异常映射为返回码1"""

    def invoke(self, ctx: click.Context) -> Any:
        try:
            return super().invoke(ctx)
        except (click.exceptions.Exit, click.exceptions.Abort, click.ClickException):
            raise
        except (BridgingInputError, FileNotFoundError, json.JSONDecodeError) as e:
            click.echo(f"❌ 输入错误: {e}", err=True)
            ctx.exit(2)
        except Exception as e:
            logger.exception(f"❌ 内部错误: {e}")
            click.echo(f"❌ 内部错误: {e}", err=True)
            ctx.exit(1)


def _settings(ctx: click.Context, **flags) -> Dict[str, Any]:
    """配置文件与命令行参数合并后的快照（命令行优先）"""
    return merge_config(ctx.obj["file_config"], {**ctx.obj["global_flags"], **flags})


def _setting(settings: Dict[str, Any], key: str, default: Any) -> Any:
    value = settings.get(key)
    return default if value is None else value


def _load_corpus_input(path: str) -> Tuple[Corpus, Dict[str, str]]:
    """语料输入可以是ingest生成的归档，也可以是含signals.tsv与annotations.jsonl的目录"""
    if os.path.isdir(path):
        signals = os.path.join(path, "signals.tsv")
        annotations = os.path.join(path, "annotations.jsonl")
        if not (os.path.exists(signals) and os.path.exists(annotations)):
            raise BridgingInputError(f"目录 {path} 中缺少 signals.tsv 或 annotations.jsonl")
        return load_corpus(signals, annotations), {"signals": signals, "annotations": annotations}
    return load_corpus_archive(path), {"corpus": path}


def _resources(common_words: Optional[str], connectors: Optional[str]) -> Resources:
    return Resources(
        common_words=load_word_list(common_words) if common_words else None,
        connectors=load_word_list(connectors) if connectors else None,
    )


def _prepare_dataset(corpus: Corpus, task: Optional[str], signal_type: str, seed: int, k_folds: int,
                     dataset_path: Optional[str], resources: Resources) -> LabeledDataset:
    if dataset_path:
        dataset = load_dataset(dataset_path, corpus)
        if dataset.signal_type != signal_type:
            raise BridgingInputError(f"数据集信号类型为 {dataset.signal_type}，与 --signals {signal_type} 不一致")
        return dataset
    if task is None:
        raise BridgingInputError("必须指定 --task 或 --dataset")
    folds = make_folds(corpus, k_folds, derive_seed(seed, "folds"))
    return build_dataset(task, corpus, signal_type, folds, resources, seed=derive_seed(seed, "bshift"))


def _run_dir(out: str, task: str, signal_type: str, seed: int) -> str:
    return os.path.join(out, f"{task}_{signal_type}_seed{seed}")


def _experiment_config(settings: Dict[str, Any], task: str, signal_type: str, seed: int, k_folds: int,
                       no_encoder: bool = False) -> ExperimentConfig:
    model = ModelConfig.for_task(
        task, signal_type, seed,
        hidden=settings.get("hidden"),
        use_encoder=False if no_encoder or settings.get("use_encoder") is False else None,
        loss=settings.get("loss"),
        focal_gamma=settings.get("focal_gamma"),
    )
    return ExperimentConfig(
        task=task,
        signal_type=signal_type,
        seed=seed,
        k_folds=k_folds,
        model=model,
        masking=_setting(settings, "masking", HARNESS_CONFIG["masking"]),
        mask_retrain=_setting(settings, "mask_retrain", HARNESS_CONFIG["mask_retrain"]),
        max_epochs=_setting(settings, "max_epochs", TRAINING_CONFIG["max_epochs"]),
        patience=_setting(settings, "patience", TRAINING_CONFIG["patience"]),
        batch_size=_setting(settings, "batch_size", TRAINING_CONFIG["batch_size"]),
        jobs=_setting(settings, "jobs", HARNESS_CONFIG["jobs"]),
        progress=not settings.get("quiet", False),
    )


def _parse_list(value: Optional[str]) -> List[str]:
    return [v.strip() for v in value.split(",") if v.strip()] if value else []


def _parse_k_sweep(value: Optional[str], d: int) -> List[int]:
    """k列表：如 "1,2,5" 或 "1-17"，默认1..d"""
    if not value:
        return list(range(1, d + 1))
    ks: List[int] = []
    try:
        for part in _parse_list(value):
            if "-" in part:
                lo, hi = part.split("-", 1)
                ks.extend(range(int(lo), int(hi) + 1))
            else:
                ks.append(int(part))
    except ValueError:
        raise BridgingInputError(f"无法解析 --k-sweep: {value}")
    return sorted(set(ks))


# ---------------------------------------------------------------------------
# 命令
# ---------------------------------------------------------------------------

@click.group(cls=BridgingCLI)
@click.option("--log-level", type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
              default=None, help="日志级别（默认取 BRIDGE_LOG_LEVEL 或 INFO）")
@click.option("--quiet", is_flag=True, default=False, help="只输出警告与错误，关闭进度条")
@click.option("--jobs", type=click.IntRange(min=1), default=None, help="并行进程数（按折并行）")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="YAML键值配置文件，命令行参数优先")
@click.pass_context
def cli(ctx: click.Context, log_level: Optional[str], quiet: bool, jobs: Optional[int],
        config_path: Optional[str]) -> None:
    """认知信号桥接工具：用眼动/EEG信号预测句子的语言学属性，并解释各信号特征的贡献"""
    try:
        file_config = load_config_file(config_path)
    except Exception as e:
        raise click.BadParameter(str(e), param_hint="--config")
    level = (log_level or ("WARNING" if quiet else file_config.get("log_level") or LOGGING_CONFIG["level"])).upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format=LOGGING_CONFIG["format"], force=True)
    ctx.obj = {
        "file_config": file_config,
        "global_flags": {"jobs": jobs, "quiet": quiet or None},
        "config_path": config_path,
    }


@cli.command()
@click.option("--signals", "signals_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="逐词信号TSV文件")
@click.option("--annotations", "annotations_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="句子标注JSONL文件")
@click.option("--out", required=True, type=click.Path(file_okay=False), help="输出目录")
@click.pass_context
def ingest(ctx: click.Context, signals_path: str, annotations_path: str, out: str) -> None:
    """校验语料文件并保存为确定性的语料归档"""
    settings = _settings(ctx)
    manifest = start_manifest(settings, None, {"signals": signals_path, "annotations": annotations_path})
    corpus = load_corpus(signals_path, annotations_path)
    os.makedirs(out, exist_ok=True)
    archive = os.path.join(out, "corpus.json")
    save_corpus_archive(corpus, archive)
    manifest.fingerprints["corpus_archive"] = file_digest(archive)
    finish_manifest(manifest, out, [archive])
    logger.info(f"✅ 语料归档已保存: {archive}（{len(corpus)} 个句子）")


@cli.command()
@click.option("--corpus", "corpus_path", required=True, type=click.Path(exists=True),
              help="语料归档，或含signals.tsv/annotations.jsonl的目录")
@click.option("--task", type=click.Choice(TASK_NAMES), default=None, help="桥接任务")
@click.option("--signals", "signal_type", type=click.Choice(SIGNAL_TYPES), required=True, help="信号类型")
@click.option("--seed", type=int, required=True, help="主随机种子")
@click.option("--out", default="runs", show_default=True, type=click.Path(file_okay=False), help="输出根目录")
@click.option("--dataset", "dataset_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="已序列化的数据集（如synth生成的dataset.jsonl），替代--task")
@click.option("--k-folds", type=click.IntRange(min=2), default=None, help="交叉验证折数")
@click.option("--no-encoder", is_flag=True, default=False, help="去掉Bi-LSTM编码层（消融）")
@click.option("--hidden", type=click.IntRange(min=1), default=None, help="Bi-LSTM隐藏层维度")
@click.option("--loss", type=click.Choice(["cross-entropy", "focal"]), default=None, help="分类损失")
@click.option("--focal-gamma", type=click.FloatRange(min=0), default=None)
@click.option("--max-epochs", type=click.IntRange(min=1), default=None)
@click.option("--patience", type=click.IntRange(min=1), default=None)
@click.option("--masking/--no-masking", default=None, help="是否做信号遮蔽验证")
@click.option("--mask-retrain", is_flag=True, default=None, help="遮蔽后重新训练而不是冻结评估")
@click.option("--common-words", type=click.Path(exists=True, dir_okay=False), default=None, help="OOV常用词表")
@click.option("--connectors", type=click.Path(exists=True, dir_okay=False), default=None, help="DCC篇章连接词表")
@click.pass_context
def run(ctx: click.Context, corpus_path: str, task: Optional[str], signal_type: str, seed: int, out: str,
        dataset_path: Optional[str], k_folds: Optional[int], no_encoder: bool, hidden: Optional[int],
        loss: Optional[str], focal_gamma: Optional[float], max_epochs: Optional[int], patience: Optional[int],
        masking: Optional[bool], mask_retrain: Optional[bool], common_words: Optional[str],
        connectors: Optional[str]) -> None:
    """交叉验证训练桥接模型，输出注意力、折指标与遮蔽曲线"""
    settings = _settings(ctx, task=task, signal_type=signal_type, seed=seed, k_folds=k_folds,
                         no_encoder=no_encoder or None, hidden=hidden, loss=loss, focal_gamma=focal_gamma,
                         max_epochs=max_epochs, patience=patience, masking=masking, mask_retrain=mask_retrain)
    corpus, inputs = _load_corpus_input(corpus_path)
    inputs.update({"dataset": dataset_path, "common_words": common_words, "connectors": connectors})
    manifest = start_manifest(settings, seed, inputs)

    k = _setting(settings, "k_folds", HARNESS_CONFIG["k_folds"])
    dataset = _prepare_dataset(corpus, task, signal_type, seed, k, dataset_path, _resources(common_words, connectors))
    task_name = dataset.task.name
    config = _experiment_config(settings, task_name, signal_type, seed, dataset.k,
                                no_encoder=bool(settings.get("no_encoder")))
    logger.info(f"开始 {task_name}/{signal_type}：{len(dataset)} 个样本，{config.k_folds} 折，"
                f"损失 {config.model.loss}，编码器 {'开' if config.model.use_encoder else '关'}")

    results, scores = run_cv(config, dataset, corpus)
    mask_report = None
    if config.masking and scores is not None:
        mask_report = mask_eval(config, dataset, corpus, results, scores)

    run_dir = _run_dir(out, task_name, signal_type, seed)
    outputs = save_results(run_dir, run_payload(config, results, scores, mask_report))
    for r in results:
        path = os.path.join(run_dir, "checkpoints", f"fold{r.fold}.json")
        save_checkpoint(restore_fold_model(config, dataset, r), path)
        outputs.append(path)
        manifest.fingerprints[f"fold{r.fold}_normalization"] = r.stats.fingerprint
    finish_manifest(manifest, run_dir, outputs)
    logger.info(f"✅ 结果已写入 {run_dir}")


@cli.command()
@click.option("--corpus", "corpus_path", required=True, type=click.Path(exists=True),
              help="语料归档，或含signals.tsv/annotations.jsonl的目录")
@click.option("--task", type=click.Choice(TASK_NAMES), default=None, help="桥接任务")
@click.option("--signals", "signal_type", type=click.Choice(SIGNAL_TYPES), required=True, help="信号类型")
@click.option("--seed", type=int, required=True, help="主随机种子")
@click.option("--out", default="runs", show_default=True, type=click.Path(file_okay=False), help="输出根目录")
@click.option("--dataset", "dataset_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--methods", default=None, help="逗号分隔: attention,mi,rfe,rf")
@click.option("--k-sweep", default=None, help="如 1,2,5 或 1-17，默认1..d")
@click.option("--classifiers", default=None, help="逗号分隔: linear,recurrent")
@click.option("--attention-from", type=click.Path(file_okay=False), default=None,
              help="提供注意力得分的run目录（默认为同任务/信号/种子的run目录）")
@click.option("--k-folds", type=click.IntRange(min=2), default=None)
@click.option("--max-epochs", type=click.IntRange(min=1), default=None)
@click.option("--common-words", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--connectors", type=click.Path(exists=True, dir_okay=False), default=None)
@click.pass_context
def featsel(ctx: click.Context, corpus_path: str, task: Optional[str], signal_type: str, seed: int, out: str,
            dataset_path: Optional[str], methods: Optional[str], k_sweep: Optional[str],
            classifiers: Optional[str], attention_from: Optional[str], k_folds: Optional[int],
            max_epochs: Optional[int], common_words: Optional[str], connectors: Optional[str]) -> None:
    """比较注意力与互信息、RFE、随机森林选出的top-k特征"""
    settings = _settings(ctx, task=task, signal_type=signal_type, seed=seed, methods=methods, k_sweep=k_sweep,
                         classifiers=classifiers, k_folds=k_folds, max_epochs=max_epochs)
    method_names = _parse_list(settings.get("methods")) or list(HARNESS_CONFIG["featsel_methods"])
    unknown = [m for m in method_names if m not in METHOD_ALIASES]
    if unknown:
        raise BridgingInputError(f"未知的特征选择方法: {unknown[0]}（可选: attention, mi, rfe, rf）")
    classifier_names = _parse_list(settings.get("classifiers")) or list(HARNESS_CONFIG["classifiers"])
    bad = [c for c in classifier_names if c not in CLASSIFIERS]
    if bad:
        raise BridgingInputError(f"未知的分类器: {bad[0]}（可选: {', '.join(CLASSIFIERS)}）")

    corpus, inputs = _load_corpus_input(corpus_path)
    inputs.update({"dataset": dataset_path, "common_words": common_words, "connectors": connectors})
    manifest = start_manifest(settings, seed, inputs)
    k = _setting(settings, "k_folds", HARNESS_CONFIG["k_folds"])
    dataset = _prepare_dataset(corpus, task, signal_type, seed, k, dataset_path, _resources(common_words, connectors))
    task_name = dataset.task.name
    names = corpus.schema(signal_type).feature_names

    method_scores = {}
    if "attention" in method_names:
        prior = attention_from or _run_dir(out, task_name, signal_type, seed)
        if not os.path.exists(os.path.join(prior, RESULTS_FILE)):
            raise BridgingInputError(f"attention方法需要先运行 run（未找到 {os.path.join(prior, RESULTS_FILE)}）；"
                                     f"请先执行 run --task {task_name} --signals {signal_type} --seed {seed}，"
                                     f"或用 --attention-from 指定run目录")
        payload = load_results(prior)
        if payload.get("attention") is None:
            raise BridgingInputError(f"run目录 {prior} 中没有注意力得分")
        method_scores["attention"] = scores_from_payload(payload["attention"])
        inputs["attention_run"] = os.path.join(prior, RESULTS_FILE)
        manifest.input_digests["attention_run"] = file_digest(inputs["attention_run"])

    others = [m for m in method_names if METHOD_ALIASES[m] != "attention"]
    if others:
        data = dataset_to_aggregated(dataset, names)
        for m in others:
            name = METHOD_ALIASES[m]
            method_scores[name] = selection_scores(name, data, seed=derive_seed(seed, "selection", name),
                                                   jobs=_setting(settings, "jobs", 1),
                                                   task=task_name, signal_type=signal_type)

    config = _experiment_config(settings, task_name, signal_type, seed, dataset.k)
    grid = featsel_compare(config, dataset, corpus, method_scores, _parse_k_sweep(settings.get("k_sweep"), len(names)),
                           classifier_names)
    run_dir = os.path.join(_run_dir(out, task_name, signal_type, seed), "featsel")
    outputs = save_results(run_dir, featsel_payload(task_name, signal_type, seed, grid, method_scores))
    finish_manifest(manifest, run_dir, outputs)
    logger.info(f"✅ 特征选择比较已写入 {run_dir}（{len(grid)} 个格子）")


@cli.command()
@click.option("--d", "d", type=int, default=None, help=f"信号维度（17眼动 / 8 EEG），默认 {SYNTH_CONFIG['d']}")
@click.option("--planted", type=int, default=None, help=f"植入特征下标，默认 {SYNTH_CONFIG['planted']}")
@click.option("--effect", type=float, default=None,
              help=f"每类均值偏移（噪声标准差单位），默认 {SYNTH_CONFIG['effect']}")
@click.option("--noise", type=float, default=None, help=f"噪声标准差，默认 {SYNTH_CONFIG['noise']}")
@click.option("--m", "m", type=int, default=None, help=f"句子数，默认 {SYNTH_CONFIG['m']}")
@click.option("--min-len", type=int, default=None, help=f"最短句长，默认 {SYNTH_CONFIG['min_len']}")
@click.option("--max-len", type=int, default=None, help=f"最长句长，默认 {SYNTH_CONFIG['max_len']}")
@click.option("--kind", type=click.Choice(["three-class", "binary", "sequence"]), default=None,
              help=f"任务类型，默认 {SYNTH_CONFIG['kind']}")
@click.option("--shared-noise", type=float, default=None, help=f"各特征共享的噪声，默认 {SYNTH_CONFIG['shared_noise']}")
@click.option("--k-folds", type=click.IntRange(min=2), default=None, help=f"折数，默认 {HARNESS_CONFIG['k_folds']}")
@click.option("--seed", type=int, required=True)
@click.option("--out", required=True, type=click.Path(file_okay=False), help="输出目录")
@click.pass_context
def synth(ctx: click.Context, d: Optional[int], planted: Optional[int], effect: Optional[float],
          noise: Optional[float], m: Optional[int], min_len: Optional[int], max_len: Optional[int],
          kind: Optional[str], shared_noise: Optional[float], k_folds: Optional[int], seed: int, out: str) -> None:
    """生成植入特征-标签相关性的合成语料（未指定的参数依次取配置文件与默认值）"""
    settings = _settings(ctx, d=d, planted=planted, effect=effect, noise=noise, m=m, min_len=min_len,
                         max_len=max_len, kind=kind, shared_noise=shared_noise, k_folds=k_folds, seed=seed)
    defaults = {**SYNTH_CONFIG, "k_folds": HARNESS_CONFIG["k_folds"]}
    spec = PlantSpec(seed=seed, **{key: _setting(settings, key, default) for key, default in defaults.items()})
    manifest = start_manifest({**settings, **asdict(spec)}, seed, {})
    paths = write_synth_files(spec, out)
    for name, path in sorted(paths.items()):
        manifest.fingerprints[name] = file_digest(path)
    finish_manifest(manifest, out, list(paths.values()))
    logger.info(f"✅ 合成语料已写入 {out}")


@cli.command()
@click.argument("path", type=click.Path(exists=True, file_okay=False))
def report(path: str) -> None:
    """由运行目录中的结果重新渲染CSV报告，并汇总注意力表"""
    render_reports(path)


def main() -> None:
    cli(prog_name="bridge")


if __name__ == "__main__":
    main()
