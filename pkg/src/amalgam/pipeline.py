"""Pipeline stages over a run directory.

Each stage reads its upstream artifacts (validating existence and
architecture hashes), computes, and writes its outputs plus two bookkeeping
files into its own subdirectory: resolved_config.json (the exact full config
used, enabling bit-reproducible reruns) and manifest.json (sha256 of every
input and output file). Stages are idempotent for a fixed config and seed.

Directory layout under a run directory:

    dataset/    meta.json, {split}_images.f32, {split}_labels.csv, eval_labels.csv
    teachers/   teacher{n}.ckpt, teacher{n}_curve.csv, registry.json
    amalgam/    student.ckpt, filter_bank.ckpt, loss_table.csv (+ curves dir)
    branchout/  branch_report.csv, task_bundle.ckpt
    finetune/   task_bundle.ckpt, report.json
    eval/       ap_report.csv, topk_report.csv, summary.json
"""

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field

import torch

from . import branchout as branchout_mod
from . import dataio, entangle, evalmetrics, teachers as teachers_mod
from .blocknet import BlockifiedNetwork, init_parameters
from .config import PipelineConfig
from .nncore import configure_torch, derive_seed

STAGES = ("gen-data", "pretrain", "amalgamate", "branchout", "finetune", "eval")


class MissingArtifactError(FileNotFoundError):
    """An upstream stage's output is required but absent."""


class SpecHashMismatchError(RuntimeError):
    """An artifact was produced under a different architecture."""


@dataclass
class StageResult:
    stage: str
    out_dir: str
    artifacts: dict[str, str] = field(default_factory=dict)  # path -> sha256


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _require(path: str, hint: str) -> str:
    if not os.path.exists(path):
        raise MissingArtifactError(f"missing artifact {path}; run '{hint}' first")
    return path


def _stage_dir(run_dir: str, stage: str) -> str:
    path = os.path.join(run_dir, stage)
    os.makedirs(path, exist_ok=True)
    return path


def _finish_stage(
    stage: str,
    out_dir: str,
    config: PipelineConfig,
    inputs: list[str],
    outputs: list[str],
) -> StageResult:
    with open(os.path.join(out_dir, "resolved_config.json"), "w") as fh:
        fh.write(config.canonical_json())
    manifest = {
        "stage": stage,
        "inputs": {os.path.relpath(p, out_dir): file_sha256(p) for p in inputs},
        "outputs": {os.path.relpath(p, out_dir): file_sha256(p) for p in outputs},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return StageResult(stage, out_dir, {p: file_sha256(p) for p in outputs})


# ---------------------------------------------------------------------------
# Stages.
# ---------------------------------------------------------------------------


def run_gen_data(config: PipelineConfig, run_dir: str) -> StageResult:
    configure_torch()
    out_dir = _stage_dir(run_dir, "dataset")
    dataset = dataio.generate_dataset(config.dataset_config())
    dataio.write_dataset(dataset, out_dir)
    outputs = [os.path.join(out_dir, "meta.json")]
    for split in dataset.splits:
        outputs.append(os.path.join(out_dir, f"{split}_images.f32"))
        if dataset.splits[split].label_matrix is not None:
            outputs.append(os.path.join(out_dir, f"{split}_labels.csv"))
    if dataset.eval_labels is not None:
        outputs.append(dataio.eval_labels_path(out_dir))
    return _finish_stage("gen-data", out_dir, config, [], outputs)


def _teacher_groups(config: PipelineConfig) -> list[tuple[int, ...]]:
    return dataio.partition_labels(
        config.data.label_count,
        config.teachers.count,
        mode=config.teachers.partition_mode,
        seed=config.seed,
    )


def teacher_ckpt_path(run_dir: str, n: int) -> str:
    return os.path.join(run_dir, "teachers", f"teacher{n}.ckpt")


def run_pretrain(config: PipelineConfig, run_dir: str, teacher_index: int) -> StageResult:
    configure_torch()
    groups = _teacher_groups(config)
    if not 0 <= teacher_index < len(groups):
        raise ValueError(f"teacher index {teacher_index} outside [0, {len(groups) - 1}]")
    dataset_dir = os.path.join(run_dir, "dataset")
    meta_path = _require(os.path.join(dataset_dir, "meta.json"), "gen-data")
    split = dataio.load_split(dataset_dir, "train")

    task_ids = groups[teacher_index]
    spec = config.teacher_spec(task_ids)
    net = BlockifiedNetwork(spec, producer=f"teacher:{teacher_index}")
    init_parameters(net, derive_seed(config.seed, f"teacher-init:{teacher_index}"))
    teacher = teachers_mod.pretrain_teacher(
        net,
        split.images,
        split.label_matrix,
        task_ids,
        config.teacher_optimizer(teacher_index),
        epochs=config.teachers.epochs,
        val_fraction=config.teachers.val_fraction,
    )

    out_dir = _stage_dir(run_dir, "teachers")
    ckpt = teacher_ckpt_path(run_dir, teacher_index)
    dataio.save_network(
        ckpt,
        teacher.network,
        meta={
            "task_ids": list(task_ids),
            "epochs": teacher.record.epochs,
            "final_loss": teacher.record.final_loss,
            "val_ap": {str(t): v for t, v in teacher.record.val_ap.items()},
        },
    )
    curve_path = os.path.join(out_dir, f"teacher{teacher_index}_curve.csv")
    with open(curve_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss"])
        for epoch, value in enumerate(teacher.record.loss_curve):
            writer.writerow([epoch, repr(value)])

    registry_path = os.path.join(out_dir, "registry.json")
    registry = {"label_count": config.data.label_count, "teachers": {}}
    if os.path.exists(registry_path):
        with open(registry_path) as fh:
            registry = json.load(fh)
    registry["teachers"][str(teacher_index)] = {
        "checkpoint": os.path.basename(ckpt),
        "task_ids": list(task_ids),
        "spec_hash": spec.spec_hash(),
    }
    with open(registry_path, "w") as fh:
        json.dump(registry, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return _finish_stage(
        "pretrain", out_dir, config, [meta_path], [ckpt, curve_path, registry_path]
    )


def load_registry(config: PipelineConfig, run_dir: str) -> teachers_mod.TeacherRegistry:
    """Load every teacher checkpoint listed by the config's partition, checking
    each was trained under the architecture the config implies."""
    groups = _teacher_groups(config)
    models = []
    for n, task_ids in enumerate(groups):
        ckpt = _require(teacher_ckpt_path(run_dir, n), f"pretrain --teacher {n}")
        expected = config.teacher_spec(task_ids).spec_hash()
        try:
            net, meta = dataio.load_network(ckpt, expect_spec_hash=expected)
        except dataio.CheckpointError as exc:
            raise SpecHashMismatchError(str(exc)) from exc
        record = teachers_mod.TrainingRecord(
            epochs=meta.get("epochs", 0),
            final_loss=meta.get("final_loss"),
            val_ap={int(t): v for t, v in meta.get("val_ap", {}).items()},
        )
        models.append(teachers_mod.TeacherModel(net, tuple(meta["task_ids"]), record))
    return teachers_mod.TeacherRegistry(models, tuple(range(config.data.label_count)))


def run_amalgamate(config: PipelineConfig, run_dir: str) -> StageResult:
    configure_torch()
    dataset_dir = os.path.join(run_dir, "dataset")
    _require(os.path.join(dataset_dir, "meta.json"), "gen-data")
    registry = load_registry(config, run_dir)
    unlabeled = dataio.load_split(dataset_dir, "unlabeled")

    amalgam_config = config.amalgam_config()
    student = entangle.init_student(
        registry, amalgam_config, seed=derive_seed(config.seed, "amalgamate")
    )
    result = entangle.amalgamate(student, registry, amalgam_config, unlabeled.images)

    out_dir = _stage_dir(run_dir, "amalgam")
    student_path = os.path.join(out_dir, "student.ckpt")
    bank_path = os.path.join(out_dir, "filter_bank.ckpt")
    table_path = os.path.join(out_dir, "loss_table.csv")
    dataio.save_network(student_path, result.student, meta={"selection": amalgam_config.selection.to_string()})
    dataio.save_filter_bank(bank_path, result.filter_bank, meta={"spec_hash": result.student.spec.spec_hash()})
    entangle.write_loss_table(table_path, result.loss_table)
    inputs = [teacher_ckpt_path(run_dir, n) for n in range(len(registry))]
    inputs.append(os.path.join(dataset_dir, "meta.json"))
    return _finish_stage(
        "amalgamate", out_dir, config, inputs, [student_path, bank_path, table_path]
    )


def run_branchout(config: PipelineConfig, run_dir: str) -> StageResult:
    configure_torch()
    amalgam_dir = os.path.join(run_dir, "amalgam")
    student_path = _require(os.path.join(amalgam_dir, "student.ckpt"), "amalgamate")
    bank_path = _require(os.path.join(amalgam_dir, "filter_bank.ckpt"), "amalgamate")
    table_path = _require(os.path.join(amalgam_dir, "loss_table.csv"), "amalgamate")
    registry = load_registry(config, run_dir)
    selection = config.selection()

    student, _ = dataio.load_network(student_path)
    bank, bank_meta = dataio.load_filter_bank(bank_path)
    if bank_meta.get("spec_hash") != student.spec.spec_hash():
        raise SpecHashMismatchError("filter bank and student come from different architectures")
    table = entangle.read_loss_table(table_path)

    plan = branchout_mod.select_branch_points(table, selection)
    nets, trunk = branchout_mod.regroup(student, registry, bank, plan, selection)

    out_dir = _stage_dir(run_dir, "branchout")
    report_path = os.path.join(out_dir, "branch_report.csv")
    bundle_path = os.path.join(out_dir, "task_bundle.ckpt")
    branchout_mod.write_branch_report(report_path, plan, selection, table)
    dataio.save_task_bundle(
        bundle_path, nets, trunk, student.spec, meta={"finetuned": False}
    )
    return _finish_stage(
        "branchout",
        out_dir,
        config,
        [student_path, bank_path, table_path],
        [report_path, bundle_path],
    )


def run_finetune(config: PipelineConfig, run_dir: str) -> StageResult:
    configure_torch()
    branch_dir = os.path.join(run_dir, "branchout")
    bundle_in = _require(os.path.join(branch_dir, "task_bundle.ckpt"), "branchout")
    dataset_dir = os.path.join(run_dir, "dataset")
    _require(os.path.join(dataset_dir, "meta.json"), "gen-data")
    registry = load_registry(config, run_dir)
    unlabeled = dataio.load_split(dataset_dir, "unlabeled")

    nets, trunk, meta = dataio.load_task_bundle(bundle_in)
    report = branchout_mod.finetune(nets, registry, unlabeled.images, config.finetune_config())

    out_dir = _stage_dir(run_dir, "finetune")
    bundle_out = os.path.join(out_dir, "task_bundle.ckpt")
    student_spec = dataio.ArchitectureSpec.from_json(meta["student_spec"])
    dataio.save_task_bundle(bundle_out, nets, trunk, student_spec, meta={"finetuned": True})
    report_path = os.path.join(out_dir, "report.json")
    with open(report_path, "w") as fh:
        json.dump(
            {
                "heldout_loss_before": {str(t): v for t, v in sorted(report.before.items())},
                "heldout_loss_after": {str(t): v for t, v in sorted(report.after.items())},
                "train_curve": list(report.loss_curve),
            },
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")
    return _finish_stage(
        "finetune", out_dir, config, [bundle_in], [bundle_out, report_path]
    )


def run_eval(config: PipelineConfig, run_dir: str) -> StageResult:
    configure_torch()
    dataset_dir = os.path.join(run_dir, "dataset")
    _require(os.path.join(dataset_dir, "meta.json"), "gen-data")
    bundle_path = _require(os.path.join(run_dir, "finetune", "task_bundle.ckpt"), "finetune")
    registry = load_registry(config, run_dir)
    selection = config.selection()
    unlabeled = dataio.load_split(dataset_dir, "unlabeled")
    truths = dataio.load_eval_labels(dataset_dir)

    nets, _, _ = dataio.load_task_bundle(bundle_path)
    nets_by_task = {net.task_id: net for net in nets}
    task_ids = list(selection.task_ids)

    def matrix_for(score_fn) -> evalmetrics.ScoreMatrix:
        cols = [score_fn(t) for t in task_ids]
        scores = torch.cat(cols, dim=1).numpy()
        truth = torch.stack([truths[:, t] for t in task_ids], dim=1).numpy()
        return evalmetrics.ScoreMatrix(scores, truth)

    with torch.no_grad():
        student_matrix = matrix_for(
            lambda t: torch.cat(
                [nets_by_task[t](batch) for batch in unlabeled.images.split(64)], dim=0
            )
        )
        teacher_matrix = matrix_for(
            lambda t: teachers_mod.predict_scores(
                registry[selection.teacher_of(t)].network, unlabeled.images, [t]
            )
        )

    protocol = config.eval.protocol
    ap_results = {
        "student": evalmetrics.mean_ap(student_matrix, protocol),
        "teacher": evalmetrics.mean_ap(teacher_matrix, protocol),
    }
    k = min(config.eval.topk, len(task_ids))
    topk_results = {
        "student": evalmetrics.topk_metrics(student_matrix, k),
        "teacher": evalmetrics.topk_metrics(teacher_matrix, k),
    }

    out_dir = _stage_dir(run_dir, "eval")
    ap_path = os.path.join(out_dir, "ap_report.csv")
    topk_path = os.path.join(out_dir, "topk_report.csv")
    summary_path = os.path.join(out_dir, "summary.json")
    # Column indices in the matrices map back to global task ids.
    evalmetrics.write_ap_report(
        ap_path,
        {
            name: evalmetrics.MeanAPResult(
                per_label={task_ids[i]: ap for i, ap in result.per_label.items()},
                mean=result.mean,
                excluded=tuple(task_ids[i] for i in result.excluded),
            )
            for name, result in ap_results.items()
        },
    )
    evalmetrics.write_topk_report(topk_path, topk_results)
    summary = {
        "protocol": protocol,
        "topk": k,
        "tasks": {
            str(task_ids[i]): {
                "teacher_ap": ap_results["teacher"].per_label.get(i),
                "student_ap": ap_results["student"].per_label.get(i),
            }
            for i in range(len(task_ids))
        },
        "teacher_map": ap_results["teacher"].mean,
        "student_map": ap_results["student"].mean,
    }
    with open(summary_path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    inputs = [bundle_path, dataio.eval_labels_path(dataset_dir)]
    return _finish_stage("eval", out_dir, config, inputs, [ap_path, topk_path, summary_path])


def run_all(config: PipelineConfig, run_dir: str) -> list[StageResult]:
    results = [run_gen_data(config, run_dir)]
    for n in range(config.teachers.count):
        results.append(run_pretrain(config, run_dir, n))
    results.append(run_amalgamate(config, run_dir))
    results.append(run_branchout(config, run_dir))
    results.append(run_finetune(config, run_dir))
    results.append(run_eval(config, run_dir))
    return results
