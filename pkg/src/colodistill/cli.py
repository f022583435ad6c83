"""Command-line pipeline.

Each subcommand writes into ``<out>/<stage>-<key>/`` where ``key`` hashes the
stage's configuration, the global seed and the bytes of its inputs.  A
finished stage holds a ``.done`` marker and is reused on re-runs.
``<out>/stages.json`` points every stage name at its latest directory, so
later stages find their inputs without explicit paths.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import shutil
import sys
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import config as C
from .checkpoint import CheckpointError
from .eval import MetricError, ScoredSet, metric_report, roc_curve_points
from .nets import AugmentConfig, NumericFailure
from .records import ManifestError, MissingLabelError, image_id_from_ref, load_manifest, split_dataset
from .report_nlp import AmbiguousResponse, ExtractionFailed
from .sam_distill import RefinementError

log = logging.getLogger("colodistill")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class DataError(RuntimeError):
    pass


class RunLocked(DataError):
    pass


# -- run directory ----------------------------------------------------------------


class RunDir:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    @contextlib.contextmanager
    def lock(self):
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.root / ".lock"
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunLocked(f"{self.root} is locked by another run (remove {path} if stale)") from None
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield self
        finally:
            path.unlink(missing_ok=True)

    def _pointers(self) -> dict:
        p = self.root / "stages.json"
        return json.loads(p.read_text()) if p.is_file() else {}

    def lookup(self, stage: str) -> Path | None:
        name = self._pointers().get(stage)
        if name is None:
            return None
        d = self.root / name
        return d if (d / ".done").is_file() else None

    def require(self, stage: str, filename: str, given: str | None) -> Path:
        if given is not None:
            return Path(given)
        d = self.lookup(stage)
        if d is None:
            raise DataError(f"no finished {stage!r} stage in {self.root}; pass the input explicitly")
        return d / filename

    def record(self, stage: str, d: Path) -> None:
        ptr = self._pointers()
        ptr[stage] = d.name
        (self.root / "stages.json").write_text(json.dumps(ptr, sort_keys=True, indent=1) + "\n")


def _digest_inputs(paths: Sequence[Path | None]) -> list:
    out = []
    for p in paths:
        if p is None:
            out.append(None)
        elif p.is_dir():
            out.append({f.name: C.file_digest(f) for f in sorted(p.iterdir()) if f.is_file()})
        elif p.is_file():
            out.append(C.file_digest(p))
        else:
            raise DataError(f"input not found: {p}")
    return out


def run_stage(
    run: RunDir,
    stage: str,
    cfg: dict,
    sections: Sequence[str],
    inputs: Sequence[Path | None],
    body: Callable[[Path], None],
    force: bool = False,
) -> Path:
    key = C.digest(stage, cfg["seed"], {s: cfg[s] for s in sections}, _digest_inputs(inputs))
    d = run.root / f"{stage}-{key}"
    if (d / ".done").is_file() and not force:
        log.info("%s: up to date (%s)", stage, d.name)
        run.record(stage, d)
        return d
    if d.exists():
        shutil.rmtree(d)
    d.mkdir(parents=True)
    (d / "config.yaml").write_text(C.dump(cfg), encoding="utf-8")
    _set_threads(cfg)
    body(d)
    (d / ".done").write_text("")
    run.record(stage, d)
    log.info("%s: wrote %s", stage, d)
    return d


def _set_threads(cfg: dict) -> None:
    if cfg["threads"]:
        torch.set_num_threads(int(cfg["threads"]))


def _json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _truth_beside(manifest: Path) -> dict | None:
    from .synth import load_truth

    p = manifest.parent / "truth.json"
    return load_truth(p) if p.is_file() else None


def _truth_masks(truth: dict) -> dict[str, np.ndarray]:
    return {iid: m for rec in truth.values() for iid, m in rec["masks"].items()}


def _load_frames(records, base: Path):
    """image_id -> ImageSample for every frame in the manifest."""
    from .records import load_image

    out = {}
    for rec in records:
        for ref in rec.image_refs:
            s = load_image(rec, ref, base)
            out[s.image_id] = s
    return out


# -- subcommands ------------------------------------------------------------------


def cmd_synth(cfg: dict, run: RunDir, args) -> Path:
    from .synth import SynthConfig, generate

    def body(d: Path):
        generate(SynthConfig(**cfg["synth"], seed=cfg["seed"])).write(d)

    return run_stage(run, "synth", cfg, ["synth"], [], body, args.force)


def make_extractor(name: str):
    from .report_nlp import ChatCompletionsExtractor, RuleExtractor

    if name == "rule":
        return RuleExtractor()
    if name == "llm":
        return ChatCompletionsExtractor.from_env()
    raise C.ConfigError(f"unknown extractor {name!r} (expected 'rule' or 'llm')")


def cmd_extract_labels(cfg: dict, run: RunDir, args) -> Path:
    from .report_nlp import extract_report_label, write_labels

    if args.extractor:
        cfg = C.merge(cfg, {"extract": {"extractor": args.extractor}})
    ex_cfg = cfg["extract"]
    extractor = make_extractor(ex_cfg["extractor"])
    manifest = run.require("synth", "manifest.tsv", args.manifest)

    def body(d: Path):
        records = load_manifest(manifest, check_images=False)
        labels, failures = {}, {}
        for rec in records:
            try:
                labels[rec.record_id] = extract_report_label(rec, extractor, ex_cfg["retries"], ex_cfg["backoff"])
            except (AmbiguousResponse, ExtractionFailed) as e:
                failures[rec.record_id] = str(e)
        write_labels(d / "labels.tsv", labels)
        expert = {r.record_id: r.expert_report_label for r in records if r.expert_report_label is not None}
        scored = [rid for rid in labels if rid in expert]
        agree = sum(labels[rid].value == expert[rid] for rid in scored)
        _json(
            d / "metrics.json",
            {
                "n_records": len(records),
                "n_labelled": len(labels),
                "failures": failures,
                "n_with_expert_label": len(scored),
                "accuracy_vs_expert": agree / len(scored) if scored else None,
            },
        )

    return run_stage(run, "extract-labels", cfg, ["extract"], [manifest], body, args.force)


def _mil_train_config(cfg: dict):
    from .mil import MILTrainConfig

    t = dict(cfg["mil"]["train"])
    t["augment"] = AugmentConfig(**t["augment"])
    return MILTrainConfig(**t, seed=cfg["seed"])


def cmd_train_mil(cfg: dict, run: RunDir, args) -> Path:
    from . import mil
    from .records import build_bags
    from .report_nlp import read_labels

    manifest = run.require("synth", "manifest.tsv", args.manifest)
    labels_path = run.require("extract-labels", "labels.tsv", args.labels)

    def body(d: Path):
        records = load_manifest(manifest)
        labels = read_labels(labels_path)
        frac = cfg["mil"]["train_fraction"]
        train_ids, test_ids = (s.record_ids for s in split_dataset(records, {"train": frac, "test": 1 - frac}, cfg["seed"]))
        bags = build_bags(records, labels, base=manifest.parent)
        train_bags = [b for b in bags if b.record_id in train_ids]
        tcfg = _mil_train_config(cfg)
        torch.manual_seed(cfg["seed"])
        model = mil.MILModel(mil.MILConfig.from_dict(cfg["mil"]["model"]))
        model, history = mil.train_alternating(model, train_bags, cfg["mil"]["epochs"], tcfg)
        mil.save_mil(d / "mil.safetensors", model, tcfg, cfg["seed"])
        mil.write_train_log(d / "train_log.csv", history)

        inst, rep = mil.score_bags(model, bags)
        by_id = {r.record_id: r for r in records}
        inst_rows, rep_rows = [], []
        for b, s, r in zip(bags, inst, rep):
            split = "train" if b.record_id in train_ids else "test"
            rec = by_id[b.record_id]
            exp = rec.expert_image_labels or (None,) * len(s)
            for sample, score, lab in zip(b.instances, s, exp):
                inst_rows.append((b.record_id, sample.image_id, split, "" if lab is None else lab, float(score)))
            rlab = rec.expert_report_label if rec.expert_report_label is not None else b.label
            rep_rows.append((b.record_id, split, rlab, float(r)))
        from .plots import write_csv

        write_csv(d / "instance_scores.csv", ["record_id", "image_id", "split", "label", "score"], inst_rows)
        write_csv(d / "report_scores.csv", ["record_id", "split", "label", "score"], rep_rows)
        metrics = {"n_train_bags": len(train_bags), "n_test_bags": len(bags) - len(train_bags)}
        test_rep = [r for r in rep_rows if r[1] == "test"]
        test_inst = [r for r in inst_rows if r[2] == "test" and r[3] != ""]
        for name, rows, li in (("report", test_rep, 2), ("instance", test_inst, 3)):
            try:
                s = ScoredSet(np.array([r[-1] for r in rows]), np.array([int(r[li]) for r in rows]))
                metrics[name] = metric_report(s, seed=cfg["seed"]).to_dict()
            except (MetricError, ValueError) as e:
                metrics[name] = {"error": str(e)}
        _json(d / "metrics.json", metrics)

    return run_stage(run, "train-mil", cfg, ["mil"], [manifest, labels_path], body, args.force)


def _segmenter(cfg: dict, manifest: Path):
    from .adapter import AdapterSegmenter
    from .sam_distill import oracle_segmenter

    dc = cfg["distill"]
    if dc["segmenter"] == "oracle":
        truth = _truth_beside(manifest)
        if truth is None:
            raise DataError("the oracle segmenter needs truth.json beside the manifest")
        return oracle_segmenter(_truth_masks(truth), dc["oracle_radius"], dc["oracle_mode"], cfg["seed"])
    if dc["segmenter"] == "adapter":
        if not dc["adapter_command"]:
            raise C.ConfigError("distill.adapter_command is empty")
        return AdapterSegmenter(dc["adapter_command"])
    raise C.ConfigError(f"unknown segmenter {dc['segmenter']!r} (expected 'oracle' or 'adapter')")


def cmd_distill_masks(cfg: dict, run: RunDir, args) -> Path:
    from . import mil, sam_distill as sd, wsss
    from .eval import iou
    from .imaging import write_gray
    from .plots import write_csv

    if args.segmenter:
        cfg = C.merge(cfg, {"distill": {"segmenter": args.segmenter}})
    manifest = run.require("synth", "manifest.tsv", args.manifest)
    ckpt = run.require("train-mil", "mil.safetensors", args.checkpoint)
    if not ckpt.is_file():
        raise CheckpointError(f"checkpoint not found: {ckpt}")
    segmenter = _segmenter(cfg, manifest)

    def body(d: Path):
        wc, dc = cfg["wsss"], cfg["distill"]
        model, _ = mil.load_mil(ckpt)
        records = load_manifest(manifest)
        frames = _load_frames(records, manifest.parent)
        ids = sorted(frames)
        scores = np.concatenate(
            [mil.predict_instance(model, np.stack([frames[i].pixels for i in ids[k : k + 256]])) for k in range(0, len(ids), 256)]
        )
        pos = [i for i, s in zip(ids, scores) if s >= wc["positive_threshold"]]
        neg = [i for i, s in zip(ids, scores) if s < wc["positive_threshold"]]
        if not pos:
            raise DataError("the MIL model flags no positive frames")
        rng = np.random.default_rng(cfg["seed"])
        if len(neg) > wc["max_negatives"]:
            neg = sorted(rng.choice(neg, size=wc["max_negatives"], replace=False).tolist())
        train_ids = pos + neg
        x = np.stack([frames[i].pixels for i in train_ids])
        y = np.array([1] * len(pos) + [0] * len(neg))
        torch.manual_seed(cfg["seed"])
        vit = wsss.PatchViT(wsss.ViTConfig(**wc["vit"]))
        tcfg = wsss.WSSSTrainConfig(**wc["train"], seed=cfg["seed"])
        vit, hist = wsss.train_wsss(vit, x, y, tcfg)
        wsss.save_vit(d / "wsss.safetensors", vit, tcfg)
        write_csv(d / "wsss_log.csv", ["step", "cls", "ptc", "aux", "total"],
                  [(h["step"], h["cls"], h["ptc"], h["aux"], h["total"]) for h in hist])

        cams, _ = wsss.predict_cams(vit, np.stack([frames[i].pixels for i in pos]))
        (d / "cams").mkdir()
        boxes = {}
        for iid, cam in zip(pos, cams):
            h, w = frames[iid].shape
            write_gray(d / "cams" / f"{iid}.png", wsss.upsample_cam(cam, h, w))
            b = wsss.cam_to_boxes(cam, (h, w), wc["theta"], wc["min_area"])
            if b:
                boxes[iid] = b
        wsss.write_boxes_csv(d / "boxes.csv", boxes)
        if not boxes:
            raise DataError("no CAM produced a box")

        truth = _truth_beside(manifest)
        tmasks = _truth_masks(truth) if truth else None
        torch.manual_seed(cfg["seed"])
        seg_model = sd.SegmentationModel(sd.UNetConfig(**dc["unet"]))
        rcfg = sd.RefineConfig(dc["max_iters"], dc["eps"], dc["box_margin"], dc["max_workers"],
                               sd.SegTrainConfig(**dc["seg"], seed=cfg["seed"]))
        images = {i: frames[i] for i in boxes}
        final, history = sd.refine_loop(segmenter, seg_model, images, boxes, rcfg,
                                        {i: tmasks[i] for i in boxes} if tmasks else None)
        sd.write_masks(d / "masks", final)
        sd.write_iteration_report(d / "iteration_report.csv", history)
        sd.save_seg(d / "seg.safetensors", seg_model)
        metrics = {
            "n_frames": len(ids),
            "n_predicted_positive": len(pos),
            "n_boxed": len(boxes),
            "iterations": len(history),
            "final_mean_mask_change": history[-1].mean_mask_change,
            "segmenter_failures": history[-1].failures,
        }
        if tmasks:
            metrics["final_model_dice"] = history[-1].model_dice
            metrics["final_pseudo_dice"] = history[-1].pseudo_dice
            lesion = [i for i, c in zip(pos, cams) if tmasks[i].any()]
            ious = [iou(wsss.upsample_cam(c, *frames[i].shape) >= wc["theta"], tmasks[i]) for i, c in zip(pos, cams) if i in lesion]
            metrics["cam_iou_mean"] = float(np.mean(ious)) if ious else None
        _json(d / "metrics.json", metrics)

    try:
        return run_stage(run, "distill-masks", cfg, ["wsss", "distill"], [manifest, ckpt], body, args.force)
    finally:
        if hasattr(segmenter, "close"):
            segmenter.close()


def cmd_train_seg(cfg: dict, run: RunDir, args) -> Path:
    from . import sam_distill as sd
    from .eval import dice
    from .imaging import read_mask
    from .plots import write_csv

    manifest = run.require("synth", "manifest.tsv", args.manifest)
    masks_dir = run.require("distill-masks", "masks", args.masks)
    eval_manifest = Path(args.eval_manifest) if args.eval_manifest else manifest

    def body(d: Path):
        if not masks_dir.is_dir():
            raise DataError(f"mask directory not found: {masks_dir}")
        mask_files = sorted(masks_dir.glob("*.png"))
        if not mask_files:
            raise DataError(f"no mask PNGs in {masks_dir}")
        frames = _load_frames(load_manifest(manifest), manifest.parent)
        missing = [f.stem for f in mask_files if f.stem not in frames]
        if missing:
            raise DataError(f"{len(missing)} mask(s) have no image in the manifest, e.g. {missing[0]}")
        x = np.stack([frames[f.stem].pixels for f in mask_files])
        y = np.stack([read_mask(f) for f in mask_files])
        sc = cfg["seg"]
        torch.manual_seed(cfg["seed"])
        model = sd.SegmentationModel(sd.UNetConfig(**sc["unet"]))
        model, losses = sd.train_seg_model(model, x, y, sd.SegTrainConfig(**sc["train"], seed=cfg["seed"]))
        sd.save_seg(d / "seg.safetensors", model)
        write_csv(d / "train_log.csv", ["step", "loss"], list(enumerate(losses)))
        metrics = {"n_train": len(mask_files)}
        truth = _truth_beside(eval_manifest)
        if truth:
            tm = _truth_masks(truth)
            eframes = _load_frames(load_manifest(eval_manifest), eval_manifest.parent)
            trained = {f.stem for f in mask_files}
            ev = sorted(i for i in eframes if i in tm and tm[i].any() and i not in trained)
            if ev:
                pred = sd.predict_masks(model, np.stack([eframes[i].pixels for i in ev]))
                metrics["eval_dice"] = float(np.mean([dice(p, tm[i]) for p, i in zip(pred, ev)]))
                metrics["n_eval"] = len(ev)
        _json(d / "metrics.json", metrics)

    return run_stage(run, "train-seg", cfg, ["seg"], [manifest, masks_dir, eval_manifest], body, args.force)


def _biopsy_data(cfg: dict, pathology_manifest: Path | None):
    from .biopsy import LabeledImages
    from .synth import SynthConfig, generate_biopsy

    bc = cfg["biopsy"]
    if pathology_manifest is None:
        scfg = SynthConfig(**cfg["synth"])
        a = generate_biopsy(bc["n_pool"], scfg, seed=bc["data_seed"])
        b = generate_biopsy(bc["n_test"], scfg, seed=bc["data_seed"] + 1)
        return LabeledImages(a.images, a.labels), {"synthetic": LabeledImages(b.images, b.labels)}
    records = [r for r in load_manifest(pathology_manifest) if r.pathology_outcome is not None]
    if not records:
        raise DataError(f"{pathology_manifest}: no record carries a pathology outcome")
    pool_ids, test_ids = (s.record_ids for s in split_dataset(records, {"pool": 0.5, "test": 0.5}, cfg["seed"]))
    from .records import load_image

    def gather(ids):
        imgs, labs, names = [], [], []
        for rec in records:
            if rec.record_id not in ids:
                continue
            flags = rec.expert_image_labels or (1,) * len(rec.image_refs)
            for ref, f in zip(rec.image_refs, flags):
                if f:
                    imgs.append(load_image(rec, ref, pathology_manifest.parent).pixels)
                    labs.append(rec.pathology_outcome.malignant)
                    names.append(image_id_from_ref(ref))
        if not imgs:
            raise DataError("pathology split has no lesion frames")
        return LabeledImages(np.stack(imgs), np.array(labs), tuple(names))

    return gather(pool_ids), {"held_out": gather(test_ids)}


def cmd_finetune_biopsy(cfg: dict, run: RunDir, args) -> Path:
    from . import biopsy as bp
    from . import mil
    from .plots import write_csv

    ckpt = run.require("train-mil", "mil.safetensors", args.checkpoint)
    if not ckpt.is_file():
        raise CheckpointError(f"checkpoint not found: {ckpt}")
    pm = Path(args.pathology_manifest) if args.pathology_manifest else None

    def body(d: Path):
        bc = cfg["biopsy"]
        model, _ = mil.load_mil(ckpt)
        enc_cfg = model.cfg.encoder
        arms = {"pretrained": model.encoder, "random": lambda s: bp.random_encoder(enc_cfg, seed=s)}
        pool, tests = _biopsy_data(cfg, pm)
        fcfg = bp.FinetuneConfig(**bc["finetune"], seed=cfg["seed"])
        plan = bp.FewShotPlan(bc["shot_sizes"], bc["repetitions"], cfg["seed"])
        rep_rows, metrics = [], {}
        for arm, enc in arms.items():
            rows = bp.run_few_shot(plan, enc, pool, tests, fcfg,
                                   on_rep=lambda k, r, got, arm=arm: rep_rows.extend((arm, k, r, t, a) for t, a in sorted(got.items())))
            bp.write_curve_csv(d / f"curve_{arm}.csv", rows)
            base = enc if isinstance(enc, torch.nn.Module) else enc(cfg["seed"])
            clf = bp.build_finetune_model(base, seed=cfg["seed"])
            bp.finetune(clf, pool.images, pool.labels, fcfg)
            if arm == "pretrained":
                from .checkpoint import save_checkpoint

                save_checkpoint(d / "biopsy.safetensors", clf.state_dict(), {"kind": "biopsy", "encoder": model.cfg.encoder.to_dict()})
            for name, ts in tests.items():
                s = ScoredSet(bp.predict_proba(clf, ts.images), ts.labels)
                fpr, tpr, thr = roc_curve_points(s)
                write_csv(d / f"roc_{arm}_{name}.csv", ["fpr", "tpr", "threshold"], list(zip(fpr, tpr, thr)))
                metrics[f"{arm}/{name}"] = metric_report(s, seed=cfg["seed"]).to_dict()
        write_csv(d / "repetitions.csv", ["arm", "shot_size", "repetition", "test_set", "auc"], rep_rows)
        _json(d / "metrics.json", metrics)

    return run_stage(run, "finetune-biopsy", cfg, ["biopsy", "synth"], [ckpt, pm], body, args.force)


def _read_csv(path: Path) -> list[dict]:
    import csv

    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_report(cfg: dict, run: RunDir, args) -> Path:
    from . import plots
    from .biopsy import read_curve_csv
    from .imaging import read_rgb
    from PIL import Image

    stages = {s: run.lookup(s) for s in ("train-mil", "distill-masks", "finetune-biopsy", "extract-labels", "train-seg")}
    stages = {k: v for k, v in stages.items() if v is not None}
    if not stages:
        raise DataError(f"{run.root}: no finished stages to report on")

    def body(d: Path):
        metrics = {}
        for name, sd in sorted(stages.items()):
            if (sd / "metrics.json").is_file():
                metrics[name] = json.loads((sd / "metrics.json").read_text())
        if "train-mil" in stages:
            curves, rows = {}, []
            for level, fname, li in (("report", "report_scores.csv", "label"), ("instance", "instance_scores.csv", "label")):
                recs = [r for r in _read_csv(stages["train-mil"] / fname) if r["split"] == "test" and r[li] != ""]
                try:
                    s = ScoredSet(np.array([float(r["score"]) for r in recs]), np.array([int(r[li]) for r in recs]))
                    fpr, tpr, _ = roc_curve_points(s)
                except (MetricError, ValueError):
                    continue
                from .eval import roc_auc

                curves[level] = (fpr, tpr, roc_auc(s))
                rows += [(level, a, b) for a, b in zip(fpr, tpr)]
            if curves:
                plots.write_csv(d / "roc_mil.csv", ["level", "fpr", "tpr"], rows)
                plots.roc_figure(d / "roc_mil.svg", curves, "Lesion detection (held-out)")
        if "finetune-biopsy" in stages:
            bd = stages["finetune-biopsy"]
            arms = {p.stem[len("curve_"):]: read_curve_csv(p) for p in sorted(bd.glob("curve_*.csv"))}
            plots.write_csv(d / "data_efficiency.csv", ["arm", "shot_size", "test_set", "mean_auc", "sd_auc", "n_reps"],
                            [(a, r.shot_size, r.test_set, r.mean_auc, r.sd_auc, r.n_reps) for a in sorted(arms) for r in arms[a]])
            plots.curve_figure(d / "data_efficiency.svg", arms, "Optical biopsy data efficiency")
            curves, rows = {}, []
            for p in sorted(bd.glob("roc_*.csv")):
                rr = _read_csv(p)
                fpr = np.array([float(r["fpr"]) for r in rr])
                tpr = np.array([float(r["tpr"]) for r in rr])
                name = p.stem[len("roc_"):]
                curves[name] = (fpr, tpr, float(np.trapezoid(tpr, fpr)))
                rows += [(name, a, b) for a, b in zip(fpr, tpr)]
            if curves:
                plots.write_csv(d / "roc_biopsy.csv", ["arm_test_set", "fpr", "tpr"], rows)
                plots.roc_figure(d / "roc_biopsy.svg", curves, "Optical biopsy")
        if "distill-masks" in stages:
            dd = stages["distill-masks"]
            it = _read_csv(dd / "iteration_report.csv")
            xs = [int(r["iteration"]) for r in it]
            ys = {k: [float(r[k]) if r[k] else float("nan") for r in it] for k in ("pseudo_dice", "model_dice")}
            plots.write_csv(d / "dice_by_iteration.csv", ["iteration", "pseudo_dice", "model_dice"],
                            list(zip(xs, ys["pseudo_dice"], ys["model_dice"])))
            if any(not np.isnan(v) for v in ys["model_dice"]):
                plots.series_figure(d / "dice_by_iteration.svg", xs, ys, "iteration", "DSC vs truth", "Mask refinement")
            cam_files = sorted((dd / "cams").glob("*.png"))[: cfg["report"]["cam_examples"]]
            if cam_files:
                manifest_dir = None
                synth_dir = run.lookup("synth")
                if synth_dir is not None:
                    manifest_dir = synth_dir / "images"
                imgs, cams, titles = [], [], []
                for f in cam_files:
                    with Image.open(f) as im:
                        cam = np.asarray(im, dtype=np.float64) / 255.0
                    img_path = manifest_dir / f.name if manifest_dir else None
                    imgs.append(read_rgb(img_path) if img_path and img_path.is_file() else np.zeros((*cam.shape, 3), np.uint8))
                    cams.append(cam)
                    titles.append(f.stem)
                plots.write_csv(d / "cam_overlays.csv", ["image_id", "cam_png"], [(f.stem, str(f.relative_to(run.root))) for f in cam_files])
                plots.cam_overlay_figure(d / "cam_overlays.svg", imgs, cams, titles)
        _json(d / "metrics.json", metrics)

    inputs = [stages[s] / "metrics.json" if (stages[s] / "metrics.json").is_file() else None for s in sorted(stages)]
    return run_stage(run, "report", cfg, ["report"], inputs, body, True)


# -- entry point ------------------------------------------------------------------

COMMANDS = {
    "synth": cmd_synth,
    "extract-labels": cmd_extract_labels,
    "train-mil": cmd_train_mil,
    "distill-masks": cmd_distill_masks,
    "train-seg": cmd_train_seg,
    "finetune-biopsy": cmd_finetune_biopsy,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON config file")
    common.add_argument("--out", default="run", help="run directory (default: ./run)")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--force", action="store_true", help="recompute even if the stage is up to date")
    common.add_argument("overrides", nargs="*", metavar="KEY=VALUE", help="dotted config overrides, e.g. mil.epochs=5")

    p = argparse.ArgumentParser(prog="colodistill", description="Weak-label distillation pipeline for colonoscopy records.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s = sub.add_parser("extract-labels", parents=[common], help="report text -> report-level labels")
    s.add_argument("--manifest")
    s.add_argument("--extractor", help="rule | llm")
    s = sub.add_parser("train-mil", parents=[common], help="teacher/student MIL training")
    s.add_argument("--manifest")
    s.add_argument("--labels")
    s = sub.add_parser("distill-masks", parents=[common], help="CAM boxes -> segmenter prompts -> refined masks")
    s.add_argument("--manifest")
    s.add_argument("--checkpoint")
    s.add_argument("--segmenter", help="oracle | adapter")
    s = sub.add_parser("train-seg", parents=[common], help="train a segmentation model on mask PNGs")
    s.add_argument("--manifest")
    s.add_argument("--masks")
    s.add_argument("--eval-manifest")
    s = sub.add_parser("finetune-biopsy", parents=[common], help="few-shot optical biopsy fine-tuning")
    s.add_argument("--checkpoint")
    s.add_argument("--pathology-manifest")
    sub.add_parser("report", parents=[common], help="plots and consolidated metrics for a run directory")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    run = RunDir(args.out)
    handlers = [logging.StreamHandler(sys.stderr)]
    handlers[0].setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    try:
        cfg = C.resolve(args.config, args.overrides, args.seed)
        with run.lock():
            fh = logging.FileHandler(run.root / "colodistill.log", encoding="utf-8")
            fh.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
            handlers.append(fh)
            root = logging.getLogger()
            for h in handlers:
                root.addHandler(h)
            root.setLevel(logging.INFO)
            try:
                out = COMMANDS[args.command](cfg, run, args)
            finally:
                for h in handlers:
                    root.removeHandler(h)
                fh.close()
        print(out)
        return EXIT_OK
    except C.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericFailure as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ManifestError, MissingLabelError, CheckpointError, MetricError, ExtractionFailed,
            AmbiguousResponse, RefinementError, FileNotFoundError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
