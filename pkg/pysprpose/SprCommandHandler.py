import json
import math
import os
import re
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .SprBaseHandler import PROG, SprBaseHandler
from .bench import ScalingGrid, machine_descriptor, run_scaling_study
from .datasets import PoseDataset, load_dataset, predictions_dataset, write_dataset
from .decoder import DecoderConfig, benchmark_decode, decode
from .encoder import (
    HIERARCHICAL, VANILLA, ConfidenceMap, DisplacementMapStack, EncoderConfig, canonical_mode, encode_scene,
)
from .errors import DataError, ModeMismatchError, StorageError, UsageError, exit_code_for
from .evaluation import as_predictions, match_by_root, mean_ap, pck3d
from .loss import LossConfig
from .model import ToyRegressor, TrainConfig, build_training_set, predict, save_checkpoint, train_toy
from .representation import Scene
from .skeleton import default_toy6, resolve, to_dict
from .synth import (
    SynthConfig, generate_dataset, generate_scene, perturb_displacement_maps, roundtrip_config, write_ppm,
)
from .tensorio import atomic_write_text, read_tensor, write_tensor

MANIFEST = "manifest.json"
MANIFEST_VERSION = 1


def _usage(factory, **kwargs):
    """Build a config object, reporting invalid flag values as usage errors."""
    try:
        return factory(**kwargs)
    except ValueError as e:
        raise UsageError(str(e))


def _stem(image_id, index):
    cleaned = re.sub(r"[^A-Za-z0-9_.-]+", "_", str(image_id)).strip("._")
    return "{0:05d}-{1}".format(index, cleaned) if cleaned else "{0:05d}".format(index)


def _skeleton_ref(ref, spec):
    return ref if isinstance(ref, str) else to_dict(spec)


def _max_joint_error(decoded, gts):
    """Largest joint error over root-matched persons; None if a joint went missing."""
    worst = 0.0
    for i, g in match_by_root(decoded, gts, gate=float("inf")):
        pose, gt = decoded[i].pose, gts[g]
        if (gt.visible & ~pose.visible).any():
            return None
        both = gt.visible & pose.visible
        if both.any():
            worst = max(worst, float(np.linalg.norm(pose.coords[both] - gt.coords[both], axis=1).max()))
    return worst


class SprCommandHandler(SprBaseHandler):
    """
    The spr-pose command set.  Images are processed concurrently on a
    thread pool sized by SPR_POSE_THREADS; every output file is written
    atomically and the encode manifest is written last.
    """

    def __init__(self, workers=None, **kwargs):
        super(SprCommandHandler, self).__init__(workers=workers, **kwargs)

    def on_processing_error(self, argv, exc):
        code = exit_code_for(exc)
        message = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        self.err.write("{0}: E{1} {2}: {3}\n".format(PROG, code, type(exc).__name__, message))
        return code

    def _map(self, fn, items):
        items = list(items)
        if self.workers == 1 or len(items) < 2:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(fn, items))

    # --------------- encode / decode ----------------------
    def on_encode(self, args):
        mode = canonical_mode(args.mode)
        dataset = load_dataset(args.dataset)
        spec = dataset.skeleton
        _usage(EncoderConfig, map_height=1, map_width=1, sigma=args.sigma, tau=args.tau,
               stride=args.stride, tau_mode=args.tau_mode)

        def encode(scene):
            cfg = EncoderConfig.for_image(scene.image_height, scene.image_width, stride=args.stride,
                                          sigma=args.sigma, tau=args.tau, tau_mode=args.tau_mode)
            cmap, dstack, roots = encode_scene(scene, spec, mode, cfg)
            return cfg, cmap, dstack, roots

        # every scene is encoded before the first file is written
        encoded = self._map(encode, dataset.scenes)
        try:
            os.makedirs(args.out, exist_ok=True)
        except OSError as e:
            raise StorageError("Cannot create {0}: {1}".format(args.out, e))

        def write(item):
            index, (scene, (cfg, cmap, dstack, roots)) = item
            stem = _stem(scene.image_id, index)
            write_tensor(os.path.join(args.out, stem + ".conf.spmt"), cmap.values)
            write_tensor(os.path.join(args.out, stem + ".disp.spmt"), dstack.to_tensor())
            return {"id": scene.image_id, "width": scene.image_width, "height": scene.image_height,
                    "map_height": cfg.map_height, "map_width": cfg.map_width,
                    "conf": stem + ".conf.spmt", "disp": stem + ".disp.spmt", "persons": len(roots)}

        entries = self._map(write, enumerate(zip(dataset.scenes, encoded)))
        manifest = self._build_report(
            "encode", version=MANIFEST_VERSION, mode=mode, sigma=args.sigma, tau=args.tau,
            tau_mode=args.tau_mode, stride=args.stride, depth_norm=EncoderConfig(1, 1).depth_norm,
            skeleton=_skeleton_ref(dataset.skeleton_ref, spec), dim=spec.dim, num_joints=spec.num_joints,
            images=entries)
        atomic_write_text(os.path.join(args.out, MANIFEST), json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        self.logger.info("Encoded %d images into %s (%s)", len(entries), args.out, mode)
        return 0

    def _read_manifest(self, directory):
        path = os.path.join(directory, MANIFEST)
        try:
            with open(path, "r", encoding="utf-8") as fh:
                manifest = json.load(fh)
        except OSError as e:
            raise StorageError("Cannot read {0}: {1}".format(path, e))
        except ValueError as e:
            raise DataError("{0}: invalid manifest: {1}".format(path, e))
        for key in ("version", "mode", "sigma", "tau", "tau_mode", "stride", "depth_norm", "skeleton", "images"):
            if key not in manifest:
                raise DataError("{0}: manifest is missing '{1}'".format(path, key))
        if manifest["version"] != MANIFEST_VERSION:
            raise DataError("{0}: unsupported manifest version {1}".format(path, manifest["version"]))
        return manifest

    def on_decode(self, args):
        manifest = self._read_manifest(args.maps)
        requested = canonical_mode(args.mode)
        if manifest["mode"] != requested:
            raise ModeMismatchError("mode mismatch: maps in {0} were encoded as {1}, --mode {2} requested".format(
                args.maps, manifest["mode"], requested))
        spec = resolve(manifest["skeleton"])
        nms = _usage(DecoderConfig, window=args.nms_window, threshold=args.threshold,
                     max_peaks=args.max_peaks, refine=args.refine)

        def work(entry):
            cfg = EncoderConfig(map_height=entry["map_height"], map_width=entry["map_width"],
                                sigma=manifest["sigma"], tau=manifest["tau"], stride=manifest["stride"],
                                tau_mode=manifest["tau_mode"], depth_norm=manifest["depth_norm"],
                                image_height=entry["height"], image_width=entry["width"])
            conf = read_tensor(os.path.join(args.maps, entry["conf"])).astype(np.float64)
            disp = read_tensor(os.path.join(args.maps, entry["disp"]))
            dstack = DisplacementMapStack.from_tensor(disp, spec.dim, spec.num_joints, manifest["mode"])
            return decode(ConfidenceMap(conf), dstack, cfg, spec, nms)

        decoded = self._map(work, manifest["images"])
        scenes = [Scene(image_height=e["height"], image_width=e["width"], dim=spec.dim, image_id=e["id"])
                  for e in manifest["images"]]
        write_dataset(args.out, predictions_dataset(spec, scenes, decoded, skeleton_ref=manifest["skeleton"]))
        self.logger.info("Decoded %d persons from %d images", sum(len(d) for d in decoded), len(decoded))
        return 0

    # --------------- experiments ----------------------
    def on_roundtrip(self, args):
        mode = canonical_mode(args.mode)
        spec = resolve(args.skeleton)
        if args.n < 1:
            raise UsageError("--n must be >= 1")
        synth_cfg = _usage(roundtrip_config, seed=args.synth_seed, image_size=args.image_size,
                           max_persons=args.max_persons, stride=args.stride, sigma=args.sigma, tau=args.tau,
                           mode=mode, skeleton=spec)
        nms = _usage(DecoderConfig, window=args.nms_window, threshold=args.threshold,
                     max_peaks=max(args.max_peaks, args.max_persons), refine=args.refine)

        def work(index):
            scene, _ = generate_scene(synth_cfg, index)
            cfg = EncoderConfig.for_image(scene.image_height, scene.image_width, stride=args.stride,
                                          sigma=args.sigma, tau=args.tau, tau_mode=args.tau_mode)
            cmap, dstack, _ = encode_scene(scene, spec, mode, cfg)
            decoded = decode(cmap, dstack, cfg, spec, nms)
            matched = len(match_by_root(decoded, scene.persons, gate=float("inf")))
            return {"scene": index, "persons": scene.num_persons, "decoded": len(decoded),
                    "matched": min(matched, scene.num_persons), "max_error_px": _max_joint_error(decoded, scene.persons)}

        rows = self._map(work, range(args.n))
        errors = [r["max_error_px"] for r in rows]
        total = sum(r["persons"] for r in rows)
        recovered = sum(r["matched"] for r in rows if r["decoded"] == r["persons"])
        report = self._build_report(
            "roundtrip", mode=mode, seed=args.synth_seed, n=args.n, stride=args.stride, skeleton=spec.name,
            max_error_px=None if any(e is None for e in errors) else max(errors),
            persons_recovered=float(recovered) / total if total else 1.0,
            scenes_exact=sum(1 for r in rows if r["decoded"] == r["persons"] == r["matched"]),
            scenes=rows)
        self._emit(report, args.report)
        return 0

    def on_tau_sweep(self, args):
        mode = canonical_mode(args.mode)
        if args.step <= 0 or args.tau_to < args.tau_from or args.tau_from < 0:
            raise UsageError("need 0 <= --from <= --to and --step > 0")
        spec = default_toy6()
        synth_cfg = _usage(SynthConfig, seed=args.synth_seed, min_persons=2, max_persons=4, image_height=96,
                           image_width=96, skeleton=spec, overlap=args.overlap, render=False, sigma=args.sigma)
        samples = generate_dataset(synth_cfg, args.n)
        scenes = [s for s, _ in samples]
        taus = np.arange(args.tau_from, args.tau_to + args.step / 2.0, args.step)

        def work(tau):
            preds, multi, defined, cells = [], 0, 0, 0
            for scene in scenes:
                cfg = EncoderConfig.for_image(scene.image_height, scene.image_width, sigma=args.sigma,
                                              tau=float(tau), tau_mode=args.tau_mode)
                cmap, dstack, _ = encode_scene(scene, spec, mode, cfg)
                multi += int((dstack.contributors > 1).sum())
                defined += int(dstack.defined_mask.sum())
                cells += dstack.contributors.size
                preds.append(decode(cmap, dstack, cfg, spec, DecoderConfig()))
            report = mean_ap(preds, [list(s.persons) for s in scenes], spec)
            return {"tau": float(tau), "map": report.total_map, "overlap_fraction": float(multi) / cells,
                    "defined_overlap_fraction": float(multi) / defined if defined else 0.0,
                    "supervised_fraction": float(defined) / cells}

        rows = self._map(work, taus)
        report = self._build_report("tau-sweep", mode=mode, tau_mode=args.tau_mode, seed=args.synth_seed,
                                    n=args.n, overlap=args.overlap, rows=rows)
        self._emit(report, args.report)
        return 0

    def on_compare_modes(self, args):
        spec = resolve(args.skeleton)
        if spec.dim != 2:
            raise DataError("compare-modes needs a 2D skeleton")
        clearance = 2.0 * (math.sqrt(args.tau) + 1.0)
        synth_cfg = _usage(SynthConfig, seed=args.synth_seed, min_persons=1, max_persons=3, image_height=192,
                           image_width=192, skeleton=spec, limb_lengths=((12.0, 18.0), (18.0, 28.0), (18.0, 28.0)),
                           render=False, joint_clearance=clearance, max_attempts=500)
        scenes = [s for s, _ in generate_dataset(synth_cfg, args.n)]
        gts = [list(s.persons) for s in scenes]
        rows = []
        for mode in (VANILLA, HIERARCHICAL):
            preds, errors = [], []
            for index, scene in enumerate(scenes):
                cfg = EncoderConfig.for_image(scene.image_height, scene.image_width, tau=args.tau)
                cmap, dstack, _ = encode_scene(scene, spec, mode, cfg)
                noisy = perturb_displacement_maps(dstack, args.relative_noise, seed=args.synth_seed * 1000 + index)
                decoded = decode(cmap, noisy, cfg, spec, DecoderConfig())
                preds.append(decoded)
                for i, g in match_by_root(decoded, scene.persons, gate=float("inf")):
                    both = decoded[i].pose.visible & scene.persons[g].visible
                    errors.extend(np.linalg.norm(decoded[i].pose.coords[both] - scene.persons[g].coords[both], axis=1))
            report = mean_ap(preds, gts, spec)
            rows.append({"mode": mode, "map": report.total_map, "total_pck": report.total_pck,
                         "mean_error_px": float(np.mean(errors)) if errors else None})
        result = self._build_report("compare-modes", skeleton=spec.name, n=args.n, tau=args.tau,
                                    relative_noise=args.relative_noise, rows=rows)
        self._emit(result, args.report)
        return 0

    def on_train_toy(self, args):
        mode = canonical_mode(args.mode)
        spec = default_toy6()
        if args.scenes < 1:
            raise UsageError("--scenes must be >= 1")
        synth_cfg = _usage(SynthConfig, seed=args.synth_seed, min_persons=1, max_persons=args.max_persons,
                           image_height=args.size, image_width=args.size, skeleton=spec, render=True)
        samples = generate_dataset(synth_cfg, args.scenes)
        enc_cfg = EncoderConfig.for_image(args.size, args.size)
        data = build_training_set(samples, spec, mode, enc_cfg)
        model = _usage(ToyRegressor, num_joints=spec.num_joints, stages=args.stages, seed=args.seed)
        train_cfg = _usage(TrainConfig, learning_rate=args.lr, epochs=args.epochs, seed=args.seed,
                           milestones=args.milestones, loss=_usage(LossConfig, beta=args.beta),
                           progress=args.progress)
        model, history = train_toy(model, data, train_cfg)
        save_checkpoint(model, args.out, epoch=args.epochs, extra={"mode": mode, "skeleton": spec.name})
        history_path = args.history or args.out + ".loss.tsv"
        atomic_write_text(history_path, "".join("{0}\t{1:.9g}\n".format(e, v) for e, v in enumerate(history)))
        preds = [predict(model, image, enc_cfg, spec, mode) for image, _ in data]
        scores = mean_ap(preds, [list(s.persons) for s, _ in samples], spec)
        report = self._build_report("train-toy", epochs=args.epochs, stages=args.stages, mode=mode,
                                    parameters=model.num_parameters, initial_loss=history[0],
                                    final_loss=history[-1], train_pckh=scores.total_pck, train_map=scores.total_map,
                                    checkpoint=args.out, history=history_path)
        self._emit(report, None)
        return 0

    # --------------- evaluation and benchmarks ----------------------
    def on_eval(self, args):
        pred = load_dataset(args.pred)
        gt = load_dataset(args.gt)
        spec = gt.skeleton
        if pred.skeleton.joint_names != spec.joint_names:
            raise DataError("Prediction skeleton '{0}' does not match ground truth skeleton '{1}'".format(
                pred.skeleton.name, spec.name))
        by_id = {s.image_id: i for i, s in enumerate(pred.scenes)}
        if len(by_id) != len(pred.scenes) or set(by_id) != {s.image_id for s in gt.scenes}:
            raise DataError("Prediction and ground truth files cover different images")
        preds = []
        for scene in gt.scenes:
            i = by_id[scene.image_id]
            scores = pred.scores[i] if pred.scores is not None else None
            preds.append(as_predictions(list(pred.scenes[i].persons), scores))
        gts = gt.poses()
        if args.metric == "pck3d":
            if spec.dim != 3 or pred.dim != 3:
                raise DataError("pck3d needs 3D files, got {0}D ground truth".format(spec.dim))
            report = pck3d(preds, gts, spec, radius=args.radius)
        else:
            report = mean_ap(preds, gts, spec, gt.reference_lengths(), alpha=args.alpha)
        self._say(report.table())
        if args.report:
            self._emit(self._build_report("eval", **report.to_dict()), args.report)
        return 0

    def on_bench(self, args):
        if args.reps < 1 or args.k < 1 or args.n < 0:
            raise UsageError("need --reps >= 1, --k >= 1 and --n >= 0")
        result = benchmark_decode(args.height, args.width, args.k, args.n, args.reps, args.mode, args.seed)
        self._emit(self._build_report("bench", machine=machine_descriptor(), **result.to_dict()))
        return 0

    def on_scaling(self, args):
        grid = _usage(ScalingGrid, persons=args.persons, joints=args.joints, resolutions=args.resolutions,
                      repetitions=args.reps, workers=args.workers or self.workers)
        report = run_scaling_study(grid)
        self._say(report.summary_table())
        if args.report:
            self._emit(report.to_dict(), args.report)
        return 0

    def on_synth(self, args):
        spec = resolve(args.skeleton)
        cfg = _usage(SynthConfig, seed=args.synth_seed, min_persons=args.min_persons, max_persons=args.max_persons,
                     image_height=args.size, image_width=args.size, skeleton=spec, overlap=args.overlap,
                     render=not args.no_render, dim=spec.dim)
        samples = generate_dataset(cfg, args.n)
        images_dir = os.path.join(args.out, "images")
        try:
            os.makedirs(images_dir, exist_ok=True)
        except OSError as e:
            raise StorageError("Cannot create {0}: {1}".format(images_dir, e))
        for scene, image in samples:
            if image is not None:
                write_ppm(os.path.join(images_dir, scene.image_id + ".ppm"), image)
        write_dataset(os.path.join(args.out, "dataset.json"),
                      PoseDataset(skeleton=spec, scenes=[s for s, _ in samples], skeleton_ref=args.skeleton))
        self.logger.info("Wrote %d synthetic scenes to %s", len(samples), args.out)
        return 0
