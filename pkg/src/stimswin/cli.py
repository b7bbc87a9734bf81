"""Command-line entry point: ``stimswin {gen-data,train,eval,cv,viz} --config FILE``.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 non-finite loss.
Failures print one ``error: <kind>: <message>`` line on stderr.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import re
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import CLASS_NAMES, DataError, generate_dataset, load_manifest
from .training import ConfigError, NonFiniteLoss, RunConfig, cross_validate, evaluate, train_one_model

VERBS = ("gen-data", "train", "eval", "cv", "viz")

DEFAULTS = {
    **RunConfig().to_dict(),
    "init_checkpoint": None,
    "checkpoint": None,
    "data": {
        "manifest": None,
        "videos_per_class": 60,
        "n_frames": 16,
        "frame_size": [36, 36],
        "noise_std": 0.03,
        "seed": 0,
    },
    "viz": {"max_clips": 4},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stimswin", description=__doc__.splitlines()[0])
    p.add_argument("verb", help="one of: " + ", ".join(VERBS))
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--out", default=None, help="output directory (default: $OUT_DIR or ./out)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1, help="parallel folds for cv")
    p.add_argument("--overrides", default="", help="comma-separated dotted key=value pairs")
    return p


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, overrides: str) -> dict:
    cfg = copy.deepcopy(cfg)
    # a comma only starts a new pair when a dotted key and "=" follow, so list values survive
    for item in filter(None, (s.strip() for s in re.split(r",(?=\s*[A-Za-z_][\w.]*=)", overrides))):
        if "=" not in item:
            raise UsageError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        node = cfg
        parts = key.strip().split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"override key {key!r} does not exist")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"override key {key!r} does not exist")
        node[parts[-1]] = _parse_value(value)
    return cfg


def resolve_config(path, overrides: str = "", seed: int | None = None) -> dict:
    try:
        user = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc.msg}") from exc
    if not isinstance(user, dict):
        raise ConfigError("config must be a JSON object")
    cfg = copy.deepcopy(DEFAULTS)
    for key, value in user.items():
        if key not in cfg:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(cfg[key], dict) and key != "model":
            if not isinstance(value, dict):
                raise ConfigError(f"config key {key!r} must be an object")
            unknown = set(value) - set(cfg[key])
            if unknown:
                raise ConfigError(f"unknown keys under {key!r}: {sorted(unknown)}")
            cfg[key].update(value)
        else:
            cfg[key] = value
    cfg = apply_overrides(cfg, overrides)
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def run_config(cfg: dict) -> RunConfig:
    fields = set(RunConfig().to_dict())
    try:
        return RunConfig.from_dict({k: v for k, v in cfg.items() if k in fields})
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _clips(cfg: dict, rc: RunConfig):
    manifest = cfg["data"]["manifest"]
    if not manifest:
        raise ConfigError("data.manifest is not set")
    return load_manifest(manifest, rc.clip_len)


def _embeddings(cfg: dict, rc: RunConfig, needed: bool):
    if not needed:
        return None
    from .language import load_embeddings, pseudo_embeddings

    if rc.embeddings == "pseudo":
        return pseudo_embeddings(CLASS_NAMES, rc.embed_dim, rc.seed)
    return load_embeddings(rc.embeddings, CLASS_NAMES)


def _print_epoch(rec: dict) -> None:
    line = f"epoch {rec['epoch']:3d} lr {rec['lr']:.6f} loss {rec['loss']:.4f} train_acc {rec['train_acc']:.4f}"
    if "cosine" in rec:
        line += f" cosine {rec['cosine']:.4f}"
    print(line, flush=True)


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2))


def _load_model(cfg: dict, out: Path):
    path = cfg["checkpoint"] or out / "checkpoint.ckpt"
    try:
        ck_cfg, params, _ = load_checkpoint(path)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    return RunConfig.from_dict(ck_cfg["run"]), params


def cmd_gen_data(cfg, rc, out, jobs):
    d = cfg["data"]
    manifest = generate_dataset(out, d["videos_per_class"], d["n_frames"], tuple(d["frame_size"]),
                                d["noise_std"], d["seed"])
    print(f"wrote {manifest}")


def cmd_train(cfg, rc, out, jobs):
    clips = _clips(cfg, rc)
    init = None
    if cfg["init_checkpoint"]:
        _, init, _ = load_checkpoint(cfg["init_checkpoint"], rc.model_config())
    params, history = train_one_model(clips, rc, _embeddings(cfg, rc, rc.mode == "vst_l"), init,
                                      on_epoch=_print_epoch)
    meta = {"run": rc.to_dict(), "model": rc.model_config().to_dict()}
    save_checkpoint(out / "checkpoint.ckpt", meta, params)
    save_checkpoint(out / "model_inference.ckpt", meta, params, inference_only=True)
    _write_json(out / "history.json", history)


def cmd_eval(cfg, rc, out, jobs):
    model_rc, params = _load_model(cfg, out)
    clips = _clips(cfg, model_rc)
    report = evaluate(params, clips, model_rc)
    report.write(out / "eval_report.json", out / "confusion.csv")
    print(f"top1 {report.top1:.4f} video_top1 {report.video_top1:.4f}")


def cmd_cv(cfg, rc, out, jobs):
    clips = _clips(cfg, rc)
    emb = _embeddings(cfg, rc, True)
    report = cross_validate(clips, rc, emb, jobs=jobs, on_epoch=_print_epoch)
    _write_json(out / "cv_summary.json", report.to_json())
    for i, fold in enumerate(report.folds):
        fold.write(out / f"fold{i}_report.json", out / f"fold{i}_confusion.csv")
    print(f"averaged_top1 {report.averaged_top1:.4f}")


def cmd_viz(cfg, rc, out, jobs):
    from .training import clip_batch
    from .viz import attention_masks, overlay_and_export

    model_rc, params = _load_model(cfg, out)
    clips = _clips(cfg, model_rc)[: int(cfg["viz"]["max_clips"])]
    mcfg = model_rc.model_config()
    for clip in clips:
        frames = clip_batch([clip], model_rc, False)
        masks, _ = attention_masks(params, mcfg, frames)
        target = out / "viz" / f"{clip.video_id}_clip{clip.clip_index:03d}"
        overlay_and_export(masks[0], frames[0], target, normalize=False)
        print(f"wrote {target}")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "cv": cmd_cv, "viz": cmd_viz}


def _fail(kind: str, exc: BaseException, code: int) -> int:
    msg = " ".join(str(exc).split()) or exc.__class__.__name__
    print(f"error: {kind}: {msg}", file=sys.stderr)
    return code


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.verb not in COMMANDS:
            raise UsageError(f"unknown verb {args.verb!r}; expected one of {', '.join(VERBS)}")
        if args.jobs < 1:
            raise UsageError("--jobs must be at least 1")
    except UsageError as exc:
        return _fail("usage", exc, 1)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)

    try:
        cfg = resolve_config(args.config, args.overrides, args.seed)
        rc = run_config(cfg)
        out = Path(args.out or os.environ.get("OUT_DIR", "out"))
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "resolved_config.json", {**cfg, "verb": args.verb})
        COMMANDS[args.verb](cfg, rc, out, args.jobs)
    except UsageError as exc:
        return _fail("usage", exc, 1)
    except (NonFiniteLoss, FloatingPointError) as exc:
        return _fail("numeric", exc, 3)
    except (ConfigError, DataError, CheckpointError) as exc:
        return _fail("config" if isinstance(exc, ConfigError) else "data", exc, 2)
    except (ValueError, OSError) as exc:
        return _fail("data", exc, 2)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
