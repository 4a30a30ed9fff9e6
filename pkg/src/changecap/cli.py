"""Command-line surface: synth-data, gradcheck, train, caption, eval-captions, augment.

stdout carries data (JSON/JSONL), stderr carries '#'-prefixed progress lines.
Exit codes: 0 success, 1 runtime/I-O error (one machine-parseable line on
stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import checks
from .data import (
    ImageRef,
    VisualInput,
    checkpoint_load,
    checkpoint_save,
    read_manifest,
    synth_dataset,
    training_examples,
    build_vocab,
    write_manifest,
)
from .metrics import EvalRecord, evaluate
from .model import CaptionModel, ModelConfig
from .prompt import GUIDE_PROMPT, HttpBaseModelClient, MockBaseModelClient, PromptBundle, augmented_prompt
from .train import StagePlan, train_two_stage


def _progress(msg: str) -> None:
    print(f"# {msg}", file=sys.stderr)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="changecap", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic bi-temporal dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--lv", type=int, required=True)
    p.add_argument("--dv", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--kinds", default="appear,disappear,none", help="comma-separated change kinds")
    p.add_argument("--amplitude", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.01)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--module", default="all", choices=["all", "tensor", "ce", "projector", "decoder", "chain"])
    p.add_argument("--lv", type=int, default=16)
    p.add_argument("--dv", type=int, default=8)
    p.add_argument("--dl", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="two-stage training from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="checkpoint directory to write")

    p = sub.add_parser("caption", help="caption a manifest with a trained checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--pa-endpoint", default=None, help="base-model HTTP endpoint for prompt augmentation")
    p.add_argument("--pa-mock", default=None, help="JSON file of canned clues for prompt augmentation")
    p.add_argument("--pt", default=None, help="task instruction (defaults to the checkpoint's)")
    p.add_argument("--max-new", type=int, default=32)

    p = sub.add_parser("eval-captions", help="score predictions against references")
    p.add_argument("--pred", required=True)
    p.add_argument("--refs", required=True)

    p = sub.add_parser("augment", help="assemble an augmented prompt for one image id")
    p.add_argument("--pt", required=True)
    p.add_argument("--pa-mock", default=None)
    p.add_argument("--pa-endpoint", default=None)
    p.add_argument("--image-id", required=True)

    return parser


def _make_client(args):
    if getattr(args, "pa_mock", None):
        return MockBaseModelClient.from_json_file(args.pa_mock)
    if getattr(args, "pa_endpoint", None):
        return HttpBaseModelClient(args.pa_endpoint)
    return None


def _cmd_synth_data(args) -> int:
    kinds = tuple(k.strip() for k in args.kinds.split(",") if k.strip())
    samples = synth_dataset(
        args.n, args.lv, args.dv, seed=args.seed, kinds=kinds, noise=args.noise, amplitude=args.amplitude
    )
    manifest = write_manifest(samples, args.out)
    _progress(f"wrote {len(samples)} samples under {args.out}")
    print(manifest)
    return 0


def _cmd_gradcheck(args) -> int:
    names = ["tensor", "ce", "projector", "decoder", "chain"] if args.module == "all" else [args.module]
    failed = False
    for name in names:
        _progress(f"gradcheck {name} ...")
        err = checks.run_suite(name, lv=args.lv, dv=args.dv, dl=args.dl, seed=args.seed)
        tol = checks.TOLERANCES[name]
        ok = err < tol
        failed = failed or not ok
        print(f"module={name} max_rel_err={err:.3e} tol={tol:.1e} status={'ok' if ok else 'FAIL'}")
    return 1 if failed else 0


def _load_config(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _dataset_from_config(data_cfg: dict, base_dir: str):
    if "manifest" in data_cfg:
        path = data_cfg["manifest"]
        if not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        return read_manifest(path)
    if "synthetic" in data_cfg:
        spec = dict(data_cfg["synthetic"])
        kinds = tuple(spec.pop("kinds", ["appear", "disappear", "none"]))
        return synth_dataset(
            n=int(spec["n"]),
            lv=int(spec["lv"]),
            dv=int(spec["dv"]),
            seed=int(spec.get("seed", 0)),
            kinds=kinds,
            noise=float(spec.get("noise", 0.01)),
            amplitude=float(spec.get("amplitude", 1.0)),
        )
    raise ValueError("config data section needs either 'manifest' or 'synthetic'")


def _cmd_train(args) -> int:
    config = _load_config(args.config)
    base_dir = os.path.dirname(os.path.abspath(args.config))
    model_cfg = ModelConfig.from_dict(config["model"])
    samples1 = _dataset_from_config(config["data"], base_dir)
    samples2 = _dataset_from_config(config["data2"], base_dir) if "data2" in config else samples1

    vocab = build_vocab(list(samples1) + list(samples2), model_cfg.instruction)
    model = CaptionModel.build(model_cfg, vocab, seed=int(config.get("seed", 0)))
    stage1 = StagePlan.from_dict(config["stage1"])
    stage2 = StagePlan.from_dict(config["stage2"])
    dataset1 = training_examples(samples1, vocab, model_cfg.instruction)
    dataset2 = training_examples(samples2, vocab, model_cfg.instruction)

    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "metrics.jsonl")
    with open(log_path, "w", encoding="utf-8") as log_fh:

        def log(record):
            log_fh.write(json.dumps(record, sort_keys=True) + "\n")
            if record["step"] % 50 == 0:
                _progress(f"step {record['step']} lr {record['lr']:.2e} loss {record['loss']:.4f}")

        records = train_two_stage(model, stage1, stage2, dataset1, dataset2, log=log)

    checkpoint_save(model, args.out)
    _progress(f"checkpoint written to {args.out}")
    print(json.dumps({"checkpoint": args.out, "steps": len(records), "final_loss": records[-1]["loss"]}))
    return 0


def _cmd_caption(args) -> int:
    model = checkpoint_load(args.ckpt)
    samples = read_manifest(args.manifest)
    client = _make_client(args)
    task = args.pt if args.pt is not None else model.config.instruction
    for sample in samples:
        if client is not None:
            visual = VisualInput(source="file", features=sample.pair)
            bundle = augmented_prompt(visual, task, client, key_hint=sample.sample_id)
        else:
            bundle = PromptBundle(GUIDE_PROMPT, "", task, task)
        caption = model.caption(sample.pair, prompt=bundle.assembled, max_new=args.max_new)
        print(json.dumps({"id": sample.sample_id, "caption": caption, "prompt": bundle.assembled}))
    return 0


def _read_jsonl(path) -> list[dict]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def _cmd_eval_captions(args) -> int:
    preds = _read_jsonl(args.pred)
    refs = _read_jsonl(args.refs)
    ref_by_id = {}
    for rec in refs:
        if "references" in rec:
            ref_by_id[rec["id"]] = (rec["references"], rec.get("qtype"))
        elif "caption" in rec:
            ref_by_id[rec["id"]] = ([rec["caption"]], rec.get("qtype"))
        else:
            raise ValueError(f"reference record {rec.get('id')!r} has neither 'references' nor 'caption'")
    records = []
    for rec in preds:
        cand = rec.get("caption", rec.get("candidate"))
        if cand is None:
            raise ValueError(f"prediction record {rec.get('id')!r} has neither 'caption' nor 'candidate'")
        if rec["id"] not in ref_by_id:
            raise ValueError(f"no references for prediction id {rec['id']!r}")
        references, qtype = ref_by_id[rec["id"]]
        records.append(EvalRecord.from_strings(rec["id"], cand, references, qtype))
    print(json.dumps(evaluate(records), indent=2, sort_keys=True))
    return 0


def _cmd_augment(args, parser) -> int:
    if not args.pt.strip():
        parser.error("--pt must be a non-empty instruction")
    client = _make_client(args)
    if client is None:
        parser.error("augment needs --pa-mock or --pa-endpoint")
    visual = VisualInput(
        source="file", images=[ImageRef(height=0, width=0, channels=0, payload=args.image_id.encode("utf-8"))]
    )
    bundle = augmented_prompt(visual, args.pt, client, key_hint=args.image_id)
    print(bundle.assembled)
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "synth-data":
            return _cmd_synth_data(args)
        if args.command == "gradcheck":
            return _cmd_gradcheck(args)
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "caption":
            return _cmd_caption(args)
        if args.command == "eval-captions":
            return _cmd_eval_captions(args)
        if args.command == "augment":
            return _cmd_augment(args, parser)
        parser.error(f"unknown command {args.command!r}")
    except SystemExit:
        raise
    except Exception as exc:  # contract: one parseable line, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
