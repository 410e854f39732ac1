"""Operator entry point: synth / train / eval / generate / count-params /
shapes. Report paths write delimited output (TSV metrics, JSON reports)
with matplotlib figures rendered alongside."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .errors import ConfigError, DataError
from .tensor import ContractError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _apply_thread_cap():
    cap = os.environ.get("SSLALM_THREADS")
    if cap:
        try:
            n = max(1, int(cap))
        except ValueError:
            raise ConfigError("SSLALM_THREADS must be an integer, got %r" % cap)
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(n))


def _add_config_args(p):
    p.add_argument("--config", help="sectioned key=value config file")
    p.add_argument("--preset", help="named preset (see config.PRESETS)")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="override a config value")


def _resolved(args):
    from .config import resolve_config
    return resolve_config(preset=args.preset, config_path=args.config,
                          overrides=args.overrides)


def _synth_spec(cfg):
    from .data import SynthSpec
    d = cfg["data"]
    return SynthSpec(train_clips=d["train_clips"], eval_clips=d["eval_clips"],
                     T=d["T"], F=d["F"], classes_per_clip=d["classes_per_clip"],
                     seed=d["seed"], noise_sigma=d["noise_sigma"],
                     question_style=d["question_style"])


def _sampler_config(cfg):
    from .sample import SamplerConfig
    s = cfg["sampler"]
    return SamplerConfig(temperature=s["temperature"], top_k=s["top_k"],
                         top_p=s["top_p"], repetition_penalty=s["repetition_penalty"],
                         max_new_tokens=s["max_new_tokens"], seed=s["seed"],
                         penalize_prompt=s["penalize_prompt"])


def cmd_synth(args) -> int:
    from .config import dump_config
    from .data import synth_generate
    cfg = _resolved(args)
    out = Path(args.out)
    counts = synth_generate(_synth_spec(cfg), out)
    dump_config(cfg, out)
    print("wrote %d train / %d eval clips to %s"
          % (counts["train"], counts["eval"], out))
    return EXIT_OK


def cmd_train(args) -> int:
    from .config import dump_config, model_config_dict
    from .data import load_jsonl
    from .model import load_model, model_from_config, save_model
    from .plots import save_loss_curve
    from .train import TrainConfig, train_loop

    cfg = _resolved(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out)
    records = load_jsonl(Path(args.data) / "train.jsonl")
    if args.resume:
        model = load_model(args.resume)
    else:
        model = model_from_config(model_config_dict(cfg), seed=cfg["train"]["seed"])
    t = cfg["train"]
    tc = TrainConfig(lr=t["lr"], beta1=t["beta1"], beta2=t["beta2"],
                     weight_decay=t["weight_decay"], eps=t["eps"],
                     batch_size=t["batch_size"], accum_steps=t["accum_steps"],
                     max_steps=t["max_steps"], seed=t["seed"],
                     freeze_plan=tuple(t["freeze_plan"]))
    history = train_loop(model, records, args.data, tc, out_dir=out)
    save_model(model, out / "checkpoint.ckpt")
    save_loss_curve(history, out / "loss_curve.png")
    final = history[-1]["loss"] if history else float("nan")
    print("trained %d steps, final loss %.6f; checkpoint at %s"
          % (len(history), final, out / "checkpoint.ckpt"))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import load_jsonl, load_spectrogram
    from .evalharness import run_eval
    from .model import load_model
    from .plots import save_eval_figure

    cfg = _resolved(args)
    model = load_model(args.checkpoint)
    data_path = Path(args.data)
    rows = load_jsonl(data_path)
    if args.task:
        rows = [dict(r, task=args.task) for r in rows]
    base = data_path.parent
    sampler = _sampler_config(cfg)

    def generate_fn(spec_rel, prompt):
        return model.caption(load_spectrogram(base / spec_rel), prompt, sampler)

    report = run_eval(rows, generate_fn)
    out = Path(args.out) if args.out else data_path.parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval_report.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    save_eval_figure(report, out / "eval_metrics.png")
    print(json.dumps(report["metrics"], sort_keys=True))
    return EXIT_OK


def cmd_generate(args) -> int:
    from .data import load_spectrogram
    from .model import load_model

    cfg = _resolved(args)
    for name in ("temperature", "top_k", "top_p", "repetition_penalty",
                 "max_new_tokens", "seed"):
        v = getattr(args, name)
        if v is not None:
            cfg["sampler"][name] = v
    model = load_model(args.checkpoint)
    spec = load_spectrogram(args.spectrogram)
    text = model.caption(spec, args.prompt, _sampler_config(cfg))
    print(text)
    return EXIT_OK


def cmd_count_params(args) -> int:
    from .config import model_config_dict
    from .encoder import EncoderConfig, count_encoder_params
    from .lora import (attach_plan, count_lora_params, llama_7b_layer_shapes,
                       sslm_2_8b_layer_shapes)

    cfg = _resolved(args)
    mc = model_config_dict(cfg)
    enc = dict(mc["encoder"])
    enc["group_depths"] = tuple(enc["group_depths"])
    enc["group_dims"] = tuple(enc["group_dims"])
    counts = count_encoder_params(EncoderConfig(**enc))
    m = cfg["model"]
    rank = cfg["lora"]["rank"]
    if m["d_model"] == 4096:
        plan = attach_plan(llama_7b_layer_shapes(m["n_layers"], m["d_model"]),
                           r"q_proj|k_proj")
        lora_desc = "%d transformer k/q projections" % len(plan)
    else:
        plan = attach_plan(sslm_2_8b_layer_shapes(m["n_layers"], m["d_model"],
                                                  cfg["model"]["expand"]),
                           r"in_proj")
        lora_desc = "%d state-space in_proj layers" % len(plan)
    lora = count_lora_params(plan, rank)
    rows = [
        ("encoder", counts["encoder_total"]),
        ("bridge", counts["bridge"]),
        ("lora (%s)" % lora_desc, lora),
        ("trainable total", counts["encoder_total"] + counts["bridge"] + lora),
    ]
    width = max(len(r[0]) for r in rows)
    for name, n in rows:
        print("%-*s  %12s" % (width, name, format(n, ",d")))
    return EXIT_OK


def cmd_shapes(args) -> int:
    from .encoder import EncoderConfig, shape_calculator

    cfg = _resolved(args)
    enc = dict(cfg["encoder"])
    enc["group_depths"] = tuple(enc["group_depths"])
    enc["group_dims"] = tuple(enc["group_dims"])
    if args.input:
        t, f = (int(v) for v in args.input.split(","))
    else:
        t, f = cfg["data"]["T"], cfg["data"]["F"]
    stages = shape_calculator(EncoderConfig(**enc), (t, f))
    print("input              %dx%d" % (t, f))
    for st in stages:
        shape = st["shape"]
        if st["stage"] == "audio_tokens":
            print("%-18s %d tokens of dim %d" % (st["stage"], shape[0], shape[1]))
        else:
            print("%-18s %s" % (st["stage"], "x".join(str(v) for v in shape)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sslalm",
                                 description="state-space audio language model toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic audio-QA corpus")
    _add_config_args(p)
    p.add_argument("--spec", dest="config", help=argparse.SUPPRESS)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="finetune on a generated corpus")
    _add_config_args(p)
    p.add_argument("--data", required=True, help="dataset directory (from synth)")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="closed-ended evaluation of a checkpoint")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset JSONL file")
    p.add_argument("--task", choices=["single", "multi", "caption"])
    p.add_argument("--out", help="report directory (default: alongside data)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("generate", help="caption one spectrogram")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--spectrogram", required=True)
    p.add_argument("--prompt", default="write an audio caption describing the sound")
    p.add_argument("--temperature", type=float)
    p.add_argument("--top-k", dest="top_k", type=int)
    p.add_argument("--top-p", dest="top_p", type=float)
    p.add_argument("--repetition-penalty", dest="repetition_penalty", type=float)
    p.add_argument("--max-new-tokens", dest="max_new_tokens", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("count-params", help="parameter accounting for a preset")
    _add_config_args(p)
    p.set_defaults(fn=cmd_count_params)

    p = sub.add_parser("shapes", help="per-stage encoder shape trace (no weights)")
    _add_config_args(p)
    p.add_argument("--input", help="T,F input dims (default from [data])")
    p.set_defaults(fn=cmd_shapes)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _apply_thread_cap()
        return args.fn(args)
    except ConfigError as e:
        print("config error: %s" % e, file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ContractError) as e:
        print("data error: %s" % e, file=sys.stderr)
        return EXIT_DATA
    except ArithmeticError as e:
        print("numeric error: %s" % e, file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as e:
        print("data error: %s" % e, file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
