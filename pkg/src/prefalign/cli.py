"""Command-line pipeline: synth, sft, align, eval, gradcheck, sweep, rerun.

Every option resolves through one precedence chain: command-line flag, then
config file (a flat JSON object keyed by option name), then environment
variable (only the embedding endpoint has one), then built-in default. Each
run writes every artifact into the --out directory, including manifest.json
with the resolved values and the source of each, and ``prefalign rerun
<out>/manifest.json`` replays the command from it.

Artifacts are deterministic for a given manifest: reports carry no clocks.
Wall time goes to a separate timing.json, which rerun comparisons ignore.

Exit codes: 0 success, 1 flag/config validation error, 2 runtime or numeric
failure (including a failed gradcheck).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path
from typing import Callable, Optional

from . import __version__, evalkit, synth, trainer
from .embed import FileBackedProvider, HashedBowProvider, HttpProvider
from .losses import AlignConfig
from .policy import init_params, load_params, save_params
from .prefdata import decompose_to_unpaired, load_paired, save_paired
from .rng import derive_seed

ENDPOINT_ENV = "PREFALIGN_EMBED_ENDPOINT"

PAIRS_FILE = "pairs.jsonl"
ORACLE_FILE = "oracle.json"
MODEL_FILE = "model.bin"
REPORT_FILE = "report.json"
MANIFEST_FILE = "manifest.json"
TIMING_FILE = "timing.json"


class ConfigError(Exception):
    """Bad flags, config keys, or option values; exits with status 1."""


def _parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_values(text) -> list:
    if isinstance(text, list):
        return [float(v) for v in text]
    return [float(tok) for tok in str(text).split(",") if tok.strip()]


def _opt_float(text) -> Optional[float]:
    if text is None or text == "" or str(text).lower() == "none":
        return None
    return float(text)


@dataclasses.dataclass(frozen=True)
class Opt:
    name: str
    parse: Callable
    default: object = None
    required: bool = False
    env: Optional[str] = None
    help: str = ""


_MODEL_DIMS = [
    Opt("context", int, 8, help="context window in tokens"),
    Opt("embed_dim", int, 16, help="token embedding width"),
    Opt("hidden_dim", int, 64, help="hidden layer width"),
]

_ALIGN_OPTS = [
    Opt("method", str, "rpo", help="rpo, dpo, ipo, or kto"),
    Opt("strategy", str, "embedding", help="rpo weighting: embedding, uniform, diagonal"),
    Opt("beta", float, 0.1, help="implicit-reward scale"),
    Opt("tau", _opt_float, None, help="embedding softmax temperature (default by pairing)"),
    Opt("alpha", float, 0.8, help="diagonal weight mass on same-prompt cells"),
]

_PROVIDER_OPTS = [
    Opt("provider", str, "bow", help="embedding provider: bow, file, or http"),
    Opt("embed_endpoint", str, None, env=ENDPOINT_ENV, help="embedding service base URL"),
    Opt("embed_file", str, None, help="precomputed embedding JSONL (provider=file)"),
    Opt("bow_dim", int, 256, help="hashed bag-of-words dimension (provider=bow)"),
]

_TRAIN_OPTS = [
    Opt("lr", float, trainer.DEFAULT_DESK_LR),
    Opt("batch_size", int, 64),
    Opt("seed", int, 0),
    Opt("grad_clip", _opt_float, None, help="global-norm gradient clip"),
]

_COMMANDS: dict[str, list[Opt]] = {
    "synth": [
        Opt("out", str, required=True, help="output directory"),
        Opt("clusters", int, 20),
        Opt("prompts_per_cluster", int, 100),
        Opt("responses_per_prompt", int, 2),
        Opt("reward_seed", int, 0),
        Opt("sample_seed", int, 0),
    ],
    "sft": [
        Opt("out", str, required=True, help="output directory"),
        Opt("data", str, required=True, help="paired JSONL training data"),
        Opt("epochs", int, 5),
        Opt("init_seed", int, 0),
        *_TRAIN_OPTS,
        *_MODEL_DIMS,
    ],
    "align": [
        Opt("out", str, required=True, help="output directory"),
        Opt("data", str, required=True, help="paired JSONL training data"),
        Opt("model", str, required=True, help="input checkpoint (reference and init)"),
        Opt("unpaired", _parse_bool, False, help="decompose pairs before training"),
        Opt("epochs", int, 1),
        *_TRAIN_OPTS,
        *_ALIGN_OPTS,
        *_PROVIDER_OPTS,
    ],
    "eval": [
        Opt("out", str, required=True, help="output directory"),
        Opt("policy", str, required=True, help="checkpoint under evaluation"),
        Opt("baseline", str, required=True, help="checkpoint whose decodes are the baseline"),
        Opt("data", str, required=True, help="paired JSONL supplying eval prompts"),
        Opt("oracle", str, required=True, help="reward-oracle JSON"),
        Opt("max_new", int, evalkit.DEFAULT_MAX_NEW),
        Opt("temperature", float, 0.0),
        Opt("seed", int, 0),
        Opt("records", _parse_bool, True, help="keep per-prompt records in the report"),
    ],
    "gradcheck": [
        Opt("out", str, required=True, help="output directory"),
        Opt("pairs", int, 3),
        Opt("step", float, 1e-5),
        Opt("tolerance", float, 1e-5),
        Opt("seed", int, 0),
        Opt("context", int, 4),
        Opt("embed_dim", int, 8),
        Opt("hidden_dim", int, 16),
        *_ALIGN_OPTS,
    ],
    "sweep": [
        Opt("out", str, required=True, help="output directory"),
        Opt("data", str, required=True, help="paired JSONL training data"),
        Opt("model", str, required=True, help="starting checkpoint"),
        Opt("oracle", str, required=True, help="reward-oracle JSON"),
        Opt("eval_data", str, None, help="paired JSONL for eval prompts (default: data)"),
        Opt("axis", str, required=True, help="one of tau, beta, batch_size, temperature"),
        Opt("values", _parse_values, required=True, help="comma-separated axis values"),
        Opt("unpaired", _parse_bool, False),
        Opt("epochs", int, 1),
        Opt("max_new", int, evalkit.DEFAULT_MAX_NEW),
        *_TRAIN_OPTS,
        *_ALIGN_OPTS,
        *_PROVIDER_OPTS,
    ],
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prefalign",
        description="Desk-scale preference alignment: data, training, evaluation.",
    )
    parser.add_argument("--version", action="version", version=f"prefalign {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in _COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="flat JSON config file")
        for opt in opts:
            p.add_argument(
                "--" + opt.name.replace("_", "-"),
                dest=opt.name,
                default=None,
                help=opt.help or None,
            )
    rerun = sub.add_parser("rerun")
    rerun.add_argument("manifest_path", help="manifest JSON written by a previous run")
    return parser


def _resolve(command: str, args: dict, config_path: Optional[str]) -> tuple[dict, dict]:
    """Apply flag > config > env > default; returns (values, sources)."""
    opts = {o.name: o for o in _COMMANDS[command]}
    file_cfg = {}
    if config_path is not None:
        try:
            file_cfg = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a flat JSON object")
        unknown = sorted(set(file_cfg) - set(opts))
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {', '.join(unknown)}")

    values, sources = {}, {}
    for name, opt in opts.items():
        raw, source = None, "default"
        if args.get(name) is not None:
            raw, source = args[name], "flag"
        elif name in file_cfg:
            raw, source = file_cfg[name], "config"
        elif opt.env and os.environ.get(opt.env):
            raw, source = os.environ[opt.env], "env"
        if source == "default":
            value = opt.default
        else:
            try:
                value = opt.parse(raw) if opt.parse in (_parse_bool, _parse_values) else (
                    opt.parse(raw) if isinstance(raw, str) else raw
                )
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {name}: {exc}") from exc
        if opt.required and value is None:
            raise ConfigError(f"{command} requires --{name.replace('_', '-')}")
        values[name] = value
        sources[name] = source
    return values, sources


def _validate(command: str, values: dict) -> None:
    """Construct the config objects once so bad values fail before running."""
    try:
        if command in ("align", "gradcheck", "sweep"):
            AlignConfig(
                method=values["method"],
                strategy=values["strategy"],
                beta=values["beta"],
                tau=values["tau"],
                alpha=values["alpha"],
            )
        if command in ("sft", "align", "sweep"):
            _train_config(values)
        if command in ("align", "sweep"):
            if values["provider"] not in ("bow", "file", "http"):
                raise ValueError(f"unknown provider {values['provider']!r}")
            if values["provider"] == "http" and not values["embed_endpoint"]:
                raise ValueError("provider=http needs --embed-endpoint or the environment variable")
            if values["provider"] == "file" and not values["embed_file"]:
                raise ValueError("provider=file needs --embed-file")
        if command == "sweep" and values["axis"] not in evalkit.SWEEP_AXES:
            raise ValueError(f"axis must be one of {evalkit.SWEEP_AXES}")
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _write_json(path: Path, payload: object) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _report_dict(report) -> dict:
    payload = dataclasses.asdict(report)
    payload.pop("wall_seconds", None)  # clocks live in timing.json only
    return payload


def _provider(values: dict):
    if values["provider"] == "http":
        return HttpProvider(values["embed_endpoint"])
    if values["provider"] == "file":
        return FileBackedProvider(values["embed_file"])
    return HashedBowProvider(values["bow_dim"])


def _align_config(values: dict) -> AlignConfig:
    return AlignConfig(
        method=values["method"],
        strategy=values["strategy"],
        beta=values["beta"],
        tau=values["tau"],
        alpha=values["alpha"],
    )


def _train_config(values: dict) -> trainer.TrainConfig:
    return trainer.TrainConfig(
        learning_rate=values["lr"],
        epochs=values.get("epochs", 1),
        batch_size=values["batch_size"],
        seed=values["seed"],
        grad_clip=values.get("grad_clip"),
    )


def _unique_prompts(pairs) -> list[str]:
    seen, prompts = set(), []
    for pair in pairs:
        if pair.prompt not in seen:
            seen.add(pair.prompt)
            prompts.append(pair.prompt)
    return prompts


def _run_synth(values: dict, out: Path) -> int:
    config = synth.SynthConfig(
        num_clusters=values["clusters"],
        prompts_per_cluster=values["prompts_per_cluster"],
        responses_per_prompt=values["responses_per_prompt"],
        reward_seed=values["reward_seed"],
        sample_seed=values["sample_seed"],
    )
    pairs, oracle = synth.generate(config)
    save_paired(pairs, out / PAIRS_FILE)
    oracle.save(out / ORACLE_FILE)
    print(f"wrote {len(pairs)} pairs to {out / PAIRS_FILE}")
    return 0


def _run_sft(values: dict, out: Path) -> int:
    pairs = load_paired(values["data"])
    params = init_params(
        values["init_seed"], values["context"], values["embed_dim"], values["hidden_dim"]
    )
    report = trainer.train_sft(params, pairs, _train_config(values))
    save_params(params, out / MODEL_FILE)
    _write_json(out / REPORT_FILE, _report_dict(report))
    print(f"sft: {report.num_steps} steps, final loss {report.final_loss:.4f}")
    return 0


def _run_align(values: dict, out: Path) -> int:
    pairs = load_paired(values["data"])
    data = (
        decompose_to_unpaired(pairs, derive_seed(values["seed"], 97))
        if values["unpaired"]
        else pairs
    )
    params = load_params(values["model"])
    report = trainer.train_align(
        params, data, _align_config(values), _train_config(values), provider=_provider(values)
    )
    save_params(params, out / MODEL_FILE)
    _write_json(out / REPORT_FILE, _report_dict(report))
    label = report.method if not report.strategy else f"{report.method}/{report.strategy}"
    print(f"align[{label}]: {report.num_steps} steps, final loss {report.final_loss:.4f}")
    return 0


def _run_eval(values: dict, out: Path) -> int:
    policy = load_params(values["policy"])
    baseline = load_params(values["baseline"])
    oracle = synth.JudgeOracle.load(values["oracle"])
    prompts = _unique_prompts(load_paired(values["data"]))
    baseline_responses = evalkit.decode_responses(
        baseline, prompts, values["max_new"], 0.0, values["seed"]
    )
    report = evalkit.win_rate(
        policy,
        baseline_responses,
        prompts,
        oracle,
        temperature=values["temperature"],
        max_new=values["max_new"],
        seed=values["seed"],
        keep_records=values["records"],
    )
    _write_json(out / REPORT_FILE, dataclasses.asdict(report))
    print(
        f"eval: win_rate {report.win_rate:.3f} ties {report.ties:.3f} "
        f"over {report.num_prompts} prompts"
    )
    return 0


def _run_gradcheck(values: dict, out: Path) -> int:
    pairs, _ = synth.generate(
        synth.SynthConfig(
            num_clusters=2,
            prompts_per_cluster=max(1, values["pairs"]),
            reward_seed=values["seed"],
            sample_seed=values["seed"],
        )
    )
    pairs = pairs[: values["pairs"]]
    params = init_params(
        values["seed"], values["context"], values["embed_dim"], values["hidden_dim"]
    )
    report = trainer.gradcheck(
        params,
        pairs,
        _align_config(values),
        step=values["step"],
        tolerance=values["tolerance"],
    )
    _write_json(out / REPORT_FILE, dataclasses.asdict(report))
    label = report.method if not report.strategy else f"{report.method}/{report.strategy}"
    verdict = "PASS" if report.passed else "FAIL"
    print(
        f"gradcheck[{label}]: max rel err {report.max_rel_err:.3e} "
        f"over {report.num_parameters} parameters ... {verdict}"
    )
    return 0 if report.passed else 2


def _run_sweep(values: dict, out: Path) -> int:
    pairs = load_paired(values["data"])
    data = (
        decompose_to_unpaired(pairs, derive_seed(values["seed"], 97))
        if values["unpaired"]
        else pairs
    )
    base = load_params(values["model"])
    oracle = synth.JudgeOracle.load(values["oracle"])
    eval_pairs = load_paired(values["eval_data"]) if values["eval_data"] else pairs
    rows = evalkit.sweep(
        values["axis"],
        values["values"],
        base,
        data,
        _unique_prompts(eval_pairs),
        oracle,
        _align_config(values),
        _train_config(values),
        provider=_provider(values),
        max_new=values["max_new"],
        eval_seed=values["seed"],
    )
    _write_json(out / REPORT_FILE, {"axis": values["axis"], "rows": rows})
    done = sum(1 for r in rows if r["error"] is None)
    print(f"sweep[{values['axis']}]: {done}/{len(rows)} cells completed")
    return 0


_RUNNERS = {
    "synth": _run_synth,
    "sft": _run_sft,
    "align": _run_align,
    "eval": _run_eval,
    "gradcheck": _run_gradcheck,
    "sweep": _run_sweep,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = vars(parser.parse_args(argv))
    except SystemExit as exc:
        # argparse exits 2 on usage errors; the contract here is 1.
        return 0 if exc.code == 0 else 1
    command = args.pop("command")

    try:
        if command == "rerun":
            try:
                manifest = json.loads(Path(args["manifest_path"]).read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot load manifest: {exc}") from exc
            command = manifest.get("command")
            if command not in _RUNNERS:
                raise ConfigError(f"manifest names unknown command {command!r}")
            values, sources = manifest["config"], manifest["sources"]
            missing = sorted(set(o.name for o in _COMMANDS[command]) - set(values))
            if missing:
                raise ConfigError(f"manifest missing keys: {', '.join(missing)}")
        else:
            config_path = args.pop("config")
            values, sources = _resolve(command, args, config_path)
        _validate(command, values)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    out = Path(values["out"])
    started = time.perf_counter()
    try:
        out.mkdir(parents=True, exist_ok=True)
        status = _RUNNERS[command](values, out)
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    elapsed = time.perf_counter() - started

    _write_json(
        out / MANIFEST_FILE,
        {
            "tool": "prefalign",
            "version": __version__,
            "command": command,
            "config": values,
            "sources": sources,
        },
    )
    _write_json(out / TIMING_FILE, {"command": command, "wall_seconds": elapsed})
    return status


if __name__ == "__main__":
    sys.exit(main())
