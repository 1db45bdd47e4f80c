import argparse
import json
import logging
import os
import sys

from dotenv import load_dotenv
from pydantic import ValidationError

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from icarus.icarus_mainframe import Icarus
from utiles.errors import (
    AddressingError,
    CheckpointMismatchError,
    ConfigError,
    DistributionError,
    EssUndefinedError,
    ModelContractError,
    NetlistError,
    NonFiniteGradientError,
    TrainingDivergedError,
)
from utiles.icnet import VARIANTS, ArchitectureConfig
from utiles.models import MODEL_REGISTRY
from utiles.presets import ESS_PROTOCOLS, SIGMA_L_PRESETS, TRAIN_PRESETS
from utiles.toolbox import (
    RunManifest,
    load_config_file,
    parse_observe_args,
    read_manifest,
    read_observation_file,
    write_manifest,
)
from utiles.trainer import TrainConfig

load_dotenv()

logger = logging.getLogger("icarus")

# -------------------------------
# EXIT CODES
# -------------------------------
EXIT_OK, EXIT_USAGE, EXIT_MODEL, EXIT_NUMERIC = 0, 1, 2, 3
EXIT_CODES = (
    ((ConfigError, ValidationError), EXIT_USAGE),
    ((ModelContractError, AddressingError, CheckpointMismatchError, NetlistError, DistributionError), EXIT_MODEL),
    ((NonFiniteGradientError, TrainingDivergedError, EssUndefinedError), EXIT_NUMERIC),
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


# -------------------------------
# PARSER
# -------------------------------
def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="root seed (default 0, or the saved seed when resuming)")
    common.add_argument("--threads", type=int, default=None, help="worker cap (default $ICARUS_THREADS or all cores)")
    common.add_argument("--log-level", default=None, help="default $ICARUS_LOG_LEVEL or INFO")
    common.add_argument("--quiet", action="store_true", help="no progress bars")
    common.add_argument("--no-plots", action="store_true", help="write CSVs only")
    common.add_argument("--config", default=None, help="JSON file with model/arch/train sections")
    common.add_argument("--out", default=None, help="output directory (default $ICARUS_OUTPUT_DIR or runs)")

    model_opts = _Parser(add_help=False)
    model_opts.add_argument("--model", choices=sorted(MODEL_REGISTRY), default=None)
    model_opts.add_argument("--nuisance", type=int, default=None, help="magnitude model: nuisance draws")
    model_opts.add_argument("--sigma-l", default=None,
                            help=f"magnitude model: likelihood std or preset ({', '.join(SIGMA_L_PRESETS)})")
    model_opts.add_argument("--model-opt", action="append", default=[], metavar="KEY=VALUE",
                            help="any model config field, value parsed as JSON")

    network = _Parser(add_help=False)
    network.add_argument("--checkpoint", default=None)
    network.add_argument("--arch", default=None, help="'prior' runs likelihood weighting without a checkpoint")

    observe = _Parser(add_help=False)
    observe.add_argument("--observe", action="append", default=[], metavar="NAME=VALUE")
    observe.add_argument("--observe-file", default=None, help="CSV of observation vectors")

    parser = _Parser(prog="icarus", description="Inference compilation with attention.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common, model_opts], help="compile an inference network")
    p.add_argument("--arch", choices=VARIANTS, default="lstm-att")
    p.add_argument("--preset", choices=sorted(TRAIN_PRESETS), default=None)
    p.add_argument("--traces", type=int, default=None)
    p.add_argument("--minibatch", type=int, default=None)
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--normal-proposal", choices=("normal", "mixture"), default=None)
    p.add_argument("--resume", default=None, help="checkpoint written by an earlier train run")

    p = sub.add_parser("infer", parents=[common, model_opts, network, observe], help="importance sampling")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--repeats", type=int, default=1)

    p = sub.add_parser("diagnose", parents=[common, model_opts, network, observe], help="circuit fault probabilities")
    p.add_argument("--k", type=int, default=20)

    p = sub.add_parser("attention", parents=[common, model_opts, network, observe], help="attention weight report")
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--target", default=None, help="site to plot, e.g. y#1")

    p = sub.add_parser("simulate", parents=[common, model_opts], help="draw observations from the prior")
    p.add_argument("--n", type=int, default=20)

    p = sub.add_parser("evaluate", parents=[common, model_opts, network], help="ESS over prior-drawn observations")
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--repeats", type=int, default=None)

    p = sub.add_parser("compare", parents=[common, model_opts], help="ESS of several checkpoints side by side")
    p.add_argument("--checkpoint", dest="checkpoints", action="append", default=[], help="repeat for each network")
    p.add_argument("--with-prior", action="store_true", help="add the prior proposer as a baseline row")
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--repeats", type=int, default=None)

    p = sub.add_parser("rerun"
, help="repeat the command recorded in a manifest")
    p.add_argument("manifest", help="manifest.json or the directory holding it")
    p.add_argument("--out", default=None)
    return parser


# -------------------------------
# HELPERS
# -------------------------------
def model_options(args, file_options):
    options = dict(file_options)
    if args.nuisance is not None:
        options["nuisance"] = args.nuisance
    if args.sigma_l is not None:
        try:
            options["sigma_l"] = SIGMA_L_PRESETS[args.sigma_l] if args.sigma_l in SIGMA_L_PRESETS else float(args.sigma_l)
        except ValueError:
            raise ConfigError(f"--sigma-l expects a number or one of {', '.join(SIGMA_L_PRESETS)}") from None
    for item in args.model_opt:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--model-opt expects key=value, got '{item}'")
        try:
            options[key] = json.loads(value)
        except json.JSONDecodeError:
            options[key] = value
    return options


def resolve_program(icarus, args, config, checkpoint=None):
    """Model from --model, else from the checkpoint; checkpoint settings fill in unset options."""
    name = args.model
    stored = {}
    checkpoint = checkpoint or getattr(args, "checkpoint", None) or getattr(args, "resume", None)
    if checkpoint and os.path.isfile(checkpoint):
        stored_name, stored = icarus.checkpoint_model_options(checkpoint)
        name = name or stored_name
        if name != stored_name:
            stored = {}
    if name is None:
        raise ConfigError("--model is required")
    return icarus.program(name, model_options(args, {**stored, **config["model"]}))


def resolve_network(icarus, args, program):
    if args.arch not in (None, "prior") or (args.arch == "prior" and args.checkpoint):
        raise ConfigError("use --checkpoint for a trained network or --arch prior for the prior baseline")
    if args.checkpoint is None and args.arch != "prior":
        raise ConfigError("give --checkpoint or --arch prior")
    return icarus.load_network(args.checkpoint, program)


def observations(args, program):
    if args.observe_file:
        if not os.path.isfile(args.observe_file):
            raise ConfigError(f"observation file {args.observe_file} does not exist")
        vectors = read_observation_file(args.observe_file, program.observation_names)
    elif args.observe:
        vectors = [parse_observe_args(args.observe, program.observation_names)]
    else:
        raise ConfigError("give --observe NAME=VALUE or --observe-file")
    if not vectors:
        raise ConfigError("no observations supplied")
    return vectors


def train_config(args, config, saved=None):
    """Preset, config file and flags layered over saved, the settings of a run being resumed."""
    values = dict(saved or {})
    if args.preset:
        values.update(TRAIN_PRESETS[args.preset])
    values.update(config["train"])
    if args.seed is not None or saved is None:
        values["seed"] = args.seed or 0
    for flag, key in (("traces", "total_traces"), ("minibatch", "minibatch"), ("checkpoint_every", "checkpoint_every")):
        if getattr(args, flag) is not None:
            values[key] = getattr(args, flag)
    if args.threads is not None:
        values["threads"] = args.threads
    return TrainConfig(**values)


def architecture(args, config):
    values = dict(config["arch"])
    if args.normal_proposal is not None:
        values["normal_proposal"] = args.normal_proposal
    return ArchitectureConfig.from_variant(args.arch, **values)


def protocol(model_name, key, given, fallback):
    if given is not None:
        return given
    return ESS_PROTOCOLS.get(model_name, {}).get(key, fallback)


# -------------------------------
# COMMANDS
# -------------------------------
def cmd_train(icarus, args, config):
    program = resolve_program(icarus, args, config)
    saved = icarus.checkpoint_train_config(args.resume) if args.resume else None
    cfg = train_config(args, config, saved)
    icarus.seed = cfg.seed
    _, reports = icarus.train(program, architecture(args, config), cfg, args.resume)
    return reports


def cmd_infer(icarus, args, config):
    program = resolve_program(icarus, args, config)
    net = resolve_network(icarus, args, program)
    k = protocol(program.name, "k", args.k, 100)
    return icarus.infer(program, net, observations(args, program), k, args.repeats)


def cmd_diagnose(icarus, args, config):
    program = resolve_program(icarus, args, config)
    net = resolve_network(icarus, args, program)
    return icarus.diagnose(program, net, observations(args, program), args.k)


def cmd_attention_report(icarus, args, config):
    program = resolve_program(icarus, args, config)
    net = resolve_network(icarus, args, program)
    return icarus.attention_report(program, net, observations(args, program)[0], args.runs, args.target)


def cmd_simulate(icarus, args, config):
    return icarus.simulate(resolve_program(icarus, args, config), args.n)


def cmd_evaluate(icarus, args, config):
    program = resolve_program(icarus, args, config)
    net = resolve_network(icarus, args, program)
    k = protocol(program.name, "k", args.k, 100)
    repeats = protocol(program.name, "repeats", args.repeats, 1)
    return icarus.evaluate(program, net, args.n, k, repeats)


def cmd_compare(icarus, args, config):
    if not args.checkpoints and not args.with_prior:
        raise ConfigError("give at least one --checkpoint or --with-prior")
    stored = {}
    for path in args.checkpoints:
        if not os.path.isfile(path):
            raise ConfigError(f"checkpoint {path} does not exist")
        stored[path] = icarus.checkpoint_model_options(path)
    if len({json.dumps(options, sort_keys=True) for options in stored.values()}) > 1:
        raise CheckpointMismatchError(
            "checkpoints were compiled for different models: "
            + "; ".join(f"{path}: {name} {json.dumps(cfg, sort_keys=True)}" for path, (name, cfg) in stored.items())
        )
    program = resolve_program(icarus, args, config, args.checkpoints[0] if args.checkpoints else None)
    networks = [("prior", "", None)] if args.with_prior else []
    for path in args.checkpoints:
        net = icarus.load_network(path, program)
        networks.append((net.arch.variant, path, net))
    k = protocol(program.name, "k", args.k, 100)
    repeats = protocol(program.name, "repeats", args.repeats, 1)
    return icarus.compare(program, networks, args.n, k, repeats)


COMMANDS = {
    "train": cmd_train,
    "infer": cmd_infer,
    "diagnose": cmd_diagnose,
    "attention": cmd_attention_report,
    "simulate": cmd_simulate,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
}


def cmd_rerun(args):
    manifest = read_manifest(args.manifest)
    argv = list(manifest.argv)
    if args.out:
        argv += ["--out", args.out]
    logger.info("re-running: %s", " ".join(argv))
    return run(argv)


# -------------------------------
# MAIN
# -------------------------------
def configure_logging(level):
    level = (level or os.getenv("ICARUS_LOG_LEVEL", "INFO")).upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def run(argv):
    args = build_parser().parse_args(argv)
    if args.command == "rerun":
        return cmd_rerun(args)
    configure_logging(args.log_level)
    config = load_config_file(args.config)
    seed = 0 if args.seed is None else args.seed
    icarus = Icarus(output_dir=args.out, threads=args.threads, seed=seed,
                    progress=not args.quiet, plots=not args.no_plots)
    result = COMMANDS[args.command](icarus, args, config)
    write_manifest(RunManifest(
        command=args.command,
        argv=list(argv),
        model=getattr(args, "model", None),
        arch=getattr(args, "arch", None),
        config_path=args.config,
        seed=icarus.seed,
        checkpoint=getattr(args, "checkpoint", None) or getattr(args, "resume", None),
        output_dir=icarus.output_dir,
    ))
    return result


def main(argv=None):
    """Entry point; returns the process exit code."""
    argv = sys.argv[1:] if argv is None else argv
    try:
        run(argv)
    except Exception as exc:
        for kinds, code in EXIT_CODES:
            if isinstance(exc, kinds):
                if code == EXIT_USAGE and isinstance(exc, ValidationError):
                    fields = ", ".join(".".join(str(p) for p in err["loc"]) for err in exc.errors())
                    print(f"icarus: invalid configuration ({fields}): {exc}", file=sys.stderr)
                else:
                    print(f"icarus: {exc}", file=sys.stderr)
                return code
        raise
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
