#!/usr/bin/env python3
"""
Adversarial Lab - command-line host
Resolves the experiment config (defaults < config file < flags), dispatches a
subcommand to ExperimentManager and prints its result dict as JSON.
Exit codes: 0 success, 1 handled failure, 2 usage error or unexpected crash.
"""

import argparse
import json
import sys
import traceback
from pathlib import Path
from typing import Any, Dict, List, Optional

# Allow running from a checkout without installation
sys.path.insert(0, str(Path(__file__).parent))

from experiment_config import ConfigError, ExperimentConfig
from experiment_manager import VERSION, ExperimentManager
from lab_host import LabHost

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_UNEXPECTED = 2

COMMAND_ALIASES = {
    "gen": "gen-data",
    "idx": "ingest-idx",
    "table1": "matrix",
    "table2": "holdout",
}


class AdversarialLab(LabHost):
    """CLI host: owns logging, resolves config, routes commands"""

    def __init__(self, verbose: bool = False, debug_file: Optional[str] = None):
        super().__init__("adversarial-lab", verbose, debug_file)
        self.debug_log(f"Adversarial Lab {VERSION} initializing")

    def resolve_config(self, args: argparse.Namespace) -> ExperimentConfig:
        config = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
        return config.with_overrides(seed=args.seed, eps=args.eps, steps=args.steps,
                                     method=args.method, out=args.out)

    def handle_command(self, command: str, args: argparse.Namespace) -> Dict[str, Any]:
        original = command
        command = COMMAND_ALIASES.get(command, command)
        if original != command:
            self.debug_log(f"Alias '{original}' mapped to '{command}'")

        try:
            config = self.resolve_config(args)
        except ConfigError as e:
            return {"success": False, "command": command, "error": str(e),
                    "developer_hint": "Check the config file and flag values", "usage_error": True}
        self.debug_log(f"{command} with config: {config.render()}")
        manager = ExperimentManager(config, self.debug_log)

        if command == "gen-data":
            return manager.gen_data(args.dataset_out)
        elif command == "ingest-idx":
            return manager.ingest_idx(args.images, args.labels, args.num_classes, args.dataset_out)
        elif command == "train":
            return manager.train(args.models or None)
        elif command == "attack":
            return manager.attack(args.model)
        elif command == "matrix":
            return manager.matrix()
        elif command == "holdout":
            return manager.sweep() if args.sweep else manager.holdout()
        elif command == "descent":
            return manager.descent(args.objective, args.variant, args.descent_steps, args.lr,
                                   args.theta0, args.amsgrad)
        elif command == "status":
            return manager.status()
        return {"success": False, "error": f"Unknown command: {original}", "usage_error": True}


def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--seed", type=int, help="override the experiment seed")
    common.add_argument("--eps", type=float, help="override the L-inf radius")
    common.add_argument("--steps", type=int, help="override the attack iteration count")
    common.add_argument("--method", help="override the attack method (fgsm, ifgsm, mifgsm, nifgsm, aifgsm, abfgsm)")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("--verbose", "-v", action="store_true", help="debug log on stderr")
    common.add_argument("--debug-file", help="also write the debug log to this file")

    parser = argparse.ArgumentParser(prog="adversarial_lab",
                                     description="Gradient-sign attacks, model transfer and ensemble hold-out runs")
    parser.add_argument("--version", action="version", version=f"%(prog)s {VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", aliases=["gen"], parents=[common], help="generate the synthetic dataset")
    p.add_argument("--dataset-out", help="dataset file (default <out>/dataset.bin)")

    p = sub.add_parser("ingest-idx", aliases=["idx"], parents=[common], help="convert IDX image/label files")
    p.add_argument("images")
    p.add_argument("labels")
    p.add_argument("--num-classes", type=int, default=10)
    p.add_argument("--dataset-out", help="dataset file (default <out>/dataset.bin)")

    p = sub.add_parser("train", parents=[common], help="train the model roster and write checkpoints")
    p.add_argument("models", nargs="*", help="roster names to train (default: all)")

    p = sub.add_parser("attack", parents=[common], help="attack one model and dump the adversarials")
    p.add_argument("--model", help="roster name (default: first model)")

    sub.add_parser("matrix", aliases=["table1"], parents=[common], help="source x target transfer matrix")

    p = sub.add_parser("holdout", aliases=["table2"], parents=[common], help="ensemble hold-out table")
    p.add_argument("--sweep", action="store_true", help="retrain per sweep seed and compare methods")

    p = sub.add_parser("descent", parents=[common], help="reference optimizer trajectory on a test objective")
    p.add_argument("objective", choices=["quadratic", "rosenbrock", "absolute"])
    p.add_argument("--variant", choices=["adam", "adabelief"], default="adabelief")
    p.add_argument("--descent-steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--theta0", type=_float_list, default=[-1.0, 1.5])
    p.add_argument("--amsgrad", action="store_true")

    sub.add_parser("status", parents=[common], help="show dataset/checkpoint state")
    return parser


def exit_code(result: Dict[str, Any]) -> int:
    if result.get("success"):
        return EXIT_OK
    return EXIT_UNEXPECTED if result.get("usage_error") else EXIT_FAILED


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    lab = AdversarialLab(args.verbose, args.debug_file)
    try:
        result = lab.handle_command(args.command, args)
        code = exit_code(result)
    except Exception as e:
        lab.debug_log(f"Traceback: {traceback.format_exc()}")
        result = {"success": False, "command": args.command, "error": f"Unexpected error: {e}",
                  "developer_hint": "Rerun with --verbose and report the traceback"}
        code = EXIT_UNEXPECTED
    finally:
        lab.close()
    print(json.dumps(result, indent=2, default=str))
    if not result.get("success"):
        print(f"error: {result.get('error')}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
