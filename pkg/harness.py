import argparse
import json
import logging
import sys
import traceback
from pathlib import Path

from pydantic import ValidationError

from experiments import (
    ExperimentConfig,
    emit_outputs,
    grid_cluster_tuning,
    load_reports,
    run_experiment,
    timing_comparison,
    weight_study,
)
from feature_reduction import fit_reducer, save_reducer
from hsi_data import HsiCube, dataset_summary, load_dataset, remove_background, write_dataset
from ledger_manager import LedgerManager
from patching import PatchConfig, apply_patching, save_patch_dataset
from utils.errors import CeuNetError, ConfigError
from utils.messages import TEXT_INTERRUPTED, TEXT_LOADING
from utils.settings import get_settings

logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
)
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2


class HarnessApplication:
    def __init__(self):
        self.parser = argparse.ArgumentParser(
            prog="harness",
            description="Clustering-ensemble U-Net experiments on hyperspectral scenes",
        )
        self.subparsers = self.parser.add_subparsers(dest="command", required=True)
        self.common = argparse.ArgumentParser(add_help=False)
        self.common.add_argument("--seed", type=int, default=None, help="base seed for splits and training")
        self.common.add_argument("--out", type=Path, default=None, help="output directory")
        self.common.add_argument("--config", type=Path, default=None, help="JSON experiment config")
        self.common.add_argument("--parallel-trials", type=int, default=None,
                                 help="run trials concurrently (timings become incomparable)")
        self.ledgers = LedgerManager()
        self.register_handlers()

    def register_handlers(self):
        self._register_data_handlers()
        self._register_experiment_handlers()
        self._register_study_handlers()

    def _command(self, name: str, handler, help_text: str) -> argparse.ArgumentParser:
        command = self.subparsers.add_parser(name, parents=[self.common], help=help_text)
        command.set_defaults(handler=handler)
        return command

    def _register_data_handlers(self):
        inspect = self._command("inspect", self.cmd_inspect, "print dataset metadata")
        inspect.add_argument("dataset", type=Path)

        reduce = self._command("reduce", self.cmd_reduce, "fit a spectral reducer and write the reduced cube")
        reduce.add_argument("dataset", type=Path)
        reduce.add_argument("--method", choices=["pca", "cae2d", "cae3d"], default="pca")
        reduce.add_argument("--dim", type=int, default=None)
        reduce.add_argument("--epochs", type=int, default=None, help="autoencoder epochs")

        patch = self._command("patch", self.cmd_patch, "build patches or a downsampled scene")
        patch.add_argument("dataset", type=Path)
        patch.add_argument("--mode", choices=["cpc", "exclusive", "majority"], default="cpc")
        patch.add_argument("--n", type=int, default=10)
        patch.add_argument("--pad-policy", choices=["zero", "none"], default="zero")

    def _register_experiment_handlers(self):
        train_unet = self._command("train-unet", self.cmd_train_unet, "single U-Net experiment")
        self._add_experiment_arguments(train_unet)

        ceunet = self._command("ceunet", self.cmd_ceunet, "clustering-ensemble experiment")
        self._add_experiment_arguments(ceunet)
        ceunet.add_argument("--k", type=int, default=None)
        ceunet.add_argument("--cluster", choices=["kmeans", "gmm"], default=None)
        ceunet.add_argument("--weights", choices=["constant", "abundance", "random"], default=None)

        report = self._command("report", self.cmd_report, "re-render tables from report.json files")
        report.add_argument("reports", type=Path, nargs="+")

    def _register_study_handlers(self):
        grid = self._command("grid", self.cmd_grid, "cluster method x k sweep")
        self._add_experiment_arguments(grid)
        grid.add_argument("--methods", nargs="+", choices=["kmeans", "gmm"], default=["kmeans", "gmm"])
        grid.add_argument("--k-min", type=int, default=2)
        grid.add_argument("--k-max", type=int, default=6)

        weights = self._command("weights", self.cmd_weights, "ensemble weight scheme study")
        self._add_experiment_arguments(weights)
        weights.add_argument("--schemes", nargs="+", choices=["constant", "abundance", "random"],
                             default=["constant", "abundance", "random"])

        timing = self._command("timing", self.cmd_timing, "training time with and without patching")
        self._add_experiment_arguments(timing)

    @staticmethod
    def _add_experiment_arguments(command: argparse.ArgumentParser):
        command.add_argument("--dataset", type=Path, default=None)
        command.add_argument("--reducer", choices=["pca", "cae2d", "cae3d"], default=None)
        command.add_argument("--dim", type=int, default=None)
        command.add_argument("--epochs", type=int, default=None)
        command.add_argument("--trials", type=int, default=None)
        command.add_argument("--patch-n", type=int, default=None, help="CPC patch size; omit for pixels")

    def out_dir(self, args) -> Path:
        return args.out or get_settings().out_dir

    def experiment_config(self, args, **overrides) -> ExperimentConfig:
        """Config file first, then explicit command-line values on top"""
        if args.config is not None:
            cfg = ExperimentConfig.model_validate_json(args.config.read_text(encoding="utf-8"))
        elif getattr(args, "dataset", None) is not None:
            cfg = ExperimentConfig(dataset=args.dataset, name=args.dataset.name)
        else:
            raise ConfigError(["either --config or --dataset is required"])

        update = {}
        if getattr(args, "dataset", None) is not None:
            update["dataset"] = args.dataset
        if getattr(args, "reducer", None) is not None:
            update["reducer"] = args.reducer
        if getattr(args, "dim", None) is not None:
            update["reduce_dim"] = args.dim
        if getattr(args, "epochs", None) is not None:
            update["epochs"] = args.epochs
        if getattr(args, "patch_n", None) is not None:
            update["patch"] = PatchConfig(mode="cpc", n=args.patch_n)
        if args.seed is not None:
            update["seed"] = args.seed
            update["split"] = cfg.split.model_copy(update={"seed": args.seed})
        if getattr(args, "trials", None) is not None:
            update["split"] = update.get("split", cfg.split).model_copy(update={"num_trials": args.trials})
            update["ensemble"] = cfg.ensemble.model_copy(update={"num_trials": args.trials})
        if args.parallel_trials is not None:
            update["parallel_trials"] = args.parallel_trials
        update.update(overrides)
        return ExperimentConfig.model_validate({**cfg.model_dump(), **{
            key: value.model_dump() if hasattr(value, "model_dump") else value for key, value in update.items()
        }})

    def cmd_inspect(self, args) -> int:
        cube, gt = load_dataset(args.dataset)
        summary = dataset_summary(cube, gt)
        print(f"{'Dataset':<20}{'Bands':>8}{'Classes':>9}{'Pixels':>10}{'Labeled':>10}{'Fraction':>10}")
        print(f"{summary['name']:<20}{summary['bands']:>8}{summary['classes']:>9}{summary['pixels']:>10}"
              f"{summary['labeled']:>10}{summary['labeled_fraction']:>10.4f}")
        reference = summary["reference"]
        if reference is not None:
            fraction = reference["labeled"] / reference["pixels"]
            print(f"{'reference':<20}{reference['bands']:>8}{reference['classes']:>9}{reference['pixels']:>10}"
                  f"{reference['labeled']:>10}{fraction:>10.4f}")
        for class_id, count in summary["class_counts"].items():
            print(f"  class {class_id:>3}: {count}")
        return EXIT_OK

    def cmd_reduce(self, args) -> int:
        logger.info(TEXT_LOADING.format(path=args.dataset))
        cube, gt = load_dataset(args.dataset)
        pixels = remove_background(cube, gt)
        reducer = fit_reducer(args.method, pixels.samples, dim=args.dim, epochs=args.epochs, seed=args.seed or 0)
        reduced = HsiCube(data=reducer.transform_cube(cube.data), name=f"{cube.name}_{args.method}{reducer.output_dim}")
        out = self.out_dir(args) / reduced.name
        write_dataset(out, reduced, gt, extra_header={"normalized": True, "reducer": args.method})
        save_reducer(out / "reducer.bin", reducer)
        print(out)
        return EXIT_OK

    def cmd_patch(self, args) -> int:
        cube, gt = load_dataset(args.dataset)
        cfg = PatchConfig(mode=args.mode, n=args.n, pad_policy=args.pad_policy)
        result = apply_patching(cube, gt, cfg)
        out = self.out_dir(args) / f"{cube.name}_{args.mode}{args.n}"
        if cfg.mode == "cpc":
            save_patch_dataset(out, result, gt.num_classes, name=out.name)
        else:
            downsampled, block_gt = result
            write_dataset(out, downsampled, block_gt,
                          extra_header={"normalized": True, "patch_mode": cfg.mode, "patch_n": cfg.n})
        print(out)
        return EXIT_OK

    def _finish(self, reports, args, **studies) -> int:
        emit_outputs(reports, self.out_dir(args), **studies)
        return EXIT_OK if all(report.status == "ok" for report in reports) else EXIT_FAILED

    def cmd_train_unet(self, args) -> int:
        cfg = self.experiment_config(args, model="unet")
        return self._finish([run_experiment(cfg, self.ledgers, self.out_dir(args) / "checkpoints")], args)

    def cmd_ceunet(self, args) -> int:
        cfg = self.experiment_config(args, model="ceunet")
        ensemble = {}
        if args.k is not None:
            ensemble["k"] = args.k
        if args.cluster is not None:
            ensemble["method"] = args.cluster
        if args.weights is not None:
            ensemble["weight_scheme"] = args.weights
        if ensemble:
            cfg = cfg.model_copy(update={"ensemble": cfg.ensemble.model_copy(update=ensemble)})
        return self._finish([run_experiment(cfg, self.ledgers, self.out_dir(args) / "checkpoints")], args)

    def cmd_grid(self, args) -> int:
        cfg = self.experiment_config(args, model="ceunet")
        cells = grid_cluster_tuning(cfg, methods=args.methods, k_range=range(args.k_min, args.k_max + 1))
        emit_outputs([cell.report for cell in cells], self.out_dir(args), grid=cells)
        return EXIT_OK

    def cmd_weights(self, args) -> int:
        cfg = self.experiment_config(args, model="ceunet")
        cells = weight_study(cfg, schemes=args.schemes)
        return self._finish([cell.report for cell in cells], args, weights=cells)

    def cmd_timing(self, args) -> int:
        cfg = self.experiment_config(args)
        cells = timing_comparison(cfg, patch_n=args.patch_n or 10)
        return self._finish([cell.report for cell in cells], args, timing=cells)

    def cmd_report(self, args) -> int:
        emit_outputs(load_reports(args.reports), self.out_dir(args))
        return EXIT_OK

    def run(self, argv=None) -> int:
        args = self.parser.parse_args(argv)
        settings = get_settings()
        logging.getLogger().setLevel(settings.log_level)
        try:
            return args.handler(args)
        except ConfigError as e:
            logger.error("Invalid configuration: %s", e)
            return EXIT_CONFIG
        except (ValidationError, json.JSONDecodeError) as e:
            logger.error("Invalid configuration file: %s", e)
            return EXIT_CONFIG
        except CeuNetError as e:
            logger.error("Command %s failed: %s\n%s", args.command, e, traceback.format_exc())
            return EXIT_FAILED


if __name__ == "__main__":
    app = HarnessApplication()
    try:
        sys.exit(app.run())
    except KeyboardInterrupt:
        logger.info(TEXT_INTERRUPTED)
    except Exception as e:
        logger.critical("Fatal error: %s", e)
        sys.exit(EXIT_FAILED)
