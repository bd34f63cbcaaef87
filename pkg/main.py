from src.KnowledgeTracing.experiment import COMMANDS, Experiment
import argparse
import copy
import hashlib
import json
import logging
import math
import os
import sys
import toml


EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2

DEFAULT_CONFIG = {
    "settings": {"seed": 0, "threads": 1},
    "data": {
        "interactions": "",
        "annotations": "",
        "latent": "",
        "timestamp_unit": "seconds",
        "kc_order": "first_seen",
        "min_interval": 1.0,
        "columns": {"learner_id": "learner_id", "kc_id": "kc_id", "timestamp": "timestamp", "correct": "correct"},
    },
    "protocol": {
        "mode": "within",
        "min_interactions": 50,
        "train_len": 10,
        "test_len": 10,
        "validation_fraction": 0.2,
    },
    "simulate": {
        "n_learners": 100,
        "n_kcs": 20,
        "n_interactions": 50,
        "schedule": "uniform",
        "gap_mean": 86400.0,
        "min_gap": 1.0,
        "new_prob": 0.5,
        "embedding_dim": 16,
        "strong_edges": 0,
        "graph_steps": 3000,
        "s_bar": [],
        "r1": [],
        "h": [],
        "r": [],
        "z_bar": 0.0,
        "w1": 1.0,
    },
    "fit": {
        "mc_samples": 8,
        "learning_rate": 0.005,
        "grad_clip": 10.0,
        "max_epochs": 300,
        "batch_size": 32,
        "gradient_mode": "analytic",
        "embedding_dim": 16,
        "lr_halving_epochs": 200,
        "min_learning_rate": 1e-5,
        "fit_params": True,
        "init_logvar": math.log(0.1),
        "fd_step": 1e-5,
        "continual_steps": 30,
        "continual_learning_rate": 0.05,
        "prior_samples": 256,
        "predict_samples": 1000,
        "update_graph": False,
        "ablation": {"no_graph": False, "no_individual": False, "no_dynamics": False},
    },
    "continual": {"n_steps": 90, "horizon": 10, "baselines": True},
    "baselines": {
        "kinds": ["hlr", "ppe"],
        "max_iter": 200,
        "l2": 1e-4,
        "init_jitter": 0.0,
        "ppe_intercept": 0.0,
        "ppe_slope": 1.0,
        "continual_iter": 10,
    },
    "metrics": {
        "ridge": 1e-6,
        "sigma_floor": 0.05,
        "edge_threshold": 0.5,
        "rating_threshold": 5.0,
        "causal_samples": 10000,
        "causal_sampler": "sobol",
        "n_subsets": 5,
        "subset_len": 30,
        "subset_epochs": 100,
    },
    "IO": {"out": "results", "logName": "logfile", "checkpoint": "", "reports": [], "plots": True},
}

# section -> keys the user's file must set for each command
REQUIRED_STRUCTURE = {
    "simulate": {"simulate": ["n_learners", "n_kcs", "n_interactions"], "IO": ["out"]},
    "fit": {"data": ["interactions"], "protocol": ["train_len", "test_len"], "IO": ["out"]},
    "predict": {"data": ["interactions"], "IO": ["out", "checkpoint"]},
    "continual": {"data": ["interactions"], "continual": ["n_steps"], "IO": ["out", "checkpoint"]},
    "eval-graph": {"data": ["interactions"], "IO": ["out", "checkpoint"]},
    "eval-traits": {"data": ["interactions"], "IO": ["out", "checkpoint"]},
    "report": {"IO": ["out", "reports"]},
}

PATH_KEYS = (("data", "interactions"), ("data", "annotations"), ("data", "latent"), ("IO", "out"), ("IO", "checkpoint"))


class ConfigError(ValueError):
    """Configuration that does not match the schema."""


class ConfigProcessor:
    """
    Reads, validates and resolves TOML experiment configurations.

    User files are merged over DEFAULT_CONFIG; keys absent from the defaults
    are rejected, as are values whose type differs from the default's.
    """

    def __init__(self):
        self.log_dir = "logs"
        os.makedirs(self.log_dir, exist_ok=True)

    def setup_logging(self, config=None):
        """
        Configures logging for the run.

        Parameters:
            config (dict, optional): Configuration holding IO.logName.
                If None, the log file is logs/logfile.log.
        """
        log_name = "logfile"
        if config:
            log_name = config.get("IO", {}).get("logName", log_name) or log_name

        log_file = os.path.join(self.log_dir, f"{log_name}.log")
        logging.basicConfig(
            level=logging.INFO,
            format="%(asctime)s - %(levelname)s - %(message)s",
            handlers=[logging.FileHandler(log_file)]
        )

    def read_toml_file(self, filename, command):
        """
        Reads a TOML configuration file and checks it against the command's
        required structure and the default schema.

        Parameters:
            filename (str): Path to the TOML file.
            command (str): Command the configuration is read for.

        Returns:
            dict: Configuration merged over DEFAULT_CONFIG.

        Raises:
            FileNotFoundError: If the specified file does not exist.
            ConfigError: If the file is invalid, misses required keys or
                contains unknown keys.
        """
        if not os.path.exists(filename):
            raise FileNotFoundError(f"File {filename} does not exist")

        try:
            with open(filename, "r") as file:
                user_config = toml.load(file)
        except toml.TomlDecodeError as e:
            raise ConfigError(f"Error while reading {filename}: {e}")

        for section, keys in REQUIRED_STRUCTURE[command].items():
            if section not in user_config:
                raise ConfigError(f"Missing section: '{section}' in {filename}")
            for key in keys:
                if key not in user_config[section]:
                    raise ConfigError(f"Missing key: '{section}.{key}' in {filename}")

        return self.merge(DEFAULT_CONFIG, user_config, source=filename)

    def merge(self, defaults, overrides, source="config", prefix=""):
        """Deep-merges overrides into a copy of defaults with schema checks."""
        merged = copy.deepcopy(defaults)
        for key, value in overrides.items():
            path = f"{prefix}{key}"
            if key not in defaults:
                raise ConfigError(f"Unknown key '{path}' in {source}")
            expected = defaults[key]
            if isinstance(expected, dict):
                if not isinstance(value, dict):
                    raise ConfigError(f"'{path}' in {source} must be a section")
                merged[key] = self.merge(expected, value, source, prefix=f"{path}.")
            else:
                merged[key] = self._check_type(path, expected, value, source)
        return merged

    @staticmethod
    def _check_type(path, expected, value, source):
        if isinstance(expected, bool):
            valid = isinstance(value, bool)
        elif isinstance(expected, float):
            valid = isinstance(value, (int, float)) and not isinstance(value, bool)
            value = float(value) if valid else value
        elif isinstance(expected, int):
            valid = isinstance(value, int) and not isinstance(value, bool)
        else:
            valid = isinstance(value, type(expected))
        if not valid:
            raise ConfigError(
                f"Invalid value for '{path}' in {source}: expected {type(expected).__name__}, got {type(value).__name__}"
            )
        return value

    def apply_overrides(self, config, assignments, seed=None, out=None, threads=None):
        """
        Applies command-line overrides.

        Parameters:
            config (dict): Merged configuration.
            assignments (list): "dotted.path=value" strings; values are TOML
                literals, bare words are taken as strings.
            seed, out, threads: Shortcuts for settings.seed, IO.out and
                settings.threads.
        """
        config = copy.deepcopy(config)
        for assignment in assignments or []:
            if "=" not in assignment:
                raise ConfigError(f"Override '{assignment}' is not of the form dotted.path=value")
            path, raw = assignment.split("=", 1)
            try:
                value = toml.loads(f"value = {raw}")["value"]
            except toml.TomlDecodeError:
                value = raw
            *sections, key = path.strip().split(".")
            nested = {key: value}
            for section in reversed(sections):
                nested = {section: nested}
            config = self.merge(config, nested, source="command line")
        if seed is not None:
            config["settings"]["seed"] = seed
        if out is not None:
            config["IO"]["out"] = out
        if threads is not None:
            config["settings"]["threads"] = threads
        if config["settings"]["seed"] < 0:
            raise ConfigError("'settings.seed' must be non-negative")
        if config["settings"]["threads"] < 1:
            raise ConfigError("'settings.threads' must be at least 1")
        return config

    @staticmethod
    def resolve_paths(config):
        """Absolute paths for every path-valued key that is set."""
        config = copy.deepcopy(config)
        for section, key in PATH_KEYS:
            if config[section][key]:
                config[section][key] = os.path.abspath(config[section][key])
        config["IO"]["reports"] = [os.path.abspath(path) for path in config["IO"]["reports"]]
        return config

    @staticmethod
    def config_hash(config):
        canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def load(self, filename, command, assignments=None, seed=None, out=None, threads=None):
        config = self.read_toml_file(filename, command)
        config = self.apply_overrides(config, assignments, seed, out, threads)
        return self.resolve_paths(config)

    def process_single_file(self, command, file_path, assignments=None, seed=None, out=None, threads=None):
        """
        Runs one command from a configuration file.

        Returns:
            int: Exit code (0 success, 1 runtime failure or non-finite
            metrics, 2 configuration error or missing input).
        """
        try:
            config = self.load(file_path, command, assignments, seed, out, threads)
            print(f"Starting {command} for {file_path}...")
            logging.info(f"Processing {file_path} ({command})")

            experiment = Experiment(config, self.config_hash(config))
            report = experiment.run(command)
            if not report.metrics.all_finite():
                bad = sorted(name for name, value in report.metrics.metrics.items() if not math.isfinite(value))
                logging.error(f"Non-finite metrics in {file_path}: {', '.join(bad)}")
                print(f"Error: non-finite metrics in {file_path}: {', '.join(bad)}")
                return EXIT_RUNTIME

            print(f"{command} for {file_path} completed successfully.")
            logging.info(f"{command} for {file_path} completed successfully.")
            return EXIT_OK
        except (ConfigError, FileNotFoundError) as e:
            logging.error(f"Error processing {file_path}: {e}")
            print(f"Error processing {file_path}: {e}")
            return EXIT_CONFIG
        except Exception as e:
            logging.error(f"Error processing {file_path}: {e}")
            print(f"Error processing {file_path}: {e}")
            return EXIT_RUNTIME

    def process_multiple_files(self, command, folder="user_data", **options):
        """
        Runs a command for every TOML file in a folder.

        Returns:
            int: The largest exit code of the individual runs.
        """
        print(f"Finding all TOML files in folder: {folder}...")
        if not os.path.exists(folder):
            print(f"Error: Folder '{folder}' does not exist.")
            return EXIT_CONFIG

        toml_files = sorted(f for f in os.listdir(folder) if f.endswith(".toml"))
        if not toml_files:
            print(f"No TOML files found in folder '{folder}'.")
            return EXIT_CONFIG

        print(f"Found {len(toml_files)} TOML file(s) in folder '{folder}'.")
        exit_code = EXIT_OK
        for idx, toml_file in enumerate(toml_files, start=1):
            file_path = os.path.join(folder, toml_file)
            print(f"[{idx}/{len(toml_files)}] Processing {toml_file}...")
            exit_code = max(exit_code, self.process_single_file(command, file_path, **options))
        return exit_code


def parse_input(argv=None):
    """
    Parse command-line arguments.
    """
    parser = argparse.ArgumentParser(description="Knowledge tracing experiments")
    parser.add_argument("command", choices=COMMANDS, help="Pipeline step to run")
    parser.add_argument("-c", "--config", help="Configuration file (e.g. user_data/fit.toml)")
    parser.add_argument("-f", "--folder", help="Run the command for every TOML file in a folder")
    parser.add_argument("--seed", type=int, help="Top-level seed (overrides settings.seed)")
    parser.add_argument("--out", help="Output folder (overrides IO.out)")
    parser.add_argument("--threads", type=int, help="Worker threads (overrides settings.threads)")
    parser.add_argument(
        "--set", action="append", default=[], metavar="PATH=VALUE", help="Override any key, e.g. --set fit.max_epochs=50"
    )
    return parser.parse_args(argv)


def main(argv=None):
    """
    Main function: runs the requested command and returns its exit code.
    """
    args = parse_input(argv)
    processor = ConfigProcessor()
    options = {"assignments": args.set, "seed": args.seed, "out": args.out, "threads": args.threads}

    if args.folder:
        print(f"Processing all TOML files in specified folder: {args.folder}")
        processor.setup_logging(config={"IO": {"logName": f"{args.command}_folder"}})
        return processor.process_multiple_files(args.command, folder=args.folder, **options)

    config_file = args.config
    if not config_file:
        config_file = os.path.join("user_data", f"{args.command}.toml")
        print(f"No specific input provided. Using default: {config_file}")

    try:
        with open(config_file, "r") as file:
            processor.setup_logging(config=toml.load(file))
    except (OSError, toml.TomlDecodeError):
        processor.setup_logging()
    return processor.process_single_file(args.command, config_file, **options)


if __name__ == "__main__":
    sys.exit(main())
