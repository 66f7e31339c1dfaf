"""Command-line pipeline: ``gmmdae {synth,train,fit,score,eval} --config FILE``.

The config file holds ``key = value`` lines (``#`` starts a comment). Any key
may be overridden with ``--set key=value``. Relative paths resolve against the
config file's directory, or the working directory when no file is given.

Exit codes: 0 success, 2 config/validation error, 3 I/O error, 4 numerical
failure, 5 incompatible models.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import autoenc, density, evaluation, scoring, synth
from .rankpool import RankPoolConfig, dynamic_image_array
from .rng import derive_rng
from .tensorio import TensorFormatError, CorpusError, ManifestError, load_corpus, read_manifest

log = logging.getLogger("gmmdae")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_INCOMPATIBLE = 0, 2, 3, 4, 5

PATH_KEYS = {
    "data_dir", "train_manifest", "test_manifest", "test_labels", "val_manifest", "val_labels",
    "model_dir", "score_file", "val_score_file", "report_file",
}


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _anomalies(text: str) -> list:
    """``first-last:type;first-last:type`` -> [(first, last, type), ...]"""
    out = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        span, kind = part.split(":")
        first, last = span.split("-")
        out.append((int(first), int(last), kind.strip()))
    return out


# key -> (parser, default text)
SCHEMA = {
    "seed": (int, "0"),
    # paths
    "data_dir": (str, "data"),
    "train_manifest": (str, "data/train/manifest.txt"),
    "test_manifest": (str, "data/test/manifest.txt"),
    "test_labels": (str, "data/test/labels.txt"),
    "val_manifest": (str, "data/val/manifest.txt"),
    "val_labels": (str, "data/val/labels.txt"),
    "model_dir": (str, "models"),
    "score_file": (str, "scores.csv"),
    "val_score_file": (str, "val_scores.csv"),
    "report_file": (str, "report.txt"),
    # dynamic images
    "t": (int, "10"),
    # autoencoders
    "hidden_dims": (_ints, "1024,256,64"),
    "latent_dim": (int, "32"),
    "leak": (float, "0.01"),
    "sigma": (float, "0.01"),
    "beta": (float, "0.0001"),
    "learning_rate": (float, "0.01"),
    "lr_decay": (float, "0.95"),
    "batch_size": (int, "1000"),
    "max_epochs": (int, "100"),
    # mixture
    "k": (int, "15"),
    "em_epsilon": (float, "1e-6"),
    "em_max_iters": (int, "500"),
    "cov_reg": (float, "1e-6"),
    # fusion and evaluation
    "lambda1": (float, "1"),
    "lambda2": (float, "1"),
    "lambda3": (float, "1"),
    "lambda4": (float, "1"),
    "grid": (_bool, "false"),
    "grid_values": (_floats, "0,0.25,0.5,1,2,4"),
    # synthetic corpus
    "synth_train_frames": (int, "1000"),
    "synth_test_frames": (int, "300"),
    "synth_val_frames": (int, "200"),
    "synth_speed_min": (float, "0.2"),
    "synth_speed_max": (float, "0.5"),
    "synth_noise": (float, "0.02"),
    "synth_test_anomalies": (_anomalies, "60-89:fast_motion;180-209:novel_texture"),
    "synth_val_anomalies": (_anomalies, "40-59:fast_motion;120-139:novel_texture"),
}


class ConfigError(Exception):
    pass


class PipelineIOError(Exception):
    pass


class PipelineConfig(dict):
    """Parsed config values keyed by name; paths already resolved."""

    def __getattr__(self, name):
        try:
            return self[name]
        except KeyError:
            raise AttributeError(name) from None

    def seed_for(self, tag: str) -> int:
        return int(derive_rng(self["seed"], tag).integers(2**63))

    def fusion_weights(self) -> scoring.FusionWeights:
        return scoring.FusionWeights(self.lambda1, self.lambda2, self.lambda3, self.lambda4)

    def train_config(self, tag: str) -> autoenc.TrainConfig:
        return autoenc.TrainConfig(
            sigma=self.sigma, beta=self.beta, learning_rate=self.learning_rate, lr_decay=self.lr_decay,
            batch_size=self.batch_size, max_epochs=self.max_epochs, seed=self.seed_for(tag), leak=self.leak,
        )

    def em_config(self, tag: str) -> density.EmConfig:
        return density.EmConfig(k=self.k, epsilon=self.em_epsilon, max_iters=self.em_max_iters,
                                cov_reg=self.cov_reg, seed=self.seed_for(tag))

    def model_path(self, name: str) -> Path:
        return self.model_dir / name


def parse_config_text(text: str, source: str = "<config>") -> dict:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        raw[key] = value
    return raw


def load_config(path=None, overrides=()) -> PipelineConfig:
    raw = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise PipelineIOError(f"cannot read config {path}: {exc}") from None
        raw.update(parse_config_text(text, str(path)))
        base = path.resolve().parent
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        raw[key] = value
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = PipelineConfig()
    for key, (parse, default) in SCHEMA.items():
        text = raw.get(key, default)
        try:
            value = parse(text)
        except (ValueError, TypeError):
            raise ConfigError(f"bad value for {key}: {text!r}") from None
        if key in PATH_KEYS:
            value = Path(value) if Path(value).is_absolute() else base / value
        cfg[key] = value
    _validate(cfg)
    return cfg


def _validate(cfg: PipelineConfig) -> None:
    try:
        RankPoolConfig(cfg.t)
        cfg.train_config("check")
        cfg.em_config("check")
        cfg.fusion_weights()
        evaluation.GridSpec(*(cfg.grid_values,) * 4)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if cfg.latent_dim < 1 or any(h < 1 for h in cfg.hidden_dims):
        raise ConfigError("layer sizes must be positive")


def _need_file(path: Path, what: str) -> None:
    if not path.is_file():
        raise PipelineIOError(f"{what} not found: {path}")


def _need_parent(path: Path) -> None:
    if not path.parent.is_dir():
        raise PipelineIOError(f"output directory does not exist: {path.parent}")


def _ensure_dir(path: Path) -> None:
    _need_parent(path)
    path.mkdir(exist_ok=True)


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------- commands


def cmd_synth(cfg: PipelineConfig) -> int:
    _ensure_dir(cfg.data_dir)
    common = dict(t=cfg.t, speed_min=cfg.synth_speed_min, speed_max=cfg.synth_speed_max,
                  noise=cfg.synth_noise)
    try:
        splits = [
            ("train", synth.VideoSpec(cfg.synth_train_frames, seed=cfg.seed_for("synth/train"), **common)),
            ("test", synth.VideoSpec(cfg.synth_test_frames, anomalies=cfg.synth_test_anomalies,
                                     seed=cfg.seed_for("synth/test"), **common)),
        ]
        if cfg.synth_val_frames > 0:
            splits.append(("val", synth.VideoSpec(cfg.synth_val_frames, anomalies=cfg.synth_val_anomalies,
                                                   seed=cfg.seed_for("synth/val"), **common)))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    for name, spec in splits:
        manifest, labels = synth.make_video_corpus(spec, cfg.data_dir / name)
        log.info("wrote %s (%d frames) and %s", manifest, spec.n_frames, labels)
    return EXIT_OK


def _load_sequences(manifest_path: Path, t: int):
    _need_file(manifest_path, "manifest")
    entries = read_manifest(manifest_path)
    if not entries:
        raise ConfigError(f"manifest {manifest_path} is empty")
    corpus = load_corpus(entries)
    if corpus[0].t != t:
        raise ConfigError(f"{manifest_path}: sequences hold {corpus[0].t} patches but t = {t}")
    return corpus


def _training_inputs(cfg: PipelineConfig):
    corpus = _load_sequences(cfg.train_manifest, cfg.t)
    patches = np.stack([s.current for s in corpus])
    dyn = np.stack([dynamic_image_array(s.patches).astype(np.float32) for s in corpus])
    return patches, dyn


def _dims(cfg: PipelineConfig, input_dim: int) -> list:
    hidden = list(cfg.hidden_dims)
    return [input_dim, *hidden, cfg.latent_dim, *reversed(hidden), input_dim]


def cmd_train(cfg: PipelineConfig) -> int:
    patches, dyn = _training_inputs(cfg)
    _ensure_dir(cfg.model_dir)
    dims = _dims(cfg, patches[0].size)
    for name, data, normalize in (("appearance", patches, False), ("motion", dyn, True)):
        model, history = autoenc.train(data, cfg.train_config(f"train/{name}"), dims, normalize_inputs=normalize)
        autoenc.save_dae(model, cfg.model_path(f"{name}.dae"))
        lines = ["epoch,loss"] + [f"{e},{_fmt(v)}" for e, v in enumerate(history, 1)]
        cfg.model_path(f"{name}_loss.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        if history:
            log.info("%s DAE: loss %.4g -> %.4g over %d epochs", name, history[0], history[-1], len(history))
    return EXIT_OK


def _load_dae(cfg: PipelineConfig, name: str) -> autoenc.DaeModel:
    path = cfg.model_path(f"{name}.dae")
    _need_file(path, "autoencoder model")
    m = autoenc.load_dae(path, leak=cfg.leak, sigma=cfg.sigma, beta=cfg.beta)
    if m.latent_dim != cfg.latent_dim:
        raise scoring.IncompatibleModelsError(
            f"{path}: bottleneck has {m.latent_dim} dims, config latent_dim = {cfg.latent_dim}"
        )
    return m


def cmd_fit(cfg: PipelineConfig) -> int:
    patches, dyn = _training_inputs(cfg)
    lines = ["model,iteration,log_likelihood"]
    for name, data in (("appearance", patches), ("motion", dyn)):
        dae = _load_dae(cfg, name)
        z = autoenc.encode(dae, dae.prepare(data))
        try:
            gmm, history = density.fit(z, cfg.em_config(f"fit/{name}"))
        except ValueError as exc:
            raise ConfigError(f"{name}: {exc}") from None
        density.save_gmm(gmm, cfg.model_path(f"{name}.gmm"))
        lines += [f"{name},{i},{_fmt(v)}" for i, v in enumerate(history)]
        log.info("%s GMM: %d EM iterations, L = %.6g", name, len(history) - 1, history[-1])
    cfg.model_path("em_log.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return EXIT_OK


def _load_gmm(cfg: PipelineConfig, name: str) -> density.GmmModel:
    path = cfg.model_path(f"{name}.gmm")
    _need_file(path, "mixture model")
    return density.load_gmm(path)


def _score_split(cfg, models, manifest: Path, out: Path) -> None:
    corpus = _load_sequences(manifest, cfg.t)
    frames = scoring.score_corpus(*models, corpus, RankPoolConfig(cfg.t), cfg.fusion_weights())
    _need_parent(out)
    scoring.write_scores(frames, out)
    log.info("scored %d sequences into %d frames -> %s", len(corpus), len(frames), out)


def cmd_score(cfg: PipelineConfig) -> int:
    models = (_load_dae(cfg, "appearance"), _load_dae(cfg, "motion"),
              _load_gmm(cfg, "appearance"), _load_gmm(cfg, "motion"))
    _score_split(cfg, models, cfg.test_manifest, cfg.score_file)
    if cfg.val_manifest.is_file():
        _score_split(cfg, models, cfg.val_manifest, cfg.val_score_file)
    return EXIT_OK


def _join(score_path: Path, label_path: Path):
    _need_file(score_path, "score file")
    _need_file(label_path, "label file")
    rows = scoring.read_scores(score_path)
    labels = evaluation.read_labels(label_path)
    frames = [r[0] for r in rows]
    missing = [f for f in frames if f not in labels]
    if missing:
        raise ConfigError(f"{label_path}: no label for scored frame {missing[0]}")
    extra = sorted(set(labels) - set(frames))
    if extra:
        raise ConfigError(f"{score_path}: labelled frame {extra[0]} has no score")
    y = np.array([labels[f] for f in frames])
    if y.min() == y.max():
        raise ConfigError(f"{label_path}: labels contain a single class")
    return rows, y


def _components(rows, path):
    if any(r[1] is None for r in rows):
        raise ConfigError(f"{path}: frames without detections carry no components for grid search")
    return np.array([r[1] for r in rows])


def cmd_eval(cfg: PipelineConfig) -> int:
    rows, y = _join(cfg.score_file, cfg.test_labels)
    scores = np.array([r[3] for r in rows])
    metrics = [("frames", len(rows)), ("auroc", _fmt(evaluation.auroc(scores, y)))]
    print(f"AUROC {100.0 * evaluation.auroc(scores, y):.1f}")
    if cfg.grid:
        val_rows, val_y = _join(cfg.val_score_file, cfg.val_labels)
        grid = evaluation.GridSpec(*(cfg.grid_values,) * 4)
        best, val_auc = evaluation.grid_search(_components(val_rows, cfg.val_score_file), val_y, grid)
        tuned = evaluation.auroc(scoring.fuse_array(_components(rows, cfg.score_file), best), y)
        metrics += [(f"lambda{i}", _fmt(v)) for i, v in enumerate(best.as_tuple(), 1)]
        metrics += [("val_auroc", _fmt(val_auc)), ("tuned_auroc", _fmt(tuned))]
        print("best weights " + " ".join(f"lambda{i}={v:g}" for i, v in enumerate(best.as_tuple(), 1)))
        print(f"validation AUROC {100.0 * val_auc:.1f}  test AUROC with tuned weights {100.0 * tuned:.1f}")
    _need_parent(cfg.report_file)
    evaluation.write_report(metrics, cfg.report_file)
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "fit": cmd_fit, "score": cmd_score, "eval": cmd_eval}


def run(command: str, cfg: PipelineConfig) -> int:
    try:
        return COMMANDS[command](cfg)
    except (ConfigError, ManifestError, CorpusError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (PipelineIOError, OSError, TensorFormatError, autoenc.DaeFormatError, density.GmmFormatError) as exc:
        log.error("%s", exc)
        return EXIT_IO
    except scoring.IncompatibleModelsError as exc:
        log.error("%s", exc)
        return EXIT_INCOMPATIBLE
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="gmmdae", description=__doc__.split("\n\n")[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("-c", "--config", help="config file of key = value lines")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.set)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except PipelineIOError as exc:
        log.error("%s", exc)
        return EXIT_IO
    return run(args.command, cfg)


if __name__ == "__main__":
    sys.exit(main())
