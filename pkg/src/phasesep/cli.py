"""Command-line driver: ``phasesep <command>``.

Exit codes: 0 ok, 1 usage or configuration error, 2 data error,
3 a verified criterion failed.
"""
from __future__ import annotations

import csv
import json
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from . import INSTRUMENTS, __version__
from .audio_io import ClipMismatchError, WavError, read_wav, write_wav
from .config import ConfigError, ExperimentConfig, load_config
from .dataset import CorpusError, compute_stats, generate_synthetic_song, scan_corpus, write_song
from .evaluation import (SilentReferenceError, compare, write_comparison_csv, write_scores_csv,
                         write_summary_json)
from .experiments import evaluate_bundle, phase_variant, train_bundle, upper_bound_reports
from .neuralnet import BundleError, TrainingDivergedError, load_bundle, save_bundle
from .phase_features import (correct_freq_shift, correct_time_shift, extract_phase_features,
                             feature_histogram, freq_diff, time_diff, write_histogram_csv)
from .separation import separate
from .stft import phase, stft, write_pspc
from .theory_oracle import chirp_relation_check, write_relation_csv

log = logging.getLogger("phasesep")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CRITERION = 0, 1, 2, 3


class DataError(Exception):
    """Input data missing or unusable."""


class CriterionFailure(Exception):
    """A verification command ran but its criterion did not hold."""


DATA_ERRORS = (DataError, WavError, CorpusError, BundleError, ClipMismatchError,
               SilentReferenceError, TrainingDivergedError, FileNotFoundError, ValueError)


# ---------------------------------------------------------------------------
# helpers

def _preamble(meta: dict) -> str:
    return " ".join(f"{k}={v}" for k, v in meta.items())


def _prepare_dir(path: Path, force: bool) -> Path:
    """Create ``path``; refuse to reuse a non-empty one unless ``force``."""
    if path.exists() and any(path.iterdir()):
        if not force:
            raise click.UsageError(f"{path} exists and is not empty; pass --force to overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_split(cfg: ExperimentConfig, split: str):
    refs = [r for r in scan_corpus(cfg.corpus_root) if r.split == split]
    if not refs:
        raise DataError(f"no {split} songs under {cfg.corpus_root}")
    return [r.load() for r in refs]


def _write_curve_csv(path: Path, curve, meta: dict):
    with path.open("w", newline="") as fh:
        fh.write(f"# {_preamble(meta)}\n")
        w = csv.writer(fh)
        w.writerow(["epoch", "train_mse", "val_mse"])
        for epoch, tr, va in curve:
            w.writerow([epoch, repr(float(tr)), repr(float(va))])


def _bundle_tag(arch: str, variant: str | None) -> str:
    return arch if variant is None else f"{arch}-{variant}"


# ---------------------------------------------------------------------------
# commands

@click.group()
@click.version_option(__version__)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="Experiment config (JSON). Defaults apply when omitted.")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory.")
@click.option("--seed", type=click.IntRange(min=0), default=None, help="Override the seed list.")
@click.option("--profile", type=click.Choice(["desk", "paper"]), default=None,
              help="STFT/sample-rate profile.")
@click.option("--force", is_flag=True, help="Overwrite existing outputs.")
@click.option("-v", "--verbose", is_flag=True, help="Log progress.")
@click.pass_context
def cli(ctx, config_path, out, seed, profile, force, verbose):
    """Phase-feature music source separation experiments."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if config_path is not None and not Path(config_path).is_file():
        raise click.UsageError(f"config file {config_path} not found")
    ctx.obj = {"cfg": load_config(config_path, out=out, seed=seed, profile=profile),
               "force": force}


@cli.command()
@click.pass_obj
def synth(obj):
    """Write the synthetic corpus in DSD100 layout."""
    cfg: ExperimentConfig = obj["cfg"]
    root = _prepare_dir(cfg.corpus_root, obj["force"])
    s = cfg.raw["synth"]
    base = cfg.seeds[0]
    comment = _preamble(cfg.stamp(seed=base))
    count = 0
    for split, n in (("Dev", int(s["n_dev"])), ("Test", int(s["n_test"]))):
        for _ in range(n):
            song = generate_synthetic_song(cfg.synth_spec, 1000 * base + count)
            write_song(song, root, split, comment)
            count += 1
    click.echo(f"wrote {count} songs to {root}")


@cli.command()
@click.option("--song", required=True, help="Song name in the corpus.")
@click.option("--source", type=click.Choice(("mixture",) + INSTRUMENTS), default="mixture",
              help="Which signal of the song to analyse.")
@click.pass_obj
def features(obj, song, source):
    """Per-bin phase-derivative histograms before and after shift correction."""
    cfg: ExperimentConfig = obj["cfg"]
    refs = {r.name: r for r in scan_corpus(cfg.corpus_root)}
    if song not in refs:
        raise DataError(f"song {song!r} not found under {cfg.corpus_root}")
    loaded = refs[song].load()
    clip = loaded.mixture if source == "mixture" else loaded.sources[source]
    if not np.any(clip.samples):
        raise DataError(f"{song}/{source} is silent")
    scfg = cfg.stft_config
    spec = stft(clip, scfg)
    ph = phase(spec)
    dt, df = time_diff(ph), freq_diff(ph)
    tensors = {
        "dt": dt,
        "dt_shift": correct_time_shift(dt, scfg.fft_size, scfg.hop),
        "df": df,
        "df_shift": correct_freq_shift(df),
    }
    out = _prepare_dir(cfg.out / "features" / song / source, obj["force"])
    fc = cfg.raw["features"]
    meta = cfg.stamp(seed=cfg.seeds[0], song=song, source=source)
    for name, t in tensors.items():
        # frame 0 / bin 0 carry no difference; leave them out of the statistics
        body = t[:, 1:, :] if name.startswith("dt") else t[:, :, 1:]
        offset = 0 if name.startswith("dt") else 1
        for k in fc["bins"]:
            if not 0 <= k < scfg.n_bins or (offset and k == 0):
                continue
            hist = feature_histogram(body[..., k - offset], int(fc["histogram_bins"]), k, name)
            write_histogram_csv(out / f"{name}_k{k:04d}.csv", hist, _preamble(meta))
    feats = extract_phase_features(ph, cfg.phase_config)
    write_pspc(out / "features.pspc", feats, scfg)
    mean_df = float(np.mean(tensors["df_shift"][:, :, 1:]))
    (out / "summary.json").write_text(json.dumps(
        {"metadata": meta, "mean_corrected_df": mean_df,
         "feature_tag": cfg.phase_config.tag}, indent=2, sort_keys=True))
    click.echo(f"histograms for {len(fc['bins'])} bins in {out}; mean corrected df {mean_df:+.4f} rad")


@cli.command()
@click.pass_obj
def train(obj):
    """Train one bundle per architecture (and per ablation variant) and seed."""
    cfg: ExperimentConfig = obj["cfg"]
    songs = _load_split(cfg, "Dev")
    scfg = cfg.stft_config
    stats = compute_stats(songs, scfg)
    out = _prepare_dir(cfg.out / "models", obj["force"])
    source = "instrument" if cfg.raw["task"] == "clean" else "mixture"
    summary = []
    for seed in cfg.seeds:
        tcfg = replace(cfg.train_config, seed=seed)
        for arch in cfg.raw["architectures"]:
            if arch == "amp_only":
                variants = [None]
            elif arch == "phase_only" and cfg.raw["ablation"]:
                variants = list(cfg.raw["ablation"])
            else:
                variants = [cfg.raw["phase_features"]]
            for variant in variants:
                tag = _bundle_tag(arch, variant)
                pcfg = phase_variant(variant, scfg) if variant else None
                meta = cfg.stamp(seed=seed, tag=tag, task=cfg.raw["task"])
                click.echo(f"training {tag} seed {seed}")
                bundle = train_bundle(songs, arch, scfg, pcfg, tcfg, cfg.raw["context"],
                                      cfg.raw["hidden"], stats=stats, metadata=meta,
                                      input_source=source if arch == "phase_only" else "mixture")
                stem = f"{tag}_seed{seed}"
                save_bundle(bundle, out / f"{stem}.psnn")
                for inst, curve in bundle.curves.items():
                    _write_curve_csv(out / f"{stem}_{inst}_curve.csv", curve,
                                     {**meta, "instrument": inst})
                    summary.append((tag, seed, inst, curve[-1][1], len(curve)))
    with (out / "training_summary.csv").open("w", newline="") as fh:
        fh.write(f"# {_preamble(cfg.stamp())}\n")
        w = csv.writer(fh)
        w.writerow(["tag", "seed", "instrument", "final_train_mse", "epochs"])
        for tag, seed, inst, mse, n in summary:
            w.writerow([tag, seed, inst, repr(float(mse)), n])
    click.echo(f"wrote {len(summary)} curves to {out}")


@cli.command("separate")
@click.option("--bundle", "bundle_path", required=True, type=click.Path(dir_okay=False))
@click.option("--mixture", "mixture_path", type=click.Path(dir_okay=False), default=None,
              help="Mixture WAV; defaults to every Test song of the corpus.")
@click.option("--dump-spec", is_flag=True, help="Also write filtered spectrograms as PSPC.")
@click.pass_obj
def separate_cmd(obj, bundle_path, mixture_path, dump_spec):
    """Separate mixtures into <song>/<instrument>_estimate.wav stems."""
    cfg: ExperimentConfig = obj["cfg"]
    if not Path(bundle_path).is_file():
        raise DataError(f"bundle {bundle_path} not found")
    bundle = load_bundle(bundle_path)
    if mixture_path is not None:
        items = [(Path(mixture_path).parent.name or "song", read_wav(mixture_path))]
    else:
        items = [(s.name, s.mixture) for s in _load_split(cfg, "Test")]
    out = _prepare_dir(cfg.out / "separated", obj["force"])
    meta = cfg.stamp(seed=bundle.metadata.get("seed", cfg.seeds[0]), bundle=Path(bundle_path).name)
    for name, mixture in items:
        result = separate(bundle, mixture, cfg.wiener_config)
        sdir = out / name
        sdir.mkdir(parents=True, exist_ok=True)
        for inst, clip in result.estimates.items():
            write_wav(sdir / f"{inst}_estimate.wav", clip, "float32", _preamble(meta))
            if dump_spec:
                write_pspc(sdir / f"{inst}_estimate.pspc", result.spectrograms[inst].values,
                           bundle.stft_config)
    click.echo(f"separated {len(items)} mixture(s) into {out}")


@cli.command()
@click.option("--bundle", "bundle_paths", required=True, multiple=True,
              type=click.Path(dir_okay=False),
              help="Bundle(s) to score; the first is the comparison baseline.")
@click.option("--upper-bounds", is_flag=True,
              help="Also emit the upper-bound table using the first bundle.")
@click.pass_obj
def evaluate(obj, bundle_paths, upper_bounds):
    """Score bundles on the Test split and compare them."""
    cfg: ExperimentConfig = obj["cfg"]
    for p in bundle_paths:
        if not Path(p).is_file():
            raise DataError(f"bundle {p} not found")
    songs = _load_split(cfg, "Test")
    out = _prepare_dir(cfg.out / "evaluation", obj["force"])
    reports = []
    for p in bundle_paths:
        bundle = load_bundle(p)
        stem = Path(p).stem
        meta = cfg.stamp(bundle=stem, seed=bundle.metadata.get("seed", ""))
        report = evaluate_bundle(bundle, songs, cfg.wiener_config, meta)
        write_scores_csv(out / f"{stem}_scores.csv", report, meta)
        write_summary_json(out / f"{stem}_summary.json", report)
        reports.append((stem, report))
        click.echo(f"{stem}: overall median SDR {report.overall:.3f} dB")
    base_name, base = reports[0]
    for name, rep in reports[1:]:
        comp = compare(base, rep)
        write_comparison_csv(out / f"comparison_{base_name}_vs_{name}.csv", comp,
                             (base_name, name), cfg.stamp())
    if upper_bounds:
        bundle = load_bundle(bundle_paths[0])
        cols = upper_bound_reports(bundle, songs)
        dnn = cols["dnn_mixture_phase"]
        with (out / "upper_bounds.csv").open("w", newline="") as fh:
            fh.write(f"# {_preamble(cfg.stamp(bundle=base_name))}\n")
            w = csv.writer(fh)
            w.writerow(["instrument", "dnn_mixture_phase", "irm_mixture_phase",
                        "irm_relative_pct", "dnn_oracle_phase", "oracle_relative_pct"])
            for inst in dnn.instruments:
                b = dnn.medians[inst]
                irm = cols["irm_mixture_phase"].medians[inst]
                orc = cols["dnn_oracle_phase"].medians[inst]
                rel = (lambda c: 100.0 * (c - b) / abs(b) if b else float("nan"))
                w.writerow([inst, f"{b:.4f}", f"{irm:.4f}", f"{rel(irm):+.2f}",
                            f"{orc:.4f}", f"{rel(orc):+.2f}"])
    click.echo(f"wrote evaluation to {out}")


@cli.command("verify-theory")
@click.pass_obj
def verify_theory(obj):
    """Check the continuous-STFT phase/amplitude relations on a chirp."""
    cfg: ExperimentConfig = obj["cfg"]
    th = cfg.raw["theory"]
    out = _prepare_dir(cfg.out / "theory", obj["force"])
    ok = True
    rows = []
    for lam in th["lambdas"]:
        coarse, fine = chirp_relation_check(float(lam), float(th["threshold"]))
        improves = fine.median_a < coarse.median_a and fine.median_b < coarse.median_b
        passed = coarse.passes(float(th["tolerance"])) and improves
        ok &= passed
        meta = cfg.stamp(lam=lam)
        write_relation_csv(out / f"relation_lam{lam}.csv", coarse, _preamble(meta))
        rows.append((lam, coarse.median_a, coarse.median_b, fine.median_a, fine.median_b, passed))
        click.echo(f"lambda={lam}: median rel. residual a={coarse.median_a:.3g} "
                   f"b={coarse.median_b:.3g}; refined a={fine.median_a:.3g} b={fine.median_b:.3g} "
                   f"-> {'PASS' if passed else 'FAIL'}")
    with (out / "summary.csv").open("w", newline="") as fh:
        fh.write(f"# {_preamble(cfg.stamp())}\n")
        w = csv.writer(fh)
        w.writerow(["lambda", "median_a", "median_b", "refined_median_a", "refined_median_b", "pass"])
        for r in rows:
            w.writerow([r[0], *(repr(float(x)) for x in r[1:5]), int(r[5])])
    if not ok:
        raise CriterionFailure("phase/amplitude relation check failed")


# ---------------------------------------------------------------------------
# entry points

def main(argv=None) -> int:
    """Run the CLI and return the exit code instead of exiting."""
    try:
        rv = cli.main(args=argv, prog_name="phasesep", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except click.ClickException as exc:
        exc.show()
        return EXIT_USAGE
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        return EXIT_USAGE
    except CriterionFailure as exc:
        click.echo(f"criterion failed: {exc}", err=True)
        return EXIT_CRITERION
    except DATA_ERRORS as exc:
        click.echo(f"data error: {exc}", err=True)
        return EXIT_DATA
    return rv if isinstance(rv, int) else EXIT_OK


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
