"""Table of CLI invocations and the outcome each must produce.

``build_workspace`` prepares the input files once; every case is then a
command line plus an expected exit code, an optional stderr fragment and an
optional check on the produced outputs.
"""

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from difa.backbones import generator_from_checkpoint, load_backbones
from difa.cli import main
from difa.core import Checkpoint, fingerprint, load_checkpoint, save_checkpoint
from difa.images import load_png, load_reference, save_png, to_uint8
from difa.trainer import reconstruct, sample_z, save_direction


@dataclass
class Case:
    name: str
    argv: list
    code: int
    stderr: str = ""
    check: Callable[[Path], None] | None = None


def build_workspace(root: Path) -> Path:
    """Reference image, a 3-step checkpoint, its own 100 samples and direction files."""
    root.mkdir(parents=True, exist_ok=True)
    toy = load_backbones("toy", 0)
    with torch.no_grad():
        ref = toy.generator.generate(sample_z(12345, 1, toy.generator.z_dim))[:, [1, 2, 0]]
    save_png(root / "ref.png", ref[0])
    assert main(["adapt", "--source", "toy", "--reference", str(root / "ref.png"), "--out", str(root / "base"),
                 "--iters", "3", "--mean-embed-samples", "32"]) == 0
    assert main(["sample", "--ckpt", str(root / "base/checkpoint.bin"), "--n", "100", "--seed", "0",
                 "--out", str(root / "own")]) == 0
    (root / "single").mkdir()
    save_png(root / "single/00000.png", ref[0])
    save_direction(root / "brightness.txt", np.eye(8)[0])
    save_direction(root / "narrow.txt", np.ones(5))
    (root / "malformed.txt").write_text("global\n1 2 oops 4\n")
    (root / "unknown.json").write_text('{"alpha": 0.5, "bogus": 1}')
    (root / "cfg.json").write_text('{"alpha": 0.25, "lambda_local": 3.0, "mean_embed_samples": 32}')
    (root / "corrupt.bin").write_bytes(b"DIFACKPT\x63\x00\x00\x00")
    ckpt = load_checkpoint(root / "base/checkpoint.bin")
    nan_weights = {k: np.full_like(v, np.nan) for k, v in ckpt.generator_weights.items()}
    save_checkpoint(root / "nan.bin", Checkpoint(nan_weights, ckpt.config, 0, fingerprint(nan_weights)))
    return root


def input_hashes(root: Path) -> dict:
    """Hashes of every file that exists before the cases run (all potential inputs)."""
    return {p: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.rglob("*")) if p.is_file()}


def _metrics(path: Path) -> list:
    return [json.loads(line) for line in path.read_text().splitlines()]


def _check_adapt(out: Path) -> None:
    assert (out / "checkpoint.bin").is_file()
    assert [r["iteration"] for r in _metrics(out / "metrics.jsonl")] == [0, 1, 2]
    assert (out / "grids").is_dir() and any((out / "grids").iterdir())
    assert load_checkpoint(out / "checkpoint.bin").config.seed == 7


def _check_iterations(out: Path, iterations: int) -> None:
    assert load_checkpoint(out / "checkpoint.bin").iteration == iterations


def _check_adapt_text(out: Path) -> None:
    records = _metrics(out / "metrics.jsonl")
    assert len(records) == 3
    assert all(r["local"] == 0 for r in records)
    assert all(r["lambda_scc"] == 4 for r in records)


def _check_precedence(out: Path) -> None:
    cfg = load_checkpoint(out / "checkpoint.bin").config
    assert cfg.alpha == 0.75  # flag beats file
    assert cfg.lambda_local == 3.0  # file beats default
    assert cfg.batch_size == 2  # default


def _check_eval(out: Path) -> None:
    report = json.loads((out / "report.json").read_text())
    assert set(report) == {"fid", "kid"}
    assert report["fid"]["value"] < 1e-6
    assert report["fid"]["n_real"] == report["fid"]["n_fake"] == 100
    assert report["kid"]["extractor_id"] == "toy-pooled"


def _check_edit_zero(root: Path) -> Callable[[Path], None]:
    def check(out: Path) -> None:
        ckpt = load_checkpoint(root / "base/checkpoint.bin")
        encoder = load_backbones(ckpt.backbone, ckpt.backbone_seed).encoder
        image = load_reference(root / "ref.png", 32)
        expected = to_uint8(reconstruct(generator_from_checkpoint(ckpt), encoder, image))
        assert np.array_equal(to_uint8(load_png(out)), expected)
    return check


def _check_samples(out: Path) -> None:
    assert sorted(p.name for p in out.iterdir()) == [f"{i:05d}.png" for i in range(5)]


def cases(root: Path, out: Path) -> list[Case]:
    r, o = str(root), str(out)
    ckpt = f"{r}/base/checkpoint.bin"
    adapt = ["adapt", "--source", "toy", "--reference", f"{r}/ref.png", "--mean-embed-samples", "32"]
    edit = ["edit", "--ckpt", ckpt, "--image", f"{r}/ref.png"]
    return [
        Case("adapt writes checkpoint, metrics and grids",
             adapt + ["--out", f"{o}/adapt", "--iters", "3", "--seed", "7"], 0,
             check=lambda p: _check_adapt(p / "adapt")),
        Case("adapt from a checkpoint source",
             ["adapt", "--source", ckpt, "--reference", f"{r}/ref.png", "--out", f"{o}/chained", "--iters", "2",
              "--mean-embed-samples", "32"], 0,
             check=lambda p: _check_iterations(p / "chained", 2)),
        Case("flag beats config file beats default",
             adapt + ["--config", f"{r}/cfg.json", "--alpha", "0.75", "--iters", "1", "--out", f"{o}/prec"], 0,
             check=lambda p: _check_precedence(p / "prec")),
        Case("adapt missing --reference", ["adapt", "--source", "toy", "--out", f"{o}/x"], 1, "--reference"),
        Case("adapt alpha out of range", adapt + ["--out", f"{o}/x", "--alpha", "1.5"], 1, "alpha"),
        Case("adapt unknown config field", adapt + ["--out", f"{o}/x", "--config", f"{r}/unknown.json"], 1, "bogus"),
        Case("adapt unreadable reference",
             ["adapt", "--source", "toy", "--reference", f"{r}/missing.png", "--out", f"{o}/x"], 1, "missing.png"),
        Case("adapt unavailable backbone",
             ["adapt", "--source", "stylegan2", "--reference", f"{r}/ref.png", "--out", f"{o}/x"], 1, "stylegan2"),
        Case("adapt warmup not below iters", adapt + ["--out", f"{o}/x", "--iters", "5", "--warmup", "5"], 1,
             "warmup"),
        Case("adapt non-finite training aborts",
             ["adapt", "--source", f"{r}/nan.bin", "--reference", f"{r}/ref.png", "--out", f"{o}/nan",
              "--iters", "3", "--mean-embed-samples", "4"], 2, "iteration 0",
             check=lambda p: _check_iterations(p / "nan", 0)),
        Case("adapt-text local term is zero, scc weight 4",
             ["adapt-text", "--source", "toy", "--prompt", "a red shape", "--iters", "3", "--out", f"{o}/text",
              "--mean-embed-samples", "32"], 0, check=lambda p: _check_adapt_text(p / "text")),
        Case("adapt-text zero words",
             ["adapt-text", "--source", "toy", "--prompt", "a red shape", "--n-words", "0", "--out", f"{o}/x"], 1,
             "n_vocab_words"),
        Case("adapt-text empty prompt",
             ["adapt-text", "--source", "toy", "--prompt", " ", "--out", f"{o}/x"], 1, "prompt"),
        Case("eval against own samples",
             ["eval", "--ckpt", ckpt, "--real", f"{r}/own", "--n", "100", "--metric", "fid,kid", "--out", f"{o}/eval"],
             0, check=lambda p: _check_eval(p / "eval")),
        Case("eval single real image", ["eval", "--ckpt", ckpt, "--real", f"{r}/single", "--n", "10"], 1, "at least 2"),
        Case("eval unknown metric", ["eval", "--ckpt", ckpt, "--real", f"{r}/own", "--metric", "lpips"], 1, "lpips"),
        Case("eval missing checkpoint", ["eval", "--ckpt", f"{r}/absent.bin", "--real", f"{r}/own"], 1, "absent.bin"),
        Case("eval corrupt checkpoint", ["eval", "--ckpt", f"{r}/corrupt.bin", "--real", f"{r}/own"], 1, "corrupt"),
        Case("edit zero strength is reconstruction",
             edit + ["--direction", f"{r}/brightness.txt", "--strength", "0", "--out", f"{o}/edit0.png"], 0,
             check=lambda p: _check_edit_zero(root)(p / "edit0.png")),
        Case("edit wrong channel count", edit + ["--direction", f"{r}/narrow.txt", "--out", f"{o}/x.png"], 1, "D_w=8"),
        Case("edit malformed direction", edit + ["--direction", f"{r}/malformed.txt", "--out", f"{o}/x.png"], 1,
             "line 2"),
        Case("edit missing direction", edit + ["--direction", f"{r}/none.txt", "--out", f"{o}/x.png"], 1, "none.txt"),
        Case("sample writes numbered PNGs", ["sample", "--ckpt", ckpt, "--n", "5", "--out", f"{o}/samples"], 0,
             check=lambda p: _check_samples(p / "samples")),
        Case("sample non-positive count", ["sample", "--ckpt", ckpt, "--n", "0", "--out", f"{o}/x"], 1, "--n"),
        Case("unknown subcommand", ["frobnicate"], 1, "invalid choice"),
    ]


def brightness_means(root: Path, out: Path) -> list:
    """Mean pixel value of edits at strengths -1, 0, 1 along the toy brightness channel."""
    means = []
    for s in ("-1", "0", "1"):
        target = out / f"bright{s}.png"
        code = main(["edit", "--ckpt", str(root / "base/checkpoint.bin"), "--image", str(root / "ref.png"),
                     "--direction", str(root / "brightness.txt"), "--strength", s, "--out", str(target)])
        assert code == 0
        means.append(float(load_png(target).mean()))
    return means


def run_case(case: Case, out: Path, capsys) -> str:
    """Run one case; returns a failure description or an empty string."""
    try:
        code = main(case.argv)
    except SystemExit as e:
        code = e.code
    err = capsys.readouterr().err
    if code != case.code:
        return f"exit {code}, expected {case.code}; stderr: {err.strip()[-300:]}"
    if case.stderr and case.stderr not in err:
        return f"stderr lacks {case.stderr!r}: {err.strip()[-300:]}"
    if case.check is not None:
        try:
            case.check(out)
        except AssertionError as e:
            return f"output check failed: {e}"
    return ""
