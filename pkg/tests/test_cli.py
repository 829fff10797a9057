import csv
import json

import pytest

from deynet.cli import main
from deynet.config import adapt_config, load_config, train_config
from deynet.errors import ParameterError

CFG = """
mask: {ratio: 0.1, window_radius: 2}
loss: {alpha: 30, ramp_epochs: 2, dice_eps: 1.0e-5, mode: denoise}
train: {epochs: 1, batch_size: 4, lr: 1.0e-3, seed: 0}
arch: {depth: 2, base_channels: 4}
"""


def _write(path, text):
    path.write_text(text)
    return str(path)


class TestConfig:
    def test_nested_keys(self, tmp_path):
        nested = load_config(_write(tmp_path / "c.yaml", CFG))
        cfg = train_config(nested)
        assert (cfg.mask_ratio, cfg.mask_radius, cfg.alpha, cfg.ramp_epochs) == (0.1, 2, 30, 2)
        assert cfg.loss_mode == "denoise" and cfg.arch.depth == 2

    def test_dotted_keys_and_overrides(self, tmp_path):
        nested = load_config(_write(tmp_path / "c.yaml", "mask.ratio: 0.2\nloss.mode: reconstruct\nadapt.K: 3\n"))
        assert train_config(nested, seed=4).mask_ratio == 0.2
        assert train_config(nested).loss_mode == "reconstruct"
        acfg = adapt_config(nested, lr=2e-6)
        assert acfg.K == 3 and acfg.mask_ratio == 0.2 and acfg.lr == 2e-6

    def test_json_accepted(self, tmp_path):
        nested = load_config(_write(tmp_path / "c.json", json.dumps({"loss": {"alpha": 5}})))
        assert train_config(nested).alpha == 5

    @pytest.mark.parametrize("text", ["loss: {alfa: 3}\n", "optim: {lr: 1}\n", "ratio: 0.1\n"])
    def test_unknown_keys(self, tmp_path, text):
        with pytest.raises(ParameterError):
            train_config(load_config(_write(tmp_path / "c.yaml", text)))


def test_pipeline(tmp_path, capsys):
    src = _write(tmp_path / "src.yaml", "organ_count: 2\nnoise_sigma: 0.02\nshape: [16, 32, 32]\nseed: 10\ndomain_tag: source\n")
    tgt = _write(tmp_path / "tgt.yaml", "organ_count: 2\nnoise_sigma: 0.1\nintensity_shift: 0.15\nshape: [16, 32, 32]\nseed: 50\ndomain_tag: shifted\n")
    cfg = _write(tmp_path / "cfg.yaml", CFG)
    d = tmp_path
    assert main(["synth", "--spec", src, "--out", str(d / "lab"), "--count", "2"]) == 0
    assert main(["synth", "--spec", tgt, "--out", str(d / "test"), "--count", "1"]) == 0
    assert len(list((d / "lab").glob("*.label.hdr"))) == 2
    assert main(["pretrain", "--config", cfg, "--data", str(d / "lab"), "--out", str(d / "pre.pt")]) == 0
    assert main([
        "train", "--config", cfg, "--labeled", str(d / "lab"), "--unlabeled", str(d / "test"),
        "--init", str(d / "pre.pt"), "--variant", "3", "--out", str(d / "dey.pt"),
    ]) == 0
    log = [json.loads(x) for x in (d / "dey.log.jsonl").read_text().splitlines()]
    assert log and {"epoch", "step", "l_seg", "l_de", "w_t", "total"} <= set(log[0])
    for args, name in (
        (["--lr", "1e-6", "--steps", "1", "--group", "bn", "--k", "2"], "a.json"),
        (["--steps", "0", "--k", "0"], "b.json"),
    ):
        assert main(["adapt-eval", "--ckpt", str(d / "dey.pt"), "--data", str(d / "test"), "--seed", "0",
                     *args, "--out", str(d / name)]) == 0
    rep = json.loads((d / "a.json").read_text())
    row = rep["rows"][0]
    assert {"id", "domain_tag", "dice_percent", "adapted", "fallback"} <= set(row) and row["adapted"]
    assert main(["report", "--in", str(d / "a.json"), str(d / "b.json"), "--out", str(d / "t.csv"),
                 "--plots", str(d / "plots")]) == 0
    with open(d / "t.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["method"] for r in rows} == {"detta", "plain"}
    assert (d / "plots" / "dice_bars.png").exists()


def test_errors_exit_nonzero(tmp_path, capsys):
    assert main(["adapt-eval", "--ckpt", str(tmp_path / "none.pt"), "--data", str(tmp_path), "--out", "x"]) == 2
    assert "error" in capsys.readouterr().err
    (tmp_path / "bad.pt").write_bytes(b"garbage")
    assert main(["adapt-eval", "--ckpt", str(tmp_path / "bad.pt"), "--data", str(tmp_path), "--out", "x"]) == 2
