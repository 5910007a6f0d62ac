import json
import zipfile

import numpy as np
import pytest
import torch

from xmodalseg.data import synth_pair
from xmodalseg.data.dataset import add_scribbles, write_synth_dataset
from xmodalseg.data.volume import ModalityPair
from xmodalseg.losses import dense_ce_loss, pce_loss
from xmodalseg.network import ConfigError, NetworkConfig, ShapeError, build_model
from xmodalseg.trainer import (CheckpointError, TrainConfig, infer, load_checkpoint, make_config,
                               save_checkpoint, train, train_fullsup, validate)
from xmodalseg.trainer.ablate import ablate, axis_entries, build_grid
from xmodalseg.trainer.config import parse_override
from xmodalseg.trainer.train import load_split

TINY = ["network.base_channels=2", "network.kernel_size=3", "network.dropout_rate=0.0",
        "optim.crop=[32,32,16]", "optim.epochs=2", "loss.crf.max_pixels=64"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    index = write_synth_dataset(root, 6, dims=(32, 32, 16), seed=1, n_val=2)
    add_scribbles(index, seed=1)
    return index


def tiny_cfg(index, tmp, *extra):
    over = TINY + [f'data.index="{index}"', f'run.checkpoint_dir="{tmp}"'] + list(extra)
    return make_config("desk", overrides=over)


def test_reference_preset_values():
    d = make_config("paper").to_dict()
    assert d["optim"]["lr"] == 1e-5
    assert d["optim"]["batch_size"] == 16
    assert d["optim"]["epochs"] == 200
    assert d["optim"]["crop"] == [96, 96, 16]
    assert d["network"]["dropout_rate"] == 0.5
    assert (d["loss"]["lambda_ct"], d["loss"]["lambda_mr"]) == (0.2, 0.2)
    assert (d["loss"]["alpha1"], d["loss"]["alpha2"]) == (0.8, 0.8)


def test_config_roundtrip_and_errors(tmp_path):
    cfg = make_config("bench")
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))).to_dict() == cfg.to_dict()
    assert parse_override("loss.lambda_ct=0.3") == ("loss.lambda_ct", 0.3)
    with pytest.raises(ConfigError):
        make_config("nope")
    with pytest.raises(ConfigError):
        make_config(overrides=["optim.lr=-1"])
    with pytest.raises(ConfigError):
        make_config(overrides=['optim.lr="fast"'])
    with pytest.raises(ConfigError):
        make_config(overrides=["optim.crop=[32,32,8]"])
    with pytest.raises(ConfigError):
        make_config(overrides=['loss.toggles={"ssl": false, "imr": false, "imc": false}'])
    bad = tmp_path / "c.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        make_config(path=bad)


def test_split_uses_tags(dataset):
    tr, va = load_split(make_config(overrides=[f'data.index="{dataset}"']))
    assert len(tr) == 4 and len(va) == 2
    assert [p.case_id for p in va] == ["case_0004", "case_0005"]


def test_determinism_and_bit_identical_checkpoints(dataset, tmp_path):
    a = train(tiny_cfg(dataset, tmp_path / "a"))
    b = train(tiny_cfg(dataset, tmp_path / "b"))
    assert abs(a.history[0]["loss_total"] - b.history[0]["loss_total"]) <= 1e-6
    assert (tmp_path / "a/last.ckpt").read_bytes() == (tmp_path / "b/last.ckpt").read_bytes()
    assert (tmp_path / "a/best.ckpt").read_bytes() == (tmp_path / "b/best.ckpt").read_bytes()
    assert (tmp_path / "a/history.csv").exists() and (tmp_path / "a/history.json").exists()


def test_breakdown_sums_to_total(dataset, tmp_path):
    r = train(tiny_cfg(dataset, tmp_path))
    for h in r.history:
        parts = h["loss_ssl"] + h["loss_imr"] + h["loss_imc"]
        assert abs(parts - h["loss_total"]) <= 1e-6 * max(1, h["loss_total"])


def test_smoke_loss_decreases(dataset, tmp_path):
    r = train(tiny_cfg(dataset, tmp_path, "optim.epochs=20", "optim.lr=0.003", "run.val_every=20"))
    assert r.history[-1]["loss_total"] < r.history[0]["loss_total"]


def test_seed_isolation(dataset, tmp_path):
    def first_params(seed, data_seed, tag):
        cfg = tiny_cfg(dataset, tmp_path / tag, "optim.epochs=1", f"run.seed={seed}",
                       f"run.data_seed={data_seed}")
        torch.manual_seed(cfg.seed)
        init = {k: v.clone() for k, v in build_model(cfg.network).state_dict().items()}
        return init, train(cfg).history[0]["loss_total"]

    init_a, loss_a = first_params(0, 0, "a")
    init_b, loss_b = first_params(0, 5, "b")
    init_c, _ = first_params(3, 0, "c")
    assert all(torch.equal(init_a[k], init_b[k]) for k in init_a)
    assert loss_a != loss_b
    assert not all(torch.equal(init_a[k], init_c[k]) for k in init_a)


def test_checkpoint_roundtrip_reproduces_metrics(dataset, tmp_path):
    r = train(tiny_cfg(dataset, tmp_path))
    _, val = load_split(r_cfg := tiny_cfg(dataset, tmp_path))
    model = load_checkpoint(r.last_checkpoint, expect=r_cfg.network)
    assert validate(model, val) == validate(r.model, val)
    for (n1, p1), (n2, p2) in zip(model.state_dict().items(), r.model.state_dict().items()):
        assert n1 == n2 and torch.equal(p1, p2)


def test_checkpoint_layout_and_errors(tmp_path):
    m = build_model(NetworkConfig(base_channels=2, kernel_size=3))
    p = save_checkpoint(m, tmp_path / "m.ckpt", {"epoch": 1})
    with zipfile.ZipFile(p) as z:
        names = z.namelist()
        assert names[0] == "manifest.json"
        assert all(n.startswith("params/") and n.endswith(".npy") for n in names[1:])
    with pytest.raises(CheckpointError):
        load_checkpoint(p, expect=NetworkConfig(base_channels=4, kernel_size=3))
    (tmp_path / "junk.ckpt").write_bytes(b"not a zip")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.ckpt")


def test_infer_equals_manual_forward_argmax():
    torch.manual_seed(0)
    model = build_model(NetworkConfig(base_channels=2, kernel_size=3, dropout_rate=0.5))
    pair = synth_pair(4, dims=(32, 32, 16))
    pred = infer(model, pair)
    model.eval()
    with torch.no_grad():
        ct = torch.from_numpy(pair.ct.values)[None, None]
        mr = torch.from_numpy(pair.mr.values)[None, None]
        manual = model(ct, mr)["y_mm"][0].argmax(0).numpy()
    assert np.array_equal(pred.values, manual)
    assert np.array_equal(infer(model, pair).values, pred.values)


def test_infer_arbitrary_dims():
    model = build_model(NetworkConfig(base_channels=2, kernel_size=3))
    pair = synth_pair(2, dims=(100, 100, 20))
    pred = infer(model, pair)
    assert pred.shape == (100, 100, 20)
    assert pred.spacing == pair.spacing


def test_infer_rejects_mismatch():
    model = build_model(NetworkConfig(base_channels=2, kernel_size=3))
    pair = synth_pair(2, dims=(32, 32, 16), num_classes=3)
    with pytest.raises(ShapeError):
        infer(model, pair)


def test_dense_ce_properties():
    lab = torch.randint(0, 3, (2, 4, 4, 2))
    onehot = torch.nn.functional.one_hot(lab, 3).permute(0, 4, 1, 2, 3).double()
    assert dense_ce_loss(onehot, lab).item() == 0.0
    y = torch.softmax(torch.randn(2, 3, 4, 4, 2, dtype=torch.float64), 1)
    assert torch.allclose(dense_ce_loss(y, lab), pce_loss(y, lab), atol=1e-12)


def test_fullsup_requires_gt(dataset, tmp_path):
    tr, va = load_split(tiny_cfg(dataset, tmp_path))
    stripped = [ModalityPair(p.ct, p.mr, None, p.scribble, p.case_id) for p in tr]
    with pytest.raises(ConfigError):
        train_fullsup(tiny_cfg(dataset, tmp_path), data=(stripped, va))
    r = train_fullsup(tiny_cfg(dataset, tmp_path, "optim.epochs=1"))
    assert r.history[0]["loss_total"] > 0


def test_no_scribbles_is_config_error(dataset, tmp_path):
    tr, va = load_split(tiny_cfg(dataset, tmp_path))
    empty = []
    for p in tr:
        s = p.scribble
        blank = type(s)(np.full_like(s.values, 255), s.num_classes, s.spacing)
        empty.append(ModalityPair(p.ct, p.mr, p.gt, blank, p.case_id))
    with pytest.raises(ConfigError, match="no scribbled voxels"):
        train(tiny_cfg(dataset, tmp_path), data=(empty, va))


def test_ablation_axes():
    rows = axis_entries("loss-toggles")
    assert [e.label for e in rows] == ["SSL", "SSL+IMR", "SSL+IMC", "SSL+IMR+IMC"]
    labels = [e.label for e in axis_entries("depth")]
    assert len(labels) == 16 and "CT3MR4" in labels and "CT6MR4" in labels
    assert [e.label for e in axis_entries("modules")] == ["MFL", "MFL+CFE", "MFL+CFE+CFF"]
    assert all(0 <= e.overrides["loss"]["lambda_ct"] <= 0.5 for e in axis_entries("lambda"))
    assert all(0 < e.overrides["loss"]["alpha1"] <= 1 for e in axis_entries("alpha"))
    with pytest.raises(ConfigError):
        build_grid([])
    with pytest.raises(ConfigError):
        axis_entries("alpha", [0.0])
    with pytest.raises(ConfigError):
        axis_entries("lambda", [0.7])


def test_ablate_runs_each_entry_once(dataset, tmp_path):
    base = tiny_cfg(dataset, tmp_path, "optim.epochs=1")
    grid = build_grid(["alpha"], {"alpha": [0.5, 1.0]})
    rows = ablate(base, grid, seeds=[0], out_dir=tmp_path / "abl", csv_path=tmp_path / "abl/ablation.csv")
    assert len(rows) == 2
    assert [r["alpha1"] for r in rows] == [0.5, 1.0]
    lines = (tmp_path / "abl/ablation.csv").read_text().splitlines()
    assert len(lines) == 3
    assert len({r["checkpoint_dir"] for r in rows}) == 2


def test_docs_schema_matches_packaged():
    from pathlib import Path

    from xmodalseg.trainer.config import config_schema
    docs = Path(__file__).resolve().parents[1] / "docs" / "config.schema.json"
    assert json.loads(docs.read_text()) == config_schema()
    assert set(make_config("paper").to_dict()) <= set(config_schema()["properties"])


def test_ablate_parallel_matches_serial(dataset, tmp_path):
    base = tiny_cfg(dataset, tmp_path, "optim.epochs=1")
    grid = build_grid(["lambda"], {"lambda": [0.0, 0.5]})
    serial = ablate(base, grid, seeds=[1], out_dir=tmp_path / "s")
    parallel = ablate(base, grid, seeds=[1], out_dir=tmp_path / "p", jobs=2)
    strip = lambda rows: [{k: v for k, v in r.items() if k != "checkpoint_dir"} for r in rows]  # noqa: E731
    assert strip(serial) == strip(parallel)
