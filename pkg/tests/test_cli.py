import json

import pytest
import yaml

from helpers import tiny_experiment
from promptclinic.cli import main
from promptclinic.config import ExperimentConfig, load_config, preset_names
from promptclinic.errors import ConfigError
from promptclinic.synthetic import make_corpus, write_chat_corpus

PRESETS = ["bert-style-verbalizer", "llama2-style-conditional", "llama2-style-lora-prompt1",
           "llama2-style-lora-prompt2", "llama2-style-soft-prompt"]


def _write_config(path, data):
    path.write_text(yaml.safe_dump(data), encoding="utf-8")
    return str(path)


def test_presets_listed_and_valid(capsys):
    assert preset_names() == PRESETS
    assert main(["presets"]) == 0
    assert capsys.readouterr().out.split() == PRESETS
    for name in PRESETS:
        cfg = load_config(name)
        assert cfg.k == 10 and cfg.vote_last == 3
        assert ExperimentConfig.from_dict(cfg.to_dict()).config_hash() == cfg.config_hash()


def test_preset_variants():
    strategies = {name: (load_config(name).strategy, load_config(name).policy.strategy) for name in PRESETS}
    assert strategies["bert-style-verbalizer"] == ("verbalizer", "full_finetune")
    assert strategies["llama2-style-lora-prompt1"] == ("generative", "lora")
    assert strategies["llama2-style-lora-prompt2"] == ("generative", "lora")
    assert strategies["llama2-style-conditional"] == ("conditional", "lora")
    assert strategies["llama2-style-soft-prompt"] == ("generative", "soft_prompt_only")
    assert "speech disorder" in load_config("llama2-style-lora-prompt1").prompt.template.instruction
    assert "dementia" in load_config("llama2-style-lora-prompt2").prompt.template.instruction


def test_parse_empty_dir(tmp_path, capsys):
    (tmp_path / "in").mkdir()
    (tmp_path / "m.csv").write_text("id,label\n")
    code = main(["parse", str(tmp_path / "in"), "--manifest", str(tmp_path / "m.csv"), "--out", str(tmp_path / "c.json")])
    assert code == 0
    assert capsys.readouterr().out.startswith("0 transcripts")


def test_parse_counts_and_strict(tmp_path, capsys):
    manifest = write_chat_corpus(make_corpus(6), tmp_path / "chat")
    out = tmp_path / "corpus.json"
    assert main(["parse", str(tmp_path / "chat"), "--manifest", str(manifest), "--out", str(out)]) == 0
    assert "6 transcripts (AD 3 / HC 3)" in capsys.readouterr().out
    assert len(json.loads(out.read_text())["transcripts"]) == 6

    (tmp_path / "chat" / "S004.cha").write_text("@Begin\n*PAR:\tcut off\n")
    assert main(["parse", str(tmp_path / "chat"), "--manifest", str(manifest), "--out", str(out)]) == 0
    code = main(["parse", str(tmp_path / "chat"), "--manifest", str(manifest), "--out", str(out), "--strict"])
    assert code != 0
    assert "S004" in capsys.readouterr().err


@pytest.mark.parametrize("change, field", [
    ({"strategy": "magic"}, "strategy"),
    ({"hyperparams": {"learning_rate": "fast"}}, "hyperparams.learning_rate"),
    ({"policy": {"strategy": "lora", "lora_rank": 1.5}}, "policy.lora_rank"),
    ({"model": {"width": 3}}, "model.width"),
    ({"vote_last": 2}, "vote_last"),
    ({"grid": {"colour": [1]}}, "grid.colour"),
])
def test_config_errors_exit_one_with_field(tmp_path, capsys, change, field):
    data = tiny_experiment()
    data.update(change)
    path = _write_config(tmp_path / "bad.yaml", data)
    assert main(["run", "--config", path, "--out", str(tmp_path / "r")]) == 1
    assert field in capsys.readouterr().err
    assert not (tmp_path / "r").exists()


def test_config_missing_prompt():
    data = tiny_experiment()
    del data["prompt"]
    with pytest.raises(ConfigError, match="prompt"):
        ExperimentConfig.from_dict(data)


def test_unknown_preset(capsys):
    assert main(["run", "--config", "no-such-preset"]) == 1


def test_run_writes_byte_identical_reports(tmp_path, capsys):
    path = _write_config(tmp_path / "c.yaml", tiny_experiment(n=8, k=2))
    for out in ("a", "b"):
        assert main(["run", "--config", path, "--out", str(tmp_path / out)]) == 0
    for name in ("report.json", "report_folds.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    assert len(report["metrics"]["fold_accuracies"]) == 2
    assert report["metadata"]["config_hash"]


def test_seed_and_folds_override(tmp_path):
    path = _write_config(tmp_path / "c.yaml", tiny_experiment(n=12, k=2))
    assert main(["run", "--config", path, "--folds", "3", "--seed", "5", "--out", str(tmp_path / "r")]) == 0
    report = json.loads((tmp_path / "r" / "report.json").read_text())
    assert len(report["metrics"]["fold_accuracies"]) == 3
    assert report["metadata"]["seed"] == 5


def test_run_on_parsed_corpus(tmp_path):
    manifest = write_chat_corpus(make_corpus(8), tmp_path / "chat")
    main(["parse", str(tmp_path / "chat"), "--manifest", str(manifest), "--out", str(tmp_path / "c.json")])
    path = _write_config(tmp_path / "c.yaml", tiny_experiment(n=8, k=2))
    assert main(["run", "--config", path, "--corpus", str(tmp_path / "c.json"), "--out", str(tmp_path / "r")]) == 0


def test_grid_search_writes_history(tmp_path):
    cfg = tiny_experiment(n=8, k=2, grid={"learning_rate": [0.005, 0.01], "micro_batch_size": [2, 4]})
    path = _write_config(tmp_path / "c.yaml", cfg)
    assert main(["run", "--config", path, "--out", str(tmp_path / "r")]) == 0
    search = json.loads((tmp_path / "r" / "search.json").read_text())
    assert len(search["history"]) == 4 and set(search["best"]) == {"learning_rate", "micro_batch_size"}


def test_divergence_exit_code(tmp_path, capsys):
    cfg = tiny_experiment(n=8, k=2, hyperparams={"learning_rate": 1e300, "epochs": 3, "micro_batch_size": 2})
    path = _write_config(tmp_path / "c.yaml", cfg)
    assert main(["run", "--config", path, "--out", str(tmp_path / "r")]) == 3


def test_missing_checkpoint(tmp_path, capsys):
    code = main(["predict", "--checkpoint", str(tmp_path / "none.pt"), "--text", "the boy"])
    assert code != 0
    assert "none.pt" in capsys.readouterr().err


@pytest.fixture(scope="module")
def trained_checkpoint(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("ckpt")
    cfg = tiny_experiment(n=40, k=2, epochs=12,
                          model={"d_model": 32, "n_layers": 2, "n_heads": 2, "d_ff": 64, "max_len": 200},
                          hyperparams={"learning_rate": 0.003, "micro_batch_size": 4, "epochs": 12})
    path = _write_config(tmp / "c.yaml", cfg)
    assert main(["train", "--config", path, "--out", str(tmp / "model.pt")]) == 0
    return tmp / "model.pt"


def test_predict_planted_signal(trained_checkpoint, capsys):
    heavy = " ".join(["uh the boy um is er on the uh stool um ."] * 4)
    clean = " ".join(["the mother is washing the dishes ."] * 4)
    preds = {}
    for name, text in (("heavy", heavy), ("clean", clean)):
        assert main(["predict", "--checkpoint", str(trained_checkpoint), "--text", text, "--json"]) == 0
        preds[name] = json.loads(capsys.readouterr().out)
    assert preds["heavy"]["label"] == "AD"
    assert preds["clean"]["label"] == "HC"


def test_predict_empty_text_and_file(trained_checkpoint, tmp_path, capsys):
    assert main(["predict", "--checkpoint", str(trained_checkpoint), "--text", ""]) == 0
    out = capsys.readouterr().out
    assert out.startswith("label ") and "score_AD" in out and "tie" in out
    f = tmp_path / "doc.txt"
    f.write_text("The boy fell .")
    assert main(["predict", "--checkpoint", str(trained_checkpoint), "--file", str(f)]) == 0


def test_synth_command(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "s"), "--n", "4"]) == 0
    assert len(list((tmp_path / "s").glob("*.cha"))) == 4
