import json

import pytest

from crfmatch.cli import main
from crfmatch.evaluation import TAXONOMY_CATEGORIES
from crfmatch.trajectory_io import load_ground_truth_all, parse_observations

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def echo_doc(out, command):
    prefix = f"{command} effective-config "
    for line in out.splitlines():
        if line.startswith(prefix):
            return json.loads(line[len(prefix):])
    raise AssertionError(f"no effective-config line for {command!r} in {out!r}")


# ---------------------------------------------------------------------------
# exit codes and help

@pytest.mark.parametrize("argv", [[], ["bogus-command"], ["train"]])
def test_usage_errors_exit_1(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 1
    assert "error:" in capsys.readouterr().err


def test_help_lists_flags_with_defaults(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    assert "--radius" in out
    assert "(default 50)" in out
    assert "--lambda" in out


def test_missing_input_file_exits_2(tmp_path, capsys):
    code = main([
        "match",
        "--obs", str(tmp_path / "nope.csv"),
        "--net-nodes", str(tmp_path / "n.csv"),
        "--net-edges", str(tmp_path / "e.csv"),
        "--model", str(tmp_path / "m.json"),
        "--out", str(tmp_path / "p.json"),
    ])
    assert code == 2
    assert "error:" in capsys.readouterr().err


def test_malformed_network_exits_2(tmp_path, capsys):
    nodes = tmp_path / "nodes.csv"
    edges = tmp_path / "edges.csv"
    nodes.write_text("garbage\n", encoding="utf-8")
    edges.write_text("also garbage\n", encoding="utf-8")
    code = main([
        "gen-traj",
        "--net-nodes", str(nodes), "--net-edges", str(edges),
        "--out-obs", str(tmp_path / "o.csv"),
        "--out-truth", str(tmp_path / "t.txt"),
    ])
    assert code == 2
    assert "error:" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# config files

def test_flags_beat_config_beat_defaults(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"gen": {"rows": 3, "cols": 3}}), encoding="utf-8")
    code = main([
        "gen-network", "--config", str(cfg), "--rows", "5",
        "--out-nodes", str(tmp_path / "n.csv"),
        "--out-edges", str(tmp_path / "e.csv"),
    ])
    assert code == 0
    doc = echo_doc(capsys.readouterr().out, "gen-network")["gen"]
    assert doc["rows"] == 5          # flag wins over config
    assert doc["cols"] == 3          # config wins over default
    assert doc["spacing_m"] == 200.0  # default
    assert doc["speed_choices_kmh"] == [30.0, 50.0, 80.0]


@pytest.mark.parametrize(
    "body, message",
    [
        ({"bogus": {}}, "unknown config section"),
        ({"gen": {"rowz": 1}}, "unknown config key gen.rowz"),
        ({"gen": 3}, "must be an object"),
        ([1, 2], "JSON object"),
    ],
)
def test_config_rejections_exit_2(tmp_path, capsys, body, message):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(body), encoding="utf-8")
    code = main([
        "gen-network", "--config", str(cfg),
        "--out-nodes", str(tmp_path / "n.csv"),
        "--out-edges", str(tmp_path / "e.csv"),
    ])
    assert code == 2
    assert message in capsys.readouterr().err


# ---------------------------------------------------------------------------
# end-to-end pipeline workspace

@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_ws")
    p = {
        "nodes": str(root / "nodes.csv"),
        "edges": str(root / "edges.csv"),
        "obs": str(root / "obs.csv"),
        "truth": str(root / "truth.txt"),
        "model": str(root / "model.json"),
        "report": str(root / "train_report.json"),
        "pred": str(root / "pred.json"),
        "eval": str(root / "eval_report.csv"),
        "root": root,
    }
    gen_flags = ["--rows", "4", "--cols", "4", "--jitter", "10", "--seed", "3"]
    assert main(["gen-network", *gen_flags,
                 "--out-nodes", p["nodes"], "--out-edges", p["edges"]]) == 0
    assert main(["gen-traj", "--net-nodes", p["nodes"], "--net-edges", p["edges"],
                 "--seed", "3", "--n-traj", "6", "--route-len", "6",
                 "--out-obs", p["obs"], "--out-truth", p["truth"]]) == 0
    assert main(["train", "--obs", p["obs"], "--net-nodes", p["nodes"],
                 "--net-edges", p["edges"], "--truth", p["truth"],
                 "--lambda", "0.1", "--seed", "3",
                 "--out", p["model"], "--report", p["report"]]) == 0
    assert main(["match", "--obs", p["obs"], "--net-nodes", p["nodes"],
                 "--net-edges", p["edges"], "--model", p["model"],
                 "--out", p["pred"]]) == 0
    assert main(["eval", "--pred", p["pred"], "--truth", p["truth"],
                 "--out", p["eval"]]) == 0
    return p


def test_model_and_report_files(ws):
    model = read_json(ws["model"])
    assert model["version"] == 1
    assert "point_features" in model
    report = read_json(ws["report"])
    assert report["converged"] is True
    assert report["lambda_selected"] == 0.1
    curve = ws["root"] / "train_report.curve.png"
    assert curve.read_bytes()[:8] == PNG_MAGIC


def test_predictions_file_shape(ws):
    doc = read_json(ws["pred"])
    assert doc["version"] == 1
    cars = [r["car_id"] for r in doc["results"]]
    assert cars == sorted(cars) == [1, 2, 3, 4, 5, 6]
    entry = doc["results"][0]
    assert {"car_id", "n_obs", "point_edges", "gap_preds",
            "piece_log_scores", "dropped_observations"} <= set(entry)
    assert len(entry["point_edges"]) == entry["n_obs"]


def test_eval_report_and_figure(ws):
    with open(ws["eval"], "r", encoding="utf-8") as fh:
        header, row = fh.read().splitlines()
    assert header == ("n_points,n_point_errors,n_paths,n_path_errors,"
                      "n_dropped,point_error_rate,path_error_rate")
    values = row.split(",")
    assert 0.0 <= float(values[5]) <= 1.0
    assert 0.0 <= float(values[6]) <= 1.0
    fig = ws["root"] / "eval_report.rates.png"
    assert fig.read_bytes()[:8] == PNG_MAGIC


def test_eval_json_format_and_no_figures(ws, tmp_path):
    out = tmp_path / "report.json"
    assert main(["eval", "--pred", ws["pred"], "--truth", ws["truth"],
                 "--format", "json", "--no-figures", "--out", str(out)]) == 0
    doc = read_json(out)
    assert set(doc) >= {"point_error_rate", "path_error_rate", "n_points"}
    assert not (tmp_path / "report.rates.png").exists()


def test_match_jobs_gives_identical_output(ws, tmp_path):
    out = tmp_path / "pred_jobs2.json"
    assert main(["match", "--obs", ws["obs"], "--net-nodes", ws["nodes"],
                 "--net-edges", ws["edges"], "--model", ws["model"],
                 "--jobs", "2", "--out", str(out)]) == 0
    with open(ws["pred"], "rb") as fh:
        expected = fh.read()
    assert out.read_bytes() == expected


def test_eval_of_truth_derived_predictions_is_zero(ws, tmp_path, capsys):
    trajs, _ = parse_observations(ws["obs"])
    truths = load_ground_truth_all(ws["truth"])
    results = []
    for traj in trajs:
        truth = truths[traj.car_id]
        results.append({
            "car_id": traj.car_id,
            "n_obs": len(traj),
            "point_edges": list(truth.point_labels),
            "gap_preds": {f"{i},{i + 1}": list(seq)
                          for i, seq in enumerate(truth.gap_paths)},
            "piece_log_scores": [],
            "dropped_observations": [],
        })
    pred = tmp_path / "self.json"
    pred.write_text(json.dumps({"version": 1, "results": results}),
                    encoding="utf-8")
    out = tmp_path / "self_eval.csv"
    assert main(["eval", "--pred", str(pred), "--truth", ws["truth"],
                 "--no-figures", "--out", str(out)]) == 0
    assert "point error 0.0000" in capsys.readouterr().out
    row = out.read_text(encoding="utf-8").splitlines()[1].split(",")
    assert (row[1], row[3]) == ("0", "0")


def test_eval_target_interval_requires_obs(ws, tmp_path, capsys):
    code = main(["eval", "--pred", ws["pred"], "--truth", ws["truth"],
                 "--target-interval", "30", "--no-figures",
                 "--out", str(tmp_path / "r.csv")])
    assert code == 2
    assert "requires --obs" in capsys.readouterr().err


def test_downsampled_match_and_eval_align(ws, tmp_path):
    pred = tmp_path / "pred30.json"
    assert main(["match", "--obs", ws["obs"], "--net-nodes", ws["nodes"],
                 "--net-edges", ws["edges"], "--model", ws["model"],
                 "--target-interval", "30", "--out", str(pred)]) == 0
    out = tmp_path / "eval30.csv"
    assert main(["eval", "--pred", str(pred), "--truth", ws["truth"],
                 "--target-interval", "30", "--obs", ws["obs"],
                 "--no-figures", "--out", str(out)]) == 0
    header, row = out.read_text(encoding="utf-8").splitlines()
    n_points = int(row.split(",")[0])
    full_points = sum(len(t) for t in parse_observations(ws["obs"])[0])
    assert 0 < n_points < full_points


def test_taxonomy_flag_writes_json_and_figure(ws, tmp_path):
    out = tmp_path / "tax_eval.csv"
    assert main(["eval", "--pred", ws["pred"], "--truth", ws["truth"],
                 "--taxonomy", "--obs", ws["obs"],
                 "--net-nodes", ws["nodes"], "--net-edges", ws["edges"],
                 "--model", ws["model"], "--out", str(out)]) == 0
    tax = read_json(tmp_path / "tax_eval.taxonomy.json")
    assert set(tax["counts"]) == set(TAXONOMY_CATEGORIES)
    assert (tmp_path / "tax_eval.taxonomy.png").read_bytes()[:8] == PNG_MAGIC
    assert (tmp_path / "tax_eval.rates.png").exists()


def test_taxonomy_missing_inputs_exit_2(ws, tmp_path, capsys):
    code = main(["eval", "--pred", ws["pred"], "--truth", ws["truth"],
                 "--taxonomy", "--no-figures",
                 "--out", str(tmp_path / "r.csv")])
    assert code == 2
    assert "requires" in capsys.readouterr().err


def test_train_hits_iteration_cap_exit_3(ws, tmp_path):
    code = main(["train", "--obs", ws["obs"], "--net-nodes", ws["nodes"],
                 "--net-edges", ws["edges"], "--truth", ws["truth"],
                 "--lambda", "0.1", "--max-iterations", "1",
                 "--grad-tolerance", "1e-12", "--no-figures",
                 "--out", str(tmp_path / "m.json")])
    assert code == 3
    assert (tmp_path / "m.json").exists()  # partial model still saved


def test_features_command(ws, tmp_path):
    pts = tmp_path / "points.csv"
    paths = tmp_path / "paths.csv"
    assert main(["features", "--obs", ws["obs"], "--net-nodes", ws["nodes"],
                 "--net-edges", ws["edges"],
                 "--out-points", str(pts), "--out-paths", str(paths)]) == 0
    header = pts.read_text(encoding="utf-8").splitlines()[0]
    assert header.startswith("car_id,piece,layer,candidate,edge_id,")
    header = paths.read_text(encoding="utf-8").splitlines()[0]
    assert header.startswith("car_id,piece,gap,cand_i,cand_j,path_rank,")


def test_match_defaults_to_model_lattice_config(ws, tmp_path, capsys):
    out = tmp_path / "p.json"
    assert main(["match", "--obs", ws["obs"], "--net-nodes", ws["nodes"],
                 "--net-edges", ws["edges"], "--model", ws["model"],
                 "--out", str(out)]) == 0
    doc = echo_doc(capsys.readouterr().out, "match")
    assert doc["lattice"]["radius_m"] == 50.0
