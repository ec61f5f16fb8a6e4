"""Command-line entry point: ``gangforge <command> --config experiment.json``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .ablation import AblationConfig, random_injection_plans
from .attack import AttackModel, CheckpointMismatch, load_attack, run_attack, save_attack, train_attack
from .config import ExperimentConfig, load_config
from .data import DataError, generate_synthetic_fraud_graph, load_dataset, load_injection, save_dataset, save_injection
from .detector import TrainingError, load_detector, macro_f1, predict_scores, save_detector, train_detector
from .evaluation import evaluate_attack
from .graph import ConfigError, GraphError, compute_statistics

COMMANDS = ("gen-synth", "train-detector", "train-attack", "attack", "evaluate", "ablate")
EVAL_SPLIT = "test"

logger = logging.getLogger("gangforge")


class MissingArtifact(FileNotFoundError):
    pass


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{path} not found; run `gangforge {producer}` first")
    return path


def _paths(cfg: ExperimentConfig) -> dict[str, Path]:
    out = cfg.output_dir
    return {
        "dataset": cfg.dataset_path or out / "dataset",
        "surrogate": out / "detector_surrogate.ckpt",
        "victim": out / "detector_victim.ckpt",
        "attack": out / "attack.ckpt",
        "plans": out / "plans",
        "ablation": out / "ablation",
    }


def _bundle(cfg: ExperimentConfig):
    path = _paths(cfg)["dataset"]
    if cfg.dataset_path is None:
        _require(path / "meta.json", "gen-synth")
    return load_dataset(path, cfg.rho, cfg.xi)


def _write_rows(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("", encoding="utf-8")
        return
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_synth(cfg: ExperimentConfig, args) -> None:
    if cfg.synth is None:
        raise ConfigError("dataset: gen-synth needs a 'synth' dataset, not a path")
    bundle = generate_synthetic_fraud_graph(cfg.synth, p=cfg.p, rho=cfg.rho, xi=cfg.xi)
    target = save_dataset(bundle, _paths(cfg)["dataset"])
    g = bundle.graph
    print(f"wrote {target}: {g.num_nodes} nodes, {g.num_edges} edges, {len(bundle.target_sets)} target sets")


def cmd_train_detector(cfg: ExperimentConfig, args) -> None:
    bundle = _bundle(cfg)
    paths = _paths(cfg)
    for role, dcfg in (("surrogate", cfg.detector), ("victim", cfg.victim)):
        model = train_detector(bundle, dcfg)
        save_detector(model, paths[role])
        _write_rows(cfg.output_dir / f"detector_{role}_log.csv", model.training_log)
        scores = predict_scores(model, bundle.graph, bundle.test_nodes)
        f1 = macro_f1(bundle.graph.labels[bundle.test_nodes], scores.argmax(axis=1))
        print(f"{role}: {dcfg.architecture} seed={dcfg.seed} test macro-F1={f1:.4f} -> {paths[role]}")


def _train_attack_model(cfg, bundle, surrogate_path: Path, ablation: AblationConfig) -> AttackModel:
    surrogate = load_detector(surrogate_path)
    model = AttackModel(cfg.attack, surrogate, ablation)
    return train_attack(model, bundle, cfg.attack)


def cmd_train_attack(cfg: ExperimentConfig, args) -> None:
    paths = _paths(cfg)
    surrogate_path = _require(paths["surrogate"], "train-detector")
    bundle = _bundle(cfg)
    model = _train_attack_model(cfg, bundle, surrogate_path, AblationConfig())
    save_attack(model, paths["attack"], surrogate_path)
    _write_rows(cfg.output_dir / "attack_loss.csv", model.history)
    last = model.history[-1] if model.history else {}
    print(f"attack: {len(model.history)} epochs, final val loss {last.get('val_loss', float('nan')):.4f} "
          f"-> {paths['attack']}")


def _generate_plans(model: AttackModel, bundle, plan_dir: Path) -> dict:
    graph = bundle.graph
    stats = compute_statistics(graph, bundle.target_sets)
    plan_dir.mkdir(parents=True, exist_ok=True)
    plans = {}
    for ts in bundle.sets_in(EVAL_SPLIT):
        plan = run_attack(model, graph, ts, stats)
        save_injection(plan, plan_dir / f"{ts.set_id}.injection.json")
        plans[ts.set_id] = plan
        print(f"set {ts.set_id}: size={ts.size} B={ts.closed_neighborhood_size} "
              f"delta={ts.node_budget} eta={ts.edge_budget} "
              f"injected_nodes={plan.num_attack_nodes} injected_edges={plan.num_edges}")
    return plans


def cmd_attack(cfg: ExperimentConfig, args) -> None:
    paths = _paths(cfg)
    _require(paths["attack"], "train-attack")
    surrogate_path = _require(paths["surrogate"], "train-detector")
    model = load_attack(paths["attack"], surrogate_path)
    _generate_plans(model, _bundle(cfg), paths["plans"])


def _load_plans(plan_dir: Path, bundle) -> dict:
    _require(plan_dir, "attack")
    plans = {}
    for ts in bundle.sets_in(EVAL_SPLIT):
        f = plan_dir / f"{ts.set_id}.injection.json"
        if f.exists():
            plans[ts.set_id] = load_injection(f)
    return plans


def cmd_evaluate(cfg: ExperimentConfig, args) -> None:
    paths = _paths(cfg)
    victim = load_detector(_require(paths["victim"], "train-detector"))
    bundle = _bundle(cfg)
    plans = _load_plans(paths["plans"], bundle)
    report = evaluate_attack(victim, bundle, plans, EVAL_SPLIT, jobs=args.jobs)
    report.write(cfg.output_dir)
    for r in report.per_set:
        attacked = "n/a" if r.attacked_misclassification is None else f"{r.attacked_misclassification:.3f}"
        print(f"set {r.set_id}: size={r.size} B={r.B} clean={r.clean_misclassification:.3f} attacked={attacked}")
    print(f"weighted misclassification: clean={report.weighted_clean:.4f} attacked={report.weighted_attacked:.4f} "
          f"non-target change={report.non_target_mean_abs_change:.4f}")


def cmd_ablate(cfg: ExperimentConfig, args) -> None:
    flags = cfg.ablation.enabled()
    if not flags:
        raise ConfigError("ablation: enable at least one ablation flag to run `ablate`")
    paths = _paths(cfg)
    surrogate_path = _require(paths["surrogate"], "train-detector")
    victim = load_detector(_require(paths["victim"], "train-detector"))
    bundle = _bundle(cfg)
    sets = bundle.sets_in(EVAL_SPLIT)
    stats = compute_statistics(bundle.graph, bundle.target_sets)

    variants: list[tuple[str, dict]] = []
    if paths["attack"].exists():
        full = load_attack(paths["attack"], surrogate_path)
    else:
        full = _train_attack_model(cfg, bundle, surrogate_path, AblationConfig())
    variants.append(("full", {t.set_id: run_attack(full, bundle.graph, t, stats) for t in sets}))
    for flag in flags:
        model = _train_attack_model(cfg, bundle, surrogate_path, AblationConfig.only(flag))
        paths["ablation"].mkdir(parents=True, exist_ok=True)
        save_attack(model, paths["ablation"] / f"{flag}.ckpt", surrogate_path)
        variants.append((flag, {t.set_id: run_attack(model, bundle.graph, t, stats) for t in sets}))
    variants.append(("random_injection", random_injection_plans(bundle.graph, sets, stats, seed=cfg.attack.seed,
                                                                K=cfg.attack.K)))

    rows = []
    for name, plans in variants:
        report = evaluate_attack(victim, bundle, plans, EVAL_SPLIT, jobs=args.jobs)
        rows.append({
            "variant": name,
            "weighted_clean": f"{report.weighted_clean:.6f}",
            "weighted_attacked": f"{report.weighted_attacked:.6f}",
            "non_target_mean_abs_change": f"{report.non_target_mean_abs_change:.6f}",
        })
        print(f"{name}: clean={report.weighted_clean:.4f} attacked={report.weighted_attacked:.4f}")
    _write_rows(cfg.output_dir / "ablation_table.csv", rows)


HANDLERS = {
    "gen-synth": cmd_gen_synth,
    "train-detector": cmd_train_detector,
    "train-attack": cmd_train_attack,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gangforge", description="Multi-target graph injection attacks on fraud detectors.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="experiment JSON file")
    parser.add_argument("--jobs", type=int, default=1, help="worker threads for evaluation")
    parser.add_argument("--seed-index", type=int, default=0, help="which entry of `seeds` to offset all seeds by")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if args.jobs < 1:
        parser.error("--jobs must be >= 1")
    try:
        cfg = load_config(args.config).seeded(args.seed_index)
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
        HANDLERS[args.command](cfg, args)
    except (ConfigError, DataError) as exc:
        print(f"gangforge: error: {exc}", file=sys.stderr)
        return 2
    except (MissingArtifact, CheckpointMismatch, GraphError, TrainingError, FileNotFoundError) as exc:
        print(f"gangforge: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
