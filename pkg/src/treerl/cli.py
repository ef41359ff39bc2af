"""``treerl`` command line: search | sweep | ablate | train | theory | report.

Configuration is one JSON file plus ``--set dotted.key=value`` overrides.
Every run writes into ``<out>/<command>-<UTC timestamp>-<config hash>/``.

Exit codes: 0 ok, 1 other failure, 2 configuration error, 3 backend
error, 4 internal invariant violation.  Failures print a one-line JSON
error record on stderr (and to ``error.json`` once a run directory exists).
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import re
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import evalx, plots, theory
from .credit import RewardScheme
from .errors import BackendError, InvalidConfig, InvariantViolation, MaskExhausted, SearchError, TreeRLError
from .evalx import config_hash, read_csv, write_csv
from .policy.base import GenParams, derive_seed
from .policy.chainsum import ChainSumTask
from .policy.fixedlen import FixedLengthBackend
from .policy.synthetic import SynthBackend, SynthPolicy
from .search import SearchConfig, eptree_search
from .trainer import TrainConfig, load_resume_point, train

log = logging.getLogger("treerl")

COMMANDS = ("search", "sweep", "ablate", "train", "theory", "report")
EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_BACKEND, EXIT_INVARIANT = 0, 1, 2, 3, 4

DEFAULTS: dict = {
    "seed": 0,
    "workers": 1,
    "backend": {"kind": "chainsum", "modulus": 5, "k": 3, "skill": 2.0, "noise": 1.0,
                "eos_bias": 0.0, "init_seed": 0},
    "gen": {"temperature": 1.2, "top_p": 0.95, "max_new_tokens": 64},
    "search": {"m": 6, "n": 2, "l": 1, "t": 2, "mask_tail_fraction": 0.2, "fork_strategy": "entropy",
               "ranking": "surprisal", "on_mask_exhausted": "skip"},
    "prompts": {"count": 16, "seed": 0, "file": None},
    "sweep": {"shapes": [[16, 0, 0, 0], [8, 3, 1, 1], [7, 2, 1, 2], [6, 2, 2, 1], [6, 2, 1, 2]]},
    "ablate": {"seeds": 5},
    "train": {"sampler": "treerl", "scheme": "reweighted_sum", "k": 16, "advantage": "rloo",
              "prompts_per_step": 16, "lr_scale": 1e6, "kl_beta": 1e-4, "steps": 50,
              "eval_every": 10, "eval_k": 16, "length_normalize": False, "snapshot_every": 0,
              "n_train": 200, "n_eval": 100, "resume": None},
    "theory": {"grid": None, "samples": 100000, "bridge_shapes": [[4, 2, 1, 2], [4, 2, 2, 2]],
               "bridge_seeds": 20, "bridge_length": 128, "bridge_trees": 16},
}


class ConfigError(InvalidConfig):
    pass


# -- configuration ------------------------------------------------------

def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, item: str) -> None:
    key, eq, value = item.partition("=")
    if not eq or not key:
        raise ConfigError(f"override {item!r} is not key=value")
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-table value")
    node[parts[-1]] = _parse_value(value)


def load_config(path: str | None, overrides=(), seed: int | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg = _merge(cfg, user)
    for item in overrides:
        apply_override(cfg, item)
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def gen_params(cfg: dict) -> GenParams:
    g = cfg["gen"]
    return GenParams(float(g["temperature"]), float(g["top_p"]), int(g["max_new_tokens"]), int(cfg["seed"]))


def search_config(cfg: dict, shape=None) -> SearchConfig:
    s = dict(cfg["search"])
    if shape is not None:
        s["m"], s["n"], s["l"], s["t"] = shape
    return SearchConfig(gen=gen_params(cfg), **s)


def final_answer(text: str) -> str:
    boxed = re.findall(r"\\boxed\{([^{}]*)\}", text)
    if boxed:
        return boxed[-1].strip()
    nums = re.findall(r"-?\d+(?:\.\d+)?", text)
    return nums[-1] if nums else text.strip()


def make_backend(cfg: dict, prompts=None):
    b = dict(cfg["backend"])
    kind = b.pop("kind")
    if kind == "chainsum":
        task = ChainSumTask(**b)
        return SynthBackend(task.make_policy()), task
    if kind == "fixed_length":
        return FixedLengthBackend(int(b["length"]), int(b.get("vocab_size", 64))), None
    if kind == "http":
        from .policy.http import HttpBackend

        answers = {p["prompt"]: str(p["answer"]) for p in (prompts or [])}
        return HttpBackend(b["base_url"], b["model"], api_key_env=b.get("api_key_env", "OPENAI_API_KEY"),
                           timeout=float(b.get("timeout", 120.0)),
                           grader=lambda prompt, text: final_answer(text) == answers.get(prompt)), None
    raise ConfigError(f"unknown backend kind {kind!r}")


def setup(cfg: dict):
    """(backend, task or None, prompts) for the configured backend."""
    p = cfg["prompts"]
    rows = None
    if p.get("file"):
        try:
            rows = [json.loads(line) for line in Path(p["file"]).read_text().splitlines() if line.strip()]
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read prompt file: {exc}") from None
    backend, task = make_backend(cfg, rows)
    if rows is not None:
        if cfg["backend"]["kind"] == "http":
            return backend, task, [r["prompt"] for r in rows]
        return backend, task, [tuple(r["operands"]) if isinstance(r, dict) else tuple(r) for r in rows]
    if task is not None:
        return backend, task, task.sample_prompts(int(p["count"]), int(p["seed"]))
    if cfg["backend"]["kind"] == "http":
        raise ConfigError("the http backend needs prompts.file")
    return backend, task, list(range(int(p["count"])))


def validate(cfg: dict, command: str) -> None:
    """Construct everything the command needs so bad values fail before any output."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    if int(cfg["workers"]) < 1:
        raise ConfigError("workers must be >= 1")
    if command in ("search", "sweep", "ablate", "train"):
        gen_params(cfg)
        search_config(cfg)
        b = dict(cfg["backend"])
        if b.get("kind") == "chainsum":
            b.pop("kind")
            ChainSumTask(**b)
        elif b.get("kind") not in ("fixed_length", "http"):
            raise ConfigError(f"unknown backend kind {b.get('kind')!r}")
    if command == "sweep":
        for shape in cfg["sweep"]["shapes"]:
            search_config(cfg, shape)
    if command == "train":
        train_config(cfg)
        if cfg["backend"]["kind"] != "chainsum":
            raise ConfigError("training needs the chainsum backend")


def train_config(cfg: dict) -> TrainConfig:
    t = dict(cfg["train"])
    for k in ("n_train", "n_eval", "resume"):
        t.pop(k, None)
    t["search"] = replace(search_config(cfg), on_mask_exhausted="skip")
    t["scheme"] = RewardScheme.parse(t["scheme"]) if isinstance(t["scheme"], str) else t["scheme"]
    t["seed"] = int(cfg["seed"])
    try:
        return TrainConfig.from_dict(t)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


# -- run directory --------------------------------------------------------

class Run:
    def __init__(self, out: Path, command: str, cfg: dict):
        self.cfg = cfg
        self.command = command
        self.hash = config_hash({"command": command, **cfg})
        stamp = time.strftime("%Y%m%d-%H%M%S", time.gmtime())
        self.dir = out / f"{command}-{stamp}-{self.hash[:8]}"
        n = 1
        while self.dir.exists():
            n += 1
            self.dir = out / f"{command}-{stamp}-{self.hash[:8]}-{n}"
        self.dir.mkdir(parents=True)
        self.write_json("config.json", {"command": command, "config": cfg})

    def path(self, name: str) -> Path:
        return self.dir / name

    def write_json(self, name: str, obj) -> None:
        obj = {"config_hash": self.hash, "schema_version": evalx.SCHEMA_VERSION, **obj}
        self.path(name).write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")

    def csv(self, name: str, header, rows) -> None:
        write_csv(self.path(name), header, rows, self.hash)


def _check_forest(forest) -> None:
    problems = forest.validate()
    if problems:
        raise InvariantViolation("; ".join(problems))


def _fmt(x) -> str:
    return format(float(x), ".10g")


# -- commands -------------------------------------------------------------

def cmd_search(cfg: dict, run: Run) -> None:
    backend, _, prompts = setup(cfg)
    scfg = search_config(cfg)
    summary, rows, events = [], [], []
    with ThreadPoolExecutor(int(cfg["workers"])) as pool:
        for i, p in enumerate(prompts):
            gen = scfg.gen.with_seed(derive_seed(cfg["seed"], i))
            forest, rep = eptree_search(backend, p, replace(scfg, gen=gen), executor=pool)
            forest.config["config_hash"] = run.hash
            _check_forest(forest)
            with run.path(f"forest-{i:04d}.jsonl").open("w") as fp:
                forest.dump(fp)
            correct = evalx.leaf_correctness(forest)
            rows.append([i, rep.leaves, rep.distinct_leaves, rep.generated_tokens, sum(correct), int(any(correct))])
            summary.append({"prompt_index": i, "leaves": rep.leaves, "distinct_leaves": rep.distinct_leaves,
                            "generated_tokens": rep.generated_tokens, "shortfall": rep.shortfall})
            events.extend(rep.fork_events)
    run.csv("search.csv", ["prompt", "leaves", "distinct_leaves", "tokens", "correct_leaves", "passed"], rows)
    with run.path("summary.jsonl").open("w") as fp:
        for s in summary:
            fp.write(json.dumps({"config_hash": run.hash, **s}, sort_keys=True) + "\n")
    _fork_outputs(run, events, "forks")
    print(f"{len(prompts)} prompts, passrate {evalx.passrate([[r[5] == 1] for r in rows]):.4f} -> {run.dir}")


def _fork_outputs(run: Run, events, stem: str) -> None:
    if not events:
        return
    run.csv(f"{stem}.csv", ["tree", "iteration", "branch", "position", "branch_length", "token", "surprisal"],
            [[e.tree_index, e.iteration, e.branch_id, e.branch_pos, e.branch_length, e.token_id,
              format(e.surprisal, ".17g")] for e in events])
    h = evalx.fork_position_histogram(events)
    plots.histogram_svg(h.counts, h.edges, run.path(f"{stem}-positions.svg"),
                        f"fork positions (chi2 p={h.pvalue:.3g})", run.hash)
    plots.ranked_bar_svg(evalx.fork_token_frequency(events, 10), run.path(f"{stem}-tokens.svg"),
                         "most frequent fork tokens", run.hash)


def cmd_sweep(cfg: dict, run: Run) -> None:
    backend, _, prompts = setup(cfg)
    configs = [search_config(cfg, s) for s in cfg["sweep"]["shapes"]]
    rows = evalx.sweep(backend, prompts, configs, seed=int(cfg["seed"]))
    run.csv("sweep.csv", evalx.SweepRow.HEADER, [r.csv_row() for r in rows])
    print(format_sweep(evalx.SweepRow.HEADER, [[str(c) for c in r.csv_row()] for r in rows]))


def cmd_ablate(cfg: dict, run: Run) -> None:
    backend, task, prompts = setup(cfg)
    scfg = search_config(cfg)
    rows, ent, rnd, events = [], [], [], {"entropy": [], "random": []}
    for s in range(int(cfg["ablate"]["seeds"])):
        if task is not None:
            prompts = task.sample_prompts(int(cfg["prompts"]["count"]), int(cfg["prompts"]["seed"]) + s)
        a = evalx.ablation_fork_strategy(backend, prompts, scfg, seed=derive_seed(cfg["seed"], s))
        ent.append(a.entropy.passrate)
        rnd.append(a.random.passrate)
        events["entropy"].extend(a.entropy.fork_events)
        events["random"].extend(a.random.fork_events)
        rows.append([s, _fmt(a.entropy.passrate), _fmt(a.random.passrate),
                     _fmt(a.entropy.mean_tokens), _fmt(a.random.mean_tokens)])
    run.csv("ablation.csv", ["seed", "entropy_passrate", "random_passrate", "entropy_tokens", "random_tokens"], rows)
    st = evalx.sign_test(ent, rnd)
    run.write_json("ablation.json", {"entropy_mean": float(np.mean(ent)), "random_mean": float(np.mean(rnd)),
                                     "sign_test": asdict(st), "significant": st.significant})
    for arm, ev in events.items():
        _fork_outputs(run, ev, f"forks-{arm}")
    print(f"entropy {np.mean(ent):.4f} vs random {np.mean(rnd):.4f}; sign test "
          f"{st.wins}-{st.losses} (ties {st.ties}) p={st.pvalue:.4g}")


def cmd_train(cfg: dict, run: Run) -> None:
    backend, task = make_backend(cfg)
    tcfg = train_config(cfg)
    t = cfg["train"]
    tr, ev = task.split_prompts(int(t["n_train"]), int(t["n_eval"]), seed=int(cfg["prompts"]["seed"]))
    policy, resume = backend.policy, None
    if t.get("resume"):
        policy, resume = load_resume_point(t["resume"])
    hist = train(policy, tcfg, tr, ev, out_dir=run.dir, resume=resume)
    policy.save(run.path("policy-final.npz"))
    keys = ["step", "mean_reward", "sequences", "tokens", "cumulative_tokens", "grad_norm", "mean_kl",
            "skipped_prompts", "heldout_accuracy", "heldout_passrate", "greedy_accuracy"]
    rows = []
    for r in hist.records:
        d = asdict(r)
        rows.append([d[k] if isinstance(d[k], int) else ("" if d[k] is None else _fmt(d[k])) for k in keys])
    run.csv("train.csv", keys, rows)
    run.write_json("train.json", {"initial": hist.initial, "final": asdict(hist.records[-1]) if hist.records else None})
    if hist.records:
        xs, ys = hist.curve()
        plots.curves_svg({tcfg.sampler.value: (xs, ys)}, run.path("train-curve.svg"),
                         "cumulative generated tokens", "held-out accuracy", cfg_hash=run.hash)
        print(f"held-out accuracy {hist.initial['heldout_accuracy']:.4f} -> {hist.records[-1].heldout_accuracy:.4f}")


def cmd_theory(cfg: dict, run: Run) -> None:
    t = cfg["theory"]
    grid = [tuple(g) for g in t["grid"]] if t["grid"] else None
    rep = theory.theorem_report(grid, int(t["samples"]), int(cfg["seed"]),
                                bridge_shapes=[tuple(s) for s in t["bridge_shapes"]],
                                bridge_seeds=range(int(t["bridge_seeds"])),
                                bridge_length=int(t["bridge_length"]), bridge_trees=int(t["bridge_trees"]))
    run.write_json("theory.json", rep.to_dict())
    run.path("theory.txt").write_text(rep.to_text() + "\n")
    run.csv("theory.csv", ["n", "t", "phi", "std_error", "samples", "ratio", "lower", "upper"],
            [[c.n, c.t, format(c.phi, ".17g"), format(c.std_error, ".17g"), c.samples,
              format(c.ratio, ".17g"), format(c.lower, ".17g"), format(c.upper, ".17g")] for c in rep.case_l2])
    print(rep.to_text())
    if not rep.verdict["all"]:
        raise InvariantViolation(f"theorem checks failed: {rep.verdict}")


SWEEP_ORDER = ("M", "N", "L", "T", "leaves", "passrate", "tokens")


def format_sweep(header, rows) -> str:
    idx = [list(header).index(c) for c in SWEEP_ORDER]
    names = ["M", "N", "L", "T", "#Leaf", "PassRate", "#Token"]
    table = [names] + [[r[i] for i in idx] for r in rows]
    widths = [max(len(str(row[j])) for row in table) for j in range(len(names))]
    return "\n".join("  ".join(str(v).rjust(w) for v, w in zip(row, widths)) for row in table)


def cmd_report(target: Path) -> int:
    if not target.is_dir():
        raise ConfigError(f"{target} is not a directory")
    runs = sorted({p.parent for p in target.rglob("config.json")})
    if not runs:
        raise ConfigError(f"no run artifacts under {target}")
    groups: dict[str, list[Path]] = {}
    for r in runs:
        try:
            meta = json.loads((r / "config.json").read_text())
        except (OSError, json.JSONDecodeError):
            log.warning("%s: unreadable config.json, skipped", r)
            continue
        if meta.get("schema_version") != evalx.SCHEMA_VERSION:
            log.warning("%s: schema version %s differs, skipped", r, meta.get("schema_version"))
            continue
        groups.setdefault(meta.get("command", "?"), []).append(r)
    lines = []
    for command in sorted(groups):
        lines.append(f"== {command} ({len(groups[command])} runs)")
        for r in groups[command]:
            lines.append(f"-- {r.name}")
            lines.extend(_report_run(command, r))
    text = "\n".join(lines)
    (target / "report.txt").write_text(text + "\n")
    print(text)
    return EXIT_OK


def _read_ok(path: Path):
    meta, header, rows = read_csv(path)
    if meta.get("schema_version") != str(evalx.SCHEMA_VERSION):
        log.warning("%s: schema version %s differs, skipped", path, meta.get("schema_version"))
        return None
    return meta, header, rows


def _report_run(command: str, r: Path) -> list[str]:
    out = []
    if command == "sweep" and (r / "sweep.csv").exists():
        got = _read_ok(r / "sweep.csv")
        if got:
            _, header, rows = got
            out.append(format_sweep(header, rows))
    for forks in sorted(r.glob("forks*.csv")):
        got = _read_ok(forks)
        if not got or not got[2]:
            continue
        _, header, rows = got
        try:
            ev = [(int(row[header.index("position")]), int(row[header.index("branch_length")])) for row in rows]
        except ValueError:
            log.warning("%s: non-numeric fork rows, skipped", forks)
            continue
        h = evalx.fork_position_histogram(ev)
        plots.histogram_svg(h.counts, h.edges, r / f"report-{forks.stem}.svg",
                            f"fork positions, {forks.stem}", got[0].get("config_hash", ""))
        out.append(f"{forks.stem}: {h.total} fork events, chi2={h.chi2:.3f} p={h.pvalue:.3g}")
    if command == "train" and (r / "train.csv").exists():
        got = _read_ok(r / "train.csv")
        if got:
            _, header, rows = got
            pts = [(float(row[header.index("cumulative_tokens")]), float(row[header.index("heldout_accuracy")]))
                   for row in rows if row[header.index("heldout_accuracy")]]
            if pts:
                xs, ys = zip(*pts)
                plots.curves_svg({"held-out accuracy": (xs, ys)}, r / "report-train.svg",
                                 "cumulative generated tokens", "accuracy", cfg_hash=got[0].get("config_hash", ""))
                out.append(f"train: final held-out accuracy {ys[-1]:.4f} after {int(xs[-1])} tokens")
    for name in ("ablation.json", "theory.json"):
        if (r / name).exists():
            d = json.loads((r / name).read_text())
            out.append(f"{name}: " + json.dumps(d.get("verdict", d.get("sign_test")), sort_keys=True))
    return out


# -- entry point ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="treerl", description="Entropy-guided tree search and tree-based RL.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("target", nargs="?", help="run directory (report only)")
    ap.add_argument("--config", help="JSON config file")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted override, repeatable")
    ap.add_argument("--out", default="runs", help="parent directory for run directories")
    ap.add_argument("--seed", type=int)
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _fail(code: int, exc: BaseException, run: Run | None) -> int:
    rec = {"exit_code": code, "error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, BackendError):
        rec["kind"] = exc.kind
    print(json.dumps(rec, sort_keys=True), file=sys.stderr)
    if run is not None:
        run.write_json("error.json", rec)
    return code


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    r = None
    try:
        if args.command == "report":
            return cmd_report(Path(args.target or args.out))
        cfg = load_config(args.config, args.set, args.seed)
        validate(cfg, args.command)
        r = Run(Path(args.out), args.command, cfg)
        {"search": cmd_search, "sweep": cmd_sweep, "ablate": cmd_ablate,
         "train": cmd_train, "theory": cmd_theory}[args.command](cfg, r)
        return EXIT_OK
    except (InvalidConfig, KeyError, TypeError, ValueError) as exc:
        if r is not None and not isinstance(exc, InvalidConfig):
            return _fail(EXIT_FAIL, exc, r)
        return _fail(EXIT_CONFIG, exc, r)
    except MaskExhausted as exc:
        return _fail(EXIT_FAIL, exc, r)
    except BackendError as exc:
        return _fail(EXIT_BACKEND, exc, r)
    except SearchError as exc:
        return _fail(EXIT_BACKEND if isinstance(exc.__cause__, BackendError) else EXIT_FAIL, exc, r)
    except InvariantViolation as exc:
        return _fail(EXIT_INVARIANT, exc, r)
    except TreeRLError as exc:
        return _fail(EXIT_FAIL, exc, r)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
