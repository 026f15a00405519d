"""Experiment orchestration: instances, regret curves, run files and summaries."""
from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import beacon
from .cucb import run_cucb
from .matching import (ENUMERATION_GUARD, OracleSizeError, gap_stats, make_oracle, n_injective,
                       optimal_value)
from .rewards import RewardFunction, make_reward
from .sim import COMMUNICATION, PHASES, SIGNALING, Environment, Trace, UtilityMatrix, run_lockstep

SCHEMA_VERSION = 1
ALGORITHMS = ("beacon", "cucb")
DEFAULT_STRIDE = 100

# printed with one row per player, one column per arm
_BUILTIN_ROWS = {
    "paper_5x5": [
        [0.5, 0.49, 0.39, 0.29, 0.5],
        [0.5, 0.49, 0.39, 0.29, 0.19],
        [0.29, 0.19, 0.5, 0.499, 0.39],
        [0.29, 0.49, 0.5, 0.5, 0.39],
        [0.49, 0.49, 0.49, 0.49, 0.5],
    ],
    "paper_8x6": [
        [0.45, 0.49, 0.59, 0.17, 0.37, 0.86, 0.94, 0.98],
        [0.39, 0.25, 0.4, 0.6, 0.24, 0.54, 0.43, 0.67],
        [0.39, 0.33, 0.8, 0.01, 0.12, 0.2, 0.61, 0.77],
        [0.95, 0.22, 0.24, 0.88, 0.2, 0.12, 0.29, 0.3],
        [0.69, 0.89, 0.25, 0.59, 0.43, 0.18, 0.01, 0.84],
        [0.97, 0.15, 0.89, 0.16, 0.09, 0.57, 0.61, 0.19],
    ],
}


def builtin_instance(name: str) -> UtilityMatrix:
    try:
        rows = _BUILTIN_ROWS[name]
    except KeyError:
        raise ValueError(f"unknown instance {name!r}; choose from {sorted(_BUILTIN_ROWS)}") from None
    return UtilityMatrix.from_player_rows(rows)


def gen_instance(K: int, M: int, seed: int) -> UtilityMatrix:
    """i.i.d. uniform utilities, Bernoulli outcomes."""
    if not 1 <= M <= K:
        raise ValueError(f"need 1 <= M <= K, got K={K}, M={M}")
    return UtilityMatrix(np.random.default_rng(seed).random((K, M)))


# ---- regret ----

REGRET_COLUMNS = ("t", "regret", "comm_steps", "signaling_steps", "epoch")


@dataclass
class RegretTrace:
    t: np.ndarray
    regret: np.ndarray
    comm_steps: np.ndarray
    signaling_steps: np.ndarray
    epoch: np.ndarray
    summary: dict = field(default_factory=dict)

    @property
    def final(self) -> float:
        return float(self.regret[-1]) if self.regret.size else 0.0

    def value_at(self, t: int) -> float:
        i = np.searchsorted(self.t, t)
        if i >= self.t.size or self.t[i] != t:
            raise KeyError(f"t={t} was not sampled")
        return float(self.regret[i])

    def to_csv(self, fh) -> None:
        w = csv.writer(fh)
        w.writerow(REGRET_COLUMNS)
        for row in zip(self.t, self.regret, self.comm_steps, self.signaling_steps, self.epoch):
            w.writerow([int(row[0]), repr(float(row[1])), int(row[2]), int(row[3]), int(row[4])])


def read_regret_csv(fh) -> RegretTrace:
    rows = list(csv.DictReader(fh))
    col = lambda k, dt: np.array([dt(r[k]) for r in rows])  # noqa: E731
    return RegretTrace(col("t", int), col("regret", float), col("comm_steps", int),
                       col("signaling_steps", int), col("epoch", int))


def _sample_points(horizon: int, stride: int, extra=()) -> np.ndarray:
    pts = set(range(stride, horizon + 1, stride)) | {horizon} | {t for t in extra if 1 <= t <= horizon}
    return np.array(sorted(pts), dtype=np.int64)


def _curve(trace: Trace, per_step: np.ndarray, stride: int, extra=()) -> RegretTrace:
    idx = _sample_points(trace.horizon, stride, extra) - 1
    phase = trace.phase
    comm = np.cumsum(phase == COMMUNICATION)
    sig = np.cumsum(phase == SIGNALING)
    starts = np.array(trace.meta.get("epoch_starts", []), dtype=np.int64)
    epoch = np.searchsorted(starts, idx + 1, side="right")
    cum = np.cumsum(per_step)
    return RegretTrace(idx + 1, cum[idx], comm[idx], sig[idx], epoch)


def pseudo_regret(trace: Trace, instance: UtilityMatrix, reward: RewardFunction, stride: int = 1,
                  v_star: float | None = None, extra=()) -> RegretTrace:
    """Cumulative V* minus the expected reward of each played matching."""
    v_star = optimal_value(instance, reward) if v_star is None else v_star
    return _curve(trace, v_star - trace.expected, stride, extra)


def alpha_beta_regret(trace: Trace, instance: UtilityMatrix, reward: RewardFunction, alpha: float,
                      beta: float, stride: int = 1, v_star: float | None = None, extra=()) -> RegretTrace:
    """Regret against the alpha*beta fraction of V*; steps can contribute negatively."""
    v_star = optimal_value(instance, reward) if v_star is None else v_star
    return _curve(trace, alpha * beta * v_star - trace.expected, stride, extra)


# ---- single runs ----

def run_beacon(instance: UtilityMatrix, horizon: int, seed: int, reward: RewardFunction | None = None,
               oracle=None, **kw):
    """Returns (trace, players).  The trace carries the audit ledgers in ``meta``."""
    players = beacon.make_players(instance.K, instance.M, seed, reward=reward, oracle=oracle, **kw)
    trace = run_lockstep(players, Environment(instance, seed), horizon, reward=players[0].reward)
    beacon.attach_audit(trace, players)
    leader = next((p for p in players if p.is_leader), None)
    trace.meta.update({"algorithm": "beacon", "seed": int(seed),
                       "epoch_starts": [e.t_r for e in leader.epochs] if leader else [],
                       "init_steps": leader.init_steps if leader else None})
    return trace, players


def comm_metrics(trace: Trace, min_epoch: int = 1) -> dict:
    """Payload and step cost of statistics updates from the leader's epoch log."""
    recs = next((r for r in trace.meta.get("beacon", []) if r["rank"] == 0), None)
    if recs is None:
        return {}
    eps = [e for e in recs["epochs"] if e["r"] >= min_epoch]
    lengths = [L for e in eps for L in e["payload_lengths"]]
    n_up = sum(e["uploads"] for e in eps)
    steps = sum(e["upload_steps"] for e in eps)
    return {
        "epochs_started": len(recs["epochs"]),
        "epochs_completed": sum(e["completed"] for e in recs["epochs"]),
        "updates": n_up,
        "mean_payload_bits": float(np.mean(lengths)) if lengths else None,
        "mean_steps_per_update": steps / n_up if n_up else None,
        "min_epoch": min_epoch,
    }


def _collisions_by_phase(trace: Trace) -> dict:
    n = trace.n_collisions
    return {PHASES[i]: int(n[trace.phase == i].sum()) for i in range(len(PHASES))}


def run_one(job: dict) -> dict:
    """Worker entry point.  ``job`` holds plain data so it pickles cheaply."""
    inst = UtilityMatrix(np.array(job["mu"]))
    reward = make_reward(job["reward"])
    algo, seed, T, stride = job["algorithm"], job["seed"], job["horizon"], job["stride"]
    oracle_cfg = job.get("oracle") or "exact"
    v_star = job["v_star"]
    extra = [T // 10] if T >= 10 else []
    out = {"algorithm": algo, "seed": seed, "instance": job["instance_index"]}
    if algo == "beacon":
        oracle = make_oracle(oracle_cfg, reward, seed=seed)
        trace, _ = run_beacon(inst, T, seed, reward=reward, oracle=oracle)
        out["comm"] = comm_metrics(trace, job.get("comm_min_epoch", 1))
        out["epochs"] = next(r for r in trace.meta["beacon"] if r["rank"] == 0)["epochs"]
        if hasattr(oracle, "successes"):
            s = oracle.successes
            out["oracle"] = {"calls": int(s.size), "success_rate": float(s.mean()) if s.size else None}
    elif algo == "cucb":
        trace = run_cucb(inst, T, seed, reward)
    else:
        raise ValueError(f"unknown algorithm {algo!r}")
    curve = pseudo_regret(trace, inst, reward, stride, v_star=v_star, extra=extra)
    if isinstance(oracle_cfg, dict):
        p = oracle_cfg["approx"]
        ab = alpha_beta_regret(trace, inst, reward, p["alpha"], p["beta"], stride, v_star=v_star, extra=extra)
        out["alpha_beta_regret"] = {"final": ab.final, "at_tenth": ab.value_at(T // 10) if extra else None}
    out["curve"] = {c: getattr(curve, c).tolist() for c in REGRET_COLUMNS}
    out["summary"] = {"final_regret": curve.final, "collisions_by_phase": _collisions_by_phase(trace),
                      "total_collisions": int(trace.n_collisions.sum())}
    if algo == "beacon":
        out["summary"]["epochs_completed"] = out["comm"].get("epochs_completed", 0)
        out["summary"]["mean_payload_bits"] = out["comm"].get("mean_payload_bits")
    if job.get("trace_path"):
        trace.save(job["trace_path"])
    if job.get("trace_csv"):
        with open(job["trace_csv"], "w", newline="") as fh:
            trace.to_csv(fh, stride)
    return out


# ---- configuration ----

class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def _require(cfg, key, path):
    if not isinstance(cfg, dict) or key not in cfg:
        raise ConfigError(f"{path}.{key}" if path else key, "missing required field")
    return cfg[key]


def _int(x, path, lo=None):
    if isinstance(x, bool) or not isinstance(x, int):
        raise ConfigError(path, f"expected an integer, got {x!r}")
    if lo is not None and x < lo:
        raise ConfigError(path, f"must be >= {lo}")
    return x


def resolve_instances(spec) -> list[tuple[str, UtilityMatrix]]:
    """Instance block: builtin name, {matrix: player rows}, or {random: {K, M, seed[, count]}}."""
    if isinstance(spec, str):
        try:
            return [(spec, builtin_instance(spec))]
        except ValueError as e:
            raise ConfigError("instance", str(e)) from None
    if isinstance(spec, dict) and "matrix" in spec:
        rows = spec["matrix"]
        try:
            arr = np.array(rows, dtype=float)
        except (TypeError, ValueError):
            raise ConfigError("instance.matrix", "rows must be numeric and equal length") from None
        if arr.ndim != 2:
            raise ConfigError("instance.matrix", "expected a list of player rows")
        for key, want in (("K", arr.shape[1]), ("M", arr.shape[0])):
            if key in spec and spec[key] != want:
                raise ConfigError(f"instance.{key}", f"is {spec[key]} but the matrix implies {want}")
        if np.any(arr < 0) or np.any(arr > 1):
            i, j = np.argwhere((arr < 0) | (arr > 1))[0]
            raise ConfigError(f"instance.matrix[{i}][{j}]", "entries must lie in [0, 1]")
        try:
            return [("matrix", UtilityMatrix.from_player_rows(arr))]
        except ValueError as e:
            raise ConfigError("instance.matrix", str(e)) from None
    if isinstance(spec, dict) and "random" in spec:
        r = spec["random"]
        K = _int(_require(r, "K", "instance.random"), "instance.random.K", 1)
        M = _int(_require(r, "M", "instance.random"), "instance.random.M", 1)
        if M > K:
            raise ConfigError("instance.random.M", f"M={M} exceeds K={K}")
        seed = _int(r.get("seed", 0), "instance.random.seed", 0)
        count = _int(r.get("count", 1), "instance.random.count", 1)
        seeds = np.random.SeedSequence(seed).generate_state(count) if count > 1 else [seed]
        return [(f"random_{i + 1}", gen_instance(K, M, int(s))) for i, s in enumerate(seeds)]
    raise ConfigError("instance", "expected a builtin name, {matrix: ...} or {random: ...}")


def validate_config(cfg: dict) -> dict:
    if not isinstance(cfg, dict):
        raise ConfigError("<root>", "config must be a mapping")
    out = {}
    out["instances"] = resolve_instances(_require(cfg, "instance", ""))
    try:
        out["reward"] = make_reward(cfg.get("reward", "linear"))
    except (ValueError, TypeError, KeyError) as e:
        raise ConfigError("reward", str(e)) from None
    out["reward_cfg"] = out["reward"].config()
    algos = cfg.get("algorithms", list(ALGORITHMS))
    if not isinstance(algos, list) or not algos:
        raise ConfigError("algorithms", "expected a non-empty list")
    for i, a in enumerate(algos):
        if a not in ALGORITHMS:
            raise ConfigError(f"algorithms[{i}]", f"unknown algorithm {a!r}; choose from {list(ALGORITHMS)}")
    out["algorithms"] = algos
    out["horizon"] = _int(_require(cfg, "horizon", ""), "horizon", 1)
    seeds = cfg.get("seeds", [1])
    if isinstance(seeds, dict):
        lo = _int(_require(seeds, "start", "seeds"), "seeds.start", 0)
        n = _int(_require(seeds, "count", "seeds"), "seeds.count", 1)
        seeds = list(range(lo, lo + n))
    if not isinstance(seeds, list) or not seeds:
        raise ConfigError("seeds", "expected a non-empty list or {start, count}")
    for i, s in enumerate(seeds):
        _int(s, f"seeds[{i}]", 0)
    out["seeds"] = seeds
    oracle = cfg.get("oracle", "exact")
    if oracle != "exact":
        if not isinstance(oracle, dict) or "approx" not in oracle:
            raise ConfigError("oracle", "expected 'exact' or {approx: {alpha, beta}}")
        for key in ("alpha", "beta"):
            v = _require(oracle["approx"], key, "oracle.approx")
            if not isinstance(v, (int, float)) or not 0 <= v <= 1:
                raise ConfigError(f"oracle.approx.{key}", "must be a number in [0, 1]")
    out["oracle"] = oracle
    out["stride"] = _int(cfg.get("stride", DEFAULT_STRIDE), "stride", 1)
    output = cfg.get("output", {}) or {}
    if not isinstance(output, dict):
        raise ConfigError("output", "expected a mapping")
    out["output"] = output
    out["comm_min_epoch"] = _int(cfg.get("comm_min_epoch", 10), "comm_min_epoch", 1)
    return out


def load_config(path) -> dict:
    with open(path) as fh:
        return yaml.safe_load(fh)


def _gap_json(inst: UtilityMatrix, reward) -> dict | None:
    if n_injective(inst.K, inst.M) > ENUMERATION_GUARD:
        return None
    try:
        return gap_stats(inst, reward).to_json()
    except OracleSizeError:
        return None


def aggregate(curves: list[dict]) -> dict:
    """Pointwise mean and standard deviation over runs sharing sample points."""
    t = np.array(curves[0]["t"])
    R = np.array([c["regret"] for c in curves])
    return {"t": t, "mean": R.mean(axis=0), "std": R.std(axis=0, ddof=1) if len(curves) > 1 else np.zeros(t.size),
            "n": len(curves)}


def run_experiment(config: dict, out_dir=None, workers: int = 1) -> dict:
    """Execute every (instance, algorithm, seed) and write run files plus a JSON summary."""
    cfg = validate_config(config)
    out_dir = Path(out_dir or cfg["output"].get("dir", "results"))
    (out_dir / "runs").mkdir(parents=True, exist_ok=True)
    reward = cfg["reward"]
    T = cfg["horizon"]
    jobs = []
    instances = []
    for ii, (name, inst) in enumerate(cfg["instances"]):
        v_star = optimal_value(inst, reward)
        instances.append({"name": name, "K": inst.K, "M": inst.M, "V_star": v_star,
                          "gap_stats": _gap_json(inst, reward) if cfg["output"].get("gap_stats", True) else None})
        for algo in cfg["algorithms"]:
            for seed in cfg["seeds"]:
                stem = f"{algo}_inst{ii + 1}_seed{seed}"
                jobs.append({"mu": inst.mu.tolist(), "reward": cfg["reward_cfg"], "algorithm": algo,
                             "seed": seed, "horizon": T, "stride": cfg["stride"], "oracle": cfg["oracle"],
                             "v_star": v_star, "instance_index": ii + 1, "stem": stem,
                             "comm_min_epoch": cfg["comm_min_epoch"],
                             "trace_path": str(out_dir / "runs" / f"{stem}.trace") if cfg["output"].get("traces") else None,
                             "trace_csv": str(out_dir / "runs" / f"{stem}_trace.csv") if cfg["output"].get("trace_csv") else None})
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_one, jobs))
    else:
        results = [run_one(j) for j in jobs]

    for job, res in zip(jobs, results):
        with open(out_dir / "runs" / f"{job['stem']}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REGRET_COLUMNS)
            c = res["curve"]
            for row in zip(*(c[k] for k in REGRET_COLUMNS)):
                w.writerow([row[0], repr(float(row[1])), row[2], row[3], row[4]])
        if res["algorithm"] == "beacon":
            with open(out_dir / "runs" / f"{job['stem']}_epochs.jsonl", "w") as fh:
                for e in res["epochs"]:
                    fh.write(json.dumps(e) + "\n")

    per_algo = {}
    with open(out_dir / "aggregate.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["algorithm", "t", "mean_regret", "std_regret", "n_runs"])
        for algo in cfg["algorithms"]:
            runs = [r for r in results if r["algorithm"] == algo]
            agg = aggregate([r["curve"] for r in runs])
            for t, m, s in zip(agg["t"], agg["mean"], agg["std"]):
                w.writerow([algo, int(t), repr(float(m)), repr(float(s)), agg["n"]])
            finals = [r["summary"]["final_regret"] for r in runs]
            entry = {"runs": len(runs), "mean_final_regret": float(np.mean(finals)),
                     "std_final_regret": float(np.std(finals, ddof=1)) if len(finals) > 1 else 0.0}
            if algo == "beacon":
                comms = [r["comm"] for r in runs if r.get("comm")]
                ups = sum(c["updates"] for c in comms)
                steps = sum((c["mean_steps_per_update"] or 0) * c["updates"] for c in comms)
                bits = [b for r in runs for e in r["epochs"] if e["r"] >= cfg["comm_min_epoch"]
                        for b in e["payload_lengths"]]
                entry["comm"] = {"updates": ups,
                                 "mean_steps_per_update": steps / ups if ups else None,
                                 "mean_payload_bits": float(np.mean(bits)) if bits else None,
                                 "min_epoch": cfg["comm_min_epoch"],
                                 "mean_epochs_completed": float(np.mean([c["epochs_completed"] for c in comms]))}
                if any("oracle" in r for r in runs):
                    calls = sum(r["oracle"]["calls"] for r in runs)
                    succ = sum(r["oracle"]["success_rate"] * r["oracle"]["calls"] for r in runs if r["oracle"]["calls"])
                    entry["oracle"] = {"calls": calls, "success_rate": succ / calls if calls else None}
            if any("alpha_beta_regret" in r for r in runs):
                entry["alpha_beta_regret"] = {
                    "mean_final": float(np.mean([r["alpha_beta_regret"]["final"] for r in runs])),
                    "mean_at_tenth_horizon": float(np.mean([r["alpha_beta_regret"]["at_tenth"] for r in runs]))
                    if all(r["alpha_beta_regret"]["at_tenth"] is not None for r in runs) else None,
                }
            per_algo[algo] = entry

    summary = {
        "schema_version": SCHEMA_VERSION,
        "horizon": T,
        "seeds": cfg["seeds"],
        "reward": cfg["reward_cfg"],
        "oracle": cfg["oracle"],
        "instances": instances,
        "algorithms": per_algo,
        "histogram": {algo: [r["summary"]["final_regret"] for r in results if r["algorithm"] == algo]
                      for algo in cfg["algorithms"]},
        "runs": [{k: r[k] for k in ("algorithm", "seed", "instance", "summary")} for r in results],
    }
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    return summary


def default_workers() -> int:
    return max(1, (os.cpu_count() or 1) - 1)
