"""Experiment runner: gap-rate sweeps, superiority panels, option-trading
training, and GBM estimation.

Configs are flat key=value text with cosmetic [sections]; every key has a
default, every flag overrides a key, and the fully resolved config is echoed
into the output directory so a run can be reproduced bitwise from its own
artifacts. Exit codes: 0 success, 2 validation error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, agents, envs, estimate
from .ctmdp import SimConfig, ConstantAction, SimulationError, substream
from .dist import (
    DistortionMeasure,
    advantage_shift,
    mean as dist_mean,
    rescale,
    variance as dist_variance,
)
from .approx import save_checkpoint

RESULTS_SCHEMA = "# ctdrl-results-v1"
TRAINLOG_SCHEMA = "# ctdrl-trainlog-v1"

AGENT_KINDS = ("qrdqn", "dau", "dsup", "dau+dsup")
ENV_NAMES = ("brownian_gap", "illustration")


@dataclass(frozen=True)
class ResultRow:
    experiment: str
    seed: int
    h: float | None
    metric: str
    value: float
    stderr: float | None = None


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def write_results_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(RESULTS_SCHEMA + "\n")
        writer = csv.writer(fh)
        writer.writerow(["experiment", "seed", "h", "metric", "value", "stderr"])
        for r in rows:
            writer.writerow(
                [r.experiment, r.seed, _fmt(r.h), r.metric, _fmt(r.value), _fmt(r.stderr)]
            )


def write_trainlog_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(TRAINLOG_SCHEMA + "\n")
        writer = csv.writer(fh)
        writer.writerow(
            ["wall_step", "env_time", "loss", "eval_mean_return",
             "eval_cvar_return", "epsilon"]
        )
        for r in rows:
            writer.writerow(
                [r.wall_step, _fmt(r.env_time), _fmt(r.loss),
                 _fmt(r.eval_mean_return), _fmt(r.eval_cvar_return), _fmt(r.epsilon)]
            )


def _parse_float(s):
    return float(s)


def _parse_int(s):
    return int(s)


def _parse_str(s):
    return s.strip()


def _parse_bool(s):
    token = s.strip().lower()
    if token in ("1", "true", "yes", "on"):
        return True
    if token in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_opt_float(s):
    token = s.strip().lower()
    if token in ("", "none"):
        return None
    return float(s)


def _parse_float_list(s):
    return [float(tok) for tok in s.split(",") if tok.strip()]


def _parse_int_list(s):
    return [int(tok) for tok in s.split(",") if tok.strip()]


# Field tables: key -> (parser, default).
GAP_RATES_FIELDS = {
    "env": (_parse_str, "brownian_gap"),
    "horizon": (_parse_float, 1.0),
    "discount": (_parse_float, 1.0),
    "drift": (_parse_float, 10.0),
    "move_diffusion": (_parse_float, 1.0),
    "t": (_parse_float, 0.0),
    "x": (_parse_float, 0.0),
    "base_action": (_parse_int, 0),
    "h_grid": (_parse_float_list, [2.0**-k for k in range(2, 8)]),
    "n_paths": (_parse_int, 10_000),
    "p": (_parse_int, 1),
    "m": (_parse_int, 512),
    "bootstrap": (_parse_int, 200),
    "substeps": (_parse_int, 32),
    "dt_floor": (_parse_float, 1e-4),
    "tail_dt": (_parse_opt_float, None),
    "seeds": (_parse_int_list, [0]),
}

SUPERIORITY_FIELDS = {
    "omega_grid": (_parse_float_list, [4.0, 8.0, 16.0, 32.0, 64.0, 128.0]),
    "n_paths": (_parse_int, 10_000),
    "m": (_parse_int, 512),
    "horizon": (_parse_float, 10.0),
    "discount": (_parse_float, 1.0),
    "drift": (_parse_float, 10.0),
    "move_diffusion": (_parse_float, 1.0),
    "t": (_parse_float, 0.0),
    "x": (_parse_float, 0.0),
    "action": (_parse_int, 1),
    "base_action": (_parse_int, 0),
    "substeps": (_parse_int, 16),
    "dt_floor": (_parse_float, 1e-4),
    "tail_dt": (_parse_opt_float, 0.05),
    "write_quantiles": (_parse_bool, True),
    "seeds": (_parse_int_list, [0]),
}

TRAIN_FIELDS = {
    "agent": (_parse_str, "dsup"),
    "q": (_parse_float, 0.5),
    "omega_grid": (_parse_float_list, [5.0]),
    "seeds": (_parse_int_list, [0]),
    "updates": (_parse_int, 5000),
    "batch_size": (_parse_int, 32),
    "buffer_capacity": (_parse_int, 20_000),
    "target_period": (_parse_int, 1000),
    "lr": (_parse_float, 1e-4),
    "m": (_parse_int, 100),
    "kappa": (_parse_float, 1.0),
    "hidden": (_parse_int_list, [100, 100]),
    "risk": (_parse_str, "mean"),
    "risk_alpha": (_parse_float, 1.0),
    "eps_start": (_parse_float, 1.0),
    "eps_end": (_parse_float, 0.02),
    "eps_fraction": (_parse_float, 0.1),
    "eval_every": (_parse_int, 1000),
    "eval_episodes": (_parse_int, 100),
    "eval_cvar_alpha": (_parse_float, 0.25),
    "final_eval_episodes": (_parse_int, 200),
    "train_mu": (_parse_float, 0.0),
    "train_sigma": (_parse_float, 0.2),
    "eval_mu": (_parse_float, 0.0),
    "eval_sigma": (_parse_float, 0.2),
    "price_csv": (_parse_str, ""),
    "price_dt": (_parse_float, 1.0),
    "split": (_parse_float, 0.5),
    "horizon": (_parse_float, 100.0),
    "discount": (_parse_float, 0.999),
    "start_price": (_parse_float, 1.0),
}

ESTIMATE_GBM_FIELDS = {
    "csv": (_parse_str, ""),
    "dt": (_parse_float, 1.0),
}

COMMAND_FIELDS = {
    "gap-rates": GAP_RATES_FIELDS,
    "superiority-demo": SUPERIORITY_FIELDS,
    "train": TRAIN_FIELDS,
    "estimate-gbm": ESTIMATE_GBM_FIELDS,
}


class ValidationFailure(Exception):
    def __init__(self, errors):
        super().__init__("; ".join(errors))
        self.errors = errors


def resolve_config(fields, config_path, set_args):
    """Defaults, then config file, then --set overrides; collects every error."""
    values = {k: default for k, (_, default) in fields.items()}
    errors = []
    raw = {}
    if config_path:
        parser = configparser.ConfigParser()
        read = parser.read(config_path)
        if not read:
            errors.append(f"config file not found: {config_path}")
        for section in parser.sections():
            if section.lower() == "meta":
                continue
            for key, val in parser.items(section):
                if key in raw:
                    errors.append(f"duplicate key across sections: {key}")
                raw[key] = val
    for item in set_args or []:
        if "=" not in item:
            errors.append(f"--set expects key=value, got {item!r}")
            continue
        key, _, val = item.partition("=")
        raw[key.strip()] = val.strip()
    for key, val in raw.items():
        if key not in fields:
            errors.append(f"unknown key: {key}")
            continue
        parse, _ = fields[key]
        try:
            values[key] = parse(val)
        except (ValueError, TypeError) as exc:
            errors.append(f"bad value for {key}: {val!r} ({exc})")
    return values, errors


def echo_config(out_dir: Path, command: str, cfg: dict):
    parser = configparser.ConfigParser()
    parser["meta"] = {"version": __version__, "command": command}
    rendered = {}
    for key, val in cfg.items():
        if isinstance(val, list):
            rendered[key] = ",".join(_fmt(v) for v in val)
        else:
            rendered[key] = _fmt(val)
    parser["config"] = rendered
    with open(out_dir / "config.resolved.cfg", "w", encoding="utf-8") as fh:
        parser.write(fh)


def _cell_seed(seed: int, *key) -> int:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1)[0])


def _build_gap_env(cfg):
    if cfg["env"] == "brownian_gap":
        return envs.brownian_gap_env(horizon=cfg["horizon"], discount=cfg["discount"])
    if cfg["env"] == "illustration":
        return envs.illustration_env(
            horizon=cfg["horizon"],
            discount=cfg["discount"],
            drift=cfg["drift"],
            move_diffusion=cfg["move_diffusion"],
        )
    raise ValidationFailure([f"unknown env: {cfg['env']!r} (choose from {ENV_NAMES})"])


def cmd_gap_rates(cfg, out_dir: Path) -> int:
    errors = []
    if cfg["env"] not in ENV_NAMES:
        errors.append(f"env must be one of {ENV_NAMES}, got {cfg['env']!r}")
    if not cfg["h_grid"]:
        errors.append("h_grid must be nonempty")
    if any(h <= 0 for h in cfg["h_grid"]):
        errors.append("h_grid entries must be positive")
    if cfg["n_paths"] < 2:
        errors.append("n_paths must be >= 2")
    if cfg["p"] not in (1, 2):
        errors.append("p must be 1 or 2")
    if errors:
        raise ValidationFailure(errors)
    mdp = _build_gap_env(cfg)
    policy = ConstantAction(cfg["base_action"])
    rows = []
    for seed in cfg["seeds"]:
        w_points, v_points = [], []
        for i, h in enumerate(sorted(cfg["h_grid"], reverse=True)):
            sim = SimConfig(
                substeps=cfg["substeps"],
                dt_floor=cfg["dt_floor"],
                tail_dt=cfg["tail_dt"],
                seed=_cell_seed(seed, 77, i),
            )
            est = estimate.action_gaps(
                mdp, policy, cfg["t"], [cfg["x"]], h, cfg["n_paths"], cfg["p"],
                sim, m=cfg["m"], bootstrap=cfg["bootstrap"],
            )
            rows.append(ResultRow("gap_rates", seed, h, "w_gap", est.dist_gap, est.dist_gap_se))
            rows.append(ResultRow("gap_rates", seed, h, "value_gap", est.value_gap, est.value_gap_se))
            w_points.append((h, est.dist_gap))
            v_points.append((h, est.value_gap))
        for name, points in (("w_gap", w_points), ("value_gap", v_points)):
            try:
                fit = estimate.fit_rate(points)
            except ValueError:
                continue
            rows.append(ResultRow("gap_rates", seed, None, f"{name}_slope", fit.slope))
            rows.append(ResultRow("gap_rates", seed, None, f"{name}_r2", fit.r_squared))
    write_results_csv(out_dir / "results.csv", rows)
    return 0


def cmd_superiority_demo(cfg, out_dir: Path) -> int:
    errors = []
    if not cfg["omega_grid"]:
        errors.append("omega_grid must be nonempty")
    if any(w <= 0 for w in cfg["omega_grid"]):
        errors.append("omega_grid entries must be positive")
    if cfg["n_paths"] < 2:
        errors.append("n_paths must be >= 2")
    if errors:
        raise ValidationFailure(errors)
    mdp = envs.illustration_env(
        horizon=cfg["horizon"],
        discount=cfg["discount"],
        drift=cfg["drift"],
        move_diffusion=cfg["move_diffusion"],
    )
    policy = ConstantAction(cfg["base_action"])
    n = cfg["n_paths"]
    rows = []
    for seed in cfg["seeds"]:
        for i, omega in enumerate(cfg["omega_grid"]):
            h = 1.0 / omega
            sim = SimConfig(
                substeps=cfg["substeps"],
                dt_floor=cfg["dt_floor"],
                tail_dt=cfg["tail_dt"],
                seed=_cell_seed(seed, 78, i),
            )
            dt = sim.resolve_dt(h)
            sim = SimConfig(dt=dt, tail_dt=cfg["tail_dt"], seed=sim.seed)
            zeta = estimate.mc_action_return_dist(
                mdp, policy, cfg["t"], [cfg["x"]], cfg["action"], h, n, sim
            )
            eta = estimate.mc_return_dist(mdp, policy, cfg["t"], [cfg["x"]], n, sim)
            psi = estimate.mc_superiority(zeta, eta, cfg["m"])
            advantage = dist_mean(psi) / h
            panels = {
                "psi_raw": psi,
                "psi_q1": rescale(psi, h, 1.0),
                "psi_qhalf": rescale(psi, h, 0.5),
            }
            panels["psi_qhalf_shifted"] = advantage_shift(
                panels["psi_qhalf"], advantage, h, 0.5
            )
            se_mean = float(
                np.sqrt(
                    np.var(zeta.samples, ddof=1) / zeta.n
                    + np.var(eta.samples, ddof=1) / eta.n
                )
            )
            scale = {"psi_raw": 1.0, "psi_q1": h**-1.0, "psi_qhalf": h**-0.5,
                     "psi_qhalf_shifted": h**-0.5}
            for name, rep in panels.items():
                mu = dist_mean(rep)
                sd = float(np.sqrt(dist_variance(rep)))
                rows.append(ResultRow("superiority_demo", seed, h, f"{name}_mean",
                                      mu, se_mean * scale[name]))
                rows.append(ResultRow("superiority_demo", seed, h, f"{name}_std",
                                      sd, sd / np.sqrt(2.0 * n)))
                if cfg["write_quantiles"]:
                    for k, v in enumerate(rep.values):
                        rows.append(ResultRow("superiority_demo", seed, h,
                                              f"{name}_q{k:04d}", float(v)))
    write_results_csv(out_dir / "results.csv", rows)
    return 0


def _gbm_params_from_cfg(cfg):
    """Train/eval GBM parameters: estimated from a price CSV split when one is
    given, otherwise taken directly from the config."""
    if cfg["price_csv"]:
        try:
            _, prices = envs.load_price_csv(cfg["price_csv"])
        except (ValueError, OSError) as exc:
            raise ValidationFailure([str(exc)]) from exc
        k = int(len(prices) * cfg["split"])
        if k < 3 or len(prices) - k < 3:
            raise ValidationFailure(
                ["price_csv split leaves fewer than 3 prices on one side"]
            )
        train_params = envs.estimate_gbm(prices[:k], cfg["price_dt"])
        eval_params = envs.estimate_gbm(prices[k:], cfg["price_dt"])
        return train_params, eval_params
    return (
        envs.GbmParams(cfg["train_mu"], cfg["train_sigma"]),
        envs.GbmParams(cfg["eval_mu"], cfg["eval_sigma"]),
    )


def build_agent(kind, cfg, h, terminal_reward, decay_steps, seed):
    risk = (
        DistortionMeasure.cvar(cfg["risk_alpha"])
        if cfg["risk"] == "cvar"
        else DistortionMeasure.expected_value()
    )
    schedule = agents.ExplorationSchedule(cfg["eps_start"], cfg["eps_end"], decay_steps)
    common = dict(
        state_dim=1,
        n_actions=2,
        h=h,
        hidden=tuple(cfg["hidden"]),
        lr=cfg["lr"],
        discount=cfg["discount"],
        horizon=cfg["horizon"],
        terminal_reward=terminal_reward,
        schedule=schedule,
        seed=seed,
    )
    if kind == "qrdqn":
        return agents.QrdqnAgent(m=cfg["m"], risk=risk, kappa=cfg["kappa"], **common)
    if kind == "dau":
        return agents.DauAgent(**common)
    if kind in ("dsup", "dau+dsup"):
        return agents.DsupAgent(
            q=cfg["q"],
            m=cfg["m"],
            risk=risk,
            kappa=cfg["kappa"],
            advantage_head=(kind == "dau+dsup"),
            **common,
        )
    raise ValidationFailure([f"unknown agent kind: {kind!r}"])


def cmd_train(cfg, out_dir: Path) -> int:
    errors = []
    if cfg["agent"] not in AGENT_KINDS:
        errors.append(f"agent must be one of {AGENT_KINDS}, got {cfg['agent']!r}")
    if not cfg["omega_grid"]:
        errors.append("omega_grid must be nonempty")
    if any(w <= 0 for w in cfg["omega_grid"]):
        errors.append("omega_grid entries must be positive")
    if cfg["updates"] < 0:
        errors.append("updates must be >= 0")
    if cfg["risk"] not in ("mean", "cvar"):
        errors.append(f"risk must be mean or cvar, got {cfg['risk']!r}")
    if cfg["risk"] == "cvar" and not 0.0 < cfg["risk_alpha"] <= 1.0:
        errors.append("risk_alpha must be in (0, 1]")
    if errors:
        raise ValidationFailure(errors)

    train_params, eval_params = _gbm_params_from_cfg(cfg)
    rows = []
    exit_code = 0
    for seed in cfg["seeds"]:
        for omega in cfg["omega_grid"]:
            h = 1.0 / omega
            tag = f"seed{seed}_omega{_fmt(float(omega))}"
            train_env = envs.OptionTradingEnv(
                train_params, horizon=cfg["horizon"],
                start_price=cfg["start_price"], discount=cfg["discount"],
            )
            eval_env = envs.OptionTradingEnv(
                eval_params, horizon=cfg["horizon"],
                start_price=cfg["start_price"], discount=cfg["discount"],
            )
            ipu = max(1, int(np.floor(1.0 / h + 1e-9)))
            decay = max(1, int(cfg["eps_fraction"] * cfg["updates"] * ipu))
            agent = build_agent(
                cfg["agent"], cfg, h, train_env.terminal_reward, decay,
                seed=_cell_seed(seed, 91),
            )
            tcfg = agents.TrainConfig(
                batch_size=cfg["batch_size"],
                buffer_capacity=cfg["buffer_capacity"],
                target_period=cfg["target_period"],
                eval_every=cfg["eval_every"],
                eval_episodes=cfg["eval_episodes"],
                eval_cvar_alpha=cfg["eval_cvar_alpha"],
                seed=_cell_seed(seed, 92),
            )
            try:
                log = agents.train(agent, train_env, cfg["updates"], tcfg)
            except agents.TrainingDiverged as exc:
                write_trainlog_csv(out_dir / f"trainlog_{tag}.csv", exc.log)
                print(f"divergence in cell {tag}: {exc}", file=sys.stderr)
                exit_code = 3
                continue
            write_trainlog_csv(out_dir / f"trainlog_{tag}.csv", log)
            save_checkpoint(out_dir / f"checkpoint_{tag}.npz", agent.named_params())

            ev_rng = substream(_cell_seed(seed, 93), 0)
            final_mean, final_cvar = agents.evaluate(
                agent, eval_env, cfg["final_eval_episodes"], ev_rng,
                cfg["eval_cvar_alpha"],
            )
            base_rng = substream(_cell_seed(seed, 94), 0)
            rand_mean, rand_cvar, _ = agents.evaluate_policy(
                eval_env,
                lambda t, X: base_rng.integers(0, 2, X.shape[0]),
                cfg["final_eval_episodes"], base_rng, h, cfg["eval_cvar_alpha"],
            )
            execute_now = cfg["discount"] ** h * max(0.0, 1.0 - cfg["start_price"])
            rows.append(ResultRow("train", seed, h, "final_eval_mean", final_mean))
            rows.append(ResultRow("train", seed, h, "final_eval_cvar", final_cvar))
            rows.append(ResultRow("train", seed, h, "random_baseline_mean", rand_mean))
            rows.append(ResultRow("train", seed, h, "execute_baseline", execute_now))
    write_results_csv(out_dir / "results.csv", rows)
    return exit_code


def cmd_estimate_gbm(cfg, out_dir: Path) -> int:
    if not cfg["csv"]:
        raise ValidationFailure(["csv path must be set"])
    try:
        _, prices = envs.load_price_csv(cfg["csv"])
        params = envs.estimate_gbm(prices, cfg["dt"])
    except (ValueError, OSError) as exc:
        raise ValidationFailure([str(exc)]) from exc
    print(f"mu={params.mu:.17g} sigma={params.sigma:.17g}")
    rows = [
        ResultRow("estimate_gbm", 0, None, "gbm_mu", params.mu),
        ResultRow("estimate_gbm", 0, None, "gbm_sigma", params.sigma),
    ]
    write_results_csv(out_dir / "results.csv", rows)
    return 0


COMMANDS = {
    "gap-rates": cmd_gap_rates,
    "superiority-demo": cmd_superiority_demo,
    "train": cmd_train,
    "estimate-gbm": cmd_estimate_gbm,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="lab", description="continuous-time distributional RL experiments"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cp = sub.add_parser(name)
        cp.add_argument("--config", default=None, help="key=value config file")
        cp.add_argument(
            "--set", action="append", default=[], metavar="KEY=VALUE",
            help="override a config key",
        )
        cp.add_argument("--out", required=True, help="output directory")
    args = parser.parse_args(argv)

    fields = COMMAND_FIELDS[args.command]
    cfg, errors = resolve_config(fields, args.config, args.set)
    if errors:
        for err in errors:
            print(f"config error: {err}", file=sys.stderr)
        return 2
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    echo_config(out_dir, args.command, cfg)
    try:
        return COMMANDS[args.command](cfg, out_dir)
    except ValidationFailure as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return 2
    except (SimulationError, agents.TrainingDiverged) as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
