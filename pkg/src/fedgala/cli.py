"""
cli.py

命令行入口::

    fedgala run    --config desk.cfg --out out/       # 单次协议 + 线性探测
    fedgala lodo   --config desk.cfg --out out/       # 留一域
    fedgala theory --out out/                         # 所有理论检查
    fedgala sweep  --config sweep.cfg --out out/      # 超参数扫描

所有输出都是 UTF-8、LF 换行, 实数 17 位有效数字; 每个输出目录都带一份
``resolved.cfg`` (包括默认值在内的完整配置)。
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from collections.abc import Sequence
from dataclasses import dataclass
from logging import getLogger
from pathlib import Path
from typing import Any

import numpy as np

from fedgala.config import ExperimentConfig, load_config
from fedgala.core import RoundRecord, build_family, rounds_rows, run_protocol
from fedgala.debug import CheckpointDumper
from fedgala.errors import FedGaLAError
from fedgala.evaluation import (
    PROBE_HEADER,
    ProbeResult,
    leave_one_domain_out,
    probe_all_fractions,
    round_prober,
)
from fedgala.logging import setup_logging
from fedgala.params import LayeredParams
from fedgala.theory.claims import (
    claim1_sign_check,
    constructed_discard_example,
    identity_sign_check,
    proposition1_check,
    proposition1_monte_carlo,
    sign_check_over_augmentations,
)
from fedgala.theory.covariance import lemma1_vs_estimator, linear_taylor_check
from fedgala.theory.trends import (
    TrendProtocol,
    collect_trend_points,
    corollary1_check,
    theorem1_experiment,
)
from fedgala.utils.io import write_csv, write_domain_family
from fedgala.utils.rng import RngStream

logger = getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 2

SWEEP_KEYS = {
    "tau": "protocol.tau",
    "local_epochs": "protocol.local_epochs",
    "agg_iterations": "protocol.agg_iterations",
    "batch_size": "protocol.batch_size",
}


# --------------------------------------------------------------------------
# 单次实验
# --------------------------------------------------------------------------


@dataclass
class RunResult:
    final: LayeredParams
    records: list[RoundRecord]
    probes: list[ProbeResult]


def run_experiment(
    config: ExperimentConfig,
    *,
    dumper: CheckpointDumper | None = None,
) -> RunResult:
    """在 ``data.target`` 之外的域上跑协议, 再在目标域上探测。"""
    specs, family = build_family(config)
    target = config.target_domain
    rule = specs[target].label_rule
    assert rule is not None
    train = [s for s in family if s.domain_id != target]
    final, records = run_protocol(
        config,
        train_domains=train,
        dumper=dumper,
        on_round=round_prober(config, family[target], rule),
    )
    probes = probe_all_fractions(config, final, family[target], rule)
    return RunResult(final, records, probes)


def mean_discard_ratio(records: Sequence[RoundRecord]) -> float:
    return float(np.mean([r.discard_ratio for r in records])) if records else 0.0


# --------------------------------------------------------------------------
# 扫描
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FrequencyRow:
    local_epochs: int
    rounds: int
    seed: int
    labeled_fraction: float
    accuracy: float


def communication_frequency_sweep(
    config: ExperimentConfig,
    total_local_epochs: int,
    e_values: Sequence[int],
    seeds: int = 1,
) -> list[FrequencyRow]:
    """总本地 epoch 数固定, 每 E 个 epoch 聚合一次 (T = total // E)。"""
    rows: list[FrequencyRow] = []
    for e in e_values:
        e = int(e)
        if e < 1:
            raise ValueError(f"local epochs must be >= 1, got {e}")
        rounds, remainder = divmod(total_local_epochs, e)
        if remainder:
            logger.warning(
                f"total {total_local_epochs} epochs not divisible by E={e}, "
                f"running T={rounds} ({remainder} epochs dropped)"
            )
        for s in range(seeds):
            seed = config.run.seed + s
            cfg = config.updated(
                {"protocol.local_epochs": e, "protocol.rounds": rounds, "run.seed": seed}
            )
            result = run_experiment(cfg)
            logger.info(f"comm frequency E={e} T={rounds} seed={seed}: {len(result.records)} rounds")
            rows.extend(
                FrequencyRow(e, rounds, seed, p.labeled_fraction, p.accuracy)
                for p in result.probes
            )
    return rows


def parameter_sweep(config: ExperimentConfig) -> tuple[list[str], list[list[object]]]:
    sweep = config.sweep
    if sweep.parameter == "comm_frequency":
        freq = communication_frequency_sweep(
            config, sweep.total_local_epochs, [int(v) for v in sweep.values], sweep.seeds
        )
        header = ["local_epochs", "rounds", "seed", "labeled_fraction", "accuracy"]
        return header, [
            [r.local_epochs, r.rounds, r.seed, r.labeled_fraction, r.accuracy] for r in freq
        ]

    key = SWEEP_KEYS[sweep.parameter]
    header = ["parameter", "value", "seed", "mean_discard_ratio", "labeled_fraction", "accuracy"]
    rows: list[list[object]] = []
    for value in sweep.values:
        typed: float | int = value if sweep.parameter == "tau" else int(value)
        for s in range(sweep.seeds):
            seed = config.run.seed + s
            result = run_experiment(config.updated({key: typed, "run.seed": seed}))
            ratio = mean_discard_ratio(result.records)
            logger.info(f"sweep {sweep.parameter}={typed} seed={seed}: discard={ratio:.4f}")
            rows.extend(
                [sweep.parameter, typed, seed, ratio, p.labeled_fraction, p.accuracy]
                for p in result.probes
            )
    return header, rows


# --------------------------------------------------------------------------
# 理论检查
# --------------------------------------------------------------------------


def _verdict(passed: bool, statistic: float, threshold: float) -> dict[str, Any]:
    return {
        "verdict": "pass" if passed else "fail",
        "statistic": statistic if math.isfinite(statistic) else None,
        "threshold": threshold,
    }


def run_theory_suite(config: ExperimentConfig, out_dir: Path) -> dict[str, dict[str, Any]]:
    """跑全部理论检查, 每项写一个 CSV, 返回判定结果。"""
    th = config.theory
    rng = RngStream(config.run.seed).child("theory")
    features = config.data.features
    verdicts: dict[str, dict[str, Any]] = {}

    # ---------- 互信息估计 ----------
    mi = lemma1_vs_estimator(rng.child("mi"), th.grid, (1, 4), th.lemma_samples)
    write_csv(
        out_dir / "mutual_information.csv",
        ["features", "cov", "closed_form", "empirical", "abs_error"],
        [[f, c, cl, em, abs(cl - em)] for f, c, cl, em in mi.rows],
    )
    verdicts["mutual_information"] = _verdict(mi.max_abs_error <= 0.02, mi.max_abs_error, 0.02)

    # ---------- 线性 g 的 Taylor 近似 ----------
    taylor = linear_taylor_check(rng.child("taylor"), [0.3, 0.6, 0.9], m=th.taylor_samples)
    d = taylor.estimate.shape[0]
    write_csv(
        out_dir / "taylor_linear.csv",
        ["m", "n", "estimate", "empirical"],
        [[i, j, taylor.estimate[i, j], taylor.empirical[i, j]] for i in range(d) for j in range(d)],
    )
    verdicts["taylor_linear"] = _verdict(
        taylor.relative_error <= 0.02, taylor.relative_error, 0.02
    )

    # ---------- 梯度协方差趋势 ----------
    protocol = TrendProtocol(
        features=features,
        samples=th.samples,
        seeds=th.seeds,
        local_steps=th.local_steps,
        learning_rate=th.learning_rate,
        summary=th.summary,
        jobs=config.run.jobs,
    )
    trend_rng = rng.child("trend")
    points = collect_trend_points(th.grid, trend_rng, protocol)
    trend = theorem1_experiment(th.grid, trend_rng, points=points)
    corollary = corollary1_check(th.grid, trend_rng, points=points)
    write_csv(
        out_dir / "grad_cov_trend.csv",
        ["domain_cov", "grad_cov_summary", "mi"],
        [[p.domain_cov, p.grad_cov_summary, p.mi] for p in points],
    )
    write_csv(
        out_dir / "grad_diff_variance.csv",
        ["domain_cov", "mi", "var_diff", "predicted_var_diff"],
        [[p.domain_cov, p.mi, p.var_diff, p.predicted_var_diff] for p in points],
    )
    verdicts["grad_cov_trend"] = _verdict(trend.spearman_rho >= 0.8, trend.spearman_rho, 0.8)
    verdicts["grad_diff_variance"] = _verdict(
        corollary.spearman_rho <= -0.8, corollary.spearman_rho, -0.8
    )

    # ---------- 丢弃 ----------
    mc = proposition1_monte_carlo(rng.child("discard"), th.prop1_trials)
    constructed = proposition1_check(*constructed_discard_example())
    write_csv(
        out_dir / "discard.csv",
        ["check", "trials", "holds", "skipped", "before", "after"],
        [
            ["monte_carlo", mc.trials, mc.holds, mc.skipped, "", ""],
            ["constructed", 1, int(constructed.holds), 0, constructed.before, constructed.after],
        ],
    )
    verdicts["discard_monte_carlo"] = _verdict(mc.holds_rate >= 0.95, mc.holds_rate, 0.95)
    verdicts["discard_constructed"] = _verdict(
        constructed.holds, constructed.after - constructed.before, 0.0
    )

    # ---------- 符号 ----------
    positive = sign_check_over_augmentations(
        rng.child("sign"), th.claim_augmentations, features
    )
    negative = claim1_sign_check(
        "ssl_negative", rng.child("sign_negative"), features=features, negatives=th.claim_negatives
    )
    supervised = claim1_sign_check("supervised_logistic", rng.child("sign_supervised"), features=features)
    identity = identity_sign_check(features)
    sign_rows: list[list[object]] = [
        ["ssl_positive", k, r.fraction, r.degenerate] for k, r in enumerate(positive)
    ]
    sign_rows += [
        ["ssl_negative", 0, negative.fraction, negative.degenerate],
        ["supervised_logistic", 0, supervised.fraction, supervised.degenerate],
        ["ssl_positive_identity", 0, identity.fraction, identity.degenerate],
    ]
    write_csv(out_dir / "sign_checks.csv", ["mode", "trial", "fraction", "degenerate"], sign_rows)
    min_positive = min(r.fraction for r in positive)
    verdicts["sign_ssl_positive"] = _verdict(min_positive == 1.0, min_positive, 1.0)
    verdicts["sign_ssl_negative"] = _verdict(negative.fraction == 1.0, negative.fraction, 1.0)
    verdicts["sign_supervised"] = _verdict(supervised.fraction == 1.0, supervised.fraction, 1.0)

    for name, v in verdicts.items():
        logger.info(f"{name}: {v['verdict']} (statistic={v['statistic']}, threshold={v['threshold']})")
    return verdicts


# --------------------------------------------------------------------------
# 子命令
# --------------------------------------------------------------------------


def _write_resolved(out: Path, config: ExperimentConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "resolved.cfg", "w", encoding="utf-8", newline="\n") as fp:
        fp.write(config.dumps())


def _write_probes(out: Path, probes: Sequence[ProbeResult]) -> None:
    write_csv(out / "probe.csv", PROBE_HEADER, [p.row() for p in probes])


def cmd_run(config: ExperimentConfig, out: Path, args: argparse.Namespace) -> None:
    if args.dump_domains:
        _, family = build_family(config)
        write_domain_family(out / "domains.csv", family)
    result = run_experiment(config, dumper=CheckpointDumper(args.checkpoints))
    header, rows = rounds_rows(result.records)
    write_csv(out / "rounds.csv", header, rows)
    _write_probes(out, result.probes)


def cmd_lodo(config: ExperimentConfig, out: Path, args: argparse.Namespace) -> None:
    _write_probes(out, leave_one_domain_out(config))


def cmd_theory(config: ExperimentConfig, out: Path, args: argparse.Namespace) -> None:
    verdicts = run_theory_suite(config, out / "theory")
    with open(out / "verdicts.json", "w", encoding="utf-8", newline="\n") as fp:
        json.dump(verdicts, fp, indent=2, sort_keys=True)
        fp.write("\n")


def cmd_sweep(config: ExperimentConfig, out: Path, args: argparse.Namespace) -> None:
    header, rows = parameter_sweep(config)
    write_csv(out / "sweep.csv", header, rows)


COMMANDS = {
    "run": cmd_run,
    "lodo": cmd_lodo,
    "theory": cmd_theory,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedgala",
        description="federated unsupervised domain generalization simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "run": "run the protocol once and probe the held-out domain",
        "lodo": "leave-one-domain-out over every domain",
        "theory": "run all theory checks and write verdicts",
        "sweep": "sweep one protocol parameter",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", type=Path, default=None, help="flat key = value config file")
        p.add_argument("--seed", type=int, default=None, help="override run.seed")
        p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        p.add_argument("--jobs", type=int, default=None, help="override run.jobs")
        p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
        if name == "run":
            p.add_argument("--checkpoints", type=Path, default=None, help="dump params per round")
            p.add_argument("--dump-domains", action="store_true", help="write domains.csv")
    return parser


def cli_main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(logging.DEBUG if args.verbose else logging.INFO)
    try:
        config = load_config(args.config)
        overrides: dict[str, Any] = {}
        if args.seed is not None:
            overrides["run.seed"] = args.seed
        if args.jobs is not None:
            overrides["run.jobs"] = args.jobs
        if overrides:
            config = config.updated(overrides)
        out: Path = args.out
        _write_resolved(out, config)
        COMMANDS[args.command](config, out, args)
    except FileNotFoundError as e:
        print(f"fedgala: file not found: {e.filename}", file=sys.stderr)
        return EXIT_ERROR
    except FedGaLAError as e:
        print(f"fedgala: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_ERROR
    logger.info(f"{args.command} done, outputs in {out}")
    return EXIT_OK


def main() -> None:
    sys.exit(cli_main())
