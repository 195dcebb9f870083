"""Command-line entry point: gen / train / eval / bench / verify.

Configuration comes from a JSON file whose keys mirror GenConfig plus the
training and network blocks; command-line flags override file keys. Relative
data/model paths resolve against $SLPKIT_DATA_ROOT when it is set.
"""

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import checks, evaluate
from .autodiff import load_checkpoint, save_checkpoint
from .channel import make_aging_model, sample_rayleigh
from .datasets import GenConfig, gen_dataset, load_dataset, train_test_split
from .errors import SlpkitError
from .modulation import build_constellation, cir_coefficients, symbols_from_indices
from .network import (
    PerturbationNet,
    TrainConfig,
    fit,
    learned_precode_batch,
    zero_predictor_loss,
)
from .precoding import cizf_optimal
from .robust import ScalingNet, build_scaling_inputs, robust_features


def _resolve(path):
    if path is None:
        return None
    root = os.environ.get("SLPKIT_DATA_ROOT")
    p = Path(path)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def load_config(path):
    with open(_resolve(path)) as fh:
        return json.load(fh)


def _gen_config(cfg):
    mod = cfg.get("modulation", {"kind": "psk", "order": 4})
    keys = dict(
        scenario=cfg.get("scenario", "cizf"),
        k=cfg.get("k", 4),
        n_tx=cfg.get("n_tx", 4),
        n_sym=cfg.get("n_sym", 16),
        mod_kind=mod["kind"],
        mod_order=mod["order"],
        p_t=cfg.get("p_t", 1.0),
        snr_grid_db=cfg.get("snr_grid_db", [0, 5, 10, 15, 20, 25, 30]),
        n_train=cfg.get("n_train", 2000),
        n_test=cfg.get("n_test", 500),
        seed=cfg["seed"],
        alpha=cfg.get("alpha", 0.98),
        fine_factor=cfg.get("fine_factor", 1),
        m_density=cfg.get("m_density", 0.25),
    )
    return GenConfig(**keys)


def save_net(path, net, kind, **meta):
    arrays = {f"config.{k}": np.array([float(v)]) for k, v in meta.items()}
    arrays["config.kind"] = np.array([0.0 if kind == "perturbation" else 1.0])
    arrays.update(net.state_dict())
    save_checkpoint(path, arrays)


def load_net(path):
    arrays = load_checkpoint(_resolve(path))
    meta = {k.split(".", 1)[1]: v.item() for k, v in arrays.items() if k.startswith("config.")}
    state = {k: v for k, v in arrays.items() if not k.startswith("config.")}
    if meta["kind"] == 0.0:
        net = PerturbationNet(width=int(meta["width"]), depth=int(meta["depth"]))
    else:
        net = ScalingNet(
            width=int(meta["width"]),
            depth3d=int(meta["depth3d"]),
            depth2d=int(meta["depth2d"]),
        )
    net.load_state_dict(state)
    return net.eval_mode()


def _train_cfg(cfg, out_dir, log_name):
    tr = cfg.get("training", {})
    return TrainConfig(
        epochs=tr.get("epochs", 200),
        batch_size=tr.get("batch_size", 100),
        lr_first=tr.get("lr_first", 5e-3),
        lr_second=tr.get("lr_second", 5e-4),
        seed=cfg["seed"],
        log_path=str(out_dir / log_name),
    )


def cmd_gen(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    workers = 1 if args.deterministic else args.workers
    manifest = gen_dataset(_gen_config(cfg), _resolve(args.out), workers=workers)
    print(f"wrote {manifest['n_samples']} samples to {args.out} "
          f"({len(manifest['skipped'])} skipped)")
    return 0


def cmd_train(args):
    cfg = load_config(args.config)
    out_dir = _resolve(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest, arrays = load_dataset(_resolve(args.data))
    train, test = train_test_split(manifest, arrays)
    net_cfg = cfg.get("network", {})
    if manifest["scenario"] in ("cizf", "cimmse"):
        net = PerturbationNet(
            width=net_cfg.get("width", 4), depth=net_cfg.get("depth", 4),
            seed=cfg["seed"],
        )
        result = fit(
            net,
            (train["bias"], train["coef"]), train["delta"],
            (test["bias"], test["coef"]), test["delta"],
            _train_cfg(cfg, out_dir, "train_log.csv"),
        )
        save_net(out_dir / "model.ckpt", net, "perturbation",
                 width=net_cfg.get("width", 4), depth=net_cfg.get("depth", 4))
        base = zero_predictor_loss(test["delta"])
        print(f"final test loss {result.final_test_loss:.6g} "
              f"(zero predictor {base:.6g})")
    else:
        _train_robust(cfg, manifest, arrays, out_dir)
    return 0


def _train_robust(cfg, manifest, arrays, out_dir):
    const = build_constellation(manifest["mod_kind"], manifest["mod_order"])
    p_t = manifest["p_t"]
    v_t = arrays["v_t"]
    n = arrays["h"].shape[0]
    sigma2 = p_t / 10.0 ** (arrays["snr_db"] / 10.0)
    xs = np.stack([
        build_scaling_inputs(
            arrays["h"][i], arrays["m"][i], v_t, arrays["alpha"][i],
            symbols_from_indices(const, arrays["s_idx"][i]), sigma2[i],
        )
        for i in range(n)
    ])
    n_train = manifest["n_train_samples"]
    net_a_cfg = cfg.get("scaling_network", {})
    net_a = ScalingNet(
        width=net_a_cfg.get("width", 16),
        depth3d=net_a_cfg.get("depth3d", 2),
        depth2d=net_a_cfg.get("depth2d", 2),
        seed=cfg["seed"],
    )
    result_a = fit(
        net_a, (xs[:n_train],), arrays["psi"][:n_train],
        (xs[n_train:],), arrays["psi"][n_train:],
        _train_cfg(cfg, out_dir, "train_log_scaling.csv"),
    )
    save_net(out_dir / "scaling.ckpt", net_a, "scaling",
             width=net_a_cfg.get("width", 16),
             depth3d=net_a_cfg.get("depth3d", 2),
             depth2d=net_a_cfg.get("depth2d", 2))
    print(f"scaling net test loss {result_a.final_test_loss:.6g}")

    # stage 2: features built from stage-1 estimates, labels from the oracle
    bias_list, coef_list = [], []
    from .channel import effective_matrices

    for i in range(n):
        s_c = symbols_from_indices(const, arrays["s_idx"][i])
        cir = cir_coefficients(const, arrays["s_idx"][i])
        alpha = arrays["alpha"][i]
        hbar = alpha.T[:, :, None] * arrays["h"][i][None]
        beta = np.sqrt(1.0 - alpha**2)
        e_stack = np.stack([
            effective_matrices(arrays["m"][i][k], v_t)[1]
            for k in range(manifest["k"])
        ])
        psi_hat = net_a.predict(xs[i])
        feats = robust_features(hbar, e_stack, beta, psi_hat, s_c, cir, sigma2[i], p_t)
        bias_list.append(feats.bias)
        coef_list.append(feats.coef)
    bias = np.stack(bias_list)
    coef = np.stack(coef_list)
    net_b_cfg = cfg.get("network", {})
    net_b = PerturbationNet(
        width=net_b_cfg.get("width", 16), depth=net_b_cfg.get("depth", 2),
        seed=cfg["seed"] + 1,
    )
    result_b = fit(
        net_b, (bias[:n_train], coef[:n_train]), arrays["delta"][:n_train],
        (bias[n_train:], coef[n_train:]), arrays["delta"][n_train:],
        _train_cfg(cfg, out_dir, "train_log_perturb.csv"),
    )
    save_net(out_dir / "perturb.ckpt", net_b, "perturbation",
             width=net_b_cfg.get("width", 16), depth=net_b_cfg.get("depth", 2))
    print(f"perturbation net test loss {result_b.final_test_loss:.6g}")


def _parse_grid(text):
    start, step, stop = (float(v) for v in text.split(":"))
    return list(np.arange(start, stop + step / 2, step))


def cmd_eval(args):
    cfg = load_config(args.config)
    const = build_constellation(
        cfg.get("modulation", {"kind": "psk", "order": 4})["kind"],
        cfg.get("modulation", {"kind": "psk", "order": 4})["order"],
    )
    p_t = cfg.get("p_t", 1.0)
    k, n_tx, n_sym = cfg.get("k", 4), cfg.get("n_tx", 4), cfg.get("n_sym", 16)
    grid = _parse_grid(args.snr) if args.snr else cfg.get("snr_grid_db", [0, 10, 20, 30])
    names = args.scheme.split(",")
    nets = {}
    if args.model:
        nets["model"] = load_net(args.model)
    if args.model_b:
        nets["model_b"] = load_net(args.model_b)
    scenario = cfg.get("scenario", "cizf")
    if args.metric == "power":
        shapers = {}
        for name in names:
            shapers[name] = _make_shaper(name, const, p_t, nets.get("model"))
        rows = evaluate.eval_power_vs_sinr(
            shapers, k, n_tx, n_sym, const, p_t, grid, args.channels, cfg["seed"]
        )
    elif scenario == "robust":
        schemes = {
            name: evaluate.make_robust_scheme(
                name, const, p_t,
                scaling_net=nets.get("model"), perturbation_net=nets.get("model_b"),
            )
            for name in names
        }
        rows = evaluate.eval_ser_aging(
            schemes, k, n_tx, n_sym, const, p_t, grid, args.channels, cfg["seed"],
            cfg.get("alpha", 0.98), cfg.get("fine_factor", 1), cfg.get("m_density", 0.25),
        )
    else:
        schemes = {
            name: evaluate.make_static_scheme(name, const, p_t, net=nets.get("model"))
            for name in names
        }
        rows = evaluate.eval_ser(
            schemes, k, n_tx, n_sym, const, p_t, grid, args.channels, cfg["seed"]
        )
    evaluate.write_curves(_resolve(args.out), rows)
    print(f"wrote {len(rows)} curve points to {args.out}")
    return 0


def _make_shaper(name, const, p_t, net):
    if name == "zf":
        return lambda h, s: symbols_from_indices(const, s)
    if name == "cizf":
        return lambda h, s: cizf_optimal(h, s, const, p_t)[2]
    if name == "cizf-dl":
        from .network import learned_block_precode

        return lambda h, s: learned_block_precode(h, s, const, p_t, net, "zf")[2]
    raise ValueError(f"power sweep supports zf/cizf/cizf-dl, got {name!r}")


def cmd_bench(args):
    cfg = load_config(args.config)
    const = build_constellation(
        cfg.get("modulation", {"kind": "psk", "order": 4})["kind"],
        cfg.get("modulation", {"kind": "psk", "order": 4})["order"],
    )
    p_t = cfg.get("p_t", 1.0)
    k, n_tx, n_sym = cfg.get("k", 12), cfg.get("n_tx", 14), cfg.get("n_sym", 100)
    rng = np.random.default_rng(cfg["seed"])
    channels = [sample_rayleigh(k, n_tx, rng) for _ in range(args.channels)]
    symbols = [rng.integers(0, const.size, size=(k, n_sym)) for _ in range(args.channels)]
    net = load_net(args.model) if args.model else PerturbationNet(
        width=cfg.get("network", {}).get("width", 4),
        depth=cfg.get("network", {}).get("depth", 4),
        seed=cfg["seed"],
    ).eval_mode()
    names = args.schemes.split(",")
    callables = {}
    for name in names:
        if name == "cizf":
            callables[name] = lambda: [
                cizf_optimal(h, s, const, p_t) for h, s in zip(channels, symbols)
            ]
        elif name == "cizf-dl":
            callables[name] = lambda: learned_precode_batch(
                channels, symbols, const, p_t, net, "zf"
            )
        elif name == "zf":
            from .precoding import lp_zf

            callables[name] = lambda: [
                lp_zf(h, s, const, p_t) for h, s in zip(channels, symbols)
            ]
        else:
            raise ValueError(f"bench supports zf/cizf/cizf-dl, got {name!r}")
    totals = evaluate.bench_runtime(callables, n_symbols=args.channels * n_sym, reps=args.reps)
    out = _resolve(args.out)
    with open(out, "w") as fh:
        fh.write("scheme,per_symbol_s\n")
        for name, sec in totals.items():
            fh.write(f"{name},{sec:.6g}\n")
            print(f"{name:10s} {sec * 1e6:10.2f} us/symbol")
    if "cizf" in totals and "cizf-dl" in totals:
        print(f"speedup: {totals['cizf'] / totals['cizf-dl']:.1f}x")
    return 0


def cmd_verify(args):
    names = list(checks.SUITES) if args.suite == "all" else [args.suite]
    results = checks.run_suites(names)
    failed = [r for r in results if not r.passed]
    for r in results:
        tag = "ok " if r.passed else "FAIL"
        print(f"[{tag}] {r.name:40s} metric {r.metric:.3e} (tol {r.tol:.1e})")
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def build_parser():
    parser = argparse.ArgumentParser(prog="slpkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a labelled dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    p.add_argument("--deterministic", action="store_true",
                   help="force single-threaded generation")
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="train networks on a dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate schemes, write curve CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--scheme", required=True, help="comma-separated scheme names")
    p.add_argument("--out", required=True)
    p.add_argument("--model", default=None)
    p.add_argument("--model-b", dest="model_b", default=None)
    p.add_argument("--snr", default=None, help="grid as start:step:stop (dB)")
    p.add_argument("--channels", type=int, default=200)
    p.add_argument("--metric", choices=["ser", "power"], default="ser")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="wall-clock benchmark")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--schemes", default="cizf,cizf-dl")
    p.add_argument("--model", default=None)
    p.add_argument("--channels", type=int, default=4)
    p.add_argument("--reps", type=int, default=20)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("verify", help="run property suites")
    p.add_argument("--suite", default="all",
                   choices=["all", *checks.SUITES])
    p.set_defaults(fn=cmd_verify)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (SlpkitError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main_entry():
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
