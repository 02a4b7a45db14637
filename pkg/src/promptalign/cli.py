"""Command-line surface.

Exit codes: 0 success, 2 input error, 3 numerical failure. Errors are
single-line diagnostics on stderr; stdout carries only results.
"""

import argparse
import sys

import numpy as np

from .alignment import AlignConfig, token_ot_distance
from .classifier import ClassBank, classify
from .io_formats import (format_float, parse_run_config, read_csv_matrix,
                         read_embeddings, write_csv_matrix, write_params_csv)
from .ot import DiscreteMeasure, SinkhornDivergence, SinkhornSettings, sinkhorn
from .trainer import ablate_beta, generate_task, init_params, train

__all__ = ["main"]


def _add_sinkhorn_flags(p, lam=0.1):
    p.add_argument("--lambda", dest="lam", type=float, default=lam,
                   help="entropic regularization weight (default %(default)s)")
    p.add_argument("--max-iter", type=int, default=100,
                   help="Sinkhorn iteration cap (default %(default)s)")
    p.add_argument("--tol", type=float, default=1e-9,
                   help="L1 marginal violation tolerance (default %(default)s)")


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="promptalign",
        description="Hierarchical optimal-transport prompt alignment toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sinkhorn", help="solve one entropic OT problem from CSV inputs")
    p.add_argument("cost_csv")
    p.add_argument("a_csv")
    p.add_argument("b_csv")
    _add_sinkhorn_flags(p)
    p.add_argument("--plan-out", default="plan.csv", help="transport plan output path")

    p = sub.add_parser("classify", help="classify embedded images against a class bank")
    p.add_argument("images_emb")
    p.add_argument("classes_emb")
    p.add_argument("--tau", type=float, default=0.01)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--cost-mode", choices=("additive", "convex"), default="additive")
    _add_sinkhorn_flags(p)
    p.add_argument("--labels", help="CSV of true class indices, one per image")

    p = sub.add_parser("train-toy", help="train prompt vectors on a synthetic task")
    p.add_argument("config")
    p.add_argument("--history-out", default="history.csv")
    p.add_argument("--params-out", default="params.csv")

    p = sub.add_parser("plan-export", help="export one token-level transport plan as CSV")
    p.add_argument("images_emb")
    p.add_argument("classes_emb")
    p.add_argument("--image", type=int, required=True, help="image index")
    p.add_argument("--class", dest="class_index", type=int, required=True,
                   help="class index")
    p.add_argument("--prompt-pair", default="0,0",
                   help="visual,textual prompt indices (default %(default)s)")
    _add_sinkhorn_flags(p)
    p.add_argument("--out", help="output CSV path (default: stdout)")

    p = sub.add_parser("ablate", help="train across a beta grid in convex cost mode")
    p.add_argument("config")
    p.add_argument("--betas", default="0,0.2,0.5,0.7,1.0",
                   help="comma-separated beta grid (default %(default)s)")
    p.add_argument("--out", help="output CSV path (default: stdout)")

    return parser


def _settings(args) -> SinkhornSettings:
    return SinkhornSettings(lam=args.lam, max_iterations=args.max_iter, tolerance=args.tol)


def _cmd_sinkhorn(args) -> int:
    cost = read_csv_matrix(args.cost_csv)
    a = DiscreteMeasure(read_csv_matrix(args.a_csv).ravel())
    b = DiscreteMeasure(read_csv_matrix(args.b_csv).ravel())
    res = sinkhorn(a, b, cost, _settings(args))
    write_csv_matrix(args.plan_out, res.plan.matrix)
    print(f"cost={format_float(res.transport_cost)}")
    return 0


def _load_pair(args):
    images, img_side = read_embeddings(args.images_emb)
    classes, cls_side = read_embeddings(args.classes_emb)
    if images[0].dim != classes[0].dim:
        raise ValueError(
            f"dimension mismatch between files: {images[0].dim} vs {classes[0].dim}")
    return images, classes


def _cmd_classify(args) -> int:
    images, classes = _load_pair(args)
    cfg = AlignConfig(beta=args.beta, tau=args.tau, cost_mode=args.cost_mode,
                      sinkhorn=_settings(args))
    bank = ClassBank(tuple(classes), tuple(str(k) for k in range(len(classes))))

    labels = None
    if args.labels is not None:
        labels = [int(v) for v in read_csv_matrix(args.labels).ravel()]
        if len(labels) != len(images):
            raise ValueError(
                f"labels file has {len(labels)} entries for {len(images)} images")
        if any(not 0 <= v < len(classes) for v in labels):
            raise ValueError("label index out of range")

    k = len(classes)
    print("image_index,predicted_class," + ",".join(f"p_{i}" for i in range(k)))
    hits = 0
    for i, image in enumerate(images):
        pred = classify(image, bank, cfg)
        probs = ",".join(format_float(v) for v in pred.probabilities)
        print(f"{i},{pred.argmax},{probs}")
        if labels is not None and pred.argmax == labels[i]:
            hits += 1
    if labels is not None:
        print(f"accuracy={format_float(hits / len(images))}")
    return 0


def _cmd_train_toy(args) -> int:
    task_spec, cfg = parse_run_config(args.config)
    task = generate_task(task_spec)
    params = init_params(cfg.m, cfg.n, cfg.b, task_spec.d_in, cfg.seed)
    trained, history = train(task, params, cfg)
    with open(args.history_out, "w") as fh:
        fh.write("epoch,loss,test_accuracy\n")
        for s in history:
            fh.write(f"{s.epoch},{format_float(s.loss)},{format_float(s.test_accuracy)}\n")
    write_params_csv(args.params_out, trained)
    print(f"final_accuracy={format_float(history[-1].test_accuracy)}")
    return 0


def _cmd_plan_export(args) -> int:
    images, classes = _load_pair(args)
    try:
        m_str, n_str = args.prompt_pair.split(",")
        m, n = int(m_str), int(n_str)
    except ValueError:
        raise ValueError(f"--prompt-pair must be 'm,n', got {args.prompt_pair!r}")
    if not 0 <= args.image < len(images):
        raise ValueError(f"image index {args.image} out of range [0, {len(images)})")
    if not 0 <= args.class_index < len(classes):
        raise ValueError(f"class index {args.class_index} out of range [0, {len(classes)})")
    image = images[args.image]
    class_ = classes[args.class_index]
    if not 0 <= m < len(image):
        raise ValueError(f"visual prompt index {m} out of range [0, {len(image)})")
    if not 0 <= n < len(class_):
        raise ValueError(f"textual prompt index {n} out of range [0, {len(class_)})")
    cfg = AlignConfig(sinkhorn=_settings(args))
    _, plan = token_ot_distance(image.prompts[m], class_.prompts[n], cfg)
    write_csv_matrix(args.out if args.out else sys.stdout, plan.matrix)
    return 0


def _cmd_ablate(args) -> int:
    task_spec, cfg = parse_run_config(args.config)
    try:
        grid = [float(v) for v in args.betas.split(",") if v.strip()]
    except ValueError:
        raise ValueError(f"--betas must be comma-separated numbers, got {args.betas!r}")
    if not grid:
        raise ValueError("--betas grid is empty")
    task = generate_task(task_spec)
    rows = ablate_beta(task, grid, cfg)
    lines = ["beta,accuracy"] + [f"{format_float(b)},{format_float(a)}" for b, a in rows]
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


_COMMANDS = {
    "sinkhorn": _cmd_sinkhorn,
    "classify": _cmd_classify,
    "train-toy": _cmd_train_toy,
    "plan-export": _cmd_plan_export,
    "ablate": _cmd_ablate,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except SinkhornDivergence as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
