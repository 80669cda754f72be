"""Command line entry point: ``sfrefine {gen,init,refine,train,eval}``.

A dataset directory holds one clip per sub-directory (``000/``, ``001/``, ...);
every path option that takes a clip also accepts a whole dataset directory.
All commands are deterministic given their flags, config file and seed.
``SFREFINE_THREADS`` caps the OpenCV worker pool.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from sfrefine import io
from sfrefine.initializer import init_state
from sfrefine.metrics import mean_rows, outlier_rates, report_row, trajectory_report, write_csv
from sfrefine.refiner import (TrainingExample, descent_iterate, init_params, refine_iterate,
                              train_refiner)
from sfrefine.synth import SceneRanges, make_dataset

log = logging.getLogger("sfrefine")


def _is_clip_dir(path: Path) -> bool:
    return any((path / f"l1{ext}").exists() for ext in (".pfm", ".png"))


def _clips(path, first=0, limit=None) -> list:
    """``[(name, dir)]``; ``name`` is None when ``path`` is itself a single clip."""
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"{root}: no such directory")
    if _is_clip_dir(root):
        return [(None, root)]
    found = [(p.name, p) for p in sorted(root.iterdir()) if p.is_dir() and _is_clip_dir(p)]
    sel = found[first:] if limit is None else found[first:first + limit]
    if not sel:
        raise ValueError(f"{root}: no clips selected")
    return sel


def _sub(base, name) -> Path:
    return Path(base) if name is None else Path(base) / name


def _parse_size(text: str):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 96x128, got {text!r}") from None
    if h < 8 or w < 8:
        raise argparse.ArgumentTypeError("size must be at least 8x8")
    return h, w


def cmd_gen(args, cfg):
    h, w = args.size
    ranges = SceneRanges(height=h, width=w, channels=args.channels, noise=args.noise)
    out = Path(args.out_dir)
    samples = make_dataset(args.count, ranges, seed=args.seed)
    for i, s in enumerate(samples):
        io.save_sample(out / f"{i:03d}", s)
    log.info("wrote %d clips to %s", len(samples), out)


def cmd_init(args, cfg):
    if args.mode == "external" and not args.external:
        raise ValueError("--mode external needs --external DIR")
    if len(args.clip) == 4:
        from sfrefine.fields import StereoClip

        for p in args.clip:
            if not Path(p).is_file():
                raise FileNotFoundError(f"{p}: no such file")
        if args.mode == "gt":
            raise ValueError("--mode gt needs a sample directory with ground truth")
        clips = [(None, StereoClip(*(io.read_image(p) for p in args.clip)), None)]
    elif len(args.clip) == 1:
        clips = []
        for name, d in _clips(args.clip[0], args.first, args.limit):
            clip, gt = io.load_clip(d), None
            if args.mode == "gt":
                if not io.has_ground_truth(d):
                    raise ValueError(f"{d}: --mode gt needs ground truth")
                gt = io.load_ground_truth(d)[0]
                clip = clip.with_backward_flow(io.read_flo(d / "gt_flow_bwd.flo"))
            clips.append((name, clip, gt))
    else:
        raise ValueError("--clip takes one directory or four images (L1 R1 L2 R2)")
    for name, clip, gt in clips:
        if args.mode == "external":
            state, fb = io.load_state(_sub(args.external, name))
            if fb is None:
                raise ValueError(f"{_sub(args.external, name)}: external predictions need "
                                 "flow_bwd.flo")
        else:
            state, fb = init_state(clip, cfg.init_config(), args.mode, gt)
        io.save_state(_sub(args.out_dir, name), state, fb)
        log.info("initialised %s", name or args.clip[0])


def _examples(clip_path, init_dir, first, limit, with_gt=True):
    out = []
    for name, d in _clips(clip_path, first, limit):
        x0, fb = io.load_state(_sub(init_dir, name))
        if fb is None:
            raise ValueError(f"{_sub(init_dir, name)}: missing flow_bwd.flo")
        clip = io.load_clip(d, flow_bwd=fb)
        gt, valid = (None, None)
        if with_gt and io.has_ground_truth(d):
            gt, valid = io.load_ground_truth(d)
        out.append((name, TrainingExample(clip, x0, gt, valid)))
    return out


def cmd_train(args, cfg):
    if args.mode is not None:
        cfg.mode = args.mode
    tcfg = cfg.train_config()
    exs = [e for _, e in _examples(args.dataset_dir, args.init_dir, args.first, args.limit,
                                   with_gt=tcfg.mode == "sup")]
    if tcfg.mode == "sup" and any(e.gt is None for e in exs):
        raise ValueError("supervised training needs ground truth in every clip")
    params, history = train_refiner(exs, tcfg, init_params(tcfg.width, tcfg.seed))
    io.save_params(args.out, params)
    for k, h in enumerate(history):
        log.info("epoch %d objective %.6g", k, h)


def cmd_refine(args, cfg):
    loss_cfg = cfg.loss_config()
    steps = cfg.steps if args.steps is None else args.steps
    lr = cfg.descent_lr if args.lr is None else args.lr
    params = None
    if args.strategy == "learned":
        if args.params is None:
            raise ValueError("--strategy learned needs --params FILE (or 'none')")
        params = (init_params(cfg.width, cfg.seed) if args.params == "none"
                  else io.load_params(args.params))
    tables = []
    for name, ex in _examples(args.clip, args.init_dir, args.first, args.limit):
        if params is None:
            traj = descent_iterate(ex.clip, ex.x0, lr, steps, loss_cfg)
        else:
            traj = refine_iterate(ex.clip, ex.x0, params, steps, loss_cfg)
        io.save_state(_sub(args.out_dir, name), traj.states[-1], ex.clip.flow_bwd)
        if ex.gt is not None:
            tables.append(trajectory_report(traj, ex.gt, ex.valid))
        log.info("refined %s: L_cst %.6g -> %.6g", name or args.clip, traj.losses[0].total,
                 traj.losses[-1].total)
    if args.report:
        if not tables:
            raise ValueError("--report needs ground truth alongside the clips")
        write_csv(args.report, mean_rows(tables))


def cmd_eval(args, cfg):
    rows = []
    for name, d in _clips(args.gt_dir, args.first, args.limit):
        if not io.has_ground_truth(d):
            raise ValueError(f"{d}: no ground truth")
        gt, valid = io.load_ground_truth(d)
        pred, _ = io.load_state(_sub(args.pred_dir, name))
        rows.append([report_row(0, outlier_rates(pred, gt, valid))])
    table = mean_rows(rows)
    if args.report:
        write_csv(args.report, table)
    r = table[0]
    print(f"SF {100 * r['sf']:.2f}%  D1 {100 * r['d1']:.2f}%  D2 {100 * r['d2']:.2f}%  "
          f"F1 {100 * r['f1']:.2f}%  EPE(d1) {r['epe_d1']:.4f}  clips {len(rows)}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sfrefine", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, select=True):
        sp.add_argument("--config", help="key = value run configuration")
        if select:
            sp.add_argument("--first", type=int, default=0, help="index of the first clip")
            sp.add_argument("--limit", type=int, default=None, help="number of clips")

    g = sub.add_parser("gen", help="render synthetic clips with ground truth")
    g.add_argument("--out-dir", required=True)
    g.add_argument("--count", type=int, default=220)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=_parse_size, default=(96, 128), help="HxW (default 96x128)")
    g.add_argument("--channels", type=int, default=1, choices=(1, 3))
    g.add_argument("--noise", type=float, default=0.0)
    common(g, select=False)
    g.set_defaults(func=cmd_gen)

    i = sub.add_parser("init", help="initial scene flow and backward flow")
    i.add_argument("--clip", required=True, nargs="+",
                   help="clip or dataset directory, or four images L1 R1 L2 R2")
    i.add_argument("--out-dir", required=True)
    i.add_argument("--mode", choices=("block", "gt", "external"), default="block")
    i.add_argument("--external", help="prediction directory for --mode external")
    common(i)
    i.set_defaults(func=cmd_init)

    t = sub.add_parser("train", help="train the refinement network")
    t.add_argument("--dataset-dir", required=True)
    t.add_argument("--init-dir", required=True)
    t.add_argument("--out", required=True, help="parameter file")
    t.add_argument("--mode", choices=("sup", "selfsup"), default=None)
    common(t)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("refine", help="refine initial predictions")
    r.add_argument("--clip", required=True, help="clip or dataset directory")
    r.add_argument("--init-dir", required=True)
    r.add_argument("--out-dir", required=True)
    r.add_argument("--strategy", choices=("learned", "descent"), default="learned")
    r.add_argument("--params", help="refiner parameter file, or 'none' for the zero refiner")
    r.add_argument("--steps", type=int, default=None)
    r.add_argument("--lr", type=float, default=None, help="descent step size")
    r.add_argument("--report", help="per-step metrics CSV (needs ground truth)")
    common(r)
    r.set_defaults(func=cmd_refine)

    e = sub.add_parser("eval", help="outlier rates of predictions against ground truth")
    e.add_argument("--pred-dir", required=True)
    e.add_argument("--gt-dir", required=True)
    e.add_argument("--report", help="metrics CSV")
    common(e)
    e.set_defaults(func=cmd_eval)
    return p


def _set_threads():
    n = os.environ.get("SFREFINE_THREADS")
    if n:
        import cv2

        cv2.setNumThreads(int(n))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _set_threads()
        cfg = io.load_config(args.config)
        args.func(args, cfg)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"sfrefine: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
