"""Train the small MetaVP and compare it with the copy-last-frame baseline.

    python3 scripts/run_smoke.py [--config configs/smoke.yaml] [--epochs N]
"""

import argparse
import logging

from ministl import config
from ministl.datagen import build_dataset
from ministl.harness import CopyLastFrame, evaluate, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/smoke.yaml")
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--device")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = config.load(args.config, epochs=args.epochs, device=args.device)
    rec = train(cfg.train, cfg.out, progress=True)
    test = build_dataset(cfg.train.test_spec())
    model = evaluate(rec.best_checkpoint, test, device=cfg.train.device)
    copy = evaluate(CopyLastFrame(cfg.train.resolved_model()), test)
    if rec.train_loss:
        print(f"train loss: epoch 1 {rec.train_loss[0]:.5f} -> final {rec.train_loss[-1]:.5f}")
    print(f"test mse (frame-sum): model {model.mse_paper:.2f}  copy-last {copy.mse_paper:.2f}")
    print(f"test ssim: model {model.ssim:.4f}  copy-last {copy.ssim:.4f}")
    print(f"run directory: {rec.run_dir} ({rec.wall_clock_s / 60:.1f} min)")


if __name__ == "__main__":
    main()
