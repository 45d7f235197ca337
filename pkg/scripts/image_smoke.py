#!/usr/bin/env python3
"""Conv teacher on synthetic 16x16 colour-blob images, distilled with the conv generator."""
import argparse
import warnings

from rgal.data import make_image_dataset, pretrain_teacher
from rgal.metrics import top1_accuracy
from rgal.models import ModelConfig, conv_classifier
from rgal.training import RGALConfig, TrainConfig, run_rgal


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--size", type=int, default=16)
    args = ap.parse_args()

    train = make_image_dataset(30, seed=args.seed, size=args.size)
    test = make_image_dataset(30, seed=args.seed + 1, size=args.size)
    teacher = pretrain_teacher(train, epochs=40, seed=args.seed, batch_size=30,
                               model=conv_classifier(args.seed, widths=(8, 16), size=args.size))
    print(f"teacher accuracy {top1_accuracy(teacher, test):.3f}")
    cfg = RGALConfig(
        train=TrainConfig(epochs=args.epochs, g_steps=5, s_steps=5, batch_size=16, seed=args.seed),
        model=ModelConfig(student_hidden=(4, 8), student_embedding_dim=8, generator="conv_generator",
                          latent_dim=32, image_size=args.size),
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        run_rgal(teacher, cfg, eval_set=test,
                 on_epoch=lambda st, m: print(f"epoch {m.epoch:3d} student accuracy {m.top1_accuracy:.3f}",
                                              flush=True))


if __name__ == "__main__":
    main()
