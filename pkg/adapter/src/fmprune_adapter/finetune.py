"""Fine-tuning recipe for pruned models.

SGD with Nesterov momentum, matching the usual CIFAR schedule (batch 64,
weight decay 1.5e-3, momentum 0.9). Real accuracy recovery needs full
dataset epochs on a GPU; the --synthetic flag exists so the loop itself can
be smoke-tested anywhere.
"""

from __future__ import annotations

import argparse

import torch
from torch import nn
from torch.utils.data import DataLoader, TensorDataset


def synthetic_loader(batch_size, n=512, classes=10, image=16, seed=0):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(n, 3, image, image, generator=g)
    y = torch.randint(0, classes, (n,), generator=g)
    return DataLoader(TensorDataset(x, y), batch_size=batch_size, shuffle=True)


def cifar10_loader(batch_size, root="./data", train=True):
    import torchvision
    from torchvision import transforms

    tf = transforms.Compose(
        [
            transforms.RandomCrop(32, padding=4),
            transforms.RandomHorizontalFlip(),
            transforms.ToTensor(),
            transforms.Normalize(
                (0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)
            ),
        ]
    )
    ds = torchvision.datasets.CIFAR10(root, train=train, download=True, transform=tf)
    return DataLoader(ds, batch_size=batch_size, shuffle=train, num_workers=2)


def finetune(model, loader, epochs, lr=0.01, weight_decay=1.5e-3, momentum=0.9,
             device="cpu", log_every=50):
    model.to(device).train()
    opt = torch.optim.SGD(
        model.parameters(), lr=lr, momentum=momentum, nesterov=True,
        weight_decay=weight_decay,
    )
    loss_fn = nn.CrossEntropyLoss()
    for epoch in range(epochs):
        running = 0.0
        for step, (x, y) in enumerate(loader):
            x, y = x.to(device), y.to(device)
            opt.zero_grad()
            loss = loss_fn(model(x), y)
            loss.backward()
            opt.step()
            running += loss.item()
            if log_every and (step + 1) % log_every == 0:
                print(f"epoch {epoch + 1} step {step + 1}: loss {running / (step + 1):.4f}")
        print(f"epoch {epoch + 1}: mean loss {running / max(1, len(loader)):.4f}")
    model.eval()
    return model


def main(argv=None):
    ap = argparse.ArgumentParser(description="Fine-tune a (pruned) model")
    ap.add_argument("--model", required=True, help="torch.save'd module")
    ap.add_argument("--out", required=True)
    ap.add_argument("--epochs", type=int, default=1)
    ap.add_argument("--lr", type=float, default=0.01)
    ap.add_argument("--batch-size", type=int, default=64)
    ap.add_argument("--synthetic", action="store_true",
                    help="train on random data (loop smoke test only)")
    ap.add_argument("--data-root", default="./data")
    args = ap.parse_args(argv)
    model = torch.load(args.model, weights_only=False)
    if args.synthetic:
        loader = synthetic_loader(args.batch_size)
    else:
        loader = cifar10_loader(args.batch_size, root=args.data_root)
    finetune(model, loader, epochs=args.epochs, lr=args.lr)
    torch.save(model, args.out)
    print(f"fine-tuned model written to {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
