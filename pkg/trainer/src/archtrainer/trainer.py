"""The trainer process: reads evaluate requests, streams epoch metrics.

One request is in flight at a time.  A reader thread keeps draining stdin so
stop directives take effect between epochs; the training loop checks a
shared stop set after each epoch.  Every line written to stdout is one
protocol JSON object; anything that goes wrong becomes an error message
rather than a crash.
"""

from __future__ import annotations

import argparse
import json
import queue
import sys
import threading

import numpy as np
import torch

from archtrainer.data import augment_batch, load_dataset, split_and_standardize
from archtrainer.net import ArchError, GraphNet, estimate_bytes

BATCH_SIZE = 64
LEARNING_RATE = 1e-3


def emit(obj: dict) -> None:
    sys.stdout.write(json.dumps(obj) + "\n")
    sys.stdout.flush()


class StopFlags:
    def __init__(self):
        self._stopped: set[int] = set()
        self._lock = threading.Lock()

    def stop(self, arch_id: int) -> None:
        with self._lock:
            self._stopped.add(arch_id)

    def stopped(self, arch_id: int) -> bool:
        with self._lock:
            return arch_id in self._stopped


def reader_loop(requests: "queue.Queue[dict | None]", stops: StopFlags) -> None:
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        try:
            msg = json.loads(line)
        except json.JSONDecodeError:
            emit({"type": "error", "arch_id": -1, "message": f"unparseable request: {line[:200]}"})
            continue
        if msg.get("type") == "stop":
            stops.stop(msg.get("arch_id", -1))
        else:
            requests.put(msg)
    requests.put(None)


def train_one(msg: dict, dataset, stops: StopFlags, args) -> None:
    arch_id = msg["arch_id"]
    doc = msg["graph"]
    max_epochs = int(msg["max_epochs"])
    seed = int(msg.get("seed", 0)) + args.seed

    estimate = estimate_bytes(doc, BATCH_SIZE)
    if args.mem_cap_mb is not None and estimate > args.mem_cap_mb * 1024 * 1024:
        emit({"type": "oom", "arch_id": arch_id, "estimated_bytes": estimate})
        return

    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    device = torch.device(args.device)

    (x_train, y_train), (x_val, y_val) = dataset
    net = GraphNet(doc).to(device)
    optimizer = torch.optim.Adam(net.parameters(), lr=LEARNING_RATE)

    def to_batch(x):
        # NHWC float64 -> NCHW float32
        return torch.from_numpy(np.ascontiguousarray(x.transpose(0, 3, 1, 2))).float().to(device)

    xv = to_batch(x_val)
    yv = torch.from_numpy(y_val).to(device)

    n = len(x_train)
    try:
        for epoch in range(1, max_epochs + 1):
            net.train()
            order = rng.permutation(n)
            total_loss = 0.0
            batches = 0
            for lo in range(0, n, BATCH_SIZE):
                idx = order[lo : lo + BATCH_SIZE]
                xb = x_train[idx]
                if args.augment:
                    xb = augment_batch(xb, rng)
                xb = to_batch(xb)
                yb = torch.from_numpy(y_train[idx]).to(device)
                optimizer.zero_grad()
                probs = net(xb)
                loss = torch.nn.functional.nll_loss(torch.log(probs.clamp_min(1e-12)), yb)
                loss.backward()
                optimizer.step()
                total_loss += float(loss.detach())
                batches += 1
            net.eval()
            with torch.no_grad():
                predictions = net(xv).argmax(dim=1)
                val_error = float((predictions != yv).float().mean())
            emit(
                {
                    "type": "epoch",
                    "arch_id": arch_id,
                    "epoch": epoch,
                    "train_loss": total_loss / max(batches, 1),
                    "val_metric": val_error,
                }
            )
            if stops.stopped(arch_id):
                break
        with torch.no_grad():
            final_error = float((net(xv).argmax(dim=1) != yv).float().mean())
        emit({"type": "final", "arch_id": arch_id, "val_metric": final_error})
    except RuntimeError as exc:
        if "out of memory" in str(exc).lower():
            emit({"type": "oom", "arch_id": arch_id, "estimated_bytes": estimate})
        else:
            raise


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="archtrainer", description=__doc__)
    parser.add_argument("--dataset", default="synthetic", choices=["synthetic", "npz"])
    parser.add_argument("--data-dir", default=None)
    parser.add_argument("--n-train", type=int, default=1000, help="synthetic dataset size")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--mem-cap-mb", type=int, default=None)
    parser.add_argument("--augment", action="store_true")
    args = parser.parse_args(argv)

    try:
        raw = load_dataset(args.dataset, args.data_dir, args.n_train, args.seed)
        dataset = split_and_standardize(*raw)
    except (OSError, ValueError) as exc:
        emit({"type": "error", "arch_id": -1, "message": f"dataset: {exc}"})
        return 2

    requests: "queue.Queue[dict | None]" = queue.Queue()
    stops = StopFlags()
    reader = threading.Thread(target=reader_loop, args=(requests, stops), daemon=True)
    reader.start()

    while True:
        msg = requests.get()
        if msg is None:
            return 0
        arch_id = msg.get("arch_id", -1)
        if msg.get("type") != "evaluate":
            emit({"type": "error", "arch_id": arch_id, "message": f"unexpected request type {msg.get('type')!r}"})
            continue
        try:
            train_one(msg, dataset, stops, args)
        except (ArchError, KeyError, TypeError, ValueError, RuntimeError) as exc:
            emit({"type": "error", "arch_id": arch_id, "message": f"{type(exc).__name__}: {exc}"})


if __name__ == "__main__":
    sys.exit(main())
