"""Train NLM and a no-internal-model actor at three noise levels over five seeds; write JSON and a markdown table."""
import argparse
import json
from pathlib import Path

from dreammpc import evaluation as ev
from dreammpc import schemas
from dreammpc.env import EnvConfig
from dreammpc.trainer import PpoConfig, TrainConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, default=Path("results/ablation"))
    ap.add_argument("--iters", type=int, default=300)
    ap.add_argument("--seeds", type=int, default=5)
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    report = ev.noise_ablation(EnvConfig(), PpoConfig(), TrainConfig(iterations=args.iters), seeds=range(args.seeds),
                               progress=lambda lv, v, s, r: print(f"{lv:6s} {v:4s} seed {s}: {r:.1f}", flush=True))
    (args.out / "ablation.json").write_text(json.dumps(schemas.tag("ablation/1", report), indent=2) + "\n")
    table = ev.ablation_markdown(report)
    (args.out / "ablation.md").write_text(table)
    print(table)


if __name__ == "__main__":
    main()
