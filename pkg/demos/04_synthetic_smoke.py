"""
Train and evaluate on a synthetic VIS/IR set
============================================

Renders 20 identities, trains for a few epochs on the first five shots per
identity and modality, then queries the held-out IR shots against the
held-out VIS shots. Pass an epoch count as the first argument (default 3).
Expect near-chance numbers for short runs. At 40 epochs (about 13 minutes
on one CPU core) IR-to-VIS Rank-1 passes 0.9.
"""
import sys
import tempfile
from pathlib import Path

from wrimnet.config import RunConfig
from wrimnet.data import generate_synthetic_dataset, load_manifest, split_records, write_manifest
from wrimnet.evaluation import EvalProtocol, evaluate_model, format_table
from wrimnet.training import train

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 3
work = Path(tempfile.mkdtemp(prefix="wrim_demo_"))

manifest = generate_synthetic_dataset(20, 10, image_size=(64, 32), seed=0, out_dir=str(work))
records, _ = load_manifest(manifest)
train_recs, test_recs = split_records(records, 5)
write_manifest(work / "train.jsonl", train_recs)
write_manifest(work / "test.jsonl", test_recs)
print(len(train_recs), "training images,", len(test_recs), "held out, in", work)

cfg = RunConfig.from_dict({
    "network": {"input_height": 64, "input_width": 32},
    "miim": {"k_s": 2},
    "loss": {"cmkic_mean": True},
    "sampler": {"p_ids": 4, "k_per_modality": 4},
    "augment": {"erase": False, "pad": 4},
    "optimizer": {"kind": "adam", "base_lr": 1e-3, "warmup_epochs": 1,
                  "milestones": [max(1, epochs * 5 // 8)]},
    "data": {"train_manifest": str(work / "train.jsonl")},
    "epochs": epochs,
    "output_dir": str(work / "run"),
})
model, summary = train(cfg, progress=lambda step, epoch, losses: print(
    f"step {step:4d} epoch {epoch:3d} total {losses['total'].item():.3f}") if step % 10 == 0 else None)
print("trained", summary["steps"], "steps in", round(summary["seconds"]), "s")

protocol = EvalProtocol(mode="SYMMETRIC", direction="IR2VIS")
print(format_table(protocol, evaluate_model(model, test_recs, protocol)))
