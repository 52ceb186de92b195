"""A miniature run of the full three-stage schedule on a synthetic caption
corpus, then greedy decoding against the training captions.

Stage 1 trains the projectors and gated cross-attention with everything
else frozen; stage 2 unlocks the LM; stage 3 unlocks the encoder at a much
smaller rate.  Takes about a minute.
"""

import tempfile
import time
from pathlib import Path

from picovlm.config import RunConfig
from picovlm.lm import ModeSpec, TokenSequence
from picovlm.training import mean_dataset_loss, run_pretrain

cfg = RunConfig({
    "seed": "0",
    "encoder.image_h": "16", "encoder.image_w": "16",
    "encoder.d_v": "32", "encoder.depth": "4", "encoder.heads": "4",
    "lm.d_l": "32", "lm.depth": "4", "lm.heads": "4", "lm.max_seq": "16",
    "selection.density": "0.5",
    "data.n": "8",
    "train.batch_size": "8",
    "stage1.total_iters": "100", "stage1.warmup_iters": "4",
    "stage2.total_iters": "250", "stage2.warmup_iters": "8",
    "stage3.total_iters": "40", "stage3.warmup_iters": "2",
})
dataset = cfg.dataset()
model = cfg.model(vocab_size=dataset.tokenizer.vocab_size)
print(f"corpus: {len(dataset.samples)} captioned scenes, "
      f"vocab {dataset.tokenizer.vocab_size}")
print(f"taps: {model.selection.pairs}")

t0 = time.time()
with tempfile.TemporaryDirectory() as out:
    checkpoints, stage_losses = run_pretrain(
        model, dataset, cfg.pretrain_schedules(), out, cfg.seed)
    for stage, loss in stage_losses.items():
        print(f"after stage {stage}: train loss {loss:.4f} nats/token")
    print(f"checkpoints written: {[Path(c).name for c in checkpoints]}")
print(f"training took {time.time() - t0:.0f}s")

mode = ModeSpec("hierarchical", selection=model.selection)
tok = dataset.tokenizer
print("\ngreedy decoding vs training captions:")
hits = 0
for sample in dataset.samples:
    out = model.generate_greedy(TokenSequence.for_ids([tok.bos_id]), sample.image,
                                mode, max_new=12, stop_id=tok.eos_id)
    decoded = tok.decode(out.ids)
    mark = "=" if decoded == sample.caption else "x"
    hits += mark == "="
    print(f"  [{mark}] {decoded}")
print(f"reproduced {hits}/{len(dataset.samples)}")
print(f"final mean loss: {mean_dataset_loss(model, dataset, mode):.4f}")
