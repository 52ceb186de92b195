"""Cost accounting: the order-of-growth formulas next to exact instrumented
multiply-accumulate counts, and the scaling argument in numbers.

The headline structural fact: in hierarchical mode the LM-internal cost
(its self-attention, MLPs, head) does not grow with the number of image
patches, because visual tokens never enter the LM's own sequence.
"""

import numpy as np

from picovlm.encoder import EncoderConfig, select_layers
from picovlm.flops import LLM_INTERNAL, analytic_flops, flop_report
from picovlm.lm import LMConfig
from picovlm.model import VisionLanguageModel


def build(img):
    enc_cfg = EncoderConfig(image_h=img, image_w=img, channels=3, patch_size=4,
                            d_v=32, depth=8, heads=4)
    lm_cfg = LMConfig(vocab_size=64, d_l=32, depth=4, heads=4, max_seq=77)
    sel = select_layers(8, 4, 0.25, "uniform")
    return VisionLanguageModel(enc_cfg, lm_cfg, sel, seed=0)


n_text = 16
print(f"{'img':>5} {'N_v':>5} {'hier MACs':>12} {'baseline MACs':>14} "
      f"{'ratio':>6} {'lm-internal(hier)':>18}")
for img in (16, 32, 64):
    model = build(img)
    hier = flop_report(model, n_text, "hierarchical")
    base = flop_report(model, n_text, "concat")
    assert hier.measured == hier.expected and base.measured == base.expected
    internal = sum(hier.measured.get(k, 0) for k in LLM_INTERNAL)
    print(f"{img:>5} {model.enc_cfg.n_tokens:>5} {hier.measured_total:>12} "
          f"{base.measured_total:>14} "
          f"{hier.measured_total / base.measured_total:>6.2f} {internal:>18}")

print("\nper-component ledger at img=32, hierarchical mode:")
model = build(32)
report = flop_report(model, n_text, "hierarchical")
for comp, macs in sorted(report.measured.items()):
    print(f"  {comp:>10}: {macs:>12}  (closed form {report.expected[comp]})")

print("\norder-of-growth terms at illustrative large dims "
      "(L_l=24, d=1024, N_t=64, L_s=6):")
for n_v in (576, 2304):
    self_f = analytic_flops(24, 1024, n_v, 64, 6, "self-attn")
    cross_f = analytic_flops(24, 1024, n_v, 64, 6, "cross-attn")
    print(f"  N_v={n_v}: cross/self = {cross_f['total'] / self_f['total']:.4f}")
