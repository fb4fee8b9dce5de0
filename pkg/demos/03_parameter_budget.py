"""What the freeze policies actually train.

The point of the adapter is its parameter budget: a ViT-B/16-sized
backbone has ~86M weights, while the prompt-adapter configuration trains
a few hundred thousand.  This script prints the accountant's report for
the standard configuration (m=50 prompts, bottleneck width 20, depth 12,
embed dim 768) and shows the closed-form count, the enumerated count, and
the term-by-term reconciliation against the published reference totals
457,446 (every layer its own adapter) and 268,414 (adapters shared by
pairs of layers).

Run:  python3 demos/03_parameter_budget.py
"""

from dvpt import accounting
from dvpt.accounting import REFERENCE_TOTALS_VITB16, closed_form, report_from_config
from dvpt.peft import DvptConfig
from dvpt.vit import VitConfig

cfg = VitConfig(image_h=224, image_w=224, channels=3, patch_size=16,
                embed_dim=768, depth=12, heads=12, num_classes=5)

for share_every in (1, 2):
    adapter = DvptConfig(num_prompts=50, hidden_dim=20,
                         share_every=share_every, gate_init=0.0)
    report = report_from_config(cfg, adapter, "dvpt")
    print(f"=== share_every = {share_every} "
          f"(adapters per layer{'s, tied in pairs' if share_every == 2 else ''}) ===")
    print(accounting.format_report(
        report, reference_total=REFERENCE_TOTALS_VITB16[share_every]))
    print()

# the closed form counts only prompts + adapter projections:
#   m*d' + ceil(L/s) * (2*d*d' + d + d')
print("closed form, s=1:", f"{closed_form(50, 20, 768, 12, 1):,}")
print("closed form, s=2:", f"{closed_form(50, 20, 768, 12, 2):,}")

# the other policies, for contrast, on the same backbone
for mode in ("linear_probe", "vpt_only", "full_finetune"):
    adapter = DvptConfig(50, 20, 1, 0.0) if mode == "vpt_only" else None
    report = report_from_config(cfg, adapter, mode)
    print(f"{mode:14s} trains {report.trainable:>12,} of {report.total:,} "
          f"({100 * report.trainable_fraction:.4f}%)")
