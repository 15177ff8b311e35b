"""Train a very small model for a few epochs, then fit a held-out curve with it."""
import numpy as np
import torch

from splinegen.classical import classical_fit
from splinegen.dataset import GenConfig, generate_dataset, train_val_split
from splinegen.model import Example, ModelConfig, SplineGen, TrainConfig, fit_with_model, train
from splinegen.pinn import FinetuneConfig, pinn_finetune

torch.manual_seed(0)
torch.set_num_threads(1)

records = generate_dataset(GenConfig(sample_range=(30, 60)), 200, seed=1)
train_recs, val_recs = train_val_split(records, 0.8, seed=1)
train_ex = [Example.from_record(r) for r in train_recs]
val_ex = [Example.from_record(r) for r in val_recs]

model = SplineGen(ModelConfig(d_emb=32, d_attn=32, n_heads=2, n_layers=1))
history = train(model, train_ex, val_ex, TrainConfig(epochs=5),
                on_epoch=lambda row: print(f"epoch {row['epoch']}: val loss {row['val_total']:.3f}"))

rec = val_recs[0]
curve, result, report = fit_with_model(model, rec.samples)
print(f"generated {len(result['knots'])} interior knots "
      f"(truth {rec.curve.n_ctrl - rec.curve.degree - 1}), max error {report.max_error:.3e}")
_, _, base = classical_fit(rec.ordered_points, 3, rec.curve.n_ctrl, "centripetal", "ktp")
print(f"centripetal+KTP on the ordered points: max error {base.max_error:.3e}")

# the permutation recovered by the pointer decoder
order = np.asarray(result["indices"])
print("first ten visited points:", order[:10])

ft = pinn_finetune(model, train_recs[:32], FinetuneConfig(batch_size=32))
print(f"fine-tune: mean fit loss {ft.initial_loss:.4f} -> {ft.epoch_losses[-1]:.4f}")
