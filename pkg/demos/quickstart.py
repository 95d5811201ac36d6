"""Train a small MiLoRA model on synthetic episodes and print one decoded summary.

Run from the repository root:  python3 demos/quickstart.py
Takes a few minutes on one core.
"""

import numpy as np

from milora import ModelConfig, TrainConfig, build_model, forward_summary, train
from milora import numkernel as nk
from milora.evalmetrics import frame_f1
from milora.model import decode_summary
from milora.synthdata import TOKEN_OFFSET, GeneratorConfig, generate_split

gen = GeneratorConfig()
train_set = generate_split(gen, 1024, seed=0)
val_set = generate_split(gen, 32, seed=10_000)

with nk.precision("f64"):
    model = build_model(ModelConfig(seed=0))
    result = train(model, train_set, val_set, TrainConfig(max_epochs=12, batch_size=16, seed=0))
    for rec in result.history:
        print(f"epoch {rec['epoch']}  loss {rec['train_loss']:.4f}  val f1 {rec['val_f1']:.3f}")

    ep = val_set[0]
    out = forward_summary(result.model, ep.frames)
    print("frame F1 on one episode:", round(frame_f1(out.importance.data, ep.importance), 3))
    print("reference frames:", [t - TOKEN_OFFSET for t in ep.summary])
    print("decoded frames:  ", [t - TOKEN_OFFSET for t in decode_summary(out.summary_logits.data)])
    print("importance > 0.5:", np.flatnonzero(out.importance.data > 0.5).tolist())
