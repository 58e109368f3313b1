"""
A short grounding run
=====================

Trains a small model for a few hundred steps, then compares the frame
importance curve of one held-out sample with its key frames.
"""

import tempfile

import numpy as np

from coe.datagen import emit_dataset, load_dataset
from coe.model import QuestionCache
from coe.trainer import TrainConfig, evaluate, generate, new_model, train_sft

root = tempfile.mkdtemp()
emit_dataset(400, 0, seed=0, out_path=root, n_eval=50)
data = load_dataset(root)
questions = QuestionCache(data.table)

cfg = TrainConfig(lam=0.1, num_layers=1, grounding_loss_mode="logit", sft_steps=800, learning_rate=3e-3)
model = new_model(data.config, cfg)
print("untrained:", evaluate(model, data.eval, cfg, questions).summary())

train_sft(model, data.sft, cfg, questions, log_every=200)
print("trained:  ", evaluate(model, data.eval, cfg, questions).summary())

# importance per frame, with key frames marked
s = data.eval[0]
state, _, text = generate(model, s, questions)
keys = set(s.key_frame_indices.indices)
for i, a in enumerate(state.importance):
    print(f"{i:3d} {'*' if i in keys else ' '} {'#' * int(np.round(40 * a))}")
print(s.question)
print(text)
