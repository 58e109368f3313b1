"""
Scoring responses by hand
=========================

Takes one synthetic sample and scores a few hand-written responses.
Shows how the grounding, process and answer terms move.
"""

import tempfile

from coe.datagen import emit_dataset, load_dataset
from coe.reward import RewardWeights, score_text

# a tiny dataset is enough; we only need one sample with its ground truth
root = tempfile.mkdtemp()
emit_dataset(4, 0, seed=1, out_path=root, n_eval=4)
sample = load_dataset(root).eval[0]
truth = sample.ground_truth()

print("question:", sample.question)
print("reference:", sample.target_text())

weights = RewardWeights()
candidates = {
    "reference": sample.target_text(),
    "right answer, no evidence": f"<Temporal Anchors> </Temporal Anchors> "
    f"<Reasoning Draft> </Reasoning Draft> <Answer> {sample.answer} </Answer>",
    "wrong answer": sample.target_text().replace(f"<Answer> {sample.answer} </Answer>", "<Answer> ??? </Answer>"),
    "not the format": sample.answer,
}

for name, text in candidates.items():
    br, valid = score_text(text, truth, weights)
    print(f"{name:>26}: valid={valid!s:5} f1={br.f1_grounding:.2f} iou={br.iou_process:.2f} "
          f"answer={br.answer_correct} total={br.total:.3f}")
