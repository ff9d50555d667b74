"""The scanpath metric suite on hand-built examples.

Sequence score aligns fixation-cluster strings; the semantic variant aligns
fixated object categories, so scanpaths visiting the same kinds of objects in
the same order score high even when locations differ. Conditional metrics
score next-fixation distributions against ground truth prefixes.
"""

import numpy as np

from fovsearch import metrics
from fovsearch.core import Fixation, Scanpath, SearchTrial, fixation_to_action


def sp(*points):
    return Scanpath([Fixation(x, y) for x, y in points])


human = sp((256, 160), (80, 60), (430, 260), (100, 240))
model_good = sp((256, 160), (90, 70), (420, 250))
model_bad = sp((256, 160), (500, 20), (20, 300), (250, 20), (400, 100))

print("sequence score, similar path:  ",
      round(metrics.sequence_score(model_good, human), 3))
print("sequence score, dissimilar path:",
      round(metrics.sequence_score(model_bad, human), 3))

# A label map with two object regions of the same category: fixating either
# instance yields the same token, so SemSS can exceed plain SS.
label_map = np.zeros((320, 512), np.uint8)
label_map[40:120, 60:140] = 62    # "tv" on the left
label_map[200:300, 380:480] = 62  # another tv on the right
a = sp((256, 160), (100, 80))     # looks at the left tv
b = sp((256, 160), (430, 250))    # looks at the right tv
print("different instances, same category:",
      "SS =", round(metrics.sequence_score(a, b), 3),
      "SemSS =", round(metrics.semantic_sequence_score(a, b, label_map), 3))
print("token sequences:", metrics.semantic_sequence(a, label_map),
      metrics.semantic_sequence(b, label_map))

# Conditional information gain against a task density baseline.
trials = [SearchTrial("img", "tv", 0, False, human)]
baseline = metrics.DensityBaseline({"tv": np.full((20, 32), 1 / 640)})


def oracle_predictor(trial, prefix):
    probs = np.zeros(640)
    probs[fixation_to_action(trial.scanpath.fixations[len(prefix)])] = 1.0
    return probs


print("cIG of a perfect predictor over a uniform baseline:",
      round(metrics.conditional_ig(oracle_predictor, trials, baseline), 3),
      "bits (log2 640 =", round(np.log2(640), 3), ")")
print("cNSS of the same predictor:",
      round(metrics.conditional_nss(oracle_predictor, trials), 2))

# Human consistency: leave-one-subject-out pairwise scoring.
subjects = [SearchTrial("img", "tv", s, False, human) for s in range(4)]
print("human consistency of identical subjects:",
      metrics.human_consistency(subjects, metrics.sequence_score))

# Truncated scores compare only the first k new fixations.
pred = sp((256, 160), (80, 60), (430, 260), (490, 30), (30, 30))
print("SS =", round(metrics.sequence_score(pred, human), 3),
      " SS(2) =", round(metrics.truncated_score(pred, human, 2), 3),
      " SS(4) =", round(metrics.truncated_score(pred, human, 4), 3))
pred_trial = SearchTrial("img", "tv", -1, False, pred)
print("length MAE:", metrics.scanpath_length_mae([pred_trial], subjects))
