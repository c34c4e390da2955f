# Unimodal, offline and joint training on one fold of a small phantom cohort,
# then per-regime Dice / FPR / FNR and MAE / PSNR of the synthetic FLAIR.
# Small nets and few epochs so it finishes in seconds.
import numpy as np

from jsynth.data import PhantomSpec, generate_phantom, plan_folds, preprocess_subject
from jsynth.train import Regime, TrainConfig, evaluate_subject, train

subjects = [preprocess_subject(s) for s in generate_phantom(PhantomSpec(seed=0, size=(32, 32), mimic_count=(1, 3)))]
fold = plan_folds([s.id for s in subjects], 3, 4, 2, seed=0)[0]
test = [s for s in subjects if s.id in fold.test]
print("train", fold.train, "\nval", fold.val, "\ntest", fold.test)

for regime in Regime:
    cfg = TrainConfig(regime=regime, epochs=8, batch_size=2, lr=2e-3, slice_size=(32, 32),
                      depth=2, base_filters=8, seed=0)
    res = train(subjects, fold, cfg)
    rows = [evaluate_subject(res, s, regime)[0] for s in test]
    val = [c.val_dice for c in res.curves]
    print("\n%s: selected epoch %d, val dice by epoch %s" % (regime.value, res.selected_epoch,
                                                            " ".join("%.2f" % v for v in val)))
    mean = lambda k: np.mean([getattr(r, k) for r in rows if getattr(r, k) is not None])
    line = "  test dsc %.3f  fpr %.3f  fnr %.3f" % (mean("dsc"), mean("fpr"), mean("fnr"))
    if regime != Regime.UNIMODAL:
        line += "  synth mae %.4f  psnr %.2f dB" % (mean("mae"), mean("psnr"))
    print(line)
