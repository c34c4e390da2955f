# A walk through the synthetic cohort: tissue intensities, lesion load,
# faint lesions, lacune-like mimics and z-score normalization.
import numpy as np

from jsynth.data import PhantomSpec, generate_phantom, gaussian_normalize, plan_folds
from jsynth.metrics import render_overlay, write_ppm

spec = PhantomSpec(seed=0, n_subjects=12, slices=2, size=(64, 64), mimic_count=(2, 5))
subjects = generate_phantom(spec)
print(len(subjects), "subjects, volume dims", subjects[0].t1.dims)

# lesion load per subject
loads = np.array([s.label.voxels.sum() for s in subjects])
print("lesion voxels per subject:", loads.astype(int))
print("mean lesion fraction of the slice: %.4f" % (loads.sum() / sum(s.label.voxels.size for s in subjects)))

# lesions are bright in FLAIR; in T1 some are dark and some barely visible
s = subjects[0]
les = s.label.voxels > 0
brain = s.t1.voxels != 0
print("\nsubject", s.id)
print("  T1    lesion %.3f  normal brain %.3f" % (s.t1.voxels[les].mean(), s.t1.voxels[brain & ~les].mean()))
print("  FLAIR lesion %.3f  normal brain %.3f" % (s.flair.voxels[les].mean(), s.flair.voxels[brain & ~les].mean()))

# z-scoring over the brain leaves the background at exactly zero
z = gaussian_normalize(s.t1).voxels
print("  z-scored T1 over brain: mean %.2e  std %.4f  background max |v| %g"
      % (z[brain].mean(), z[brain].std(), np.abs(z[~brain]).max()))

# the 3-fold plan used for the desk experiment
for f in plan_folds([x.id for x in subjects], 3, 4, 2, seed=0):
    print("fold", f.fold, "test", f.test, "val", f.val)

# truth drawn as yellow (all false negatives of an empty prediction) over FLAIR
img = render_overlay(np.zeros_like(s.label.voxels[0]), s.label.voxels[0], s.flair.voxels[0])
write_ppm(img, "phantom_slice.ppm")
print("\nwrote phantom_slice.ppm")
