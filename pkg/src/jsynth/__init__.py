"""Joint FLAIR synthesis and white-matter-lesion segmentation on a small numpy autodiff core."""

__version__ = "0.1.0"
