"""Few-shot segmentation with uncertainty-based feature augmentation and class-shared memory."""
__version__ = "0.1.0"
