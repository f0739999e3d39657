import logging
from typing import Dict, List, Optional, Tuple

import numpy as np

from .data_processor import Dataset

logger = logging.getLogger(__name__)


class DatasetHealthChecker:
    """
    Health checks run on a Dataset before training
    """

    def __init__(self, dataset: Dataset, expected_shape: Optional[Tuple[int, int]] = None,
                 imbalance_ratio: float = 1.5):
        self.dataset = dataset
        self.expected_shape = expected_shape
        self.imbalance_ratio = imbalance_ratio
        self.issues = []
        self.warnings = []
        self.info = []

    def run_comprehensive_check(self) -> Dict[str, List[str]]:
        """
        Run all dataset health checks and return categorized results

        Returns:
            Dictionary with 'critical', 'warning', and 'info' keys
        """
        self.issues = []
        self.warnings = []
        self.info = []

        self._check_size()
        self._check_image_shape()
        self._check_class_coverage()
        self._check_class_balance()
        self._check_pixel_statistics()

        return {
            'critical': self.issues,
            'warning': self.warnings,
            'info': self.info
        }

    def _check_size(self):
        if len(self.dataset) == 0:
            self.issues.append(f"{self.dataset.name} contains no samples")
        else:
            self.info.append(f"{self.dataset.name} contains {len(self.dataset)} samples "
                             f"of {self.dataset.image_shape[0]}x{self.dataset.image_shape[1]} pixels")

    def _check_image_shape(self):
        if self.expected_shape is not None and self.dataset.image_shape != tuple(self.expected_shape):
            self.issues.append(f"{self.dataset.name} images are {self.dataset.image_shape}, "
                               f"the model expects {tuple(self.expected_shape)}")

    def _check_class_coverage(self):
        if len(self.dataset) == 0:
            return
        counts = self.dataset.class_counts()
        missing = [str(label) for label, count in enumerate(counts) if count == 0]
        if missing:
            self.warnings.append(f"Classes with no samples: {', '.join(missing)}")

    def _check_class_balance(self):
        counts = self.dataset.class_counts()
        present = counts[counts > 0]
        if present.size == 0:
            return
        self.info.append("Samples per class: " + ", ".join(f"{label}={count}" for label, count in enumerate(counts)))
        ratio = present.max() / present.min()
        if ratio > self.imbalance_ratio:
            self.warnings.append(f"Class imbalance: largest class is {ratio:.2f}x the smallest")

    def _check_pixel_statistics(self):
        if len(self.dataset) == 0:
            return
        images = self.dataset.images
        per_image_range = images.max(axis=(1, 2)) - images.min(axis=(1, 2))
        constant = int(np.count_nonzero(per_image_range == 0))
        if constant:
            self.warnings.append(f"{constant} images have a single constant pixel value")
        self.info.append(f"Mean pixel value {images.mean():.4f}, std {images.std():.4f}")


def log_health_check_results(results: Dict[str, List[str]]) -> bool:
    """Log health check results; returns False when a critical issue was found"""
    for issue in results['critical']:
        logger.error("Dataset check failed: %s", issue)
    for warning in results['warning']:
        logger.warning("Dataset check: %s", warning)
    for info in results['info']:
        logger.info("Dataset check: %s", info)
    return not results['critical']
