"""Audio screening from cough and breath recordings.

Feature extraction, 4-class pre-training of a deep backbone, transfer to a
binary screening head, shallow baselines and subject-level nested
cross-validation.
"""

__version__ = "0.1.0"
